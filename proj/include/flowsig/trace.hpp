// SPDX-License-Identifier: Apache-2.0
//
// Residual-stream trace model: boundary states, per-block attention and MLP
// contributions, boundary normalization affines, readout, and token masks,
// plus the FSIG binary format.
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/io.hpp"

#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flowsig {

enum class NormKind : std::uint8_t { LayerNorm = 0, RMSNorm = 1 };

inline const char* to_string(NormKind k) {
  return k == NormKind::LayerNorm ? "layernorm" : "rmsnorm";
}

// Boundary normalization N(u) = diag(gamma) * S(u) + beta.
struct BoundaryAffine {
  Vec gamma;
  Vec beta;
  double eps = 1e-5;
  NormKind kind = NormKind::LayerNorm;

  Eigen::Index dim() const { return gamma.size(); }

  // Per-token statistic in the denominator: centered variance s2 (LayerNorm)
  // or uncentered second moment m2 (RMSNorm).
  double moment(const Vec& u) const {
    const double d = static_cast<double>(u.size());
    if (kind == NormKind::LayerNorm) {
      const double mu = u.mean();
      return (u.array() - mu).square().sum() / d;
    }
    return u.squaredNorm() / d;
  }

  // Native normalization S(u).
  Vec standardize(const Vec& u) const {
    const double r = std::sqrt(moment(u) + eps);
    if (kind == NormKind::LayerNorm) return (u.array() - u.mean()).matrix() / r;
    return u / r;
  }

  Vec apply(const Vec& u) const {
    return (gamma.array() * standardize(u).array()).matrix() + beta;
  }
};

// Row-major dense float storage addressed by (i, j) rows of width `width`.
struct FloatGrid {
  int rows_i = 0, rows_j = 0, width = 0;
  std::vector<float> data;

  FloatGrid() = default;
  FloatGrid(int ni, int nj, int w)
      : rows_i(ni), rows_j(nj), width(w),
        data(static_cast<std::size_t>(ni) * nj * w, 0.0f) {}

  std::size_t offset(int i, int j) const {
    return (static_cast<std::size_t>(i) * rows_j + j) * width;
  }
  Eigen::Map<const Eigen::VectorXf> row(int i, int j) const {
    return {data.data() + offset(i, j), width};
  }
  Eigen::Map<Eigen::VectorXf> row(int i, int j) {
    return {data.data() + offset(i, j), width};
  }
  bool operator==(const FloatGrid&) const = default;
};

struct ResidualTrace {
  int d = 0;
  int B = 0;
  int T = 0;
  int V = 0;
  NormKind norm_kind = NormKind::LayerNorm;
  double eps_bn = 1e-5;
  std::uint64_t seed = 0;
  std::int8_t label = -1;
  // When false, boundary 0 is the raw embedding output (zero affine) and the
  // affine arrays hold B entries, entry i producing boundary i+1. When true,
  // they hold B+1 entries indexed by boundary.
  bool b0_normalized = false;
  // Last valid depth step; -1 selects the default (every step, B-1).
  std::int32_t b_eff = -1;

  std::vector<float> gamma;  // n_affines x d
  std::vector<float> beta;   // n_affines x d
  std::vector<float> W;      // V x d readout rows
  FloatGrid H;               // T x (B+1) x d boundary states
  FloatGrid HRAW;            // T x B x d pre-normalization states
  FloatGrid O;               // T x B x d attention contributions
  FloatGrid M;               // T x B x d MLP contributions
  std::vector<std::uint8_t> amask;  // T
  std::vector<std::uint8_t> emask;  // T
  // Optional map from readout row to original vocabulary id, present when
  // the exporter kept only a subset of rows.
  std::vector<std::uint32_t> vocab_map;

  static ResidualTrace allocate(int d, int B, int T, int V, bool b0_normalized = false) {
    ResidualTrace tr;
    tr.d = d; tr.B = B; tr.T = T; tr.V = V;
    tr.b0_normalized = b0_normalized;
    const auto na = static_cast<std::size_t>(tr.n_affines());
    tr.gamma.assign(na * d, 1.0f);
    tr.beta.assign(na * d, 0.0f);
    tr.W.assign(static_cast<std::size_t>(V) * d, 0.0f);
    tr.H = FloatGrid(T, B + 1, d);
    tr.HRAW = FloatGrid(T, B, d);
    tr.O = FloatGrid(T, B, d);
    tr.M = FloatGrid(T, B, d);
    tr.amask.assign(T, 1);
    tr.emask.assign(T, 1);
    return tr;
  }

  int n_affines() const { return b0_normalized ? B + 1 : B; }
  int effective_last_step() const { return b_eff < 0 ? B - 1 : std::min<int>(b_eff, B - 1); }
  bool eligible(int t) const { return amask[t] != 0 && emask[t] != 0; }

  void check_token(int t) const {
    if (t < 0 || t >= T) throw RangeError("token index " + std::to_string(t) + " outside [0," + std::to_string(T) + ")");
  }
  void check_boundary(int b) const {
    if (b < 0 || b > B) throw RangeError("boundary index " + std::to_string(b) + " outside [0," + std::to_string(B) + "]");
  }
  void check_block(int b) const {
    if (b < 0 || b >= B) throw RangeError("block index " + std::to_string(b) + " outside [0," + std::to_string(B) + ")");
  }

  Vec state(int t, int b) const { check_token(t); check_boundary(b); return H.row(t, b).cast<double>(); }
  Vec raw(int t, int b) const { check_token(t); check_block(b); return HRAW.row(t, b).cast<double>(); }
  Vec attn(int t, int b) const { check_token(t); check_block(b); return O.row(t, b).cast<double>(); }
  Vec mlp(int t, int b) const { check_token(t); check_block(b); return M.row(t, b).cast<double>(); }

  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
  readout() const {
    return {W.data(), V, d};
  }
  Vec readout_row(int y) const {
    return Eigen::Map<const Eigen::VectorXf>(W.data() + static_cast<std::size_t>(y) * d, d).cast<double>();
  }

  // Affine that produced boundary b, or nullopt for a raw boundary 0.
  std::optional<BoundaryAffine> affine(int b) const {
    check_boundary(b);
    int idx = b0_normalized ? b : b - 1;
    if (idx < 0) return std::nullopt;
    BoundaryAffine a;
    a.gamma = Eigen::Map<const Eigen::VectorXf>(gamma.data() + static_cast<std::size_t>(idx) * d, d).cast<double>();
    a.beta = Eigen::Map<const Eigen::VectorXf>(beta.data() + static_cast<std::size_t>(idx) * d, d).cast<double>();
    a.eps = eps_bn;
    a.kind = norm_kind;
    return a;
  }

  Vec beta_at(int b) const {
    auto a = affine(b);
    return a ? a->beta : Vec::Zero(d);
  }

  // Throws StructuralError on any shape, mask or gain violation.
  void validate() const {
    auto fail = [](const std::string& m) { throw StructuralError(m); };
    if (d <= 0 || B <= 0 || T <= 0 || V <= 0) fail("nonpositive dimension");
    const auto na = static_cast<std::size_t>(n_affines()) * d;
    if (gamma.size() != na || beta.size() != na) fail("affine arrays do not match (B, d)");
    if (W.size() != static_cast<std::size_t>(V) * d) fail("readout does not match (V, d)");
    auto grid_ok = [&](const FloatGrid& g, int nj) {
      return g.rows_i == T && g.rows_j == nj && g.width == d &&
             g.data.size() == static_cast<std::size_t>(T) * nj * d;
    };
    if (!grid_ok(H, B + 1)) fail("state grid does not match (T, B+1, d)");
    if (!grid_ok(HRAW, B) || !grid_ok(O, B) || !grid_ok(M, B)) fail("block grids do not match (T, B, d)");
    if (amask.size() != static_cast<std::size_t>(T) || emask.size() != static_cast<std::size_t>(T)) fail("mask length != T");
    for (auto m : amask) if (m > 1) fail("attention mask entry not in {0,1}");
    for (auto m : emask) if (m > 1) fail("eligibility mask entry not in {0,1}");
    for (float g : gamma) if (!(g > 0.0f)) fail("nonpositive normalization gain");
    if (label < -1 || label > 1) fail("label not in {-1,0,1}");
    if (!vocab_map.empty() && vocab_map.size() != static_cast<std::size_t>(V)) fail("vocab map length != V");
  }

  bool operator==(const ResidualTrace&) const = default;
};

// Bias-centered state h(t,b) - beta_b.
inline Vec bias_center(const ResidualTrace& tr, int t, int b) {
  return tr.state(t, b) - tr.beta_at(b);
}

inline Vec logits(const ResidualTrace& tr, int t, int b) {
  if (static_cast<std::size_t>(tr.V) * tr.d != tr.W.size())
    throw StructuralError("readout shape does not match (V, d)");
  return tr.readout().cast<double>() * tr.state(t, b);
}

// Pre-normalization input of the boundary map that produced h(t, b+1).
inline Vec boundary_input(const ResidualTrace& tr, int t, int b) {
  return tr.raw(t, b) + tr.attn(t, b) + tr.mlp(t, b);
}

// || h(t,b+1) - N_{b+1}(hraw + o + m) ||.
inline double update_residual(const ResidualTrace& tr, int t, int b) {
  const auto aff = tr.affine(b + 1);
  return (tr.state(t, b + 1) - aff->apply(boundary_input(tr, t, b))).norm();
}

// Max over (t,b) of the update residual divided by (1 + ||h(t,b+1)||).
inline double max_update_inconsistency(const ResidualTrace& tr) {
  double worst = 0.0;
  for (int t = 0; t < tr.T; ++t)
    for (int b = 0; b < tr.B; ++b)
      worst = std::max(worst, update_residual(tr, t, b) / (1.0 + tr.state(t, b + 1).norm()));
  return worst;
}

struct ShellBand {
  double norm = 0;
  double lower = 0;
  double upper = 0;
  double identity_residual = 0;
};

// Exact-identity residual |‖S(u)‖² − d·x/(x+ε)| where x is s2 or m2.
inline double norm_identity_residual(const BoundaryAffine& a, const Vec& u) {
  const double x = a.moment(u);
  const double d = static_cast<double>(u.size());
  return std::abs(a.standardize(u).squaredNorm() - d * x / (x + a.eps));
}

// c(x) = sqrt(x / (x + eps)).
inline double band_constant(double x, double eps) { return std::sqrt(x / (x + eps)); }

// Norm of the bias-centered state together with the sqrt(d)-scaled band
// implied by the realized gains and the realized moment range over every
// attention-valid normalized state of this trace.
inline ShellBand shell_band(const ResidualTrace& tr, int t, int b) {
  tr.check_token(t);
  if (b < 1 || b > tr.B) throw RangeError("shell band needs a normalized boundary b >= 1");
  const auto aff = tr.affine(b);
  double vmin = std::numeric_limits<double>::infinity(), vmax = 0.0;
  for (int tt = 0; tt < tr.T; ++tt) {
    if (!tr.amask[tt]) continue;
    for (int bb = 0; bb < tr.B; ++bb) {
      const double x = aff->moment(boundary_input(tr, tt, bb));
      vmin = std::min(vmin, x);
      vmax = std::max(vmax, x);
    }
  }
  if (!std::isfinite(vmin)) vmin = vmax = aff->moment(boundary_input(tr, t, b - 1));
  const auto g = Eigen::Map<const Eigen::VectorXf>(tr.gamma.data(), static_cast<Eigen::Index>(tr.gamma.size()));
  const double gmin = g.minCoeff(), gmax = g.maxCoeff();
  const double sd = std::sqrt(static_cast<double>(tr.d));
  ShellBand out;
  out.norm = bias_center(tr, t, b).norm();
  out.lower = gmin * band_constant(vmin, tr.eps_bn) * sd;
  out.upper = gmax * band_constant(vmax, tr.eps_bn) * sd;
  out.identity_residual = norm_identity_residual(*aff, boundary_input(tr, t, b - 1));
  return out;
}

// ---------------------------------------------------------------------------
// FSIG file format (version 1)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kTraceVersion = 1;

inline void save_trace(const ResidualTrace& tr, const std::string& path) {
  tr.validate();
  io::ContainerWriter w("FSIG", kTraceVersion);
  io::ByteWriter hdr;
  hdr.put<std::uint32_t>(tr.d);
  hdr.put<std::uint32_t>(tr.B);
  hdr.put<std::uint32_t>(tr.T);
  hdr.put<std::uint32_t>(tr.V);
  hdr.put<std::uint8_t>(static_cast<std::uint8_t>(tr.norm_kind));
  hdr.put<double>(tr.eps_bn);
  hdr.put<std::uint64_t>(tr.seed);
  hdr.put<std::int8_t>(tr.label);
  hdr.put<std::uint8_t>(tr.b0_normalized ? 1 : 0);
  hdr.put<std::int32_t>(tr.b_eff);
  hdr.put<std::uint8_t>(tr.vocab_map.empty() ? 0 : 1);
  w.section(hdr.bytes());
  w.array_section<float>(tr.gamma);
  w.array_section<float>(tr.beta);
  w.array_section<float>(tr.W);
  w.array_section<float>(tr.H.data);
  w.array_section<float>(tr.HRAW.data);
  w.array_section<float>(tr.O.data);
  w.array_section<float>(tr.M.data);
  w.array_section<std::uint8_t>(tr.amask);
  w.array_section<std::uint8_t>(tr.emask);
  if (!tr.vocab_map.empty()) w.array_section<std::uint32_t>(tr.vocab_map);
  w.save(path);
}

inline ResidualTrace load_trace(const std::string& path) {
  io::ContainerReader r(path, "FSIG", kTraceVersion);
  ResidualTrace tr;
  io::ByteReader hdr(r.section("HEADER"), "HEADER");
  tr.d = static_cast<int>(hdr.get<std::uint32_t>());
  tr.B = static_cast<int>(hdr.get<std::uint32_t>());
  tr.T = static_cast<int>(hdr.get<std::uint32_t>());
  tr.V = static_cast<int>(hdr.get<std::uint32_t>());
  const auto kind = hdr.get<std::uint8_t>();
  if (kind > 1) throw FormatError("section HEADER: unknown norm kind");
  tr.norm_kind = static_cast<NormKind>(kind);
  tr.eps_bn = hdr.get<double>();
  tr.seed = hdr.get<std::uint64_t>();
  tr.label = hdr.get<std::int8_t>();
  tr.b0_normalized = hdr.get<std::uint8_t>() != 0;
  tr.b_eff = hdr.get<std::int32_t>();
  const bool has_map = hdr.get<std::uint8_t>() != 0;
  if (!hdr.at_end()) throw FormatError("section HEADER: trailing bytes");
  if (tr.d <= 0 || tr.B <= 0 || tr.T <= 0 || tr.V <= 0 || tr.d > (1 << 20) || tr.B > (1 << 16) ||
      tr.T > (1 << 24) || tr.V > (1 << 26))
    throw FormatError("section HEADER: implausible dimensions");

  const auto d = static_cast<std::size_t>(tr.d);
  const auto na = static_cast<std::size_t>(tr.n_affines());
  const auto T = static_cast<std::size_t>(tr.T);
  tr.gamma = r.array_section<float>("GAMMA", na * d);
  tr.beta = r.array_section<float>("BETA", na * d);
  tr.W = r.array_section<float>("W", static_cast<std::size_t>(tr.V) * d);
  auto grid = [&](const char* name, int nj) {
    FloatGrid g;
    g.rows_i = tr.T; g.rows_j = nj; g.width = tr.d;
    g.data = r.array_section<float>(name, T * static_cast<std::size_t>(nj) * d);
    return g;
  };
  tr.H = grid("H", tr.B + 1);
  tr.HRAW = grid("HRAW", tr.B);
  tr.O = grid("O", tr.B);
  tr.M = grid("M", tr.B);
  tr.amask = r.array_section<std::uint8_t>("AMASK", T);
  tr.emask = r.array_section<std::uint8_t>("EMASK", T);
  if (has_map) tr.vocab_map = r.array_section<std::uint32_t>("VMAP", static_cast<std::size_t>(tr.V));
  if (!r.at_end()) throw FormatError("section TRAILER: unexpected trailing data");
  try {
    tr.validate();
  } catch (const StructuralError& e) {
    throw FormatError(std::string("section CONTENT: ") + e.what());
  }
  return tr;
}

}  // namespace flowsig
