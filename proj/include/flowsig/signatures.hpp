// SPDX-License-Identifier: Apache-2.0
//
// Transported flow signatures: moving coordinates, transported step and
// turning, robust centering, normalization-aware component updates, drift,
// and the per-sample event grid (FEVT format).
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/io.hpp"
#include "flowsig/subspace.hpp"
#include "flowsig/trace.hpp"
#include "flowsig/transport.hpp"
#include "flowsig/windowing.hpp"

#include <array>
#include <numbers>
#include <string>
#include <vector>

namespace flowsig {

enum class CenterMode : std::uint8_t { CoordMedian = 0, Weiszfeld = 1, Mean = 2 };
enum class AnchorMode : std::uint8_t { Start = 0, End = 1 };

inline const char* to_string(CenterMode m) {
  switch (m) {
    case CenterMode::CoordMedian: return "median";
    case CenterMode::Weiszfeld: return "weiszfeld";
    case CenterMode::Mean: return "mean";
  }
  return "?";
}
inline const char* to_string(AnchorMode m) { return m == AnchorMode::Start ? "start" : "end"; }

struct CenterParams {
  CenterMode mode = CenterMode::CoordMedian;
  int iters = 50;
  double eps_mu = 1e-8;
  double coincide_tol = 1e-10;
};

struct PipelineParams {
  int window_len = 8;
  int stride = 4;
  BasisParams basis;
  double tau_sigma = kDefaultTauSigma;
  CenterParams center;
  AnchorMode anchor = AnchorMode::Start;
  double eps_num = kEpsNum;
};

// ---------------------------------------------------------------------------
// Per-step primitives
// ---------------------------------------------------------------------------

inline Vec moving_coords(const Mat& U, const Vec& centered_state) {
  return U.transpose() * centered_state;
}

inline Vec moving_coords(const ResidualTrace& tr, const std::vector<WindowBasis>& bases,
                         const WindowSchedule& w, int t, int b) {
  return moving_coords(bases.at(w.window_of(b)).U, bias_center(tr, t, b));
}

struct TransportedStep {
  Vec delta;
  double s = 0;
};

inline TransportedStep transported_step(const Vec& p_next, const Vec& p_cur, const Mat& R) {
  TransportedStep out;
  out.delta = p_next - R * p_cur;
  out.s = out.delta.norm();
  return out;
}

// Angle between two vectors; Kahan's half-angle form stays accurate near 0
// and pi. Returns pi/2 (the arccos of a zero inner product) if either is 0.
inline double vector_angle(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::numbers::pi / 2;
  const Vec x = nb * a, y = na * b;
  return 2.0 * std::atan2((x - y).norm(), (x + y).norm());
}

// Angle between u_next and R u_cur with u = p / (||p|| + eps).
inline double turning_angle(const Vec& p_next, const Vec& p_cur, const Mat& R, double eps = kEpsNum) {
  const Vec u_next = p_next / (p_next.norm() + eps);
  const Vec u_cur = p_cur / (p_cur.norm() + eps);
  return vector_angle(u_next, R * u_cur);
}

// Coordinate-wise median, Weiszfeld geometric median, or mean; the empty set
// centers at zero.
inline Vec robust_center(const std::vector<Vec>& points, int k, const CenterParams& p = {}) {
  if (points.empty()) return Vec::Zero(k);
  const auto n = points.size();
  if (p.mode == CenterMode::CoordMedian) {
    Vec mu(k);
    std::vector<double> col(n);
    for (int i = 0; i < k; ++i) {
      for (std::size_t t = 0; t < n; ++t) col[t] = points[t][i];
      mu[i] = median_of(col);
    }
    return mu;
  }
  Vec mean = Vec::Zero(k);
  for (const auto& v : points) mean += v;
  mean /= static_cast<double>(n);
  if (p.mode == CenterMode::Mean) return mean;

  Vec mu = mean;
  for (int it = 0; it < p.iters; ++it) {
    Vec num = Vec::Zero(k);
    double den = 0.0;
    for (const auto& v : points) {
      const double dist = (v - mu).norm();
      if (dist <= p.coincide_tol) return v;
      const double wgt = 1.0 / (dist + p.eps_mu);
      num += wgt * v;
      den += wgt;
    }
    mu = num / den;
  }
  return mu;
}

// Norms of the centered increments; the center uses eligible tokens only.
inline std::vector<double> centered_steps(const std::vector<Vec>& deltas,
                                          const std::vector<std::uint8_t>& eligible,
                                          const CenterParams& p = {}) {
  if (deltas.empty()) return {};
  const int k = static_cast<int>(deltas.front().size());
  std::vector<Vec> pool;
  for (std::size_t t = 0; t < deltas.size(); ++t)
    if (eligible[t]) pool.push_back(deltas[t]);
  const Vec mu = robust_center(pool, k, p);
  std::vector<double> out(deltas.size());
  for (std::size_t t = 0; t < deltas.size(); ++t) out[t] = (deltas[t] - mu).norm();
  return out;
}

// Exact Jacobian-vector product of N(u) = Gamma S(u) + beta.
inline Vec norm_jvp(const BoundaryAffine& a, const Vec& u, const Vec& v) {
  const double d = static_cast<double>(u.size());
  if (a.kind == NormKind::RMSNorm) {
    const double r = std::sqrt(u.squaredNorm() / d + a.eps);
    const Vec dS = v / r - u * (u.dot(v) / (d * r * r * r));
    return a.gamma.cwiseProduct(dS);
  }
  const Vec cu = (u.array() - u.mean()).matrix();
  const Vec cv = (v.array() - v.mean()).matrix();
  const double s = std::sqrt(cu.squaredNorm() / d + a.eps);
  const Vec dS = cv / s - cu * (cu.dot(cv) / (d * s * s * s));
  return a.gamma.cwiseProduct(dS);
}

struct PathUpdate {
  Vec dq_attn;
  Vec dq_mlp;
  Vec dq;
  Vec dq_end;
  Vec eta;
  double c = 0;
  double rho = 0;
};

// Simpson nodes and weights on [0, 1].
inline constexpr std::array<double, 3> kSimpsonNodes{0.0, 0.5, 1.0};
inline constexpr std::array<double, 3> kSimpsonWeights{1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0};

// Attention and MLP injections pushed through the boundary Jacobian along
// x(alpha) = h_raw + alpha (o + m), projected to the target frame, together
// with the endpoint linearization mismatch.
inline PathUpdate path_integrated_update(const BoundaryAffine& a, const Vec& h_raw, const Vec& o,
                                         const Vec& m, const Mat& U_tgt, double eps = kEpsNum) {
  const Vec inj = o + m;
  Vec dh_attn = Vec::Zero(h_raw.size());
  Vec dh_mlp = Vec::Zero(h_raw.size());
  for (std::size_t i = 0; i < kSimpsonNodes.size(); ++i) {
    const Vec x = h_raw + kSimpsonNodes[i] * inj;
    dh_attn += kSimpsonWeights[i] * norm_jvp(a, x, o);
    dh_mlp += kSimpsonWeights[i] * norm_jvp(a, x, m);
  }
  PathUpdate out;
  out.dq_attn = U_tgt.transpose() * dh_attn;
  out.dq_mlp = U_tgt.transpose() * dh_mlp;
  out.dq = out.dq_attn + out.dq_mlp;
  out.c = out.dq.norm();
  out.dq_end = U_tgt.transpose() * norm_jvp(a, h_raw + inj, inj);
  out.eta = out.dq - out.dq_end;
  out.rho = out.eta.norm() / (out.c + eps);
  return out;
}

struct PerpRatios {
  double r_attn = 0;
  double r_mlp = 0;
};

inline PerpRatios perp_ratios(const Vec& dq_attn, const Vec& dq_mlp, const Vec& dq, const Vec& u_tgt,
                              double eps = kEpsNum) {
  auto perp = [&](const Vec& v) { return Vec(v - u_tgt.dot(v) * u_tgt); };
  const double den = perp(dq).norm() + eps;
  return {perp(dq_attn).norm() / den, perp(dq_mlp).norm() / den};
}

// Per-token median over valid depth steps; 0 when a token has none.
// values and valid are indexed [b][t].
inline std::vector<double> aggregate_over_depth(const std::vector<std::vector<double>>& values,
                                                const std::vector<std::vector<std::uint8_t>>& valid) {
  if (values.empty()) return {};
  const std::size_t T = values.front().size();
  std::vector<double> out(T, 0.0);
  std::vector<double> col;
  for (std::size_t t = 0; t < T; ++t) {
    col.clear();
    for (std::size_t b = 0; b < values.size(); ++b)
      if (valid[b][t]) col.push_back(values[b][t]);
    out[t] = col.empty() ? 0.0 : median_of(col);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Drift
// ---------------------------------------------------------------------------

// ||U U^T - V V^T||_2 = sin(theta_max) = sqrt(1 - sigma_min^2) of U^T V,
// evaluated as the top singular value of (I - U U^T) V. The square-root
// form loses half the digits when the subspaces nearly coincide.
inline double grassmann_drift(const Mat& U, const Mat& V) {
  if (U.rows() != V.rows() || U.cols() != V.cols()) throw StructuralError("drift frames have different shapes");
  const Mat resid = V - U * (U.transpose() * V);
  Eigen::JacobiSVD<Mat> svd(resid);
  return std::min(1.0, svd.singularValues()[0]);
}

// Same quantity from the largest singular value of the d x d projector
// difference.
inline double grassmann_drift_spectral(const Mat& U, const Mat& V) {
  const Mat diff = U * U.transpose() - V * V.transpose();
  Eigen::JacobiSVD<Mat> svd(diff);
  return svd.singularValues()[0];
}

// ||(P_next - P_prev) h|| / (||h|| + eps) without forming projectors.
inline double anchored_drift(const Mat& U_prev, const Mat& U_next, const Vec& h, double eps = kEpsNum) {
  const Vec diff = U_next * (U_next.transpose() * h) - U_prev * (U_prev.transpose() * h);
  return diff.norm() / (h.norm() + eps);
}

struct DriftSummary {
  std::vector<double> d_G;               // per adjacent window pair
  std::vector<std::vector<double>> chi;  // [pair][t]
  std::vector<double> D;                 // per token, sum over pairs
};

inline int anchor_block(const WindowSchedule& w, int j, AnchorMode mode) {
  return mode == AnchorMode::Start ? w.starts[j] : w.ends[j];
}

inline DriftSummary drift_metrics(const ResidualTrace& tr, const std::vector<WindowBasis>& bases,
                                  const WindowSchedule& w, AnchorMode anchor = AnchorMode::Start,
                                  double eps = kEpsNum) {
  DriftSummary out;
  out.D.assign(tr.T, 0.0);
  for (int j = 0; j + 1 < w.J; ++j) {
    const Mat& U0 = bases.at(j).U;
    const Mat& U1 = bases.at(j + 1).U;
    out.d_G.push_back(grassmann_drift(U0, U1));
    const int bstar = anchor_block(w, j, anchor);
    std::vector<double> row(tr.T);
    for (int t = 0; t < tr.T; ++t) {
      row[t] = anchored_drift(U0, U1, bias_center(tr, t, bstar), eps);
      out.D[t] += row[t];
    }
    out.chi.push_back(std::move(row));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Full per-sample signatures
// ---------------------------------------------------------------------------

struct StepFeatures {
  double s = 0;       // transported step
  double s_c = 0;     // centered step
  double theta = 0;   // turning angle
  double a_mag = 0;   // attention injection in the target frame
  double m_mag = 0;   // MLP injection in the target frame
  double c_mag = 0;   // path-integrated effective update
  double rho = 0;     // endpoint linearization mismatch ratio
  double r_attn = 0;
  double r_mlp = 0;
};

struct SignatureSet {
  int n_steps = 0;  // B depth steps b -> b+1, b in [0, B-1]
  int T = 0;
  std::vector<std::vector<StepFeatures>> steps;       // [b][t]
  std::vector<std::vector<std::uint8_t>> valid;       // [b][t]
  std::vector<std::vector<Vec>> deltas;               // [b][t] transported increments
  std::vector<Transport> transports;                  // [b]
  DriftSummary drift;
  std::vector<double> r_attn_tok, r_mlp_tok;
};

// Signatures for given window bases. Exposed separately from basis fitting
// so that gauge rotations of the bases can be checked directly.
inline SignatureSet compute_signatures(const ResidualTrace& tr, const WindowSchedule& w,
                                       const std::vector<WindowBasis>& bases, const PipelineParams& p) {
  if (static_cast<int>(bases.size()) != w.J) throw StructuralError("need one basis per window");
  const int B = tr.B, T = tr.T;
  const double eps = p.eps_num;

  // Moving coordinates at every boundary.
  std::vector<std::vector<Vec>> coords(B + 1, std::vector<Vec>(T));
  for (int b = 0; b <= B; ++b) {
    const Mat& U = bases[w.window_of(b)].U;
    const Vec beta = tr.beta_at(b);
    for (int t = 0; t < T; ++t) coords[b][t] = U.transpose() * (tr.state(t, b) - beta);
  }

  std::vector<std::uint8_t> eligible(T);
  for (int t = 0; t < T; ++t) eligible[t] = tr.eligible(t) ? 1 : 0;
  const int last = tr.effective_last_step();

  SignatureSet out;
  out.n_steps = B;
  out.T = T;
  out.steps.assign(B, std::vector<StepFeatures>(T));
  out.valid.assign(B, std::vector<std::uint8_t>(T, 0));
  out.deltas.assign(B, std::vector<Vec>(T));
  std::vector<std::vector<double>> ra(B, std::vector<double>(T)), rm(B, std::vector<double>(T));

  for (int b = 0; b < B; ++b) {
    const Transport tp = step_transport(w, bases, b, p.tau_sigma);
    const Mat& U_tgt = bases[w.window_of(b + 1)].U;
    const auto aff = tr.affine(b + 1);
    for (int t = 0; t < T; ++t) {
      auto& f = out.steps[b][t];
      const Vec& p_cur = coords[b][t];
      const Vec& p_next = coords[b + 1][t];
      auto st = transported_step(p_next, p_cur, tp.R);
      f.s = st.s;
      f.theta = turning_angle(p_next, p_cur, tp.R, eps);
      out.deltas[b][t] = std::move(st.delta);

      const Vec o = tr.attn(t, b), m = tr.mlp(t, b);
      f.a_mag = (U_tgt.transpose() * o).norm();
      f.m_mag = (U_tgt.transpose() * m).norm();
      const auto pu = path_integrated_update(*aff, tr.raw(t, b), o, m, U_tgt, eps);
      f.c_mag = pu.c;
      f.rho = pu.rho;
      const Vec u_tgt = p_next / (p_next.norm() + eps);
      const auto pr = perp_ratios(pu.dq_attn, pu.dq_mlp, pu.dq, u_tgt, eps);
      f.r_attn = ra[b][t] = pr.r_attn;
      f.r_mlp = rm[b][t] = pr.r_mlp;
      out.valid[b][t] = (eligible[t] && b <= last) ? 1 : 0;
    }
    const auto sc = centered_steps(out.deltas[b], eligible, p.center);
    for (int t = 0; t < T; ++t) out.steps[b][t].s_c = sc[t];
    out.transports.push_back(tp);
  }
  out.drift = drift_metrics(tr, bases, w, p.anchor, eps);
  out.r_attn_tok = aggregate_over_depth(ra, out.valid);
  out.r_mlp_tok = aggregate_over_depth(rm, out.valid);
  return out;
}

// ---------------------------------------------------------------------------
// Event grid
// ---------------------------------------------------------------------------

inline constexpr int kFeatureCount = 8;
inline constexpr std::array<const char*, kFeatureCount> kFeatureNames{
    "s", "s_c", "theta", "a_mag", "m_mag", "c_mag", "rho", "D"};

struct FlowEventGrid {
  int n_steps = 0;
  int T = 0;
  int b_eff = 0;
  std::int8_t label = -1;
  std::uint64_t sample_id = 0;
  PipelineParams params;
  std::vector<float> x;                 // [b][t][f]
  std::vector<std::uint8_t> valid;      // [b][t]
  std::vector<float> D;                 // [t]
  std::vector<float> r_attn_tok;        // [t]
  std::vector<float> r_mlp_tok;         // [t]
  std::string config;                   // key=value lines of the producing run

  std::size_t event(int b, int t) const { return static_cast<std::size_t>(b) * T + t; }
  const float* features(int b, int t) const { return x.data() + event(b, t) * kFeatureCount; }
  bool is_valid(int b, int t) const { return valid[event(b, t)] != 0; }
  bool operator==(const FlowEventGrid& o) const {
    return n_steps == o.n_steps && T == o.T && b_eff == o.b_eff && label == o.label &&
           sample_id == o.sample_id && x == o.x && valid == o.valid && D == o.D &&
           r_attn_tok == o.r_attn_tok && r_mlp_tok == o.r_mlp_tok && config == o.config;
  }
};

inline FlowEventGrid assemble_grid(const ResidualTrace& tr, const SignatureSet& sig, const PipelineParams& p,
                                   std::uint64_t sample_id) {
  FlowEventGrid g;
  g.n_steps = sig.n_steps;
  g.T = sig.T;
  g.b_eff = tr.effective_last_step();
  g.label = tr.label;
  g.sample_id = sample_id;
  g.params = p;
  g.x.assign(static_cast<std::size_t>(g.n_steps) * g.T * kFeatureCount, 0.0f);
  g.valid.assign(static_cast<std::size_t>(g.n_steps) * g.T, 0);
  for (int b = 0; b < g.n_steps; ++b)
    for (int t = 0; t < g.T; ++t) {
      if (!sig.valid[b][t]) continue;
      const auto& f = sig.steps[b][t];
      float* row = g.x.data() + g.event(b, t) * kFeatureCount;
      const std::array<double, kFeatureCount> v{f.s, f.s_c, f.theta, f.a_mag, f.m_mag, f.c_mag, f.rho,
                                                sig.drift.D[t]};
      for (int i = 0; i < kFeatureCount; ++i) row[i] = static_cast<float>(v[i]);
      g.valid[g.event(b, t)] = 1;
    }
  g.D.resize(g.T);
  g.r_attn_tok.resize(g.T);
  g.r_mlp_tok.resize(g.T);
  for (int t = 0; t < g.T; ++t) {
    g.D[t] = static_cast<float>(sig.drift.D[t]);
    g.r_attn_tok[t] = static_cast<float>(sig.r_attn_tok[t]);
    g.r_mlp_tok[t] = static_cast<float>(sig.r_mlp_tok[t]);
  }
  return g;
}

struct PipelineResult {
  WindowSchedule schedule;
  std::vector<WindowBasis> bases;
  SignatureSet signatures;
  FlowEventGrid grid;
};

inline PipelineResult run_pipeline(const ResidualTrace& tr, const PipelineParams& p, std::uint64_t sample_id) {
  tr.validate();
  PipelineResult r;
  r.schedule = build_schedule(tr.B, p.window_len, p.stride);
  r.bases = fit_window_bases(tr, r.schedule, p.basis, sample_id);
  r.signatures = compute_signatures(tr, r.schedule, r.bases, p);
  r.grid = assemble_grid(tr, r.signatures, p, sample_id);
  return r;
}

inline FlowEventGrid build_event_grid(const ResidualTrace& tr, const PipelineParams& p, std::uint64_t sample_id) {
  return run_pipeline(tr, p, sample_id).grid;
}

// ---------------------------------------------------------------------------
// FEVT file format (version 1)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kGridVersion = 1;

inline void save_grid(const FlowEventGrid& g, const std::string& path) {
  io::ContainerWriter w("FEVT", kGridVersion);
  io::ByteWriter h;
  h.put<std::uint32_t>(1);  // N
  h.put<std::uint32_t>(g.n_steps);
  h.put<std::int32_t>(g.b_eff);
  h.put<std::uint32_t>(g.T);
  h.put<std::uint32_t>(kFeatureCount);
  h.put<std::uint8_t>(static_cast<std::uint8_t>(g.params.anchor));
  h.put<std::uint8_t>(static_cast<std::uint8_t>(g.params.center.mode));
  h.put<std::int8_t>(g.label);
  h.put<std::uint64_t>(g.sample_id);
  const auto& p = g.params;
  h.put<std::int32_t>(p.window_len);
  h.put<std::int32_t>(p.stride);
  h.put<std::int32_t>(p.basis.directions.K);
  h.put<std::int32_t>(p.basis.k);
  h.put<std::int32_t>(p.basis.cap);
  h.put<double>(p.tau_sigma);
  h.put<double>(p.eps_num);
  h.put<double>(p.basis.directions.eps_a);
  h.put<double>(p.basis.directions.tau_a);
  h.put<double>(p.center.eps_mu);
  h.put<std::int32_t>(p.center.iters);
  h.put<std::uint64_t>(p.basis.seed0);
  w.section(h.bytes());
  w.array_section<float>(g.x);
  w.array_section<std::uint8_t>(g.valid);
  w.array_section<float>(g.D);
  std::vector<float> ratios(g.r_attn_tok);
  ratios.insert(ratios.end(), g.r_mlp_tok.begin(), g.r_mlp_tok.end());
  w.array_section<float>(ratios);
  w.array_section<char>(g.config);
  w.save(path);
}

inline FlowEventGrid load_grid(const std::string& path) {
  io::ContainerReader r(path, "FEVT", kGridVersion);
  io::ByteReader h(r.section("HEADER"), "HEADER");
  FlowEventGrid g;
  if (h.get<std::uint32_t>() != 1) throw FormatError("section HEADER: only N=1 grids are supported");
  g.n_steps = static_cast<int>(h.get<std::uint32_t>());
  g.b_eff = h.get<std::int32_t>();
  g.T = static_cast<int>(h.get<std::uint32_t>());
  if (h.get<std::uint32_t>() != kFeatureCount) throw FormatError("section HEADER: feature count != 8");
  const auto anchor = h.get<std::uint8_t>();
  const auto center = h.get<std::uint8_t>();
  if (anchor > 1 || center > 2) throw FormatError("section HEADER: unknown anchor/centering mode");
  g.params.anchor = static_cast<AnchorMode>(anchor);
  g.params.center.mode = static_cast<CenterMode>(center);
  g.label = h.get<std::int8_t>();
  g.sample_id = h.get<std::uint64_t>();
  auto& p = g.params;
  p.window_len = h.get<std::int32_t>();
  p.stride = h.get<std::int32_t>();
  p.basis.directions.K = h.get<std::int32_t>();
  p.basis.k = h.get<std::int32_t>();
  p.basis.cap = h.get<std::int32_t>();
  p.tau_sigma = h.get<double>();
  p.eps_num = h.get<double>();
  p.basis.directions.eps_a = h.get<double>();
  p.basis.directions.tau_a = h.get<double>();
  p.center.eps_mu = h.get<double>();
  p.center.iters = h.get<std::int32_t>();
  p.basis.seed0 = h.get<std::uint64_t>();
  if (!h.at_end()) throw FormatError("section HEADER: trailing bytes");
  if (g.n_steps <= 0 || g.T <= 0) throw FormatError("section HEADER: empty grid");
  const auto ev = static_cast<std::size_t>(g.n_steps) * g.T;
  g.x = r.array_section<float>("X", ev * kFeatureCount);
  g.valid = r.array_section<std::uint8_t>("VALID", ev);
  g.D = r.array_section<float>("DT", g.T);
  auto ratios = r.array_section<float>("RATIOS", 2 * static_cast<std::size_t>(g.T));
  g.r_attn_tok.assign(ratios.begin(), ratios.begin() + g.T);
  g.r_mlp_tok.assign(ratios.begin() + g.T, ratios.end());
  auto cfg = r.section("CONFIG");
  g.config.assign(reinterpret_cast<const char*>(cfg.data()), cfg.size());
  if (!r.at_end()) throw FormatError("section TRAILER: unexpected trailing data");
  for (auto v : g.valid) if (v > 1) throw FormatError("section VALID: entry not in {0,1}");
  return g;
}

}  // namespace flowsig
