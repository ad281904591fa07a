// SPDX-License-Identifier: Apache-2.0
//
// Competitor ranking and readout-aligned window bases.
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/trace.hpp"
#include "flowsig/windowing.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>

#include <numeric>
#include <random>
#include <vector>

namespace flowsig {

struct CompetitorSet {
  int top = -1;
  std::vector<int> competitors;
};

// Top token and the next K indices under a (-logit, index) ordering.
inline CompetitorSet rank_competitors(const Vec& logits, int K) {
  if (logits.size() == 0) throw ParameterError("empty logits");
  if (K < 1) throw ParameterError("competitor count K must be >= 1");
  const int V = static_cast<int>(logits.size());
  const int take = std::min(V, K + 1);
  std::vector<int> idx(V);
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](int a, int b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + take, idx.end(), before);
  CompetitorSet out;
  out.top = idx[0];
  out.competitors.assign(idx.begin() + 1, idx.begin() + take);
  return out;
}

struct DirectionParams {
  int K = 32;
  double eps_a = 1e-8;
  double tau_a = 1e-8;
};

// Unit-ish competitor differences w_top - w_y for one (t, b), appended to
// `out`. Differences shorter than tau_a are dropped.
inline void append_competitor_directions(const ResidualTrace& tr, int t, int b,
                                         const DirectionParams& p, std::vector<Vec>& out) {
  const auto cs = rank_competitors(logits(tr, t, b), p.K);
  const Vec top = tr.readout_row(cs.top);
  for (int y : cs.competitors) {
    Vec a = top - tr.readout_row(y);
    const double n = a.norm();
    if (n < p.tau_a) continue;
    out.push_back(a / (n + p.eps_a));
  }
}

// Direction pool for window j: blocks in the window, eligible tokens,
// competitors in rank order.
inline std::vector<Vec> collect_directions(const ResidualTrace& tr, const WindowSchedule& w,
                                           int j, const DirectionParams& p) {
  if (j < 0 || j >= w.J) throw RangeError("window index outside schedule");
  std::vector<Vec> out;
  for (int b = w.starts[j]; b <= w.ends[j]; ++b)
    for (int t = 0; t < tr.T; ++t)
      if (tr.eligible(t)) append_competitor_directions(tr, t, b, p, out);
  return out;
}

enum class BasisProvenance : std::uint8_t { Fitted = 0, Fallback = 1, RankCompleted = 2 };

struct WindowBasis {
  Mat U;  // d x k, orthonormal columns
  BasisProvenance provenance = BasisProvenance::Fitted;
  int rank = 0;           // numerical rank used from the SVD
  int n_directions = 0;   // rows of the (capped) direction matrix
  Vec singular_values;    // top-k singular values of the direction matrix
};

// Identifies the subsample stream for one window fit.
struct SeedTuple {
  std::uint64_t sample_id = 0;
  std::uint64_t window = 0;
  std::uint64_t seed0 = 0;
};

// Thin Q factor of a d x k matrix with full column rank.
inline Mat thin_q(const Mat& A) {
  Eigen::HouseholderQR<Mat> qr(A);
  return qr.householderQ() * Mat::Identity(A.rows(), A.cols());
}

// Extends the orthonormal columns of `partial` to k columns using the
// projections of the reference columns (identity) onto the complement.
// Reference columns that are numerically inside the current span are
// skipped.
inline Mat complete_basis(const Mat& partial, int d, int k) {
  Mat cols(d, k);
  int have = static_cast<int>(partial.cols());
  cols.leftCols(have) = partial;
  for (int g = 0; g < d && have < k; ++g) {
    Vec v = Vec::Unit(d, g);
    // Two Gram-Schmidt passes keep the completion orthogonal to 1e-15.
    for (int pass = 0; pass < 2; ++pass)
      v -= cols.leftCols(have) * (cols.leftCols(have).transpose() * v);
    const double n = v.norm();
    if (n < 1e-6) continue;
    cols.col(have++) = v / n;
  }
  return thin_q(cols);
}

inline Mat fallback_basis(int d, int k) { return Mat::Identity(d, k); }

// Top-k right singular vectors of the stacked (and capped) directions,
// re-orthonormalized; deterministic fallbacks for empty or rank-deficient
// pools.
inline WindowBasis fit_basis(const std::vector<Vec>& directions, int d, int k, int cap,
                             const SeedTuple& seed) {
  if (k < 1 || k > d) throw ParameterError("subspace dimension k must satisfy 1 <= k <= d");
  if (cap < 1) throw ParameterError("direction cap must be >= 1");

  std::vector<int> rows(directions.size());
  std::iota(rows.begin(), rows.end(), 0);
  if (static_cast<int>(rows.size()) > cap) {
    // Partial Fisher-Yates: the first `cap` slots are a uniform subsample.
    std::mt19937_64 rng(fnv1a64({seed.sample_id, seed.window, seed.seed0}));
    for (int i = 0; i < cap; ++i) {
      const auto j = i + static_cast<int>(uniform_index(rng, rows.size() - i));
      std::swap(rows[i], rows[j]);
    }
    rows.resize(cap);
  }

  WindowBasis out;
  out.n_directions = static_cast<int>(rows.size());
  out.singular_values = Vec::Zero(k);
  if (rows.empty()) {
    out.U = fallback_basis(d, k);
    out.provenance = BasisProvenance::Fallback;
    return out;
  }

  Mat D(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (directions[rows[i]].size() != d) throw StructuralError("direction length != d");
    D.row(static_cast<Eigen::Index>(i)) = directions[rows[i]].transpose();
  }
  Eigen::JacobiSVD<Mat> svd(D, Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  const double tol = sv.size() ? sv[0] * std::max(D.rows(), D.cols()) *
                                     std::numeric_limits<double>::epsilon()
                               : 0.0;
  int r = 0;
  while (r < sv.size() && sv[r] > tol) ++r;
  const int kk = std::min<int>(k, static_cast<int>(sv.size()));
  out.singular_values.head(kk) = sv.head(kk);

  if (r == 0) {
    out.U = fallback_basis(d, k);
    out.provenance = BasisProvenance::Fallback;
    return out;
  }
  if (r >= k) {
    out.U = thin_q(svd.matrixV().leftCols(k));
    out.rank = k;
    out.provenance = BasisProvenance::Fitted;
    return out;
  }
  out.U = complete_basis(thin_q(svd.matrixV().leftCols(r)), d, k);
  out.rank = r;
  out.provenance = BasisProvenance::RankCompleted;
  return out;
}

struct BasisParams {
  DirectionParams directions;
  int k = 16;
  int cap = 512;
  std::uint64_t seed0 = 0;
};

inline std::vector<WindowBasis> fit_window_bases(const ResidualTrace& tr, const WindowSchedule& w,
                                                 const BasisParams& p, std::uint64_t sample_id) {
  std::vector<WindowBasis> bases;
  bases.reserve(w.J);
  for (int j = 0; j < w.J; ++j)
    bases.push_back(fit_basis(collect_directions(tr, w, j, p.directions), tr.d, p.k, p.cap,
                              {sample_id, static_cast<std::uint64_t>(j), p.seed0}));
  return bases;
}

// ||U^T U - I||_F.
inline double orthonormality_defect(const Mat& U) {
  return (U.transpose() * U - Mat::Identity(U.cols(), U.cols())).norm();
}

}  // namespace flowsig
