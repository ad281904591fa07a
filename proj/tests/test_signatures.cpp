// SPDX-License-Identifier: Apache-2.0
#include "flowsig/signatures.hpp"

#include <gtest/gtest.h>

#include <numbers>

#include "fixtures.hpp"

using namespace flowsig;
using std::numbers::pi;

TEST(MovingCoords, OrthogonalStateAndCoordinateFrame) {
  const Mat U = Mat::Identity(5, 2);
  EXPECT_EQ(moving_coords(U, Vec{{0, 0, 1, 2, 3}}), Vec::Zero(2));
  EXPECT_EQ(moving_coords(U, Vec{{4, 5, 1, 2, 3}}), (Vec{{4, 5}}));
}

TEST(MovingCoords, MatvecOracle) {
  const auto tr = fixtures::random_trace(1);
  const auto w = build_schedule(tr.B, 4, 2);
  BasisParams bp;
  bp.k = 3;
  bp.directions.K = 4;
  const auto bases = fit_window_bases(tr, w, bp, 0);
  for (int b = 0; b <= tr.B; ++b) {
    const Vec p = moving_coords(tr, bases, w, 2, b);
    const Mat& U = bases[w.window_of(b)].U;
    const Vec h = bias_center(tr, 2, b);
    for (int i = 0; i < 3; ++i) {
      double acc = 0;
      for (int r = 0; r < tr.d; ++r) acc += U(r, i) * h[r];
      EXPECT_NEAR(p[i], acc, 1e-12);
    }
  }
}

TEST(TransportedStep, Basics) {
  std::mt19937_64 rng(2);
  const Mat R = fixtures::random_rotation(rng, 4);
  const Vec p = fixtures::randn(rng, 4);
  EXPECT_NEAR(transported_step(R * p, p, R).s, 0.0, 1e-12);
  EXPECT_NEAR(transported_step(p, Vec::Zero(4), Mat::Identity(4, 4)).s, p.norm(), 1e-15);
}

TEST(TransportedStep, GaugeRotation) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    const int d = 24, k = 16;
    const Mat U0 = fixtures::random_frame(rng, d, k), U1 = fixtures::random_frame(rng, d, k);
    const Vec h0 = fixtures::randn(rng, d), h1 = fixtures::randn(rng, d);
    const Mat Q0 = fixtures::random_rotation(rng, k), Q1 = fixtures::random_rotation(rng, k);
    const auto a = procrustes(U0, U1);
    const auto b = procrustes(U0 * Q0, U1 * Q1);
    ASSERT_EQ(a.reset, b.reset);
    if (a.reset) continue;
    const double s = transported_step(U1.transpose() * h1, U0.transpose() * h0, a.R).s;
    const double sq = transported_step((U1 * Q1).transpose() * h1, (U0 * Q0).transpose() * h0, b.R).s;
    EXPECT_NEAR(s, sq, 1e-9);
  }
}

TEST(TurningAngle, ParallelAndAntiparallel) {
  std::mt19937_64 rng(4);
  const Mat R = fixtures::random_rotation(rng, 5);
  const Vec p = fixtures::randn(rng, 5);
  EXPECT_NEAR(turning_angle(2.0 * (R * p), p, R), 0.0, 1e-7);
  EXPECT_NEAR(turning_angle(-(R * p), p, R), pi, 1e-7);
  EXPECT_NEAR(turning_angle(Vec::Zero(5), p, R), pi / 2, 1e-15);
}

TEST(TurningAngle, Atan2Oracle) {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 1000; ++rep) {
    const Eigen::Vector3d a = fixtures::randn(rng, 3), b = fixtures::randn(rng, 3);
    const Mat R = fixtures::random_rotation(rng, 3);
    const Eigen::Vector3d rb = R * b;
    const double oracle = std::atan2(a.cross(rb).norm(), a.dot(rb));
    const double got = turning_angle(a, b, R);
    EXPECT_NEAR(got, oracle, 1e-7);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, pi);
  }
}

TEST(RobustCenter, SinglePointAndSymmetricPair) {
  const Vec v{{1.0, -2.0, 0.5}};
  for (auto mode : {CenterMode::CoordMedian, CenterMode::Weiszfeld, CenterMode::Mean}) {
    CenterParams p;
    p.mode = mode;
    EXPECT_LT((robust_center({v}, 3, p) - v).norm(), 1e-12);
    EXPECT_LT(robust_center({v, -v}, 3, p).norm(), 1e-12);
    EXPECT_EQ(robust_center({}, 3, p), Vec::Zero(3));
  }
}

TEST(RobustCenter, WeiszfeldMatchesGridSearch) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<Vec> pts;
    for (int i = 0; i < 7; ++i) pts.push_back(fixtures::randn(rng, 2));
    auto cost = [&](const Vec& x) {
      double c = 0;
      for (const auto& q : pts) c += (q - x).norm();
      return c;
    };
    // Coarse grid then two refinements.
    Vec best = Vec::Zero(2);
    double span = 4.0;
    for (int level = 0; level < 4; ++level) {
      Vec centre = best;
      double bc = cost(best);
      for (int i = -200; i <= 200; ++i)
        for (int j = -200; j <= 200; ++j) {
          const Vec x = centre + Vec{{i * span / 200, j * span / 200}};
          const double c = cost(x);
          if (c < bc) { bc = c; best = x; }
        }
      span /= 50;
    }
    CenterParams p;
    p.mode = CenterMode::Weiszfeld;
    p.iters = 500;
    const Vec wz = robust_center(pts, 2, p);
    EXPECT_LT((wz - best).norm(), 1e-4);
    // defaults stay close in cost
    p.iters = 50;
    EXPECT_LT(cost(robust_center(pts, 2, p)) - cost(best), 1e-6);
  }
}

TEST(CenteredSteps, SharedShiftAndEmptyMask) {
  const Vec v{{1.0, 2.0}};
  const std::vector<Vec> same(4, v);
  for (double s : centered_steps(same, {1, 1, 1, 1})) EXPECT_EQ(s, 0.0);
  const std::vector<Vec> mixed{v, 2 * v, -v};
  const auto sc = centered_steps(mixed, {0, 0, 0});
  for (int i = 0; i < 3; ++i) EXPECT_EQ(sc[i], mixed[i].norm());
}

TEST(CenteredSteps, SortOracle) {
  std::mt19937_64 rng(7);
  std::vector<Vec> deltas;
  std::vector<std::uint8_t> mask;
  for (int i = 0; i < 9; ++i) {
    deltas.push_back(fixtures::randn(rng, 3));
    mask.push_back(i % 4 != 0);
  }
  Vec mu(3);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> col;
    for (int i = 0; i < 9; ++i) if (mask[i]) col.push_back(deltas[i][c]);
    std::sort(col.begin(), col.end());
    mu[c] = col.size() % 2 ? col[col.size() / 2] : 0.5 * (col[col.size() / 2 - 1] + col[col.size() / 2]);
  }
  const auto sc = centered_steps(deltas, mask);
  for (int i = 0; i < 9; ++i) EXPECT_NEAR(sc[i], (deltas[i] - mu).norm(), 1e-14);
}

static BoundaryAffine unit_affine(int d, NormKind kind, double eps = 1e-5) {
  return {Vec::Ones(d), Vec::Zero(d), eps, kind};
}

TEST(NormJvp, RmsRadialDirection) {
  std::mt19937_64 rng(8);
  const int d = 16;
  const Vec u = fixtures::randn(rng, d);
  const auto a = unit_affine(d, NormKind::RMSNorm, 1e-3);
  const double m2 = u.squaredNorm() / d;
  const double r = std::sqrt(m2 + a.eps);
  EXPECT_LT((norm_jvp(a, u, u) - u * (a.eps / (r * (m2 + a.eps)))).norm(), 1e-12);
}

TEST(NormJvp, LayerNormTangentialDirection) {
  const int d = 4;
  const Vec u{{1, -1, 1, -1}};
  const Vec v{{1, 1, -1, -1}};
  const auto a = unit_affine(d, NormKind::LayerNorm);
  const double s = std::sqrt(u.squaredNorm() / d + a.eps);
  EXPECT_LT((norm_jvp(a, u, v) - v / s).norm(), 1e-12);
}

TEST(NormJvp, FiniteDifferences) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> G(0.5, 1.5);
  for (auto kind : {NormKind::LayerNorm, NormKind::RMSNorm}) {
    for (int rep = 0; rep < 50; ++rep) {
      const int d = 32;
      BoundaryAffine a{Vec::NullaryExpr(d, [&] { return G(rng); }), fixtures::randn(rng, d), 1e-5, kind};
      const Vec u = fixtures::randn(rng, d), v = fixtures::randn(rng, d);
      const double h = 1e-4;
      const Vec fd = (a.apply(u + h * v) - a.apply(u - h * v)) / (2 * h);
      const Vec an = norm_jvp(a, u, v);
      EXPECT_LT((fd - an).norm() / an.norm(), 1e-5);
    }
  }
}

TEST(PathUpdate, NoInjection) {
  std::mt19937_64 rng(10);
  const int d = 8;
  const auto a = unit_affine(d, NormKind::LayerNorm);
  const auto pu = path_integrated_update(a, fixtures::randn(rng, d), Vec::Zero(d), Vec::Zero(d),
                                         fixtures::random_frame(rng, d, 3));
  EXPECT_EQ(pu.c, 0.0);
  EXPECT_EQ(pu.eta.norm(), 0.0);
  EXPECT_EQ(pu.rho, 0.0);
}

TEST(PathUpdate, ConstantJacobianHasNoMismatch) {
  // An eps much larger than the state moment makes the RMS map linear to
  // many digits; with a huge eps and tiny injections J is constant.
  std::mt19937_64 rng(11);
  const int d = 8;
  const auto a = unit_affine(d, NormKind::RMSNorm, 1e12);
  const auto pu = path_integrated_update(a, fixtures::randn(rng, d), fixtures::randn(rng, d),
                                         fixtures::randn(rng, d), fixtures::random_frame(rng, d, 3));
  EXPECT_LT(pu.rho, 1e-10);
}

TEST(PathUpdate, SimpsonAgainstFineTrapezoid) {
  std::mt19937_64 rng(12);
  for (auto kind : {NormKind::LayerNorm, NormKind::RMSNorm}) {
    for (int rep = 0; rep < 20; ++rep) {
      const int d = 32, k = 8;
      const auto a = unit_affine(d, kind);
      // injections around a tenth of the state scale per coordinate
      const Vec h = fixtures::randn(rng, d), o = fixtures::randn(rng, d, 0.1), m = fixtures::randn(rng, d, 0.1);
      const Mat U = fixtures::random_frame(rng, d, k);
      const auto pu = path_integrated_update(a, h, o, m, U);
      Vec ref = Vec::Zero(d);
      const int n = 1001;
      for (int i = 0; i < n; ++i) {
        const double al = double(i) / (n - 1);
        const double wgt = (i == 0 || i == n - 1 ? 0.5 : 1.0) / (n - 1);  // trapezoid
        ref += wgt * norm_jvp(a, h + al * (o + m), o + m);
      }
      EXPECT_LT((U.transpose() * ref - pu.dq).norm(), 1e-4);
      const Vec end = U.transpose() * norm_jvp(a, h + o + m, o + m);
      EXPECT_NEAR(pu.rho, (pu.dq - end).norm() / (pu.dq.norm() + kEpsNum), 1e-12);
      EXPECT_LE(pu.c, pu.dq_attn.norm() + pu.dq_mlp.norm() + 1e-12);
    }
  }
}

TEST(PerpRatios, Basics) {
  const Vec u = Vec::Unit(3, 0);
  const Vec qa{{0.5, 2.0, 0.0}};
  const auto r = perp_ratios(qa, Vec::Zero(3), qa, u);
  EXPECT_NEAR(r.r_attn, 1.0, 1e-8);
  EXPECT_EQ(r.r_mlp, 0.0);
  const Vec qpar{{3.0, 0, 0}}, qm{{0, 1.0, 1.0}};
  EXPECT_EQ(perp_ratios(qpar, qm, qpar + qm, u).r_attn, 0.0);
}

TEST(PerpRatios, JointRotationInvariance) {
  std::mt19937_64 rng(13);
  for (int rep = 0; rep < 100; ++rep) {
    const int k = 16;
    const Vec qa = fixtures::randn(rng, k), qm = fixtures::randn(rng, k);
    Vec u = fixtures::randn(rng, k);
    u /= u.norm();
    const Mat Q = fixtures::random_rotation(rng, k);
    const auto a = perp_ratios(qa, qm, qa + qm, u);
    const auto b = perp_ratios(Q * qa, Q * qm, Q * (qa + qm), Q * u);
    EXPECT_NEAR(a.r_attn, b.r_attn, 1e-9);
    EXPECT_NEAR(a.r_mlp, b.r_mlp, 1e-9);
  }
}

TEST(Aggregate, OneValidAndNone) {
  const std::vector<std::vector<double>> v{{1, 2}, {3, 4}, {5, 6}};
  const std::vector<std::vector<std::uint8_t>> m{{0, 0}, {1, 0}, {0, 0}};
  const auto out = aggregate_over_depth(v, m);
  EXPECT_EQ(out[0], 3.0);
  EXPECT_EQ(out[1], 0.0);
}

TEST(Aggregate, SortOracle) {
  std::mt19937_64 rng(14);
  std::vector<std::vector<double>> v(9, std::vector<double>(6));
  std::vector<std::vector<std::uint8_t>> m(9, std::vector<std::uint8_t>(6));
  for (int b = 0; b < 9; ++b)
    for (int t = 0; t < 6; ++t) {
      v[b][t] = fixtures::randn(rng, 1)[0];
      m[b][t] = rng() % 3 != 0;
    }
  const auto out = aggregate_over_depth(v, m);
  for (int t = 0; t < 6; ++t) {
    std::vector<double> col;
    for (int b = 0; b < 9; ++b) if (m[b][t]) col.push_back(v[b][t]);
    std::sort(col.begin(), col.end());
    const double med = col.empty() ? 0.0
                       : col.size() % 2 ? col[col.size() / 2]
                                        : 0.5 * (col[col.size() / 2 - 1] + col[col.size() / 2]);
    EXPECT_EQ(out[t], med);
  }
}

TEST(Drift, GaugeAndOrthogonalLines) {
  std::mt19937_64 rng(15);
  const Mat U = fixtures::random_frame(rng, 7, 3);
  const Mat Q = fixtures::random_rotation(rng, 3);
  EXPECT_LT(grassmann_drift(U, U * Q), 1e-7);
  EXPECT_LT(grassmann_drift_spectral(U, U * Q), 1e-12);
  EXPECT_LT(anchored_drift(U, U * Q, fixtures::randn(rng, 7)), 1e-12);
  const Mat e1 = Mat::Identity(3, 1), e2 = Mat::Identity(3, 2).rightCols(1);
  EXPECT_NEAR(grassmann_drift(e1, e2), 1.0, 1e-15);
  EXPECT_NEAR(grassmann_drift_spectral(e1, e2), 1.0, 1e-12);
}

TEST(Drift, PrincipalAngleOracleAndBounds) {
  std::mt19937_64 rng(16);
  for (int rep = 0; rep < 200; ++rep) {
    const Mat U = fixtures::random_frame(rng, 12, 3), V = fixtures::random_frame(rng, 12, 3);
    // principal angles from the SVD of U^T V; largest angle from smallest cosine
    Eigen::JacobiSVD<Mat> svd(U.transpose() * V);
    const double theta_max = std::acos(std::min(1.0, svd.singularValues().minCoeff()));
    const double dg = grassmann_drift(U, V);
    EXPECT_NEAR(dg, std::sin(theta_max), 1e-7);
    EXPECT_NEAR(grassmann_drift_spectral(U, V), dg, 1e-7);
    const double chi = anchored_drift(U, V, fixtures::randn(rng, 12));
    EXPECT_GE(chi, 0.0);
    EXPECT_LE(chi, dg + 1e-12);
    EXPECT_LE(dg, 1.0);
  }
}

static PipelineParams small_params(int k = 4, int K = 5) {
  PipelineParams p;
  p.window_len = 4;
  p.stride = 2;
  p.basis.k = k;
  p.basis.directions.K = K;
  return p;
}

TEST(EventGrid, ZeroInjections) {
  std::mt19937_64 rng(17);
  auto tr = ResidualTrace::allocate(8, 6, 5, 12);
  tr.eps_bn = 1e-12;
  for (auto& w : tr.W) w = static_cast<float>(fixtures::randn(rng, 1)[0]);
  fixtures::fill_states(tr, rng, 0.0);
  // identity affines leave the normalized state fixed after block 0; one
  // window keeps R = I so nothing moves in k-space either
  tr.emask[1] = 0;
  tr.amask[3] = 0;
  auto p = small_params();
  p.window_len = 8;
  const auto r = run_pipeline(tr, p, 0);
  for (int b = 1; b < tr.B; ++b)
    for (int t = 0; t < tr.T; ++t) {
      const auto& f = r.signatures.steps[b][t];
      EXPECT_EQ(f.c_mag, 0.0);
      EXPECT_EQ(f.rho, 0.0);
      EXPECT_LT(f.s, 1e-6) << b << " " << t;
    }
  for (int b = 0; b < tr.B; ++b)
    for (int t = 0; t < tr.T; ++t) EXPECT_EQ(r.grid.is_valid(b, t), tr.eligible(t));
}

TEST(EventGrid, Deterministic) {
  const auto tr = fixtures::random_trace(18, 16, 10, 8, 24);
  const auto a = build_event_grid(tr, small_params(), 3);
  const auto b = build_event_grid(tr, small_params(), 3);
  EXPECT_TRUE(a == b);
}

TEST(EventGrid, EffectiveRangeAndZeroFill) {
  auto tr = fixtures::random_trace(19, 16, 10, 8, 24);
  tr.b_eff = 6;
  tr.emask[2] = 0;
  const auto g = build_event_grid(tr, small_params(), 0);
  for (int b = 0; b < g.n_steps; ++b)
    for (int t = 0; t < g.T; ++t) {
      EXPECT_EQ(g.is_valid(b, t), b <= 6 && t != 2);
      if (!g.is_valid(b, t)) {
        for (int f = 0; f < kFeatureCount; ++f) EXPECT_EQ(g.features(b, t)[f], 0.0f);
      }
    }
}

// Independent single-pass recomputation of every feature with plain loops.
TEST(EventGrid, MatchesReferencePipeline) {
  const auto tr = fixtures::random_trace(20, 12, 9, 7, 20, NormKind::RMSNorm);
  const auto p = small_params(3, 4);
  const auto r = run_pipeline(tr, p, 0);
  const auto& w = r.schedule;
  const auto& bases = r.bases;
  const int B = tr.B, T = tr.T;
  auto U_at = [&](int b) -> const Mat& { return bases[b == B ? w.J - 1 : w.assign[b]].U; };
  auto beta = [&](int b) {
    Vec v = Vec::Zero(tr.d);
    if (b > 0) for (int i = 0; i < tr.d; ++i) v[i] = tr.beta[(b - 1) * tr.d + i];
    return v;
  };
  auto J = [&](int b1, const Vec& u, const Vec& v) {
    // RMS Jacobian written out directly
    Vec g(tr.d);
    for (int i = 0; i < tr.d; ++i) g[i] = tr.gamma[(b1 - 1) * tr.d + i];
    const double m2 = u.squaredNorm() / tr.d;
    const double rr = std::sqrt(m2 + tr.eps_bn);
    Vec out(tr.d);
    for (int i = 0; i < tr.d; ++i) out[i] = g[i] * (v[i] / rr - u[i] * u.dot(v) / (tr.d * rr * rr * rr));
    return out;
  };
  for (int b = 0; b < B; ++b) {
    const Mat& U0 = U_at(b);
    const Mat& U1 = U_at(b + 1);
    Mat R = Mat::Identity(p.basis.k, p.basis.k);
    if (b + 1 < B && w.assign[b] != w.assign[b + 1]) {
      Eigen::JacobiSVD<Mat> svd(U1.transpose() * U0, Eigen::ComputeFullU | Eigen::ComputeFullV);
      R = svd.matrixU() * svd.matrixV().transpose();
    }
    std::vector<Vec> deltas;
    for (int t = 0; t < T; ++t) {
      const Vec p0 = U0.transpose() * (tr.state(t, b) - beta(b));
      const Vec p1 = U1.transpose() * (tr.state(t, b + 1) - beta(b + 1));
      const Vec dp = p1 - R * p0;
      deltas.push_back(dp);
      const auto& f = r.signatures.steps[b][t];
      EXPECT_NEAR(f.s, dp.norm(), 1e-10);
      const Vec u0 = R * (p0 / (p0.norm() + 1e-8)), u1 = p1 / (p1.norm() + 1e-8);
      const double cosv = std::clamp(u0.dot(u1) / (u0.norm() * u1.norm()), -1.0, 1.0);
      EXPECT_NEAR(f.theta, std::acos(cosv), 1e-6);
      const Vec o = tr.attn(t, b), m = tr.mlp(t, b), hr = tr.raw(t, b);
      EXPECT_NEAR(f.a_mag, (U1.transpose() * o).norm(), 1e-10);
      EXPECT_NEAR(f.m_mag, (U1.transpose() * m).norm(), 1e-10);
      Vec da = Vec::Zero(tr.d), dm = Vec::Zero(tr.d);
      const double nodes[3] = {0, 0.5, 1}, wts[3] = {1.0 / 6, 4.0 / 6, 1.0 / 6};
      for (int i = 0; i < 3; ++i) {
        da += wts[i] * J(b + 1, hr + nodes[i] * (o + m), o);
        dm += wts[i] * J(b + 1, hr + nodes[i] * (o + m), m);
      }
      const Vec dq = U1.transpose() * (da + dm);
      EXPECT_NEAR(f.c_mag, dq.norm(), 1e-10);
      const Vec eta = dq - U1.transpose() * J(b + 1, hr + o + m, o + m);
      EXPECT_NEAR(f.rho, eta.norm() / (dq.norm() + 1e-8), 1e-9);
      const Vec qa = U1.transpose() * da, qm = U1.transpose() * dm;
      auto perp = [&](const Vec& v) { return Vec(v - u1.dot(v) * u1); };
      EXPECT_NEAR(f.r_attn, perp(qa).norm() / (perp(dq).norm() + 1e-8), 1e-9);
      EXPECT_NEAR(f.r_mlp, perp(qm).norm() / (perp(dq).norm() + 1e-8), 1e-9);
    }
    for (int t = 0; t < T; ++t) {
      Vec mu(p.basis.k);
      for (int c = 0; c < p.basis.k; ++c) {
        std::vector<double> col;
        for (int s = 0; s < T; ++s) col.push_back(deltas[s][c]);
        std::sort(col.begin(), col.end());
        mu[c] = T % 2 ? col[T / 2] : 0.5 * (col[T / 2 - 1] + col[T / 2]);
      }
      EXPECT_NEAR(r.signatures.steps[b][t].s_c, (deltas[t] - mu).norm(), 1e-10);
    }
  }
  for (int t = 0; t < T; ++t) {
    double D = 0;
    for (int j = 0; j + 1 < w.J; ++j) {
      const Mat& A = bases[j].U;
      const Mat& Bm = bases[j + 1].U;
      const Vec h = tr.state(t, w.starts[j]) - beta(w.starts[j]);
      D += ((Bm * Bm.transpose() - A * A.transpose()) * h).norm() / (h.norm() + 1e-8);
    }
    EXPECT_NEAR(r.signatures.drift.D[t], D, 1e-10);
    EXPECT_EQ(r.grid.D[t], static_cast<float>(r.signatures.drift.D[t]));
  }
}

TEST(EventGrid, GaugeInvariance) {
  std::mt19937_64 rng(21);
  for (int rep = 0; rep < 20; ++rep) {
    const auto tr = fixtures::random_trace(100 + rep, 16, 10, 6, 24);
    for (auto mode : {CenterMode::Mean, CenterMode::Weiszfeld}) {
      auto p = small_params(4, 6);
      p.center.mode = mode;
      const auto w = build_schedule(tr.B, p.window_len, p.stride);
      const auto bases = fit_window_bases(tr, w, p.basis, 0);
      auto rotated = bases;
      for (auto& wb : rotated) wb.U = wb.U * fixtures::random_rotation(rng, 4);
      const auto a = compute_signatures(tr, w, bases, p);
      const auto b = compute_signatures(tr, w, rotated, p);
      for (int bb = 0; bb < tr.B; ++bb)
        for (int t = 0; t < tr.T; ++t) {
          const auto& fa = a.steps[bb][t];
          const auto& fb = b.steps[bb][t];
          EXPECT_NEAR(fa.s, fb.s, 1e-8);
          EXPECT_NEAR(fa.theta, fb.theta, 1e-8);
          EXPECT_NEAR(fa.rho, fb.rho, 1e-8);
          EXPECT_NEAR(fa.r_attn, fb.r_attn, 1e-8);
          EXPECT_NEAR(fa.r_mlp, fb.r_mlp, 1e-8);
          EXPECT_NEAR(fa.s_c, fb.s_c, 1e-8);
        }
      for (int t = 0; t < tr.T; ++t) EXPECT_NEAR(a.drift.D[t], b.drift.D[t], 1e-8);
    }
  }
}

TEST(EventGridFile, RoundTrip) {
  auto tr = fixtures::random_trace(22, 16, 10, 8, 24);
  tr.label = 1;
  auto p = small_params();
  p.anchor = AnchorMode::End;
  p.center.mode = CenterMode::Weiszfeld;
  auto g = build_event_grid(tr, p, 9);
  g.config = "window_len=4\nstride=2\n";
  const auto path = fixtures::temp_path("grid.fevt");
  save_grid(g, path);
  const auto back = load_grid(path);
  EXPECT_TRUE(back == g);
  EXPECT_EQ(back.params.anchor, AnchorMode::End);
  EXPECT_EQ(back.params.center.mode, CenterMode::Weiszfeld);
  EXPECT_EQ(back.label, 1);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  EXPECT_THROW(load_grid(path), FormatError);
}

TEST(GoldenTrace, ForeignWriterLoadsAndRuns) {
  // written by tests/data/make_golden_fsig.py with numpy only
  const auto tr = load_trace(FLOWSIG_TEST_DATA "/golden_tiny.fsig");
  EXPECT_EQ(tr.d, 8);
  EXPECT_EQ(tr.B, 2);
  EXPECT_EQ(tr.T, 5);
  EXPECT_EQ(tr.V, 6);
  EXPECT_EQ(tr.seed, 77u);
  EXPECT_EQ(tr.label, 1);
  EXPECT_EQ(tr.vocab_map, (std::vector<std::uint32_t>{3, 5, 8, 13, 21, 34}));
  EXPECT_EQ(tr.state(4, 2)[0], static_cast<double>(-0.026109945f));
  EXPECT_LT(max_update_inconsistency(tr), 1e-4);

  PipelineParams p;
  p.window_len = 2;
  p.stride = 1;
  p.basis.k = 3;
  p.basis.directions.K = 5;
  const auto r = run_pipeline(tr, p, 0);
  for (int b = 0; b < tr.B; ++b)
    for (int t = 0; t < tr.T; ++t) {
      EXPECT_EQ(r.grid.is_valid(b, t), t >= 2) << b << " " << t;
      for (int f = 0; f < kFeatureCount; ++f) EXPECT_TRUE(std::isfinite(r.grid.features(b, t)[f]));
    }
}
