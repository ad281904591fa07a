// SPDX-License-Identifier: Apache-2.0
#include "flowsig/subspace.hpp"

#include <gtest/gtest.h>

#include <map>

#include "fixtures.hpp"

using namespace flowsig;

static double projector_distance(const Mat& A, const Mat& B) {
  return (A * A.transpose() - B * B.transpose()).norm();
}

TEST(RankCompetitors, TieGoesToSmallestIndex) {
  const auto cs = rank_competitors(Vec{{3, 3, 1}}, 1);
  EXPECT_EQ(cs.top, 0);
  EXPECT_EQ(cs.competitors, std::vector<int>{1});
}

TEST(RankCompetitors, DirectSort) {
  const auto cs = rank_competitors(Vec{{0, 5, 2, 4}}, 2);
  EXPECT_EQ(cs.top, 1);
  EXPECT_EQ(cs.competitors, (std::vector<int>{3, 2}));
  EXPECT_EQ(rank_competitors(Vec{{0, 5, 2, 4}}, 10).competitors.size(), 3u);
  EXPECT_THROW(rank_competitors(Vec(0), 2), ParameterError);
}

TEST(RankCompetitors, StableSortOracle) {
  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 100; ++rep) {
    Vec l(50);
    for (int i = 0; i < 50; ++i) l[i] = static_cast<double>(rng() % 12);  // many duplicates
    std::vector<int> idx(50);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return l[a] > l[b]; });
    const int K = 1 + static_cast<int>(rng() % 20);
    const auto cs = rank_competitors(l, K);
    EXPECT_EQ(cs.top, idx[0]);
    EXPECT_EQ(cs.competitors, std::vector<int>(idx.begin() + 1, idx.begin() + 1 + K));
  }
}

TEST(CollectDirections, AllMaskedIsEmpty) {
  auto tr = fixtures::random_trace(1);
  std::fill(tr.emask.begin(), tr.emask.end(), 0);
  const auto w = build_schedule(tr.B, 4, 2);
  EXPECT_TRUE(collect_directions(tr, w, 0, {}).empty());
  auto tr2 = fixtures::random_trace(1);
  std::fill(tr2.amask.begin(), tr2.amask.end(), 0);
  EXPECT_TRUE(collect_directions(tr2, w, 1, {}).empty());
}

TEST(CollectDirections, DuplicateRowsDropped) {
  auto tr = ResidualTrace::allocate(2, 1, 1, 3);
  tr.W = {1, 0, 1, 0, -1, 0};  // rows 0 and 1 identical
  fixtures::put_row(tr.H, 0, 0, Vec{{1.0, 0.0}});
  const auto w = build_schedule(1, 1, 1);
  DirectionParams p;
  p.K = 1;
  EXPECT_TRUE(collect_directions(tr, w, 0, p).empty());
  p.K = 2;
  const auto dirs = collect_directions(tr, w, 0, p);
  ASSERT_EQ(dirs.size(), 1u);
  EXPECT_NEAR(dirs[0][0], 1.0, 1e-8);
}

TEST(CollectDirections, ExhaustiveEnumerationOracle) {
  auto tr = fixtures::random_trace(2, 8, 6, 5, 16);
  tr.emask[2] = 0;
  const auto w = build_schedule(tr.B, 4, 2);
  DirectionParams p;
  p.K = 3;
  for (int j = 0; j < w.J; ++j) {
    std::vector<Vec> expect;
    for (int b = 0; b < tr.B; ++b) {
      if (b < w.starts[j] || b > w.ends[j]) continue;
      for (int t = 0; t < tr.T; ++t) {
        if (!tr.amask[t] || !tr.emask[t]) continue;
        const Vec l = tr.readout().cast<double>() * tr.state(t, b);
        std::vector<int> idx(tr.V);
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int c) { return l[a] > l[c]; });
        for (int r = 1; r <= p.K; ++r) {
          Vec a = tr.readout_row(idx[0]) - tr.readout_row(idx[r]);
          expect.push_back(a / (a.norm() + p.eps_a));
        }
      }
    }
    const auto got = collect_directions(tr, w, j, p);
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LT((got[i] - expect[i]).norm(), 1e-12);
  }
}

TEST(FitBasis, EmptyFallsBackToIdentityColumns) {
  const auto wb = fit_basis({}, 4, 2, 512, {});
  EXPECT_EQ(wb.provenance, BasisProvenance::Fallback);
  EXPECT_EQ(wb.U, Mat::Identity(4, 2));
  EXPECT_THROW(fit_basis({}, 4, 5, 512, {}), ParameterError);
}

TEST(FitBasis, RankOneCompletion) {
  std::vector<Vec> dirs(10, Vec::Unit(5, 0));
  const auto wb = fit_basis(dirs, 5, 3, 512, {});
  EXPECT_EQ(wb.provenance, BasisProvenance::RankCompleted);
  EXPECT_EQ(wb.rank, 1);
  EXPECT_NEAR(std::abs(wb.U(0, 0)), 1.0, 1e-12);
  EXPECT_LT(orthonormality_defect(wb.U), 1e-12);
  // the completion spans e2, e3 (e1 is already in the span)
  Mat expect(5, 3);
  expect << 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0;
  EXPECT_LT(projector_distance(wb.U, expect), 1e-12);
}

TEST(FitBasis, PlantedSubspaceRecovered) {
  std::mt19937_64 rng(4);
  const Mat plant = fixtures::random_frame(rng, 12, 3);
  std::vector<Vec> dirs;
  for (int i = 0; i < 50; ++i) dirs.push_back(plant * fixtures::randn(rng, 3));
  const auto wb = fit_basis(dirs, 12, 3, 512, {});
  EXPECT_EQ(wb.provenance, BasisProvenance::Fitted);
  EXPECT_LT(projector_distance(wb.U, plant), 1e-6);
  // r < k: top-r columns still span the plant
  const auto wb5 = fit_basis(dirs, 12, 5, 512, {});
  EXPECT_EQ(wb5.provenance, BasisProvenance::RankCompleted);
  EXPECT_EQ(wb5.rank, 3);
  EXPECT_LT(projector_distance(wb5.U.leftCols(3), plant), 1e-6);
  EXPECT_LT(orthonormality_defect(wb5.U), 1e-7);
}

TEST(FitBasis, CapIsDeterministicAndSeeded) {
  std::mt19937_64 rng(5);
  std::vector<Vec> dirs;
  for (int i = 0; i < 300; ++i) dirs.push_back(fixtures::randn(rng, 10));
  const auto a = fit_basis(dirs, 10, 4, 64, {1, 2, 3});
  const auto b = fit_basis(dirs, 10, 4, 64, {1, 2, 3});
  const auto c = fit_basis(dirs, 10, 4, 64, {1, 2, 4});
  EXPECT_EQ(a.n_directions, 64);
  EXPECT_EQ(a.U, b.U);
  EXPECT_NE(a.U, c.U);
  EXPECT_LT(orthonormality_defect(a.U), 1e-7);
}

TEST(FitBasis, OrthonormalOnTraces) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto tr = fixtures::random_trace(s, 16, 8, 6, 20);
    const auto w = build_schedule(tr.B, 4, 2);
    BasisParams p;
    p.k = 6;
    p.directions.K = 4;
    for (const auto& wb : fit_window_bases(tr, w, p, s)) {
      EXPECT_LT(orthonormality_defect(wb.U), 1e-7);
      EXPECT_LE(wb.n_directions, p.cap);
    }
  }
}
