// SPDX-License-Identifier: Apache-2.0
// Small random traces and frames shared by the unit tests.
#pragma once

#include "flowsig/trace.hpp"
#include "flowsig/validator.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fixtures {

using flowsig::Mat;
using flowsig::Vec;

inline Vec randn(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> N(0.0, scale);
  Vec v(n);
  for (int i = 0; i < n; ++i) v[i] = N(rng);
  return v;
}

inline Mat randn(std::mt19937_64& rng, int r, int c, double scale = 1.0) {
  std::normal_distribution<double> N(0.0, scale);
  Mat m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = N(rng);
  return m;
}

inline Mat random_frame(std::mt19937_64& rng, int d, int k) {
  Eigen::HouseholderQR<Mat> qr(randn(rng, d, k));
  return qr.householderQ() * Mat::Identity(d, k);
}

inline Mat random_rotation(std::mt19937_64& rng, int k) { return random_frame(rng, k, k); }

inline void put_row(flowsig::FloatGrid& g, int i, int j, const Vec& v) {
  for (int c = 0; c < g.width; ++c) g.data[g.offset(i, j) + c] = static_cast<float>(v[c]);
}

// Fills H, HRAW, O, M so that h[b+1] = N_{b+1}(h[b] + o + m) with random
// contributions; o and m are rounded to float before the update so the
// stored arrays are self-consistent.
inline void fill_states(flowsig::ResidualTrace& tr, std::mt19937_64& rng, double inj_scale = 0.5) {
  auto f = [](const Vec& v) { return Vec(v.cast<float>().cast<double>()); };
  for (int t = 0; t < tr.T; ++t) {
    Vec h = f(randn(rng, tr.d));
    put_row(tr.H, t, 0, h);
    for (int b = 0; b < tr.B; ++b) {
      const Vec o = f(randn(rng, tr.d, inj_scale));
      const Vec m = f(randn(rng, tr.d, inj_scale));
      put_row(tr.HRAW, t, b, h);
      put_row(tr.O, t, b, o);
      put_row(tr.M, t, b, m);
      h = f(tr.affine(b + 1)->apply(h + o + m));
      put_row(tr.H, t, b + 1, h);
    }
  }
}

inline flowsig::ResidualTrace random_trace(std::uint64_t seed, int d = 8, int B = 6, int T = 5, int V = 12,
                                           flowsig::NormKind kind = flowsig::NormKind::LayerNorm,
                                           double inj_scale = 0.5) {
  std::mt19937_64 rng(seed);
  auto tr = flowsig::ResidualTrace::allocate(d, B, T, V);
  tr.norm_kind = kind;
  tr.seed = seed;
  tr.label = 0;
  std::uniform_real_distribution<double> G(0.6, 1.4);
  for (auto& g : tr.gamma) g = static_cast<float>(G(rng));
  for (auto& b : tr.beta) b = static_cast<float>(0.2 * randn(rng, 1)[0]);
  for (auto& w : tr.W) w = static_cast<float>(randn(rng, 1)[0]);
  fill_states(tr, rng, inj_scale);
  return tr;
}

inline std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("flowsig_test_" + name)).string();
}

// Random features on a random validity pattern.
inline flowsig::FlowEventGrid random_grid(std::mt19937_64& rng, int n_steps, int T, std::int8_t label, double drop = 0.2) {
  flowsig::FlowEventGrid g;
  g.n_steps = n_steps;
  g.T = T;
  g.label = label;
  g.x.assign(static_cast<std::size_t>(n_steps) * T * flowsig::kFeatureCount, 0.0f);
  g.valid.assign(static_cast<std::size_t>(n_steps) * T, 0);
  std::normal_distribution<float> N(0.0f, 1.0f);
  for (std::size_t j = 0; j < g.valid.size(); ++j) {
    if (flowsig::uniform01(rng) < drop) continue;
    g.valid[j] = 1;
    for (int f = 0; f < flowsig::kFeatureCount; ++f) g.x[j * flowsig::kFeatureCount + f] = N(rng);
  }
  return g;
}

inline flowsig::ValidatorConfig tiny(int units = 4) {
  flowsig::ValidatorConfig c;
  c.hidden = units;
  c.embed = units;
  c.state = units;
  c.dropout = 0.0;
  return c;
}

}  // namespace fixtures
