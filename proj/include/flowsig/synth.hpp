// SPDX-License-Identifier: Apache-2.0
//
// Deterministic toy post-norm transformer with greedy decoding, an anomaly
// injector, a labeled trace dataset generator and the clean-model auditor.
//
// Block b maps h[b] to h[b+1] = N_{b+1}(h[b] + o + m) with causal softmax
// attention o over h[.][b] and a tanh MLP m reading h[b] + o. Attention and
// MLP outputs are written into a fixed readout-aligned subspace of width
// `readout_rank`, which is also the row space of the readout head.
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/trace.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace flowsig {

struct ToyModelConfig {
  int d = 32;
  int B = 12;
  int V = 64;
  int heads = 1;
  int T = 24;
  int prompt = 8;  // forced tokens, BOS included
  int mlp = 64;
  int readout_rank = 16;
  NormKind norm_kind = NormKind::LayerNorm;
  double eps_bn = 1e-5;
  double attn_scale = 0.3;
  double mlp_scale = 0.3;
  double gain_jitter = 0.02;
  double bias_scale = 0.05;
  double pos_scale = 0.5;
  double readout_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (d < 1 || B < 1 || V < 2 || T < 3 || heads < 1 || mlp < 1) throw ParameterError("toy model sizes must be positive");
    if (d % heads != 0) throw ParameterError("model width must be divisible by the head count");
    if (prompt < 1 || prompt >= T) throw ParameterError("prompt length must be in [1, T)");
    if (readout_rank < 1 || readout_rank >= d) throw ParameterError("readout rank must be in [1, d)");
  }
};

enum class AnomalyKind : std::uint8_t { None = 0, DepthBurst = 1, LateDiffuse = 2 };

inline const char* to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::None: return "none";
    case AnomalyKind::DepthBurst: return "burst";
    case AnomalyKind::LateDiffuse: return "diffuse";
  }
  return "?";
}

struct AnomalySpec {
  AnomalyKind kind = AnomalyKind::None;
  int b_star = 0;
  int t_star = 0;
  double gain = 1.0;

  // Multiplier applied to o and m at (t, b).
  double factor(int t, int b, int B) const {
    if (kind == AnomalyKind::None || t < t_star) return 1.0;
    if (kind == AnomalyKind::DepthBurst) return b == b_star ? gain : 1.0;
    if (b < b_star) return 1.0;
    return std::pow(gain, 1.0 / static_cast<double>(B - b_star));
  }
  void validate(int B) const {
    if (kind == AnomalyKind::None) return;
    if (b_star < 0 || b_star >= B) throw ParameterError("burst depth outside [0, B-1]");
    if (!(gain >= 1.0)) throw ParameterError("anomaly gain must be >= 1");
  }
};

// Per-position record of one forward pass.
struct ToyRun {
  std::vector<int> tokens;                 // T
  std::vector<std::vector<Vec>> h;         // [t][b], b in [0, B]
  std::vector<std::vector<Vec>> o, m;      // [t][b], b in [0, B-1]
};

class ToyModel {
public:
  // Called after the boundary map of block b at position t; may rewrite h_out.
  using Hook = std::function<void(int t, int b, const Vec& h_in, Vec& h_out)>;

  explicit ToyModel(const ToyModelConfig& c) : cfg_(c) {
    c.validate();
    std::mt19937_64 rng(fnv1a64({c.seed, 0x746f79ULL}));
    auto gauss = [&](int r, int k, double sd) {
      Mat X(r, k);
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < r; ++i) X(i, j) = sd * standard_normal(rng);
      return X;
    };
    const int d = c.d;
    // Readout subspace: orthonormal, orthogonal to the all-ones direction so
    // LayerNorm centering leaves it alone.
    Mat G = gauss(d, c.readout_rank + 1, 1.0);
    G.col(0).setOnes();
    Eigen::HouseholderQR<Mat> qr(G);
    const Mat Q = qr.householderQ() * Mat::Identity(d, c.readout_rank + 1);
    basis_ = Q.rightCols(c.readout_rank);

    embed_ = gauss(c.V, d, 1.0);
    pos_ = gauss(c.T, d, c.pos_scale);
    readout_ = gauss(c.V, c.readout_rank, c.readout_scale) * basis_.transpose();
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    for (int b = 0; b < c.B; ++b) {
      Block k;
      k.Wq = gauss(d, d, sd);
      k.Wk = gauss(d, d, sd);
      k.Wv = gauss(d, d, sd);
      k.Wo = basis_ * gauss(c.readout_rank, d, c.attn_scale * sd);
      k.W1 = gauss(c.mlp, d, sd);
      k.b1 = gauss(c.mlp, 1, 0.1);
      k.W2 = basis_ * gauss(c.readout_rank, c.mlp, c.mlp_scale / std::sqrt(static_cast<double>(c.mlp)));
      k.gamma = (Vec::Ones(d) + gauss(d, 1, c.gain_jitter)).cwiseMax(0.5);
      k.beta = gauss(d, 1, c.bias_scale);
      blocks_.push_back(std::move(k));
    }
  }

  const ToyModelConfig& config() const { return cfg_; }
  const Mat& readout() const { return readout_; }
  const Mat& readout_basis() const { return basis_; }

  BoundaryAffine affine(int b) const {  // producing boundary b+1
    return {blocks_[b].gamma, blocks_[b].beta, cfg_.eps_bn, cfg_.norm_kind};
  }

  // Runs T positions. Tokens at positions < forced.size() are taken from
  // `forced`; later ones are the greedy argmax of the previous position's
  // final-boundary logits.
  ToyRun run(const std::vector<int>& forced, const AnomalySpec& anomaly = {}, const Hook& hook = {}) const {
    const int T = cfg_.T, B = cfg_.B, d = cfg_.d;
    if (forced.empty()) throw ParameterError("need at least one forced token");
    ToyRun r;
    r.tokens.assign(T, 0);
    r.h.assign(T, std::vector<Vec>(B + 1));
    r.o.assign(T, std::vector<Vec>(B));
    r.m.assign(T, std::vector<Vec>(B));
    const int nh = cfg_.heads, dh = d / nh;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // keys and values per block for positions seen so far
    std::vector<Mat> keys(B, Mat(d, T)), vals(B, Mat(d, T));
    for (int t = 0; t < T; ++t) {
      int tok;
      if (t < static_cast<int>(forced.size())) tok = forced[t];
      else tok = argmax(readout_ * r.h[t - 1][B]);
      if (tok < 0 || tok >= cfg_.V) throw RangeError("token id outside vocabulary");
      r.tokens[t] = tok;
      Vec h = embed_.row(tok).transpose() + pos_.row(t).transpose();
      r.h[t][0] = h;
      for (int b = 0; b < B; ++b) {
        const auto& k = blocks_[b];
        keys[b].col(t) = k.Wk * h;
        vals[b].col(t) = k.Wv * h;
        const Vec q = k.Wq * h;
        Vec ctx(d);
        for (int hd = 0; hd < nh; ++hd) {
          const auto Kh = keys[b].block(hd * dh, 0, dh, t + 1);
          Vec s = (Kh.transpose() * q.segment(hd * dh, dh)) * scale;
          s = (s.array() - s.maxCoeff()).exp().matrix();
          s /= s.sum();
          ctx.segment(hd * dh, dh) = vals[b].block(hd * dh, 0, dh, t + 1) * s;
        }
        const double f = anomaly.factor(t, b, B);
        Vec o = k.Wo * ctx;
        Vec m = k.W2 * (k.W1 * (h + o) + k.b1).array().tanh().matrix();
        if (f != 1.0) {
          o *= f;
          m *= f;
        }
        Vec out = affine(b).apply(h + o + m);
        if (hook) hook(t, b, h, out);
        r.o[t][b] = std::move(o);
        r.m[t][b] = std::move(m);
        h = std::move(out);
        r.h[t][b + 1] = h;
      }
    }
    return r;
  }

  static int argmax(const Vec& v) {
    int best = 0;
    for (int i = 1; i < v.size(); ++i)
      if (v[i] > v[best]) best = i;
    return best;
  }

  // Final answer x_{T-1} the clean model would emit after tokens[0..T-2].
  int clean_answer(const std::vector<int>& tokens) const {
    const std::vector<int> prefix(tokens.begin(), tokens.begin() + (cfg_.T - 1));
    const auto r = run(prefix);
    return r.tokens[cfg_.T - 1];
  }

  bool is_anomalous(const std::vector<int>& tokens) const {
    return tokens[cfg_.T - 1] != clean_answer(tokens);
  }

  // Trace of a run. Eligible positions exclude BOS and the final position,
  // whose prediction is never used.
  ResidualTrace to_trace(const ToyRun& r, std::int8_t label, std::uint64_t seed) const {
    const int T = cfg_.T, B = cfg_.B, d = cfg_.d;
    auto tr = ResidualTrace::allocate(d, B, T, cfg_.V);
    tr.norm_kind = cfg_.norm_kind;
    tr.eps_bn = cfg_.eps_bn;
    tr.seed = seed;
    tr.label = label;
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < d; ++i) {
        tr.gamma[static_cast<std::size_t>(b) * d + i] = static_cast<float>(blocks_[b].gamma[i]);
        tr.beta[static_cast<std::size_t>(b) * d + i] = static_cast<float>(blocks_[b].beta[i]);
      }
    for (int y = 0; y < cfg_.V; ++y)
      for (int i = 0; i < d; ++i) tr.W[static_cast<std::size_t>(y) * d + i] = static_cast<float>(readout_(y, i));
    auto put = [](FloatGrid& g, int i, int j, const Vec& v) {
      float* dst = g.data.data() + g.offset(i, j);
      for (int c = 0; c < g.width; ++c) dst[c] = static_cast<float>(v[c]);
    };
    for (int t = 0; t < T; ++t) {
      for (int b = 0; b <= B; ++b) put(tr.H, t, b, r.h[t][b]);
      for (int b = 0; b < B; ++b) {
        put(tr.HRAW, t, b, r.h[t][b]);
        put(tr.O, t, b, r.o[t][b]);
        put(tr.M, t, b, r.m[t][b]);
      }
      tr.emask[t] = (t >= 1 && t <= T - 2) ? 1 : 0;
    }
    return tr;
  }

private:
  struct Block {
    Mat Wq, Wk, Wv, Wo, W1, W2;
    Vec b1, gamma, beta;
  };
  ToyModelConfig cfg_;
  Mat basis_, embed_, pos_, readout_;
  std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct DatasetSpec {
  int n = 400;
  double positive_fraction = 0.5;
  AnomalyKind kind = AnomalyKind::DepthBurst;
  double gain = 8.0;
  int t_star_spread = 4;  // t* uniform in [prompt, prompt + spread - 1]
  std::uint64_t seed = 1;
};

struct Sample {
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  AnomalySpec anomaly;
  std::vector<int> prompt;
  ToyRun run;
  ResidualTrace trace;
};

inline std::vector<int> random_prompt(const ToyModelConfig& c, std::mt19937_64& rng) {
  std::vector<int> p(c.prompt);
  p[0] = 0;  // BOS
  for (int i = 1; i < c.prompt; ++i) p[i] = 1 + static_cast<int>(uniform_index(rng, c.V - 1));
  return p;
}

inline AnomalySpec random_anomaly(const ToyModelConfig& c, const DatasetSpec& s, std::mt19937_64& rng) {
  AnomalySpec a;
  a.kind = s.kind;
  a.gain = s.gain;
  a.b_star = static_cast<int>(uniform_index(rng, c.B));
  const int spread = std::max(1, std::min(s.t_star_spread, c.T - 1 - c.prompt));
  a.t_star = c.prompt + static_cast<int>(uniform_index(rng, spread));
  return a;
}

inline Sample generate_sample(const ToyModel& model, const AnomalySpec& anomaly, std::uint64_t id,
                              std::uint64_t seed) {
  anomaly.validate(model.config().B);
  std::mt19937_64 rng(seed);
  Sample s;
  s.id = id;
  s.seed = seed;
  s.anomaly = anomaly;
  s.prompt = random_prompt(model.config(), rng);
  s.run = model.run(s.prompt, anomaly);
  s.trace = model.to_trace(s.run, anomaly.kind == AnomalyKind::None ? 0 : 1, seed);
  return s;
}

// Exactly round(n * fraction) positives, placed by a seeded shuffle.
inline std::vector<Sample> generate_dataset(const ToyModel& model, const DatasetSpec& spec) {
  if (spec.n < 1) throw ParameterError("dataset size must be >= 1");
  if (spec.positive_fraction < 0 || spec.positive_fraction > 1) throw ParameterError("positive fraction outside [0,1]");
  std::mt19937_64 rng(fnv1a64({spec.seed, 0x64617461ULL}));
  const int npos = static_cast<int>(std::lround(spec.n * spec.positive_fraction));
  std::vector<std::uint8_t> positive(spec.n, 0);
  std::fill(positive.begin(), positive.begin() + npos, 1);
  for (std::size_t i = positive.size(); i > 1; --i) std::swap(positive[i - 1], positive[uniform_index(rng, i)]);
  std::vector<Sample> out;
  out.reserve(spec.n);
  for (int i = 0; i < spec.n; ++i) {
    const std::uint64_t seed = fnv1a64({spec.seed, static_cast<std::uint64_t>(i)});
    std::mt19937_64 arng(fnv1a64({seed, 0x616eULL}));
    AnomalySpec a;
    if (positive[i]) a = random_anomaly(model.config(), spec, arng);
    out.push_back(generate_sample(model, a, static_cast<std::uint64_t>(i), seed));
  }
  return out;
}

}  // namespace flowsig
