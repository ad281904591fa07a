// SPDX-License-Identifier: Apache-2.0
//
// Recurrent validator over packed flow events: per-channel feature
// normalization, a two-layer GELU encoder with output LayerNorm, a GRU over
// the depth-major event axis, a per-event scoring head and mask-aware
// pooling. Training uses weighted BCE and AdamW; parameters are stored in one
// flat buffer with a named directory (FVAL format).
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/io.hpp"
#include "flowsig/signatures.hpp"

#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace flowsig {

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

struct EventBatch {
  int M = 0;        // samples
  int n_steps = 0;  // padded depth steps
  int T = 0;        // padded tokens
  int F = kFeatureCount;
  std::vector<float> x;             // M x (n_steps*T) x F
  std::vector<std::uint8_t> valid;  // M x (n_steps*T)
  std::vector<std::int8_t> labels;
  std::vector<int> sample_steps, sample_tokens;  // original shapes

  int events() const { return n_steps * T; }
  const float* sample_x(int i) const { return x.data() + static_cast<std::size_t>(i) * events() * F; }
  const std::uint8_t* sample_valid(int i) const { return valid.data() + static_cast<std::size_t>(i) * events(); }
  // Event j sits at depth step j / T and token j % T.
  int event_step(int j) const { return j / T; }
  int event_token(int j) const { return j % T; }
};

inline EventBatch pack(const std::vector<FlowEventGrid>& grids) {
  if (grids.empty()) throw StructuralError("cannot pack an empty list of grids");
  EventBatch e;
  e.M = static_cast<int>(grids.size());
  for (const auto& g : grids) {
    if (g.x.size() != static_cast<std::size_t>(g.n_steps) * g.T * kFeatureCount)
      throw StructuralError("event grid feature count is not 8");
    e.n_steps = std::max(e.n_steps, g.n_steps);
    e.T = std::max(e.T, g.T);
  }
  const auto L = static_cast<std::size_t>(e.events());
  e.x.assign(e.M * L * e.F, 0.0f);
  e.valid.assign(e.M * L, 0);
  for (int i = 0; i < e.M; ++i) {
    const auto& g = grids[i];
    e.labels.push_back(g.label);
    e.sample_steps.push_back(g.n_steps);
    e.sample_tokens.push_back(g.T);
    for (int b = 0; b < g.n_steps; ++b)
      for (int t = 0; t < g.T; ++t) {
        const std::size_t j = i * L + static_cast<std::size_t>(b) * e.T + t;
        if (!g.is_valid(b, t)) continue;
        e.valid[j] = 1;
        std::copy_n(g.features(b, t), kFeatureCount, e.x.data() + j * e.F);
      }
  }
  return e;
}

// Grids with the original shapes; only features and validity are restored.
inline std::vector<FlowEventGrid> unpack(const EventBatch& e) {
  std::vector<FlowEventGrid> out(e.M);
  for (int i = 0; i < e.M; ++i) {
    auto& g = out[i];
    g.n_steps = e.sample_steps[i];
    g.T = e.sample_tokens[i];
    g.label = e.labels[i];
    g.x.assign(static_cast<std::size_t>(g.n_steps) * g.T * kFeatureCount, 0.0f);
    g.valid.assign(static_cast<std::size_t>(g.n_steps) * g.T, 0);
    for (int b = 0; b < g.n_steps; ++b)
      for (int t = 0; t < g.T; ++t) {
        const int j = b * e.T + t;
        g.valid[g.event(b, t)] = e.sample_valid(i)[j];
        std::copy_n(e.sample_x(i) + static_cast<std::size_t>(j) * e.F, kFeatureCount,
                    g.x.data() + g.event(b, t) * kFeatureCount);
      }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class Pooling : std::uint8_t { Max = 0, LogSumExp = 1 };

inline const char* to_string(Pooling p) { return p == Pooling::Max ? "max" : "lse"; }

struct ValidatorConfig {
  int features = kFeatureCount;
  int hidden = 256;
  int embed = 128;
  int state = 256;
  double dropout = 0.1;
  Pooling pooling = Pooling::LogSumExp;
  double ln_eps = 1e-5;
  // training
  int epochs = 300;
  int batch = 16;
  double lr = 3e-5;
  double weight_decay = 1e-2;
  double clip = 1.0;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
};

struct TensorInfo {
  std::string name;
  int rows = 0, cols = 0;
  std::size_t offset = 0;
  bool trainable = true;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

// All tensors live in one contiguous buffer; gradients and optimizer moments
// reuse the same directory.
class ParamStore {
public:
  using MatMap = Eigen::Map<Mat>;
  using CMatMap = Eigen::Map<const Mat>;
  using VecMap = Eigen::Map<Vec>;
  using CVecMap = Eigen::Map<const Vec>;

  void add(const std::string& name, int rows, int cols, bool trainable = true) {
    dir_.push_back({name, rows, cols, data_.size(), trainable});
    index_[name] = dir_.size() - 1;
    data_.resize(data_.size() + dir_.back().size(), 0.0);
  }
  const TensorInfo& info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw StructuralError("unknown tensor " + name);
    return dir_[it->second];
  }
  MatMap mat(const std::string& n) { auto& t = info(n); return {data_.data() + t.offset, t.rows, t.cols}; }
  CMatMap mat(const std::string& n) const { auto& t = info(n); return {data_.data() + t.offset, t.rows, t.cols}; }
  VecMap vec(const std::string& n) { auto& t = info(n); return {data_.data() + t.offset, static_cast<Eigen::Index>(t.size())}; }
  CVecMap vec(const std::string& n) const { auto& t = info(n); return {data_.data() + t.offset, static_cast<Eigen::Index>(t.size())}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }
  const std::vector<TensorInfo>& directory() const { return dir_; }
  ParamStore zeros_like() const {
    ParamStore z = *this;
    std::fill(z.data_.begin(), z.data_.end(), 0.0);
    return z;
  }

private:
  std::vector<double> data_;
  std::vector<TensorInfo> dir_;
  std::map<std::string, std::size_t> index_;
};

inline ParamStore make_params(const ValidatorConfig& c) {
  const int F = c.features, H = c.hidden, E = c.embed, S = c.state;
  ParamStore p;
  p.add("norm_mean", F, 1, false);
  p.add("norm_std", F, 1, false);
  p.add("norm_gain", F, 1);
  p.add("norm_bias", F, 1);
  p.add("enc_w1", H, F);
  p.add("enc_b1", H, 1);
  p.add("enc_w2", E, H);
  p.add("enc_b2", E, 1);
  p.add("enc_ln_gain", E, 1);
  p.add("enc_ln_bias", E, 1);
  p.add("gru_wi", 3 * S, E);  // gate rows: reset, update, candidate
  p.add("gru_bi", 3 * S, 1);
  p.add("gru_wh", 3 * S, S);
  p.add("gru_bh", 3 * S, 1);
  p.add("head_wh", S, 1);
  p.add("head_we", E, 1);
  p.add("head_b", 1, 1);
  return p;
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases; unit
// gains and zero shifts for the normalizations.
inline void init_params(ParamStore& p, const ValidatorConfig& c) {
  std::mt19937_64 rng(fnv1a64({c.seed, 0x76616cULL}));
  auto fill = [&](const std::string& name, int fan_in) {
    const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : p.vec(name)) v = a * (2.0 * uniform01(rng) - 1.0);
  };
  p.vec("norm_mean").setZero();
  p.vec("norm_std").setOnes();
  p.vec("norm_gain").setOnes();
  p.vec("norm_bias").setZero();
  fill("enc_w1", c.features);
  fill("enc_b1", c.features);
  fill("enc_w2", c.hidden);
  fill("enc_b2", c.hidden);
  p.vec("enc_ln_gain").setOnes();
  p.vec("enc_ln_bias").setZero();
  fill("gru_wi", c.state);
  fill("gru_bi", c.state);
  fill("gru_wh", c.state);
  fill("gru_bh", c.state);
  fill("head_wh", c.state + c.embed);
  fill("head_we", c.state + c.embed);
  p.vec("head_b").setZero();
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }
inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}
inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct SampleView {
  const float* x = nullptr;
  const std::uint8_t* valid = nullptr;
  int events = 0;
  int F = kFeatureCount;
  std::int8_t label = -1;
};

inline SampleView view(const EventBatch& e, int i) {
  return {e.sample_x(i), e.sample_valid(i), e.events(), e.F, e.labels[i]};
}

struct Prediction {
  double score = 0.5;
  double pooled = 0.0;
  bool no_valid_events = false;
  std::vector<double> event_logits;  // one per event; 0 at invalid positions
};

class Validator {
public:
  Validator() = default;
  explicit Validator(const ValidatorConfig& c) : cfg_(c), p_(make_params(c)) { init_params(p_, c); }

  const ValidatorConfig& config() const { return cfg_; }
  ValidatorConfig& config() { return cfg_; }
  ParamStore& params() { return p_; }
  const ParamStore& params() const { return p_; }

  // Fixed per-channel mean and standard deviation over valid events.
  void fit_feature_stats(const std::vector<SampleView>& samples) {
    const int F = cfg_.features;
    Vec sum = Vec::Zero(F), sq = Vec::Zero(F);
    double n = 0;
    for (const auto& s : samples)
      for (int j = 0; j < s.events; ++j) {
        if (!s.valid[j]) continue;
        for (int f = 0; f < F; ++f) {
          const double v = s.x[static_cast<std::size_t>(j) * F + f];
          sum[f] += v;
          sq[f] += v * v;
        }
        n += 1;
      }
    if (n == 0) return;
    const Vec mean = sum / n;
    Vec sd = (sq / n - mean.cwiseAbs2()).cwiseMax(0.0).cwiseSqrt();
    for (int f = 0; f < F; ++f) if (sd[f] < 1e-12) sd[f] = 1.0;
    p_.vec("norm_mean") = mean;
    p_.vec("norm_std") = sd;
  }

  struct EventCache {
    int j = 0;
    Vec xs, a1, g, mask, ln_hat, e, h_prev, r, z, n, hn, h;
    double ln_inv = 0, logit = 0;
  };

  // Forward pass over one sample. When rng is given, dropout is active.
  Prediction forward(const SampleView& s, std::mt19937_64* rng = nullptr,
                     std::vector<EventCache>* caches = nullptr) const {
    const int F = cfg_.features, S = cfg_.state;
    if (s.F != F) throw StructuralError("feature count does not match the validator");
    const auto mean = p_.vec("norm_mean"), sd = p_.vec("norm_std");
    const auto ngain = p_.vec("norm_gain"), nbias = p_.vec("norm_bias");
    const auto W1 = p_.mat("enc_w1"), W2 = p_.mat("enc_w2"), Wi = p_.mat("gru_wi"), Wh = p_.mat("gru_wh");
    const auto b1 = p_.vec("enc_b1"), b2 = p_.vec("enc_b2"), lg = p_.vec("enc_ln_gain"), lb = p_.vec("enc_ln_bias");
    const auto bi = p_.vec("gru_bi"), bh = p_.vec("gru_bh");
    const auto wh = p_.vec("head_wh"), we = p_.vec("head_we");
    const double hb = p_.vec("head_b")[0];
    const double keep = 1.0 - cfg_.dropout;

    Prediction out;
    out.event_logits.assign(s.events, 0.0);
    Vec h = Vec::Zero(S);
    std::vector<double> zs;
    std::vector<int> js;
    for (int j = 0; j < s.events; ++j) {
      if (!s.valid[j]) continue;
      EventCache c;
      c.j = j;
      Vec x(F);
      for (int f = 0; f < F; ++f) x[f] = s.x[static_cast<std::size_t>(j) * F + f];
      c.xs = ((x - mean).array() / sd.array()).matrix();
      const Vec xn = (c.xs.array() * ngain.array()).matrix() + nbias;
      c.a1 = W1 * xn + b1;
      c.g = c.a1.unaryExpr([](double v) { return gelu(v); });
      c.mask = Vec::Ones(c.g.size());
      if (rng && cfg_.dropout > 0) {
        for (Eigen::Index i = 0; i < c.mask.size(); ++i) c.mask[i] = uniform01(*rng) < keep ? 1.0 / keep : 0.0;
        c.g = c.g.cwiseProduct(c.mask);
      }
      const Vec pre = W2 * c.g + b2;
      const double mu = pre.mean();
      const double var = (pre.array() - mu).square().mean();
      c.ln_inv = 1.0 / std::sqrt(var + cfg_.ln_eps);
      c.ln_hat = (pre.array() - mu).matrix() * c.ln_inv;
      c.e = (lg.array() * c.ln_hat.array()).matrix() + lb;

      const Vec gi = Wi * c.e + bi;
      const Vec gh = Wh * h + bh;
      c.h_prev = h;
      c.r = (gi.segment(0, S) + gh.segment(0, S)).unaryExpr([](double v) { return sigmoid(v); });
      c.z = (gi.segment(S, S) + gh.segment(S, S)).unaryExpr([](double v) { return sigmoid(v); });
      c.hn = gh.segment(2 * S, S);
      c.n = (gi.segment(2 * S, S) + c.r.cwiseProduct(c.hn)).array().tanh().matrix();
      h = (1.0 - c.z.array()) * c.n.array() + c.z.array() * h.array();
      c.h = h;
      c.logit = wh.dot(h) + we.dot(c.e) + hb;
      out.event_logits[j] = c.logit;
      zs.push_back(c.logit);
      js.push_back(j);
      if (caches) caches->push_back(std::move(c));
    }
    if (zs.empty()) {
      out.no_valid_events = true;
      return out;
    }
    out.pooled = pool(zs);
    out.score = sigmoid(out.pooled);
    return out;
  }

  // Max, or log-mean-exp so that equal logits pool to themselves whatever
  // the number of valid events.
  double pool(const std::vector<double>& z) const {
    const double mx = *std::max_element(z.begin(), z.end());
    if (cfg_.pooling == Pooling::Max) return mx;
    double acc = 0;
    for (double v : z) acc += std::exp(v - mx);
    return mx + std::log(acc / static_cast<double>(z.size()));
  }

  // d pooled / d z_i over the valid logits in event order.
  std::vector<double> pool_grad(const std::vector<double>& z) const {
    std::vector<double> w(z.size(), 0.0);
    const auto it = std::max_element(z.begin(), z.end());
    if (cfg_.pooling == Pooling::Max) {
      w[it - z.begin()] = 1.0;
      return w;
    }
    double acc = 0;
    for (std::size_t i = 0; i < z.size(); ++i) acc += (w[i] = std::exp(z[i] - *it));
    for (auto& v : w) v /= acc;
    return w;
  }

  // Adds d(dpooled * pooled)/d(params) into grad.
  void backward(const std::vector<EventCache>& caches, double dpooled, ParamStore& grad) const {
    if (caches.empty()) return;
    const int S = cfg_.state;
    std::vector<double> z;
    for (const auto& c : caches) z.push_back(c.logit);
    const auto pw = pool_grad(z);

    const auto ngain = p_.vec("norm_gain");
    const auto W1 = p_.mat("enc_w1"), W2 = p_.mat("enc_w2"), Wi = p_.mat("gru_wi"), Wh = p_.mat("gru_wh");
    const auto lg = p_.vec("enc_ln_gain");
    const auto wh = p_.vec("head_wh"), we = p_.vec("head_we");

    auto gW1 = grad.mat("enc_w1"), gW2 = grad.mat("enc_w2"), gWi = grad.mat("gru_wi"), gWh = grad.mat("gru_wh");
    auto gb1 = grad.vec("enc_b1"), gb2 = grad.vec("enc_b2"), glg = grad.vec("enc_ln_gain"), glb = grad.vec("enc_ln_bias");
    auto gbi = grad.vec("gru_bi"), gbh = grad.vec("gru_bh");
    auto gwh = grad.vec("head_wh"), gwe = grad.vec("head_we"), ghb = grad.vec("head_b");
    auto gng = grad.vec("norm_gain"), gnb = grad.vec("norm_bias");

    Vec dh_next = Vec::Zero(S);
    Vec dgi(3 * S), dgh(3 * S);
    for (int i = static_cast<int>(caches.size()) - 1; i >= 0; --i) {
      const auto& c = caches[i];
      const double dz = dpooled * pw[i];
      Vec dh = dh_next + dz * wh;
      gwh += dz * c.h;
      gwe += dz * c.e;
      ghb[0] += dz;
      Vec de = dz * we;

      const Vec dn = dh.cwiseProduct((1.0 - c.z.array()).matrix());
      const Vec dzg = dh.cwiseProduct(c.h_prev - c.n);
      Vec dh_prev = dh.cwiseProduct(c.z);
      const Vec dan = dn.cwiseProduct((1.0 - c.n.array().square()).matrix());
      const Vec dr = dan.cwiseProduct(c.hn);
      const Vec dar = dr.cwiseProduct((c.r.array() * (1.0 - c.r.array())).matrix());
      const Vec daz = dzg.cwiseProduct((c.z.array() * (1.0 - c.z.array())).matrix());
      dgi << dar, daz, dan;
      dgh << dar, daz, dan.cwiseProduct(c.r);
      gWi.noalias() += dgi * c.e.transpose();
      gbi += dgi;
      gWh.noalias() += dgh * c.h_prev.transpose();
      gbh += dgh;
      de.noalias() += Wi.transpose() * dgi;
      dh_prev.noalias() += Wh.transpose() * dgh;
      dh_next = dh_prev;

      glg += de.cwiseProduct(c.ln_hat);
      glb += de;
      const Vec dhat = de.cwiseProduct(lg);
      const double m1 = dhat.mean();
      const double m2 = dhat.cwiseProduct(c.ln_hat).mean();
      const Vec dpre = c.ln_inv * ((dhat.array() - m1) - c.ln_hat.array() * m2).matrix();
      gW2.noalias() += dpre * c.g.transpose();
      gb2 += dpre;
      const Vec dg = (W2.transpose() * dpre).cwiseProduct(c.mask);
      const Vec da1 = dg.cwiseProduct(c.a1.unaryExpr([](double v) { return gelu_grad(v); }));
      const Vec xn = (c.xs.array() * ngain.array()).matrix() + p_.vec("norm_bias");
      gW1.noalias() += da1 * xn.transpose();
      gb1 += da1;
      const Vec dxn = W1.transpose() * da1;
      gng += dxn.cwiseProduct(c.xs);
      gnb += dxn;
    }
  }

private:
  ValidatorConfig cfg_;
  ParamStore p_;
};

// ---------------------------------------------------------------------------
// Loss and training
// ---------------------------------------------------------------------------

inline double positive_weight(const std::vector<std::int8_t>& labels) {
  double pos = 0, neg = 0;
  for (auto y : labels) {
    if (y == 1) ++pos;
    if (y == 0) ++neg;
  }
  return pos > 0 ? neg / pos : 1.0;
}

// Weighted BCE on the pooled logit and its derivative.
inline double bce_with_logits(double s, int y, double pos_weight, double* dlogit = nullptr) {
  const double sig = sigmoid(s);
  // log(sigmoid(s)) and log(1 - sigmoid(s)) computed stably
  const double log_p = -std::log1p(std::exp(-std::abs(s))) + std::min(s, 0.0);
  const double log_q = -std::log1p(std::exp(-std::abs(s))) + std::min(-s, 0.0);
  if (dlogit) *dlogit = y ? pos_weight * (sig - 1.0) : sig;
  return y ? -pos_weight * log_p : -log_q;
}

// Mean weighted BCE over samples with binary labels, with its gradient.
// Dropout is active when rng is given.
inline double batch_loss(const Validator& v, const std::vector<SampleView>& samples, double pos_weight,
                         ParamStore* grad, std::mt19937_64* rng = nullptr) {
  double total = 0;
  int n = 0;
  for (const auto& s : samples) if (s.label == 0 || s.label == 1) ++n;
  if (n == 0) return 0.0;
  std::vector<Validator::EventCache> caches;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) continue;
    caches.clear();
    const auto pred = v.forward(s, rng, grad ? &caches : nullptr);
    if (pred.no_valid_events) continue;
    double dl = 0;
    total += bce_with_logits(pred.pooled, s.label, pos_weight, &dl);
    if (grad) v.backward(caches, dl / n, *grad);
  }
  return total / n;
}

struct AdamW {
  std::vector<double> m, v;
  long step = 0;

  void update(ParamStore& p, const ParamStore& g, const ValidatorConfig& c) {
    auto& x = p.data();
    const auto& gd = g.data();
    if (m.empty()) m.assign(x.size(), 0.0), v.assign(x.size(), 0.0);
    ++step;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
    for (const auto& t : p.directory()) {
      if (!t.trainable) continue;
      for (std::size_t i = t.offset; i < t.offset + t.size(); ++i) {
        x[i] *= 1.0 - c.lr * c.weight_decay;
        m[i] = c.beta1 * m[i] + (1 - c.beta1) * gd[i];
        v[i] = c.beta2 * v[i] + (1 - c.beta2) * gd[i] * gd[i];
        x[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.adam_eps);
      }
    }
  }
};

inline double clip_gradient(ParamStore& g, double max_norm) {
  double sq = 0;
  for (double v : g.data()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm)
    for (double& v : g.data()) v *= max_norm / (norm + 1e-12);
  return norm;
}

struct TrainLog {
  double pos_weight = 1.0;
  std::vector<double> epoch_loss;
  int n_train = 0;
  int skipped_unlabeled = 0;
};

inline TrainLog train(Validator& v, const std::vector<SampleView>& all) {
  const auto& c = v.config();
  std::vector<SampleView> data;
  TrainLog log;
  for (const auto& s : all) {
    if (s.label == 0 || s.label == 1) data.push_back(s);
    else ++log.skipped_unlabeled;
  }
  if (data.empty()) throw TrainingError("no samples with labels in {0,1}");
  log.n_train = static_cast<int>(data.size());
  std::vector<std::int8_t> labels;
  for (const auto& s : data) labels.push_back(s.label);
  log.pos_weight = positive_weight(labels);
  v.fit_feature_stats(data);

  std::mt19937_64 rng(fnv1a64({c.seed, 0x747261696eULL}));
  AdamW opt;
  ParamStore grad = v.params().zeros_like();
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const int bs = std::max(1, c.batch);
  for (int ep = 0; ep < c.epochs; ++ep) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[uniform_index(rng, i)]);
    double ep_loss = 0;
    int nb = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<SampleView> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) batch.push_back(data[order[k]]);
      std::fill(grad.data().begin(), grad.data().end(), 0.0);
      ep_loss += batch_loss(v, batch, log.pos_weight, &grad, &rng);
      ++nb;
      clip_gradient(grad, c.clip);
      opt.update(v.params(), grad, c);
    }
    log.epoch_loss.push_back(ep_loss / nb);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct Metrics {
  double accuracy = 0;
  std::optional<double> auroc;
  int n = 0;
};

// Mann-Whitney AUROC with average ranks for ties; absent for one class.
inline std::optional<double> auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }
  double npos = 0, nneg = 0, rsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) { ++npos; rsum += rank[i]; }
    else ++nneg;
  }
  if (npos == 0 || nneg == 0) return std::nullopt;
  return (rsum - npos * (npos + 1) / 2) / (npos * nneg);
}

inline Metrics metrics_from_scores(const std::vector<double>& scores, const std::vector<int>& labels) {
  Metrics m;
  m.n = static_cast<int>(scores.size());
  int hit = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hit += ((scores[i] >= 0.5) == (labels[i] == 1));
  m.accuracy = m.n ? static_cast<double>(hit) / m.n : 0.0;
  m.auroc = auroc(scores, labels);
  return m;
}

inline Metrics evaluate(const Validator& v, const std::vector<SampleView>& samples) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : samples) {
    if (s.label != 0 && s.label != 1) continue;
    scores.push_back(v.forward(s).score);
    labels.push_back(s.label);
  }
  return metrics_from_scores(scores, labels);
}

// ---------------------------------------------------------------------------
// FVAL file format (version 1)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kValidatorVersion = 1;

inline void save_validator(const Validator& v, const std::string& path, const std::string& run_config = {}) {
  const auto& c = v.config();
  io::ContainerWriter w("FVAL", kValidatorVersion);
  io::ByteWriter h;
  h.put<std::int32_t>(c.features);
  h.put<std::int32_t>(c.hidden);
  h.put<std::int32_t>(c.embed);
  h.put<std::int32_t>(c.state);
  h.put<double>(c.dropout);
  h.put<std::uint8_t>(static_cast<std::uint8_t>(c.pooling));
  h.put<double>(c.ln_eps);
  w.section(h.bytes());
  io::ByteWriter d;
  const auto& dir = v.params().directory();
  d.put<std::uint32_t>(static_cast<std::uint32_t>(dir.size()));
  for (const auto& t : dir) {
    d.put_string(t.name);
    d.put<std::int32_t>(t.rows);
    d.put<std::int32_t>(t.cols);
    d.put<std::uint64_t>(t.offset);
    d.put<std::uint8_t>(t.trainable ? 1 : 0);
  }
  w.section(d.bytes());
  std::vector<float> blob(v.params().data().begin(), v.params().data().end());
  w.array_section<float>(blob);
  w.array_section<char>(run_config);
  w.save(path);
}

inline Validator load_validator(const std::string& path, std::string* run_config = nullptr) {
  io::ContainerReader r(path, "FVAL", kValidatorVersion);
  io::ByteReader h(r.section("HEADER"), "HEADER");
  ValidatorConfig c;
  c.features = h.get<std::int32_t>();
  c.hidden = h.get<std::int32_t>();
  c.embed = h.get<std::int32_t>();
  c.state = h.get<std::int32_t>();
  c.dropout = h.get<double>();
  const auto pool = h.get<std::uint8_t>();
  if (pool > 1) throw FormatError("section HEADER: unknown pooling");
  c.pooling = static_cast<Pooling>(pool);
  c.ln_eps = h.get<double>();
  if (!h.at_end()) throw FormatError("section HEADER: trailing bytes");
  if (c.features != kFeatureCount || c.hidden < 1 || c.embed < 1 || c.state < 1 || c.hidden > (1 << 16) ||
      c.embed > (1 << 16) || c.state > (1 << 16))
    throw FormatError("section HEADER: implausible architecture");
  Validator v(c);
  io::ByteReader d(r.section("DIRECTORY"), "DIRECTORY");
  const auto n = d.get<std::uint32_t>();
  const auto& expect = v.params().directory();
  if (n != expect.size()) throw FormatError("section DIRECTORY: tensor count mismatch");
  for (const auto& t : expect) {
    const auto name = d.get_string();
    const auto rows = d.get<std::int32_t>(), cols = d.get<std::int32_t>();
    const auto off = d.get<std::uint64_t>();
    d.get<std::uint8_t>();
    if (name != t.name || rows != t.rows || cols != t.cols || off != t.offset)
      throw FormatError("section DIRECTORY: tensor " + name + " does not match the architecture");
  }
  if (!d.at_end()) throw FormatError("section DIRECTORY: trailing bytes");
  const auto blob = r.array_section<float>("PARAMS", v.params().data().size());
  std::copy(blob.begin(), blob.end(), v.params().data().begin());
  auto cfg = r.section("CONFIG");
  if (run_config) run_config->assign(reinterpret_cast<const char*>(cfg.data()), cfg.size());
  if (!r.at_end()) throw FormatError("section TRAILER: unexpected trailing data");
  for (double x : v.params().data())
    if (!std::isfinite(x)) throw FormatError("section PARAMS: non-finite parameter");
  return v;
}

}  // namespace flowsig
