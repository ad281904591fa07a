// SPDX-License-Identifier: Apache-2.0
//
// RunConfig: every tunable of one run, serialized as key=value lines and
// embedded in the outputs it produces.
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/refinement.hpp"
#include "flowsig/signatures.hpp"
#include "flowsig/synth.hpp"
#include "flowsig/validator.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace flowsig {

struct RunConfig {
  // extraction
  int window_len = 8;
  int stride = 4;
  int competitors = 32;
  int subdim = 16;
  int cap = 512;
  double tau_sigma = kDefaultTauSigma;
  double eps_num = kEpsNum;
  double eps_a = 1e-8;
  double tau_a = 1e-8;
  CenterMode center = CenterMode::CoordMedian;
  int weiszfeld_iters = 50;
  double eps_mu = 1e-8;
  AnchorMode anchor = AnchorMode::Start;
  // validator
  Pooling pooling = Pooling::LogSumExp;
  int hidden = 256;
  int embed = 128;
  int state = 256;
  double dropout = 0.1;
  int epochs = 300;
  int batch = 16;
  double lr = 3e-5;
  double weight_decay = 1e-2;
  double clip = 1.0;
  double train_split = 0.8;
  // refinement
  double alpha = 1.05;
  int ncal = 64;
  // synthetic data
  int n = 400;
  double positive_fraction = 0.5;
  AnomalyKind kind = AnomalyKind::DepthBurst;
  double gain = 8.0;
  int t_star_spread = 4;
  std::uint64_t model_seed = 0;
  // seeds
  std::uint64_t seed = 1;
  std::uint64_t seed0 = 0;

  PipelineParams pipeline() const {
    PipelineParams p;
    p.window_len = window_len;
    p.stride = stride;
    p.basis.directions.K = competitors;
    p.basis.directions.eps_a = eps_a;
    p.basis.directions.tau_a = tau_a;
    p.basis.k = subdim;
    p.basis.cap = cap;
    p.basis.seed0 = seed0;
    p.tau_sigma = tau_sigma;
    p.center.mode = center;
    p.center.iters = weiszfeld_iters;
    p.center.eps_mu = eps_mu;
    p.anchor = anchor;
    p.eps_num = eps_num;
    return p;
  }

  ValidatorConfig validator() const {
    ValidatorConfig c;
    c.hidden = hidden;
    c.embed = embed;
    c.state = state;
    c.dropout = dropout;
    c.pooling = pooling;
    c.epochs = epochs;
    c.batch = batch;
    c.lr = lr;
    c.weight_decay = weight_decay;
    c.clip = clip;
    c.seed = seed;
    return c;
  }

  RefineParams refine() const {
    RefineParams r;
    r.K = competitors;
    r.k = subdim;
    r.cap = cap;
    r.alpha = alpha;
    r.n_cal = ncal;
    r.seed0 = seed0;
    return r;
  }

  ToyModelConfig toy() const {
    ToyModelConfig c;
    c.seed = model_seed;
    return c;
  }

  DatasetSpec dataset() const {
    DatasetSpec s;
    s.n = n;
    s.positive_fraction = positive_fraction;
    s.kind = kind;
    s.gain = gain;
    s.t_star_spread = t_star_spread;
    s.seed = seed;
    return s;
  }

  void validate() const {
    if (window_len < 1) throw ParameterError("window_len must be >= 1");
    if (stride < 1 || stride > window_len) throw ParameterError("stride must be in [1, window_len]");
    if (competitors < 1) throw ParameterError("competitors must be >= 1");
    if (subdim < 1) throw ParameterError("subdim must be >= 1");
    if (cap < 1) throw ParameterError("cap must be >= 1");
    if (!(tau_sigma >= 0 && tau_sigma < 1)) throw ParameterError("tau_sigma must be in [0, 1)");
    if (!(eps_num > 0) || !(eps_a > 0) || !(eps_mu > 0)) throw ParameterError("eps values must be positive");
    if (weiszfeld_iters < 1) throw ParameterError("weiszfeld_iters must be >= 1");
    if (hidden < 1 || embed < 1 || state < 1) throw ParameterError("validator widths must be >= 1");
    if (!(dropout >= 0 && dropout < 1)) throw ParameterError("dropout must be in [0, 1)");
    if (epochs < 0 || batch < 1) throw ParameterError("epochs must be >= 0 and batch >= 1");
    if (!(lr > 0) || !(weight_decay >= 0) || !(clip > 0)) throw ParameterError("optimizer settings out of range");
    if (!(train_split > 0 && train_split <= 1)) throw ParameterError("train_split must be in (0, 1]");
    if (!(alpha > 1)) throw ParameterError("alpha must exceed 1");
    if (ncal < 1) throw ParameterError("ncal must be >= 1");
    if (n < 1) throw ParameterError("n must be >= 1");
    if (!(positive_fraction >= 0 && positive_fraction <= 1)) throw ParameterError("positive_fraction must be in [0, 1]");
    if (!(gain >= 1)) throw ParameterError("gain must be >= 1");
    if (t_star_spread < 1) throw ParameterError("t_star_spread must be >= 1");
  }

  std::string to_string() const;
  void set(const std::string& key, const std::string& value);
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::string& path);
};

namespace config_detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const auto* end = s.data() + s.size();
  const auto r = std::from_chars(s.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) throw ParameterError("bad value for " + key + ": '" + s + "'");
  return v;
}

template <typename E>
E parse_enum(const std::string& key, const std::string& s, std::initializer_list<std::pair<const char*, E>> opts) {
  for (const auto& [name, v] : opts)
    if (s == name) return v;
  throw ParameterError("bad value for " + key + ": '" + s + "'");
}

struct Field {
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define FLOWSIG_NUM(name, T)                                                                    \
  Field{#name, [](const RunConfig& c) {                                                         \
          if constexpr (std::is_floating_point_v<T>) return fmt(c.name);                       \
          else return std::to_string(c.name);                                                   \
        },                                                                                      \
        [](RunConfig& c, const std::string& s) { c.name = parse_number<T>(#name, s); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      FLOWSIG_NUM(window_len, int),
      FLOWSIG_NUM(stride, int),
      FLOWSIG_NUM(competitors, int),
      FLOWSIG_NUM(subdim, int),
      FLOWSIG_NUM(cap, int),
      FLOWSIG_NUM(tau_sigma, double),
      FLOWSIG_NUM(eps_num, double),
      FLOWSIG_NUM(eps_a, double),
      FLOWSIG_NUM(tau_a, double),
      Field{"center", [](const RunConfig& c) { return std::string(flowsig::to_string(c.center)); },
            [](RunConfig& c, const std::string& s) {
              c.center = parse_enum<CenterMode>("center", s,
                                                {{flowsig::to_string(CenterMode::CoordMedian), CenterMode::CoordMedian},
                                                 {flowsig::to_string(CenterMode::Weiszfeld), CenterMode::Weiszfeld},
                                                 {flowsig::to_string(CenterMode::Mean), CenterMode::Mean}});
            }},
      FLOWSIG_NUM(weiszfeld_iters, int),
      FLOWSIG_NUM(eps_mu, double),
      Field{"anchor", [](const RunConfig& c) { return std::string(flowsig::to_string(c.anchor)); },
            [](RunConfig& c, const std::string& s) {
              c.anchor = parse_enum<AnchorMode>("anchor", s,
                                                {{flowsig::to_string(AnchorMode::Start), AnchorMode::Start},
                                                 {flowsig::to_string(AnchorMode::End), AnchorMode::End}});
            }},
      Field{"pooling", [](const RunConfig& c) { return std::string(flowsig::to_string(c.pooling)); },
            [](RunConfig& c, const std::string& s) {
              c.pooling = parse_enum<Pooling>("pooling", s, {{"max", Pooling::Max}, {"lse", Pooling::LogSumExp}});
            }},
      FLOWSIG_NUM(hidden, int),
      FLOWSIG_NUM(embed, int),
      FLOWSIG_NUM(state, int),
      FLOWSIG_NUM(dropout, double),
      FLOWSIG_NUM(epochs, int),
      FLOWSIG_NUM(batch, int),
      FLOWSIG_NUM(lr, double),
      FLOWSIG_NUM(weight_decay, double),
      FLOWSIG_NUM(clip, double),
      FLOWSIG_NUM(train_split, double),
      FLOWSIG_NUM(alpha, double),
      FLOWSIG_NUM(ncal, int),
      FLOWSIG_NUM(n, int),
      FLOWSIG_NUM(positive_fraction, double),
      Field{"kind", [](const RunConfig& c) { return std::string(flowsig::to_string(c.kind)); },
            [](RunConfig& c, const std::string& s) {
              c.kind = parse_enum<AnomalyKind>("kind", s,
                                               {{"none", AnomalyKind::None},
                                                {"burst", AnomalyKind::DepthBurst},
                                                {"diffuse", AnomalyKind::LateDiffuse}});
            }},
      FLOWSIG_NUM(gain, double),
      FLOWSIG_NUM(t_star_spread, int),
      FLOWSIG_NUM(model_seed, std::uint64_t),
      FLOWSIG_NUM(seed, std::uint64_t),
      FLOWSIG_NUM(seed0, std::uint64_t),
  };
  return f;
}

#undef FLOWSIG_NUM

}  // namespace config_detail

inline std::string RunConfig::to_string() const {
  std::string out;
  for (const auto& f : config_detail::fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (key == f.key) return f.set(*this, value);
  throw ParameterError("unknown config key '" + key + "'");
}

// Blank lines and lines starting with '#' are ignored; later keys win.
inline RunConfig RunConfig::parse(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("config line without '=': " + line);
    c.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return c;
}

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace flowsig
