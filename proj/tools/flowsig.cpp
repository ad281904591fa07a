// SPDX-License-Identifier: Apache-2.0
//
// flowsig: synth -> extract -> train -> detect, plus refine and report.
#include "flowsig/config.hpp"
#include "flowsig/manifest.hpp"
#include "flowsig/refinement.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using namespace flowsig;

namespace {

// Files and directories written by the current command; removed again if
// the command fails.
class OutputGuard {
public:
  void file(const std::string& p) { files_.push_back(p); }
  void make_dir(const std::string& p) {
    if (fs::exists(p)) {
      if (!fs::is_directory(p)) throw FormatError("output path exists and is not a directory: " + p);
      return;
    }
    fs::create_directories(p);
    dirs_.push_back(p);
  }
  void rollback() noexcept {
    std::error_code ec;
    for (const auto& f : files_) fs::remove(f, ec);
    for (auto it = dirs_.rbegin(); it != dirs_.rend(); ++it) fs::remove_all(*it, ec);
  }

private:
  std::vector<std::string> files_, dirs_;
};

OutputGuard g_guard;

void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int w = 0; w < jobs; ++w)
    pool.emplace_back([&] {
      for (int i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

void write_text(const std::string& path, const std::string& text) {
  g_guard.file(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path);
  out << text;
  if (!out) throw FormatError("failed writing " + path);
}

std::string config_block(const RunConfig& c) {
  std::string out;
  std::istringstream in(c.to_string());
  for (std::string line; std::getline(in, line);) out += "#@ " + line + "\n";
  return out;
}

std::string numbered(const std::string& stem, std::uint64_t id, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%05llu.%s", stem.c_str(), static_cast<unsigned long long>(id), ext);
  return buf;
}

// Config flags mapped onto RunConfig keys. The effective config is the
// upstream one (or --config), overridden by the flags actually given.
class ConfigFlags {
public:
  explicit ConfigFlags(CLI::App* app) : app_(app) {
    app_->add_option("--config", config_path_, "key=value file replacing the inherited run config");
  }
  ConfigFlags& add(const std::string& flag, const std::string& key, const std::string& help) {
    auto* opt = app_->add_option(flag, values_[key], help);
    opts_.emplace_back(opt, key);
    return *this;
  }
  RunConfig resolve(const RunConfig& inherited) const {
    RunConfig c = config_path_.empty() ? inherited : RunConfig::load(config_path_);
    for (const auto& [opt, key] : opts_)
      if (opt->count() > 0) c.set(key, values_.at(key));
    c.validate();
    return c;
  }

private:
  CLI::App* app_;
  std::string config_path_;
  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, std::string>> opts_;
};

void add_pipeline_flags(ConfigFlags& f) {
  f.add("--window-len", "window_len", "window length L")
      .add("--stride", "stride", "window stride s")
      .add("--competitors", "competitors", "competitor count K")
      .add("--subdim", "subdim", "subspace dimension k")
      .add("--cap", "cap", "direction cap per window")
      .add("--tau-sigma", "tau_sigma", "transport reset threshold")
      .add("--center", "center", "centering: median, weiszfeld, mean")
      .add("--anchor", "anchor", "drift anchor: start, end")
      .add("--seed0", "seed0", "subsampling seed");
}

void add_validator_flags(ConfigFlags& f) {
  f.add("--pooling", "pooling", "max or lse")
      .add("--hidden", "hidden", "encoder hidden width")
      .add("--embed", "embed", "event embedding width")
      .add("--state", "state", "recurrent state width")
      .add("--dropout", "dropout", "encoder dropout")
      .add("--epochs", "epochs", "training epochs")
      .add("--batch", "batch", "batch size")
      .add("--lr", "lr", "learning rate")
      .add("--weight-decay", "weight_decay", "decoupled weight decay")
      .add("--train-split", "train_split", "leading fraction of the manifest used for training");
}

void add_refine_flags(ConfigFlags& f) {
  f.add("--clamp-ratio,--alpha", "alpha", "clamp ratio alpha")
      .add("--ncal", "ncal", "calibration span N_cal");
}

Sample regenerate(const ToyModel& model, const ManifestRow& r) {
  return generate_sample(model, r.anomaly, r.id, r.seed);
}

int split_point(const RunConfig& c, int n) {
  return std::clamp(static_cast<int>(std::floor(c.train_split * n)), 0, n);
}

std::vector<FlowEventGrid> load_grids(const Manifest& m, const std::string& path, int jobs) {
  std::vector<FlowEventGrid> grids(m.rows.size());
  parallel_for(static_cast<int>(m.rows.size()), jobs, [&](int i) { grids[i] = load_grid(m.resolve(path, m.rows[i])); });
  return grids;
}

// ---------------------------------------------------------------------------

int cmd_synth(const ConfigFlags& flags, const std::string& out_dir, int jobs) {
  const RunConfig cfg = flags.resolve(RunConfig{});
  const ToyModel model(cfg.toy());
  const auto spec = cfg.dataset();
  g_guard.make_dir(out_dir);
  const auto data = generate_dataset(model, spec);
  Manifest m;
  m.kind = "traces";
  m.config = cfg;
  m.rows.resize(data.size());
  parallel_for(static_cast<int>(data.size()), jobs, [&](int i) {
    const auto& s = data[i];
    m.rows[i] = {numbered("trace", s.id, "fsig"), s.trace.label, s.id, s.seed, s.anomaly};
  });
  for (const auto& r : m.rows) g_guard.file((fs::path(out_dir) / r.path).string());
  parallel_for(static_cast<int>(data.size()), jobs,
               [&](int i) { save_trace(data[i].trace, (fs::path(out_dir) / m.rows[i].path).string()); });
  const auto mpath = (fs::path(out_dir) / "manifest.tsv").string();
  g_guard.file(mpath);
  save_manifest(m, mpath);
  std::cout << "wrote " << data.size() << " traces to " << out_dir << "\n";
  return 0;
}

int cmd_extract(const ConfigFlags& flags, const std::string& manifest_path, const std::string& out_dir, int jobs) {
  const auto in = load_manifest(manifest_path);
  const RunConfig cfg = flags.resolve(in.config);
  const auto pp = cfg.pipeline();
  const std::string cfg_text = cfg.to_string();
  g_guard.make_dir(out_dir);
  Manifest out;
  out.kind = "events";
  out.config = cfg;
  out.rows = in.rows;
  for (auto& r : out.rows) {
    r.path = numbered("events", r.id, "fevt");
    g_guard.file((fs::path(out_dir) / r.path).string());
  }
  parallel_for(static_cast<int>(in.rows.size()), jobs, [&](int i) {
    const auto tr = load_trace(in.resolve(manifest_path, in.rows[i]));
    auto grid = build_event_grid(tr, pp, in.rows[i].id);
    grid.config = cfg_text;
    save_grid(grid, (fs::path(out_dir) / out.rows[i].path).string());
  });
  const auto mpath = (fs::path(out_dir) / "manifest.tsv").string();
  g_guard.file(mpath);
  save_manifest(out, mpath);
  std::cout << "extracted " << out.rows.size() << " event grids to " << out_dir << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& flags, const std::string& events_path, const std::string& out_path, int jobs) {
  const auto m = load_manifest(events_path);
  const RunConfig cfg = flags.resolve(m.config);
  const auto grids = load_grids(m, events_path, jobs);
  const int n_train = split_point(cfg, static_cast<int>(grids.size()));
  if (n_train == 0) throw TrainingError("training split is empty");
  const auto batch = pack(grids);
  std::vector<SampleView> train_views, test_views;
  for (int i = 0; i < batch.M; ++i) (i < n_train ? train_views : test_views).push_back(view(batch, i));
  Validator v(cfg.validator());
  const auto log = train(v, train_views);
  g_guard.file(out_path);
  save_validator(v, out_path, cfg.to_string());

  std::ostringstream lg;
  lg << "# flowsig training log v1\n" << config_block(cfg);
  lg << "n_train=" << log.n_train << "\nskipped_unlabeled=" << log.skipped_unlabeled << "\npos_weight="
     << config_detail::fmt(log.pos_weight) << "\n";
  for (std::size_t e = 0; e < log.epoch_loss.size(); ++e)
    lg << "epoch_loss_" << e << "=" << config_detail::fmt(log.epoch_loss[e]) << "\n";
  if (!test_views.empty()) {
    const auto met = evaluate(v, test_views);
    lg << "test_n=" << met.n << "\ntest_accuracy=" << config_detail::fmt(met.accuracy) << "\n";
    if (met.auroc) lg << "test_auroc=" << config_detail::fmt(*met.auroc) << "\n";
    std::cout << "held-out accuracy " << met.accuracy;
    if (met.auroc) std::cout << " auroc " << *met.auroc;
    std::cout << " (" << met.n << " samples)\n";
  }
  write_text(out_path + ".log", lg.str());
  std::cout << "trained on " << log.n_train << " samples, wrote " << out_path << "\n";
  return 0;
}

int cmd_detect(const ConfigFlags& flags, const std::string& model_path, const std::string& events_path,
               const std::string& subset, const std::string& out_path, int jobs) {
  std::string model_cfg;
  const auto v = load_validator(model_path, &model_cfg);
  const auto m = load_manifest(events_path);
  const RunConfig cfg = flags.resolve(model_cfg.empty() ? m.config : RunConfig::parse(model_cfg));
  const auto grids = load_grids(m, events_path, jobs);
  const int n = static_cast<int>(grids.size());
  const int cut = split_point(cfg, n);
  int lo = 0, hi = n;
  if (subset == "train") hi = cut;
  else if (subset == "test") lo = cut;
  if (lo >= hi) throw PreconditionError("selected subset '" + subset + "' is empty");

  const auto batch = pack(grids);
  struct Row {
    Prediction pred;
    Culprit culprit;
    bool located = false;
  };
  std::vector<Row> rows(hi - lo);
  parallel_for(hi - lo, jobs, [&](int k) {
    const int i = lo + k;
    rows[k].pred = v.forward(view(batch, i));
    if (!rows[k].pred.no_valid_events) {
      rows[k].culprit = locate_culprit(rows[k].pred.event_logits, batch.sample_valid(i), batch.T);
      rows[k].located = true;
    }
  });
  std::vector<double> scores;
  std::vector<int> labels;
  int detected_pos = 0, localized = 0;
  for (int k = 0; k < hi - lo; ++k) {
    const auto& r = m.rows[lo + k];
    scores.push_back(rows[k].pred.score);
    labels.push_back(r.label);
    if (r.label == 1 && rows[k].pred.score >= 0.5 && rows[k].located && r.anomaly.kind != AnomalyKind::None) {
      ++detected_pos;
      localized += rows[k].culprit.b0 == r.anomaly.b_star;
    }
  }
  const auto met = metrics_from_scores(scores, labels);
  std::ostringstream o;
  o << "# flowsig detections v1\n" << config_block(cfg);
  o << "subset=" << subset << "\nn=" << met.n << "\naccuracy=" << config_detail::fmt(met.accuracy) << "\n";
  o << "auroc=" << (met.auroc ? config_detail::fmt(*met.auroc) : std::string("nan")) << "\n";
  o << "detected_positives=" << detected_pos << "\nlocalization="
    << (detected_pos ? config_detail::fmt(static_cast<double>(localized) / detected_pos) : std::string("nan")) << "\n";
  o << "# id\tlabel\tscore\tt0\tb0\tb_star\n";
  for (int k = 0; k < hi - lo; ++k) {
    const auto& r = m.rows[lo + k];
    o << r.id << '\t' << r.label << '\t' << config_detail::fmt(rows[k].pred.score) << '\t'
      << (rows[k].located ? rows[k].culprit.t0 : -1) << '\t' << (rows[k].located ? rows[k].culprit.b0 : -1) << '\t'
      << (r.anomaly.kind == AnomalyKind::None ? -1 : r.anomaly.b_star) << "\n";
  }
  write_text(out_path, o.str());
  std::cout << "accuracy " << met.accuracy << " auroc " << (met.auroc ? *met.auroc : std::nan(""))
            << " localization " << (detected_pos ? static_cast<double>(localized) / detected_pos : std::nan(""))
            << " (" << met.n << " samples)\n";
  return 0;
}

int cmd_refine(const ConfigFlags& flags, const std::string& model_path, const std::string& manifest_path,
               const std::string& mode, const std::string& out_dir, int jobs) {
  static const std::map<std::string, int> kModes{{"none", -1}, {"regen", 1}, {"random", 2}, {"flow", 3}};
  const auto mode_it = kModes.find(mode);
  if (mode_it == kModes.end()) throw ParameterError("unknown mode '" + mode + "'");
  std::string model_cfg;
  const auto v = load_validator(model_path, &model_cfg);
  const auto m = load_manifest(manifest_path);
  if (m.kind != "traces") throw FormatError("refine needs a trace manifest");
  const RunConfig cfg = flags.resolve(model_cfg.empty() ? m.config : RunConfig::parse(model_cfg));
  const ToyModel model(RunConfig(m.config).toy());
  const auto pp = cfg.pipeline();
  const auto rp = cfg.refine();
  const int keep = mode_it->second;
  g_guard.make_dir(out_dir);

  const int n = static_cast<int>(m.rows.size());
  std::vector<SampleProtocolResult> results(n);
  std::vector<std::string> refined_paths(n);
  for (int i = 0; i < n && keep >= 0; ++i) {
    refined_paths[i] = numbered("refined_" + mode, m.rows[i].id, "fsig");
    g_guard.file((fs::path(out_dir) / refined_paths[i]).string());
  }
  parallel_for(n, jobs, [&](int i) {
    const auto s = regenerate(model, m.rows[i]);
    results[i] = run_protocols(model, s, v, pp, rp, cfg.seed, keep >= 0);
    if (keep >= 0) {
      const auto tr = model.to_trace(results[i].runs[keep], s.trace.label, s.seed);
      save_trace(tr, (fs::path(out_dir) / refined_paths[i]).string());
      results[i].runs = {};
    }
  });
  ProtocolTable t;
  for (auto& r : results) t.add(std::move(r));

  std::ostringstream o;
  o << "# flowsig protocol table v1\n" << config_block(cfg);
  o << "n=" << t.n << "\nmode=" << mode << "\n";
  for (int p = 0; p < 4; ++p)
    o << "rate_" << kProtocolNames[p] << "=" << config_detail::fmt(t.rate(static_cast<Protocol>(p))) << "\n";
  o << "calibration_failures=" << t.calibration_failures << "\nintervened_steps=" << t.intervened_steps
    << "\nmax_lambda=" << config_detail::fmt(t.max_lambda)
    << "\nmax_subspace_residual=" << config_detail::fmt(t.max_subspace_residual)
    << "\nmax_idempotence_error=" << config_detail::fmt(t.max_idempotence)
    << "\nmax_step_excess=" << config_detail::fmt(t.intervened_steps ? t.max_step_excess : 0.0)
    << "\nmin_direction_cosine=" << config_detail::fmt(t.min_direction_cosine)
    << "\nmean_overhead_tokens=" << config_detail::fmt(t.n ? static_cast<double>(t.overhead_tokens) / t.n : 0.0)
    << "\n";
  o << "# id\tt0\tb0\trandom_depth\tinitial\tregeneration\trandom_depth_anomalous\tflow_guided\trefined_trace\n";
  for (int i = 0; i < n; ++i) {
    const auto& r = t.samples[i];
    o << m.rows[i].id << '\t' << r.culprit.t0 << '\t' << r.culprit.b0 << '\t' << r.random_depth;
    for (int p = 0; p < 4; ++p) o << '\t' << r.anomalous[p];
    o << '\t' << (keep >= 0 ? refined_paths[i] : "-") << "\n";
  }
  write_text((fs::path(out_dir) / "protocol.txt").string(), o.str());
  std::cout << "anomaly rates over " << t.n << " samples:";
  for (int p = 0; p < 4; ++p) std::cout << ' ' << kProtocolNames[p] << '=' << t.rate(static_cast<Protocol>(p));
  std::cout << "\n";
  return 0;
}

int cmd_report(const std::string& events_path, const std::string& detections_path, const std::string& out_path,
               int jobs) {
  const auto m = load_manifest(events_path);
  const auto grids = load_grids(m, events_path, jobs);
  if (grids.empty()) throw PreconditionError("no event grids to summarize");
  const int B = grids[0].n_steps;
  const int groups = 3;
  auto group_of = [&](int b) { return std::min(groups - 1, b * groups / B); };
  // hotspot depth: the step with the largest mean transported step over valid tokens
  std::map<int, std::vector<int>> hotspot;  // label -> histogram over depth
  std::map<int, std::vector<double>> mass;  // label -> mean share of step mass per group
  std::map<int, int> count;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    const auto& g = grids[i];
    const int y = m.rows[i].label;
    hotspot[y].resize(B, 0);
    mass[y].resize(groups, 0.0);
    std::vector<double> per_depth(B, 0.0);
    std::vector<int> n_valid(B, 0);
    for (int b = 0; b < g.n_steps; ++b)
      for (int t = 0; t < g.T; ++t)
        if (g.is_valid(b, t)) {
          per_depth[b] += g.features(b, t)[0];
          ++n_valid[b];
        }
    int best = -1;
    double total = 0;
    for (int b = 0; b < B; ++b) {
      if (!n_valid[b]) continue;
      per_depth[b] /= n_valid[b];
      total += per_depth[b];
      if (best < 0 || per_depth[b] > per_depth[best]) best = b;
    }
    if (best < 0) continue;
    ++hotspot[y][best];
    ++count[y];
    for (int b = 0; b < B; ++b)
      if (n_valid[b] && total > 0) mass[y][group_of(b)] += per_depth[b] / total;
  }
  std::ostringstream o;
  o << "# flowsig report v1\n" << config_block(m.config);
  o << "descriptive=1\nn=" << grids.size() << "\ndepth_steps=" << B << "\n";
  for (const auto& [y, hist] : hotspot) {
    o << "label_" << y << "_count=" << count[y] << "\n";
    const char* names[] = {"early", "middle", "late"};
    for (int gi = 0; gi < groups; ++gi)
      o << "label_" << y << "_step_mass_" << names[gi] << "="
        << config_detail::fmt(count[y] ? mass[y][gi] / count[y] : 0.0) << "\n";
  }
  std::vector<int> culprit_hist(B, 0);
  bool have_culprits = false;
  if (!detections_path.empty()) {
    std::ifstream in(detections_path);
    if (!in) throw FormatError("cannot open detections " + detections_path);
    for (std::string line; std::getline(in, line);) {
      if (line.empty() || line[0] == '#' || line.find('=') != std::string::npos) continue;
      std::istringstream row(line);
      std::uint64_t id;
      int label, t0, b0;
      double score;
      if (!(row >> id >> label >> score >> t0 >> b0)) throw FormatError("bad detections row: " + line);
      if (score >= 0.5 && b0 >= 0 && b0 < B) {
        ++culprit_hist[b0];
        have_culprits = true;
      }
    }
  }
  o << "# depth";
  for (const auto& [y, hist] : hotspot) o << "\thotspot_label_" << y;
  if (have_culprits) o << "\tculprit_detected";
  o << "\n";
  for (int b = 0; b < B; ++b) {
    o << b;
    for (const auto& [y, hist] : hotspot) o << '\t' << hist[b];
    if (have_culprits) o << '\t' << culprit_hist[b];
    o << "\n";
  }
  write_text(out_path, o.str());
  std::cout << "wrote descriptive report for " << grids.size() << " samples to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depthwise internal-flow signatures: synthetic data, extraction, validation, refinement"};
  app.require_subcommand(1);
  app.fallthrough();
  int jobs = 1;
  app.add_option("--jobs", jobs, "worker threads across samples")->check(CLI::PositiveNumber);

  auto* synth = app.add_subcommand("synth", "generate a labeled toy-model trace dataset");
  std::string synth_out;
  synth->add_option("--out", synth_out, "output directory")->required();
  ConfigFlags synth_flags(synth);
  synth_flags.add("--n", "n", "number of traces")
      .add("--positive-fraction", "positive_fraction", "fraction of anomalous traces")
      .add("--kind", "kind", "anomaly kind: burst, diffuse")
      .add("--gain", "gain", "anomaly gain")
      .add("--t-star-spread", "t_star_spread", "onset positions after the prompt")
      .add("--model-seed", "model_seed", "toy model weight seed")
      .add("--seed", "seed", "dataset seed");

  auto* extract = app.add_subcommand("extract", "compute event grids for a trace manifest");
  std::string extract_in, extract_out;
  extract->add_option("--manifest", extract_in, "trace manifest")->required();
  extract->add_option("--out", extract_out, "output directory")->required();
  ConfigFlags extract_flags(extract);
  add_pipeline_flags(extract_flags);

  auto* trn = app.add_subcommand("train", "train the validator on an event manifest");
  std::string train_in, train_out;
  trn->add_option("--events", train_in, "event manifest")->required();
  trn->add_option("--out", train_out, "validator parameter file")->required();
  ConfigFlags train_flags(trn);
  add_validator_flags(train_flags);
  train_flags.add("--seed", "seed", "training seed");

  auto* detect = app.add_subcommand("detect", "score event grids and locate culprit events");
  std::string detect_model, detect_in, detect_out, subset = "test";
  detect->add_option("--model", detect_model, "validator parameter file")->required();
  detect->add_option("--events", detect_in, "event manifest")->required();
  detect->add_option("--out", detect_out, "detections file")->required();
  detect->add_option("--subset", subset, "all, train or test (split by train_split)")
      ->check(CLI::IsMember({"all", "train", "test"}));
  ConfigFlags detect_flags(detect);
  detect_flags.add("--train-split", "train_split", "leading fraction treated as training data");

  auto* refine = app.add_subcommand("refine", "localize, clamp and regenerate; write the protocol table");
  std::string refine_model, refine_in, refine_out, mode = "flow";
  refine->add_option("--model", refine_model, "validator parameter file")->required();
  refine->add_option("--manifest", refine_in, "trace manifest")->required();
  refine->add_option("--out", refine_out, "output directory")->required();
  refine->add_option("--mode", mode, "setting whose refined traces are written: flow, random, regen, none");
  ConfigFlags refine_flags(refine);
  add_refine_flags(refine_flags);
  refine_flags.add("--seed", "seed", "random-depth seed");

  auto* report = app.add_subcommand("report", "descriptive per-run summary statistics");
  std::string report_in, report_det, report_out;
  report->add_option("--events", report_in, "event manifest")->required();
  report->add_option("--detections", report_det, "detections file from detect");
  report->add_option("--out", report_out, "report file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(synth_flags, synth_out, jobs);
    if (*extract) return cmd_extract(extract_flags, extract_in, extract_out, jobs);
    if (*trn) return cmd_train(train_flags, train_in, train_out, jobs);
    if (*detect) return cmd_detect(detect_flags, detect_model, detect_in, subset, detect_out, jobs);
    if (*refine) return cmd_refine(refine_flags, refine_model, refine_in, mode, refine_out, jobs);
    if (*report) return cmd_report(report_in, report_det, report_out, jobs);
  } catch (const Error& e) {
    g_guard.rollback();
    std::cerr << "error: " << e.kind() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    g_guard.rollback();
    std::cerr << "error: io: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
