// SPDX-License-Identifier: Apache-2.0
//
// Line-oriented dataset index: the producing RunConfig as "#@ key=value"
// lines, then one tab-separated row per sample with its file, label and
// anomaly spec. Paths are relative to the manifest's directory.
#pragma once

#include "flowsig/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace flowsig {

struct ManifestRow {
  std::string path;
  int label = 0;
  std::uint64_t id = 0;
  std::uint64_t seed = 0;
  AnomalySpec anomaly;
};

struct Manifest {
  std::string kind;  // "traces", "events"
  RunConfig config;
  std::vector<ManifestRow> rows;

  std::string resolve(const std::string& manifest_path, const ManifestRow& r) const {
    return (std::filesystem::path(manifest_path).parent_path() / r.path).string();
  }
};

inline constexpr const char* kManifestColumns = "path\tlabel\tid\tseed\tkind\tb_star\tt_star\tgain";

inline std::string to_text(const Manifest& m) {
  std::ostringstream out;
  out << "# flowsig manifest v1 " << m.kind << "\n";
  std::istringstream cfg(m.config.to_string());
  for (std::string line; std::getline(cfg, line);) out << "#@ " << line << "\n";
  out << "# " << kManifestColumns << "\n";
  for (const auto& r : m.rows)
    out << r.path << '\t' << r.label << '\t' << r.id << '\t' << r.seed << '\t' << to_string(r.anomaly.kind) << '\t'
        << r.anomaly.b_star << '\t' << r.anomaly.t_star << '\t' << config_detail::fmt(r.anomaly.gain) << "\n";
  return out.str();
}

inline void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write manifest " + path);
  out << to_text(m);
  if (!out) throw FormatError("failed writing manifest " + path);
}

inline Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path);
  Manifest m;
  std::string line, cfg;
  if (!std::getline(in, line) || line.rfind("# flowsig manifest v1 ", 0) != 0)
    throw FormatError("not a flowsig manifest: " + path);
  m.kind = line.substr(std::string("# flowsig manifest v1 ").size());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("#@ ", 0) == 0) {
      cfg += line.substr(3) + "\n";
      continue;
    }
    if (line[0] == '#') continue;
    std::istringstream row(line);
    ManifestRow r;
    std::string kind, label, id, seed, b, t, gain;
    if (!std::getline(row, r.path, '\t') || !std::getline(row, label, '\t') || !std::getline(row, id, '\t') ||
        !std::getline(row, seed, '\t') || !std::getline(row, kind, '\t') || !std::getline(row, b, '\t') ||
        !std::getline(row, t, '\t') || !std::getline(row, gain))
      throw FormatError("manifest row has too few columns: " + line);
    r.label = config_detail::parse_number<int>("label", label);
    r.id = config_detail::parse_number<std::uint64_t>("id", id);
    r.seed = config_detail::parse_number<std::uint64_t>("seed", seed);
    r.anomaly.kind = config_detail::parse_enum<AnomalyKind>(
        "kind", kind, {{"none", AnomalyKind::None}, {"burst", AnomalyKind::DepthBurst}, {"diffuse", AnomalyKind::LateDiffuse}});
    r.anomaly.b_star = config_detail::parse_number<int>("b_star", b);
    r.anomaly.t_star = config_detail::parse_number<int>("t_star", t);
    r.anomaly.gain = config_detail::parse_number<double>("gain", gain);
    m.rows.push_back(std::move(r));
  }
  m.config = RunConfig::parse(cfg);
  return m;
}

}  // namespace flowsig
