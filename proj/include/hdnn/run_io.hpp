#pragma once

// Per-epoch metrics CSV and the JSON run manifest written at the end of a run.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hdnn/errors.hpp"
#include "hdnn/text_io.hpp"
#include "hdnn/training.hpp"

namespace hdnn {

inline constexpr const char* kMetricsHeader = "epoch,objective,loss,fer,expected_accuracy";

inline void write_metrics_row(std::ostream& out, const EpochMetrics& m) {
  out << m.epoch << ',' << to_string(m.objective) << ',' << format_double(m.loss) << ',' << format_double(m.fer) << ',';
  if (m.expected_accuracy) out << format_double(*m.expected_accuracy);
  out << '\n';
}

/// Writes the header when the file is new or empty, then appends one row per epoch.
inline void append_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& history) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw Error("cannot open " + path.string() + " for appending");
  if (fresh) out << kMetricsHeader << '\n';
  for (const auto& m : history) write_metrics_row(out, m);
  if (!out) throw Error("failed writing " + path.string());
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::chrono::system_clock::time_point started;
  std::chrono::system_clock::time_point finished;
  std::vector<std::string> metric_files;
  nlohmann::json final_metrics;

  nlohmann::json to_json() const {
    return {{"command", command},
            {"config", config},
            {"seed", seed},
            {"started", utc_timestamp(started)},
            {"finished", utc_timestamp(finished)},
            {"metric_files", metric_files},
            {"final_metrics", final_metrics}};
  }
};

/// Writes to a sibling temporary file and renames it over `path`.
inline void write_manifest_atomically(const RunManifest& manifest, const std::filesystem::path& path) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << manifest.to_json().dump(2) << '\n';
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace hdnn
