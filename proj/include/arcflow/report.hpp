#pragma once

// Consolidated run output. Layout under the output directory:
//   loss.csv  trace.csv  latency.csv  histogram.csv  samples/NNN.ppm  report.txt

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "arcflow/metrics.hpp"
#include "arcflow/perf.hpp"
#include "arcflow/sampler.hpp"
#include "arcflow/trainer.hpp"

namespace arcflow {

struct ReportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunArtifacts {
  std::vector<LossRecord> losses;
  TokenStatsTrace trace;
  LatencyProfile latency;
  LatentHistogram histogram;
  std::vector<Image> samples;
  std::vector<std::string> captions;  // one per sample, may be shorter
  std::string latency_model;          // assumptions text, copied into report.txt
};

/// Files written by write_report, relative to the output directory, in
/// writing order (samples excluded).
const std::vector<std::string>& report_files();

/// Creates `dir` if needed; throws ReportError when it cannot be written.
void write_report(const std::filesystem::path& dir, const RunArtifacts& artifacts);

}  // namespace arcflow
