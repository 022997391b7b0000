#include "arcflow/report.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace arcflow {

const std::vector<std::string>& report_files() {
  static const std::vector<std::string> files{"loss.csv", "trace.csv", "latency.csv", "histogram.csv", "report.txt"};
  return files;
}

namespace {

std::ofstream open(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ReportError("report: cannot write " + path.string());
  return f;
}

void line(std::ostream& out, const char* key, double value) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s = %.6g\n", key, value);
  out << buf;
}

std::string summary(const RunArtifacts& a) {
  std::ostringstream s;
  s << "[training]\n";
  s << "steps = " << a.losses.size() << "\n";
  const double first = a.losses.empty() ? 0.0 : a.losses.front().loss.total;
  const double last = a.losses.empty() ? 0.0 : a.losses.back().loss.total;
  line(s, "initial_total", first);
  line(s, "final_total", last);
  line(s, "final_over_initial", first > 0.0 ? last / first : 0.0);
  line(s, "final_text", a.losses.empty() ? 0.0 : a.losses.back().loss.text);
  line(s, "final_visual", a.losses.empty() ? 0.0 : a.losses.back().loss.visual);

  s << "\n[sampling]\n";
  s << "samples = " << a.samples.size() << "\n";
  for (std::size_t i = 0; i < a.captions.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%03zu = ", i);
    s << buf << a.captions[i] << "\n";
  }
  s << "traced_tokens = " << a.trace.size() << "\n";
  const DriftReport drift = a.trace.size() ? drift_report(a.trace) : DriftReport{};
  line(s, "max_abs_mean", drift.max_abs_mean);
  line(s, "max_var_deviation", drift.max_var_deviation);
  s << "band_violations = " << drift.violations << "\n";
  s << "first_exceed = " << (drift.first_exceed ? std::to_string(*drift.first_exceed) : std::string("none")) << "\n";

  s << "\n[latency]\n";
  s << "rows = " << a.latency.rows.size() << "\n";
  for (const auto& r : a.latency.rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "N = %zu: last-token %.2f ms, accumulated %.2f s, w/o FM head %.2f s\n",
                  r.context_len, r.total_ms, r.accum_s, r.accum_wo_fm_s);
    s << buf;
  }
  if (!a.latency_model.empty()) s << a.latency_model;

  s << "\n[histogram]\n";
  std::size_t total = 0, channels = 0, outside = 0;
  for (const auto& b : a.histogram.bins) {
    total += b.count;
    channels = std::max(channels, b.channel + 1);
  }
  for (auto c : a.histogram.out_of_range) outside += c;
  s << "channels = " << channels << "\n";
  s << "bins = " << a.histogram.bins.size() << "\n";
  s << "counted = " << total << "\n";
  s << "out_of_range = " << outside << "\n";
  return s.str();
}

}  // namespace

void write_report(const std::filesystem::path& dir, const RunArtifacts& a) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "samples", ec);
  if (ec || !std::filesystem::is_directory(dir / "samples")) {
    throw ReportError("report: cannot create " + dir.string() + (ec ? ": " + ec.message() : std::string()));
  }
  {
    auto f = open(dir / "loss.csv");
    write_loss_csv(f, a.losses);
  }
  {
    auto f = open(dir / "trace.csv");
    write_trace_csv(f, a.trace);
  }
  {
    auto f = open(dir / "latency.csv");
    write_latency_csv(f, a.latency);
  }
  {
    auto f = open(dir / "histogram.csv");
    write_histogram_csv(f, a.histogram);
  }
  for (std::size_t i = 0; i < a.samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%03zu.ppm", i);
    write_ppm(dir / "samples" / name, a.samples[i]);
  }
  auto f = open(dir / "report.txt");
  f << summary(a);
  if (!f) throw ReportError("report: failed writing report.txt");
}

}  // namespace arcflow
