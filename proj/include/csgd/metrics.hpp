#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "csgd/errors.hpp"

namespace csgd {

inline constexpr const char* kMetricsHeader = "epoch,step,loss,accuracy,chi,phi,lr,seconds";

/// One logged point. NaN marks a quantity that does not apply to the run
/// (for example chi without clusters); it is written as an empty field.
struct MetricsRecord {
  long epoch = 0;
  long step = 0;
  double loss = NAN;
  double accuracy = NAN;
  double chi = NAN;
  double phi = NAN;
  double lr = NAN;
  double seconds = NAN;
};

inline std::string to_csv_row(const MetricsRecord& r) {
  std::ostringstream os;
  os.precision(9);
  auto field = [&](double v) {
    os << ',';
    if (!std::isnan(v)) os << v;
  };
  os << r.epoch << ',' << r.step;
  field(r.loss);
  field(r.accuracy);
  field(r.chi);
  field(r.phi);
  field(r.lr);
  field(r.seconds);
  return os.str();
}

/// Append-only CSV log. With an empty path records are only kept in memory.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path) : path_(path) {
    if (path_.empty()) return;
    const auto parent = std::filesystem::path(path_).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path_, std::ios::trunc);
    out << kMetricsHeader << '\n';
    if (!out) throw IoError("cannot write metrics log '" + path_ + "'");
  }

  void append(const MetricsRecord& r) {
    records_.push_back(r);
    if (path_.empty()) return;
    std::ofstream out(path_, std::ios::app);
    out << to_csv_row(r) << '\n';
    if (!out) throw IoError("cannot append to metrics log '" + path_ + "'");
  }

  const std::vector<MetricsRecord>& records() const { return records_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::vector<MetricsRecord> records_;
};

inline void write_summary(const std::string& path, const nlohmann::json& summary) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path);
  out << summary.dump(2) << '\n';
  if (!out) throw IoError("cannot write summary '" + path + "'");
}

}  // namespace csgd
