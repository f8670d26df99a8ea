#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace featft {

struct ReportRow {
  std::string source;
  std::string target;
  std::string attack;    // loss name, optionally "+ila" or "@<sweep point>"
  std::string scenario;
  bool ft = false;
  int success = 0;
  int count = 0;
  std::string seed_digest;

  double rate() const { return count == 0 ? 0.0 : static_cast<double>(success) / count; }
  bool operator==(const ReportRow&) const = default;
};

struct TransferReport {
  std::vector<ReportRow> rows;
  std::string config_digest;
};

inline constexpr std::string_view kCsvHeader = "source,target,attack,scenario,ft,success,count,rate,seed_digest";

/// success/count to four decimals, rounding half to even on the exact quotient.
std::string format_rate(int success, int count);
/// Same rule applied to the exact binary value of `rate`.
std::string format_rate(double rate);

std::string emit_csv(const TransferReport& report);
TransferReport parse_csv(std::string_view text);

/// Grouped bar chart of rate per (source, target, attack) cell; no-ft and ft bars side by side.
std::string emit_svg(const TransferReport& report);

enum class ReportFormat { csv, svg_plot };

/// Throws IoError when the file cannot be written, ConfigError for an empty SVG report.
void emit_report(const TransferReport& report, ReportFormat format, const std::filesystem::path& path);

TransferReport read_report_csv(const std::filesystem::path& path);

}  // namespace featft
