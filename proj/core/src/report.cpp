#include "featft/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "featft/errors.hpp"

namespace featft {

namespace {

std::string fixed4(long long scaled) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%lld.%04lld", scaled / 10000, scaled % 10000);
  return buf;
}

std::vector<std::string> split_fields(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

int parse_int(const std::string& s, std::size_t offset) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || v < 0) throw FormatError("report: bad integer '" + s + "'", offset);
  return v;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string format_rate(int success, int count) {
  if (count <= 0) return "0.0000";
  const long long num = static_cast<long long>(success) * 10000;
  long long q = num / count;
  const long long r = num % count;
  if (2 * r > count || (2 * r == count && q % 2 == 1)) ++q;
  return fixed4(q);
}

std::string format_rate(double rate) {
  if (!std::isfinite(rate)) throw ConfigError("rate is not finite");
  const bool negative = std::signbit(rate) && rate != 0.0;
  // %.1100f prints the exact binary value, so the tie test below is exact.
  std::vector<char> buf(1200);
  std::snprintf(buf.data(), buf.size(), "%.1100f", std::abs(rate));
  const std::string s(buf.data());
  const std::size_t dot = s.find('.');
  long long scaled = std::stoll(s.substr(0, dot)) * 10000 + std::stoll(s.substr(dot + 1, 4));
  const std::string tail = s.substr(dot + 5);
  const bool above_half = tail[0] > '5' || (tail[0] == '5' && tail.find_first_not_of('0', 1) != std::string::npos);
  const bool tie = tail[0] == '5' && tail.find_first_not_of('0', 1) == std::string::npos;
  if (above_half || (tie && scaled % 2 == 1)) ++scaled;
  return (negative && scaled != 0 ? "-" : "") + fixed4(scaled);
}

std::string emit_csv(const TransferReport& report) {
  std::string out(kCsvHeader);
  out += '\n';
  for (const ReportRow& r : report.rows) {
    for (const std::string* f : {&r.source, &r.target, &r.attack, &r.scenario, &r.seed_digest}) {
      if (f->find_first_of(",\n\r") != std::string::npos) throw ConfigError("report field contains a separator: " + *f);
    }
    out += r.source + ',' + r.target + ',' + r.attack + ',' + r.scenario + ',' + (r.ft ? "1" : "0") + ',' +
           std::to_string(r.success) + ',' + std::to_string(r.count) + ',' + format_rate(r.success, r.count) + ',' +
           r.seed_digest + '\n';
  }
  return out;
}

TransferReport parse_csv(std::string_view text) {
  TransferReport report;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::size_t offset = pos;
    pos = end + 1;
    if (line.empty()) continue;
    if (header) {
      if (line != kCsvHeader) throw FormatError("report: unexpected CSV header", offset);
      header = false;
      continue;
    }
    const auto f = split_fields(line);
    if (f.size() != 9) throw FormatError("report: expected 9 fields, got " + std::to_string(f.size()), offset);
    ReportRow r;
    r.source = f[0];
    r.target = f[1];
    r.attack = f[2];
    r.scenario = f[3];
    if (f[4] != "0" && f[4] != "1") throw FormatError("report: ft must be 0 or 1", offset);
    r.ft = f[4] == "1";
    r.success = parse_int(f[5], offset);
    r.count = parse_int(f[6], offset);
    if (r.success > r.count) throw FormatError("report: success exceeds count", offset);
    if (f[7] != format_rate(r.success, r.count)) throw FormatError("report: rate does not match success/count", offset);
    r.seed_digest = f[8];
    report.rows.push_back(std::move(r));
  }
  if (header) throw FormatError("report: missing CSV header", 0);
  return report;
}

std::string emit_svg(const TransferReport& report) {
  if (report.rows.empty()) throw ConfigError("cannot plot an empty report");
  struct Group {
    std::string label;
    double rate[2] = {-1.0, -1.0};
  };
  std::vector<Group> groups;
  std::map<std::string, std::size_t> index;
  for (const ReportRow& r : report.rows) {
    const std::string key = r.source + "\x1f" + r.target + "\x1f" + r.attack + "\x1f" + r.scenario;
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, groups.size()).first;
      groups.push_back({r.source + "→" + r.target + " " + r.attack});
    }
    groups[it->second].rate[r.ft ? 1 : 0] = r.rate();
  }

  const int bar = 14, gap = 18, left = 50, top = 30, plot_h = 200, bottom = 150;
  const int width = left + static_cast<int>(groups.size()) * (2 * bar + gap) + 20;
  const int height = top + plot_h + bottom;
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" font-family=\"sans-serif\" font-size=\"10\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double y = top + plot_h - plot_h * t / 4.0;
    o << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << width - 10 << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n<text x=\"" << left - 6 << "\" y=\"" << y + 3 << "\" text-anchor=\"end\">"
      << t * 25 << "%</text>\n";
  }
  const char* colour[2] = {"#8da0cb", "#e78a3c"};
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const int x0 = left + 8 + static_cast<int>(g) * (2 * bar + gap);
    for (int k = 0; k < 2; ++k) {
      if (groups[g].rate[k] < 0.0) continue;
      const double h = plot_h * groups[g].rate[k];
      o << "<rect x=\"" << x0 + k * bar << "\" y=\"" << top + plot_h - h << "\" width=\"" << bar - 2 << "\" height=\"" << h
        << "\" fill=\"" << colour[k] << "\"><title>" << xml_escape(groups[g].label) << (k ? " ft " : " no-ft ")
        << format_rate(groups[g].rate[k]) << "</title></rect>\n";
    }
    const int lx = x0 + bar;
    const int ly = top + plot_h + 8;
    o << "<text x=\"" << lx << "\" y=\"" << ly << "\" transform=\"rotate(60 " << lx << ' ' << ly << ")\">"
      << xml_escape(groups[g].label) << "</text>\n";
  }
  o << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - 10 << "\" y2=\"" << top + plot_h
    << "\" stroke=\"black\"/>\n"
    << "<rect x=\"" << left << "\" y=\"8\" width=\"10\" height=\"10\" fill=\"" << colour[0] << "\"/><text x=\"" << left + 14
    << "\" y=\"17\">no ft</text>\n"
    << "<rect x=\"" << left + 60 << "\" y=\"8\" width=\"10\" height=\"10\" fill=\"" << colour[1] << "\"/><text x=\""
    << left + 74 << "\" y=\"17\">ft</text>\n"
    << "</svg>\n";
  return o.str();
}

void emit_report(const TransferReport& report, ReportFormat format, const std::filesystem::path& path) {
  const std::string body = format == ReportFormat::csv ? emit_csv(report) : emit_svg(report);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << body;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

TransferReport read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

}  // namespace featft
