#include "embedkit/report.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "embedkit/errors.hpp"

namespace embedkit {

namespace {

std::string fmt2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string render_value(const MetricReport& m) {
  std::string out = fmt2(m.value);
  if (m.stddev.has_value()) out += " ± " + fmt2(*m.stddev);
  return out;
}

// column order: first appearance across rows
std::vector<std::string> column_order(const EvalReport& report) {
  std::vector<std::string> cols;
  for (const auto& [label, metrics] : report.rows) {
    for (const auto& m : metrics) {
      bool known = false;
      for (const auto& c : cols) {
        if (c == m.name) {
          known = true;
          break;
        }
      }
      if (!known) cols.push_back(m.name);
    }
  }
  return cols;
}

const MetricReport* find_metric(const std::vector<MetricReport>& metrics,
                                const std::string& name) {
  for (const auto& m : metrics) {
    if (m.name == name) return &m;
  }
  return nullptr;
}

std::string render_markdown(const EvalReport& report) {
  const auto cols = column_order(report);
  std::ostringstream os;
  os << "| model |";
  for (const auto& c : cols) os << ' ' << c << " |";
  os << "\n|---|";
  for (size_t i = 0; i < cols.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& [label, metrics] : report.rows) {
    os << "| " << label << " |";
    for (const auto& c : cols) {
      const MetricReport* m = find_metric(metrics, c);
      os << ' ' << (m ? render_value(*m) : "-") << " |";
    }
    os << "\n";
  }
  if (!report.metadata.empty()) {
    os << "\n";
    for (const auto& [key, value] : report.metadata) {
      os << "- " << key << ": " << value << "\n";
    }
  }
  return os.str();
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

std::string render_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "model,metric,value,stddev,n\n";
  for (const auto& [label, metrics] : report.rows) {
    for (const auto& m : metrics) {
      os << csv_escape(label) << ',' << csv_escape(m.name) << ',' << fmt2(m.value) << ',';
      if (m.stddev.has_value()) os << fmt2(*m.stddev);
      os << ',' << m.n << "\n";
    }
  }
  for (const auto& [key, value] : report.metadata) {
    os << "# " << csv_escape(key) << ',' << csv_escape(value) << ",,,\n";
  }
  return os.str();
}

}  // namespace

void EvalReport::add_row(const std::string& model_label, std::vector<MetricReport> metrics) {
  rows.emplace_back(model_label, std::move(metrics));
}

std::string render_report(const EvalReport& report, ReportFormat format) {
  return format == ReportFormat::Markdown ? render_markdown(report) : render_csv(report);
}

void emit_report(const EvalReport& report, const std::string& path, ReportFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("report: cannot open '" + path + "' for writing");
  out << render_report(report, format);
}

ReportFormat report_format_for_path(const std::string& path) {
  const auto dot = path.rfind('.');
  if (dot != std::string::npos && path.substr(dot) == ".csv") return ReportFormat::Csv;
  return ReportFormat::Markdown;
}

}  // namespace embedkit
