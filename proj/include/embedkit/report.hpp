#pragma once

#include <map>
#include <string>
#include <vector>

#include "embedkit/metrics.hpp"

namespace embedkit {

enum class ReportFormat { Markdown, Csv };

// Rows keyed by model label; metadata holds config hash, dataset
// fingerprints, seeds and the toolkit revision. Rendering is deterministic:
// fixed column order, 2-decimal values, "value ± stddev" where present.
struct EvalReport {
  std::vector<std::pair<std::string, std::vector<MetricReport>>> rows;
  std::map<std::string, std::string> metadata;

  void add_row(const std::string& model_label, std::vector<MetricReport> metrics);
};

std::string render_report(const EvalReport& report, ReportFormat format);
void emit_report(const EvalReport& report, const std::string& path, ReportFormat format);

// picks the format from the file extension (.md / .csv), defaulting to markdown
ReportFormat report_format_for_path(const std::string& path);

}  // namespace embedkit
