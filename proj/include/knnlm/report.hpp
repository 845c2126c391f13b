#pragma once

#include <optional>
#include <string>
#include <vector>

namespace knnlm {

struct ReportRow {
    std::string name;
    std::string store;  // "", "w", "a", "w+a"
    bool adapters = false;
    bool rescorer = false;
    size_t k = 0;
    double lambda = 0.0;
    double dev_perplexity = 0.0;
    double perplexity = 0.0;
    std::optional<double> recall;
    std::optional<double> precision;
    bool best = false;  // lowest test perplexity in the table
};

struct Report {
    std::vector<ReportRow> rows;  // catalog order
};

/// Builds the comparison table from <work_dir>/metrics.json. Throws
/// MissingArtifactError when no completed evaluation exists.
Report build_report(const std::string& work_dir);

std::string render_report_text(const Report& report);

/// Round-trippable serialization: report_from_json(report_to_json(r))
/// renders the identical table.
std::string report_to_json(const Report& report);
Report report_from_json(const std::string& text);

}  // namespace knnlm
