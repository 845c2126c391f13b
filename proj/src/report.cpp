#include "knnlm/report.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "json_util.hpp"
#include "knnlm/errors.hpp"
#include "knnlm/pipeline.hpp"

using nlohmann::json;

namespace knnlm {

Report build_report(const std::string& work_dir) {
    const auto path = std::filesystem::path(work_dir) / "metrics.json";
    if (!std::filesystem::exists(path)) throw MissingArtifactError("metrics.json");
    std::ifstream in(path);
    json metrics;
    try {
        in >> metrics;
    } catch (const json::exception& e) {
        throw IoError(IoCode::bad_layout, std::string("metrics.json is malformed: ") + e.what());
    }

    Report report;
    for (const auto& row : metrics.at("rows")) {
        ReportRow r;
        r.name = row.at("name").get<std::string>();
        r.store = row.value("store", "");
        r.adapters = row.value("adapters", false);
        r.rescorer = row.value("rescorer", false);
        r.k = row.value("k", size_t{0});
        r.lambda = row.value("lambda", 0.0);
        r.dev_perplexity = number_from(row.at("dev_perplexity"));
        r.perplexity = number_from(row.at("perplexity"));
        if (row.contains("recall") && !row["recall"].is_null()) {
            r.recall = row["recall"].get<double>();
        }
        if (row.contains("precision") && !row["precision"].is_null()) {
            r.precision = row["precision"].get<double>();
        }
        report.rows.push_back(std::move(r));
    }
    if (report.rows.empty()) throw MissingArtifactError("metrics.json (no evaluated rows)");

    size_t best = 0;
    for (size_t i = 1; i < report.rows.size(); ++i) {
        if (report.rows[i].perplexity < report.rows[best].perplexity) best = i;
    }
    report.rows[best].best = true;
    return report;
}

namespace {

std::string fmt_double(double v, int prec) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    if (std::isnan(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v, int prec) {
    return v ? fmt_double(*v, prec) : std::string("-");
}

}  // namespace

std::string render_report_text(const Report& report) {
    std::ostringstream out;
    const char* fmt = "%-18s %-5s %-4s %-4s %6s %7s %12s %12s %8s %10s\n";
    char line[200];
    std::snprintf(line, sizeof(line), fmt, "setting", "store", "LMa", "rsc", "k", "lambda",
                  "dev_ppl", "test_ppl", "recall", "precision");
    out << line;
    out << std::string(92, '-') << '\n';
    for (const auto& r : report.rows) {
        std::string ppl = fmt_double(r.perplexity, 3);
        if (r.best) ppl += " *";
        std::snprintf(line, sizeof(line), fmt, r.name.c_str(), r.store.empty() ? "-" : r.store.c_str(),
                      r.adapters ? "yes" : "-", r.rescorer ? "yes" : "-",
                      r.k == 0 ? "-" : std::to_string(r.k).c_str(),
                      r.k == 0 && r.store.empty() ? "-" : fmt_double(r.lambda, 2).c_str(),
                      fmt_double(r.dev_perplexity, 3).c_str(), ppl.c_str(),
                      fmt_opt(r.recall, 4).c_str(), fmt_opt(r.precision, 4).c_str());
        out << line;
    }
    out << "* lowest test perplexity\n";
    return out.str();
}

std::string report_to_json(const Report& report) {
    json rows = json::array();
    for (const auto& r : report.rows) {
        json row;
        row["name"] = r.name;
        row["store"] = r.store;
        row["adapters"] = r.adapters;
        row["rescorer"] = r.rescorer;
        row["k"] = r.k;
        row["lambda"] = r.lambda;
        row["dev_perplexity"] = json_number(r.dev_perplexity);
        row["perplexity"] = json_number(r.perplexity);
        row["recall"] = r.recall ? json(*r.recall) : json(nullptr);
        row["precision"] = r.precision ? json(*r.precision) : json(nullptr);
        row["best"] = r.best;
        rows.push_back(std::move(row));
    }
    json out;
    out["schema"] = 1;
    out["rows"] = std::move(rows);
    return out.dump(2) + "\n";
}

Report report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IoError(IoCode::bad_layout, std::string("report JSON malformed: ") + e.what());
    }
    Report report;
    for (const auto& row : j.at("rows")) {
        ReportRow r;
        r.name = row.at("name").get<std::string>();
        r.store = row.at("store").get<std::string>();
        r.adapters = row.at("adapters").get<bool>();
        r.rescorer = row.at("rescorer").get<bool>();
        r.k = row.at("k").get<size_t>();
        r.lambda = row.at("lambda").get<double>();
        r.dev_perplexity = number_from(row.at("dev_perplexity"));
        r.perplexity = number_from(row.at("perplexity"));
        if (!row.at("recall").is_null()) r.recall = row["recall"].get<double>();
        if (!row.at("precision").is_null()) r.precision = row["precision"].get<double>();
        r.best = row.at("best").get<bool>();
        report.rows.push_back(std::move(r));
    }
    return report;
}

}  // namespace knnlm
