// Pipeline driver: runs stages from a JSON config, or renders the
// comparison report for a work directory.
//
//   knnlm --config cfg.json --stage all [--work-dir DIR] [--seed N]
//   knnlm report --work-dir DIR [--json out.json]
//
// Exit codes: 0 success, 2 missing dependency artifact, 3 artifact
// checksum mismatch, 4 invalid configuration, 1 other failure.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "knnlm/errors.hpp"
#include "knnlm/pipeline.hpp"
#include "knnlm/report.hpp"

namespace {

int run_report(const std::string& work_dir, const std::string& json_out) {
    const knnlm::Report report = knnlm::build_report(work_dir);
    if (!json_out.empty()) {
        std::ofstream out(json_out);
        out << knnlm::report_to_json(report);
        if (!out) throw knnlm::IoError(knnlm::IoCode::write_failed, "cannot write " + json_out);
    }
    std::cout << knnlm::render_report_text(report);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"kNN-LM adaptation pipeline"};
    app.require_subcommand(0, 1);

    std::string config_path;
    std::string stage = "all";
    std::string work_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    app.add_option("--config", config_path, "pipeline configuration JSON");
    app.add_option("--stage", stage, "prepare|train-lm|train-adapters|build-stores|build-index|"
                                     "train-rescorer|grid-search|eval|all");
    app.add_option("--work-dir", work_dir, "overrides the configured work directory");
    app.add_option("--seed", seed, "overrides every stage seed")->each([&](const std::string&) {
        seed_set = true;
    });

    auto* report_cmd = app.add_subcommand("report", "render the comparison table for a work dir");
    std::string report_dir;
    std::string report_json;
    report_cmd->add_option("--work-dir", report_dir, "work directory with metrics.json")
        ->required();
    report_cmd->add_option("--json", report_json, "also write the table as JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (report_cmd->parsed()) return run_report(report_dir, report_json);
        if (config_path.empty()) {
            std::fprintf(stderr, "error: --config is required (or use the report subcommand)\n");
            return 4;
        }
        const knnlm::PipelineConfig cfg = knnlm::load_config(config_path);
        knnlm::RunOptions opts;
        if (!work_dir.empty()) opts.work_dir = work_dir;
        if (seed_set) opts.seed = seed;
        knnlm::run_pipeline(cfg, knnlm::stage_from_name(stage), opts);
        return 0;
    } catch (const knnlm::MissingArtifactError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const knnlm::IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.code == knnlm::IoCode::checksum_mismatch ? 3 : 1;
    } catch (const knnlm::ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
