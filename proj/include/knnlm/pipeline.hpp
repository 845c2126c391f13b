#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "knnlm/eval.hpp"
#include "knnlm/rescorer.hpp"
#include "knnlm/toylm.hpp"

namespace knnlm {

/// A required upstream artifact is absent; maps to exit code 2.
struct MissingArtifactError : std::runtime_error {
    std::string artifact;
    explicit MissingArtifactError(const std::string& name)
        : std::runtime_error("missing dependency artifact: " + name), artifact(name) {}
};

enum class Stage {
    prepare,
    train_lm,
    train_adapters,
    build_stores,
    build_index,
    train_rescorer,
    grid_search,
    eval,
    all,
};

Stage stage_from_name(const std::string& name);
const char* stage_name(Stage s);

/// Which datastores an experiment row consults.
enum class StoreSel : uint8_t { none, w, a, wa };

/// One row of the experiment matrix: which model variant, which stores,
/// whether neighbors are rescored, and whether the row is retrieval-only
/// (evaluated at lambda = 1 with k tuned).
struct ExperimentRow {
    std::string name;
    bool adapters = false;
    StoreSel stores = StoreSel::none;
    bool rescorer = false;
    bool knn_only = false;
};

/// Closed catalog in report order (baselines first).
const std::vector<ExperimentRow>& experiment_catalog();
const ExperimentRow& experiment_row(const std::string& name);
/// Lowercase alphanumeric file tag for a row name, e.g. "(w+a)kNN_r-LM_a"
/// -> "w_a_knn_r_lm_a".
std::string row_tag(const std::string& name);

struct PipelineConfig {
    // paths
    std::string pretrain_corpus;
    std::string adapt_corpus;
    std::string work_dir;
    // model
    LmDims dims{5, 32, 64, 2000};
    size_t adapter_dim = 16;
    TapPoint tap = TapPoint::h2_ln;
    // retrieval
    Metric metric = Metric::ip;
    bool use_ivf = false;
    size_t n_list = 256;
    size_t n_probe = 32;
    // corpus split
    double split_train = 0.8, split_dev = 0.1, split_test = 0.1;
    // training
    LmTrainConfig lm_train;
    AdapterTrainConfig adapter_train;
    RescorerTrainConfig rescorer_train;
    // evaluation
    GridSpec grid;
    size_t dev_token_limit = 3000;
    size_t test_token_limit = 5000;
    bool enforce_footprint = true;
    std::vector<std::string> experiments;
    // seeds
    uint64_t seed_lm = 1, seed_adapters = 2, seed_rescorer = 3, seed_ivf = 4;

    /// Canonical serialized form (sorted keys); stage signatures and the
    /// metrics config echo derive from this.
    std::string canonical_json;
};

/// Parses and validates; throws ConfigError on any violation.
PipelineConfig load_config(const std::string& path);

struct RunOptions {
    std::optional<std::string> work_dir;  // overrides config
    std::optional<uint64_t> seed;         // overrides every stage seed
};

/// Runs one stage (or all, in dependency order) with checksum-gated
/// skipping of already-complete stages. Throws MissingArtifactError,
/// IoError(checksum_mismatch) or ConfigError; the CLI maps these to exit
/// codes 2, 3 and 4.
void run_pipeline(const PipelineConfig& cfg, Stage stage, const RunOptions& opts = {});

}  // namespace knnlm
