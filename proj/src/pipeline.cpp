#include "knnlm/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "json_util.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/errors.hpp"
#include "knnlm/hash.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace knnlm {

Stage stage_from_name(const std::string& name) {
    static const std::map<std::string, Stage> table = {
        {"prepare", Stage::prepare},
        {"train-lm", Stage::train_lm},
        {"train-adapters", Stage::train_adapters},
        {"build-stores", Stage::build_stores},
        {"build-index", Stage::build_index},
        {"train-rescorer", Stage::train_rescorer},
        {"grid-search", Stage::grid_search},
        {"eval", Stage::eval},
        {"all", Stage::all},
    };
    auto it = table.find(name);
    if (it == table.end()) throw ConfigError("unknown stage: " + name);
    return it->second;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::prepare: return "prepare";
        case Stage::train_lm: return "train-lm";
        case Stage::train_adapters: return "train-adapters";
        case Stage::build_stores: return "build-stores";
        case Stage::build_index: return "build-index";
        case Stage::train_rescorer: return "train-rescorer";
        case Stage::grid_search: return "grid-search";
        case Stage::eval: return "eval";
        case Stage::all: return "all";
    }
    return "?";
}

const std::vector<ExperimentRow>& experiment_catalog() {
    static const std::vector<ExperimentRow> rows = {
        // baselines
        {"LM", false, StoreSel::none, false, false},
        {"LM_a", true, StoreSel::none, false, false},
        {"(w)kNN", false, StoreSel::w, false, true},
        {"(a)kNN", false, StoreSel::a, false, true},
        {"(w)kNN-LM", false, StoreSel::w, false, false},
        {"(a)kNN-LM", false, StoreSel::a, false, false},
        // adapted configurations
        {"(w)kNN-LM_a", true, StoreSel::w, false, false},
        {"(w)kNN_r-LM", false, StoreSel::w, true, false},
        {"(w)kNN_r-LM_a", true, StoreSel::w, true, false},
        {"(a)kNN-LM_a", true, StoreSel::a, false, false},
        {"(a)kNN_r-LM_a", true, StoreSel::a, true, false},
        {"(w+a)kNN-LM_a", true, StoreSel::wa, false, false},
        {"(w+a)kNN_r-LM_a", true, StoreSel::wa, true, false},
    };
    return rows;
}

const ExperimentRow& experiment_row(const std::string& name) {
    for (const auto& row : experiment_catalog()) {
        if (row.name == name) return row;
    }
    throw ConfigError("unknown experiment row: " + name);
}

std::string row_tag(const std::string& name) {
    std::string tag;
    bool sep = false;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            tag += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            sep = false;
        } else if (!tag.empty() && !sep) {
            tag += '_';
            sep = true;
        }
    }
    while (!tag.empty() && tag.back() == '_') tag.pop_back();
    return tag;
}

// ---------------------------------------------------------------------------
// configuration

namespace {

json config_to_json(const PipelineConfig& c) {
    json j;
    j["schema"] = 1;
    j["paths"] = {{"pretrain_corpus", c.pretrain_corpus},
                  {"adapt_corpus", c.adapt_corpus},
                  {"work_dir", c.work_dir}};
    j["model"] = {{"window", c.dims.window},
                  {"embed_dim", c.dims.embed},
                  {"hidden_dim", c.dims.hidden},
                  {"adapter_dim", c.adapter_dim},
                  {"vocab_size", c.dims.vocab}};
    j["tap"] = tap_name(c.tap);
    j["retrieval"] = {{"metric", metric_name(c.metric)},
                      {"backend", c.use_ivf ? "ivf" : "exact"},
                      {"n_list", c.n_list},
                      {"n_probe", c.n_probe}};
    j["split"] = {{"train", c.split_train}, {"dev", c.split_dev}, {"test", c.split_test}};
    j["train_lm"] = {{"lr", c.lm_train.lr},
                     {"weight_decay", c.lm_train.weight_decay},
                     {"epochs", c.lm_train.epochs},
                     {"batch", c.lm_train.batch}};
    j["train_adapters"] = {{"lr", c.adapter_train.lr},
                           {"weight_decay", c.adapter_train.weight_decay},
                           {"epochs", c.adapter_train.epochs},
                           {"batch", c.adapter_train.batch},
                           {"patience", c.adapter_train.patience}};
    j["rescorer"] = {{"tau", c.rescorer_train.tau},
                     {"lr", c.rescorer_train.lr},
                     {"weight_decay", c.rescorer_train.weight_decay},
                     {"log_interval", c.rescorer_train.log_interval},
                     {"patience", c.rescorer_train.patience},
                     {"max_tokens", c.rescorer_train.max_tokens},
                     {"k", c.rescorer_train.k},
                     {"negatives", c.rescorer_train.negatives},
                     {"batch", c.rescorer_train.batch},
                     {"max_epochs", c.rescorer_train.max_epochs}};
    j["grid"] = {{"k", c.grid.k_grid}, {"lambda", c.grid.lambda_grid}};
    j["eval"] = {{"dev_token_limit", c.dev_token_limit}, {"test_token_limit", c.test_token_limit}};
    j["enforce_footprint"] = c.enforce_footprint;
    j["experiments"] = c.experiments;
    j["seeds"] = {{"lm", c.seed_lm},
                  {"adapters", c.seed_adapters},
                  {"rescorer", c.seed_rescorer},
                  {"ivf", c.seed_ivf}};
    return j;
}

void validate_config(const PipelineConfig& c) {
    if (c.pretrain_corpus.empty() || !fs::exists(c.pretrain_corpus)) {
        throw ConfigError("pretrain corpus path does not exist: " + c.pretrain_corpus);
    }
    if (c.adapt_corpus.empty() || !fs::exists(c.adapt_corpus)) {
        throw ConfigError("adapt corpus path does not exist: " + c.adapt_corpus);
    }
    if (c.work_dir.empty()) throw ConfigError("work_dir is required");
    if (c.dims.vocab < 2) throw ConfigError("vocab_size must be at least 2");
    if (c.adapter_dim == 0 || c.adapter_dim >= c.dims.hidden) {
        throw ConfigError("adapter_dim must be in (0, hidden_dim)");
    }
    if (c.experiments.empty()) throw ConfigError("experiments must select at least one row");
    for (const auto& name : c.experiments) experiment_row(name);  // membership in the closed set
    c.grid.validate();
    if (!(c.split_train > 0 && c.split_dev > 0 && c.split_test > 0)) {
        throw ConfigError("split ratios must be positive");
    }
    if (c.use_ivf && (c.n_list == 0 || c.n_probe == 0 || c.n_probe > c.n_list)) {
        throw ConfigError("ivf requires 0 < n_probe <= n_list");
    }
    if (c.rescorer_train.tau <= 0) throw ConfigError("rescorer tau must be positive");
}

}  // namespace

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }

    PipelineConfig c;
    try {
        const auto& paths = j.at("paths");
        c.pretrain_corpus = paths.at("pretrain_corpus").get<std::string>();
        c.adapt_corpus = paths.at("adapt_corpus").get<std::string>();
        c.work_dir = paths.at("work_dir").get<std::string>();
        c.experiments = j.at("experiments").get<std::vector<std::string>>();
        const auto& seeds = j.at("seeds");
        c.seed_lm = seeds.at("lm").get<uint64_t>();
        c.seed_adapters = seeds.at("adapters").get<uint64_t>();
        c.seed_rescorer = seeds.at("rescorer").get<uint64_t>();
        c.seed_ivf = seeds.at("ivf").get<uint64_t>();

        if (j.contains("model")) {
            const auto& m = j["model"];
            c.dims.window = m.value("window", c.dims.window);
            c.dims.embed = m.value("embed_dim", c.dims.embed);
            c.dims.hidden = m.value("hidden_dim", c.dims.hidden);
            c.dims.vocab = m.value("vocab_size", c.dims.vocab);
            c.adapter_dim = m.value("adapter_dim", c.adapter_dim);
        }
        if (j.contains("tap")) c.tap = tap_from_name(j["tap"].get<std::string>());
        if (j.contains("retrieval")) {
            const auto& r = j["retrieval"];
            if (r.contains("metric")) c.metric = metric_from_name(r["metric"].get<std::string>());
            if (r.contains("backend")) {
                const std::string b = r["backend"].get<std::string>();
                if (b != "exact" && b != "ivf") throw ConfigError("retrieval backend must be exact or ivf");
                c.use_ivf = b == "ivf";
            }
            c.n_list = r.value("n_list", c.n_list);
            c.n_probe = r.value("n_probe", c.n_probe);
        }
        if (j.contains("split")) {
            const auto& s = j["split"];
            c.split_train = s.value("train", c.split_train);
            c.split_dev = s.value("dev", c.split_dev);
            c.split_test = s.value("test", c.split_test);
        }
        if (j.contains("train_lm")) {
            const auto& t = j["train_lm"];
            c.lm_train.lr = t.value("lr", c.lm_train.lr);
            c.lm_train.weight_decay = t.value("weight_decay", c.lm_train.weight_decay);
            c.lm_train.epochs = t.value("epochs", c.lm_train.epochs);
            c.lm_train.batch = t.value("batch", c.lm_train.batch);
        }
        if (j.contains("train_adapters")) {
            const auto& t = j["train_adapters"];
            c.adapter_train.lr = t.value("lr", c.adapter_train.lr);
            c.adapter_train.weight_decay = t.value("weight_decay", c.adapter_train.weight_decay);
            c.adapter_train.epochs = t.value("epochs", c.adapter_train.epochs);
            c.adapter_train.batch = t.value("batch", c.adapter_train.batch);
            c.adapter_train.patience = t.value("patience", c.adapter_train.patience);
        }
        if (j.contains("rescorer")) {
            const auto& t = j["rescorer"];
            c.rescorer_train.tau = t.value("tau", c.rescorer_train.tau);
            c.rescorer_train.lr = t.value("lr", c.rescorer_train.lr);
            c.rescorer_train.weight_decay = t.value("weight_decay", c.rescorer_train.weight_decay);
            c.rescorer_train.log_interval = t.value("log_interval", c.rescorer_train.log_interval);
            c.rescorer_train.patience = t.value("patience", c.rescorer_train.patience);
            c.rescorer_train.max_tokens = t.value("max_tokens", c.rescorer_train.max_tokens);
            c.rescorer_train.k = t.value("k", c.rescorer_train.k);
            c.rescorer_train.negatives = t.value("negatives", c.rescorer_train.negatives);
            c.rescorer_train.batch = t.value("batch", c.rescorer_train.batch);
            c.rescorer_train.max_epochs = t.value("max_epochs", c.rescorer_train.max_epochs);
        }
        c.grid = GridSpec::defaults();
        if (j.contains("grid")) {
            const auto& g = j["grid"];
            if (g.contains("k")) c.grid.k_grid = g["k"].get<std::vector<size_t>>();
            if (g.contains("lambda")) c.grid.lambda_grid = g["lambda"].get<std::vector<double>>();
        }
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            c.dev_token_limit = e.value("dev_token_limit", c.dev_token_limit);
            c.test_token_limit = e.value("test_token_limit", c.test_token_limit);
        }
        c.enforce_footprint = j.value("enforce_footprint", true);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }

    validate_config(c);
    PipelineConfig resolved = c;
    resolved.canonical_json = config_to_json(c).dump();
    return resolved;
}

// ---------------------------------------------------------------------------
// manifest

namespace {

class Manifest {
public:
    static Manifest open(const fs::path& work) {
        Manifest m;
        m.path_ = work / "MANIFEST.json";
        if (fs::exists(m.path_)) {
            std::ifstream in(m.path_);
            try {
                in >> m.data_;
            } catch (const json::exception&) {
                throw IoError(IoCode::bad_layout, "manifest is not valid JSON: " + m.path_.string());
            }
        }
        if (!m.data_.contains("artifacts")) m.data_["artifacts"] = json::object();
        if (!m.data_.contains("stages")) m.data_["stages"] = json::object();
        m.data_["schema"] = 1;
        return m;
    }

    void save() const {
        std::ofstream out(path_);
        out << data_.dump(2) << '\n';
        if (!out) throw IoError(IoCode::write_failed, "cannot write manifest: " + path_.string());
    }

    std::optional<std::string> artifact_hash(const std::string& name) const {
        const auto& a = data_["artifacts"];
        if (!a.contains(name)) return std::nullopt;
        return a[name].get<std::string>();
    }

    void set_artifact(const std::string& name, const std::string& hash) {
        data_["artifacts"][name] = hash;
    }

    std::optional<std::string> stage_signature(const std::string& stage) const {
        const auto& s = data_["stages"];
        if (!s.contains(stage)) return std::nullopt;
        return s[stage]["signature"].get<std::string>();
    }

    void set_stage(const std::string& stage, const std::string& signature,
                   const std::vector<std::string>& outputs) {
        data_["stages"][stage] = {{"signature", signature}, {"outputs", outputs}};
    }

private:
    json data_;
    fs::path path_;
};

struct StageIo {
    std::vector<std::string> inputs;        // artifacts in the work dir
    std::vector<std::string> external;      // absolute paths outside the work dir
    std::vector<std::string> outputs;
    json config_subset;
};

struct RowNeeds {
    bool store_w = false, store_a_base = false, store_a_adapted = false;
    bool adapters = false;
    std::vector<std::string> rescorer_tags;  // e.g. "w_base", "wa_adapted"
    std::vector<std::string> knn_rows;       // rows that need retrieval
};

std::string rescorer_tag(const ExperimentRow& row) {
    std::string sel = row.stores == StoreSel::w ? "w" : row.stores == StoreSel::a ? "a" : "wa";
    return sel + (row.adapters ? "_adapted" : "_base");
}

RowNeeds compute_needs(const PipelineConfig& cfg) {
    RowNeeds n;
    std::set<std::string> tags;
    for (const auto& name : cfg.experiments) {
        const ExperimentRow& row = experiment_row(name);
        n.adapters |= row.adapters;
        if (row.stores == StoreSel::w || row.stores == StoreSel::wa) n.store_w = true;
        if (row.stores == StoreSel::a || row.stores == StoreSel::wa) {
            (row.adapters ? n.store_a_adapted : n.store_a_base) = true;
        }
        if (row.stores != StoreSel::none) n.knn_rows.push_back(name);
        if (row.rescorer) tags.insert(rescorer_tag(row));
    }
    n.rescorer_tags.assign(tags.begin(), tags.end());
    return n;
}

std::vector<std::string> needed_store_files(const RowNeeds& n) {
    std::vector<std::string> out;
    if (n.store_w) out.push_back("store_w.knnds");
    if (n.store_a_base) out.push_back("store_a_base.knnds");
    if (n.store_a_adapted) out.push_back("store_a_adapted.knnds");
    return out;
}

constexpr size_t kIvfMinStoreSize = 4;  // stores smaller than n_list * this stay exact

/// Loaded artifacts for the evaluation-side stages; stores must stay put
/// because backends hold pointers into them.
struct Loaded {
    LmParams lm;
    std::optional<AdapterParams> adapters;
    std::map<std::string, Datastore> stores;
    std::map<std::string, IvfIndex> indexes;

    const Datastore* store(const std::string& name) const {
        auto it = stores.find(name);
        return it == stores.end() ? nullptr : &it->second;
    }
    const IvfIndex* index(const std::string& name) const {
        auto it = indexes.find(name);
        return it == indexes.end() ? nullptr : &it->second;
    }
};

struct StageContext {
    const PipelineConfig& cfg;
    fs::path work;
    Manifest& manifest;
};

std::string artifact_path(const StageContext& ctx, const std::string& name) {
    return (ctx.work / name).string();
}

void require_artifact(const StageContext& ctx, const std::string& name) {
    const auto path = artifact_path(ctx, name);
    if (!fs::exists(path)) throw MissingArtifactError(name);
    if (const auto recorded = ctx.manifest.artifact_hash(name)) {
        if (hash_hex(hash_file(path)) != *recorded) {
            throw IoError(IoCode::checksum_mismatch,
                          "artifact does not match its manifest checksum: " + name);
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// stage implementations

namespace {

void log_line(const std::string& msg) { std::fprintf(stderr, "[knnlm] %s\n", msg.c_str()); }

std::string store_file_for_row(const ExperimentRow& row, bool adapt_side) {
    if (adapt_side) return row.adapters ? "store_a_adapted.knnds" : "store_a_base.knnds";
    return "store_w.knnds";
}

std::string ivf_file_for_store(const std::string& store_file) {
    // store_X.knnds -> ivf_X.knnivf
    return "ivf_" + store_file.substr(6, store_file.size() - 6 - 6) + ".knnivf";
}

StageIo stage_io(const PipelineConfig& cfg, Stage s) {
    const RowNeeds needs = compute_needs(cfg);
    const json full = json::parse(cfg.canonical_json);
    StageIo io;
    switch (s) {
        case Stage::prepare: {
            io.external = {cfg.pretrain_corpus, cfg.adapt_corpus};
            io.outputs = {"vocab.txt",        "pretrain_train.tok", "pretrain_dev.tok",
                          "pretrain_test.tok", "adapt_train.tok",    "adapt_dev.tok",
                          "adapt_test.tok"};
            io.config_subset = {{"model", full["model"]}, {"split", full["split"]}};
            break;
        }
        case Stage::train_lm: {
            io.inputs = {"pretrain_train.tok"};
            io.outputs = {"lm.knnp"};
            io.config_subset = {{"model", full["model"]},
                                {"train_lm", full["train_lm"]},
                                {"seed", cfg.seed_lm}};
            break;
        }
        case Stage::train_adapters: {
            io.inputs = {"lm.knnp", "adapt_train.tok", "adapt_dev.tok"};
            io.outputs = {"adapters.knnp"};
            io.config_subset = {{"model", full["model"]},
                                {"train_adapters", full["train_adapters"]},
                                {"seed", cfg.seed_adapters}};
            break;
        }
        case Stage::build_stores: {
            io.inputs = {"lm.knnp"};
            if (needs.store_w) io.inputs.push_back("pretrain_train.tok");
            if (needs.store_a_base || needs.store_a_adapted) io.inputs.push_back("adapt_train.tok");
            if (needs.store_a_adapted) io.inputs.push_back("adapters.knnp");
            io.outputs = needed_store_files(needs);
            io.config_subset = {{"tap", full["tap"]},
                                {"metric", full["retrieval"]["metric"]},
                                {"stores", io.outputs},
                                {"enforce_footprint", cfg.enforce_footprint}};
            break;
        }
        case Stage::build_index: {
            io.inputs = needed_store_files(needs);
            if (cfg.use_ivf) {
                for (const auto& store_file : io.inputs) {
                    io.outputs.push_back(ivf_file_for_store(store_file));
                }
            }
            io.config_subset = {{"retrieval", full["retrieval"]}, {"seed", cfg.seed_ivf}};
            break;
        }
        case Stage::train_rescorer: {
            io.inputs = {"lm.knnp", "adapt_train.tok"};
            if (needs.adapters) io.inputs.push_back("adapters.knnp");
            for (const auto& f : needed_store_files(needs)) io.inputs.push_back(f);
            for (const auto& tag : needs.rescorer_tags) {
                io.outputs.push_back("cx_" + tag + ".knncx");
                io.outputs.push_back("rescorer_" + tag + ".knnp");
            }
            io.config_subset = {{"rescorer", full["rescorer"]},
                                {"tap", full["tap"]},
                                {"retrieval", full["retrieval"]},
                                {"tags", needs.rescorer_tags},
                                {"seed", cfg.seed_rescorer}};
            break;
        }
        case Stage::grid_search: {
            io.inputs = {"lm.knnp", "adapt_dev.tok"};
            if (needs.adapters) io.inputs.push_back("adapters.knnp");
            for (const auto& f : needed_store_files(needs)) io.inputs.push_back(f);
            for (const auto& tag : needs.rescorer_tags) {
                io.inputs.push_back("rescorer_" + tag + ".knnp");
            }
            for (const auto& name : needs.knn_rows) {
                io.outputs.push_back("grid_" + row_tag(name) + ".json");
            }
            io.config_subset = {{"grid", full["grid"]},
                                {"tap", full["tap"]},
                                {"retrieval", full["retrieval"]},
                                {"dev_token_limit", cfg.dev_token_limit},
                                {"experiments", cfg.experiments}};
            break;
        }
        case Stage::eval: {
            io.inputs = {"lm.knnp", "adapt_dev.tok", "adapt_test.tok"};
            if (needs.adapters) io.inputs.push_back("adapters.knnp");
            for (const auto& f : needed_store_files(needs)) io.inputs.push_back(f);
            for (const auto& tag : needs.rescorer_tags) {
                io.inputs.push_back("rescorer_" + tag + ".knnp");
            }
            for (const auto& name : needs.knn_rows) {
                io.inputs.push_back("grid_" + row_tag(name) + ".json");
            }
            io.outputs.push_back("metrics.json");
            for (const auto& name : cfg.experiments) {
                io.outputs.push_back("eval_" + row_tag(name) + ".json");
            }
            io.config_subset = {{"eval", full["eval"]},
                                {"tap", full["tap"]},
                                {"retrieval", full["retrieval"]},
                                {"experiments", cfg.experiments},
                                {"config_echo", full}};
            break;
        }
        case Stage::all:
            break;
    }
    // IVF indexes are consumed opportunistically: present only when the
    // backend is "ivf" and the store was large enough.
    if ((s == Stage::train_rescorer || s == Stage::grid_search || s == Stage::eval) && cfg.use_ivf) {
        for (const auto& store_file : needed_store_files(needs)) {
            const auto ivf = ivf_file_for_store(store_file);
            // inputs only if build-index actually produced them
            io.config_subset["ivf"].push_back(ivf);
        }
    }
    return io;
}

// ----- prepare -----

void run_prepare(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    const std::string pre_text = read_text_file(cfg.pretrain_corpus);
    const std::string ada_text = read_text_file(cfg.adapt_corpus);

    const Vocab vocab = Vocab::build(pre_text + "\n" + ada_text, cfg.dims.vocab);
    vocab.save(artifact_path(ctx, "vocab.txt"));
    log_line("vocab: " + std::to_string(vocab.size()) + " tokens");

    const auto process = [&](const std::string& text, const std::string& tag) {
        const TokenSequence seq = encode(text, vocab, tag);
        auto parts = split(seq, cfg.split_train, cfg.split_dev, cfg.split_test);
        save_tokens(parts[0], artifact_path(ctx, tag + "_train.tok"));
        save_tokens(parts[1], artifact_path(ctx, tag + "_dev.tok"));
        save_tokens(parts[2], artifact_path(ctx, tag + "_test.tok"));
        log_line(tag + ": " + std::to_string(seq.size()) + " tokens (" +
                 std::to_string(parts[0].size()) + "/" + std::to_string(parts[1].size()) + "/" +
                 std::to_string(parts[2].size()) + ")");
    };
    process(pre_text, "pretrain");
    process(ada_text, "adapt");
}

// ----- training stages -----

void run_train_lm(const StageContext& ctx) {
    const TokenSequence train = load_tokens(artifact_path(ctx, "pretrain_train.tok"));
    LmTrainConfig train_cfg = ctx.cfg.lm_train;
    train_cfg.seed = ctx.cfg.seed_lm;
    LmDims dims = ctx.cfg.dims;
    auto [params, stats] = train_lm(train, dims, train_cfg);
    params.save(artifact_path(ctx, "lm.knnp"));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "train-lm: %zu steps, train ppl %.2f (init %.0f)", stats.steps,
                  stats.final_train_ppl, stats.init_ppl);
    log_line(buf);
}

void run_train_adapters(const StageContext& ctx) {
    const LmParams base = LmParams::load(artifact_path(ctx, "lm.knnp"));
    const TokenSequence train = load_tokens(artifact_path(ctx, "adapt_train.tok"));
    const TokenSequence dev = load_tokens(artifact_path(ctx, "adapt_dev.tok"));
    AdapterTrainConfig train_cfg = ctx.cfg.adapter_train;
    train_cfg.bottleneck = ctx.cfg.adapter_dim;
    train_cfg.seed = ctx.cfg.seed_adapters;
    train_cfg.dev_limit = ctx.cfg.dev_token_limit;
    auto [adapters, stats] = train_adapters(base, train, dev, train_cfg);
    adapters.save(artifact_path(ctx, "adapters.knnp"));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "train-adapters: dev ppl %.2f -> %.2f over %zu epochs",
                  stats.base_dev_ppl, stats.best_dev_ppl, stats.epochs_run);
    log_line(buf);
}

// ----- stores and index -----

void run_build_stores(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    const RowNeeds needs = compute_needs(cfg);
    const LmParams lm = LmParams::load(artifact_path(ctx, "lm.knnp"));

    std::optional<TokenSequence> pre_train, ada_train;
    if (needs.store_w) pre_train = load_tokens(artifact_path(ctx, "pretrain_train.tok"));
    if (needs.store_a_base || needs.store_a_adapted) {
        ada_train = load_tokens(artifact_path(ctx, "adapt_train.tok"));
    }
    if (cfg.enforce_footprint && needs.store_w && (needs.store_a_base || needs.store_a_adapted)) {
        const double ratio =
            static_cast<double>(ada_train->size()) / static_cast<double>(pre_train->size());
        if (ratio < 0.01 || ratio > 0.10) {
            throw ConfigError("adaptation datastore would be " + std::to_string(ratio * 100) +
                              "% of the pretraining datastore; expected 1-10%");
        }
    }

    if (needs.store_w) {
        Datastore ds = build_datastore(lm, nullptr, *pre_train, cfg.tap, cfg.metric, "pretrain");
        ds.save(artifact_path(ctx, "store_w.knnds"));
        log_line("store_w: " + std::to_string(ds.size()) + " entries");
    }
    if (needs.store_a_base) {
        Datastore ds = build_datastore(lm, nullptr, *ada_train, cfg.tap, cfg.metric, "adapt");
        ds.save(artifact_path(ctx, "store_a_base.knnds"));
        log_line("store_a_base: " + std::to_string(ds.size()) + " entries");
    }
    if (needs.store_a_adapted) {
        const AdapterParams adapters = AdapterParams::load(artifact_path(ctx, "adapters.knnp"));
        Datastore ds = build_datastore(lm, &adapters, *ada_train, cfg.tap, cfg.metric, "adapt");
        ds.save(artifact_path(ctx, "store_a_adapted.knnds"));
        log_line("store_a_adapted: " + std::to_string(ds.size()) + " entries");
    }
}

void run_build_index(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    if (!cfg.use_ivf) {
        log_line("build-index: exact backend configured, nothing to build");
        return;
    }
    for (const auto& store_file : needed_store_files(compute_needs(cfg))) {
        const Datastore store = Datastore::load(artifact_path(ctx, store_file));
        if (store.size() < cfg.n_list * kIvfMinStoreSize) {
            log_line("build-index: " + store_file + " too small for ivf, exact scan will be used");
            continue;
        }
        IvfIndex index = build_ivf(store, cfg.n_list, cfg.seed_ivf);
        save_ivf(index, artifact_path(ctx, ivf_file_for_store(store_file)));
        log_line("build-index: " + ivf_file_for_store(store_file));
    }
}

// ----- assembling components for retrieval-side stages -----

Loaded load_components(const StageContext& ctx, const RowNeeds& needs) {
    Loaded loaded;
    loaded.lm = LmParams::load(artifact_path(ctx, "lm.knnp"));
    if (needs.adapters) {
        loaded.adapters = AdapterParams::load(artifact_path(ctx, "adapters.knnp"));
    }
    for (const auto& store_file : needed_store_files(needs)) {
        loaded.stores.emplace(store_file, Datastore::load(artifact_path(ctx, store_file)));
    }
    if (ctx.cfg.use_ivf) {
        for (auto& [store_file, store] : loaded.stores) {
            const auto ivf_file = ivf_file_for_store(store_file);
            const auto path = artifact_path(ctx, ivf_file);
            if (fs::exists(path)) loaded.indexes.emplace(store_file, load_ivf(path, store));
        }
    }
    return loaded;
}

RetrievalBackend backend_for(const StageContext& ctx, const Loaded& loaded,
                             const std::string& store_file, Origin origin) {
    RetrievalBackend b;
    b.store = loaded.store(store_file);
    if (!b.store) throw MissingArtifactError(store_file);
    b.ivf = loaded.index(store_file);
    b.n_probe = ctx.cfg.n_probe;
    b.origin = origin;
    return b;
}

EvalComponents components_for_row(const StageContext& ctx, const Loaded& loaded,
                                  const ExperimentRow& row,
                                  const RescorerParams* rescorer) {
    EvalComponents c;
    c.lm = &loaded.lm;
    c.adapters = row.adapters ? &*loaded.adapters : nullptr;
    c.tap = ctx.cfg.tap;
    c.metric = ctx.cfg.metric;
    c.rescorer = rescorer;
    switch (row.stores) {
        case StoreSel::none:
            break;
        case StoreSel::w:
            c.backends = {backend_for(ctx, loaded, "store_w.knnds", Origin::pretrain)};
            break;
        case StoreSel::a:
            c.backends = {backend_for(ctx, loaded, store_file_for_row(row, true), Origin::adapt)};
            break;
        case StoreSel::wa:
            c.backends = {backend_for(ctx, loaded, "store_w.knnds", Origin::pretrain),
                          backend_for(ctx, loaded, store_file_for_row(row, true), Origin::adapt)};
            break;
    }
    return c;
}

// ----- rescorer stage -----

void run_train_rescorer(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    const RowNeeds needs = compute_needs(cfg);
    if (needs.rescorer_tags.empty()) {
        log_line("train-rescorer: no selected row uses a rescorer");
        return;
    }
    const Loaded loaded = load_components(ctx, needs);
    const TokenSequence train = load_tokens(artifact_path(ctx, "adapt_train.tok"));

    for (const auto& tag : needs.rescorer_tags) {
        // tag = {w|a|wa}_{base|adapted}
        const bool adapted = tag.ends_with("_adapted");
        const bool has_w = tag[0] == 'w';
        const bool merged = tag.rfind("wa_", 0) == 0;
        const bool has_a = merged || tag[0] == 'a';

        RescorerTrainConfig rcfg = cfg.rescorer_train;
        rcfg.seed = cfg.seed_rescorer;

        std::optional<RetrievalBackend> primary, secondary;
        if (merged) {
            primary = backend_for(ctx, loaded, "store_w.knnds", Origin::pretrain);
            secondary = backend_for(
                ctx, loaded, adapted ? "store_a_adapted.knnds" : "store_a_base.knnds", Origin::adapt);
        } else if (has_w) {
            primary = backend_for(ctx, loaded, "store_w.knnds", Origin::pretrain);
        } else if (has_a) {
            primary = backend_for(
                ctx, loaded, adapted ? "store_a_adapted.knnds" : "store_a_base.knnds", Origin::adapt);
        }

        const AdapterParams* adapters = adapted ? &*loaded.adapters : nullptr;
        const auto cx_path = artifact_path(ctx, "cx_" + tag + ".knncx");
        auto examples = build_contrastive_set(loaded.lm, adapters, *primary,
                                              secondary ? &*secondary : nullptr, train, cfg.tap,
                                              cfg.metric, rcfg);
        save_contrastive_set(examples, loaded.lm.dims.hidden, merged, cx_path);

        const size_t n_dev = std::max<size_t>(1, examples.size() / 10);
        std::vector<ContrastiveExample> dev_ex(examples.end() - n_dev, examples.end());
        examples.resize(examples.size() - n_dev);

        auto [params, stats] = train_rescorer(examples, dev_ex, loaded.lm, merged, rcfg);
        params.save(artifact_path(ctx, "rescorer_" + tag + ".knnp"));
        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "rescorer %s: %zu train / %zu dev examples, dev loss %.4f -> %.4f",
                      tag.c_str(), examples.size(), dev_ex.size(), stats.initial_dev_loss,
                      stats.best_dev_loss);
        log_line(buf);
    }
}

const RescorerParams* rescorer_for_row(const StageContext& ctx, const ExperimentRow& row,
                                       std::map<std::string, RescorerParams>& cache) {
    if (!row.rescorer) return nullptr;
    const std::string tag = rescorer_tag(row);
    auto it = cache.find(tag);
    if (it == cache.end()) {
        const std::string file = "rescorer_" + tag + ".knnp";
        require_artifact(ctx, file);
        it = cache.emplace(tag, RescorerParams::load(artifact_path(ctx, file))).first;
    }
    return &it->second;
}

// ----- grid search and evaluation -----

void run_grid_search(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    const RowNeeds needs = compute_needs(cfg);
    if (needs.knn_rows.empty()) {
        log_line("grid-search: no selected row retrieves neighbors");
        return;
    }
    const Loaded loaded = load_components(ctx, needs);
    const TokenSequence dev = load_tokens(artifact_path(ctx, "adapt_dev.tok"));
    std::map<std::string, RescorerParams> rescorers;

    for (const auto& name : needs.knn_rows) {
        const ExperimentRow& row = experiment_row(name);
        const EvalComponents comps =
            components_for_row(ctx, loaded, row, rescorer_for_row(ctx, row, rescorers));
        GridSpec grid = cfg.grid;
        if (row.knn_only) grid.lambda_grid = {1.0};  // retrieval-only rows tune k at lambda 1
        const GridResult result = grid_search(comps, dev, grid, {cfg.dev_token_limit});

        json out;
        out["schema"] = 1;
        out["row"] = name;
        out["best"] = {{"k", result.best_k},
                       {"lambda", result.best_lambda},
                       {"perplexity", json_number(result.best_perplexity)}};
        json table = json::array();
        for (const auto& cell : result.table) {
            table.push_back({{"k", cell.k},
                             {"lambda", cell.lambda},
                             {"perplexity", json_number(cell.perplexity)}});
        }
        out["table"] = std::move(table);
        std::ofstream f(artifact_path(ctx, "grid_" + row_tag(name) + ".json"));
        f << out.dump(2) << '\n';
        if (!f) throw IoError(IoCode::write_failed, "cannot write grid results for " + name);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "grid %s: best k=%zu lambda=%.2f dev ppl %.3f",
                      name.c_str(), result.best_k, result.best_lambda, result.best_perplexity);
        log_line(buf);
    }
}

void run_eval(const StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    const RowNeeds needs = compute_needs(cfg);
    const Loaded loaded = load_components(ctx, needs);
    const TokenSequence dev = load_tokens(artifact_path(ctx, "adapt_dev.tok"));
    const TokenSequence test = load_tokens(artifact_path(ctx, "adapt_test.tok"));
    std::map<std::string, RescorerParams> rescorers;

    json rows = json::array();
    for (const auto& row : experiment_catalog()) {
        if (std::find(cfg.experiments.begin(), cfg.experiments.end(), row.name) ==
            cfg.experiments.end()) {
            continue;
        }
        const EvalComponents comps =
            components_for_row(ctx, loaded, row, rescorer_for_row(ctx, row, rescorers));

        size_t k = 0;
        double lambda = 0.0;
        double dev_ppl;
        json grid_table = json::array();
        if (row.stores == StoreSel::none) {
            dev_ppl = evaluate(comps, dev, 0, 0.0, {cfg.dev_token_limit}).perplexity;
        } else {
            const std::string grid_file = "grid_" + row_tag(row.name) + ".json";
            require_artifact(ctx, grid_file);
            std::ifstream f(artifact_path(ctx, grid_file));
            json grid_json;
            f >> grid_json;
            k = grid_json["best"]["k"].get<size_t>();
            lambda = grid_json["best"]["lambda"].get<double>();
            dev_ppl = number_from(grid_json["best"]["perplexity"]);
            grid_table = grid_json["table"];
        }

        const EvalResult result = evaluate(comps, test, k, lambda, {cfg.test_token_limit});
        json row_json;
        row_json["name"] = row.name;
        row_json["adapters"] = row.adapters;
        row_json["store"] = row.stores == StoreSel::none ? ""
                            : row.stores == StoreSel::w  ? "w"
                            : row.stores == StoreSel::a  ? "a"
                                                         : "w+a";
        row_json["rescorer"] = row.rescorer;
        row_json["k"] = k;
        row_json["lambda"] = lambda;
        row_json["dev_perplexity"] = json_number(dev_ppl);
        row_json["perplexity"] = json_number(result.perplexity);
        if (row.stores != StoreSel::none) {
            row_json["recall"] = recall(result.records);
            row_json["precision"] = precision(result.records);
        } else {
            row_json["recall"] = nullptr;
            row_json["precision"] = nullptr;
        }
        row_json["grid"] = grid_table;

        std::ofstream f(artifact_path(ctx, "eval_" + row_tag(row.name) + ".json"));
        f << row_json.dump(2) << '\n';
        if (!f) throw IoError(IoCode::write_failed, "cannot write eval results for " + row.name);
        rows.push_back(std::move(row_json));

        char buf[200];
        std::snprintf(buf, sizeof(buf), "eval %s: k=%zu lambda=%.2f test ppl %.3f", row.name.c_str(),
                      k, lambda, result.perplexity);
        log_line(buf);
    }

    json metrics;
    metrics["schema"] = 1;
    metrics["config"] = json::parse(cfg.canonical_json);
    metrics["rows"] = std::move(rows);
    std::ofstream f(artifact_path(ctx, "metrics.json"));
    f << metrics.dump(2) << '\n';
    if (!f) throw IoError(IoCode::write_failed, "cannot write metrics.json");
}

// ---------------------------------------------------------------------------
// orchestration

using StageFn = void (*)(const StageContext&);

StageFn stage_fn(Stage s) {
    switch (s) {
        case Stage::prepare: return run_prepare;
        case Stage::train_lm: return run_train_lm;
        case Stage::train_adapters: return run_train_adapters;
        case Stage::build_stores: return run_build_stores;
        case Stage::build_index: return run_build_index;
        case Stage::train_rescorer: return run_train_rescorer;
        case Stage::grid_search: return run_grid_search;
        case Stage::eval: return run_eval;
        case Stage::all: break;
    }
    throw std::invalid_argument("no function for stage");
}

void record_timing(const fs::path& work, const std::string& stage, double seconds) {
    const fs::path path = work / "timings.json";
    json j;
    if (fs::exists(path)) {
        std::ifstream in(path);
        try {
            in >> j;
        } catch (const json::exception&) {
            j = json::object();
        }
    }
    j["stages"][stage] = seconds;
    std::ofstream out(path);
    out << j.dump(2) << '\n';
}

/// Runs one stage with checksum-gated skipping; returns true if skipped.
bool run_stage_checked(const PipelineConfig& cfg, Stage s, Manifest& manifest,
                       const fs::path& work) {
    const StageContext ctx{cfg, work, manifest};
    const StageIo io = stage_io(cfg, s);
    const std::string name = stage_name(s);

    for (const auto& input : io.inputs) require_artifact(ctx, input);

    uint64_t h = fnv1a64(name);
    h = fnv1a64(io.config_subset.dump(), h);
    for (const auto& input : io.inputs) {
        h = fnv1a64(input, h);
        h = fnv1a64(hash_hex(hash_file(artifact_path(ctx, input))), h);
    }
    for (const auto& ext : io.external) {
        h = fnv1a64(ext, h);
        h = fnv1a64(hash_hex(hash_file(ext)), h);
    }
    const std::string signature = hash_hex(h);

    const auto recorded = manifest.stage_signature(name);
    if (recorded && *recorded == signature) {
        bool complete = true;
        for (const auto& output : io.outputs) {
            const auto path = artifact_path(ctx, output);
            const auto expect = manifest.artifact_hash(output);
            if (!fs::exists(path) || !expect || hash_hex(hash_file(path)) != *expect) {
                complete = false;
                break;
            }
        }
        if (complete) {
            log_line(std::string(name) + ": up to date, skipping");
            return true;
        }
    }

    log_line(std::string(name) + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    stage_fn(s)(ctx);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    for (const auto& output : io.outputs) {
        const auto path = artifact_path(ctx, output);
        if (!fs::exists(path)) {
            // optional outputs (ivf for small stores) are dropped from the record
            continue;
        }
        manifest.set_artifact(output, hash_hex(hash_file(path)));
    }
    manifest.set_stage(name, signature, io.outputs);
    manifest.save();
    record_timing(work, name, seconds);
    return false;
}

}  // namespace

void run_pipeline(const PipelineConfig& cfg_in, Stage stage, const RunOptions& opts) {
    PipelineConfig cfg = cfg_in;
    if (opts.work_dir) cfg.work_dir = *opts.work_dir;
    if (opts.seed) {
        cfg.seed_lm = cfg.seed_adapters = cfg.seed_rescorer = cfg.seed_ivf = *opts.seed;
    }
    validate_config(cfg);
    cfg.canonical_json = config_to_json(cfg).dump();

    const fs::path work(cfg.work_dir);
    fs::create_directories(work);
    Manifest manifest = Manifest::open(work);

    if (stage == Stage::all) {
        for (Stage s : {Stage::prepare, Stage::train_lm, Stage::train_adapters, Stage::build_stores,
                        Stage::build_index, Stage::train_rescorer, Stage::grid_search, Stage::eval}) {
            run_stage_checked(cfg, s, manifest, work);
        }
    } else {
        run_stage_checked(cfg, stage, manifest, work);
    }
}

}  // namespace knnlm
