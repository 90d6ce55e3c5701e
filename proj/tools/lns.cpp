// lns: localize-and-stitch model merging toolkit.
//
// Subcommands: suite (generate + pretrain + finetune a synthetic task
// suite), localize (trained or dataless mask extraction), stitch (merge
// sparse task vectors, incrementally updatable), merge (all methods, with
// a report), experiment (scripted desk-scale bundles).
//
// Exit codes: 0 success, 1 usage, 2 numeric failure, 3 input mismatch,
// 4 format corruption.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lns/analysis.hpp"
#include "lns/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lns;

namespace {

std::string iso_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::string hex64(uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string default_out_dir() {
    const char* env = std::getenv("LNS_OUT_DIR");
    return env != nullptr && *env != '\0' ? env : ".";
}

json load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw error("cannot open config '" + path + "'");
    try {
        json j;
        f >> j;
        return j;
    } catch (const json::exception& e) {
        throw format_error(std::string("bad config JSON: ") + e.what(), 0);
    }
}

// flags override config-file values: only absorb a config key when the
// option was not given on the command line
template <typename T>
void absorb(const json& cfg, const char* key, const CLI::Option* opt, T& value) {
    if (opt != nullptr && opt->count() > 0) return;
    if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

void write_resolved_config(const std::string& out_dir, const std::string& command,
                           const json& params) {
    json j;
    j["command"] = command;
    j["params"] = params;
    fs::create_directories(out_dir);
    std::string path = (fs::path(out_dir) / (command + ".config.json")).string();
    std::ofstream f(path);
    if (!f) throw error("cannot write resolved config '" + path + "'");
    f << j.dump(2) << "\n";
}

json params_of_config(const json& cfg, const std::string& command) {
    if (cfg.is_null()) return json::object();
    if (cfg.contains("command") && cfg.at("command").get<std::string>() != command)
        throw mismatch_error("config file belongs to command '" +
                             cfg.at("command").get<std::string>() + "'");
    return cfg.value("params", json::object());
}

// ---------------------------------------------------------------------------
// suite persistence shared by localize/merge

struct SuiteParams {
    uint64_t seed = 1;
    uint32_t tasks = 6;
    bool conflict = false;
    uint32_t dim = 32, hidden = 64, blocks = 2, classes = 4;
    int train_per_class = 128, val_per_class = 256, test_per_class = 250;
    double noise = 0.5, center_scale = 2.0;
    double ft_lr = 0.05;
    int ft_epochs = 30, ft_batch = 16, pre_epochs = 30;

    SuiteConfig to_config() const {
        SuiteConfig cfg;
        cfg.n_tasks = tasks;
        cfg.d_in = dim;
        cfg.hidden = hidden;
        cfg.blocks = blocks;
        cfg.classes = classes;
        cfg.train_per_class = train_per_class;
        cfg.val_per_class = val_per_class;
        cfg.test_per_class = test_per_class;
        cfg.noise = noise;
        cfg.center_scale = center_scale;
        cfg.conflict = conflict;
        cfg.seed = seed;
        cfg.ft_lr = ft_lr;
        cfg.ft_epochs = ft_epochs;
        cfg.ft_batch = ft_batch;
        cfg.pre_epochs = pre_epochs;
        return cfg;
    }

    json to_json() const {
        return json{{"seed", seed},
                    {"tasks", tasks},
                    {"conflict", conflict},
                    {"dim", dim},
                    {"hidden", hidden},
                    {"blocks", blocks},
                    {"classes", classes},
                    {"train_per_class", train_per_class},
                    {"val_per_class", val_per_class},
                    {"test_per_class", test_per_class},
                    {"noise", noise},
                    {"center_scale", center_scale},
                    {"ft_lr", ft_lr},
                    {"ft_epochs", ft_epochs},
                    {"ft_batch", ft_batch},
                    {"pre_epochs", pre_epochs}};
    }

    static SuiteParams from_json(const json& j) {
        SuiteParams p;
        p.seed = j.value("seed", p.seed);
        p.tasks = j.value("tasks", p.tasks);
        p.conflict = j.value("conflict", p.conflict);
        p.dim = j.value("dim", p.dim);
        p.hidden = j.value("hidden", p.hidden);
        p.blocks = j.value("blocks", p.blocks);
        p.classes = j.value("classes", p.classes);
        p.train_per_class = j.value("train_per_class", p.train_per_class);
        p.val_per_class = j.value("val_per_class", p.val_per_class);
        p.test_per_class = j.value("test_per_class", p.test_per_class);
        p.noise = j.value("noise", p.noise);
        p.center_scale = j.value("center_scale", p.center_scale);
        p.ft_lr = j.value("ft_lr", p.ft_lr);
        p.ft_epochs = j.value("ft_epochs", p.ft_epochs);
        p.ft_batch = j.value("ft_batch", p.ft_batch);
        p.pre_epochs = j.value("pre_epochs", p.pre_epochs);
        return p;
    }
};

void attach_suite_flags(CLI::App* cmd, SuiteParams& p,
                        std::map<std::string, CLI::Option*>& opts) {
    opts["seed"] = cmd->add_option("--seed", p.seed, "global random seed");
    opts["tasks"] = cmd->add_option("--tasks", p.tasks, "number of tasks");
    opts["conflict"] = cmd->add_flag("--conflict", p.conflict,
                                     "make tasks 0 and 1 share clusters with permuted labels");
    opts["dim"] = cmd->add_option("--dim", p.dim, "input dimension");
    opts["hidden"] = cmd->add_option("--hidden", p.hidden, "hidden width");
    opts["blocks"] = cmd->add_option("--blocks", p.blocks, "hidden blocks");
    opts["classes"] = cmd->add_option("--classes", p.classes, "classes per task");
    opts["train_per_class"] = cmd->add_option("--train-per-class", p.train_per_class, "");
    opts["val_per_class"] = cmd->add_option("--val-per-class", p.val_per_class, "");
    opts["test_per_class"] = cmd->add_option("--test-per-class", p.test_per_class, "");
    opts["noise"] = cmd->add_option("--noise", p.noise, "cluster noise sigma");
    opts["center_scale"] = cmd->add_option("--center-scale", p.center_scale, "");
    opts["ft_lr"] = cmd->add_option("--ft-lr", p.ft_lr, "finetune learning rate");
    opts["ft_epochs"] = cmd->add_option("--ft-epochs", p.ft_epochs, "finetune epochs");
    opts["ft_batch"] = cmd->add_option("--ft-batch", p.ft_batch, "finetune batch size");
    opts["pre_epochs"] = cmd->add_option("--pre-epochs", p.pre_epochs, "pretrain epochs");
}

void absorb_suite(const json& cfg, const std::map<std::string, CLI::Option*>& opts,
                  SuiteParams& p) {
    absorb(cfg, "seed", opts.at("seed"), p.seed);
    absorb(cfg, "tasks", opts.at("tasks"), p.tasks);
    absorb(cfg, "conflict", opts.at("conflict"), p.conflict);
    absorb(cfg, "dim", opts.at("dim"), p.dim);
    absorb(cfg, "hidden", opts.at("hidden"), p.hidden);
    absorb(cfg, "blocks", opts.at("blocks"), p.blocks);
    absorb(cfg, "classes", opts.at("classes"), p.classes);
    absorb(cfg, "train_per_class", opts.at("train_per_class"), p.train_per_class);
    absorb(cfg, "val_per_class", opts.at("val_per_class"), p.val_per_class);
    absorb(cfg, "test_per_class", opts.at("test_per_class"), p.test_per_class);
    absorb(cfg, "noise", opts.at("noise"), p.noise);
    absorb(cfg, "center_scale", opts.at("center_scale"), p.center_scale);
    absorb(cfg, "ft_lr", opts.at("ft_lr"), p.ft_lr);
    absorb(cfg, "ft_epochs", opts.at("ft_epochs"), p.ft_epochs);
    absorb(cfg, "ft_batch", opts.at("ft_batch"), p.ft_batch);
    absorb(cfg, "pre_epochs", opts.at("pre_epochs"), p.pre_epochs);
}

// Rebuild the full artifact set from a suite directory: manifest config
// regenerates the data, checkpoints come from disk.
SuiteArtifacts load_suite_artifacts(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "suite.json");
    if (!f) throw error("cannot open suite manifest in '" + dir + "'");
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw format_error(std::string("bad suite manifest: ") + e.what(), 0);
    }
    SuiteParams p = SuiteParams::from_json(manifest.at("config"));
    SuiteArtifacts art;
    art.cfg = p.to_config();
    art.suite = gen_task_suite(art.cfg);
    art.arch = art.cfg.arch();
    art.pre = load_pset((fs::path(dir) / "pre.pset").string());
    if (hex64(art.pre.fingerprint()) != manifest.at("base_fingerprint").get<std::string>())
        throw mismatch_error("pre.pset does not match the manifest fingerprint");
    for (uint32_t t = 0; t < art.cfg.n_tasks; ++t) {
        ParamSet ft =
            load_pset((fs::path(dir) / ("task" + std::to_string(t) + ".ft.pset")).string());
        art.tvs.push_back(compute_task_vector(art.pre, ft));
        art.ft_acc.push_back(evaluate(art.arch, ft, art.suite.tasks[t].test));
        art.fts.push_back(std::move(ft));
    }
    return art;
}

// ---------------------------------------------------------------------------

int cmd_suite(const SuiteParams& p, const std::string& out_dir) {
    SuiteArtifacts art = build_suite_artifacts(p.to_config());
    fs::create_directories(out_dir);
    save_pset(art.pre, (fs::path(out_dir) / "pre.pset").string());
    json manifest;
    manifest["version"] = 1;
    manifest["config"] = p.to_json();
    manifest["base_fingerprint"] = hex64(art.pre.fingerprint());
    manifest["tasks"] = json::array();
    for (uint32_t t = 0; t < art.cfg.n_tasks; ++t) {
        std::string name = "task" + std::to_string(t) + ".ft.pset";
        save_pset(art.fts[t], (fs::path(out_dir) / name).string());
        manifest["tasks"].push_back({{"file", name},
                                     {"fingerprint", hex64(art.fts[t].fingerprint())},
                                     {"finetuned_acc", art.ft_acc[t]}});
    }
    std::ofstream mf(fs::path(out_dir) / "suite.json");
    mf << manifest.dump(2) << "\n";
    std::cout << "suite: " << art.cfg.n_tasks << " tasks, base " << hex64(art.pre.fingerprint())
              << ", written to " << out_dir << "\n";
    return 0;
}

int cmd_localize(const std::string& suite_dir, uint32_t task, bool trained,
                 double sparsity_pct, int shots, int epochs, double lambda, bool auto_lambda,
                 double lr, uint64_t seed, const std::string& out_dir) {
    SuiteArtifacts art = load_suite_artifacts(suite_dir);
    if (task >= art.cfg.n_tasks) throw mismatch_error("task index out of range");
    LocalizeConfig lc;
    lc.sparsity = sparsity_pct / 100.0;
    lc.shots = shots;
    lc.epochs = epochs;
    lc.lambda = lambda;
    lc.auto_lambda = auto_lambda;
    lc.lr = lr;
    LocalizeResult lr_out = localize_task(art, task, trained, sparsity_pct / 100.0, lc, seed);

    fs::create_directories(out_dir);
    std::string base = "task" + std::to_string(task);
    save_mask(lr_out.mask, (fs::path(out_dir) / (base + ".mask")).string());
    save_sptv(lr_out.sptv, (fs::path(out_dir) / (base + ".sptv")).string());
    json sidecar;
    sidecar["task"] = task;
    sidecar["mode"] = trained ? "trained" : "dataless";
    sidecar["sparsity_pct"] = sparsity_pct;
    sidecar["achieved_sparsity"] = lr_out.achieved_sparsity;
    sidecar["nnz"] = lr_out.sptv.nnz();
    if (trained) {
        sidecar["shots"] = shots;
        sidecar["epochs"] = epochs;
        sidecar["lambda"] = lr_out.lambda;
        sidecar["auto_lambda"] = auto_lambda;
        sidecar["lr"] = lr;
    }
    sidecar["base_fingerprint"] = hex64(art.pre.fingerprint());
    std::ofstream sf(fs::path(out_dir) / (base + ".localize.json"));
    sf << sidecar.dump(2) << "\n";
    std::cout << "localized task " << task << " (" << (trained ? "trained" : "dataless")
              << "): sparsity " << lr_out.achieved_sparsity << ", nnz " << lr_out.sptv.nnz()
              << "\n";
    return 0;
}

int cmd_stitch(const std::string& pre_path, const std::vector<std::string>& sptv_paths,
               const std::string& state_dir, const std::string& add_path, int64_t add_id,
               int64_t remove_id, bool verify, const std::string& save_state,
               const std::string& out_path) {
    std::optional<StitchState> state;
    if (!state_dir.empty()) {
        state.emplace(StitchState::load(state_dir));
    } else {
        if (pre_path.empty()) throw mismatch_error("need --pre or --state");
        state.emplace(load_pset(pre_path));
        uint32_t id = 0;
        for (const std::string& path : sptv_paths) state->add(id++, load_sptv(path));
    }
    if (!add_path.empty()) {
        uint32_t id;
        if (add_id >= 0) {
            id = static_cast<uint32_t>(add_id);
        } else {
            auto ids = state->task_ids();
            id = ids.empty() ? 0 : ids.back() + 1;
        }
        state->add(id, load_sptv(add_path));
        std::cout << "added task " << id << "\n";
    }
    if (remove_id >= 0) {
        state->remove(static_cast<uint32_t>(remove_id));
        std::cout << "removed task " << remove_id << "\n";
    }
    if (verify) {
        if (!state->verify())
            throw numeric_error("incremental state disagrees with a from-scratch stitch");
        std::cout << "verify: incremental state matches a from-scratch stitch\n";
    }
    ParamSet merged = state->merged();
    if (!out_path.empty()) {
        fs::create_directories(fs::path(out_path).parent_path().empty()
                                   ? "."
                                   : fs::path(out_path).parent_path().string());
        save_pset(merged, out_path);
    }
    if (!state_dir.empty() && (state_dir == save_state || save_state.empty()))
        state->save(state_dir);  // state mode updates in place
    else if (!save_state.empty())
        state->save(save_state);
    std::cout << "stitched " << state->task_ids().size() << " task(s), union support "
              << state->weights().union_support() << ", merged " << hex64(merged.fingerprint())
              << "\n";
    return 0;
}

int cmd_merge(const std::string& suite_dir, MergeOptions mo, const std::string& out_dir) {
    SuiteArtifacts art = load_suite_artifacts(suite_dir);
    MergeOutcome outcome = run_merge(art, mo);
    fs::create_directories(out_dir);
    save_pset(outcome.merged, (fs::path(out_dir) / "merged.pset").string());
    for (size_t t = 0; t < outcome.masks.size(); ++t) {
        save_mask(outcome.masks[t],
                  (fs::path(out_dir) / ("task" + std::to_string(t) + ".mask")).string());
        save_sptv(outcome.sptvs[t],
                  (fs::path(out_dir) / ("task" + std::to_string(t) + ".sptv")).string());
    }
    std::ofstream rf(fs::path(out_dir) / "report.json");
    rf << outcome.report.to_json() << "\n";
    std::cout << "merged with " << mo.method << ": average accuracy " << outcome.report.average
              << " over " << outcome.report.per_task.size() << " tasks\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"localize-and-stitch model merging toolkit"};
    app.require_subcommand(1);

    // ---- suite -----------------------------------------------------------
    SuiteParams sp;
    std::string suite_out = default_out_dir();
    std::string suite_config;
    auto* suite_cmd = app.add_subcommand("suite", "generate, pretrain and finetune a task suite");
    std::map<std::string, CLI::Option*> suite_opts;
    attach_suite_flags(suite_cmd, sp, suite_opts);
    auto* suite_out_opt = suite_cmd->add_option("--out,-o", suite_out, "output directory");
    suite_cmd->add_option("--config", suite_config, "resolved-config JSON to replay");

    // ---- localize --------------------------------------------------------
    auto* loc_cmd = app.add_subcommand("localize", "extract a localization mask for one task");
    std::string loc_suite, loc_out = default_out_dir(), loc_config;
    uint32_t loc_task = 0;
    bool loc_trained = false, loc_dataless = false, loc_auto_lambda = false;
    double loc_sparsity = -1.0, loc_lambda = 1e-3, loc_lr = 200.0;
    int loc_shots = 64, loc_epochs = 10;
    uint64_t loc_seed = 1;
    auto* loc_suite_opt = loc_cmd->add_option("--suite", loc_suite, "suite directory");
    auto* loc_task_opt = loc_cmd->add_option("--task", loc_task, "task index");
    auto* loc_trained_opt = loc_cmd->add_flag("--trained", loc_trained, "gradient-trained mask");
    auto* loc_dataless_opt = loc_cmd->add_flag("--dataless", loc_dataless, "top-k magnitude mask");
    auto* loc_sparsity_opt =
        loc_cmd->add_option("--sparsity", loc_sparsity,
                            "sparsity in percent (default: 1 trained, 5 dataless)");
    auto* loc_shots_opt = loc_cmd->add_option("--shots", loc_shots, "examples per class");
    auto* loc_epochs_opt = loc_cmd->add_option("--epochs", loc_epochs, "mask training epochs");
    auto* loc_lambda_opt = loc_cmd->add_option("--lambda", loc_lambda, "L1 coefficient");
    auto* loc_auto_opt =
        loc_cmd->add_flag("--auto-lambda", loc_auto_lambda, "bisect lambda to hit the target");
    auto* loc_lr_opt = loc_cmd->add_option("--lr", loc_lr, "score learning rate");
    auto* loc_seed_opt = loc_cmd->add_option("--seed", loc_seed, "localization seed");
    auto* loc_out_opt = loc_cmd->add_option("--out,-o", loc_out, "output directory");
    loc_cmd->add_option("--config", loc_config, "resolved-config JSON to replay");

    // ---- stitch ----------------------------------------------------------
    auto* st_cmd = app.add_subcommand("stitch", "stitch sparse task vectors onto a base model");
    std::string st_pre, st_state, st_add, st_save_state, st_out, st_config;
    std::vector<std::string> st_sptvs;
    int64_t st_add_id = -1, st_remove = -1;
    bool st_verify = false;
    auto* st_pre_opt = st_cmd->add_option("--pre", st_pre, "pretrained PSET");
    auto* st_sptv_opt = st_cmd->add_option("--sptv", st_sptvs, "sparse task vector files");
    auto* st_state_opt = st_cmd->add_option("--state", st_state, "stitch state directory");
    auto* st_add_opt = st_cmd->add_option("--add", st_add, "SPTV file to add");
    auto* st_add_id_opt = st_cmd->add_option("--id", st_add_id, "task id for --add");
    auto* st_remove_opt = st_cmd->add_option("--remove", st_remove, "task id to remove");
    auto* st_verify_opt =
        st_cmd->add_flag("--verify", st_verify, "check against a from-scratch stitch");
    auto* st_save_opt = st_cmd->add_option("--save-state", st_save_state, "write state here");
    auto* st_out_opt = st_cmd->add_option("--out,-o", st_out, "merged PSET path");
    st_cmd->add_option("--config", st_config, "resolved-config JSON to replay");

    // ---- merge -----------------------------------------------------------
    auto* mg_cmd = app.add_subcommand("merge", "merge a suite with one method and report");
    std::string mg_suite, mg_method = "lns", mg_out = default_out_dir(), mg_config;
    MergeOptions mo;
    double mg_sparsity_pct = -1.0;
    auto* mg_suite_opt = mg_cmd->add_option("--suite", mg_suite, "suite directory");
    auto* mg_method_opt =
        mg_cmd->add_option("--method", mg_method,
                           "simple | ta | ties | fisher | regmean | lns | lns-dataless");
    auto* mg_alpha_opt = mg_cmd->add_option("--alpha", mo.alpha, "task arithmetic coefficient");
    auto* mg_sweep_opt =
        mg_cmd->add_flag("--alpha-sweep", mo.alpha_sweep, "grid-search alpha on validation");
    auto* mg_ties_k_opt = mg_cmd->add_option("--ties-k", mo.ties_k, "TIES trim percent");
    auto* mg_ties_a_opt = mg_cmd->add_option("--ties-alpha", mo.ties_alpha, "TIES scale");
    auto* mg_sparsity_opt = mg_cmd->add_option(
        "--sparsity", mg_sparsity_pct, "sparsity percent (default: 1 lns, 5 lns-dataless)");
    auto* mg_shots_opt = mg_cmd->add_option("--shots", mo.shots, "examples per class");
    auto* mg_epochs_opt = mg_cmd->add_option("--epochs", mo.epochs, "mask training epochs");
    auto* mg_lambda_opt = mg_cmd->add_option("--lambda", mo.lambda, "L1 coefficient");
    auto* mg_auto_opt = mg_cmd->add_flag("--auto-lambda", mo.auto_lambda, "bisect lambda");
    auto* mg_lr_opt = mg_cmd->add_option("--lr", mo.lr, "score learning rate");
    auto* mg_fisher_opt =
        mg_cmd->add_option("--fisher-samples", mo.fisher_samples, "Fisher sample count");
    auto* mg_gram_opt = mg_cmd->add_option("--gram-samples", mo.gram_samples, "gram sample count");
    auto* mg_ridge_opt = mg_cmd->add_option("--ridge", mo.ridge_rel, "regmean relative ridge");
    auto* mg_seed_opt = mg_cmd->add_option("--seed", mo.seed, "merge seed");
    auto* mg_out_opt = mg_cmd->add_option("--out,-o", mg_out, "output directory");
    mg_cmd->add_option("--config", mg_config, "resolved-config JSON to replay");

    // ---- experiment ------------------------------------------------------
    auto* ex_cmd = app.add_subcommand("experiment", "run a scripted experiment bundle");
    std::string ex_name, ex_out = default_out_dir(), ex_config;
    SuiteParams ex_sp;
    std::map<std::string, CLI::Option*> ex_suite_opts;
    std::vector<uint64_t> ex_seeds = {1, 2, 3};
    std::vector<double> ex_sparsity_grid;
    std::vector<int> ex_shots_grid;
    double ex_trained_pct = -1.0, ex_dataless_pct = -1.0;
    int ex_shots = 64;
    auto* ex_name_opt = ex_cmd->add_option(
        "--name", ex_name,
        "grafting | conflict | sparsity-sweep | shots-sweep | compression | continual | retention");
    attach_suite_flags(ex_cmd, ex_sp, ex_suite_opts);
    auto* ex_seeds_opt = ex_cmd->add_option("--seeds", ex_seeds, "seed list");
    auto* ex_sgrid_opt =
        ex_cmd->add_option("--sparsity-grid", ex_sparsity_grid, "sparsity fractions");
    auto* ex_kgrid_opt = ex_cmd->add_option("--shots-grid", ex_shots_grid, "shot counts");
    auto* ex_tr_opt =
        ex_cmd->add_option("--trained-sparsity", ex_trained_pct, "trained sparsity percent");
    auto* ex_dl_opt =
        ex_cmd->add_option("--dataless-sparsity", ex_dataless_pct, "dataless sparsity percent");
    auto* ex_shots_opt = ex_cmd->add_option("--shots", ex_shots, "examples per class");
    auto* ex_out_opt = ex_cmd->add_option("--out,-o", ex_out, "output directory");
    ex_cmd->add_option("--config", ex_config, "resolved-config JSON to replay");

    try {
        try {
            app.parse(argc, argv);
        } catch (const CLI::ParseError& e) {
            int code = app.exit(e);
            return code == 0 ? 0 : 1;  // usage problems are exit 1
        }

        if (suite_cmd->parsed()) {
            json cfg;
            std::string timestamp = iso_now();
            if (!suite_config.empty()) {
                json file = load_config_file(suite_config);
                cfg = params_of_config(file, "suite");
                absorb_suite(cfg, suite_opts, sp);
                absorb(cfg, "out", suite_out_opt, suite_out);
                if (cfg.contains("timestamp")) timestamp = cfg["timestamp"].get<std::string>();
            }
            json params = sp.to_json();
            params["out"] = suite_out;
            params["timestamp"] = timestamp;
            write_resolved_config(suite_out, "suite", params);
            return cmd_suite(sp, suite_out);
        }

        if (loc_cmd->parsed()) {
            json cfg;
            std::string timestamp = iso_now();
            if (!loc_config.empty()) {
                json file = load_config_file(loc_config);
                cfg = params_of_config(file, "localize");
                absorb(cfg, "suite", loc_suite_opt, loc_suite);
                absorb(cfg, "task", loc_task_opt, loc_task);
                absorb(cfg, "trained", loc_trained_opt, loc_trained);
                absorb(cfg, "dataless", loc_dataless_opt, loc_dataless);
                absorb(cfg, "sparsity_pct", loc_sparsity_opt, loc_sparsity);
                absorb(cfg, "shots", loc_shots_opt, loc_shots);
                absorb(cfg, "epochs", loc_epochs_opt, loc_epochs);
                absorb(cfg, "lambda", loc_lambda_opt, loc_lambda);
                absorb(cfg, "auto_lambda", loc_auto_opt, loc_auto_lambda);
                absorb(cfg, "lr", loc_lr_opt, loc_lr);
                absorb(cfg, "seed", loc_seed_opt, loc_seed);
                absorb(cfg, "out", loc_out_opt, loc_out);
                if (cfg.contains("timestamp")) timestamp = cfg["timestamp"].get<std::string>();
            }
            if (loc_trained == loc_dataless)
                throw mismatch_error("pass exactly one of --trained / --dataless");
            if (loc_suite.empty()) throw mismatch_error("--suite is required");
            if (loc_sparsity < 0.0) loc_sparsity = loc_trained ? 1.0 : 5.0;

            json params;
            params["suite"] = loc_suite;
            params["task"] = loc_task;
            params["trained"] = loc_trained;
            params["dataless"] = loc_dataless;
            params["sparsity_pct"] = loc_sparsity;
            params["shots"] = loc_shots;
            params["epochs"] = loc_epochs;
            params["lambda"] = loc_lambda;
            params["auto_lambda"] = loc_auto_lambda;
            params["lr"] = loc_lr;
            params["seed"] = loc_seed;
            params["out"] = loc_out;
            params["timestamp"] = timestamp;
            write_resolved_config(loc_out, "localize", params);
            return cmd_localize(loc_suite, loc_task, loc_trained, loc_sparsity, loc_shots,
                                loc_epochs, loc_lambda, loc_auto_lambda, loc_lr, loc_seed,
                                loc_out);
        }

        if (st_cmd->parsed()) {
            json cfg;
            std::string timestamp = iso_now();
            if (!st_config.empty()) {
                json file = load_config_file(st_config);
                cfg = params_of_config(file, "stitch");
                absorb(cfg, "pre", st_pre_opt, st_pre);
                absorb(cfg, "sptv", st_sptv_opt, st_sptvs);
                absorb(cfg, "state", st_state_opt, st_state);
                absorb(cfg, "add", st_add_opt, st_add);
                absorb(cfg, "id", st_add_id_opt, st_add_id);
                absorb(cfg, "remove", st_remove_opt, st_remove);
                absorb(cfg, "verify", st_verify_opt, st_verify);
                absorb(cfg, "save_state", st_save_opt, st_save_state);
                absorb(cfg, "out", st_out_opt, st_out);
                if (cfg.contains("timestamp")) timestamp = cfg["timestamp"].get<std::string>();
            }
            if (st_out.empty() && st_save_state.empty() && st_state.empty())
                throw mismatch_error("nothing to do: pass --out, --state or --save-state");

            json params;
            params["pre"] = st_pre;
            params["sptv"] = st_sptvs;
            params["state"] = st_state;
            params["add"] = st_add;
            params["id"] = st_add_id;
            params["remove"] = st_remove;
            params["verify"] = st_verify;
            params["save_state"] = st_save_state;
            params["out"] = st_out;
            params["timestamp"] = timestamp;
            std::string cfg_dir = !st_out.empty() && !fs::path(st_out).parent_path().empty()
                                      ? fs::path(st_out).parent_path().string()
                                      : (!st_state.empty() ? st_state : default_out_dir());
            write_resolved_config(cfg_dir, "stitch", params);
            return cmd_stitch(st_pre, st_sptvs, st_state, st_add, st_add_id, st_remove,
                              st_verify, st_save_state, st_out);
        }

        if (mg_cmd->parsed()) {
            json cfg;
            std::string timestamp = iso_now();
            if (!mg_config.empty()) {
                json file = load_config_file(mg_config);
                cfg = params_of_config(file, "merge");
                absorb(cfg, "suite", mg_suite_opt, mg_suite);
                absorb(cfg, "method", mg_method_opt, mg_method);
                absorb(cfg, "alpha", mg_alpha_opt, mo.alpha);
                absorb(cfg, "alpha_sweep", mg_sweep_opt, mo.alpha_sweep);
                absorb(cfg, "ties_k", mg_ties_k_opt, mo.ties_k);
                absorb(cfg, "ties_alpha", mg_ties_a_opt, mo.ties_alpha);
                absorb(cfg, "sparsity_pct", mg_sparsity_opt, mg_sparsity_pct);
                absorb(cfg, "shots", mg_shots_opt, mo.shots);
                absorb(cfg, "epochs", mg_epochs_opt, mo.epochs);
                absorb(cfg, "lambda", mg_lambda_opt, mo.lambda);
                absorb(cfg, "auto_lambda", mg_auto_opt, mo.auto_lambda);
                absorb(cfg, "lr", mg_lr_opt, mo.lr);
                absorb(cfg, "fisher_samples", mg_fisher_opt, mo.fisher_samples);
                absorb(cfg, "gram_samples", mg_gram_opt, mo.gram_samples);
                absorb(cfg, "ridge_rel", mg_ridge_opt, mo.ridge_rel);
                absorb(cfg, "seed", mg_seed_opt, mo.seed);
                absorb(cfg, "out", mg_out_opt, mg_out);
                if (cfg.contains("timestamp")) timestamp = cfg["timestamp"].get<std::string>();
            }
            if (mg_suite.empty()) throw mismatch_error("--suite is required");
            if (mg_sparsity_pct < 0.0) mg_sparsity_pct = mg_method == "lns-dataless" ? 5.0 : 1.0;
            mo.method = mg_method;
            mo.sparsity = mg_sparsity_pct / 100.0;
            mo.timestamp = timestamp;

            json params;
            params["suite"] = mg_suite;
            params["method"] = mg_method;
            params["alpha"] = mo.alpha;
            params["alpha_sweep"] = mo.alpha_sweep;
            params["ties_k"] = mo.ties_k;
            params["ties_alpha"] = mo.ties_alpha;
            params["sparsity_pct"] = mg_sparsity_pct;
            params["shots"] = mo.shots;
            params["epochs"] = mo.epochs;
            params["lambda"] = mo.lambda;
            params["auto_lambda"] = mo.auto_lambda;
            params["lr"] = mo.lr;
            params["fisher_samples"] = mo.fisher_samples;
            params["gram_samples"] = mo.gram_samples;
            params["ridge_rel"] = mo.ridge_rel;
            params["seed"] = mo.seed;
            params["out"] = mg_out;
            params["timestamp"] = timestamp;
            write_resolved_config(mg_out, "merge", params);
            return cmd_merge(mg_suite, mo, mg_out);
        }

        if (ex_cmd->parsed()) {
            json cfg;
            std::string timestamp = iso_now();
            if (!ex_config.empty()) {
                json file = load_config_file(ex_config);
                cfg = params_of_config(file, "experiment");
                absorb(cfg, "name", ex_name_opt, ex_name);
                if (cfg.contains("suite")) {
                    // suite params absorbed as a block; explicit flags still win
                    SuiteParams from_cfg = SuiteParams::from_json(cfg["suite"]);
                    json sub = from_cfg.to_json();
                    absorb_suite(sub, ex_suite_opts, ex_sp);
                }
                absorb(cfg, "seeds", ex_seeds_opt, ex_seeds);
                absorb(cfg, "sparsity_grid", ex_sgrid_opt, ex_sparsity_grid);
                absorb(cfg, "shots_grid", ex_kgrid_opt, ex_shots_grid);
                absorb(cfg, "trained_sparsity_pct", ex_tr_opt, ex_trained_pct);
                absorb(cfg, "dataless_sparsity_pct", ex_dl_opt, ex_dataless_pct);
                absorb(cfg, "shots", ex_shots_opt, ex_shots);
                absorb(cfg, "out", ex_out_opt, ex_out);
                if (cfg.contains("timestamp")) timestamp = cfg["timestamp"].get<std::string>();
            }
            if (ex_name.empty()) throw mismatch_error("--name is required");
            if (ex_trained_pct < 0.0) ex_trained_pct = 5.0;
            if (ex_dataless_pct < 0.0) ex_dataless_pct = ex_name == "grafting" ? 10.0 : 5.0;

            ExperimentOptions opts;
            opts.name = ex_name;
            opts.suite_cfg = ex_sp.to_config();
            if (ex_name == "conflict") {
                opts.suite_cfg.conflict = true;
                if (ex_suite_opts.at("tasks")->count() == 0 && !cfg.contains("suite"))
                    opts.suite_cfg.n_tasks = 2;
            }
            opts.seeds = ex_seeds;
            if (!ex_sparsity_grid.empty()) opts.sparsity_grid = ex_sparsity_grid;
            if (!ex_shots_grid.empty()) opts.shots_grid = ex_shots_grid;
            opts.trained_sparsity = ex_trained_pct / 100.0;
            opts.dataless_sparsity = ex_dataless_pct / 100.0;
            opts.shots = ex_shots;
            opts.out_dir = ex_out;

            json params;
            params["name"] = ex_name;
            params["suite"] = ex_sp.to_json();
            params["seeds"] = ex_seeds;
            params["sparsity_grid"] = opts.sparsity_grid;
            params["shots_grid"] = opts.shots_grid;
            params["trained_sparsity_pct"] = ex_trained_pct;
            params["dataless_sparsity_pct"] = ex_dataless_pct;
            params["shots"] = ex_shots;
            params["out"] = ex_out;
            params["timestamp"] = timestamp;
            write_resolved_config(ex_out, "experiment", params);
            std::string summary = run_experiment(opts);
            std::cout << summary << "\n";
            return 0;
        }

        return 1;
    } catch (const format_error& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 4;
    } catch (const mismatch_error& e) {
        std::cerr << "input mismatch: " << e.what() << "\n";
        return 3;
    } catch (const numeric_error& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 4;
    }
}
