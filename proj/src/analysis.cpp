#include "lns/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lns/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lns {

namespace {

std::string iso_now() {
    std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

Mask full_or_empty_mask(const TaskVector& tv, bool full) {
    Mask m = make_mask(tv.delta, default_maskable(tv.delta));
    if (full)
        for (auto& mt : m.per_tensor)
            for (uint64_t i = 0; i < mt.numel; ++i) mt.set(i, true);
    return m;
}

}  // namespace

SuiteArtifacts build_suite_artifacts(const SuiteConfig& cfg) {
    SuiteArtifacts art;
    art.cfg = cfg;
    art.suite = gen_task_suite(cfg);
    art.arch = cfg.arch();
    ParamSet init = art.arch.init_params(subseed(cfg.seed, "pretrain-init"));
    art.pre = sgd_finetune(art.arch, init, art.suite.pretrain, cfg.ft_lr, cfg.pre_epochs,
                           cfg.ft_batch, subseed(cfg.seed, "pretrain"));
    for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
        ParamSet ft = sgd_finetune(art.arch, art.pre, art.suite.tasks[t], cfg.ft_lr,
                                   cfg.ft_epochs, cfg.ft_batch,
                                   subseed(cfg.seed, "ft-" + std::to_string(t)));
        art.tvs.push_back(compute_task_vector(art.pre, ft));
        art.ft_acc.push_back(evaluate(art.arch, ft, art.suite.tasks[t].test));
        art.fts.push_back(std::move(ft));
    }
    return art;
}

LocalizeResult localize_task(const SuiteArtifacts& art, size_t task, bool trained,
                             double sparsity, const LocalizeConfig& base_cfg, uint64_t seed) {
    const TaskVector& tv = art.tvs.at(task);
    LocalizeResult out;
    if (sparsity <= 0.0) {
        out.mask = full_or_empty_mask(tv, false);
    } else if (sparsity >= 1.0) {
        // nothing to select at a full budget; both paths return everything
        out.mask = full_or_empty_mask(tv, true);
    } else if (!trained) {
        out.mask = dataless_localize(tv, sparsity * 100.0);
    } else {
        LocalizeConfig cfg = base_cfg;
        cfg.sparsity = sparsity;
        LossContext ctx{art.arch, &art.suite.tasks[task],
                        subseed(seed, "localize-task-" + std::to_string(task))};
        if (cfg.auto_lambda) cfg = lambda_autosearch(tv, art.pre, ctx, cfg);
        out.mask = train_mask(tv, art.pre, ctx, cfg).second;
        out.lambda = cfg.lambda;
    }
    out.sptv = mask_apply(out.mask, tv);
    out.achieved_sparsity = out.mask.sparsity();
    return out;
}

uint64_t MergeReport::config_hash() const {
    uint64_t h = fnv1a64(method.data(), method.size());
    h = fnv1a64(hyperparameters_json.data(), hyperparameters_json.size(), h);
    h = fnv1a64(&seed, sizeof seed, h);
    return h;
}

std::string MergeReport::to_json() const {
    json j;
    j["method"] = method;
    j["hyperparameters"] = json::parse(hyperparameters_json);
    j["per_task"] = per_task;
    j["average"] = average;
    j["pretrain_acc"] = pretrain_acc;
    j["union_fraction"] = union_fraction;
    j["seed"] = seed;
    j["timestamp"] = timestamp;
    char hash[19];
    std::snprintf(hash, sizeof hash, "0x%016llx",
                  static_cast<unsigned long long>(config_hash()));
    j["config_hash"] = hash;
    return j.dump(2);
}

MergeOutcome run_merge(const SuiteArtifacts& art, const MergeOptions& opts) {
    MergeOutcome out;
    json hp;
    double union_fraction = 1.0;  // global methods rewrite every parameter

    auto sweep_alpha = [&](auto merge_with) {
        // validation-accuracy grid search over {0.1, ..., 1.0}
        double best_alpha = 0.1, best_acc = -1.0;
        for (int step = 1; step <= 10; ++step) {
            double alpha = step / 10.0;
            ParamSet candidate = merge_with(alpha);
            double acc = 0.0;
            for (uint32_t t = 0; t < art.cfg.n_tasks; ++t)
                acc += evaluate(art.arch, candidate, art.suite.tasks[t].val);
            acc /= art.cfg.n_tasks;
            if (acc > best_acc) {
                best_acc = acc;
                best_alpha = alpha;
            }
        }
        return best_alpha;
    };

    if (opts.method == "simple") {
        out.merged = simple_average(art.fts);
    } else if (opts.method == "ta") {
        double alpha = opts.alpha;
        if (opts.alpha_sweep)
            alpha = sweep_alpha([&](double a) { return task_arithmetic(art.pre, art.tvs, a); });
        hp["alpha"] = alpha;
        hp["alpha_sweep"] = opts.alpha_sweep;
        out.merged = task_arithmetic(art.pre, art.tvs, alpha);
    } else if (opts.method == "ties") {
        double alpha = opts.ties_alpha;
        if (opts.alpha_sweep)
            alpha = sweep_alpha(
                [&](double a) { return ties_merge(art.pre, art.tvs, opts.ties_k, a); });
        hp["k_percent"] = opts.ties_k;
        hp["alpha"] = alpha;
        hp["alpha_sweep"] = opts.alpha_sweep;
        out.merged = ties_merge(art.pre, art.tvs, opts.ties_k, alpha);
    } else if (opts.method == "fisher") {
        std::vector<FisherDiag> fishers;
        for (uint32_t t = 0; t < art.cfg.n_tasks; ++t)
            fishers.push_back(fisher_estimate(art.arch, art.fts[t], art.suite.tasks[t].train,
                                              opts.fisher_samples));
        hp["samples"] = opts.fisher_samples;
        out.merged = fisher_merge(art.fts, fishers);
    } else if (opts.method == "regmean") {
        std::vector<GramMatrix> grams;
        for (uint32_t t = 0; t < art.cfg.n_tasks; ++t)
            grams.push_back(collect_grams(art.arch, art.fts[t], art.suite.tasks[t].train,
                                          opts.gram_samples));
        hp["samples"] = opts.gram_samples;
        hp["ridge_rel"] = opts.ridge_rel;
        out.merged = regmean_merge(art.fts, grams, opts.ridge_rel);
    } else if (opts.method == "lns" || opts.method == "lns-dataless") {
        bool trained = opts.method == "lns";
        LocalizeConfig lc;
        lc.sparsity = opts.sparsity;
        lc.shots = opts.shots;
        lc.epochs = opts.epochs;
        lc.lambda = opts.lambda;
        lc.lr = opts.lr;
        lc.auto_lambda = opts.auto_lambda;
        for (uint32_t t = 0; t < art.cfg.n_tasks; ++t) {
            LocalizeResult lr = localize_task(art, t, trained, opts.sparsity, lc, opts.seed);
            out.masks.push_back(std::move(lr.mask));
            out.sptvs.push_back(std::move(lr.sptv));
        }
        auto [merged, weights] = stitch(art.pre, out.sptvs);
        out.merged = std::move(merged);
        union_fraction = static_cast<double>(weights.union_support()) /
                         static_cast<double>(art.pre.total_params());
        hp["sparsity"] = opts.sparsity;
        if (trained) {
            hp["shots"] = opts.shots;
            hp["epochs"] = opts.epochs;
            hp["lambda"] = opts.lambda;
            hp["lr"] = opts.lr;
            hp["auto_lambda"] = opts.auto_lambda;
        }
    } else {
        throw mismatch_error("unknown merge method '" + opts.method + "'");
    }

    MergeReport& r = out.report;
    r.method = opts.method;
    r.hyperparameters_json = hp.is_null() ? "{}" : hp.dump();
    for (uint32_t t = 0; t < art.cfg.n_tasks; ++t)
        r.per_task.push_back(evaluate(art.arch, out.merged, art.suite.tasks[t].test));
    r.average = mean(r.per_task);
    r.pretrain_acc = evaluate(art.arch, out.merged, art.suite.pretrain.test);
    r.union_fraction = union_fraction;
    r.seed = opts.seed;
    r.timestamp = opts.timestamp.empty() ? iso_now() : opts.timestamp;
    return out;
}

PairMatrices pairwise_matrices(std::span<const Mask> masks,
                               std::span<const SparseTaskVector> sptvs) {
    if (masks.size() != sptvs.size())
        throw mismatch_error("need one sparse task vector per mask");
    PairMatrices pm;
    pm.n = masks.size();
    pm.jaccard.assign(pm.n * pm.n, 0.0);
    pm.cosine.assign(pm.n * pm.n, 0.0);
    for (size_t i = 0; i < pm.n; ++i) {
        for (size_t j = i; j < pm.n; ++j) {
            double jac = mask_jaccard(masks[i], masks[j]);
            double cos = masked_cosine(sptvs[i], sptvs[j]);
            pm.jaccard[i * pm.n + j] = pm.jaccard[j * pm.n + i] = jac;
            pm.cosine[i * pm.n + j] = pm.cosine[j * pm.n + i] = cos;
        }
    }
    return pm;
}

RetentionResult retention_check(const SuiteArtifacts& art, const ParamSet& merged) {
    RetentionResult r;
    r.pre_acc = evaluate(art.arch, art.pre, art.suite.pretrain.test);
    r.merged_acc = evaluate(art.arch, merged, art.suite.pretrain.test);
    r.delta = r.merged_acc - r.pre_acc;
    return r;
}

std::string csv_escape(const std::string& field) {
    bool needs_quote = field.find_first_of(",\"\r\n") != std::string::npos;
    if (!needs_quote) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += '"';
    return out;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

void write_csv(const std::string& path, std::span<const std::string> header,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw error("cannot open '" + path + "' for writing");
    for (size_t i = 0; i < header.size(); ++i)
        f << (i ? "," : "") << csv_escape(header[i]);
    f << "\r\n";
    for (const auto& row : rows) {
        if (row.size() != header.size())
            throw mismatch_error("CSV row width does not match the header");
        for (size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << csv_escape(row[i]);
        f << "\r\n";
    }
    if (!f) throw error("short write to '" + path + "'");
}

namespace {

using Rows = std::vector<std::vector<std::string>>;

void dump_summary(const std::string& out_dir, const json& summary) {
    std::ofstream f(fs::path(out_dir) / "summary.json");
    if (!f) throw error("cannot write summary.json in '" + out_dir + "'");
    f << summary.dump(2) << "\n";
}

json experiment_header(const ExperimentOptions& opts) {
    json j;
    j["experiment"] = opts.name;
    j["seeds"] = opts.seeds;
    j["n_tasks"] = opts.suite_cfg.n_tasks;
    return j;
}

std::string run_grafting(const ExperimentOptions& opts) {
    Rows rows;
    std::vector<double> trained_ratios, dataless_ratios;
    LocalizeConfig lc;
    lc.shots = opts.shots;
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        SuiteArtifacts art = build_suite_artifacts(cfg);
        for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
            LocalizeResult tr = localize_task(art, t, true, opts.trained_sparsity, lc, seed);
            LocalizeResult dl = localize_task(art, t, false, opts.dataless_sparsity, lc, seed);
            double acc_tr = evaluate(art.arch, graft(art.pre, tr.sptv), art.suite.tasks[t].test);
            double acc_dl = evaluate(art.arch, graft(art.pre, dl.sptv), art.suite.tasks[t].test);
            trained_ratios.push_back(acc_tr / art.ft_acc[t]);
            dataless_ratios.push_back(acc_dl / art.ft_acc[t]);
            rows.push_back({std::to_string(seed), std::to_string(t), fmt_double(art.ft_acc[t]),
                            fmt_double(acc_tr), fmt_double(acc_tr / art.ft_acc[t]),
                            fmt_double(acc_dl), fmt_double(acc_dl / art.ft_acc[t])});
        }
    }
    std::vector<std::string> header = {"seed",        "task",          "finetuned_acc",
                                       "trained_acc", "trained_ratio", "dataless_acc",
                                       "dataless_ratio"};
    write_csv((fs::path(opts.out_dir) / "grafting.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["trained_sparsity"] = opts.trained_sparsity;
    summary["dataless_sparsity"] = opts.dataless_sparsity;
    summary["median_trained_ratio"] = median(trained_ratios);
    summary["median_dataless_ratio"] = median(dataless_ratios);
    summary["min_trained_ratio"] = *std::min_element(trained_ratios.begin(), trained_ratios.end());
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_conflict(const ExperimentOptions& opts) {
    Rows rows;
    std::vector<double> degradation0, degradation1, recovery;
    LocalizeConfig lc;
    lc.shots = opts.shots;
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        cfg.conflict = true;
        if (cfg.n_tasks < 2) cfg.n_tasks = 2;
        SuiteArtifacts art = build_suite_artifacts(cfg);

        std::vector<ParamSet> pair = {art.fts[0], art.fts[1]};
        ParamSet avg = simple_average(pair);
        double avg0 = evaluate(art.arch, avg, art.suite.tasks[0].test);
        double avg1 = evaluate(art.arch, avg, art.suite.tasks[1].test);

        std::vector<SparseTaskVector> sptvs;
        for (uint32_t t = 0; t < 2; ++t)
            sptvs.push_back(localize_task(art, t, true, opts.trained_sparsity, lc, seed).sptv);
        ParamSet stitched = stitch(art.pre, sptvs).first;
        double st0 = evaluate(art.arch, stitched, art.suite.tasks[0].test);
        double st1 = evaluate(art.arch, stitched, art.suite.tasks[1].test);

        double gap = 0.5 * ((art.ft_acc[0] - avg0) + (art.ft_acc[1] - avg1));
        double rec = 0.5 * ((st0 - avg0) + (st1 - avg1));
        degradation0.push_back(art.ft_acc[0] - avg0);
        degradation1.push_back(art.ft_acc[1] - avg1);
        recovery.push_back(gap > 0 ? rec / gap : 0.0);
        rows.push_back({std::to_string(seed), fmt_double(art.ft_acc[0]), fmt_double(art.ft_acc[1]),
                        fmt_double(avg0), fmt_double(avg1), fmt_double(st0), fmt_double(st1),
                        fmt_double(gap), fmt_double(rec)});
    }
    std::vector<std::string> header = {"seed",     "ft_acc_0",   "ft_acc_1",
                                       "avg_acc_0", "avg_acc_1", "stitched_acc_0",
                                       "stitched_acc_1", "mean_gap", "mean_recovered"};
    write_csv((fs::path(opts.out_dir) / "conflict.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["median_degradation_task0"] = median(degradation0);
    summary["median_degradation_task1"] = median(degradation1);
    summary["median_recovered_fraction"] = median(recovery);
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_sparsity_sweep(const ExperimentOptions& opts) {
    Rows rows;
    LocalizeConfig lc;
    lc.shots = opts.shots;
    std::vector<std::string> header = {"method", "sparsity", "seed", "merged_avg_acc"};
    for (uint32_t t = 0; t < opts.suite_cfg.n_tasks; ++t)
        header.push_back("grafted_acc_task" + std::to_string(t));

    json curves = json::object();
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        SuiteArtifacts art = build_suite_artifacts(cfg);
        for (bool trained : {true, false}) {
            std::string method = trained ? "trained" : "dataless";
            for (double s : opts.sparsity_grid) {
                std::vector<SparseTaskVector> sptvs;
                std::vector<std::string> row = {method, fmt_double(s), std::to_string(seed)};
                std::vector<std::string> graft_cells;
                for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
                    LocalizeResult lr = localize_task(art, t, trained, s, lc, seed);
                    double acc =
                        evaluate(art.arch, graft(art.pre, lr.sptv), art.suite.tasks[t].test);
                    graft_cells.push_back(fmt_double(acc));
                    sptvs.push_back(std::move(lr.sptv));
                }
                ParamSet merged = stitch(art.pre, sptvs).first;
                double avg = 0.0;
                for (uint32_t t = 0; t < cfg.n_tasks; ++t)
                    avg += evaluate(art.arch, merged, art.suite.tasks[t].test);
                avg /= cfg.n_tasks;
                row.push_back(fmt_double(avg));
                row.insert(row.end(), graft_cells.begin(), graft_cells.end());
                rows.push_back(std::move(row));
                curves[method][fmt_double(s)].push_back(avg);
            }
        }
    }
    write_csv((fs::path(opts.out_dir) / "sparsity_sweep.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["grid"] = opts.sparsity_grid;
    for (auto& [method, by_s] : curves.items()) {
        double best_s = 0.0, best_acc = -1.0;
        for (auto& [s, accs] : by_s.items()) {
            double med = median(accs.get<std::vector<double>>());
            summary["median_merged_acc"][method][s] = med;
            if (med > best_acc) {
                best_acc = med;
                best_s = std::stod(s);
            }
        }
        summary["best_sparsity"][method] = best_s;
    }
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_shots_sweep(const ExperimentOptions& opts) {
    Rows rows;
    LocalizeConfig lc;
    json curves = json::object();
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        SuiteArtifacts art = build_suite_artifacts(cfg);

        MergeOptions dl;
        dl.method = "lns-dataless";
        dl.sparsity = opts.dataless_sparsity;
        dl.seed = seed;
        dl.timestamp = "-";
        double dl_acc = run_merge(art, dl).report.average;
        rows.push_back({"dataless", "0", std::to_string(seed), fmt_double(dl_acc)});
        curves["dataless"]["0"].push_back(dl_acc);

        for (int shots : opts.shots_grid) {
            MergeOptions mo;
            mo.method = "lns";
            mo.sparsity = opts.trained_sparsity;
            mo.shots = shots;
            mo.seed = seed;
            mo.timestamp = "-";
            double acc = run_merge(art, mo).report.average;
            rows.push_back({"trained", std::to_string(shots), std::to_string(seed),
                            fmt_double(acc)});
            curves["trained"][std::to_string(shots)].push_back(acc);
        }
    }
    std::vector<std::string> header = {"method", "shots", "seed", "merged_avg_acc"};
    write_csv((fs::path(opts.out_dir) / "shots_sweep.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["shots_grid"] = opts.shots_grid;
    for (auto& [method, by_k] : curves.items())
        for (auto& [k, accs] : by_k.items())
            summary["median_merged_acc"][method][k] = median(accs.get<std::vector<double>>());
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_compression(const ExperimentOptions& opts) {
    // synthetic million-parameter checkpoint at 1% mask sparsity
    Rng rng(subseed(opts.seeds.empty() ? 0 : opts.seeds[0], "compression"));
    std::vector<Tensor> ts;
    for (int t = 0; t < 4; ++t) {
        Tensor tensor;
        tensor.name = "layer" + std::to_string(t) + ".w";
        tensor.shape = {500, 500};
        tensor.data.resize(250000);
        for (auto& v : tensor.data) v = static_cast<float>(rng.normal() * 0.1);
        ts.push_back(std::move(tensor));
    }
    ParamSet pre(std::move(ts));
    std::vector<Tensor> fts;
    for (const Tensor& t : pre.tensors()) {
        Tensor f = t;
        for (auto& v : f.data) v += static_cast<float>(rng.normal() * 0.01);
        fts.push_back(std::move(f));
    }
    ParamSet ft = snap_to_base(pre, ParamSet(std::move(fts)));
    TaskVector tv = compute_task_vector(pre, ft);
    Mask m = dataless_localize(tv, 1.0);
    SparseTaskVector sptv = mask_apply(m, tv);

    std::string dense_path = (fs::path(opts.out_dir) / "dense_delta.pset").string();
    std::string sparse_path = (fs::path(opts.out_dir) / "masked_delta.sptv").string();
    save_pset(tv.delta, dense_path);
    save_sptv(sptv, sparse_path);
    SparseTaskVector back = load_sptv(sparse_path);
    bool roundtrip_ok = serialize_sptv(back) == serialize_sptv(sptv);

    CompressionReport cr = compression_report(tv.delta, sptv);
    Rows rows = {{std::to_string(pre.total_params()), fmt_double(m.sparsity()),
                  std::to_string(cr.dense_bytes), std::to_string(cr.sparse_bytes),
                  fmt_double(cr.ratio), roundtrip_ok ? "1" : "0"}};
    std::vector<std::string> header = {"params",       "mask_sparsity", "dense_bytes",
                                       "sparse_bytes", "ratio",         "roundtrip_ok"};
    write_csv((fs::path(opts.out_dir) / "compression.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["params"] = pre.total_params();
    summary["dense_bytes"] = cr.dense_bytes;
    summary["sparse_bytes"] = cr.sparse_bytes;
    summary["ratio"] = cr.ratio;
    summary["roundtrip_ok"] = roundtrip_ok;
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_continual(const ExperimentOptions& opts) {
    Rows rows;
    LocalizeConfig lc;
    lc.shots = opts.shots;
    std::vector<double> ms_step2, ms_lastgap;
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        SuiteArtifacts art = build_suite_artifacts(cfg);
        std::vector<SparseTaskVector> sptvs;
        for (uint32_t t = 0; t < cfg.n_tasks; ++t)
            sptvs.push_back(localize_task(art, t, true, opts.trained_sparsity, lc, seed).sptv);

        StitchState state(art.pre);
        std::vector<double> step_ms;
        for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
            auto t0 = std::chrono::steady_clock::now();
            state.add(t, sptvs[t]);
            ParamSet merged = state.merged();
            auto t1 = std::chrono::steady_clock::now();
            double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            step_ms.push_back(ms);

            std::vector<SparseTaskVector> prefix(sptvs.begin(), sptvs.begin() + t + 1);
            bool identical = stitch(art.pre, prefix).first.fingerprint() == merged.fingerprint();
            double avg = 0.0;
            for (uint32_t u = 0; u <= t; ++u)
                avg += evaluate(art.arch, merged, art.suite.tasks[u].test);
            avg /= (t + 1);
            rows.push_back({std::to_string(seed), std::to_string(t + 1), fmt_double(avg),
                            fmt_double(ms), identical ? "1" : "0"});
        }
        if (step_ms.size() >= 2) {
            ms_step2.push_back(step_ms[1]);
            ms_lastgap.push_back(step_ms.back());
        }
    }
    std::vector<std::string> header = {"seed", "tasks_merged", "avg_acc", "ms_per_add",
                                       "bit_identical"};
    write_csv((fs::path(opts.out_dir) / "continual.csv").string(), header, rows);
    json summary = experiment_header(opts);
    summary["median_ms_step2"] = median(ms_step2);
    summary["median_ms_last_step"] = median(ms_lastgap);
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

std::string run_retention(const ExperimentOptions& opts) {
    Rows rows;
    json deltas = json::object();
    for (uint64_t seed : opts.seeds) {
        SuiteConfig cfg = opts.suite_cfg;
        cfg.seed = seed;
        SuiteArtifacts art = build_suite_artifacts(cfg);
        std::vector<MergeOptions> methods;
        for (const char* name : {"simple", "ta", "ties", "lns", "lns-dataless"}) {
            MergeOptions mo;
            mo.method = name;
            mo.sparsity = std::string(name) == "lns-dataless" ? opts.dataless_sparsity
                                                              : opts.trained_sparsity;
            mo.shots = opts.shots;
            mo.seed = seed;
            mo.timestamp = "-";
            methods.push_back(mo);
        }
        for (const MergeOptions& mo : methods) {
            MergeOutcome outcome = run_merge(art, mo);
            RetentionResult r = retention_check(art, outcome.merged);
            rows.push_back({mo.method, std::to_string(seed), fmt_double(r.pre_acc),
                            fmt_double(r.merged_acc), fmt_double(r.delta),
                            fmt_double(outcome.report.union_fraction),
                            fmt_double(outcome.report.average)});
            deltas[mo.method].push_back(r.delta);
        }
    }
    std::vector<std::string> header = {"method",     "seed",  "pretrain_acc", "merged_acc",
                                       "delta",      "union_fraction", "merged_avg_acc"};
    write_csv((fs::path(opts.out_dir) / "retention.csv").string(), header, rows);
    json summary = experiment_header(opts);
    for (auto& [method, ds] : deltas.items())
        summary["median_delta"][method] = median(ds.get<std::vector<double>>());
    dump_summary(opts.out_dir, summary);
    return summary.dump(2);
}

}  // namespace

std::string run_experiment(const ExperimentOptions& opts) {
    fs::create_directories(opts.out_dir);
    if (opts.name == "grafting") return run_grafting(opts);
    if (opts.name == "conflict") return run_conflict(opts);
    if (opts.name == "sparsity-sweep") return run_sparsity_sweep(opts);
    if (opts.name == "shots-sweep") return run_shots_sweep(opts);
    if (opts.name == "compression") return run_compression(opts);
    if (opts.name == "continual") return run_continual(opts);
    if (opts.name == "retention") return run_retention(opts);
    throw mismatch_error("unknown experiment '" + opts.name + "'");
}

}  // namespace lns
