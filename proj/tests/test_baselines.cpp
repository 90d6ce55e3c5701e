#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lns/baselines.hpp"
#include "lns/rng.hpp"

using namespace lns;

namespace {

ParamSet make_pset(std::vector<std::pair<std::string, std::vector<float>>> entries) {
    std::vector<Tensor> ts;
    for (auto& [name, data] : entries)
        ts.push_back(Tensor{name, {static_cast<uint32_t>(data.size())}, data});
    return ParamSet(std::move(ts));
}

ParamSet random_pset(Rng& rng, size_t n, double scale = 1.0) {
    std::vector<float> data(n);
    for (auto& v : data) v = static_cast<float>(rng.normal() * scale);
    return make_pset({{"w", data}});
}

ParamSet perturbed(Rng& rng, const ParamSet& pre, double scale) {
    std::vector<Tensor> ts;
    for (const Tensor& t : pre.tensors()) {
        Tensor f = t;
        for (auto& v : f.data) v += static_cast<float>(rng.normal() * scale);
        ts.push_back(std::move(f));
    }
    return snap_to_base(pre, ParamSet(std::move(ts)));
}

bool near(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max({std::abs(a), std::abs(b), 1.0}); }

}  // namespace

TEST_CASE("simple_average") {
    SUBCASE("one model is the identity") {
        auto p = make_pset({{"w", {1.5f, -2.0f}}});
        auto out = simple_average(std::span<const ParamSet>(&p, 1));
        CHECK(out.fingerprint() == p.fingerprint());
    }
    SUBCASE("two models average coordinate-wise") {
        std::vector<ParamSet> ms = {make_pset({{"w", {0.0f}}}), make_pset({{"w", {2.0f}}})};
        CHECK(simple_average(ms).tensors()[0].data[0] == 1.0f);
    }
    SUBCASE("k copies of p average to p bit-exactly") {
        Rng rng(1);
        auto p = random_pset(rng, 37);
        std::vector<ParamSet> ms(5, p);
        CHECK(simple_average(ms).fingerprint() == p.fingerprint());
    }
    SUBCASE("layout mismatch is rejected") {
        std::vector<ParamSet> ms = {make_pset({{"w", {0.0f}}}), make_pset({{"v", {2.0f}}})};
        CHECK_THROWS_AS(simple_average(ms), mismatch_error);
    }
}

TEST_CASE("task_arithmetic") {
    Rng rng(2);
    ParamSet pre = random_pset(rng, 64);
    ParamSet ft = perturbed(rng, pre, 0.3);
    TaskVector tv = compute_task_vector(pre, ft);

    SUBCASE("alpha 0 returns the pretrained model") {
        auto out = task_arithmetic(pre, std::span<const TaskVector>(&tv, 1), 0.0);
        CHECK(out.fingerprint() == pre.fingerprint());
    }
    SUBCASE("single task at alpha 1 reproduces the finetuned model") {
        auto out = task_arithmetic(pre, std::span<const TaskVector>(&tv, 1), 1.0);
        CHECK(out.fingerprint() == ft.fingerprint());
    }
    SUBCASE("linear in alpha") {
        auto a = task_arithmetic(pre, std::span<const TaskVector>(&tv, 1), 0.3);
        for (size_t i = 0; i < 64; ++i) {
            double expect = static_cast<double>(pre.tensors()[0].data[i]) +
                            0.3 * static_cast<double>(tv.delta.tensors()[0].data[i]);
            CHECK(near(a.tensors()[0].data[i], expect, 1e-6));
        }
    }
    SUBCASE("fingerprint mismatch is rejected") {
        ParamSet other = random_pset(rng, 64);
        CHECK_THROWS_AS(task_arithmetic(other, std::span<const TaskVector>(&tv, 1), 0.4),
                        mismatch_error);
    }
}

TEST_CASE("ties_merge hand cases") {
    // pre = 0 so merged values equal the elected means directly
    ParamSet pre = make_pset({{"w", {0.0f, 0.0f, 0.0f}}});
    auto tv_from = [&](std::vector<float> vals) {
        return compute_task_vector(pre, make_pset({{"w", std::move(vals)}}));
    };
    std::vector<TaskVector> tvs;
    // coordinate 0: values {0.4, -0.1, 0.3} -> total 0.6 -> elect + -> mean 0.35
    // coordinate 1: values {0.2, -0.2, 0.0} -> zero total -> delta 0
    // coordinate 2: values {-1.0, -3.0, 1.0} -> total -3 -> elect - -> mean -2
    tvs.push_back(tv_from({0.4f, 0.2f, -1.0f}));
    tvs.push_back(tv_from({-0.1f, -0.2f, -3.0f}));
    tvs.push_back(tv_from({0.3f, 0.0f, 1.0f}));

    ParamSet out = ties_merge(pre, tvs, 100.0, 1.0);
    CHECK(out.tensors()[0].data[0] == doctest::Approx(0.35).epsilon(1e-7));
    CHECK(out.tensors()[0].data[1] == 0.0f);
    CHECK(out.tensors()[0].data[2] == doctest::Approx(-2.0).epsilon(1e-7));
}

TEST_CASE("ties_merge single task with k=100 alpha=1 is the finetuned model") {
    Rng rng(3);
    ParamSet pre = random_pset(rng, 100);
    ParamSet ft = perturbed(rng, pre, 0.4);
    TaskVector tv = compute_task_vector(pre, ft);
    ParamSet out = ties_merge(pre, std::span<const TaskVector>(&tv, 1), 100.0, 1.0);
    CHECK(out.fingerprint() == ft.fingerprint());
}

TEST_CASE("ties_merge randomized against an independent per-coordinate oracle") {
    Rng rng(4);
    size_t n = 1000;
    ParamSet pre = random_pset(rng, n);
    std::vector<ParamSet> fts;
    std::vector<TaskVector> tvs;
    for (int t = 0; t < 5; ++t) {
        fts.push_back(perturbed(rng, pre, 0.5));
        tvs.push_back(compute_task_vector(pre, fts.back()));
    }
    double k = 40.0, alpha = 0.7;
    ParamSet out = ties_merge(pre, tvs, k, alpha);

    // oracle: trim by explicit magnitude sort per task, then elect and mean
    size_t keep = static_cast<size_t>(std::llround(k / 100.0 * static_cast<double>(n)));
    std::vector<std::vector<double>> trimmed(5, std::vector<double>(n, 0.0));
    for (int t = 0; t < 5; ++t) {
        const auto& d = tvs[t].delta.tensors()[0].data;
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            float ma = std::abs(d[a]), mb = std::abs(d[b]);
            if (ma != mb) return ma > mb;
            return a < b;
        });
        for (size_t i = 0; i < keep; ++i) trimmed[t][order[i]] = d[order[i]];
    }
    size_t changed = 0;
    for (size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (int t = 0; t < 5; ++t) total += trimmed[t][i];
        double expect;
        if (total == 0.0) {
            expect = pre.tensors()[0].data[i];
        } else {
            double mass = 0.0;
            int cnt = 0;
            for (int t = 0; t < 5; ++t) {
                double v = trimmed[t][i];
                if ((total > 0 && v > 0) || (total < 0 && v < 0)) {
                    mass += v;
                    ++cnt;
                    // every contributing value carries the elected sign
                    CHECK(((total > 0) == (v > 0)));
                }
            }
            expect = static_cast<double>(pre.tensors()[0].data[i]) + alpha * mass / cnt;
            ++changed;
        }
        CHECK(out.tensors()[0].data[i] == static_cast<float>(expect));
    }
    CHECK(changed > 0);
}

TEST_CASE("fisher_estimate") {
    ToyArch arch{4, 8, 1, 3};
    SuiteConfig cfg;
    cfg.n_tasks = 1;
    cfg.d_in = 4;
    cfg.hidden = 8;
    cfg.blocks = 1;
    cfg.classes = 3;
    cfg.train_per_class = 24;
    cfg.val_per_class = 8;
    cfg.test_per_class = 8;
    cfg.seed = 11;
    TaskSuite suite = gen_task_suite(cfg);
    ParamSet p = arch.init_params(11);

    SUBCASE("entries are nonnegative and deterministic") {
        FisherDiag f1 = fisher_estimate(arch, p, suite.tasks[0].train, 32);
        FisherDiag f2 = fisher_estimate(arch, p, suite.tasks[0].train, 32);
        CHECK(f1.samples == 32);
        CHECK(f1.values.fingerprint() == f2.values.fingerprint());
        for (const Tensor& t : f1.values.tensors())
            for (float v : t.data) CHECK(v >= 0.0f);
    }
    SUBCASE("duplicated sample set gives the identical estimate") {
        Split dup;
        const Split& s = suite.tasks[0].train;
        size_t m = 16;
        dup.n = 2 * m;
        dup.x.assign(s.x.begin(), s.x.begin() + static_cast<long>(m * 4));
        dup.x.insert(dup.x.end(), s.x.begin(), s.x.begin() + static_cast<long>(m * 4));
        dup.y.assign(s.y.begin(), s.y.begin() + static_cast<long>(m));
        dup.y.insert(dup.y.end(), s.y.begin(), s.y.begin() + static_cast<long>(m));
        FisherDiag fa = fisher_estimate(arch, p, dup, 2 * m);
        Split half;
        half.n = m;
        half.x.assign(s.x.begin(), s.x.begin() + static_cast<long>(m * 4));
        half.y.assign(s.y.begin(), s.y.begin() + static_cast<long>(m));
        FisherDiag fb = fisher_estimate(arch, p, half, m);
        for (size_t ti = 0; ti < fa.values.tensors().size(); ++ti)
            for (size_t i = 0; i < fa.values.tensors()[ti].data.size(); ++i)
                CHECK(near(fa.values.tensors()[ti].data[i], fb.values.tensors()[ti].data[i],
                           1e-6));
    }
    SUBCASE("near-zero Fisher at a trained optimum") {
        ParamSet trained = sgd_finetune(arch, p, suite.tasks[0], 0.2, 250, 8, 11);
        FisherDiag f = fisher_estimate(arch, trained, suite.tasks[0].train, 32);
        float max_v = 0.0f;
        for (const Tensor& t : f.values.tensors())
            for (float v : t.data) max_v = std::max(max_v, v);
        CHECK(max_v <= 1e-4f);
    }
    SUBCASE("empty data is an error") {
        Split empty;
        CHECK_THROWS_AS(fisher_estimate(arch, p, empty, 8), mismatch_error);
    }
}

TEST_CASE("fisher_merge degeneracies") {
    Rng rng(5);
    ParamSet a = random_pset(rng, 50);
    ParamSet b = random_pset(rng, 50);
    std::vector<ParamSet> ms = {a, b};

    auto fisher_of = [&](float v) {
        std::vector<float> data(50, v);
        return FisherDiag{make_pset({{"w", data}}), 1};
    };

    SUBCASE("uniform fishers reduce to the simple average") {
        std::vector<FisherDiag> fs = {fisher_of(0.7f), fisher_of(0.7f)};
        ParamSet merged = fisher_merge(ms, fs);
        ParamSet mean = simple_average(ms);
        for (size_t i = 0; i < 50; ++i)
            CHECK(near(merged.tensors()[0].data[i], mean.tensors()[0].data[i], 1e-6));
    }
    SUBCASE("one-hot fisher picks that model") {
        std::vector<FisherDiag> fs = {fisher_of(1.0f), fisher_of(0.0f)};
        ParamSet merged = fisher_merge(ms, fs);
        for (size_t i = 0; i < 50; ++i)
            CHECK(near(merged.tensors()[0].data[i], a.tensors()[0].data[i], 1e-6));
    }
    SUBCASE("random case matches the per-coordinate formula") {
        std::vector<float> fa(50), fb(50);
        for (auto& v : fa) v = static_cast<float>(rng.uniform());
        for (auto& v : fb) v = static_cast<float>(rng.uniform());
        std::vector<FisherDiag> fs = {FisherDiag{make_pset({{"w", fa}}), 1},
                                      FisherDiag{make_pset({{"w", fb}}), 1}};
        double eps = 1e-8;
        ParamSet merged = fisher_merge(ms, fs, eps);
        for (size_t i = 0; i < 50; ++i) {
            double expect = ((fa[i] + eps) * a.tensors()[0].data[i] +
                             (fb[i] + eps) * b.tensors()[0].data[i]) /
                            (fa[i] + fb[i] + 2 * eps);
            CHECK(merged.tensors()[0].data[i] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("regmean_merge") {
    ToyArch arch{4, 6, 1, 3};
    SuiteConfig cfg;
    cfg.n_tasks = 2;
    cfg.d_in = 4;
    cfg.hidden = 6;
    cfg.blocks = 1;
    cfg.classes = 3;
    cfg.train_per_class = 32;
    cfg.val_per_class = 8;
    cfg.test_per_class = 8;
    cfg.seed = 21;
    TaskSuite suite = gen_task_suite(cfg);
    ParamSet pre = arch.init_params(21);
    ParamSet m0 = sgd_finetune(arch, pre, suite.tasks[0], 0.05, 10, 8, 1);
    ParamSet m1 = sgd_finetune(arch, pre, suite.tasks[1], 0.05, 10, 8, 2);
    std::vector<ParamSet> ms = {m0, m1};

    SUBCASE("identical grams without ridge reduce affine layers to the simple average") {
        // full-rank synthetic grams (collected ones can be singular when a
        // hidden unit is dead across the sample, which is the ridge's job)
        GramMatrix g = collect_grams(arch, m0, suite.tasks[0].train, 64);
        Rng rng(77);
        for (auto& layer : g.layers) {
            uint32_t d = layer.dim;
            std::vector<double> a(static_cast<size_t>(d) * d);
            for (auto& v : a) v = rng.normal();
            for (uint32_t r = 0; r < d; ++r)
                for (uint32_t c = 0; c < d; ++c) {
                    double s = r == c ? static_cast<double>(d) : 0.0;
                    for (uint32_t k = 0; k < d; ++k) s += a[r * d + k] * a[c * d + k];
                    layer.g[r * d + c] = s;
                }
        }
        std::vector<GramMatrix> gs = {g, g};
        ParamSet merged = regmean_merge(ms, gs, 0.0);
        ParamSet mean = simple_average(ms);
        for (size_t ti = 0; ti < merged.tensors().size(); ++ti)
            for (size_t i = 0; i < merged.tensors()[ti].data.size(); ++i)
                CHECK(near(merged.tensors()[ti].data[i], mean.tensors()[ti].data[i], 1e-5));
    }
    SUBCASE("single model returns its affine weights within the ridge perturbation") {
        // isotropic grams: the ridge then shrinks weights by exactly
        // ridge/(1+ridge) < 1e-3 relative (rank-deficient grams instead
        // zero out never-activated input directions, which is intended)
        GramMatrix g = collect_grams(arch, m0, suite.tasks[0].train, 64);
        for (auto& layer : g.layers) {
            std::fill(layer.g.begin(), layer.g.end(), 0.0);
            for (uint32_t r = 0; r < layer.dim; ++r) layer.g[r * layer.dim + r] = 10.0;
        }
        std::vector<ParamSet> one = {m0};
        std::vector<GramMatrix> gs = {g};
        ParamSet merged = regmean_merge(one, gs, 1e-3);
        for (size_t ti = 0; ti < merged.tensors().size(); ++ti)
            for (size_t i = 0; i < merged.tensors()[ti].data.size(); ++i)
                CHECK(near(merged.tensors()[ti].data[i], m0.tensors()[ti].data[i], 1e-3));
    }
    SUBCASE("LayerNorm tensors are merged by simple averaging") {
        GramMatrix g0 = collect_grams(arch, m0, suite.tasks[0].train, 64);
        GramMatrix g1 = collect_grams(arch, m1, suite.tasks[1].train, 64);
        std::vector<GramMatrix> gs = {g0, g1};
        ParamSet merged = regmean_merge(ms, gs, 1e-3);
        ParamSet mean = simple_average(ms);
        for (size_t ti = 0; ti < merged.tensors().size(); ++ti) {
            const std::string& name = merged.tensors()[ti].name;
            if (name.find(".ln.") == std::string::npos) continue;
            CHECK(merged.tensors()[ti].data == mean.tensors()[ti].data);
        }
    }
    SUBCASE("2x2 layer matches an explicit closed-form solve") {
        // one affine layer w [1,2], b [1]: A x = B with dim 3
        ParamSet pa = ParamSet({Tensor{"lin.w", {1, 2}, {1.0f, 2.0f}},
                                Tensor{"lin.b", {1}, {0.5f}}});
        ParamSet pb = ParamSet({Tensor{"lin.w", {1, 2}, {-1.0f, 0.0f}},
                                Tensor{"lin.b", {1}, {1.5f}}});
        // grams: ga = diag(2,1,1), gb = diag(1,3,1)
        GramMatrix ga, gb;
        ga.layers.push_back({"lin.w", 3, {2, 0, 0, 0, 1, 0, 0, 0, 1}});
        gb.layers.push_back({"lin.w", 3, {1, 0, 0, 0, 3, 0, 0, 0, 1}});
        std::vector<ParamSet> mm = {pa, pb};
        std::vector<GramMatrix> gg = {ga, gb};
        ParamSet merged = regmean_merge(mm, gg, 0.0);
        // x = (ga+gb)^-1 (ga xa + gb xb), diagonal: per row r
        // w0: (2*1 + 1*(-1)) / 3 = 1/3 ; w1: (1*2 + 3*0) / 4 = 0.5 ; b: (0.5 + 1.5)/2 = 1
        CHECK(merged.find("lin.w")->data[0] == doctest::Approx(1.0 / 3.0));
        CHECK(merged.find("lin.w")->data[1] == doctest::Approx(0.5));
        CHECK(merged.find("lin.b")->data[0] == doctest::Approx(1.0));
    }
    SUBCASE("singular system without ridge names the layer") {
        ParamSet pa = ParamSet({Tensor{"lin.w", {1, 2}, {1.0f, 2.0f}},
                                Tensor{"lin.b", {1}, {0.5f}}});
        GramMatrix ga;
        ga.layers.push_back({"lin.w", 3, std::vector<double>(9, 0.0)});
        std::vector<ParamSet> mm = {pa};
        std::vector<GramMatrix> gg = {ga};
        CHECK_THROWS_WITH_AS(regmean_merge(mm, gg, 0.0), doctest::Contains("lin.w"),
                             numeric_error);
    }
}

TEST_CASE("gram matrices roundtrip through PSET packaging") {
    ToyArch arch{4, 6, 2, 3};
    SuiteConfig cfg;
    cfg.n_tasks = 1;
    cfg.d_in = 4;
    cfg.hidden = 6;
    cfg.blocks = 2;
    cfg.classes = 3;
    cfg.train_per_class = 16;
    cfg.val_per_class = 8;
    cfg.test_per_class = 8;
    cfg.seed = 31;
    TaskSuite suite = gen_task_suite(cfg);
    ParamSet p = arch.init_params(31);
    GramMatrix g = collect_grams(arch, p, suite.tasks[0].train, 32);
    CHECK(g.layers.size() == 3);  // two blocks + head
    // PSD sanity: diagonals nonnegative, symmetric
    for (const auto& layer : g.layers)
        for (uint32_t a = 0; a < layer.dim; ++a) {
            CHECK(layer.g[a * layer.dim + a] >= 0.0);
            for (uint32_t c = 0; c < layer.dim; ++c)
                CHECK(layer.g[a * layer.dim + c] ==
                      doctest::Approx(layer.g[c * layer.dim + a]).epsilon(1e-12));
        }

    GramMatrix back = gram_from_pset(gram_to_pset(g));
    CHECK(back.samples == g.samples);
    REQUIRE(back.layers.size() == g.layers.size());
    for (size_t li = 0; li < g.layers.size(); ++li) {
        CHECK(back.layers[li].weight_name == g.layers[li].weight_name);
        CHECK(back.layers[li].dim == g.layers[li].dim);
    }
}
