#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lns/localizer.hpp"
#include "lns/rng.hpp"

using namespace lns;

namespace {

ParamSet single_tensor(const std::string& name, std::vector<float> data) {
    std::vector<Tensor> ts;
    ts.push_back(Tensor{name, {static_cast<uint32_t>(data.size())}, std::move(data)});
    return ParamSet(std::move(ts));
}

TaskVector tv_of(std::vector<float> delta) {
    ParamSet zero = single_tensor("w", std::vector<float>(delta.size(), 0.0f));
    ParamSet ft = single_tensor("w", std::move(delta));
    return compute_task_vector(zero, ft);
}

std::vector<bool> bits_of(const Mask& m, size_t tensor = 0) {
    std::vector<bool> out;
    for (uint64_t i = 0; i < m.per_tensor[tensor].numel; ++i)
        out.push_back(m.per_tensor[tensor].get(i));
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("dataless_localize selects the largest magnitudes") {
    SUBCASE("k=50% keeps the two largest of four") {
        auto tv = tv_of({0.1f, -0.5f, 0.3f, 0.05f});
        Mask m = dataless_localize(tv, 50.0);
        CHECK(bits_of(m) == std::vector<bool>{false, true, true, false});
        CHECK(m.popcount() == 2);
    }
    SUBCASE("k=100% activates everything maskable") {
        auto tv = tv_of({0.1f, -0.5f, 0.3f, 0.05f});
        Mask m = dataless_localize(tv, 100.0);
        CHECK(m.popcount() == 4);
        CHECK(m.sparsity() == 1.0);
    }
    SUBCASE("ties resolve to earliest canonical coordinates") {
        auto tv = tv_of({0.2f, 0.2f, 0.2f, 0.2f});
        Mask m = dataless_localize(tv, 50.0);
        CHECK(bits_of(m) == std::vector<bool>{true, true, false, false});
    }
    SUBCASE("exact count and threshold dominance on random input") {
        Rng rng(3);
        std::vector<float> delta(997);
        for (auto& v : delta) v = static_cast<float>(rng.normal());
        auto tv = tv_of(delta);
        double k = 13.0;
        Mask m = dataless_localize(tv, k);
        size_t expect = static_cast<size_t>(std::llround(k / 100.0 * 997.0));
        CHECK(m.popcount() == expect);
        float min_sel = 1e30f, max_unsel = -1e30f;
        for (size_t i = 0; i < delta.size(); ++i) {
            float mag = std::abs(delta[i]);
            if (m.per_tensor[0].get(i)) min_sel = std::min(min_sel, mag);
            else max_unsel = std::max(max_unsel, mag);
        }
        CHECK(min_sel >= max_unsel);
    }
    SUBCASE("bad percent and empty maskable set are errors") {
        auto tv = tv_of({1.0f});
        CHECK_THROWS_AS(dataless_localize(tv, 0.0), mismatch_error);
        CHECK_THROWS_AS(dataless_localize(tv, 101.0), mismatch_error);
    }
}

TEST_CASE("round_mask boundary behavior") {
    ScoreVector S;
    S.per_tensor.push_back({"w", 3, true, {3.0, 0.0, -2.0}});
    Mask m = round_mask(S);
    CHECK(bits_of(m) == std::vector<bool>{true, false, false});

    SUBCASE("depends only on the sign of S") {
        ScoreVector S2;
        S2.per_tensor.push_back({"w", 3, true, {0.03, 0.0, -200.0}});
        Mask m2 = round_mask(S2);
        CHECK(bits_of(m2) == bits_of(m));
    }
}

TEST_CASE("localize objective gradient matches finite differences") {
    ToyArch arch{6, 10, 2, 3};
    ParamSet pre = arch.init_params(17);
    // a synthetic task vector at finetuning-like scale
    Rng rng(18);
    std::vector<Tensor> fts;
    for (const Tensor& t : pre.tensors()) {
        Tensor f = t;
        for (auto& v : f.data) v += 0.15f * static_cast<float>(rng.normal());
        fts.push_back(std::move(f));
    }
    ParamSet ft = snap_to_base(pre, ParamSet(std::move(fts)));
    TaskVector tv = compute_task_vector(pre, ft);

    DenseParams pre64 = widen_params(arch, pre);
    DenseParams tau64 = widen_params(arch, tv.delta);

    ScoreVector S;
    for (const Tensor& t : tv.delta.tensors()) {
        ScoreVector::Entry e;
        e.name = t.name;
        e.numel = t.data.size();
        e.maskable = true;
        e.s.resize(e.numel);
        for (auto& s : e.s) s = rng.normal() * 1.5;
        S.per_tensor.push_back(std::move(e));
    }

    std::vector<float> bx(5 * 6);
    std::vector<uint16_t> by(5);
    for (auto& v : bx) v = static_cast<float>(rng.normal());
    for (auto& v : by) v = static_cast<uint16_t>(rng.below(3));
    Batch b{bx.data(), by.data(), 5, 6};

    const double lambda = 1e-3, eps = 1e-3;
    ScoreVector grad;
    localize_objective_grad(arch, pre64, tau64, S, b, lambda, grad);

    auto theta_of = [&](const ScoreVector& sv) {
        DenseParams th = pre64;
        for (size_t ti = 0; ti < sv.per_tensor.size(); ++ti)
            for (size_t i = 0; i < sv.per_tensor[ti].s.size(); ++i)
                th.t[ti][i] += sigmoid(sv.per_tensor[ti].s[i]) * tau64.t[ti][i];
        return th;
    };
    std::vector<uint8_t> base_pattern = relu_pattern(arch, theta_of(S), b);

    Rng pick(77);
    size_t checked = 0;
    double max_rel = 0.0;
    while (checked < 120) {
        size_t ti = pick.below(S.per_tensor.size());
        size_t i = pick.below(S.per_tensor[ti].s.size());
        ScoreVector Sp = S;
        Sp.per_tensor[ti].s[i] += eps;
        if (relu_pattern(arch, theta_of(Sp), b) != base_pattern) continue;
        double lp = localize_objective(arch, pre64, tau64, Sp, b, lambda);
        Sp.per_tensor[ti].s[i] -= 2 * eps;
        if (relu_pattern(arch, theta_of(Sp), b) != base_pattern) continue;
        double lm = localize_objective(arch, pre64, tau64, Sp, b, lambda);
        double fd = (lp - lm) / (2 * eps);
        double a = grad.per_tensor[ti].s[i];
        double err = std::abs(a - fd);
        if (err > 1e-7) max_rel = std::max(max_rel, err / std::max(std::abs(a), std::abs(fd)));
        ++checked;
    }
    CHECK(max_rel <= 1e-4);
}

TEST_CASE("train_mask on a zero task vector only feels the L1 term") {
    SuiteConfig scfg;
    scfg.n_tasks = 1;
    scfg.d_in = 6;
    scfg.hidden = 8;
    scfg.classes = 3;
    scfg.val_per_class = 16;
    scfg.seed = 5;
    TaskSuite suite = gen_task_suite(scfg);
    ToyArch arch = scfg.arch();
    ParamSet pre = arch.init_params(5);
    TaskVector tv = compute_task_vector(pre, pre);  // tau = 0

    LossContext ctx{arch, &suite.tasks[0], 91};
    LocalizeConfig cfg;
    cfg.sparsity = 0.25;
    cfg.lambda = 1e-2;
    cfg.shots = 8;
    cfg.lr = 5.0;

    // with tau = 0, dS = -lr * lambda * sigmoid'(S) < 0 at every step, so
    // scores strictly decrease as epochs accumulate
    cfg.epochs = 1;
    ScoreVector s1 = train_mask(tv, pre, ctx, cfg).first;
    cfg.epochs = 3;
    ScoreVector s3 = train_mask(tv, pre, ctx, cfg).first;
    for (size_t ti = 0; ti < s1.per_tensor.size(); ++ti)
        for (size_t i = 0; i < s1.per_tensor[ti].s.size(); ++i)
            CHECK(s3.per_tensor[ti].s[i] < s1.per_tensor[ti].s[i]);
}

TEST_CASE("train_mask respects the maskable set and reproduces bit-exactly") {
    SuiteConfig scfg;
    scfg.n_tasks = 1;
    scfg.d_in = 6;
    scfg.hidden = 8;
    scfg.classes = 3;
    scfg.val_per_class = 16;
    scfg.seed = 6;
    TaskSuite suite = gen_task_suite(scfg);
    ToyArch arch = scfg.arch();
    ParamSet pre = arch.init_params(6);
    ParamSet ft = sgd_finetune(arch, pre, suite.tasks[0], 0.05, 5, 8, 6);
    TaskVector tv = compute_task_vector(pre, ft);

    LossContext ctx{arch, &suite.tasks[0], 17};
    LocalizeConfig cfg;
    cfg.sparsity = 0.2;
    cfg.shots = 8;
    cfg.epochs = 3;
    cfg.maskable = {"head.w", "head.b"};

    auto [S, mask] = train_mask(tv, pre, ctx, cfg);
    for (const MaskTensor& mt : mask.per_tensor) {
        bool maskable = mt.name == "head.w" || mt.name == "head.b";
        if (!maskable) CHECK(mt.popcount() == 0);
    }
    CHECK(mask.maskable_params() ==
          pre.find("head.w")->numel() + pre.find("head.b")->numel());

    auto [S2, mask2] = train_mask(tv, pre, ctx, cfg);
    for (size_t ti = 0; ti < S.per_tensor.size(); ++ti) {
        CHECK(S.per_tensor[ti].s == S2.per_tensor[ti].s);
        CHECK(mask.per_tensor[ti].bits == mask2.per_tensor[ti].bits);
    }
}

TEST_CASE("lambda_autosearch") {
    SUBCASE("target sparsity 1.0 accepts lambda 0 immediately") {
        ParamSet pre = single_tensor("w", {1.0f, 2.0f});
        TaskVector tv = compute_task_vector(pre, pre);
        LossContext ctx{ToyArch{}, nullptr, 0};
        LocalizeConfig cfg;
        cfg.sparsity = 1.0;
        cfg.auto_lambda = true;
        LocalizeConfig out = lambda_autosearch(tv, pre, ctx, cfg);
        CHECK(out.lambda == 0.0);
    }
    SUBCASE("achieved sparsity lands within tolerance on a suite task") {
        SuiteConfig scfg;
        scfg.n_tasks = 1;
        scfg.d_in = 8;
        scfg.hidden = 12;
        scfg.classes = 3;
        scfg.val_per_class = 16;
        scfg.seed = 7;
        TaskSuite suite = gen_task_suite(scfg);
        ToyArch arch = scfg.arch();
        ParamSet pre = arch.init_params(7);
        ParamSet ft = sgd_finetune(arch, pre, suite.tasks[0], 0.05, 8, 8, 7);
        TaskVector tv = compute_task_vector(pre, ft);

        LossContext ctx{arch, &suite.tasks[0], 23};
        LocalizeConfig cfg;
        cfg.sparsity = 0.10;
        cfg.shots = 8;
        cfg.epochs = 5;
        cfg.auto_lambda = true;
        LocalizeConfig tuned = lambda_autosearch(tv, pre, ctx, cfg);
        double achieved = train_mask(tv, pre, ctx, tuned).second.sparsity();
        CHECK(achieved >= cfg.sparsity * (1.0 - cfg.auto_tol));
        CHECK(achieved <= cfg.sparsity * (1.0 + cfg.auto_tol));
    }
}
