#include "lns/localizer.hpp"

#include <algorithm>
#include <cmath>

#include "lns/kernels.hpp"
#include "lns/rng.hpp"

namespace lns {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::vector<std::string> resolve_maskable(const ParamSet& layout,
                                          std::vector<std::string> maskable) {
    if (maskable.empty()) return default_maskable(layout);
    std::sort(maskable.begin(), maskable.end());
    for (const std::string& name : maskable)
        if (layout.find(name) == nullptr)
            throw mismatch_error("maskable tensor '" + name + "' does not exist in the layout");
    return maskable;
}

bool contains(const std::vector<std::string>& sorted, const std::string& name) {
    return std::binary_search(sorted.begin(), sorted.end(), name);
}

// theta(S) = pre + sigmoid(S) ⊙ tau on maskable tensors, pre elsewhere
void build_theta(const DenseParams& pre, const DenseParams& tau, const ScoreVector& S,
                 DenseParams& theta) {
    theta.t.resize(pre.t.size());
    for (size_t ti = 0; ti < pre.t.size(); ++ti) {
        theta.t[ti] = pre.t[ti];
        const ScoreVector::Entry& e = S.per_tensor[ti];
        if (!e.maskable) continue;
        for (size_t i = 0; i < e.s.size(); ++i)
            theta.t[ti][i] += sigmoid(e.s[i]) * tau.t[ti][i];
    }
}

}  // namespace

std::vector<std::string> default_maskable(const ParamSet& layout) {
    std::vector<std::string> out;
    for (const Tensor& t : layout.tensors())
        if (t.name.find("embedding") == std::string::npos) out.push_back(t.name);
    return out;
}

Mask dataless_localize(const TaskVector& tv, double k_percent,
                       std::vector<std::string> maskable) {
    if (!(k_percent > 0.0) || k_percent > 100.0)
        throw mismatch_error("k_percent must be in (0, 100]");
    maskable = resolve_maskable(tv.delta, maskable);
    if (maskable.empty()) throw mismatch_error("maskable set is empty");

    struct Coord {
        float mag;
        uint32_t tensor;
        uint32_t index;
    };
    std::vector<Coord> coords;
    const auto& tensors = tv.delta.tensors();
    uint64_t total = 0;
    for (uint32_t ti = 0; ti < tensors.size(); ++ti) {
        if (!contains(maskable, tensors[ti].name)) continue;
        total += tensors[ti].data.size();
    }
    coords.reserve(total);
    for (uint32_t ti = 0; ti < tensors.size(); ++ti) {
        if (!contains(maskable, tensors[ti].name)) continue;
        const auto& data = tensors[ti].data;
        for (uint32_t i = 0; i < data.size(); ++i)
            coords.push_back(Coord{std::abs(data[i]), ti, i});
    }

    auto better = [](const Coord& a, const Coord& b) {
        if (a.mag != b.mag) return a.mag > b.mag;
        if (a.tensor != b.tensor) return a.tensor < b.tensor;
        return a.index < b.index;
    };
    size_t m = static_cast<size_t>(std::llround(k_percent / 100.0 * static_cast<double>(total)));
    m = std::min(m, coords.size());
    if (m > 0 && m < coords.size())
        std::nth_element(coords.begin(), coords.begin() + static_cast<long>(m - 1), coords.end(),
                         better);

    Mask mask = make_mask(tv.delta, maskable);
    for (size_t i = 0; i < m; ++i) mask.per_tensor[coords[i].tensor].set(coords[i].index, true);
    return mask;
}

Mask round_mask(const ScoreVector& S) {
    Mask m;
    for (const ScoreVector::Entry& e : S.per_tensor) {
        MaskTensor mt;
        mt.name = e.name;
        mt.numel = e.numel;
        mt.bits.assign((e.numel + 7) / 8, 0);
        if (e.maskable) {
            m.maskable_set.push_back(e.name);
            for (uint64_t i = 0; i < e.numel; ++i)
                if (e.s[i] > 0.0) mt.set(i, true);
        }
        m.per_tensor.push_back(std::move(mt));
    }
    return m;
}

double localize_objective(const ToyArch& arch, const DenseParams& pre, const DenseParams& tau,
                          const ScoreVector& S, const Batch& b, double lambda) {
    DenseParams theta;
    build_theta(pre, tau, S, theta);
    double loss = forward_loss_f64(arch, theta, b);
    double l1 = 0.0;
    for (const ScoreVector::Entry& e : S.per_tensor)
        for (double s : e.s) l1 += sigmoid(s);
    return loss + lambda * l1;
}

double localize_objective_grad(const ToyArch& arch, const DenseParams& pre,
                               const DenseParams& tau, const ScoreVector& S, const Batch& b,
                               double lambda, ScoreVector& grad) {
    DenseParams theta;
    build_theta(pre, tau, S, theta);
    DenseParams gtheta;
    double loss = backward_f64(arch, theta, b, gtheta);

    grad.per_tensor.resize(S.per_tensor.size());
    for (size_t ti = 0; ti < S.per_tensor.size(); ++ti) {
        const ScoreVector::Entry& e = S.per_tensor[ti];
        ScoreVector::Entry& ge = grad.per_tensor[ti];
        ge.name = e.name;
        ge.numel = e.numel;
        ge.maskable = e.maskable;
        ge.s.assign(e.s.size(), 0.0);
        if (!e.maskable) continue;
        for (size_t i = 0; i < e.s.size(); ++i) {
            double sig = sigmoid(e.s[i]);
            double dsig = sig * (1.0 - sig);
            ge.s[i] = (gtheta.t[ti][i] * tau.t[ti][i] + lambda) * dsig;
        }
    }
    return loss;
}

std::pair<ScoreVector, Mask> train_mask(const TaskVector& tv, const ParamSet& pre,
                                        const LossContext& ctx, const LocalizeConfig& cfg) {
    if (tv.base_fingerprint != pre.fingerprint())
        throw mismatch_error("task vector base fingerprint does not match the pretrained model");
    if (cfg.epochs < 1) throw mismatch_error("epochs must be >= 1");
    if (!(cfg.sparsity > 0.0) || cfg.sparsity > 1.0)
        throw mismatch_error("sparsity target must be in (0, 1]");
    if (ctx.data == nullptr) throw mismatch_error("loss context has no data");

    std::vector<std::string> maskable = resolve_maskable(tv.delta, cfg.maskable);
    Mask seed_mask = dataless_localize(tv, cfg.sparsity * 100.0, maskable);

    // scores: s_high on the seed mask, s_low elsewhere
    ScoreVector S;
    const auto& tensors = tv.delta.tensors();
    S.per_tensor.resize(tensors.size());
    for (size_t ti = 0; ti < tensors.size(); ++ti) {
        ScoreVector::Entry& e = S.per_tensor[ti];
        e.name = tensors[ti].name;
        e.numel = tensors[ti].data.size();
        e.maskable = contains(maskable, e.name);
        if (!e.maskable) continue;
        e.s.assign(e.numel, cfg.s_low);
        const MaskTensor& mt = seed_mask.per_tensor[ti];
        for (uint64_t i = 0; i < e.numel; ++i)
            if (mt.get(i)) e.s[i] = cfg.s_high;
    }

    Split shots = kshot_subset(*ctx.data, cfg.shots, ctx.seed);
    DenseParams pre64 = widen_params(ctx.arch, pre);
    DenseParams tau64 = widen_params(ctx.arch, tv.delta);

    std::vector<float> bx(static_cast<size_t>(cfg.batch_size) * ctx.arch.d_in);
    std::vector<uint16_t> by(cfg.batch_size);
    uint64_t order_seed = subseed(ctx.seed, "mask");
    ScoreVector grad;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto order = epoch_order(shots.n, order_seed, epoch);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t m = std::min(order.size() - start, static_cast<size_t>(cfg.batch_size));
            for (size_t i = 0; i < m; ++i) {
                size_t src = order[start + i];
                std::copy_n(shots.x.data() + src * ctx.arch.d_in, ctx.arch.d_in,
                            bx.data() + i * ctx.arch.d_in);
                by[i] = shots.y[src];
            }
            Batch batch{bx.data(), by.data(), m, ctx.arch.d_in};
            double loss =
                localize_objective_grad(ctx.arch, pre64, tau64, S, batch, cfg.lambda, grad);
            if (!std::isfinite(loss))
                throw numeric_error("mask training diverged at epoch " + std::to_string(epoch));
            for (size_t ti = 0; ti < S.per_tensor.size(); ++ti)
                if (S.per_tensor[ti].maskable)
                    kern::ops().axpy_f64(-cfg.lr, grad.per_tensor[ti].s.data(),
                                         S.per_tensor[ti].s.data(), S.per_tensor[ti].s.size());
        }
    }
    Mask out = round_mask(S);
    return {std::move(S), std::move(out)};
}

LocalizeConfig lambda_autosearch(const TaskVector& tv, const ParamSet& pre,
                                 const LossContext& ctx, const LocalizeConfig& cfg) {
    if (!cfg.auto_lambda) throw mismatch_error("lambda_autosearch called with auto_lambda off");
    LocalizeConfig out = cfg;
    if (cfg.sparsity >= 1.0) {  // a full mask needs no regularization
        out.lambda = 0.0;
        return out;
    }
    double lo_edge = cfg.sparsity * (1.0 - cfg.auto_tol);
    double hi_edge = cfg.sparsity * (1.0 + cfg.auto_tol);
    auto achieved = [&](double lambda) {
        LocalizeConfig c = cfg;
        c.lambda = lambda;
        return train_mask(tv, pre, ctx, c).second.sparsity();
    };

    double lo = 1e-9, hi = 1e-1;
    double a_lo = achieved(lo);
    if (a_lo >= lo_edge && a_lo <= hi_edge) {
        out.lambda = lo;
        return out;
    }
    double a_hi = achieved(hi);
    if (a_hi >= lo_edge && a_hi <= hi_edge) {
        out.lambda = hi;
        return out;
    }
    // sparsity decreases with lambda: need the target inside [a_hi, a_lo]
    if (a_lo < lo_edge || a_hi > hi_edge)
        throw numeric_error("lambda bracket not found in [1e-9, 1e-1]: sparsity(1e-9)=" +
                            std::to_string(a_lo) + ", sparsity(1e-1)=" + std::to_string(a_hi) +
                            ", target=" + std::to_string(cfg.sparsity));
    for (int it = 0; it < 12; ++it) {
        double mid = std::sqrt(lo * hi);
        double a_mid = achieved(mid);
        if (a_mid >= lo_edge && a_mid <= hi_edge) {
            out.lambda = mid;
            return out;
        }
        if (a_mid > hi_edge) lo = mid;  // not sparse enough yet
        else hi = mid;
    }
    throw numeric_error("lambda bisection did not converge to sparsity " +
                        std::to_string(cfg.sparsity) + " within 12 iterations");
}

}  // namespace lns
