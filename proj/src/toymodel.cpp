#include "lns/toymodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lns/kernels.hpp"
#include "lns/rng.hpp"

namespace lns {

namespace {

// Tensor indexes in canonical (sorted-name) order for one arch.
struct Layout {
    struct BlockIdx {
        size_t w, b, g, beta;
    };
    std::vector<BlockIdx> block;
    size_t head_w = 0, head_b = 0;
};

Layout make_layout(const ToyArch& arch) {
    // canonical order: block{i}.linear.b, block{i}.linear.w, block{i}.ln.b,
    // block{i}.ln.g, ..., head.b, head.w   (single-digit block counts only
    // stay sorted; keep the toy at <= 9 blocks)
    Layout l;
    size_t pos = 0;
    for (uint32_t i = 0; i < arch.blocks; ++i) {
        Layout::BlockIdx bi;
        bi.b = pos++;
        bi.w = pos++;
        bi.beta = pos++;
        bi.g = pos++;
        l.block.push_back(bi);
    }
    l.head_b = pos++;
    l.head_w = pos++;
    return l;
}

struct FwdCache {
    // per block
    std::vector<std::vector<double>> z;      // pre-LN, n*H
    std::vector<std::vector<double>> xhat;   // normalized, n*H
    std::vector<std::vector<double>> inv_s;  // 1/sqrt(var+eps), n
    std::vector<std::vector<double>> act;    // post-ReLU, n*H
    std::vector<double> in;                  // widened input, n*d_in
    std::vector<double> logits;              // n*C
};

void run_forward(const ToyArch& arch, const Layout& l, const DenseParams& p, const Batch& b,
                 FwdCache& c) {
    if (b.n == 0) throw mismatch_error("empty batch");
    if (b.d != arch.d_in) throw mismatch_error("batch feature width does not match d_in");
    const auto& k = kern::ops();
    size_t n = b.n, H = arch.hidden;

    c.in.resize(n * arch.d_in);
    k.widen(b.x, c.in.data(), c.in.size());
    c.z.assign(arch.blocks, {});
    c.xhat.assign(arch.blocks, {});
    c.inv_s.assign(arch.blocks, {});
    c.act.assign(arch.blocks, {});

    const std::vector<double>* cur = &c.in;
    size_t cur_w = arch.d_in;
    for (uint32_t bi = 0; bi < arch.blocks; ++bi) {
        const auto& W = p.t[l.block[bi].w];
        const auto& bias = p.t[l.block[bi].b];
        const auto& g = p.t[l.block[bi].g];
        const auto& beta = p.t[l.block[bi].beta];
        auto& z = c.z[bi];
        auto& xh = c.xhat[bi];
        auto& is = c.inv_s[bi];
        auto& a = c.act[bi];
        z.resize(n * H);
        xh.resize(n * H);
        is.resize(n);
        a.resize(n * H);
        for (size_t ex = 0; ex < n; ++ex) {
            const double* xin = cur->data() + ex * cur_w;
            double* zr = z.data() + ex * H;
            for (size_t o = 0; o < H; ++o)
                zr[o] = k.dot_f64(W.data() + o * cur_w, xin, cur_w) + bias[o];
            double mu = k.sum_f64(zr, H) / static_cast<double>(H);
            double var = 0.0;
            for (size_t o = 0; o < H; ++o) {
                double d = zr[o] - mu;
                var += d * d;
            }
            var /= static_cast<double>(H);
            double s = 1.0 / std::sqrt(var + ToyArch::kLnEpsilon);
            is[ex] = s;
            double* xr = xh.data() + ex * H;
            double* ar = a.data() + ex * H;
            for (size_t o = 0; o < H; ++o) {
                xr[o] = (zr[o] - mu) * s;
                double h = g[o] * xr[o] + beta[o];
                ar[o] = h > 0.0 ? h : 0.0;
            }
        }
        cur = &a;
        cur_w = H;
    }

    const auto& Wh = p.t[l.head_w];
    const auto& bh = p.t[l.head_b];
    size_t C = arch.classes;
    c.logits.resize(n * C);
    for (size_t ex = 0; ex < n; ++ex) {
        const double* xin = cur->data() + ex * cur_w;
        double* lo = c.logits.data() + ex * C;
        for (size_t o = 0; o < C; ++o)
            lo[o] = k.dot_f64(Wh.data() + o * cur_w, xin, cur_w) + bh[o];
    }
}

double loss_from_logits(const ToyArch& arch, const Batch& b, const FwdCache& c,
                        size_t* correct_out, std::vector<double>* dlogits) {
    size_t n = b.n, C = arch.classes;
    double total = 0.0;
    size_t correct = 0;
    if (dlogits) dlogits->assign(n * C, 0.0);
    for (size_t ex = 0; ex < n; ++ex) {
        const double* lo = c.logits.data() + ex * C;
        uint16_t y = b.y[ex];
        if (y >= C) throw mismatch_error("label out of range");
        double m = lo[0];
        size_t arg = 0;
        for (size_t o = 1; o < C; ++o)
            if (lo[o] > m) { m = lo[o]; arg = o; }
        if (arg == y) ++correct;
        double se = 0.0;
        for (size_t o = 0; o < C; ++o) se += std::exp(lo[o] - m);
        double lse = m + std::log(se);
        total += lse - lo[y];
        if (dlogits) {
            double* dl = dlogits->data() + ex * C;
            for (size_t o = 0; o < C; ++o)
                dl[o] = std::exp(lo[o] - m) / se / static_cast<double>(n);
            dl[y] -= 1.0 / static_cast<double>(n);
        }
    }
    if (correct_out) *correct_out = correct;
    return total / static_cast<double>(n);
}

}  // namespace

std::vector<std::pair<std::string, std::vector<uint32_t>>> ToyArch::tensor_layout() const {
    if (d_in < 1 || hidden < 1 || blocks < 1 || classes < 1)
        throw mismatch_error("all ToyArch dimensions must be >= 1");
    if (blocks > 9) throw mismatch_error("toy arch supports at most 9 blocks");
    std::vector<std::pair<std::string, std::vector<uint32_t>>> out;
    for (uint32_t i = 0; i < blocks; ++i) {
        uint32_t in = i == 0 ? d_in : hidden;
        std::string base = "block" + std::to_string(i) + ".";
        out.emplace_back(base + "linear.w", std::vector<uint32_t>{hidden, in});
        out.emplace_back(base + "linear.b", std::vector<uint32_t>{hidden});
        out.emplace_back(base + "ln.g", std::vector<uint32_t>{hidden});
        out.emplace_back(base + "ln.b", std::vector<uint32_t>{hidden});
    }
    out.emplace_back("head.w", std::vector<uint32_t>{classes, hidden});
    out.emplace_back("head.b", std::vector<uint32_t>{classes});
    return out;
}

size_t ToyArch::param_count() const {
    size_t n = 0;
    for (const auto& [name, shape] : tensor_layout()) {
        size_t t = 1;
        for (uint32_t d : shape) t *= d;
        n += t;
    }
    return n;
}

ParamSet ToyArch::init_params(uint64_t seed) const {
    Rng rng(subseed(seed, "init"));
    std::vector<Tensor> ts;
    for (const auto& [name, shape] : tensor_layout()) {
        Tensor t;
        t.name = name;
        t.shape = shape;
        size_t n = t.numel();
        t.data.resize(n);
        if (name.ends_with("linear.w") || name.ends_with("head.w")) {
            double fan_out = shape[0], fan_in = shape[1];
            double std = std::sqrt(2.0 / (fan_in + fan_out));
            for (auto& x : t.data) x = static_cast<float>(rng.normal() * std);
        } else if (name.ends_with("ln.g")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            std::fill(t.data.begin(), t.data.end(), 0.0f);
        }
        ts.push_back(std::move(t));
    }
    return ParamSet(std::move(ts));
}

void ToyArch::check_layout(const ParamSet& p) const {
    auto expect = tensor_layout();
    std::sort(expect.begin(), expect.end());
    if (expect.size() != p.tensors().size())
        throw mismatch_error("parameter set has wrong tensor count for this arch");
    for (size_t i = 0; i < expect.size(); ++i) {
        const Tensor& t = p.tensors()[i];
        if (t.name != expect[i].first || t.shape != expect[i].second)
            throw mismatch_error("parameter layout mismatch at tensor '" + t.name + "'");
    }
}

DenseParams widen_params(const ToyArch& arch, const ParamSet& p) {
    arch.check_layout(p);
    DenseParams d;
    d.t.resize(p.tensors().size());
    for (size_t i = 0; i < p.tensors().size(); ++i) {
        const Tensor& t = p.tensors()[i];
        d.t[i].resize(t.data.size());
        kern::ops().widen(t.data.data(), d.t[i].data(), t.data.size());
    }
    return d;
}

ParamSet narrow_params(const ToyArch& arch, const DenseParams& d) {
    auto layout = arch.tensor_layout();
    std::sort(layout.begin(), layout.end());
    std::vector<Tensor> ts;
    for (size_t i = 0; i < layout.size(); ++i) {
        Tensor t;
        t.name = layout[i].first;
        t.shape = layout[i].second;
        t.data.resize(d.t[i].size());
        kern::ops().narrow(d.t[i].data(), t.data.data(), t.data.size());
        ts.push_back(std::move(t));
    }
    return ParamSet(std::move(ts));
}

double forward_loss_f64(const ToyArch& arch, const DenseParams& p, const Batch& b,
                        size_t* correct) {
    Layout l = make_layout(arch);
    FwdCache c;
    run_forward(arch, l, p, b, c);
    return loss_from_logits(arch, b, c, correct, nullptr);
}

std::pair<double, size_t> forward_loss(const ToyArch& arch, const ParamSet& p, const Batch& b) {
    DenseParams d = widen_params(arch, p);
    size_t correct = 0;
    double loss = forward_loss_f64(arch, d, b, &correct);
    return {loss, correct};
}

double backward_f64(const ToyArch& arch, const DenseParams& p, const Batch& b, DenseParams& grad) {
    Layout l = make_layout(arch);
    const auto& k = kern::ops();
    FwdCache c;
    run_forward(arch, l, p, b, c);
    std::vector<double> dlogits;
    double loss = loss_from_logits(arch, b, c, nullptr, &dlogits);

    grad.t.assign(p.t.size(), {});
    for (size_t i = 0; i < p.t.size(); ++i) grad.t[i].assign(p.t[i].size(), 0.0);

    size_t n = b.n, H = arch.hidden, C = arch.classes;
    const std::vector<double>& last_act = arch.blocks > 0 ? c.act[arch.blocks - 1] : c.in;

    // head
    std::vector<double> dact(n * H, 0.0);
    {
        const auto& Wh = p.t[l.head_w];
        auto& dWh = grad.t[l.head_w];
        auto& dbh = grad.t[l.head_b];
        for (size_t ex = 0; ex < n; ++ex) {
            const double* a = last_act.data() + ex * H;
            const double* dl = dlogits.data() + ex * C;
            double* da = dact.data() + ex * H;
            for (size_t o = 0; o < C; ++o) {
                k.axpy_f64(dl[o], a, dWh.data() + o * H, H);
                dbh[o] += dl[o];
                k.axpy_f64(dl[o], Wh.data() + o * H, da, H);
            }
        }
    }

    // blocks, last to first
    for (int bi = static_cast<int>(arch.blocks) - 1; bi >= 0; --bi) {
        const auto& g = p.t[l.block[bi].g];
        const auto& beta = p.t[l.block[bi].beta];
        const auto& W = p.t[l.block[bi].w];
        auto& dW = grad.t[l.block[bi].w];
        auto& db = grad.t[l.block[bi].b];
        auto& dg = grad.t[l.block[bi].g];
        auto& dbeta = grad.t[l.block[bi].beta];

        size_t in_w = bi == 0 ? arch.d_in : H;
        const std::vector<double>& input = bi == 0 ? c.in : c.act[bi - 1];
        std::vector<double> din(n * in_w, 0.0);

        std::vector<double> dxhat(H), dz(H);
        for (size_t ex = 0; ex < n; ++ex) {
            const double* xh = c.xhat[bi].data() + ex * H;
            double* da = dact.data() + ex * H;
            // ReLU: h = g*xhat + beta, act = max(h, 0)
            for (size_t o = 0; o < H; ++o) {
                double h = g[o] * xh[o] + beta[o];
                double dh = h > 0.0 ? da[o] : 0.0;
                dg[o] += dh * xh[o];
                dbeta[o] += dh;
                dxhat[o] = dh * g[o];
            }
            double mean_dx = k.sum_f64(dxhat.data(), H) / static_cast<double>(H);
            double mean_dx_xh = k.dot_f64(dxhat.data(), xh, H) / static_cast<double>(H);
            double s = c.inv_s[bi][ex];
            for (size_t o = 0; o < H; ++o) dz[o] = s * (dxhat[o] - mean_dx - xh[o] * mean_dx_xh);

            const double* xin = input.data() + ex * in_w;
            double* dx = din.data() + ex * in_w;
            for (size_t o = 0; o < H; ++o) {
                k.axpy_f64(dz[o], xin, dW.data() + o * in_w, in_w);
                db[o] += dz[o];
                k.axpy_f64(dz[o], W.data() + o * in_w, dx, in_w);
            }
        }
        dact = std::move(din);  // becomes do of the previous block's act
    }
    return loss;
}

ParamSet backward(const ToyArch& arch, const ParamSet& p, const Batch& b) {
    DenseParams d = widen_params(arch, p);
    DenseParams g;
    backward_f64(arch, d, b, g);
    return narrow_params(arch, g);
}

std::vector<uint8_t> relu_pattern(const ToyArch& arch, const DenseParams& p, const Batch& b) {
    Layout l = make_layout(arch);
    FwdCache c;
    run_forward(arch, l, p, b, c);
    std::vector<uint8_t> pattern;
    pattern.reserve(static_cast<size_t>(arch.blocks) * b.n * arch.hidden);
    for (uint32_t bi = 0; bi < arch.blocks; ++bi)
        for (double a : c.act[bi]) pattern.push_back(a > 0.0 ? 1 : 0);
    return pattern;
}

std::vector<std::pair<std::string, std::vector<double>>> affine_inputs(const ToyArch& arch,
                                                                       const DenseParams& p,
                                                                       const Batch& b) {
    Layout l = make_layout(arch);
    FwdCache c;
    run_forward(arch, l, p, b, c);
    std::vector<std::pair<std::string, std::vector<double>>> out;
    for (uint32_t bi = 0; bi < arch.blocks; ++bi) {
        const std::vector<double>& in = bi == 0 ? c.in : c.act[bi - 1];
        out.emplace_back("block" + std::to_string(bi) + ".linear.w", in);
    }
    out.emplace_back("head.w", arch.blocks > 0 ? c.act[arch.blocks - 1] : c.in);
    return out;
}

std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(subseed(seed, "epoch-" + std::to_string(epoch)));
    rng.shuffle(order);
    return order;
}

ParamSet sgd_finetune(const ToyArch& arch, const ParamSet& init, const TaskData& data, double lr,
                      int epochs, int batch_size, uint64_t seed) {
    if (batch_size < 1) throw mismatch_error("batch_size must be >= 1");
    if (data.train.n == 0) throw mismatch_error("empty training split");
    DenseParams theta = widen_params(arch, init);
    DenseParams grad;
    std::vector<float> bx(static_cast<size_t>(batch_size) * arch.d_in);
    std::vector<uint16_t> by(batch_size);
    uint64_t sgd_seed = subseed(seed, "sgd");

    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = epoch_order(data.train.n, sgd_seed, epoch);
        for (size_t start = 0; start < order.size(); start += batch_size) {
            size_t m = std::min(order.size() - start, static_cast<size_t>(batch_size));
            for (size_t i = 0; i < m; ++i) {
                size_t src = order[start + i];
                std::copy_n(data.train.x.data() + src * arch.d_in, arch.d_in,
                            bx.data() + i * arch.d_in);
                by[i] = data.train.y[src];
            }
            Batch batch{bx.data(), by.data(), m, arch.d_in};
            double loss = backward_f64(arch, theta, batch, grad);
            if (!std::isfinite(loss))
                throw numeric_error("training diverged (non-finite loss) at epoch " +
                                    std::to_string(epoch));
            for (size_t t = 0; t < theta.t.size(); ++t)
                kern::ops().axpy_f64(-lr, grad.t[t].data(), theta.t[t].data(), theta.t[t].size());
        }
    }
    return snap_to_base(init, narrow_params(arch, theta));
}

double evaluate(const ToyArch& arch, const ParamSet& p, const Split& split) {
    if (split.n == 0) throw mismatch_error("empty evaluation split");
    DenseParams d = widen_params(arch, p);
    size_t correct = 0;
    forward_loss_f64(arch, d, whole(split, arch.d_in), &correct);
    return static_cast<double>(correct) / static_cast<double>(split.n);
}

namespace {

void fill_split(Split& split, int per_class, const std::vector<std::vector<double>>& centers,
                const std::vector<uint16_t>& labels, double noise, uint32_t d_in, Rng& rng) {
    // centers[k] is cluster k's mean; labels[k] its class label. Examples are
    // laid down cluster-major, then shuffled.
    size_t n = centers.size() * static_cast<size_t>(per_class);
    std::vector<float> x(n * d_in);
    std::vector<uint16_t> y(n);
    size_t row = 0;
    for (size_t k = 0; k < centers.size(); ++k) {
        for (int i = 0; i < per_class; ++i, ++row) {
            float* xr = x.data() + row * d_in;
            for (uint32_t j = 0; j < d_in; ++j)
                xr[j] = static_cast<float>(centers[k][j] + noise * rng.normal());
            y[row] = labels[k];
        }
    }
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    split.x.resize(n * d_in);
    split.y.resize(n);
    split.n = n;
    for (size_t i = 0; i < n; ++i) {
        std::copy_n(x.data() + order[i] * d_in, d_in, split.x.data() + i * d_in);
        split.y[i] = y[order[i]];
    }
}

}  // namespace

TaskSuite gen_task_suite(const SuiteConfig& cfg) {
    if (cfg.n_tasks < 1) throw mismatch_error("n_tasks must be >= 1");
    if (cfg.conflict && cfg.n_tasks < 2)
        throw mismatch_error("a conflict pair needs at least 2 tasks");
    TaskSuite suite;
    suite.cfg = cfg;

    Rng center_rng(subseed(cfg.seed, "suite-centers"));
    // Cluster centers per task. Each task's clusters differ only inside its
    // own block of input coordinates, so the skills the tasks acquire are
    // separable in weight space and localization has something to find.
    // With conflict, task 1 reuses task 0's clusters (and will relabel them).
    uint32_t slot_width = std::max(1u, cfg.d_in / cfg.n_tasks);
    std::vector<std::vector<std::vector<double>>> centers(cfg.n_tasks);
    for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
        uint32_t slot_start = (t * slot_width) % cfg.d_in;
        centers[t].resize(cfg.classes);
        for (uint32_t c = 0; c < cfg.classes; ++c) {
            centers[t][c].assign(cfg.d_in, 0.0);
            for (uint32_t j = 0; j < slot_width; ++j)
                centers[t][c][(slot_start + j) % cfg.d_in] =
                    cfg.center_scale * center_rng.normal();
        }
    }
    if (cfg.conflict) centers[1] = centers[0];

    for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
        TaskData td;
        td.d_in = cfg.d_in;
        td.classes = cfg.classes;
        td.seed = subseed(cfg.seed, "suite-task-" + std::to_string(t));
        Rng rng(td.seed);
        // class c draws from cluster k with label(k) == c; the conflict twin
        // labels cluster k as (k+1) mod classes
        std::vector<std::vector<double>> cl(cfg.classes);
        std::vector<uint16_t> labels(cfg.classes);
        for (uint32_t k = 0; k < cfg.classes; ++k) {
            uint16_t label = (cfg.conflict && t == 1)
                                 ? static_cast<uint16_t>((k + 1) % cfg.classes)
                                 : static_cast<uint16_t>(k);
            cl[k] = centers[t][k];
            labels[k] = label;
        }
        fill_split(td.train, cfg.train_per_class, cl, labels, cfg.noise, cfg.d_in, rng);
        fill_split(td.val, cfg.val_per_class, cl, labels, cfg.noise, cfg.d_in, rng);
        fill_split(td.test, cfg.test_per_class, cl, labels, cfg.noise, cfg.d_in, rng);
        suite.tasks.push_back(std::move(td));
    }

    // pretrain mixture: every distinct cluster once, generic labels
    Rng label_rng(subseed(cfg.seed, "suite-pretrain-labels"));
    std::vector<std::vector<double>> pc;
    std::vector<uint16_t> pl;
    for (uint32_t t = 0; t < cfg.n_tasks; ++t) {
        if (cfg.conflict && t == 1) continue;  // same clusters as task 0
        for (uint32_t c = 0; c < cfg.classes; ++c) {
            pc.push_back(centers[t][c]);
            pl.push_back(static_cast<uint16_t>(label_rng.below(cfg.classes)));
        }
    }
    TaskData& pre = suite.pretrain;
    pre.d_in = cfg.d_in;
    pre.classes = cfg.classes;
    pre.seed = subseed(cfg.seed, "suite-pretrain");
    Rng prng(pre.seed);
    int per_cluster = std::max(8, cfg.train_per_class / 2);
    fill_split(pre.train, per_cluster, pc, pl, cfg.noise, cfg.d_in, prng);
    fill_split(pre.val, std::max(8, cfg.val_per_class / 4), pc, pl, cfg.noise, cfg.d_in, prng);
    fill_split(pre.test, std::max(8, cfg.test_per_class / 2), pc, pl, cfg.noise, cfg.d_in, prng);
    return suite;
}

Split kshot_subset(const TaskData& data, int shots_per_class, uint64_t seed) {
    if (shots_per_class < 1) throw mismatch_error("shots_per_class must be >= 1");
    std::vector<size_t> order(data.val.n);
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(subseed(seed, "shots"));
    rng.shuffle(order);
    std::vector<size_t> picked;
    std::vector<int> have(data.classes, 0);
    for (size_t idx : order) {
        uint16_t y = data.val.y[idx];
        if (have[y] < shots_per_class) {
            ++have[y];
            picked.push_back(idx);
        }
    }
    for (uint32_t c = 0; c < data.classes; ++c)
        if (have[c] < shots_per_class)
            throw mismatch_error("validation split has fewer than " +
                                 std::to_string(shots_per_class) + " examples for class " +
                                 std::to_string(c));
    std::sort(picked.begin(), picked.end());
    Split s;
    s.n = picked.size();
    s.x.resize(s.n * data.d_in);
    s.y.resize(s.n);
    for (size_t i = 0; i < picked.size(); ++i) {
        std::copy_n(data.val.x.data() + picked[i] * data.d_in, data.d_in,
                    s.x.data() + i * data.d_in);
        s.y[i] = data.val.y[picked[i]];
    }
    return s;
}

TaskData load_task_csv(const std::string& path, double train_frac, double val_frac,
                       uint64_t seed) {
    std::ifstream f(path);
    if (!f) throw error("cannot open '" + path + "' for reading");
    std::string line;
    if (!std::getline(f, line)) throw format_error("empty CSV file", 0);
    // header: label,f0,...,f{d-1}
    std::vector<std::string> cols;
    {
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cols.push_back(c);
    }
    if (cols.empty() || cols[0] != "label")
        throw format_error("CSV header must start with 'label'", 0);
    uint32_t d = static_cast<uint32_t>(cols.size() - 1);
    for (uint32_t i = 0; i < d; ++i)
        if (cols[i + 1] != "f" + std::to_string(i))
            throw format_error("CSV header column " + std::to_string(i + 1) + " must be f" +
                                   std::to_string(i),
                               0);
    if (d == 0) throw format_error("CSV has no feature columns", 0);

    std::vector<float> xs;
    std::vector<uint16_t> ys;
    size_t lineno = 1;
    uint16_t max_label = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        if (!std::getline(ss, cell, ','))
            throw format_error("missing label on line " + std::to_string(lineno), lineno);
        try {
            int y = std::stoi(cell);
            if (y < 0 || y > 0xffff) throw std::out_of_range("label");
            ys.push_back(static_cast<uint16_t>(y));
            max_label = std::max(max_label, ys.back());
        } catch (const std::exception&) {
            throw format_error("bad label '" + cell + "' on line " + std::to_string(lineno),
                               lineno);
        }
        for (uint32_t i = 0; i < d; ++i) {
            if (!std::getline(ss, cell, ','))
                throw format_error("missing feature f" + std::to_string(i) + " on line " +
                                       std::to_string(lineno),
                                   lineno);
            try {
                xs.push_back(std::stof(cell));
            } catch (const std::exception&) {
                throw format_error("bad feature '" + cell + "' on line " + std::to_string(lineno),
                                   lineno);
            }
        }
    }
    size_t n = ys.size();
    if (n == 0) throw format_error("CSV has no data rows", 1);

    TaskData td;
    td.d_in = d;
    td.classes = static_cast<uint32_t>(max_label) + 1;
    td.seed = seed;
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(subseed(seed, "csv-split"));
    rng.shuffle(order);
    size_t n_train = static_cast<size_t>(train_frac * static_cast<double>(n));
    size_t n_val = static_cast<size_t>(val_frac * static_cast<double>(n));
    auto emit = [&](Split& s, size_t begin, size_t end) {
        s.n = end - begin;
        s.x.resize(s.n * d);
        s.y.resize(s.n);
        for (size_t i = begin; i < end; ++i) {
            std::copy_n(xs.data() + order[i] * d, d, s.x.data() + (i - begin) * d);
            s.y[i - begin] = ys[order[i]];
        }
    };
    emit(td.train, 0, n_train);
    emit(td.val, n_train, n_train + n_val);
    emit(td.test, n_train + n_val, n);
    return td;
}

}  // namespace lns
