#include "lns/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "lns/kernels.hpp"
#include "lns/localizer.hpp"
#include "lns/sparse.hpp"

namespace lns {

namespace {

void check_same_layout(std::span<const ParamSet> models) {
    if (models.empty()) throw mismatch_error("need at least one model");
    for (size_t i = 1; i < models.size(); ++i) {
        std::string offender;
        if (!models[0].same_layout(models[i], &offender))
            throw mismatch_error("model layouts differ at tensor '" + offender + "'");
    }
}

// Dense lower-triangular Cholesky; throws when the matrix is not positive
// definite. Systems here are tiny ((fan_in+1)^2), so no pivoting.
void cholesky(std::vector<double>& a, uint32_t n, const std::string& what) {
    for (uint32_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (uint32_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > 0.0))
            throw numeric_error("singular system in " + what +
                                " (non-positive pivot at row " + std::to_string(j) + ")");
        double l = std::sqrt(d);
        a[j * n + j] = l;
        for (uint32_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (uint32_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / l;
        }
    }
}

// solve L L^T x = b in place
void cholesky_solve(const std::vector<double>& l, uint32_t n, std::vector<double>& b) {
    for (uint32_t i = 0; i < n; ++i) {
        double s = b[i];
        for (uint32_t k = 0; k < i; ++k) s -= l[i * n + k] * b[k];
        b[i] = s / l[i * n + i];
    }
    for (uint32_t ii = n; ii > 0; --ii) {
        uint32_t i = ii - 1;
        double s = b[i];
        for (uint32_t k = i + 1; k < n; ++k) s -= l[k * n + i] * b[k];
        b[i] = s / l[i * n + i];
    }
}

}  // namespace

ParamSet simple_average(std::span<const ParamSet> models) {
    check_same_layout(models);
    const auto& k = kern::ops();
    std::vector<Tensor> out;
    std::vector<double> acc;
    for (size_t ti = 0; ti < models[0].tensors().size(); ++ti) {
        const Tensor& t0 = models[0].tensors()[ti];
        acc.assign(t0.data.size(), 0.0);
        for (const ParamSet& m : models)
            k.axpy_wf64(1.0, m.tensors()[ti].data.data(), acc.data(), acc.size());
        k.scale_f64(1.0 / static_cast<double>(models.size()), acc.data(), acc.size());
        Tensor o{t0.name, t0.shape, std::vector<float>(t0.data.size())};
        k.narrow(acc.data(), o.data.data(), o.data.size());
        out.push_back(std::move(o));
    }
    return ParamSet(std::move(out));
}

ParamSet task_arithmetic(const ParamSet& pre, std::span<const TaskVector> tvs, double alpha) {
    std::vector<ScaledDelta> sds;
    sds.reserve(tvs.size());
    for (const TaskVector& tv : tvs) sds.push_back(ScaledDelta{alpha, &tv});
    return apply_delta(pre, sds);
}

ParamSet ties_merge(const ParamSet& pre, std::span<const TaskVector> tvs, double k_percent,
                    double alpha) {
    if (tvs.empty()) throw mismatch_error("need at least one task vector");
    for (const TaskVector& tv : tvs)
        if (tv.base_fingerprint != pre.fingerprint())
            throw mismatch_error("task vector base fingerprint does not match the pretrained model");

    // trim: per task, keep the global top-k% magnitudes
    std::vector<TaskVector> trimmed;
    trimmed.reserve(tvs.size());
    for (const TaskVector& tv : tvs) {
        Mask m = dataless_localize(tv, k_percent);
        trimmed.push_back(densify(mask_apply(m, tv), pre));
    }

    std::vector<Tensor> out;
    out.reserve(pre.tensors().size());
    for (size_t ti = 0; ti < pre.tensors().size(); ++ti) {
        const Tensor& p = pre.tensors()[ti];
        Tensor o = p;
        for (size_t i = 0; i < p.data.size(); ++i) {
            double total = 0.0;
            for (const TaskVector& tv : trimmed)
                total += static_cast<double>(tv.delta.tensors()[ti].data[i]);
            if (total == 0.0) continue;  // no elected sign, keep pretrained
            double mass = 0.0;
            uint32_t n = 0;
            for (const TaskVector& tv : trimmed) {
                double v = static_cast<double>(tv.delta.tensors()[ti].data[i]);
                if ((total > 0.0 && v > 0.0) || (total < 0.0 && v < 0.0)) {
                    mass += v;
                    ++n;
                }
            }
            double mean = mass / static_cast<double>(n);
            o.data[i] = static_cast<float>(static_cast<double>(p.data[i]) + alpha * mean);
        }
        out.push_back(std::move(o));
    }
    return ParamSet(std::move(out));
}

FisherDiag fisher_estimate(const ToyArch& arch, const ParamSet& params, const Split& data,
                           size_t n_samples) {
    if (n_samples < 1) throw mismatch_error("n_samples must be >= 1");
    if (data.n == 0) throw mismatch_error("empty data split");
    size_t n = std::min(n_samples, data.n);

    DenseParams theta = widen_params(arch, params);
    DenseParams grad;
    std::vector<std::vector<double>> acc;
    acc.resize(params.tensors().size());
    for (size_t ti = 0; ti < acc.size(); ++ti) acc[ti].assign(params.tensors()[ti].data.size(), 0.0);

    for (size_t ex = 0; ex < n; ++ex) {
        Batch one{data.x.data() + ex * arch.d_in, data.y.data() + ex, 1, arch.d_in};
        backward_f64(arch, theta, one, grad);
        for (size_t ti = 0; ti < acc.size(); ++ti)
            for (size_t i = 0; i < acc[ti].size(); ++i)
                acc[ti][i] += grad.t[ti][i] * grad.t[ti][i];
    }

    std::vector<Tensor> out;
    for (size_t ti = 0; ti < acc.size(); ++ti) {
        const Tensor& t = params.tensors()[ti];
        Tensor f{t.name, t.shape, std::vector<float>(t.data.size())};
        kern::ops().scale_f64(1.0 / static_cast<double>(n), acc[ti].data(), acc[ti].size());
        kern::ops().narrow(acc[ti].data(), f.data.data(), f.data.size());
        out.push_back(std::move(f));
    }
    return FisherDiag{ParamSet(std::move(out)), n};
}

ParamSet fisher_merge(std::span<const ParamSet> models, std::span<const FisherDiag> fishers,
                      double eps) {
    check_same_layout(models);
    if (models.size() != fishers.size())
        throw mismatch_error("need one Fisher estimate per model");
    if (!(eps > 0.0)) throw mismatch_error("eps must be > 0");
    for (const FisherDiag& f : fishers) {
        std::string offender;
        if (!models[0].same_layout(f.values, &offender))
            throw mismatch_error("Fisher layout differs at tensor '" + offender + "'");
    }

    std::vector<Tensor> out;
    for (size_t ti = 0; ti < models[0].tensors().size(); ++ti) {
        const Tensor& t0 = models[0].tensors()[ti];
        Tensor o{t0.name, t0.shape, std::vector<float>(t0.data.size())};
        for (size_t i = 0; i < t0.data.size(); ++i) {
            double num = 0.0, den = 0.0;
            for (size_t m = 0; m < models.size(); ++m) {
                double w = static_cast<double>(fishers[m].values.tensors()[ti].data[i]) + eps;
                num += w * static_cast<double>(models[m].tensors()[ti].data[i]);
                den += w;
            }
            o.data[i] = static_cast<float>(num / den);
        }
        out.push_back(std::move(o));
    }
    return ParamSet(std::move(out));
}

GramMatrix collect_grams(const ToyArch& arch, const ParamSet& params, const Split& data,
                         size_t n_samples) {
    if (n_samples < 1) throw mismatch_error("n_samples must be >= 1");
    if (data.n == 0) throw mismatch_error("empty data split");
    size_t n = std::min(n_samples, data.n);

    DenseParams theta = widen_params(arch, params);
    Batch b{data.x.data(), data.y.data(), n, arch.d_in};
    auto inputs = affine_inputs(arch, theta, b);

    GramMatrix g;
    g.samples = n;
    for (auto& [name, x] : inputs) {
        GramMatrix::Layer layer;
        layer.weight_name = name;
        uint32_t fan_in = static_cast<uint32_t>(x.size() / n);
        layer.dim = fan_in + 1;
        layer.g.assign(static_cast<size_t>(layer.dim) * layer.dim, 0.0);
        std::vector<double> row(layer.dim);
        for (size_t ex = 0; ex < n; ++ex) {
            std::copy_n(x.data() + ex * fan_in, fan_in, row.data());
            row[fan_in] = 1.0;  // bias column
            for (uint32_t a = 0; a < layer.dim; ++a)
                for (uint32_t c = 0; c < layer.dim; ++c)
                    layer.g[a * layer.dim + c] += row[a] * row[c];
        }
        g.layers.push_back(std::move(layer));
    }
    std::sort(g.layers.begin(), g.layers.end(),
              [](const auto& a, const auto& b) { return a.weight_name < b.weight_name; });
    return g;
}

ParamSet regmean_merge(std::span<const ParamSet> models, std::span<const GramMatrix> grams,
                       double ridge_rel) {
    check_same_layout(models);
    if (models.size() != grams.size())
        throw mismatch_error("need one gram collection per model");
    if (ridge_rel < 0.0) throw mismatch_error("ridge_rel must be >= 0");
    for (const GramMatrix& g : grams) {
        if (g.layers.size() != grams[0].layers.size())
            throw mismatch_error("gram collections cover different layer sets");
        for (size_t li = 0; li < g.layers.size(); ++li)
            if (g.layers[li].weight_name != grams[0].layers[li].weight_name ||
                g.layers[li].dim != grams[0].layers[li].dim)
                throw mismatch_error("gram layout differs at layer '" +
                                     g.layers[li].weight_name + "'");
    }

    // everything starts as the simple average; affine layers get overwritten
    ParamSet merged = simple_average(models);
    std::vector<Tensor> out(merged.tensors().begin(), merged.tensors().end());

    auto tensor_index = [&](const std::string& name) {
        for (size_t i = 0; i < models[0].tensors().size(); ++i)
            if (models[0].tensors()[i].name == name) return i;
        throw mismatch_error("gram references unknown tensor '" + name + "'");
    };

    for (size_t li = 0; li < grams[0].layers.size(); ++li) {
        const std::string& wname = grams[0].layers[li].weight_name;
        if (!wname.ends_with(".w"))
            throw mismatch_error("gram layer '" + wname + "' is not a weight tensor");
        std::string bname = wname.substr(0, wname.size() - 2) + ".b";
        size_t wi = tensor_index(wname);
        size_t bi = tensor_index(bname);
        const Tensor& w0 = models[0].tensors()[wi];
        if (w0.shape.size() != 2)
            throw mismatch_error("gram layer '" + wname + "' must be rank 2");
        uint32_t fan_out = w0.shape[0], fan_in = w0.shape[1];
        uint32_t dim = fan_in + 1;
        if (dim != grams[0].layers[li].dim)
            throw mismatch_error("gram dimension mismatch at layer '" + wname + "'");

        // A = sum G_i (+ ridge), B[:, o] = sum_i G_i x_i_o with x_i_o the
        // augmented column [W_i[o,:], b_i[o]]
        std::vector<double> A(static_cast<size_t>(dim) * dim, 0.0);
        for (const GramMatrix& g : grams)
            for (size_t e = 0; e < A.size(); ++e) A[e] += g.layers[li].g[e];
        if (ridge_rel > 0.0) {
            double tr = 0.0;
            for (uint32_t a = 0; a < dim; ++a) tr += A[a * dim + a];
            double ridge = ridge_rel * tr / static_cast<double>(dim);
            for (uint32_t a = 0; a < dim; ++a) A[a * dim + a] += ridge;
        }
        cholesky(A, dim, "regmean layer '" + wname + "'");

        Tensor& ow = out[wi];
        Tensor& ob = out[bi];
        std::vector<double> rhs(dim), aug(dim);
        for (uint32_t o = 0; o < fan_out; ++o) {
            std::fill(rhs.begin(), rhs.end(), 0.0);
            for (size_t m = 0; m < models.size(); ++m) {
                const Tensor& wm = models[m].tensors()[wi];
                const Tensor& bm = models[m].tensors()[bi];
                for (uint32_t r = 0; r < fan_in; ++r)
                    aug[r] = static_cast<double>(wm.data[o * fan_in + r]);
                aug[fan_in] = static_cast<double>(bm.data[o]);
                const auto& g = grams[m].layers[li].g;
                for (uint32_t r = 0; r < dim; ++r) {
                    double s = 0.0;
                    for (uint32_t c = 0; c < dim; ++c) s += g[r * dim + c] * aug[c];
                    rhs[r] += s;
                }
            }
            cholesky_solve(A, dim, rhs);
            for (uint32_t r = 0; r < fan_in; ++r)
                ow.data[o * fan_in + r] = static_cast<float>(rhs[r]);
            ob.data[o] = static_cast<float>(rhs[fan_in]);
        }
    }
    return ParamSet(std::move(out));
}

ParamSet gram_to_pset(const GramMatrix& g) {
    std::vector<Tensor> ts;
    for (const auto& layer : g.layers) {
        Tensor t;
        t.name = "gram." + layer.weight_name;
        t.shape = {layer.dim, layer.dim};
        t.data.resize(layer.g.size());
        kern::ops().narrow(layer.g.data(), t.data.data(), t.data.size());
        ts.push_back(std::move(t));
    }
    Tensor s{"gram.samples", {1}, {static_cast<float>(g.samples)}};
    ts.push_back(std::move(s));
    return ParamSet(std::move(ts));
}

GramMatrix gram_from_pset(const ParamSet& p) {
    GramMatrix g;
    for (const Tensor& t : p.tensors()) {
        if (t.name == "gram.samples") {
            g.samples = static_cast<uint64_t>(t.data.at(0));
            continue;
        }
        if (!t.name.starts_with("gram."))
            throw mismatch_error("unexpected tensor '" + t.name + "' in gram PSET");
        if (t.shape.size() != 2 || t.shape[0] != t.shape[1])
            throw mismatch_error("gram tensor '" + t.name + "' is not square");
        GramMatrix::Layer layer;
        layer.weight_name = t.name.substr(5);
        layer.dim = t.shape[0];
        layer.g.resize(t.data.size());
        kern::ops().widen(t.data.data(), layer.g.data(), t.data.size());
        g.layers.push_back(std::move(layer));
    }
    return g;
}

}  // namespace lns
