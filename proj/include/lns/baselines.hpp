#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lns/params.hpp"
#include "lns/toymodel.hpp"

namespace lns {

// Diagonal empirical Fisher estimate, one nonnegative entry per parameter.
struct FisherDiag {
    ParamSet values;
    uint64_t samples = 0;
};

// Per-affine-layer input Gram matrices G = X^T X with a constant-1 column
// appended (bias handling), keyed by the layer's weight tensor name.
struct GramMatrix {
    struct Layer {
        std::string weight_name;
        uint32_t dim = 0;       // fan_in + 1
        std::vector<double> g;  // dim x dim, symmetric PSD
    };
    std::vector<Layer> layers;  // sorted by weight_name
    uint64_t samples = 0;
};

// Element-wise mean of the finetuned models.
ParamSet simple_average(std::span<const ParamSet> models);

// pre + alpha * sum(tau_i); the suggested dataless coefficient is 0.4.
ParamSet task_arithmetic(const ParamSet& pre, std::span<const TaskVector> tvs,
                         double alpha = 0.4);

// Trim (global top-k% by |tau| per task), elect a sign per coordinate by the
// sign of the summed trimmed values, average the values that carry the
// elected sign, and apply with scale alpha. Zero-total coordinates keep the
// pretrained value. Recommended defaults: k=20, alpha=1.
ParamSet ties_merge(const ParamSet& pre, std::span<const TaskVector> tvs,
                    double k_percent = 20.0, double alpha = 1.0);

// Mean over examples of the squared per-example gradient of the true-label
// log-likelihood, over min(n_samples, split size) leading examples.
FisherDiag fisher_estimate(const ToyArch& arch, const ParamSet& params, const Split& data,
                           size_t n_samples);

// Coordinate-wise Fisher-weighted mean. Every weight is smoothed by +eps,
// which floors the denominator and lets coordinates with no Fisher mass in
// any task fall back to the plain mean instead of being zeroed.
ParamSet fisher_merge(std::span<const ParamSet> models, std::span<const FisherDiag> fishers,
                      double eps = 1e-8);

// Input grams for every affine layer of the toy model over the leading
// min(n_samples, split size) examples.
GramMatrix collect_grams(const ToyArch& arch, const ParamSet& params, const Split& data,
                         size_t n_samples);

// Per affine layer solve (sum G_i + ridge_rel*tr(sum G)/dim * I) W = sum G_i W_i
// via Cholesky; LayerNorm and any other non-affine tensors are merged by
// simple averaging. ridge_rel of 0 disables the ridge.
ParamSet regmean_merge(std::span<const ParamSet> models, std::span<const GramMatrix> grams,
                       double ridge_rel = 1e-3);

// PSET v1 packaging for gram matrices: one "gram.{layer}" tensor per layer
// plus a "gram.samples" scalar.
ParamSet gram_to_pset(const GramMatrix& g);
GramMatrix gram_from_pset(const ParamSet& p);

}  // namespace lns
