#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lns/sparse.hpp"
#include "lns/toymodel.hpp"

namespace lns {

// Real-valued reparameterization of a binary mask: one score per maskable
// coordinate; sigmoid(score) relaxes the bit, round_mask recovers it.
// Non-maskable tensors carry no scores but stay in the layout so a Mask
// can be produced without extra context.
struct ScoreVector {
    struct Entry {
        std::string name;
        uint64_t numel = 0;
        bool maskable = false;
        std::vector<double> s;  // numel scores when maskable, empty otherwise
    };
    std::vector<Entry> per_tensor;  // canonical order
};

struct LocalizeConfig {
    double sparsity = 0.01;  // target active fraction of the maskable set
    double lambda = 1e-3;    // L1 coefficient on sigmoid(S)
    double lr = 200.0;       // SGD step on S (toy-scale default)
    int epochs = 10;
    int shots = 64;  // per class, drawn from the validation split
    int batch_size = 16;
    double s_high = 3.0;  // init for coordinates active in the seed mask
    double s_low = 0.0;   // init for the rest (sigmoid 0.5, rounds to 0)
    std::vector<std::string> maskable;  // empty = all except *embedding* tensors
    bool auto_lambda = false;
    double auto_tol = 0.25;  // accepted relative deviation from the target
};

struct LossContext {
    ToyArch arch;
    const TaskData* data = nullptr;
    uint64_t seed = 0;
};

// Default maskable filter: every tensor whose name does not contain
// "embedding".
std::vector<std::string> default_maskable(const ParamSet& layout);

// Top-k% of task-vector coordinates by |value|, global across all maskable
// tensors. Exactly round(k/100 * maskable) bits are set; ties at the
// threshold keep the earliest coordinate in canonical (name, index) order.
Mask dataless_localize(const TaskVector& tv, double k_percent,
                       std::vector<std::string> maskable = {});

// bit = sigmoid(S) > 0.5, i.e. S > 0 (S = 0 rounds to inactive).
Mask round_mask(const ScoreVector& S);

// Full objective of trained localization: loss(pre + sigmoid(S) ⊙ tau on
// the maskable set) + lambda * sum(sigmoid(S)). Exposed so tests can check
// the analytic gradient with finite differences.
double localize_objective(const ToyArch& arch, const DenseParams& pre, const DenseParams& tau,
                          const ScoreVector& S, const Batch& b, double lambda);
// dObjective/dS = dLoss/dTheta ⊙ tau ⊙ sigmoid'(S) + lambda * sigmoid'(S);
// returns the batch loss part.
double localize_objective_grad(const ToyArch& arch, const DenseParams& pre,
                               const DenseParams& tau, const ScoreVector& S, const Batch& b,
                               double lambda, ScoreVector& grad);

// Gradient-trained localization: scores start from the dataless mask at the
// target sparsity (active -> s_high, inactive -> s_low) and take
// epochs x batches SGD steps on k-shot validation data.
std::pair<ScoreVector, Mask> train_mask(const TaskVector& tv, const ParamSet& pre,
                                        const LossContext& ctx, const LocalizeConfig& cfg);

// Bisection over log-lambda (at most 12 evaluations of train_mask) until
// the achieved sparsity lands within auto_tol of the target; returns the
// config with the chosen lambda. Throws numeric_error when no lambda in
// [1e-9, 1e-1] brackets the target, reporting the endpoint sparsities.
LocalizeConfig lambda_autosearch(const TaskVector& tv, const ParamSet& pre,
                                 const LossContext& ctx, const LocalizeConfig& cfg);

}  // namespace lns
