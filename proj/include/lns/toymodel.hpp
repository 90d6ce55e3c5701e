#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lns/params.hpp"

namespace lns {

// MLP: blocks of [affine -> LayerNorm -> ReLU], then an affine head into
// softmax cross-entropy. Tensor names follow
//   block{i}.linear.w [hidden, in], block{i}.linear.b [hidden],
//   block{i}.ln.g [hidden], block{i}.ln.b [hidden],
//   head.w [classes, hidden], head.b [classes].
struct ToyArch {
    uint32_t d_in = 32;
    uint32_t hidden = 64;
    uint32_t blocks = 2;
    uint32_t classes = 4;

    static constexpr double kLnEpsilon = 1e-5;

    std::vector<std::pair<std::string, std::vector<uint32_t>>> tensor_layout() const;
    ParamSet init_params(uint64_t seed) const;
    void check_layout(const ParamSet& p) const;  // throws mismatch_error
    size_t param_count() const;
};

// One data split; x is n rows of d_in features, row-major float32.
struct Split {
    std::vector<float> x;
    std::vector<uint16_t> y;
    size_t n = 0;
};

struct TaskData {
    Split train, val, test;
    uint32_t d_in = 0;
    uint32_t classes = 0;
    uint64_t seed = 0;
};

struct Batch {
    const float* x = nullptr;
    const uint16_t* y = nullptr;
    size_t n = 0;
    size_t d = 0;
};

inline Batch whole(const Split& s, uint32_t d_in) { return Batch{s.x.data(), s.y.data(), s.n, d_in}; }

// f64 working copy of the parameters, tensor order matching the ParamSet.
struct DenseParams {
    std::vector<std::vector<double>> t;
};

DenseParams widen_params(const ToyArch& arch, const ParamSet& p);
ParamSet narrow_params(const ToyArch& arch, const DenseParams& d);

// Mean cross-entropy over the batch plus the argmax-correct count
// (ties resolve to the lowest class index). Computation is f64 throughout.
std::pair<double, size_t> forward_loss(const ToyArch& arch, const ParamSet& p, const Batch& b);
double forward_loss_f64(const ToyArch& arch, const DenseParams& p, const Batch& b,
                        size_t* correct = nullptr);

// Analytic gradient of the mean batch loss w.r.t. every parameter.
ParamSet backward(const ToyArch& arch, const ParamSet& p, const Batch& b);
// f64 variant; grad is resized/zeroed inside. Returns the batch loss.
double backward_f64(const ToyArch& arch, const DenseParams& p, const Batch& b, DenseParams& grad);

// Active/inactive flag per (block, example, unit) ReLU, row-major. A
// finite-difference probe is only a valid gradient oracle when both probe
// endpoints share the unperturbed activation pattern (no kink inside the
// interval); callers use this to filter probe coordinates.
std::vector<uint8_t> relu_pattern(const ToyArch& arch, const DenseParams& p, const Batch& b);

// Inputs feeding each affine layer for this batch (f64, n rows per layer),
// keyed by the layer's weight tensor name. Used by activation-matching
// mergers.
std::vector<std::pair<std::string, std::vector<double>>> affine_inputs(const ToyArch& arch,
                                                                       const DenseParams& p,
                                                                       const Batch& b);

// Plain SGD on f64 master weights; deterministic given the seed. The result
// is snapped onto the init-reconstructible f32 grid (see snap_to_base), so
// checkpoints always round-trip bit-exactly through task vectors.
ParamSet sgd_finetune(const ToyArch& arch, const ParamSet& init, const TaskData& data, double lr,
                      int epochs, int batch_size, uint64_t seed);

double evaluate(const ToyArch& arch, const ParamSet& p, const Split& split);

// Deterministic epoch shuffling and k-shot selection.
std::vector<size_t> epoch_order(size_t n, uint64_t seed, int epoch);
Split kshot_subset(const TaskData& data, int shots_per_class, uint64_t seed);

// Synthetic multi-task suite: each task owns `classes` Gaussian clusters in
// a shared input space; the pretrain task is the mixture of every cluster
// under generic (pseudo-random) labels. With `conflict`, task 1 reuses task
// 0's clusters with labels cycled by one, so averaging the two finetuned
// models disagrees coordinate-wise.
struct SuiteConfig {
    uint32_t n_tasks = 6;
    uint32_t d_in = 32;
    uint32_t hidden = 64;
    uint32_t blocks = 2;
    uint32_t classes = 4;
    int train_per_class = 128;
    int val_per_class = 256;
    int test_per_class = 250;
    double center_scale = 2.0;
    double noise = 0.5;
    bool conflict = false;
    uint64_t seed = 0;
    double ft_lr = 0.05;
    int ft_epochs = 30;
    int ft_batch = 16;
    int pre_epochs = 30;

    ToyArch arch() const { return ToyArch{d_in, hidden, blocks, classes}; }
};

struct TaskSuite {
    SuiteConfig cfg;
    std::vector<TaskData> tasks;
    TaskData pretrain;
};

TaskSuite gen_task_suite(const SuiteConfig& cfg);

// CSV ingestion, header "label,f0,...,f{d-1}"; rows are shuffled with the
// seed and split train/val/test by the given fractions.
TaskData load_task_csv(const std::string& path, double train_frac, double val_frac, uint64_t seed);

}  // namespace lns
