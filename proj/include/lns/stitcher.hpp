#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lns/sparse.hpp"

namespace lns {

// Per-coordinate active-task counts over the union support; gamma_i'[k] of
// the stitching rule is gamma_i[k] / count[k].
struct StitchWeights {
    struct TensorCounts {
        std::string name;
        uint64_t numel = 0;
        std::vector<uint32_t> idx;    // sorted union support
        std::vector<uint32_t> count;  // >= 1, parallel to idx
    };
    std::vector<TensorCounts> per_tensor;

    uint64_t union_support() const;
};

// Incremental stitching state: the pretrained base, the stored sparse task
// vectors, and per-coordinate (count, sum) over the union support. Sums are
// f64 and always accumulated in ascending task-id order, so the merged
// model is bit-identical no matter in which order tasks were added or
// removed, and bit-identical to a from-scratch stitch.
class StitchState {
public:
    explicit StitchState(ParamSet pre);

    // Adding the highest id so far is O(union + nnz): the running sums are
    // extended in place. Other mutations rebuild the affected sums from the
    // stored vectors (never mutating them).
    void add(uint32_t task_id, SparseTaskVector sptv);
    void remove(uint32_t task_id);

    ParamSet merged() const;
    StitchWeights weights() const;

    const ParamSet& pretrained() const { return pre_; }
    std::vector<uint32_t> task_ids() const;
    const SparseTaskVector& task(uint32_t id) const;

    // true when the incremental (count, sum) tables match a from-scratch
    // rebuild bit-for-bit
    bool verify() const;

    // directory layout: pretrained.pset, task_<id>.sptv, manifest.json
    void save(const std::string& dir) const;
    static StitchState load(const std::string& dir);

private:
    struct UnionTensor {
        std::vector<uint32_t> idx;
        std::vector<uint32_t> count;
        std::vector<double> sum;
    };

    void validate(const SparseTaskVector& sptv) const;
    // merge one more task's support into the running (idx, count, sum) table
    static void fold_into(std::vector<UnionTensor>& target, const SparseTaskVector& sptv);
    std::vector<UnionTensor> fold_all() const;  // from scratch, ascending ids

    ParamSet pre_;
    std::map<uint32_t, SparseTaskVector> tasks_;
    std::vector<UnionTensor> union_;
};

// theta_merged = theta_pre + sum_i gamma_i' ⊙ tau_i with overlap counts as
// above; tasks are numbered by list position. There is no scaling
// hyperparameter in this method.
std::pair<ParamSet, StitchWeights> stitch(const ParamSet& pre,
                                          std::span<const SparseTaskVector> tvs);

// pre + densified s; identical to stitching a single task.
ParamSet graft(const ParamSet& pre, const SparseTaskVector& s);

}  // namespace lns
