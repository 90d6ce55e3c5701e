#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lns/errors.hpp"

namespace lns {

struct Tensor {
    std::string name;
    std::vector<uint32_t> shape;
    std::vector<float> data;

    size_t numel() const {
        size_t n = 1;
        for (uint32_t d : shape) n *= d;
        return n;
    }
};

// Named dense float32 tensors in canonical (lexicographic) order. Immutable
// after construction; the fingerprint is FNV-1a 64 over the canonical PSET
// serialization and is computed once up front.
class ParamSet {
public:
    ParamSet() : fingerprint_(compute_fingerprint()) {}
    explicit ParamSet(std::vector<Tensor> tensors);

    const std::vector<Tensor>& tensors() const { return tensors_; }
    const Tensor* find(std::string_view name) const;
    uint64_t fingerprint() const { return fingerprint_; }

    size_t total_params() const;
    // true when name and shape sets are identical; otherwise *first_offender
    // (if non-null) receives the first differing tensor name
    bool same_layout(const ParamSet& other, std::string* first_offender = nullptr) const;

private:
    uint64_t compute_fingerprint() const;

    std::vector<Tensor> tensors_;
    uint64_t fingerprint_ = 0;
};

// Elementwise difference finetuned - pretrained, tagged with the base
// model's fingerprint so it can never be applied to the wrong base.
struct TaskVector {
    ParamSet delta;
    uint64_t base_fingerprint = 0;
};

struct ScaledDelta {
    double scale;
    const TaskVector* tv;
};

TaskVector compute_task_vector(const ParamSet& pre, const ParamSet& ft);

// out = pre + sum_i scale_i * delta_i, accumulated per coordinate in list
// order in double precision and narrowed to f32 once at the end.
ParamSet apply_delta(const ParamSet& pre, std::span<const ScaledDelta> deltas);

// Nearest model to ft that is exactly representable as pre + f32 delta,
// i.e. the fixed point of ft -> apply_delta(pre, [(1, ft - pre)]). Models
// produced by training are snapped onto this grid so that masking and
// stitching identities can hold bit-exactly.
ParamSet snap_to_base(const ParamSet& pre, const ParamSet& ft);

// PSET v1: magic "PSET", version u32=1, tensor_count u32; per tensor in
// canonical order: name_len u16, name bytes, dtype u8=0 (f32), rank u8,
// dims rank*u32, data numel*f32. Little-endian, no padding.
std::vector<uint8_t> serialize_pset(const ParamSet& p);
void save_pset(const ParamSet& p, const std::string& path);
ParamSet load_pset(const std::string& path);
ParamSet parse_pset(std::span<const uint8_t> bytes);

}  // namespace lns
