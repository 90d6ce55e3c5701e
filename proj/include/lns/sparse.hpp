#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "lns/params.hpp"

namespace lns {

// Bit-set over one tensor's coordinates, LSB-first within each byte.
struct MaskTensor {
    std::string name;
    uint64_t numel = 0;
    std::vector<uint8_t> bits;  // ceil(numel/8) bytes, trailing bits zero

    bool get(uint64_t i) const { return (bits[i >> 3] >> (i & 7)) & 1; }
    void set(uint64_t i, bool v) {
        uint8_t m = static_cast<uint8_t>(1u << (i & 7));
        if (v) bits[i >> 3] |= m; else bits[i >> 3] &= static_cast<uint8_t>(~m);
    }
    uint64_t popcount() const;
};

// Binary localization mask over a model's parameter layout. Tensors outside
// maskable_set always carry all-zero bits; sparsity is counted against the
// maskable parameters only.
struct Mask {
    std::vector<MaskTensor> per_tensor;  // canonical (lexicographic) order
    std::vector<std::string> maskable_set;

    uint64_t popcount() const;
    uint64_t maskable_params() const;
    double sparsity() const;  // active / maskable, 0 when nothing is maskable
    bool same_layout(const Mask& other) const;
    bool is_maskable(const std::string& name) const;
};

// Layout skeleton taken from a ParamSet; all bits clear. Empty maskable
// list means every tensor is maskable.
Mask make_mask(const ParamSet& layout, std::vector<std::string> maskable = {});

struct SparseTensor {
    std::string name;
    uint64_t numel = 0;
    std::vector<uint32_t> indices;  // strictly increasing, < numel
    std::vector<float> values;
};

// gamma ⊙ tau stored as sorted index/value pairs: the compression artifact.
// Support is defined by the mask, so explicit zeros are kept.
struct SparseTaskVector {
    std::vector<SparseTensor> per_tensor;  // canonical order
    uint64_t base_fingerprint = 0;

    uint64_t nnz() const;
    bool same_layout(const SparseTaskVector& other) const;
};

SparseTaskVector mask_apply(const Mask& m, const TaskVector& tv);

// Inverse of mask_apply against a layout template: zeros everywhere except
// the stored pairs.
TaskVector densify(const SparseTaskVector& s, const ParamSet& layout_template);

// |a ∩ b| / |a ∪ b| over all mask bits; 0 when the union is empty.
double mask_jaccard(const Mask& a, const Mask& b);

// Cosine of the two value vectors restricted to the intersection of their
// supports; 0 when the intersection is empty or either restriction has
// zero norm.
double masked_cosine(const SparseTaskVector& a, const SparseTaskVector& b);

// Per group: active bits in group / total active bits. Every tensor name
// must be mapped.
std::vector<std::pair<std::string, double>> mask_distribution(
    const Mask& m, const std::unordered_map<std::string, std::string>& grouping);

// MASK v1: magic "MASK", version u32=1, tensor_count u32; per tensor:
// name_len u16, name, numel u64, packed bits. The maskable filter is not
// part of the format; load_mask marks every tensor maskable.
void save_mask(const Mask& m, const std::string& path);
Mask load_mask(const std::string& path);
std::vector<uint8_t> serialize_mask(const Mask& m);

// SPTV v1: magic "SPTV", version u32=1, base_fingerprint u64,
// tensor_count u32; per tensor: name_len u16, name, numel u64, nnz u64,
// indices nnz*u32 ascending, values nnz*f32.
void save_sptv(const SparseTaskVector& s, const std::string& path);
SparseTaskVector load_sptv(const std::string& path);
std::vector<uint8_t> serialize_sptv(const SparseTaskVector& s);

struct CompressionReport {
    uint64_t dense_bytes = 0;
    uint64_t sparse_bytes = 0;
    double ratio = 0.0;
};

// Serialized-size accounting for the dense checkpoint delta vs its sparse form.
CompressionReport compression_report(const ParamSet& dense, const SparseTaskVector& s);

}  // namespace lns
