#include "lns/sparse.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lns/rng.hpp"

namespace lns {

namespace {

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

struct Cursor {
    std::span<const uint8_t> bytes;
    size_t pos = 0;
    const char* kind;

    template <typename T>
    T take(const char* what) {
        if (pos + sizeof(T) > bytes.size())
            throw format_error(std::string("truncated ") + kind + " file while reading " + what,
                               pos);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }

    std::string take_str(size_t n, const char* what) {
        if (pos + n > bytes.size())
            throw format_error(std::string("truncated ") + kind + " file while reading " + what,
                               pos);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw error("cannot open '" + path + "' for reading");
    return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                                std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw error("short write to '" + path + "'");
}

void sort_canonical_mask(std::vector<MaskTensor>& v) {
    std::sort(v.begin(), v.end(),
              [](const MaskTensor& a, const MaskTensor& b) { return a.name < b.name; });
}

}  // namespace

uint64_t MaskTensor::popcount() const {
    uint64_t n = 0;
    for (uint8_t b : bits) n += std::popcount(b);
    return n;
}

uint64_t Mask::popcount() const {
    uint64_t n = 0;
    for (const MaskTensor& t : per_tensor) n += t.popcount();
    return n;
}

bool Mask::is_maskable(const std::string& name) const {
    return std::find(maskable_set.begin(), maskable_set.end(), name) != maskable_set.end();
}

uint64_t Mask::maskable_params() const {
    uint64_t n = 0;
    for (const MaskTensor& t : per_tensor)
        if (is_maskable(t.name)) n += t.numel;
    return n;
}

double Mask::sparsity() const {
    uint64_t total = maskable_params();
    if (total == 0) return 0.0;
    return static_cast<double>(popcount()) / static_cast<double>(total);
}

bool Mask::same_layout(const Mask& other) const {
    if (per_tensor.size() != other.per_tensor.size()) return false;
    for (size_t i = 0; i < per_tensor.size(); ++i)
        if (per_tensor[i].name != other.per_tensor[i].name ||
            per_tensor[i].numel != other.per_tensor[i].numel)
            return false;
    return true;
}

Mask make_mask(const ParamSet& layout, std::vector<std::string> maskable) {
    Mask m;
    for (const Tensor& t : layout.tensors()) {
        MaskTensor mt;
        mt.name = t.name;
        mt.numel = t.data.size();
        mt.bits.assign((mt.numel + 7) / 8, 0);
        m.per_tensor.push_back(std::move(mt));
    }
    if (maskable.empty())
        for (const Tensor& t : layout.tensors()) maskable.push_back(t.name);
    m.maskable_set = std::move(maskable);
    return m;
}

uint64_t SparseTaskVector::nnz() const {
    uint64_t n = 0;
    for (const SparseTensor& t : per_tensor) n += t.indices.size();
    return n;
}

bool SparseTaskVector::same_layout(const SparseTaskVector& other) const {
    if (per_tensor.size() != other.per_tensor.size()) return false;
    for (size_t i = 0; i < per_tensor.size(); ++i)
        if (per_tensor[i].name != other.per_tensor[i].name ||
            per_tensor[i].numel != other.per_tensor[i].numel)
            return false;
    return true;
}

SparseTaskVector mask_apply(const Mask& m, const TaskVector& tv) {
    if (m.per_tensor.size() != tv.delta.tensors().size())
        throw mismatch_error("mask and task vector tensor counts differ");
    SparseTaskVector out;
    out.base_fingerprint = tv.base_fingerprint;
    for (size_t i = 0; i < m.per_tensor.size(); ++i) {
        const MaskTensor& mt = m.per_tensor[i];
        const Tensor& dt = tv.delta.tensors()[i];
        if (mt.name != dt.name || mt.numel != dt.data.size())
            throw mismatch_error("mask/task vector layout mismatch at tensor '" + dt.name + "'");
        SparseTensor st;
        st.name = mt.name;
        st.numel = mt.numel;
        uint64_t active = mt.popcount();
        st.indices.reserve(active);
        st.values.reserve(active);
        for (uint64_t j = 0; j < mt.numel; ++j) {
            if (mt.get(j)) {
                st.indices.push_back(static_cast<uint32_t>(j));
                st.values.push_back(dt.data[j]);
            }
        }
        out.per_tensor.push_back(std::move(st));
    }
    return out;
}

TaskVector densify(const SparseTaskVector& s, const ParamSet& layout_template) {
    std::vector<Tensor> out;
    out.reserve(layout_template.tensors().size());
    size_t si = 0;
    for (const Tensor& t : layout_template.tensors()) {
        Tensor d{t.name, t.shape, std::vector<float>(t.data.size(), 0.0f)};
        if (si < s.per_tensor.size() && s.per_tensor[si].name == t.name) {
            const SparseTensor& st = s.per_tensor[si];
            if (st.numel != t.data.size())
                throw mismatch_error("sparse tensor '" + st.name + "' numel " +
                                     std::to_string(st.numel) + " does not match template");
            for (size_t k = 0; k < st.indices.size(); ++k) {
                uint32_t idx = st.indices[k];
                if (idx >= st.numel)
                    throw format_error("index " + std::to_string(idx) + " out of range in tensor '" +
                                           st.name + "'",
                                       0);
                d.data[idx] = st.values[k];
            }
            ++si;
        }
        out.push_back(std::move(d));
    }
    if (si != s.per_tensor.size())
        throw mismatch_error("sparse tensor '" + s.per_tensor[si].name +
                             "' is not part of the template layout");
    return TaskVector{ParamSet(std::move(out)), s.base_fingerprint};
}

double mask_jaccard(const Mask& a, const Mask& b) {
    if (!a.same_layout(b)) throw mismatch_error("mask layouts differ");
    uint64_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.per_tensor.size(); ++i) {
        const auto& ba = a.per_tensor[i].bits;
        const auto& bb = b.per_tensor[i].bits;
        for (size_t j = 0; j < ba.size(); ++j) {
            inter += std::popcount(static_cast<uint8_t>(ba[j] & bb[j]));
            uni += std::popcount(static_cast<uint8_t>(ba[j] | bb[j]));
        }
    }
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double masked_cosine(const SparseTaskVector& a, const SparseTaskVector& b) {
    if (!a.same_layout(b)) throw mismatch_error("sparse task vector layouts differ");
    if (a.base_fingerprint != b.base_fingerprint)
        throw mismatch_error("sparse task vectors come from different base models");
    double dot = 0.0, na = 0.0, nb = 0.0;
    bool any = false;
    for (size_t t = 0; t < a.per_tensor.size(); ++t) {
        const SparseTensor& sa = a.per_tensor[t];
        const SparseTensor& sb = b.per_tensor[t];
        size_t i = 0, j = 0;
        while (i < sa.indices.size() && j < sb.indices.size()) {
            if (sa.indices[i] < sb.indices[j]) ++i;
            else if (sa.indices[i] > sb.indices[j]) ++j;
            else {
                double va = sa.values[i], vb = sb.values[j];
                dot += va * vb;
                na += va * va;
                nb += vb * vb;
                any = true;
                ++i, ++j;
            }
        }
    }
    if (!any || na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<std::pair<std::string, double>> mask_distribution(
    const Mask& m, const std::unordered_map<std::string, std::string>& grouping) {
    std::vector<std::pair<std::string, uint64_t>> counts;  // insertion-ordered by group
    auto bump = [&](const std::string& g, uint64_t n) {
        for (auto& [name, c] : counts)
            if (name == g) { c += n; return; }
        counts.emplace_back(g, n);
    };
    uint64_t total = 0;
    for (const MaskTensor& t : m.per_tensor) {
        auto it = grouping.find(t.name);
        if (it == grouping.end())
            throw mismatch_error("tensor '" + t.name + "' has no group mapping");
        uint64_t n = t.popcount();
        bump(it->second, n);
        total += n;
    }
    std::vector<std::pair<std::string, double>> out;
    out.reserve(counts.size());
    for (const auto& [g, n] : counts)
        out.emplace_back(g, total == 0 ? 0.0
                                       : static_cast<double>(n) / static_cast<double>(total));
    return out;
}

std::vector<uint8_t> serialize_mask(const Mask& m) {
    std::vector<uint8_t> bytes;
    put(bytes, 'M'); put(bytes, 'A'); put(bytes, 'S'); put(bytes, 'K');
    put(bytes, static_cast<uint32_t>(1));
    put(bytes, static_cast<uint32_t>(m.per_tensor.size()));
    for (const MaskTensor& t : m.per_tensor) {
        put(bytes, static_cast<uint16_t>(t.name.size()));
        bytes.insert(bytes.end(), t.name.begin(), t.name.end());
        put(bytes, t.numel);
        bytes.insert(bytes.end(), t.bits.begin(), t.bits.end());
    }
    return bytes;
}

void save_mask(const Mask& m, const std::string& path) {
    write_file(path, serialize_mask(m));
}

Mask load_mask(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    Cursor c{bytes, 0, "MASK"};
    char magic[4];
    for (char& ch : magic) ch = c.take<char>("magic");
    if (std::memcmp(magic, "MASK", 4) != 0) throw format_error("bad MASK magic", 0);
    uint32_t version = c.take<uint32_t>("version");
    if (version != 1)
        throw format_error("unsupported MASK version " + std::to_string(version), 4);
    uint32_t count = c.take<uint32_t>("tensor count");
    Mask m;
    for (uint32_t i = 0; i < count; ++i) {
        MaskTensor t;
        uint16_t name_len = c.take<uint16_t>("name length");
        t.name = c.take_str(name_len, "tensor name");
        t.numel = c.take<uint64_t>("numel");
        size_t nbytes = (t.numel + 7) / 8;
        if (c.pos + nbytes > bytes.size())
            throw format_error("truncated MASK file in bits of tensor '" + t.name + "'", c.pos);
        t.bits.assign(bytes.begin() + static_cast<long>(c.pos),
                      bytes.begin() + static_cast<long>(c.pos + nbytes));
        c.pos += nbytes;
        if (t.numel % 8 != 0 && !t.bits.empty()) {
            uint8_t tail = t.bits.back() >> (t.numel % 8);
            if (tail != 0)
                throw format_error("nonzero trailing bits in tensor '" + t.name + "'", c.pos - 1);
        }
        m.per_tensor.push_back(std::move(t));
        m.maskable_set.push_back(m.per_tensor.back().name);
    }
    if (c.pos != bytes.size()) throw format_error("trailing bytes after last tensor", c.pos);
    sort_canonical_mask(m.per_tensor);
    for (size_t i = 1; i < m.per_tensor.size(); ++i)
        if (m.per_tensor[i - 1].name == m.per_tensor[i].name)
            throw format_error("duplicate tensor name '" + m.per_tensor[i].name + "'", 12);
    std::sort(m.maskable_set.begin(), m.maskable_set.end());
    return m;
}

std::vector<uint8_t> serialize_sptv(const SparseTaskVector& s) {
    std::vector<uint8_t> bytes;
    put(bytes, 'S'); put(bytes, 'P'); put(bytes, 'T'); put(bytes, 'V');
    put(bytes, static_cast<uint32_t>(1));
    put(bytes, s.base_fingerprint);
    put(bytes, static_cast<uint32_t>(s.per_tensor.size()));
    for (const SparseTensor& t : s.per_tensor) {
        put(bytes, static_cast<uint16_t>(t.name.size()));
        bytes.insert(bytes.end(), t.name.begin(), t.name.end());
        put(bytes, t.numel);
        put(bytes, static_cast<uint64_t>(t.indices.size()));
        const auto* pi = reinterpret_cast<const uint8_t*>(t.indices.data());
        bytes.insert(bytes.end(), pi, pi + t.indices.size() * 4);
        const auto* pv = reinterpret_cast<const uint8_t*>(t.values.data());
        bytes.insert(bytes.end(), pv, pv + t.values.size() * 4);
    }
    return bytes;
}

void save_sptv(const SparseTaskVector& s, const std::string& path) {
    write_file(path, serialize_sptv(s));
}

SparseTaskVector load_sptv(const std::string& path) {
    std::vector<uint8_t> bytes = read_file(path);
    Cursor c{bytes, 0, "SPTV"};
    char magic[4];
    for (char& ch : magic) ch = c.take<char>("magic");
    if (std::memcmp(magic, "SPTV", 4) != 0) throw format_error("bad SPTV magic", 0);
    uint32_t version = c.take<uint32_t>("version");
    if (version != 1)
        throw format_error("unsupported SPTV version " + std::to_string(version), 4);
    SparseTaskVector s;
    s.base_fingerprint = c.take<uint64_t>("base fingerprint");
    uint32_t count = c.take<uint32_t>("tensor count");
    for (uint32_t i = 0; i < count; ++i) {
        SparseTensor t;
        uint16_t name_len = c.take<uint16_t>("name length");
        t.name = c.take_str(name_len, "tensor name");
        t.numel = c.take<uint64_t>("numel");
        uint64_t nnz = c.take<uint64_t>("nnz");
        if (nnz > t.numel)
            throw format_error("nnz exceeds numel in tensor '" + t.name + "'", c.pos - 8);
        if (c.pos + nnz * 8 > bytes.size())
            throw format_error("truncated SPTV file in tensor '" + t.name + "'", c.pos);
        t.indices.resize(nnz);
        std::memcpy(t.indices.data(), bytes.data() + c.pos, nnz * 4);
        c.pos += nnz * 4;
        size_t val_off = c.pos;
        t.values.resize(nnz);
        std::memcpy(t.values.data(), bytes.data() + c.pos, nnz * 4);
        c.pos += nnz * 4;
        for (uint64_t k = 0; k < nnz; ++k) {
            if (t.indices[k] >= t.numel)
                throw format_error("index out of range in tensor '" + t.name + "'",
                                   val_off - nnz * 4 + k * 4);
            if (k > 0 && t.indices[k] <= t.indices[k - 1])
                throw format_error("indices not strictly increasing in tensor '" + t.name + "'",
                                   val_off - nnz * 4 + k * 4);
            if (!std::isfinite(t.values[k]))
                throw format_error("non-finite value in tensor '" + t.name + "'", val_off + k * 4);
        }
        s.per_tensor.push_back(std::move(t));
    }
    if (c.pos != bytes.size()) throw format_error("trailing bytes after last tensor", c.pos);
    std::sort(s.per_tensor.begin(), s.per_tensor.end(),
              [](const SparseTensor& a, const SparseTensor& b) { return a.name < b.name; });
    for (size_t i = 1; i < s.per_tensor.size(); ++i)
        if (s.per_tensor[i - 1].name == s.per_tensor[i].name)
            throw format_error("duplicate tensor name '" + s.per_tensor[i].name + "'", 16);
    return s;
}

CompressionReport compression_report(const ParamSet& dense, const SparseTaskVector& s) {
    CompressionReport r;
    r.dense_bytes = serialize_pset(dense).size();
    r.sparse_bytes = serialize_sptv(s).size();
    r.ratio = r.dense_bytes == 0
                  ? 0.0
                  : static_cast<double>(r.sparse_bytes) / static_cast<double>(r.dense_bytes);
    return r;
}

}  // namespace lns
