#include "lns/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "lns/kernels.hpp"
#include "lns/rng.hpp"

namespace lns {

namespace {

constexpr char kMagic[4] = {'P', 'S', 'E', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "PSET serialization assumes a little-endian host");

template <typename T>
void put(std::vector<uint8_t>& out, T v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
}

std::vector<uint8_t> serialize_tensors(const std::vector<Tensor>& tensors) {
    size_t total = 12;
    for (const Tensor& t : tensors)
        total += 2 + t.name.size() + 2 + t.shape.size() * 4 + t.data.size() * 4;
    std::vector<uint8_t> bytes;
    bytes.reserve(total);
    put(bytes, kMagic[0]); put(bytes, kMagic[1]); put(bytes, kMagic[2]); put(bytes, kMagic[3]);
    put(bytes, kVersion);
    put(bytes, static_cast<uint32_t>(tensors.size()));
    for (const Tensor& t : tensors) {
        put(bytes, static_cast<uint16_t>(t.name.size()));
        bytes.insert(bytes.end(), t.name.begin(), t.name.end());
        put(bytes, static_cast<uint8_t>(0));
        put(bytes, static_cast<uint8_t>(t.shape.size()));
        for (uint32_t d : t.shape) put(bytes, d);
        const auto* p = reinterpret_cast<const uint8_t*>(t.data.data());
        bytes.insert(bytes.end(), p, p + t.data.size() * 4);
    }
    return bytes;
}

// Sequential reader with offset tracking for error reporting.
struct Cursor {
    std::span<const uint8_t> bytes;
    size_t pos = 0;

    template <typename T>
    T take(const char* what) {
        if (pos + sizeof(T) > bytes.size())
            throw format_error(std::string("truncated PSET file while reading ") + what, pos);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }

    std::string take_str(size_t n, const char* what) {
        if (pos + n > bytes.size())
            throw format_error(std::string("truncated PSET file while reading ") + what, pos);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

}  // namespace

ParamSet::ParamSet(std::vector<Tensor> tensors) : tensors_(std::move(tensors)) {
    std::sort(tensors_.begin(), tensors_.end(),
              [](const Tensor& a, const Tensor& b) { return a.name < b.name; });
    for (size_t i = 0; i < tensors_.size(); ++i) {
        const Tensor& t = tensors_[i];
        if (i > 0 && tensors_[i - 1].name == t.name)
            throw mismatch_error("duplicate tensor name '" + t.name + "'");
        if (t.name.empty())
            throw mismatch_error("empty tensor name");
        if (t.name.size() > 0xffff)
            throw mismatch_error("tensor name longer than 65535 bytes");
        if (t.shape.size() > 0xff)
            throw mismatch_error("tensor rank above 255 in '" + t.name + "'");
        uint64_t n = 1;
        for (uint32_t d : t.shape) n *= d;
        if (n >= (1ull << 32))
            throw mismatch_error("tensor '" + t.name + "' exceeds 2^32-1 elements");
        if (n != t.data.size())
            throw mismatch_error("tensor '" + t.name + "' data length " +
                                 std::to_string(t.data.size()) + " does not match shape product " +
                                 std::to_string(n));
    }
    fingerprint_ = compute_fingerprint();
}

const Tensor* ParamSet::find(std::string_view name) const {
    auto it = std::lower_bound(tensors_.begin(), tensors_.end(), name,
                               [](const Tensor& t, std::string_view n) { return t.name < n; });
    if (it == tensors_.end() || it->name != name) return nullptr;
    return &*it;
}

size_t ParamSet::total_params() const {
    size_t n = 0;
    for (const Tensor& t : tensors_) n += t.data.size();
    return n;
}

bool ParamSet::same_layout(const ParamSet& other, std::string* first_offender) const {
    size_t i = 0, j = 0;
    while (i < tensors_.size() && j < other.tensors_.size()) {
        const Tensor& a = tensors_[i];
        const Tensor& b = other.tensors_[j];
        if (a.name != b.name) {
            if (first_offender) *first_offender = std::min(a.name, b.name);
            return false;
        }
        if (a.shape != b.shape) {
            if (first_offender) *first_offender = a.name;
            return false;
        }
        ++i, ++j;
    }
    if (i < tensors_.size() || j < other.tensors_.size()) {
        if (first_offender)
            *first_offender =
                i < tensors_.size() ? tensors_[i].name : other.tensors_[j].name;
        return false;
    }
    return true;
}

uint64_t ParamSet::compute_fingerprint() const {
    std::vector<uint8_t> bytes = serialize_tensors(tensors_);
    return fnv1a64(bytes.data(), bytes.size());
}

std::vector<uint8_t> serialize_pset(const ParamSet& p) {
    return serialize_tensors(p.tensors());
}

void save_pset(const ParamSet& p, const std::string& path) {
    for (const Tensor& t : p.tensors())
        for (size_t i = 0; i < t.data.size(); ++i)
            if (!std::isfinite(t.data[i]))
                throw format_error("refusing to save non-finite value in tensor '" + t.name + "'",
                                   i * 4);
    std::vector<uint8_t> bytes = serialize_pset(p);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw error("cannot open '" + path + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw error("short write to '" + path + "'");
}

ParamSet parse_pset(std::span<const uint8_t> bytes) {
    Cursor c{bytes};
    char magic[4];
    for (char& ch : magic) ch = c.take<char>("magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw format_error("bad PSET magic", 0);
    uint32_t version = c.take<uint32_t>("version");
    if (version != kVersion)
        throw format_error("unsupported PSET version " + std::to_string(version), 4);
    uint32_t count = c.take<uint32_t>("tensor count");

    std::vector<Tensor> tensors;
    tensors.reserve(count);
    for (uint32_t ti = 0; ti < count; ++ti) {
        Tensor t;
        uint16_t name_len = c.take<uint16_t>("name length");
        t.name = c.take_str(name_len, "tensor name");
        uint8_t dtype = c.take<uint8_t>("dtype");
        if (dtype != 0)
            throw format_error("unsupported dtype " + std::to_string(dtype) + " in tensor '" +
                                   t.name + "'",
                               c.pos - 1);
        uint8_t rank = c.take<uint8_t>("rank");
        uint64_t numel = 1;
        for (uint8_t r = 0; r < rank; ++r) {
            uint32_t d = c.take<uint32_t>("dim");
            t.shape.push_back(d);
            numel *= d;
            if (numel >= (1ull << 32))
                throw format_error("tensor '" + t.name + "' exceeds 2^32-1 elements", c.pos);
        }
        t.data.resize(numel);
        size_t data_off = c.pos;
        if (c.pos + numel * 4 > bytes.size())
            throw format_error("truncated PSET file in data of tensor '" + t.name + "'", c.pos);
        std::memcpy(t.data.data(), bytes.data() + c.pos, numel * 4);
        c.pos += numel * 4;
        for (size_t i = 0; i < t.data.size(); ++i)
            if (!std::isfinite(t.data[i]))
                throw format_error("non-finite value in tensor '" + t.name + "'", data_off + i * 4);
        tensors.push_back(std::move(t));
    }
    if (c.pos != bytes.size())
        throw format_error("trailing bytes after last tensor", c.pos);
    try {
        return ParamSet(std::move(tensors));  // re-canonicalizes order
    } catch (const mismatch_error& e) {
        throw format_error(e.what(), 12);
    }
}

ParamSet load_pset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw error("cannot open '" + path + "' for reading");
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return parse_pset(bytes);
}

TaskVector compute_task_vector(const ParamSet& pre, const ParamSet& ft) {
    std::string offender;
    if (!pre.same_layout(ft, &offender))
        throw mismatch_error("pretrained/finetuned layout mismatch at tensor '" + offender + "'");
    std::vector<Tensor> out;
    out.reserve(pre.tensors().size());
    for (size_t i = 0; i < pre.tensors().size(); ++i) {
        const Tensor& p = pre.tensors()[i];
        const Tensor& f = ft.tensors()[i];
        Tensor d{p.name, p.shape, std::vector<float>(p.data.size())};
        kern::ops().sub_f32(f.data.data(), p.data.data(), d.data.data(), d.data.size());
        out.push_back(std::move(d));
    }
    return TaskVector{ParamSet(std::move(out)), pre.fingerprint()};
}

ParamSet apply_delta(const ParamSet& pre, std::span<const ScaledDelta> deltas) {
    for (const ScaledDelta& sd : deltas) {
        if (sd.tv->base_fingerprint != pre.fingerprint())
            throw mismatch_error("task vector base fingerprint does not match the pretrained model");
        std::string offender;
        if (!pre.same_layout(sd.tv->delta, &offender))
            throw mismatch_error("task vector layout mismatch at tensor '" + offender + "'");
    }
    std::vector<Tensor> out;
    out.reserve(pre.tensors().size());
    std::vector<double> acc;
    for (size_t ti = 0; ti < pre.tensors().size(); ++ti) {
        const Tensor& p = pre.tensors()[ti];
        acc.resize(p.data.size());
        kern::ops().widen(p.data.data(), acc.data(), acc.size());
        for (const ScaledDelta& sd : deltas) {
            const Tensor& d = sd.tv->delta.tensors()[ti];
            kern::ops().axpy_wf64(sd.scale, d.data.data(), acc.data(), acc.size());
        }
        Tensor o{p.name, p.shape, std::vector<float>(p.data.size())};
        kern::ops().narrow(acc.data(), o.data.data(), o.data.size());
        out.push_back(std::move(o));
    }
    return ParamSet(std::move(out));
}

ParamSet snap_to_base(const ParamSet& pre, const ParamSet& ft) {
    TaskVector tv = compute_task_vector(pre, ft);
    ScaledDelta sd{1.0, &tv};
    return apply_delta(pre, std::span<const ScaledDelta>(&sd, 1));
}

}  // namespace lns
