#include "lns/stitcher.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "lns/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lns {

uint64_t StitchWeights::union_support() const {
    uint64_t n = 0;
    for (const TensorCounts& t : per_tensor) n += t.idx.size();
    return n;
}

StitchState::StitchState(ParamSet pre) : pre_(std::move(pre)) {
    union_.resize(pre_.tensors().size());
}

void StitchState::validate(const SparseTaskVector& sptv) const {
    if (sptv.base_fingerprint != pre_.fingerprint())
        throw mismatch_error("sparse task vector base fingerprint does not match the pretrained model");
    if (sptv.per_tensor.size() != pre_.tensors().size())
        throw mismatch_error("sparse task vector tensor count does not match the pretrained model");
    for (size_t i = 0; i < sptv.per_tensor.size(); ++i) {
        const SparseTensor& st = sptv.per_tensor[i];
        const Tensor& t = pre_.tensors()[i];
        if (st.name != t.name || st.numel != t.data.size())
            throw mismatch_error("sparse task vector layout mismatch at tensor '" + st.name + "'");
    }
}

void StitchState::fold_into(std::vector<UnionTensor>& target, const SparseTaskVector& sptv) {
    for (size_t ti = 0; ti < target.size(); ++ti) {
        UnionTensor& u = target[ti];
        const SparseTensor& st = sptv.per_tensor[ti];
        if (st.indices.empty()) continue;
        UnionTensor merged;
        merged.idx.reserve(u.idx.size() + st.indices.size());
        merged.count.reserve(u.idx.size() + st.indices.size());
        merged.sum.reserve(u.idx.size() + st.indices.size());
        size_t a = 0, b = 0;
        while (a < u.idx.size() || b < st.indices.size()) {
            bool take_old = b >= st.indices.size() ||
                            (a < u.idx.size() && u.idx[a] < st.indices[b]);
            bool take_new = a >= u.idx.size() ||
                            (b < st.indices.size() && st.indices[b] < u.idx[a]);
            if (take_old) {
                merged.idx.push_back(u.idx[a]);
                merged.count.push_back(u.count[a]);
                merged.sum.push_back(u.sum[a]);
                ++a;
            } else if (take_new) {
                merged.idx.push_back(st.indices[b]);
                merged.count.push_back(1);
                merged.sum.push_back(static_cast<double>(st.values[b]));
                ++b;
            } else {
                merged.idx.push_back(u.idx[a]);
                merged.count.push_back(u.count[a] + 1);
                merged.sum.push_back(u.sum[a] + static_cast<double>(st.values[b]));
                ++a, ++b;
            }
        }
        target[ti] = std::move(merged);
    }
}

std::vector<StitchState::UnionTensor> StitchState::fold_all() const {
    std::vector<UnionTensor> fresh(union_.size());
    for (const auto& [id, sptv] : tasks_) fold_into(fresh, sptv);  // map iterates ascending
    return fresh;
}

void StitchState::add(uint32_t task_id, SparseTaskVector sptv) {
    validate(sptv);
    if (tasks_.count(task_id) != 0)
        throw mismatch_error("task id " + std::to_string(task_id) + " already stitched");
    bool is_largest = tasks_.empty() || task_id > tasks_.rbegin()->first;
    tasks_.emplace(task_id, std::move(sptv));
    if (is_largest) {
        fold_into(union_, tasks_.at(task_id));
    } else {
        // mid-order insert: the running sums are order-sensitive, rebuild
        union_ = fold_all();
    }
}

void StitchState::remove(uint32_t task_id) {
    auto it = tasks_.find(task_id);
    if (it == tasks_.end())
        throw mismatch_error("task id " + std::to_string(task_id) + " is not stitched");
    tasks_.erase(it);
    union_ = fold_all();
}

ParamSet StitchState::merged() const {
    std::vector<Tensor> out;
    out.reserve(pre_.tensors().size());
    for (size_t ti = 0; ti < pre_.tensors().size(); ++ti) {
        Tensor t = pre_.tensors()[ti];  // coordinates off the union stay bit-equal to pre
        const UnionTensor& u = union_[ti];
        for (size_t k = 0; k < u.idx.size(); ++k) {
            double v = static_cast<double>(t.data[u.idx[k]]) +
                       u.sum[k] / static_cast<double>(u.count[k]);
            t.data[u.idx[k]] = static_cast<float>(v);
        }
        out.push_back(std::move(t));
    }
    return ParamSet(std::move(out));
}

StitchWeights StitchState::weights() const {
    StitchWeights w;
    w.per_tensor.reserve(union_.size());
    for (size_t ti = 0; ti < union_.size(); ++ti) {
        StitchWeights::TensorCounts tc;
        tc.name = pre_.tensors()[ti].name;
        tc.numel = pre_.tensors()[ti].data.size();
        tc.idx = union_[ti].idx;
        tc.count = union_[ti].count;
        w.per_tensor.push_back(std::move(tc));
    }
    return w;
}

std::vector<uint32_t> StitchState::task_ids() const {
    std::vector<uint32_t> ids;
    ids.reserve(tasks_.size());
    for (const auto& [id, sptv] : tasks_) ids.push_back(id);
    return ids;
}

const SparseTaskVector& StitchState::task(uint32_t id) const {
    auto it = tasks_.find(id);
    if (it == tasks_.end())
        throw mismatch_error("task id " + std::to_string(id) + " is not stitched");
    return it->second;
}

bool StitchState::verify() const {
    std::vector<UnionTensor> fresh = fold_all();
    for (size_t ti = 0; ti < union_.size(); ++ti) {
        if (union_[ti].idx != fresh[ti].idx) return false;
        if (union_[ti].count != fresh[ti].count) return false;
        if (union_[ti].sum.size() != fresh[ti].sum.size()) return false;
        for (size_t k = 0; k < union_[ti].sum.size(); ++k)
            if (union_[ti].sum[k] != fresh[ti].sum[k]) return false;
    }
    return true;
}

namespace {

uint64_t counts_checksum(const std::vector<StitchWeights::TensorCounts>& per_tensor) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : per_tensor) {
        h = fnv1a64(t.name.data(), t.name.size(), h);
        if (!t.idx.empty()) h = fnv1a64(t.idx.data(), t.idx.size() * 4, h);
        if (!t.count.empty()) h = fnv1a64(t.count.data(), t.count.size() * 4, h);
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

uint64_t parse_hex64(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

}  // namespace

void StitchState::save(const std::string& dir) const {
    fs::create_directories(dir);
    save_pset(pre_, (fs::path(dir) / "pretrained.pset").string());
    json manifest;
    manifest["version"] = 1;
    manifest["base_fingerprint"] = hex64(pre_.fingerprint());
    manifest["tasks"] = json::array();
    for (const auto& [id, sptv] : tasks_) {
        save_sptv(sptv, (fs::path(dir) / ("task_" + std::to_string(id) + ".sptv")).string());
        manifest["tasks"].push_back(id);
    }
    manifest["counts_checksum"] = hex64(counts_checksum(weights().per_tensor));
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw error("cannot write manifest in '" + dir + "'");
    f << manifest.dump(2) << "\n";
}

StitchState StitchState::load(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw error("cannot open manifest in '" + dir + "'");
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw format_error(std::string("bad stitch manifest: ") + e.what(), 0);
    }
    if (manifest.value("version", 0) != 1)
        throw format_error("unsupported stitch state version", 0);

    StitchState st(load_pset((fs::path(dir) / "pretrained.pset").string()));
    uint64_t want_fp = parse_hex64(manifest.at("base_fingerprint").get<std::string>());
    if (want_fp != st.pre_.fingerprint())
        throw format_error("pretrained model does not match the manifest fingerprint", 0);
    for (const auto& id_json : manifest.at("tasks")) {
        uint32_t id = id_json.get<uint32_t>();
        st.add(id, load_sptv((fs::path(dir) / ("task_" + std::to_string(id) + ".sptv")).string()));
    }
    uint64_t want_checksum = parse_hex64(manifest.at("counts_checksum").get<std::string>());
    if (want_checksum != counts_checksum(st.weights().per_tensor))
        throw format_error("stitch state counts checksum mismatch", 0);
    return st;
}

std::pair<ParamSet, StitchWeights> stitch(const ParamSet& pre,
                                          std::span<const SparseTaskVector> tvs) {
    StitchState st(pre);
    for (size_t i = 0; i < tvs.size(); ++i) st.add(static_cast<uint32_t>(i), tvs[i]);
    return {st.merged(), st.weights()};
}

ParamSet graft(const ParamSet& pre, const SparseTaskVector& s) {
    return stitch(pre, std::span<const SparseTaskVector>(&s, 1)).first;
}

}  // namespace lns
