#include "colorizer/checkpoint.hpp"

#include "colorizer/core/rng.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>

namespace colorizer {

namespace {
constexpr char kMagic[8] = {'C', 'Z', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void append_raw(std::string& out, const std::vector<double>& src) {
    size_t off = out.size();
    out.resize(off + src.size() * sizeof(T));
    for (size_t i = 0; i < src.size(); ++i) {
        T v = static_cast<T>(src[i]);
        std::memcpy(out.data() + off + i * sizeof(T), &v, sizeof(T));
    }
}

template <class T>
std::vector<double> read_raw(const std::string& blob, size_t offset, size_t count) {
    std::vector<double> out(count);
    for (size_t i = 0; i < count; ++i) {
        T v;
        std::memcpy(&v, blob.data() + offset + i * sizeof(T), sizeof(T));
        out[i] = static_cast<double>(v);
    }
    return out;
}
}  // namespace

void TensorArchive::put(const std::string& name, std::vector<Eigen::Index> shape,
                        std::vector<double> data, const std::string& dtype) {
    if (dtype != "f32" && dtype != "f64")
        throw std::invalid_argument("TensorArchive: unsupported dtype " + dtype);
    Eigen::Index n = Tensor<float>::count(shape);
    if (static_cast<size_t>(n) != data.size())
        throw std::invalid_argument("TensorArchive: data/shape mismatch for " + name);
    entries_[name] = Entry{std::move(shape), dtype, std::move(data)};
}

const TensorArchive::Entry& TensorArchive::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::runtime_error("TensorArchive: missing array " + name);
    return it->second;
}

std::vector<std::string> TensorArchive::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
}

void TensorArchive::set_meta(const std::string& key, const std::string& value) {
    meta_str_[key] = value;
}
void TensorArchive::set_meta_number(const std::string& key, double value) {
    meta_num_[key] = value;
}
bool TensorArchive::has_meta(const std::string& key) const {
    return meta_str_.count(key) || meta_num_.count(key);
}
std::string TensorArchive::meta(const std::string& key) const {
    auto it = meta_str_.find(key);
    if (it == meta_str_.end()) throw std::runtime_error("TensorArchive: missing meta " + key);
    return it->second;
}
double TensorArchive::meta_number(const std::string& key) const {
    auto it = meta_num_.find(key);
    if (it == meta_num_.end()) throw std::runtime_error("TensorArchive: missing meta " + key);
    return it->second;
}

void TensorArchive::save(const std::string& path) const {
    std::string blob;
    nlohmann::json manifest;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, e] : entries_) {
        size_t offset = blob.size();
        if (e.dtype == "f32")
            append_raw<float>(blob, e.data);
        else
            append_raw<double>(blob, e.data);
        size_t nbytes = blob.size() - offset;
        nlohmann::json t;
        t["name"] = name;
        t["dtype"] = e.dtype;
        t["shape"] = e.shape;
        t["offset"] = offset;
        t["nbytes"] = nbytes;
        t["fnv1a"] = fnv1a64(blob.data() + offset, nbytes);
        manifest["tensors"].push_back(std::move(t));
    }
    manifest["meta"] = nlohmann::json::object();
    for (const auto& [k, v] : meta_str_) manifest["meta"][k] = v;
    for (const auto& [k, v] : meta_num_) manifest["meta"][k] = v;

    std::string mtxt = manifest.dump();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("TensorArchive: cannot open for write: " + path);
    f.write(kMagic, 8);
    uint64_t mlen = mtxt.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mtxt.data(), static_cast<std::streamsize>(mtxt.size()));
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("TensorArchive: write failed: " + path);
}

TensorArchive TensorArchive::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("TensorArchive: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("TensorArchive: bad magic in " + path);
    uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mtxt(mlen, '\0');
    f.read(mtxt.data(), static_cast<std::streamsize>(mlen));
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    nlohmann::json manifest = nlohmann::json::parse(mtxt);
    TensorArchive ar;
    for (const auto& t : manifest.at("tensors")) {
        std::string name = t.at("name");
        std::string dtype = t.at("dtype");
        std::vector<Eigen::Index> shape = t.at("shape").get<std::vector<Eigen::Index>>();
        size_t offset = t.at("offset");
        size_t nbytes = t.at("nbytes");
        if (offset + nbytes > blob.size())
            throw std::runtime_error("TensorArchive: truncated data for " + name);
        if (t.contains("fnv1a") &&
            t.at("fnv1a").get<uint64_t>() != fnv1a64(blob.data() + offset, nbytes))
            throw std::runtime_error("TensorArchive: checksum mismatch for " + name);
        size_t count = static_cast<size_t>(Tensor<float>::count(shape));
        std::vector<double> data = dtype == "f32" ? read_raw<float>(blob, offset, count)
                                                  : read_raw<double>(blob, offset, count);
        ar.put(name, std::move(shape), std::move(data), dtype);
    }
    if (manifest.contains("meta")) {
        for (const auto& [k, v] : manifest.at("meta").items()) {
            if (v.is_string())
                ar.set_meta(k, v.get<std::string>());
            else if (v.is_number())
                ar.set_meta_number(k, v.get<double>());
        }
    }
    return ar;
}

}  // namespace colorizer
