#ifndef COLORIZER_CHECKPOINT_HPP
#define COLORIZER_CHECKPOINT_HPP

#include "colorizer/core/nn.hpp"
#include "colorizer/core/tensor.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace colorizer {

/// Single-file archive of named dense arrays with a JSON manifest carrying
/// names, shapes, dtypes and per-array checksums, plus a free-form meta block.
class TensorArchive {
public:
    struct Entry {
        std::vector<Eigen::Index> shape;
        std::string dtype;  // "f32" or "f64"
        std::vector<double> data;
    };

    void put(const std::string& name, std::vector<Eigen::Index> shape, std::vector<double> data,
             const std::string& dtype = "f32");
    bool contains(const std::string& name) const { return entries_.count(name) != 0; }
    const Entry& at(const std::string& name) const;
    std::vector<std::string> names() const;

    void set_meta(const std::string& key, const std::string& value);
    void set_meta_number(const std::string& key, double value);
    bool has_meta(const std::string& key) const;
    std::string meta(const std::string& key) const;
    double meta_number(const std::string& key) const;

    void save(const std::string& path) const;
    static TensorArchive load(const std::string& path);

    template <class S>
    void put_tensor(const std::string& name, const Tensor<S>& t) {
        std::vector<double> d(static_cast<size_t>(t.size()));
        for (Eigen::Index i = 0; i < t.size(); ++i) d[static_cast<size_t>(i)] = static_cast<double>(t[i]);
        put(name, t.shape(), std::move(d), sizeof(S) == 8 ? "f64" : "f32");
    }

    template <class S>
    Tensor<S> get_tensor(const std::string& name) const {
        const Entry& e = at(name);
        Tensor<S> t(e.shape);
        for (Eigen::Index i = 0; i < t.size(); ++i)
            t[i] = static_cast<S>(e.data[static_cast<size_t>(i)]);
        return t;
    }

    template <class S>
    void put_params(const ParamList<S>& params, const std::string& prefix = "") {
        for (const auto& p : params) put_tensor(prefix + p.name, p.var->value());
    }

    template <class S>
    void load_params(const ParamList<S>& params, const std::string& prefix = "") const {
        for (const auto& p : params) {
            Tensor<S> t = get_tensor<S>(prefix + p.name);
            if (!t.same_shape(p.var->value()))
                throw std::runtime_error("checkpoint: shape mismatch for " + prefix + p.name);
            p.var->value() = std::move(t);
        }
    }

private:
    std::map<std::string, Entry> entries_;
    std::map<std::string, std::string> meta_str_;
    std::map<std::string, double> meta_num_;
};

}  // namespace colorizer

#endif
