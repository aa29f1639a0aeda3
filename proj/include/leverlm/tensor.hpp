#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "leverlm/error.hpp"

namespace leverlm {

// Dense row-major double tensor.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    static Tensor zeros(std::vector<std::size_t> shape) {
        Tensor t;
        const std::size_t n = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
        t.shape = std::move(shape);
        t.data.assign(n, 0.0);
        return t;
    }

    std::size_t numel() const { return data.size(); }
    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Ordered collection of named tensors; order is creation order and is the
// order used for serialization and optimizer state.
class ParamSet {
public:
    Tensor& add(std::string name, std::vector<std::size_t> shape, bool trainable = true) {
        if (find(name) != nullptr) {
            throw SchemaError("duplicate tensor name '" + name + "'");
        }
        items_.push_back(NamedTensor{std::move(name), Tensor::zeros(std::move(shape)), trainable});
        return items_.back().tensor;
    }

    const Tensor* find(const std::string& name) const {
        for (const auto& it : items_) {
            if (it.name == name) return &it.tensor;
        }
        return nullptr;
    }

    Tensor* find(const std::string& name) {
        for (auto& it : items_) {
            if (it.name == name) return &it.tensor;
        }
        return nullptr;
    }

    const Tensor& get(const std::string& name) const {
        const Tensor* t = find(name);
        if (t == nullptr) throw SchemaError("missing tensor '" + name + "'");
        return *t;
    }

    Tensor& get(const std::string& name) {
        Tensor* t = find(name);
        if (t == nullptr) throw SchemaError("missing tensor '" + name + "'");
        return *t;
    }

    bool is_trainable(const std::string& name) const {
        for (const auto& it : items_) {
            if (it.name == name) return it.trainable;
        }
        throw SchemaError("missing tensor '" + name + "'");
    }

    ParamSet zeros_like() const {
        ParamSet out;
        out.items_.reserve(items_.size());
        for (const auto& it : items_) {
            out.items_.push_back(NamedTensor{it.name, Tensor::zeros(it.tensor.shape), it.trainable});
        }
        return out;
    }

    void set_zero() {
        for (auto& it : items_) {
            std::fill(it.tensor.data.begin(), it.tensor.data.end(), 0.0);
        }
    }

    // this += scale * other; both sets must share layout.
    void add_scaled(const ParamSet& other, double scale) {
        for (std::size_t i = 0; i < items_.size(); ++i) {
            auto& dst = items_[i].tensor.data;
            const auto& src = other.items_[i].tensor.data;
            for (std::size_t k = 0; k < dst.size(); ++k) {
                dst[k] += scale * src[k];
            }
        }
    }

    // Throws NumericError naming the first tensor holding NaN or Inf.
    void check_finite(const std::string& what) const {
        for (const auto& it : items_) {
            for (double v : it.tensor.data) {
                if (!std::isfinite(v)) {
                    throw NumericError(what + ": non-finite value in tensor '" + it.name + "'");
                }
            }
        }
    }

    std::size_t size() const { return items_.size(); }
    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& it : items_) n += it.tensor.numel();
        return n;
    }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }
    NamedTensor& operator[](std::size_t i) { return items_[i]; }
    const NamedTensor& operator[](std::size_t i) const { return items_[i]; }

    friend bool operator==(const ParamSet&, const ParamSet&) = default;

private:
    std::vector<NamedTensor> items_;
};

}  // namespace leverlm
