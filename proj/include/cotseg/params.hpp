#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cotseg/errors.hpp"
#include "cotseg/rng.hpp"
#include "cotseg/tensor.hpp"

namespace cotseg {

/// Ordered, named collection of trainable tensors. Registration order is
/// the canonical order for initialisation, optimisation and checkpoints.
template <class T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor<T> tensor;
    };

    /// Registers a tensor drawn uniformly from [-bound, bound] with
    /// bound = 1/sqrt(fan_in), where fan_in is the product of all but the
    /// leading extent.
    Tensor<T> add_uniform(const std::string& name, Shape shape, Rng& rng) {
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        std::vector<T> values(shape_numel(shape));
        for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        return add(name, Tensor<T>::from_data(std::move(shape), std::move(values), true));
    }

    Tensor<T> add_constant(const std::string& name, Shape shape, T value) {
        return add(name, Tensor<T>::full(std::move(shape), value, true));
    }

    Tensor<T> add(const std::string& name, Tensor<T> tensor) {
        for (const auto& e : entries_)
            if (e.name == name) throw ParameterError("duplicate parameter name " + name);
        tensor.set_requires_grad(true);
        entries_.push_back({name, tensor});
        return tensor;
    }

    const Tensor<T>& get(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e.tensor;
        throw ParameterError("unknown parameter " + name);
    }

    bool contains(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return true;
        return false;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    /// Copies values of identically named entries from `src`, converting the
    /// scalar type. Throws ParameterError on a shape mismatch, or when
    /// `require_all` and some entry of this store has no counterpart.
    template <class U>
    std::size_t assign_from(const ParamStore<U>& src, bool require_all = true) {
        std::size_t copied = 0;
        for (auto& e : entries_) {
            if (!src.contains(e.name)) {
                if (require_all) throw ParameterError("missing parameter " + e.name);
                continue;
            }
            const auto& other = src.get(e.name);
            if (other.shape() != e.tensor.shape())
                throw ParameterError("shape mismatch for " + e.name + ": " + shape_str(other.shape()) + " vs " +
                                     shape_str(e.tensor.shape()));
            auto dst = e.tensor.mutable_data();
            auto in = other.data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(in[i]);
            ++copied;
        }
        return copied;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace cotseg
