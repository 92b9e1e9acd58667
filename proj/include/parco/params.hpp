#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "parco/autodiff.hpp"
#include "parco/rng.hpp"

namespace parco {

/// Ordered, named collection of parameter tensors. Order is registration
/// order and defines leaf order on a tape, checkpoint layout and optimizer
/// state layout.
class ParamStore {
public:
    std::size_t add(std::string name, ad::Tensor value);

    std::size_t size() const { return values_.size(); }
    std::size_t index_of(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::string& name(std::size_t i) const { return names_[i]; }
    const std::vector<std::string>& names() const { return names_; }
    ad::Tensor& operator[](std::size_t i) { return values_[i]; }
    const ad::Tensor& operator[](std::size_t i) const { return values_[i]; }
    std::span<ad::Tensor> values() { return values_; }
    std::span<const ad::Tensor> values() const { return values_; }

    std::size_t scalar_count() const;

    /// Creates one leaf per parameter on the tape, in registration order.
    std::vector<ad::Var> bind(ad::Tape& tape) const;

private:
    std::vector<std::string> names_;
    std::vector<ad::Tensor> values_;
    std::unordered_map<std::string, std::size_t> index_;
};

ad::Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double bound);
ad::Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev);

}  // namespace parco
