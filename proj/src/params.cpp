#include "parco/params.hpp"

#include <stdexcept>

namespace parco {

std::size_t ParamStore::add(std::string name, ad::Tensor value) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
    return it->second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
}

std::vector<ad::Var> ParamStore::bind(ad::Tape& tape) const {
    std::vector<ad::Var> vars;
    vars.reserve(values_.size());
    for (const auto& v : values_) vars.push_back(tape.leaf(v));
    return vars;
}

ad::Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
    ad::Tensor t(rows, cols);
    for (double& v : t.values()) v = uniform(rng, -bound, bound);
    return t;
}

ad::Tensor normal_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    ad::Tensor t(rows, cols);
    for (double& v : t.values()) v = normal(rng, 0.0, stddev);
    return t;
}

}  // namespace parco
