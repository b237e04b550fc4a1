#pragma once

#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "feddgm/autodiff.hpp"

namespace feddgm::ad {

template <typename T>
class Bindings {
public:
    Bindings& set(Var v, Tensor<T> value) {
        values_[v.id] = std::move(value);
        return *this;
    }
    const Tensor<T>* find(std::uint32_t id) const {
        auto it = values_.find(id);
        return it == values_.end() ? nullptr : &it->second;
    }

private:
    std::unordered_map<std::uint32_t, Tensor<T>> values_;
};

struct ExecOptions {
    /// Check every node's output for NaN/Inf and throw NonFiniteError naming it.
    bool check_finite = true;
};

/// A compiled evaluation plan for a fixed set of outputs. `run` keeps all
/// intermediate state local, so one Executor may be shared across threads.
template <typename T>
class Executor {
public:
    Executor(const Graph& graph, std::vector<Var> outputs, ExecOptions options = {});

    std::vector<Tensor<T>> run(const Bindings<T>& bindings) const;

    std::span<const Var> outputs() const noexcept { return outputs_; }

private:
    const Graph* graph_;
    std::vector<Var> outputs_;
    ExecOptions options_;
    std::vector<std::uint32_t> order_;
    std::vector<std::uint32_t> last_use_;
    std::vector<char> keep_;
    std::unordered_map<std::uint32_t, Tensor<T>> constants_;
};

template <typename T>
Tensor<T> eval(const Graph& graph, Var root, const Bindings<T>& bindings, ExecOptions options = {}) {
    return Executor<T>(graph, {root}, options).run(bindings).front();
}

extern template class Executor<float>;
extern template class Executor<double>;

} // namespace feddgm::ad
