#pragma once

#include <functional>
#include <memory>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#include "nightfuse/tensor.hpp"

namespace nightfuse {

/// Round a float through IEEE binary16 and back.
inline float round_to_half(float v) { return static_cast<float>(Eigen::half(v)); }

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // empty until something flows into it
    std::function<void()> backward;

    Tensor<T>& grad_buffer()
    {
        if (grad.size() != value.size()) grad = Tensor<T>(value.c, value.h, value.w);
        return grad;
    }
    bool has_grad() const noexcept { return grad.size() == value.size() && !grad.data.empty(); }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

/// Read-only parameter storage plus an optional gradient accumulator.
template <class T>
struct ParamView {
    const T* value = nullptr;
    T* grad = nullptr;
};

/// Reverse-mode tape. When not recording, ops run forward only and
/// intermediate values are released as soon as nothing references them.
/// With `half_storage`, every activation is rounded through binary16 as it
/// is produced (arithmetic itself stays in T).
template <class T>
class Graph {
public:
    explicit Graph(bool record = false, bool half_storage = false) : record_(record), half_(half_storage)
    {
        if constexpr (!std::is_same_v<T, float>) half_ = false;
    }

    bool recording() const noexcept { return record_; }
    bool half_storage() const noexcept { return half_; }

    Var<T> input(Tensor<T> v) { return emit(std::move(v)); }

    /// Wrap a freshly computed value. Backward closures must capture inputs
    /// by raw pointer; the tape owns every node until `clear()`.
    Var<T> emit(Tensor<T> v)
    {
        if constexpr (std::is_same_v<T, float>) {
            if (half_)
                for (auto& x : v.data) x = round_to_half(x);
        }
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        if (record_) nodes_.push_back(n);
        return n;
    }

    /// Seed d(out) and run every recorded backward closure in reverse order.
    void backward(const Var<T>& out, const Tensor<T>& seed)
    {
        if (!record_) throw Error("Graph::backward on a non-recording graph");
        require_shape(seed, out->value.c, out->value.h, out->value.w, "Graph::backward seed");
        auto& g = out->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.backward && n.has_grad()) n.backward();
        }
    }

    void clear() { nodes_.clear(); }

private:
    bool record_;
    bool half_;
    std::vector<Var<T>> nodes_;
};

} // namespace nightfuse
