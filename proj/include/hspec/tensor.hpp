#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "hspec/common.hpp"
#include "hspec/kernels.hpp"

namespace hspec {

// Dense tensor with reverse-mode differentiation. A Tensor is a shared
// handle to a graph node; ops build the graph, backward() walks it once.
// Values are immutable after forward; parameters are mutated only between
// graphs (optimizer steps).
template <typename T>
class Tensor {
  public:
    struct Node {
        std::vector<int> shape;
        std::vector<T> value;
        std::vector<T> grad;  // empty until touched by backward
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backprop;

        size_t numel() const { return value.size(); }
        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        }
    };

    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : n_(std::make_shared<Node>()) {
        n_->shape = std::move(shape);
        n_->value.assign(check_shape(n_->shape), T(0));
    }

    Tensor(std::vector<int> shape, std::vector<T> data) : n_(std::make_shared<Node>()) {
        const size_t expect = check_shape(shape);
        if (data.size() != expect) throw ShapeError("tensor data length does not match shape");
        n_->shape = std::move(shape);
        n_->value = std::move(data);
    }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, T stddev = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : t.n_->value) v = T(rng.gaussian(0.0, double(stddev)));
        return t;
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, T lo, T hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.n_->value) v = T(rng.uniform(double(lo), double(hi)));
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    size_t ndim() const { return n_->shape.size(); }
    size_t numel() const { return n_->value.size(); }

    std::vector<T>& data() { return n_->value; }
    const std::vector<T>& data() const { return n_->value; }
    T* ptr() { return n_->value.data(); }
    const T* ptr() const { return n_->value.data(); }

    T item() const {
        if (numel() != 1) throw InputError("item() on non-scalar tensor");
        return n_->value[0];
    }

    Tensor& set_requires_grad(bool v = true) {
        n_->requires_grad = v;
        return *this;
    }
    bool requires_grad() const { return n_ && n_->requires_grad; }

    // Zero-filled if backward never reached this tensor.
    std::vector<T> grad() const {
        if (n_->grad.size() == n_->value.size()) return n_->grad;
        return std::vector<T>(n_->value.size(), T(0));
    }
    std::vector<T>& grad_ref() {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    std::shared_ptr<Node> node() const { return n_; }

    // Internal: construct an op result.
    static Tensor make_op(std::vector<int> shape, std::vector<T> value,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backprop) {
        Tensor out(std::move(shape), std::move(value));
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        if (needs) {
            out.n_->requires_grad = true;
            for (auto& in : inputs) out.n_->parents.push_back(in.n_);
            out.n_->backprop = std::move(backprop);
        }
        return out;
    }

  private:
    static size_t check_shape(const std::vector<int>& shape) {
        if (shape.empty()) throw ShapeError("empty shape");
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("non-positive dimension in shape");
            n *= size_t(d);
        }
        return n;
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

template <typename T>
void topo_visit(typename Tensor<T>::Node* n,
                std::unordered_set<typename Tensor<T>::Node*>& seen,
                std::vector<typename Tensor<T>::Node*>& order) {
    if (!n || seen.count(n)) return;
    seen.insert(n);
    for (auto& p : n->parents) topo_visit<T>(p.get(), seen, order);
    order.push_back(n);
}

}  // namespace detail

// Reverse-mode pass from a scalar loss. Gradients accumulate additively:
// intermediates start empty per graph, parameter leaves keep accumulating
// until zero_grad.
template <typename T>
void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw InputError("backward() requires a scalar loss");
    using Node = typename Tensor<T>::Node;
    std::unordered_set<Node*> seen;
    std::vector<Node*> order;
    detail::topo_visit<T>(loss.node().get(), seen, order);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->requires_grad && n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
    }
}

// ---- basic ops ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("add: shape mismatch");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [an, bn](auto& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [an, c](auto& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * c;
    });
}

// Standard matrix product [m x k] * [k x n] -> [m x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: 2-D tensors required");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) throw ShapeError("matmul: inner dimensions disagree");
    std::vector<T> out(size_t(m) * n);
    kern::gemm_nn(a.ptr(), b.ptr(), out.data(), m, n, k);
    auto an = a.node();
    auto bn = b.node();
    return Tensor<T>::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, n, k](auto& node) {
        if (an->requires_grad) {
            an->ensure_grad();
            // dA += dC * B^T
            kern::gemm_nt(node.grad.data(), bn->value.data(), an->grad.data(), m, k, n, true);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // dB += A^T * dC
            kern::gemm_tn_acc(an->value.data(), node.grad.data(), bn->grad.data(), m, n, k);
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s0 = 0;
    for (const T v : a.data()) s0 += v;
    auto an = a.node();
    return Tensor<T>::make_op({1}, {s0}, {a}, [an](auto& n) {
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    T s0 = 0;
    for (const T v : a.data()) s0 += v;
    const T inv = T(1) / T(a.numel());
    auto an = a.node();
    return Tensor<T>::make_op({1}, {s0 * inv}, {a}, [an, inv](auto& n) {
        an->ensure_grad();
        for (auto& g : an->grad) g += n.grad[0] * inv;
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> new_shape) {
    size_t n = 1;
    for (int d : new_shape) n *= size_t(d > 0 ? d : 0);
    if (n != a.numel()) throw ShapeError("reshape: element count mismatch");
    auto an = a.node();
    return Tensor<T>::make_op(std::move(new_shape), a.data(), {a}, [an](auto& node) {
        an->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) an->grad[i] += node.grad[i];
    });
}

}  // namespace hspec
