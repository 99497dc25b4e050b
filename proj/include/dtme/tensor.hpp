// SPDX-License-Identifier: Apache-2.0
//
// Minimal dense double-precision tensor with reverse-mode autodiff.
// Single-threaded; graphs are built per forward pass and discarded after use.
#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dtme/common.hpp"

namespace dtme {

struct GraphNode;

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    bool retain_grad = false;
    // Persistent accumulated gradient; sized lazily, same length as data.
    std::vector<double> grad;
    std::shared_ptr<GraphNode> node;

    int numel() const { return static_cast<int>(data.size()); }
};

// Reverse-mode graph node. Owned by the op output; inputs are kept alive by
// shared ownership, the output back-reference is weak to avoid cycles.
struct GraphNode {
    const char* op = "";
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::weak_ptr<TensorImpl> output;
    // Fills grads_in[i] (pre-sized, zeroed) for every grad-relevant input i
    // given the output gradient. Entries for irrelevant inputs stay empty.
    std::function<void(const std::vector<double>& grad_out,
                       std::vector<std::vector<double>>& grads_in)>
        backward;
};

// Value-semantics handle over a shared TensorImpl.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double value);
    static Tensor from(std::vector<int> shape, std::vector<double> data);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    int dim(int i) const;
    int numel() const;

    std::span<const double> data() const;
    // Direct writes are for leaves (parameter updates, test setup); mutating
    // an op output after the fact invalidates saved backward state.
    std::span<double> mutable_data();

    double value() const;  // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    Tensor& set_requires_grad(bool v);
    bool requires_grad() const;
    Tensor& set_retain_grad(bool v);
    bool retain_grad() const;

    bool grad_ready() const;
    std::span<const double> grad() const;
    void zero_grad();

    // Deep copy of values only (no graph, flags reset).
    Tensor detached_copy() const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl);

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---- ops ----
// Binary elementwise ops accept equal shapes, or a right operand whose shape
// is a trailing suffix of the left shape (broadcast across leading dims).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);  // 2-d only
Tensor transpose(const Tensor& a);                // 2-d only
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);  // exact erf form
Tensor softmax(const Tensor& a, int axis);
// Normalizes along `axis` to zero mean / unit variance with variance floor
// 1e-8; no affine (scale/shift live with the caller as separate parameters).
Tensor layernorm(const Tensor& a, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, int start, int stop);
Tensor mean(const Tensor& a);  // full reduction to scalar
Tensor sum(const Tensor& a);   // full reduction to scalar
Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
// Row-wise softmax cross entropy, mean over rows; logits [n,C] or [C].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// Runs reverse-mode accumulation from a scalar root. Visits each node once;
// accumulates into .grad of every requires_grad or retain_grad tensor.
// Each call recomputes the full vector-Jacobian product independently, so
// repeated calls on one graph add up exactly.
void backward(const Tensor& root);

// Central-difference gradient check of f at x: returns the max over
// coordinates of |analytic - numeric| / max(1, |numeric|).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

constexpr double kLayerNormVarianceFloor = 1e-8;

}  // namespace dtme
