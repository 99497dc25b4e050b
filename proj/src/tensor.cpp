// SPDX-License-Identifier: Apache-2.0
#include "dtme/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace dtme {
namespace {

int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

void ensure_finite(const std::vector<double>& data, const char* op) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        }
    }
}

bool grad_relevant(const TensorImpl& t) {
    return t.requires_grad || t.retain_grad || t.node != nullptr;
}

void accumulate_persistent(TensorImpl& t, const std::vector<double>& g) {
    if (!(t.requires_grad || t.retain_grad)) return;
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
}

using BackwardFn = std::function<void(const std::vector<double>&, std::vector<std::vector<double>>&)>;

Tensor make_op_result(const char* op, std::vector<int> shape, std::vector<double> data,
                      std::vector<std::shared_ptr<TensorImpl>> inputs, BackwardFn fn) {
    ensure_finite(data, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    bool any = false;
    for (const auto& in : inputs) {
        if (in && grad_relevant(*in)) any = true;
    }
    if (any) {
        auto node = std::make_shared<GraphNode>();
        node->op = op;
        node->inputs = std::move(inputs);
        node->output = impl;
        node->backward = std::move(fn);
        impl->node = std::move(node);
    }
    return Tensor::wrap(std::move(impl));
}

// Right-operand broadcast: equal shapes, a scalar ([1]) right operand, or
// b's shape a trailing suffix of a's shape. Returns the number of leading
// repeats of b inside a.
int broadcast_repeats(const std::vector<int>& a, const std::vector<int>& b, const char* op) {
    if (b.size() == 1 && b[0] == 1) {
        int lead = 1;
        for (int d : a) lead *= d;
        return lead;
    }
    if (a.size() < b.size()) {
        throw ShapeError(std::string(op) + ": right operand rank exceeds left " + shape_str(a) +
                         " vs " + shape_str(b));
    }
    size_t off = a.size() - b.size();
    for (size_t i = 0; i < b.size(); ++i) {
        if (a[off + i] != b[i]) {
            throw ShapeError(std::string(op) + ": shape " + shape_str(b) +
                             " is not a trailing suffix of " + shape_str(a));
        }
    }
    int lead = 1;
    for (size_t i = 0; i < off; ++i) lead *= a[i];
    return lead;
}

// Sums grad over leading repeats, producing a gradient shaped like b.
std::vector<double> reduce_leading(const std::vector<double>& g, int lead, int inner) {
    std::vector<double> out(static_cast<size_t>(inner), 0.0);
    for (int l = 0; l < lead; ++l) {
        const double* src = g.data() + static_cast<size_t>(l) * inner;
        for (int j = 0; j < inner; ++j) out[j] += src[j];
    }
    return out;
}

struct AxisSplit {
    int outer = 1;
    int len = 1;
    int inner = 1;
};

AxisSplit split_at_axis(const std::vector<int>& shape, int axis, const char* op) {
    if (axis < 0 || axis >= static_cast<int>(shape.size())) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
    }
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

// ---- Tensor handle ----

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(std::vector<int> shape, double value) {
    int n = shape_numel(shape);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(n), value);
    return wrap(std::move(impl));
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data) {
    int n = shape_numel(shape);
    if (static_cast<size_t>(n) != data.size()) {
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const std::vector<int>& Tensor::shape() const {
    if (!impl_) throw ContractError("operation on undefined tensor");
    return impl_->shape;
}

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size())) throw ShapeError("dim index out of range");
    return s[i];
}

int Tensor::numel() const {
    if (!impl_) throw ContractError("operation on undefined tensor");
    return impl_->numel();
}

std::span<const double> Tensor::data() const {
    if (!impl_) throw ContractError("operation on undefined tensor");
    return impl_->data;
}

std::span<double> Tensor::mutable_data() {
    if (!impl_) throw ContractError("operation on undefined tensor");
    return impl_->data;
}

double Tensor::value() const {
    if (numel() != 1) throw ContractError("value() requires a scalar tensor");
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size()) throw ShapeError("index rank mismatch");
    int flat = 0;
    int i = 0;
    for (int v : idx) {
        if (v < 0 || v >= s[i]) throw ShapeError("index out of range");
        flat = flat * s[i] + v;
        ++i;
    }
    return impl_->data[static_cast<size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool v) {
    if (!impl_) throw ContractError("operation on undefined tensor");
    impl_->requires_grad = v;
    return *this;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_retain_grad(bool v) {
    if (!impl_) throw ContractError("operation on undefined tensor");
    impl_->retain_grad = v;
    return *this;
}

bool Tensor::retain_grad() const { return impl_ && impl_->retain_grad; }

bool Tensor::grad_ready() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
    if (!grad_ready()) throw ContractError("gradient not populated; call backward first");
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::detached_copy() const {
    if (!impl_) throw ContractError("operation on undefined tensor");
    return from(impl_->shape, impl_->data);
}

// ---- elementwise binary ----

namespace {

Tensor binary_op(const char* op, const Tensor& a, const Tensor& b,
                 double (*fwd)(double, double), int which) {
    // which: 0 = add, 1 = sub, 2 = mul
    int lead = broadcast_repeats(a.shape(), b.shape(), op);
    int inner = b.numel();
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (int l = 0; l < lead; ++l) {
        double* dst = out.data() + static_cast<size_t>(l) * inner;
        for (int j = 0; j < inner; ++j) dst[j] = fwd(dst[j], bd[j]);
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op_result(
        op, a.shape(), std::move(out), {ai, bi},
        [ai, bi, lead, inner, which](const std::vector<double>& g,
                                     std::vector<std::vector<double>>& gin) {
            if (!gin[0].empty()) {
                if (which == 2) {
                    for (int l = 0; l < lead; ++l) {
                        const size_t off = static_cast<size_t>(l) * inner;
                        for (int j = 0; j < inner; ++j) gin[0][off + j] = g[off + j] * bi->data[j];
                    }
                } else {
                    gin[0] = g;
                }
            }
            if (!gin[1].empty()) {
                std::vector<double> gb(g.size());
                for (int l = 0; l < lead; ++l) {
                    const size_t off = static_cast<size_t>(l) * inner;
                    for (int j = 0; j < inner; ++j) {
                        double v = g[off + j];
                        if (which == 1) v = -v;
                        if (which == 2) v = g[off + j] * ai->data[off + j];
                        gb[off + j] = v;
                    }
                }
                gin[1] = reduce_leading(gb, lead, inner);
            }
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op("add", a, b, [](double x, double y) { return x + y; }, 0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op("sub", a, b, [](double x, double y) { return x - y; }, 1);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op("mul", a, b, [](double x, double y) { return x * y; }, 2);
}

Tensor scale(const Tensor& a, double s) {
    if (!std::isfinite(s)) throw NumericError("scale: non-finite factor");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= s;
    return make_op_result("scale", a.shape(), std::move(out), {a.impl()},
                          [s](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
                              if (gin[0].empty()) return;
                              for (size_t i = 0; i < g.size(); ++i) gin[0][i] = g[i] * s;
                          });
}

// ---- matmul / transpose ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: operands must be 2-d");
    const int n = a.dim(0), k = a.dim(1), k2 = b.dim(0), m = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dims differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<size_t>(n) * m, 0.0);
    {
        const auto ad = a.data();
        const auto bd = b.data();
        for (int i = 0; i < n; ++i) {
            const double* arow = ad.data() + static_cast<size_t>(i) * k;
            double* crow = out.data() + static_cast<size_t>(i) * m;
            for (int kk = 0; kk < k; ++kk) {
                const double av = arow[kk];
                if (av == 0.0) continue;
                const double* brow = bd.data() + static_cast<size_t>(kk) * m;
                for (int j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    }
    auto ai = a.impl();
    auto bi = b.impl();
    return make_op_result(
        "matmul", {n, m}, std::move(out), {ai, bi},
        [ai, bi, n, k, m](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            if (!gin[0].empty()) {
                // dA = g * B^T
                for (int i = 0; i < n; ++i) {
                    const double* grow = g.data() + static_cast<size_t>(i) * m;
                    double* arow = gin[0].data() + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = bi->data.data() + static_cast<size_t>(kk) * m;
                        double acc = 0.0;
                        for (int j = 0; j < m; ++j) acc += grow[j] * brow[j];
                        arow[kk] = acc;
                    }
                }
            }
            if (!gin[1].empty()) {
                // dB = A^T * g
                for (int i = 0; i < n; ++i) {
                    const double* arow = ai->data.data() + static_cast<size_t>(i) * k;
                    const double* grow = g.data() + static_cast<size_t>(i) * m;
                    for (int kk = 0; kk < k; ++kk) {
                        const double av = arow[kk];
                        if (av == 0.0) continue;
                        double* brow = gin[1].data() + static_cast<size_t>(kk) * m;
                        for (int j = 0; j < m; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
}

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw ShapeError("transpose: operand must be 2-d");
    const int n = a.dim(0), m = a.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m);
    const auto ad = a.data();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[static_cast<size_t>(j) * n + i] = ad[static_cast<size_t>(i) * m + j];
    return make_op_result(
        "transpose", {m, n}, std::move(out), {a.impl()},
        [n, m](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            if (gin[0].empty()) return;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    gin[0][static_cast<size_t>(i) * m + j] = g[static_cast<size_t>(j) * n + i];
        });
}

// ---- unary nonlinearities ----

Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto ai = a.impl();
    return make_op_result("relu", a.shape(), std::move(out), {ai},
                          [ai](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
                              if (gin[0].empty()) return;
                              for (size_t i = 0; i < g.size(); ++i)
                                  gin[0][i] = ai->data[i] > 0.0 ? g[i] : 0.0;
                          });
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    auto ai = a.impl();
    return make_op_result("gelu", a.shape(), std::move(out), {ai},
                          [ai](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
                              if (gin[0].empty()) return;
                              for (size_t i = 0; i < g.size(); ++i) {
                                  const double x = ai->data[i];
                                  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                                  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                                  gin[0][i] = g[i] * (cdf + x * pdf);
                              }
                          });
}

Tensor softmax(const Tensor& a, int axis) {
    AxisSplit s = split_at_axis(a.shape(), axis, "softmax");
    std::vector<double> out(a.data().begin(), a.data().end());
    for (int o = 0; o < s.outer; ++o) {
        for (int in = 0; in < s.inner; ++in) {
            const size_t base = static_cast<size_t>(o) * s.len * s.inner + in;
            double mx = -HUGE_VAL;
            for (int l = 0; l < s.len; ++l) mx = std::max(mx, out[base + static_cast<size_t>(l) * s.inner]);
            double z = 0.0;
            for (int l = 0; l < s.len; ++l) {
                size_t ix = base + static_cast<size_t>(l) * s.inner;
                out[ix] = std::exp(out[ix] - mx);
                z += out[ix];
            }
            for (int l = 0; l < s.len; ++l) out[base + static_cast<size_t>(l) * s.inner] /= z;
        }
    }
    std::vector<double> saved = out;
    return make_op_result(
        "softmax", a.shape(), std::move(out), {a.impl()},
        [s, saved = std::move(saved)](const std::vector<double>& g,
                                      std::vector<std::vector<double>>& gin) {
            if (gin[0].empty()) return;
            for (int o = 0; o < s.outer; ++o) {
                for (int in = 0; in < s.inner; ++in) {
                    const size_t base = static_cast<size_t>(o) * s.len * s.inner + in;
                    double dot = 0.0;
                    for (int l = 0; l < s.len; ++l) {
                        size_t ix = base + static_cast<size_t>(l) * s.inner;
                        dot += g[ix] * saved[ix];
                    }
                    for (int l = 0; l < s.len; ++l) {
                        size_t ix = base + static_cast<size_t>(l) * s.inner;
                        gin[0][ix] = saved[ix] * (g[ix] - dot);
                    }
                }
            }
        });
}

Tensor layernorm(const Tensor& a, int axis) {
    AxisSplit s = split_at_axis(a.shape(), axis, "layernorm");
    const auto ad = a.data();
    std::vector<double> out(ad.size());
    std::vector<double> inv_std(static_cast<size_t>(s.outer) * s.inner);
    for (int o = 0; o < s.outer; ++o) {
        for (int in = 0; in < s.inner; ++in) {
            const size_t base = static_cast<size_t>(o) * s.len * s.inner + in;
            double mu = 0.0;
            for (int l = 0; l < s.len; ++l) mu += ad[base + static_cast<size_t>(l) * s.inner];
            mu /= s.len;
            double var = 0.0;
            for (int l = 0; l < s.len; ++l) {
                double d = ad[base + static_cast<size_t>(l) * s.inner] - mu;
                var += d * d;
            }
            var /= s.len;
            double inv = 1.0 / std::sqrt(var + kLayerNormVarianceFloor);
            inv_std[static_cast<size_t>(o) * s.inner + in] = inv;
            for (int l = 0; l < s.len; ++l) {
                size_t ix = base + static_cast<size_t>(l) * s.inner;
                out[ix] = (ad[ix] - mu) * inv;
            }
        }
    }
    std::vector<double> saved_y = out;
    return make_op_result(
        "layernorm", a.shape(), std::move(out), {a.impl()},
        [s, saved_y = std::move(saved_y), inv_std = std::move(inv_std)](
            const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            if (gin[0].empty()) return;
            for (int o = 0; o < s.outer; ++o) {
                for (int in = 0; in < s.inner; ++in) {
                    const size_t base = static_cast<size_t>(o) * s.len * s.inner + in;
                    const double inv = inv_std[static_cast<size_t>(o) * s.inner + in];
                    double mg = 0.0, mgy = 0.0;
                    for (int l = 0; l < s.len; ++l) {
                        size_t ix = base + static_cast<size_t>(l) * s.inner;
                        mg += g[ix];
                        mgy += g[ix] * saved_y[ix];
                    }
                    mg /= s.len;
                    mgy /= s.len;
                    for (int l = 0; l < s.len; ++l) {
                        size_t ix = base + static_cast<size_t>(l) * s.inner;
                        gin[0][ix] = inv * (g[ix] - mg - saved_y[ix] * mgy);
                    }
                }
            }
        });
}

// ---- shape ops ----

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const auto& s0 = parts[0].shape();
    AxisSplit sp = split_at_axis(s0, axis, "concat");
    int total_len = 0;
    for (const auto& p : parts) {
        const auto& s = p.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < s.size(); ++i) {
            if (static_cast<int>(i) != axis && s[i] != s0[i]) {
                throw ShapeError("concat: non-axis dims differ " + shape_str(s) + " vs " +
                                 shape_str(s0));
            }
        }
        total_len += s[axis];
    }
    std::vector<int> out_shape = s0;
    out_shape[axis] = total_len;
    std::vector<double> out(static_cast<size_t>(sp.outer) * total_len * sp.inner);
    std::vector<int> lens;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    int offset = 0;
    for (const auto& p : parts) {
        const int len = p.dim(axis);
        const auto pd = p.data();
        for (int o = 0; o < sp.outer; ++o) {
            const double* src = pd.data() + static_cast<size_t>(o) * len * sp.inner;
            double* dst = out.data() +
                          (static_cast<size_t>(o) * total_len + offset) * sp.inner;
            std::copy(src, src + static_cast<size_t>(len) * sp.inner, dst);
        }
        offset += len;
        lens.push_back(len);
        inputs.push_back(p.impl());
    }
    return make_op_result(
        "concat", std::move(out_shape), std::move(out), std::move(inputs),
        [sp, lens, total_len](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            int off = 0;
            for (size_t pi = 0; pi < lens.size(); ++pi) {
                const int len = lens[pi];
                if (!gin[pi].empty()) {
                    for (int o = 0; o < sp.outer; ++o) {
                        const double* src =
                            g.data() + (static_cast<size_t>(o) * total_len + off) * sp.inner;
                        double* dst = gin[pi].data() + static_cast<size_t>(o) * len * sp.inner;
                        std::copy(src, src + static_cast<size_t>(len) * sp.inner, dst);
                    }
                }
                off += len;
            }
        });
}

Tensor slice(const Tensor& a, int axis, int start, int stop) {
    AxisSplit sp = split_at_axis(a.shape(), axis, "slice");
    if (start < 0 || stop > sp.len || start >= stop) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") invalid for axis length " + std::to_string(sp.len));
    }
    const int len = stop - start;
    std::vector<int> out_shape = a.shape();
    out_shape[axis] = len;
    std::vector<double> out(static_cast<size_t>(sp.outer) * len * sp.inner);
    const auto ad = a.data();
    for (int o = 0; o < sp.outer; ++o) {
        const double* src = ad.data() + (static_cast<size_t>(o) * sp.len + start) * sp.inner;
        double* dst = out.data() + static_cast<size_t>(o) * len * sp.inner;
        std::copy(src, src + static_cast<size_t>(len) * sp.inner, dst);
    }
    return make_op_result(
        "slice", std::move(out_shape), std::move(out), {a.impl()},
        [sp, start, len](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            if (gin[0].empty()) return;
            for (int o = 0; o < sp.outer; ++o) {
                const double* src = g.data() + static_cast<size_t>(o) * len * sp.inner;
                double* dst = gin[0].data() + (static_cast<size_t>(o) * sp.len + start) * sp.inner;
                std::copy(src, src + static_cast<size_t>(len) * sp.inner, dst);
            }
        });
}

// ---- reductions and losses ----

Tensor mean(const Tensor& a) {
    const auto ad = a.data();
    double acc = 0.0;
    for (double v : ad) acc += v;
    const int n = a.numel();
    acc /= n;
    return make_op_result("mean", {1}, {acc}, {a.impl()},
                          [n](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
                              if (gin[0].empty()) return;
                              const double v = g[0] / n;
                              std::fill(gin[0].begin(), gin[0].end(), v);
                          });
}

Tensor sum(const Tensor& a) {
    const auto ad = a.data();
    double acc = 0.0;
    for (double v : ad) acc += v;
    return make_op_result("sum", {1}, {acc}, {a.impl()},
                          [](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
                              if (gin[0].empty()) return;
                              std::fill(gin[0].begin(), gin[0].end(), g[0]);
                          });
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "l1_loss");
    const auto pd = pred.data();
    const auto td = target.data();
    const int n = pred.numel();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += std::fabs(pd[i] - td[i]);
    acc /= n;
    auto pi = pred.impl();
    auto ti = target.impl();
    return make_op_result(
        "l1_loss", {1}, {acc}, {pi, ti},
        [pi, ti, n](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            for (int i = 0; i < n; ++i) {
                const double d = pi->data[i] - ti->data[i];
                const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                const double v = g[0] * s / n;
                if (!gin[0].empty()) gin[0][i] = v;
                if (!gin[1].empty()) gin[1][i] = -v;
            }
        });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse_loss");
    const auto pd = pred.data();
    const auto td = target.data();
    const int n = pred.numel();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = pd[i] - td[i];
        acc += d * d;
    }
    acc /= n;
    auto pi = pred.impl();
    auto ti = target.impl();
    return make_op_result(
        "mse_loss", {1}, {acc}, {pi, ti},
        [pi, ti, n](const std::vector<double>& g, std::vector<std::vector<double>>& gin) {
            for (int i = 0; i < n; ++i) {
                const double v = g[0] * 2.0 * (pi->data[i] - ti->data[i]) / n;
                if (!gin[0].empty()) gin[0][i] = v;
                if (!gin[1].empty()) gin[1][i] = -v;
            }
        });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    int rows = 1, cols = 0;
    if (logits.ndim() == 1) {
        cols = logits.dim(0);
    } else if (logits.ndim() == 2) {
        rows = logits.dim(0);
        cols = logits.dim(1);
    } else {
        throw ShapeError("cross_entropy: logits must be 1-d or 2-d");
    }
    if (static_cast<int>(labels.size()) != rows) {
        throw ShapeError("cross_entropy: label count " + std::to_string(labels.size()) +
                         " does not match row count " + std::to_string(rows));
    }
    const auto ld = logits.data();
    std::vector<double> probs(ld.size());
    double loss = 0.0;
    for (int r = 0; r < rows; ++r) {
        const int lbl = labels[r];
        if (lbl < 0 || lbl >= cols) throw ContractError("cross_entropy: label out of range");
        const double* row = ld.data() + static_cast<size_t>(r) * cols;
        double mx = -HUGE_VAL;
        for (int c = 0; c < cols; ++c) mx = std::max(mx, row[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += std::exp(row[c] - mx);
        const double lse = mx + std::log(z);
        loss += lse - row[lbl];
        for (int c = 0; c < cols; ++c)
            probs[static_cast<size_t>(r) * cols + c] = std::exp(row[c] - lse);
    }
    loss /= rows;
    return make_op_result(
        "cross_entropy", {1}, {loss}, {logits.impl()},
        [probs = std::move(probs), labels, rows, cols](const std::vector<double>& g,
                                                       std::vector<std::vector<double>>& gin) {
            if (gin[0].empty()) return;
            for (int r = 0; r < rows; ++r) {
                for (int c = 0; c < cols; ++c) {
                    const size_t ix = static_cast<size_t>(r) * cols + c;
                    double v = probs[ix];
                    if (c == labels[r]) v -= 1.0;
                    gin[0][ix] = g[0] * v / rows;
                }
            }
        });
}

// ---- backward engine ----

void backward(const Tensor& root) {
    if (!root.defined()) throw ContractError("backward: undefined tensor");
    if (root.numel() != 1) throw ContractError("backward: root must be a scalar");
    TensorImpl* rimpl = root.impl().get();
    if (rimpl->requires_grad || rimpl->retain_grad) {
        if (rimpl->grad.empty()) rimpl->grad.assign(1, 0.0);
        rimpl->grad[0] += 1.0;
    }
    if (!rimpl->node) return;

    // Postorder DFS over nodes reachable through inputs; reversed it gives a
    // valid topological sweep (all consumers of a tensor before its producer).
    std::vector<GraphNode*> order;
    std::unordered_set<GraphNode*> seen;
    struct Frame {
        GraphNode* node;
        size_t next_input;
    };
    std::vector<Frame> stack;
    stack.push_back({rimpl->node.get(), 0});
    seen.insert(rimpl->node.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_input < f.node->inputs.size()) {
            GraphNode* child = f.node->inputs[f.next_input]->node.get();
            ++f.next_input;
            if (child != nullptr && !seen.count(child)) {
                seen.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Scratch gradients flow through the graph; persistent .grad only gets
    // contributions at flagged tensors, so each backward call is independent.
    std::unordered_map<TensorImpl*, std::vector<double>> scratch;
    scratch[rimpl] = {1.0};

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        GraphNode* node = *it;
        auto out = node->output.lock();
        if (!out) throw ContractError("backward: graph output expired");
        auto found = scratch.find(out.get());
        if (found == scratch.end()) continue;  // no gradient flows through here
        const std::vector<double>& gout = found->second;

        std::vector<std::vector<double>> gin(node->inputs.size());
        for (size_t i = 0; i < node->inputs.size(); ++i) {
            if (grad_relevant(*node->inputs[i])) {
                gin[i].assign(node->inputs[i]->data.size(), 0.0);
            }
        }
        node->backward(gout, gin);
        for (size_t i = 0; i < node->inputs.size(); ++i) {
            if (gin[i].empty()) continue;
            TensorImpl* in = node->inputs[i].get();
            accumulate_persistent(*in, gin[i]);
            if (in->node) {
                auto& buf = scratch[in];
                if (buf.empty()) {
                    buf = std::move(gin[i]);
                } else {
                    for (size_t j = 0; j < buf.size(); ++j) buf[j] += gin[i][j];
                }
            }
        }
        scratch.erase(out.get());
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    Tensor xa = x.detached_copy();
    xa.set_requires_grad(true);
    Tensor y = f(xa);
    if (y.numel() != 1) throw ContractError("grad_check: f must return a scalar");
    backward(y);
    std::vector<double> analytic(xa.grad().begin(), xa.grad().end());

    Tensor xf = x.detached_copy();
    auto xd = xf.mutable_data();
    double worst = 0.0;
    for (int i = 0; i < xf.numel(); ++i) {
        const double saved = xd[i];
        xd[i] = saved + eps;
        const double up = f(xf).value();
        xd[i] = saved - eps;
        const double dn = f(xf).value();
        xd[i] = saved;
        const double numeric = (up - dn) / (2.0 * eps);
        const double err = std::fabs(analytic[static_cast<size_t>(i)] - numeric) /
                           std::max(1.0, std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace dtme
