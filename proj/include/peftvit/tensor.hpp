// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "peftvit/error.hpp"
#include "peftvit/rng.hpp"

namespace peftvit {

/// Storage precision of a graph. F32 is used for training, F64 for gradient
/// verification. Precision is a template parameter, so mixing the two in one
/// graph does not compile.
enum class Precision { f32, f64 };

template <typename T>
concept Real = std::same_as<T, float> || std::same_as<T, double>;

template <Real T>
inline constexpr Precision precision_of = std::is_same_v<T, float> ? Precision::f32 : Precision::f64;

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline void check_extents(const Shape& s) {
    for (auto e : s)
        if (e == 0) throw ShapeError("zero extent in " + shape_str(s));
}

template <Real T>
class Tensor;

namespace detail {

template <Real T>
struct TensorImpl;

/// One recorded operation. `id` is the creation index; backward visits nodes
/// in decreasing id, which is a valid reverse topological order because an
/// op's inputs always exist before the op does.
template <Real T>
struct Node {
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
    std::function<void(const TensorImpl<T>& out)> backward;
};

template <Real T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::shared_ptr<Node<T>> node;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

inline std::atomic<std::uint64_t> next_node_id{0};
inline thread_local int no_grad_depth = 0;

// C[m,n] += A[m,k] B[k,n]. Every output element accumulates over k in the
// same order whatever its row, so results for a row never depend on the
// other rows in the batch.
template <Real T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        T* __restrict c0 = c + i * n;
        T* __restrict c1 = c0 + n;
        T* __restrict c2 = c1 + n;
        T* __restrict c3 = c2 + n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* __restrict brow = b + p * n;
            const T x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                const T bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        T* __restrict c0 = c + i * n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* __restrict brow = b + p * n;
            const T x0 = a0[p];
            for (std::size_t j = 0; j < n; ++j) c0[j] += x0 * brow[j];
        }
    }
}

// C[k,n] += A[m,k]^T G[m,n]
template <Real T>
void gemm_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* g0 = g + i * n;
        const T* g1 = g0 + n;
        const T* g2 = g1 + n;
        const T* g3 = g2 + n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            T* __restrict crow = c + p * n;
            const T x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
            for (std::size_t j = 0; j < n; ++j) {
                T acc = crow[j];
                acc += x0 * g0[j];
                acc += x1 * g1[j];
                acc += x2 * g2[j];
                acc += x3 * g3[j];
                crow[j] = acc;
            }
        }
    }
    for (; i < m; ++i) {
        const T* g0 = g + i * n;
        const T* a0 = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            T* __restrict crow = c + p * n;
            const T x0 = a0[p];
            for (std::size_t j = 0; j < n; ++j) crow[j] += x0 * g0[j];
        }
    }
}

template <Real T>
std::vector<T> transpose(const T* b, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = b[r * cols + c];
    return out;
}

}  // namespace detail

/// RAII guard that stops operations from recording graph nodes on this
/// thread (evaluation passes).
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Dense row-major tensor with optional gradient state.
///
/// A Tensor is a shared handle: copies alias the same storage, which is what
/// lets graph nodes refer to their inputs. Use clone() for an independent
/// copy.
template <Real T>
class Tensor {
public:
    using value_type = T;
    using Impl = detail::TensorImpl<T>;

    Tensor() = default;

    static Tensor zeros(Shape shape) { return constant(std::move(shape), T(0)); }

    static Tensor constant(Shape shape, T value) {
        check_extents(shape);
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value));
    }

    /// Normal(mean, stddev) entries drawn from Rng(seed) in storage order.
    static Tensor seeded_normal(Shape shape, std::uint64_t seed, double mean, double stddev) {
        check_extents(shape);
        std::vector<T> data(shape_numel(shape));
        Rng rng(seed);
        for (auto& v : data) v = static_cast<T>(rng.normal(mean, stddev));
        return Tensor(std::move(shape), std::move(data));
    }

    static Tensor from(Shape shape, std::vector<T> data) {
        check_extents(shape);
        if (shape_numel(shape) != data.size())
            throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
        return Tensor(std::move(shape), std::move(data));
    }

    static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

    bool defined() const noexcept { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
    std::size_t numel() const { return impl_->data.size(); }

    std::span<T> data() { return impl_->data; }
    std::span<const T> data() const { return impl_->data; }
    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        if (impl_->node && !on) throw UsageError("cannot clear requires_grad on a non-leaf tensor");
        impl_->requires_grad = on;
        return *this;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const T> grad() const { return impl_->grad; }
    std::span<T> mutable_grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy without graph history; keeps the requires_grad flag.
    Tensor clone() const {
        Tensor t(impl_->shape, impl_->data);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    /// Same values, new leaf that does not track gradients.
    Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

    bool is_leaf() const { return impl_->node == nullptr; }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<Impl>& impl() const { return impl_; }

    /// Builds an op result. Records a graph node when gradients are enabled and
    /// some input requires them; otherwise the result is a plain constant.
    static Tensor make_result(Shape shape, std::vector<T> data, std::initializer_list<const Tensor*> inputs,
                              std::function<void(const Impl&)> backward) {
        Tensor out(std::move(shape), std::move(data));
        if (!grad_enabled()) return out;
        bool any = false;
        for (const Tensor* in : inputs) any = any || in->requires_grad();
        if (!any) return out;
        auto node = std::make_shared<detail::Node<T>>();
        node->id = detail::next_node_id.fetch_add(1, std::memory_order_relaxed);
        for (const Tensor* in : inputs) node->inputs.push_back(in->impl_);
        node->backward = std::move(backward);
        out.impl_->node = std::move(node);
        out.impl_->requires_grad = true;
        return out;
    }

private:
    Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    std::shared_ptr<Impl> impl_;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires them; repeated uses of a tensor sum.
template <Real T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw UsageError("backward requires a scalar loss, got shape " +
                         (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad()) throw UsageError("loss does not depend on any tensor that requires grad");

    using Impl = detail::TensorImpl<T>;
    std::vector<Impl*> order;
    std::unordered_set<const Impl*> seen;
    std::vector<Impl*> stack{loss.impl().get()};
    seen.insert(stack.back());
    while (!stack.empty()) {
        Impl* cur = stack.back();
        stack.pop_back();
        if (!cur->node) continue;
        order.push_back(cur);
        for (const auto& in : cur->node->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(order.begin(), order.end(), [](const Impl* a, const Impl* b) { return a->node->id > b->node->id; });

    Impl* root = loss.impl().get();
    root->ensure_grad();
    root->grad[0] += T(1);
    for (Impl* impl : order) {
        if (!impl->grad.empty()) impl->node->backward(*impl);
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// a[..., m, k] x b[k, n] -> [..., m, n]
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() != 2)
        throw ShapeError("matmul expects a[...,m,k] and b[k,n], got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t k = a.shape().back();
    if (k != b.dim(0))
        throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t n = b.dim(1);
    const std::size_t m = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n, T(0));
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);

    auto* ai = a.impl().get();
    auto* bi = b.impl().get();
    return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&a, &b},
                                  [ai, bi, m, k, n](const detail::TensorImpl<T>& o) {
                                      if (ai->requires_grad) {
                                          ai->ensure_grad();
                                          const auto bt = detail::transpose(bi->data.data(), k, n);
                                          detail::gemm_acc(o.grad.data(), bt.data(), ai->grad.data(), m, n, k);
                                      }
                                      if (bi->requires_grad) {
                                          bi->ensure_grad();
                                          detail::gemm_tn_acc(ai->data.data(), o.grad.data(), bi->grad.data(), m, k,
                                                              n);
                                      }
                                  });
}

enum class BinaryOp { add, sub, mul };

namespace detail {

// Maps each flat index of `a` to the flat index of a trailing-aligned `b`
// whose extents are equal to a's or 1.
inline std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
    if (b.size() > a.size())
        throw ShapeError("cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    const std::size_t off = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i)
        if (b[i] != a[off + i] && b[i] != 1)
            throw ShapeError("cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
    const std::size_t n = shape_numel(a);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> a_strides(a.size(), 1), b_strides(b.size(), 1);
    for (std::size_t i = a.size(); i-- > 1;) a_strides[i - 1] = a_strides[i] * a[i];
    for (std::size_t i = b.size(); i-- > 1;) b_strides[i - 1] = b_strides[i] * b[i];
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t bi = 0;
        for (std::size_t ax = 0; ax < b.size(); ++ax) {
            const std::size_t coord = (flat / a_strides[off + ax]) % a[off + ax];
            if (b[ax] != 1) bi += coord * b_strides[ax];
        }
        map[flat] = bi;
    }
    return map;
}

inline bool is_trailing_suffix(const Shape& a, const Shape& b) {
    return b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()));
}

}  // namespace detail

/// Pointwise a (op) b. `b` may be broadcast along trailing axes: it is
/// aligned to a's last axes and each of its extents must match or be 1.
template <Real T>
Tensor<T> elementwise(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t n = a.numel();
    const std::size_t bn = b.numel();
    std::vector<std::size_t> map;
    const bool suffix = detail::is_trailing_suffix(a.shape(), b.shape()) || bn == 1;
    if (!suffix) map = detail::broadcast_map(a.shape(), b.shape());
    auto b_index = [&map, suffix, bn](std::size_t i) { return suffix ? i % bn : map[i]; };

    std::vector<T> out(n);
    const auto ad = a.data();
    const auto bd = b.data();
    switch (op) {
        case BinaryOp::add:
            for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[b_index(i)];
            break;
        case BinaryOp::sub:
            for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[b_index(i)];
            break;
        case BinaryOp::mul:
            for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[b_index(i)];
            break;
    }

    auto* ai = a.impl().get();
    auto* bi = b.impl().get();
    return Tensor<T>::make_result(
        a.shape(), std::move(out), {&a, &b},
        [ai, bi, op, n, bn, suffix, map = std::move(map)](const detail::TensorImpl<T>& o) {
            auto b_index = [&map, suffix, bn](std::size_t i) { return suffix ? i % bn : map[i]; };
            const auto& g = o.grad;
            if (ai->requires_grad) {
                ai->ensure_grad();
                if (op == BinaryOp::mul)
                    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[b_index(i)];
                else
                    for (std::size_t i = 0; i < n; ++i) ai->grad[i] += g[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                switch (op) {
                    case BinaryOp::add:
                        for (std::size_t i = 0; i < n; ++i) bi->grad[b_index(i)] += g[i];
                        break;
                    case BinaryOp::sub:
                        for (std::size_t i = 0; i < n; ++i) bi->grad[b_index(i)] -= g[i];
                        break;
                    case BinaryOp::mul:
                        for (std::size_t i = 0; i < n; ++i) bi->grad[b_index(i)] += g[i] * ai->data[i];
                        break;
                }
            }
        });
}

template <Real T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(BinaryOp::add, a, b);
}
template <Real T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(BinaryOp::sub, a, b);
}
template <Real T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return elementwise(BinaryOp::mul, a, b);
}
template <Real T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
    return add(a, b);
}
template <Real T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
    return sub(a, b);
}
template <Real T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
    return mul(a, b);
}

template <Real T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= c;
    auto* ai = a.impl().get();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [ai, c](const detail::TensorImpl<T>& o) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += c * o.grad[i];
    });
}

template <Real T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v += c;
    auto* ai = a.impl().get();
    return Tensor<T>::make_result(a.shape(), std::move(out), {&a}, [ai](const detail::TensorImpl<T>& o) {
        ai->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) ai->grad[i] += o.grad[i];
    });
}

template <Real T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.data()) s += v;
    auto* ai = a.impl().get();
    return Tensor<T>::make_result(Shape{}, {s}, {&a}, [ai](const detail::TensorImpl<T>& o) {
        ai->ensure_grad();
        for (auto& g : ai->grad) g += o.grad[0];
    });
}

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
template <Real T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax axis " + std::to_string(axis) + " out of range for " +
                                           shape_str(x.shape()));
    const auto& s = x.shape();
    const std::size_t len = s[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

    const auto xd = x.data();
    std::vector<T> out(x.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            T mx = xd[base];
            for (std::size_t l = 1; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
            T z = 0;
            for (std::size_t l = 0; l < len; ++l) {
                const T e = std::exp(xd[base + l * inner] - mx);
                out[base + l * inner] = e;
                z += e;
            }
            for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= z;
        }
    }
    auto* xi = x.impl().get();
    return Tensor<T>::make_result(x.shape(), std::move(out), {&x},
                                  [xi, outer, inner, len](const detail::TensorImpl<T>& o) {
                                      xi->ensure_grad();
                                      for (std::size_t a = 0; a < outer; ++a) {
                                          for (std::size_t in = 0; in < inner; ++in) {
                                              const std::size_t base = a * len * inner + in;
                                              T dot = 0;
                                              for (std::size_t l = 0; l < len; ++l)
                                                  dot += o.grad[base + l * inner] * o.data[base + l * inner];
                                              for (std::size_t l = 0; l < len; ++l) {
                                                  const std::size_t idx = base + l * inner;
                                                  xi->grad[idx] += o.data[idx] * (o.grad[idx] - dot);
                                              }
                                          }
                                      }
                                  });
}

/// Normalizes over the last axis, then applies gamma * x_hat + beta.
template <Real T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = 1e-6) {
    if (x.rank() == 0) throw ShapeError("layer_norm on a rank-0 tensor");
    const std::size_t n = x.shape().back();
    if (gamma.numel() != n || beta.numel() != n)
        throw ShapeError("layer_norm gamma/beta length must be " + std::to_string(n));
    if (!(eps > 0)) throw InputError("layer_norm eps must be positive");
    const std::size_t rows = x.numel() / n;
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xd.data() + r * n;
        T mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(n);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
        rstd[r] = rs;
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gd[j] + bd[j];
        }
    }
    auto* xi = x.impl().get();
    auto* gi = gamma.impl().get();
    auto* bi = beta.impl().get();
    return Tensor<T>::make_result(
        x.shape(), std::move(out), {&x, &gamma, &beta},
        [xi, gi, bi, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](const detail::TensorImpl<T>& o) {
            const auto& g = o.grad;
            if (gi->requires_grad) {
                gi->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gi->grad[j] += g[r * n + j] * xhat[r * n + j];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) bi->grad[j] += g[r * n + j];
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                const T inv_n = T(1) / static_cast<T>(n);
                for (std::size_t r = 0; r < rows; ++r) {
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T d = g[r * n + j] * gi->data[j];
                        mean_d += d;
                        mean_dx += d * xhat[r * n + j];
                    }
                    mean_d *= inv_n;
                    mean_dx *= inv_n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const T d = g[r * n + j] * gi->data[j];
                        xi->grad[r * n + j] += rstd[r] * (d - mean_d - xhat[r * n + j] * mean_dx);
                    }
                }
            }
        });
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF (erf form).
template <Real T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    const auto xd = x.data();
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
    auto* xi = x.impl().get();
    return Tensor<T>::make_result(x.shape(), std::move(out), {&x}, [xi](const detail::TensorImpl<T>& o) {
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
        xi->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const T v = xi->data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            xi->grad[i] += o.grad[i] * (cdf + v * pdf);
        }
    });
}

/// Mean over the batch of -log softmax(logits)[label], via log-sum-exp.
template <Real T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy expects [batch, classes], got " + shape_str(logits.shape()));
    const std::size_t batch = logits.dim(0);
    const std::size_t classes = logits.dim(1);
    if (labels.size() != batch)
        throw InputError("cross_entropy got " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
    for (auto l : labels)
        if (l >= classes)
            throw InputError("label " + std::to_string(l) + " out of range for " + std::to_string(classes) +
                             " classes");
    const auto xd = logits.data();
    std::vector<T> probs(logits.numel());
    T loss = 0;
    for (std::size_t b = 0; b < batch; ++b) {
        const T* row = xd.data() + b * classes;
        const T mx = *std::max_element(row, row + classes);
        T z = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            probs[b * classes + c] = std::exp(row[c] - mx);
            z += probs[b * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= z;
        loss += (mx + std::log(z)) - row[labels[b]];
    }
    loss /= static_cast<T>(batch);
    auto* li = logits.impl().get();
    std::vector<std::size_t> lab(labels.begin(), labels.end());
    return Tensor<T>::make_result(
        Shape{}, {loss}, {&logits},
        [li, batch, classes, probs = std::move(probs), lab = std::move(lab)](const detail::TensorImpl<T>& o) {
            li->ensure_grad();
            const T g = o.grad[0] / static_cast<T>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < classes; ++c) {
                    const T target = c == lab[b] ? T(1) : T(0);
                    li->grad[b * classes + c] += g * (probs[b * classes + c] - target);
                }
            }
        });
}

/// x[..., start:start+len] along the last axis.
template <Real T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t start, std::size_t len) {
    if (x.rank() == 0 || len == 0 || start + len > x.shape().back())
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) + ") out of range for " +
                         shape_str(x.shape()));
    const std::size_t width = x.shape().back();
    const std::size_t rows = x.numel() / width;
    Shape out_shape = x.shape();
    out_shape.back() = len;
    std::vector<T> out(rows * len);
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(xd.data() + r * width + start, len, out.data() + r * len);
    auto* xi = x.impl().get();
    return Tensor<T>::make_result(std::move(out_shape), std::move(out), {&x},
                                  [xi, rows, width, start, len](const detail::TensorImpl<T>& o) {
                                      xi->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r)
                                          for (std::size_t j = 0; j < len; ++j)
                                              xi->grad[r * width + start + j] += o.grad[r * len + j];
                                  });
}

/// Prepends the same token row to every sequence: x[B,P,d], token[d] -> [B,P+1,d].
template <Real T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
    if (x.rank() != 3 || token.numel() != x.dim(2))
        throw ShapeError("prepend_token expects x[B,P,d] and token[d], got " + shape_str(x.shape()) + " and " +
                         shape_str(token.shape()));
    const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
    std::vector<T> out(batch * (seq + 1) * d);
    const auto xd = x.data();
    const auto td = token.data();
    for (std::size_t b = 0; b < batch; ++b) {
        T* dst = out.data() + b * (seq + 1) * d;
        std::copy(td.begin(), td.end(), dst);
        std::copy_n(xd.data() + b * seq * d, seq * d, dst + d);
    }
    auto* xi = x.impl().get();
    auto* ti = token.impl().get();
    return Tensor<T>::make_result(Shape{batch, seq + 1, d}, std::move(out), {&x, &token},
                                  [xi, ti, batch, seq, d](const detail::TensorImpl<T>& o) {
                                      for (std::size_t b = 0; b < batch; ++b) {
                                          const T* src = o.grad.data() + b * (seq + 1) * d;
                                          if (ti->requires_grad) {
                                              ti->ensure_grad();
                                              for (std::size_t j = 0; j < d; ++j) ti->grad[j] += src[j];
                                          }
                                          if (xi->requires_grad) {
                                              xi->ensure_grad();
                                              for (std::size_t j = 0; j < seq * d; ++j)
                                                  xi->grad[b * seq * d + j] += src[d + j];
                                          }
                                      }
                                  });
}

/// x[B,T,d] -> x[:, index, :] as [B,d].
template <Real T>
Tensor<T> select_token(const Tensor<T>& x, std::size_t index) {
    if (x.rank() != 3 || index >= x.dim(1))
        throw ShapeError("select_token index " + std::to_string(index) + " invalid for " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
    std::vector<T> out(batch * d);
    const auto xd = x.data();
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(xd.data() + (b * seq + index) * d, d, out.data() + b * d);
    auto* xi = x.impl().get();
    return Tensor<T>::make_result(Shape{batch, d}, std::move(out), {&x},
                                  [xi, batch, seq, d, index](const detail::TensorImpl<T>& o) {
                                      xi->ensure_grad();
                                      for (std::size_t b = 0; b < batch; ++b)
                                          for (std::size_t j = 0; j < d; ++j)
                                              xi->grad[(b * seq + index) * d + j] += o.grad[b * d + j];
                                  });
}

/// Multi-head scaled dot-product attention over q, k, v of shape [B,T,d].
/// Head h owns channels [h*d/heads, (h+1)*d/heads); scores are scaled by
/// 1/sqrt(d/heads) and normalized with a stabilized row softmax.
template <Real T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("attention expects matching q, k, v of shape [B,T,d]");
    const std::size_t batch = q.dim(0), seq = q.dim(1), d = q.dim(2);
    if (heads == 0 || d % heads != 0) throw ShapeError("attention width " + std::to_string(d) +
                                                       " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = d / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    const auto qd = q.data();
    const auto kd = k.data();
    const auto vd = v.data();
    std::vector<T> out(q.numel(), T(0));
    std::vector<T> probs(batch * heads * seq * seq);

    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            T* p = probs.data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
                const T* qi = qd.data() + (b * seq + i) * d + h * dh;
                T* prow = p + i * seq;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < seq; ++j) {
                    const T* kj = kd.data() + (b * seq + j) * d + h * dh;
                    T s = 0;
                    for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                    prow[j] = s * sc;
                    mx = std::max(mx, prow[j]);
                }
                T z = 0;
                for (std::size_t j = 0; j < seq; ++j) {
                    prow[j] = std::exp(prow[j] - mx);
                    z += prow[j];
                }
                T* oi = out.data() + (b * seq + i) * d + h * dh;
                for (std::size_t j = 0; j < seq; ++j) {
                    prow[j] /= z;
                    const T* vj = vd.data() + (b * seq + j) * d + h * dh;
                    for (std::size_t c = 0; c < dh; ++c) oi[c] += prow[j] * vj[c];
                }
            }
        }
    }

    auto* qi_ = q.impl().get();
    auto* ki_ = k.impl().get();
    auto* vi_ = v.impl().get();
    return Tensor<T>::make_result(
        q.shape(), std::move(out), {&q, &k, &v},
        [qi_, ki_, vi_, batch, seq, d, heads, dh, sc, probs = std::move(probs)](const detail::TensorImpl<T>& o) {
            const bool gq = qi_->requires_grad, gk = ki_->requires_grad, gv = vi_->requires_grad;
            if (gq) qi_->ensure_grad();
            if (gk) ki_->ensure_grad();
            if (gv) vi_->ensure_grad();
            std::vector<T> ds(seq);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const T* p = probs.data() + (b * heads + h) * seq * seq;
                    for (std::size_t i = 0; i < seq; ++i) {
                        const T* go = o.grad.data() + (b * seq + i) * d + h * dh;
                        const T* prow = p + i * seq;
                        // dP_ij = dO_i . V_j ; dS = P * (dP - <dP, P>)
                        T dot = 0;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const T* vj = vi_->data.data() + (b * seq + j) * d + h * dh;
                            T dp = 0;
                            for (std::size_t c = 0; c < dh; ++c) dp += go[c] * vj[c];
                            ds[j] = dp;
                            dot += dp * prow[j];
                            if (gv) {
                                T* gvj = vi_->grad.data() + (b * seq + j) * d + h * dh;
                                for (std::size_t c = 0; c < dh; ++c) gvj[c] += prow[j] * go[c];
                            }
                        }
                        for (std::size_t j = 0; j < seq; ++j) ds[j] = prow[j] * (ds[j] - dot) * sc;
                        const T* qrow = qi_->data.data() + (b * seq + i) * d + h * dh;
                        T* gqi = gq ? qi_->grad.data() + (b * seq + i) * d + h * dh : nullptr;
                        for (std::size_t j = 0; j < seq; ++j) {
                            const std::size_t off = (b * seq + j) * d + h * dh;
                            if (gq) {
                                const T* kj = ki_->data.data() + off;
                                for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds[j] * kj[c];
                            }
                            if (gk) {
                                T* gkj = ki_->grad.data() + off;
                                for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds[j] * qrow[c];
                            }
                        }
                    }
                }
            }
        });
}

}  // namespace peftvit
