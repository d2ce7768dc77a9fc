#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pushpull/rng.hpp"

namespace pushpull {

using Shape = std::vector<int>;
using Mask = std::vector<std::uint8_t>;  // 1 = valid / kept

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

inline int shape_numel(const Shape& s) {
    int n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape must have positive dims, got " + shape_str(s));
        n *= d;
    }
    return n;
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;     // persistent for requires_grad leaves, transient otherwise
    bool requires_grad = false;   // leaf with a persistent gradient buffer
    bool needs_grad = false;      // lies on a path to a requires_grad leaf
    std::uint64_t id = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // reads this->grad, accumulates into parents

    static std::uint64_t next_id() {
        static std::atomic<std::uint64_t> counter{1};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }
};

inline thread_local bool g_grad_enabled = true;

}  // namespace detail

/// Disables graph construction within a scope (evaluation mode).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
    ~NoGradGuard() { detail::g_grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Dense row-major double tensor; a shared handle into a reverse-mode
/// computation graph. Copies alias the same node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const int n = shape_numel(shape);
        return make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const int n = shape_numel(shape);
        return make_leaf(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
    }

    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false) {
        const int n = shape_numel(shape);
        if (static_cast<std::size_t>(n) != values.size()) {
            throw std::invalid_argument("tensor values count " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        return make_leaf(std::move(shape), std::move(values), requires_grad);
    }

    static Tensor scalar(double value) { return from_values({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node()->shape; }
    int size() const { return static_cast<int>(node()->values.size()); }
    std::uint64_t graph_id() const { return node()->id; }
    bool requires_grad() const { return node()->requires_grad; }

    std::vector<double>& values() { return node()->values; }
    const std::vector<double>& values() const { return node()->values; }

    /// Scalar payload; contract-checked.
    double value() const {
        if (size() != 1) throw std::invalid_argument("value() requires a scalar tensor, shape is " + shape_str(shape()));
        return node()->values[0];
    }

    std::vector<double>& grad() {
        ensure_grad_buffer();
        return node()->grad;
    }
    const std::vector<double>& grad() const {
        const_cast<Tensor*>(this)->ensure_grad_buffer();
        return node()->grad;
    }

    void zero_grad() {
        if (!node()->requires_grad) return;
        node()->grad.assign(node()->values.size(), 0.0);
    }

    /// Reverse-mode sweep from a scalar root. Gradients of requires_grad
    /// leaves accumulate across calls; interior buffers are transient.
    void backward() const;

    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

private:
    static Tensor make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        t.node_->needs_grad = requires_grad;
        t.node_->id = detail::TensorNode::next_id();
        if (requires_grad) t.node_->grad.assign(t.node_->values.size(), 0.0);
        return t;
    }

    void ensure_grad_buffer() {
        if (!node()->requires_grad) {
            throw std::logic_error("grad() is only kept for requires_grad tensors");
        }
        if (node()->grad.size() != node()->values.size()) node()->grad.assign(node()->values.size(), 0.0);
    }

    detail::TensorNode* node() const {
        if (!node_) throw std::logic_error("use of an empty Tensor");
        return node_.get();
    }

    friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, std::function<void(detail::TensorNode&)>);
    std::shared_ptr<detail::TensorNode> node_;
};

/// Builds an op-result node; drops the graph edges when grad mode is off or
/// no parent can propagate a gradient.
inline Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                      std::function<void(detail::TensorNode&)> backprop) {
    Tensor t;
    t.node_ = std::make_shared<detail::TensorNode>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->id = detail::TensorNode::next_id();
    bool needs = false;
    if (detail::g_grad_enabled) {
        for (const Tensor& p : parents) {
            if (p.node_ptr()->needs_grad) {
                needs = true;
                break;
            }
        }
    }
    if (needs) {
        t.node_->needs_grad = true;
        t.node_->parents.reserve(parents.size());
        for (Tensor& p : parents) t.node_->parents.push_back(p.node_ptr());
        t.node_->backprop = std::move(backprop);
    }
    return t;
}

inline void Tensor::backward() const {
    detail::TensorNode* root = node();
    if (root->values.size() != 1) {
        throw std::invalid_argument("backward() requires a scalar root, shape is " + shape_str(root->shape));
    }
    if (!root->needs_grad) return;

    // Iterative post-order DFS; parents precede children in `order`.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    visited.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::TensorNode* p = f.n->parents[f.next++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (detail::TensorNode* n : order) {
        if (!n->requires_grad) n->grad.assign(n->values.size(), 0.0);
        else if (n->grad.size() != n->values.size()) n->grad.assign(n->values.size(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) (*it)->backprop(**it);
    }
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

inline void accumulate(TensorNode* n, const double* g, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) n->grad[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        if (pa->needs_grad) detail::accumulate(pa, self.grad.data(), self.grad.size());
        if (pb->needs_grad) detail::accumulate(pb, self.grad.data(), self.grad.size());
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        if (pa->needs_grad) detail::accumulate(pa, self.grad.data(), self.grad.size());
        if (pb->needs_grad) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa->needs_grad) pa->grad[i] += self.grad[i] * pb->values[i];
            if (pb->needs_grad) pb->grad[i] += self.grad[i] * pa->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * av[i];
    return make_op(a.shape(), std::move(out), {a}, [factor](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        if (!pa->needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += factor * self.grad[i];
    });
}

inline Tensor negate(const Tensor& a) { return scale(a, -1.0); }

/// Adds a constant buffer elementwise (the buffer is not a graph node).
inline Tensor shift(const Tensor& a, const std::vector<double>& constant) {
    if (constant.size() != a.values().size()) {
        throw std::invalid_argument("shift: constant size " + std::to_string(constant.size()) +
                                    " does not match tensor " + shape_str(a.shape()));
    }
    std::vector<double> out(a.values().size());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + constant[i];
    return make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        if (pa->needs_grad) detail::accumulate(pa, self.grad.data(), self.grad.size());
    });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return make_op({1}, {s}, {a}, [](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        if (!pa->needs_grad) return;
        const double g = self.grad[0];
        for (double& gv : pa->grad) gv += g;
    });
}

/// Mean of a list of scalar tensors (used for batch averaging without deep
/// add chains).
inline Tensor average(const std::vector<Tensor>& scalars) {
    if (scalars.empty()) throw std::invalid_argument("average: empty list");
    double s = 0.0;
    for (const Tensor& t : scalars) {
        if (t.size() != 1) throw std::invalid_argument("average: all inputs must be scalars");
        s += t.value();
    }
    const double inv = 1.0 / static_cast<double>(scalars.size());
    return make_op({1}, {s * inv}, scalars, [inv](detail::TensorNode& self) {
        const double g = self.grad[0] * inv;
        for (auto& p : self.parents) {
            if (p->needs_grad) p->grad[0] += g;
        }
    });
}

/// min(x, cap) for a scalar; gradient passes only while x <= cap.
inline Tensor clamp_max(const Tensor& x, double cap) {
    if (x.size() != 1) throw std::invalid_argument("clamp_max: scalar expected");
    const double v = x.value();
    const bool pass = v <= cap;
    return make_op({1}, {pass ? v : cap}, {x}, [pass](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        if (pa->needs_grad && pass) pa->grad[0] += self.grad[0];
    });
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Standard matrix product a[m x k] * b[k x n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (int i = 0; i < m; ++i) {
        for (int t = 0; t < k; ++t) {
            const double aval = av[i * k + t];
            if (aval == 0.0) continue;
            const double* brow = bv + t * n;
            double* orow = out.data() + i * n;
            for (int j = 0; j < n; ++j) orow[j] += aval * brow[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        const double* g = self.grad.data();
        if (pa->needs_grad) {
            // dA[i,t] += sum_j g[i,j] * B[t,j]
            const double* bv = pb->values.data();
            for (int i = 0; i < m; ++i) {
                for (int t = 0; t < k; ++t) {
                    double s = 0.0;
                    const double* grow = g + i * n;
                    const double* brow = bv + t * n;
                    for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                    pa->grad[i * k + t] += s;
                }
            }
        }
        if (pb->needs_grad) {
            // dB[t,j] += sum_i A[i,t] * g[i,j]
            const double* av = pa->values.data();
            for (int i = 0; i < m; ++i) {
                const double* grow = g + i * n;
                for (int t = 0; t < k; ++t) {
                    const double aval = av[i * k + t];
                    if (aval == 0.0) continue;
                    double* brow = pb->grad.data() + t * n;
                    for (int j = 0; j < n; ++j) brow[j] += aval * grow[j];
                }
            }
        }
    });
}

/// factor * (a * b^T) with a[m x k], b[n x k]; the attention-score product.
inline Tensor scaled_dot_nt(const Tensor& a, const Tensor& b, double factor) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1]) {
        throw std::invalid_argument("scaled_dot_nt: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const double* av = a.values().data();
    const double* bv = b.values().data();
    for (int i = 0; i < m; ++i) {
        const double* arow = av + i * k;
        for (int j = 0; j < n; ++j) {
            const double* brow = bv + j * k;
            double s = 0.0;
            for (int t = 0; t < k; ++t) s += arow[t] * brow[t];
            out[static_cast<std::size_t>(i) * n + j] = factor * s;
        }
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n, factor](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        const double* g = self.grad.data();
        if (pa->needs_grad) {
            const double* bv = pb->values.data();
            for (int i = 0; i < m; ++i) {
                double* arow = pa->grad.data() + i * k;
                const double* grow = g + i * n;
                for (int j = 0; j < n; ++j) {
                    const double gv = factor * grow[j];
                    if (gv == 0.0) continue;
                    const double* brow = bv + j * k;
                    for (int t = 0; t < k; ++t) arow[t] += gv * brow[t];
                }
            }
        }
        if (pb->needs_grad) {
            const double* av = pa->values.data();
            for (int i = 0; i < m; ++i) {
                const double* arow = av + i * k;
                const double* grow = g + i * n;
                for (int j = 0; j < n; ++j) {
                    const double gv = factor * grow[j];
                    if (gv == 0.0) continue;
                    double* brow = pb->grad.data() + j * k;
                    for (int t = 0; t < k; ++t) brow[t] += gv * arow[t];
                }
            }
        }
    });
}

/// y = x * w^T + b with w[out x in]; x is [L x in] or a bare [in] vector.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const bool vec = x.shape().size() == 1;
    const int rows = vec ? 1 : x.shape()[0];
    const int in = vec ? x.shape()[0] : x.shape()[1];
    if (w.shape().size() != 2 || w.shape()[1] != in) {
        throw std::invalid_argument("linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                    shape_str(x.shape()));
    }
    const int out_dim = w.shape()[0];
    if (b.shape().size() != 1 || b.shape()[0] != out_dim) {
        throw std::invalid_argument("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                                    shape_str(w.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * out_dim);
    const double* xv = x.values().data();
    const double* wv = w.values().data();
    const double* bv = b.values().data();
    for (int r = 0; r < rows; ++r) {
        const double* xrow = xv + r * in;
        double* orow = out.data() + r * out_dim;
        for (int o = 0; o < out_dim; ++o) {
            const double* wrow = wv + o * in;
            double s = bv[o];
            for (int i = 0; i < in; ++i) s += xrow[i] * wrow[i];
            orow[o] = s;
        }
    }
    Shape oshape = vec ? Shape{out_dim} : Shape{rows, out_dim};
    return make_op(std::move(oshape), std::move(out), {x, w, b},
                   [rows, in, out_dim](detail::TensorNode& self) {
                       auto* px = self.parents[0].get();
                       auto* pw = self.parents[1].get();
                       auto* pb = self.parents[2].get();
                       const double* g = self.grad.data();
                       if (px->needs_grad) {
                           const double* wv = pw->values.data();
                           for (int r = 0; r < rows; ++r) {
                               double* xrow = px->grad.data() + r * in;
                               const double* grow = g + r * out_dim;
                               for (int o = 0; o < out_dim; ++o) {
                                   const double gv = grow[o];
                                   if (gv == 0.0) continue;
                                   const double* wrow = wv + o * in;
                                   for (int i = 0; i < in; ++i) xrow[i] += gv * wrow[i];
                               }
                           }
                       }
                       if (pw->needs_grad) {
                           const double* xv = px->values.data();
                           for (int r = 0; r < rows; ++r) {
                               const double* xrow = xv + r * in;
                               const double* grow = g + r * out_dim;
                               for (int o = 0; o < out_dim; ++o) {
                                   const double gv = grow[o];
                                   if (gv == 0.0) continue;
                                   double* wrow = pw->grad.data() + o * in;
                                   for (int i = 0; i < in; ++i) wrow[i] += gv * xrow[i];
                               }
                           }
                       }
                       if (pb->needs_grad) {
                           for (int r = 0; r < rows; ++r) {
                               const double* grow = g + r * out_dim;
                               for (int o = 0; o < out_dim; ++o) pb->grad[o] += grow[o];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Shape surgery
// ---------------------------------------------------------------------------

inline Tensor slice_cols(const Tensor& x, int start, int len) {
    if (x.shape().size() != 2) throw std::invalid_argument("slice_cols: matrix expected, got " + shape_str(x.shape()));
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (start < 0 || len <= 0 || start + len > cols) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " + shape_str(x.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * len);
    const double* xv = x.values().data();
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < len; ++c) out[static_cast<std::size_t>(r) * len + c] = xv[r * cols + start + c];
    }
    return make_op({rows, len}, std::move(out), {x}, [rows, cols, start, len](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        const double* g = self.grad.data();
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < len; ++c) px->grad[r * cols + start + c] += g[r * len + c];
        }
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty list");
    const int rows = parts[0].shape()[0];
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != rows) {
            throw std::invalid_argument("concat_cols: inconsistent part shape " + shape_str(p.shape()));
        }
        total += p.shape()[1];
    }
    std::vector<double> out(static_cast<std::size_t>(rows) * total);
    int offset = 0;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        const int w = p.shape()[1];
        const double* pv = p.values().data();
        for (int r = 0; r < rows; ++r) {
            for (int c = 0; c < w; ++c) out[static_cast<std::size_t>(r) * total + offset + c] = pv[r * w + c];
        }
        widths.push_back(w);
        offset += w;
    }
    return make_op({rows, total}, std::move(out), parts,
                   [rows, total, widths = std::move(widths)](detail::TensorNode& self) {
                       const double* g = self.grad.data();
                       int offset = 0;
                       for (std::size_t p = 0; p < self.parents.size(); ++p) {
                           const int w = widths[p];
                           auto* pp = self.parents[p].get();
                           if (pp->needs_grad) {
                               for (int r = 0; r < rows; ++r) {
                                   for (int c = 0; c < w; ++c) pp->grad[r * w + c] += g[r * total + offset + c];
                               }
                           }
                           offset += w;
                       }
                   });
}

inline Tensor row(const Tensor& x, int index) {
    if (x.shape().size() != 2) throw std::invalid_argument("row: matrix expected, got " + shape_str(x.shape()));
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (index < 0 || index >= rows) throw std::invalid_argument("row: index out of range");
    std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(index) * cols,
                            x.values().begin() + static_cast<std::ptrdiff_t>(index + 1) * cols);
    return make_op({cols}, std::move(out), {x}, [index, cols](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        for (int c = 0; c < cols; ++c) px->grad[index * cols + c] += self.grad[c];
    });
}

/// Embedding lookup: rows of `table` selected by `ids`.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) throw std::invalid_argument("gather_rows: table must be 2-D");
    const int vocab = table.shape()[0], dim = table.shape()[1];
    std::vector<double> out(ids.size() * static_cast<std::size_t>(dim));
    const double* tv = table.values().data();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const int id = ids[r];
        if (id < 0 || id >= vocab) {
            throw std::invalid_argument("gather_rows: id " + std::to_string(id) + " out of table " +
                                        shape_str(table.shape()));
        }
        for (int c = 0; c < dim; ++c) out[r * static_cast<std::size_t>(dim) + c] = tv[id * dim + c];
    }
    return make_op({static_cast<int>(ids.size()), dim}, std::move(out), {table},
                   [ids, dim](detail::TensorNode& self) {
                       auto* pt = self.parents[0].get();
                       if (!pt->needs_grad) return;
                       const double* g = self.grad.data();
                       for (std::size_t r = 0; r < ids.size(); ++r) {
                           double* trow = pt->grad.data() + static_cast<std::size_t>(ids[r]) * dim;
                           for (int c = 0; c < dim; ++c) trow[c] += g[r * static_cast<std::size_t>(dim) + c];
                       }
                   });
}

// ---------------------------------------------------------------------------
// Row-structured ops (softmax, pooling, masking)
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last dimension, numerically stabilized by
/// row-max subtraction. With a mask, masked entries are exactly 0 and
/// excluded from the normalization.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr) {
    if (x.shape().empty()) throw std::invalid_argument("softmax_rows: empty tensor");
    const int n = x.shape().back();
    const int rows = x.size() / n;
    if (mask) {
        if (static_cast<int>(mask->size()) != n) {
            throw std::invalid_argument("softmax_rows: mask length " + std::to_string(mask->size()) +
                                        " does not match row width " + std::to_string(n));
        }
        bool any = false;
        for (auto m : *mask) any = any || (m != 0);
        if (!any) throw std::invalid_argument("softmax_rows: fully masked row");
    }
    std::vector<double> out(x.values().size());
    const double* xv = x.values().data();
    for (int r = 0; r < rows; ++r) {
        const double* xrow = xv + static_cast<std::size_t>(r) * n;
        double* orow = out.data() + static_cast<std::size_t>(r) * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (!mask || (*mask)[j]) mx = std::max(mx, xrow[j]);
        }
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            if (!mask || (*mask)[j]) {
                orow[j] = std::exp(xrow[j] - mx);
                s += orow[j];
            } else {
                orow[j] = 0.0;
            }
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < n; ++j) orow[j] *= inv;
    }
    Mask mcopy = mask ? *mask : Mask{};
    return make_op(x.shape(), std::move(out), {x}, [n, rows, mcopy = std::move(mcopy)](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        const double* y = self.values.data();
        const double* g = self.grad.data();
        for (int r = 0; r < rows; ++r) {
            const double* yrow = y + static_cast<std::size_t>(r) * n;
            const double* grow = g + static_cast<std::size_t>(r) * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += yrow[j] * grow[j];
            double* xrow = px->grad.data() + static_cast<std::size_t>(r) * n;
            for (int j = 0; j < n; ++j) {
                if (!mcopy.empty() && !mcopy[j]) continue;
                xrow[j] += yrow[j] * (grow[j] - dot);
            }
        }
    });
}

/// Zeroes whole rows where keep[r] == 0 (padded attention queries).
inline Tensor zero_rows(const Tensor& x, const Mask& keep) {
    if (x.shape().size() != 2) throw std::invalid_argument("zero_rows: matrix expected");
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (static_cast<int>(keep.size()) != rows) throw std::invalid_argument("zero_rows: keep mask length mismatch");
    std::vector<double> out(x.values().size(), 0.0);
    const double* xv = x.values().data();
    for (int r = 0; r < rows; ++r) {
        if (!keep[r]) continue;
        for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(r) * cols + c] = xv[r * cols + c];
    }
    return make_op(x.shape(), std::move(out), {x}, [rows, cols, keep](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        const double* g = self.grad.data();
        for (int r = 0; r < rows; ++r) {
            if (!keep[r]) continue;
            for (int c = 0; c < cols; ++c) px->grad[r * cols + c] += g[static_cast<std::size_t>(r) * cols + c];
        }
    });
}

/// Arithmetic mean over the valid rows of an [L x d] matrix.
inline Tensor mean_pool(const Tensor& states, const Mask& valid) {
    if (states.shape().size() != 2) throw std::invalid_argument("mean_pool: matrix expected, got " + shape_str(states.shape()));
    const int rows = states.shape()[0], cols = states.shape()[1];
    if (static_cast<int>(valid.size()) != rows) {
        throw std::invalid_argument("mean_pool: mask length " + std::to_string(valid.size()) + " vs " +
                                    std::to_string(rows) + " rows");
    }
    int count = 0;
    for (auto m : valid) count += (m != 0);
    if (count == 0) throw std::invalid_argument("mean_pool: no valid positions");
    std::vector<double> out(static_cast<std::size_t>(cols), 0.0);
    const double* sv = states.values().data();
    for (int r = 0; r < rows; ++r) {
        if (!valid[r]) continue;
        for (int c = 0; c < cols; ++c) out[c] += sv[r * cols + c];
    }
    const double inv = 1.0 / count;
    for (double& v : out) v *= inv;
    return make_op({cols}, std::move(out), {states}, [rows, cols, valid, inv](detail::TensorNode& self) {
        auto* ps = self.parents[0].get();
        if (!ps->needs_grad) return;
        for (int r = 0; r < rows; ++r) {
            if (!valid[r]) continue;
            for (int c = 0; c < cols; ++c) ps->grad[r * cols + c] += inv * self.grad[c];
        }
    });
}

/// Mean squared difference over valid entries; the mask, when given, matches
/// the operand shape elementwise.
inline Tensor mse(const Tensor& a, const Tensor& b, const Mask* mask = nullptr) {
    detail::check_same_shape(a, b, "mse");
    const std::size_t n = a.values().size();
    if (mask && mask->size() != n) {
        throw std::invalid_argument("mse: mask size " + std::to_string(mask->size()) + " does not match " +
                                    shape_str(a.shape()));
    }
    std::size_t count = 0;
    double s = 0.0;
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        const double d = av[i] - bv[i];
        s += d * d;
        ++count;
    }
    if (count == 0) throw std::invalid_argument("mse: no valid entries");
    const double inv = 1.0 / static_cast<double>(count);
    Mask mcopy = mask ? *mask : Mask{};
    return make_op({1}, {s * inv}, {a, b}, [inv, mcopy = std::move(mcopy)](detail::TensorNode& self) {
        auto* pa = self.parents[0].get();
        auto* pb = self.parents[1].get();
        const double g = self.grad[0] * inv;
        const std::size_t n = pa->values.size();
        for (std::size_t i = 0; i < n; ++i) {
            if (!mcopy.empty() && !mcopy[i]) continue;
            const double d = 2.0 * g * (pa->values[i] - pb->values[i]);
            if (pa->needs_grad) pa->grad[i] += d;
            if (pb->needs_grad) pb->grad[i] -= d;
        }
    });
}

/// -log(probs[gold]) with the probability floored at 1e-12.
inline Tensor cross_entropy(const Tensor& probs, int gold) {
    if (probs.shape().size() != 1) throw std::invalid_argument("cross_entropy: probability vector expected");
    const int n = probs.shape()[0];
    if (gold < 0 || gold >= n) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(gold) + " out of range for " +
                                    std::to_string(n) + " classes");
    }
    double total = 0.0;
    for (double p : probs.values()) total += p;
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("cross_entropy: probabilities sum to " + std::to_string(total));
    }
    const double p = std::max(probs.values()[static_cast<std::size_t>(gold)], 1e-12);
    return make_op({1}, {-std::log(p)}, {probs}, [gold](detail::TensorNode& self) {
        auto* pp = self.parents[0].get();
        if (!pp->needs_grad) return;
        const double pv = pp->values[static_cast<std::size_t>(gold)];
        if (pv > 1e-12) pp->grad[static_cast<std::size_t>(gold)] -= self.grad[0] / pv;
    });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.values().size());
    const auto& xv = x.values();
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
    }
    return make_op(x.shape(), std::move(out), {x}, [](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        constexpr double kInvSqrt2 = 0.70710678118654752440;
        constexpr double kInvSqrt2Pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double v = px->values[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            px->grad[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

/// Per-row layer normalization with learned gain/bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12) {
    if (x.shape().size() != 2) throw std::invalid_argument("layer_norm: matrix expected, got " + shape_str(x.shape()));
    const int rows = x.shape()[0], cols = x.shape()[1];
    if (gain.shape() != Shape{cols} || bias.shape() != Shape{cols}) {
        throw std::invalid_argument("layer_norm: gain/bias must be [" + std::to_string(cols) + "]");
    }
    std::vector<double> out(x.values().size());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    std::vector<double> means(static_cast<std::size_t>(rows));
    const double* xv = x.values().data();
    const double* gv = gain.values().data();
    const double* bv = bias.values().data();
    for (int r = 0; r < rows; ++r) {
        const double* xrow = xv + static_cast<std::size_t>(r) * cols;
        double mean = 0.0;
        for (int c = 0; c < cols; ++c) mean += xrow[c];
        mean /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
            const double d = xrow[c] - mean;
            var += d * d;
        }
        var /= cols;
        const double is = 1.0 / std::sqrt(var + eps);
        means[static_cast<std::size_t>(r)] = mean;
        inv_std[static_cast<std::size_t>(r)] = is;
        double* orow = out.data() + static_cast<std::size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) orow[c] = gv[c] * (xrow[c] - mean) * is + bv[c];
    }
    return make_op(x.shape(), std::move(out), {x, gain, bias},
                   [rows, cols, means = std::move(means), inv_std = std::move(inv_std)](detail::TensorNode& self) {
                       auto* px = self.parents[0].get();
                       auto* pg = self.parents[1].get();
                       auto* pb = self.parents[2].get();
                       for (int r = 0; r < rows; ++r) {
                           const double mean = means[static_cast<std::size_t>(r)];
                           const double is = inv_std[static_cast<std::size_t>(r)];
                           const double* xrow = px->values.data() + static_cast<std::size_t>(r) * cols;
                           const double* grow = self.grad.data() + static_cast<std::size_t>(r) * cols;
                           // dxhat, and its projections onto the mean/variance directions
                           double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                           for (int c = 0; c < cols; ++c) {
                               const double xhat = (xrow[c] - mean) * is;
                               const double dxhat = grow[c] * pg->values[static_cast<std::size_t>(c)];
                               sum_dxhat += dxhat;
                               sum_dxhat_xhat += dxhat * xhat;
                               if (pg->needs_grad) pg->grad[static_cast<std::size_t>(c)] += grow[c] * xhat;
                               if (pb->needs_grad) pb->grad[static_cast<std::size_t>(c)] += grow[c];
                           }
                           if (px->needs_grad) {
                               double* xg = px->grad.data() + static_cast<std::size_t>(r) * cols;
                               const double invn = 1.0 / cols;
                               for (int c = 0; c < cols; ++c) {
                                   const double xhat = (xrow[c] - mean) * is;
                                   const double dxhat = grow[c] * pg->values[static_cast<std::size_t>(c)];
                                   xg[c] += is * (dxhat - invn * sum_dxhat - invn * xhat * sum_dxhat_xhat);
                               }
                           }
                       }
                   });
}

/// Inverted dropout; draws one uniform per element from `rng`.
inline Tensor dropout(const Tensor& x, double p, RngStream& rng) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
    if (p == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - p);
    std::vector<double> mask(x.values().size());
    for (double& m : mask) m = (rng.uniform() < p) ? 0.0 : keep_scale;
    std::vector<double> out(x.values().size());
    const auto& xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::TensorNode& self) {
        auto* px = self.parents[0].get();
        if (!px->needs_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * mask[i];
    });
}

}  // namespace pushpull
