#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rils/errors.hpp"
#include "rils/rng.hpp"

namespace rils {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// ---------------------------------------------------------------------------
// Grad-recording switch (thread local). Evaluation paths wrap themselves in a
// NoGradGuard so forward passes build no graph.
// ---------------------------------------------------------------------------

namespace detail {
inline thread_local int no_grad_depth = 0;
}

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Tensor: dense N-d array with reverse-mode autodiff. A Tensor is a shared
// handle to a graph node; ops create new nodes that reference their inputs.
// Values are immutable after creation except for leaf buffers (owned by the
// optimizer / finite-difference harness) and grad buffers.
// ---------------------------------------------------------------------------

template <typename T>
class Tensor {
public:
    struct Node {
        uint64_t id = 0;
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // allocated on first touch during backward
        bool requires_grad = false;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Node>> inputs;
        std::function<void(Node&)> backward_fn;
    };
    using NodePtr = std::shared_ptr<Node>;

    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match buffer length " +
                             std::to_string(data.size()));
        Tensor t;
        t.node_ = fresh_node(std::move(shape), std::move(data));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        std::vector<T> data(shape_numel(shape), v);
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(T v) { return from_data({1, 1}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
        std::vector<T> data(shape_numel(shape));
        for (auto& x : data) x = trunc_normal<T>(rng, stddev);
        return from_data(std::move(shape), std::move(data), requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    size_t rank() const { return node_->shape.size(); }
    size_t numel() const { return node_->value.size(); }
    size_t rows() const { return node_->shape.at(0); }
    size_t cols() const { return node_->shape.at(1); }

    const std::vector<T>& value() const { return node_->value; }

    // Leaf-owner access: the optimizer and the finite-difference harness
    // mutate leaf buffers in place between graph evaluations.
    std::vector<T>& mutable_value() {
        if (!node_->inputs.empty())
            throw ContractError("mutable_value: only leaf tensors may be mutated");
        return node_->value;
    }

    T item() const {
        if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    T at(size_t r, size_t c) const {
        if (rank() != 2 || r >= rows() || c >= cols())
            throw IndexError("at: (" + std::to_string(r) + "," + std::to_string(c) + ") outside " +
                             shape_str(shape()));
        return node_->value[r * cols() + c];
    }

    bool requires_grad() const { return node_->requires_grad; }

    void set_requires_grad(bool v) {
        if (!node_->inputs.empty())
            throw ContractError("set_requires_grad: only valid on leaf tensors");
        node_->requires_grad = v;
    }

    bool has_grad() const { return !node_->grad.empty(); }

    const std::vector<T>& grad() const {
        if (node_->grad.empty()) node_->grad.assign(numel(), T(0));
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    NodePtr node() const { return node_; }
    static Tensor wrap(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    // Monotonic count of graph nodes created process-wide; lets tests assert
    // that disabled branches build no graph.
    static uint64_t nodes_created() { return counter().load(); }

    static NodePtr fresh_node(Shape shape, std::vector<T> value) {
        auto n = std::make_shared<Node>();
        n->id = counter().fetch_add(1) + 1;
        n->shape = std::move(shape);
        n->value = std::move(value);
        return n;
    }

private:
    NodePtr node_;

    static std::atomic<uint64_t>& counter() {
        static std::atomic<uint64_t> c{0};
        return c;
    }
};

namespace detail {

template <typename T>
void ensure_grad(typename Tensor<T>::Node& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
}

template <typename T>
void require_rank2(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

// Builds the result node. Records provenance only when grads are enabled and
// at least one input requires them; otherwise the result is a plain leaf.
template <typename T, typename Backward>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
    auto node = Tensor<T>::fresh_node(std::move(shape), std::move(value));
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& t : inputs) any = any || t.node()->requires_grad;
        track = any;
    }
    if (track) {
        node->op = op;
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward_fn = std::forward<Backward>(backward);
    }
    return Tensor<T>::wrap(std::move(node));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense kernels (row-major). Backward passes reuse them instead of
// materializing transposes.
// ---------------------------------------------------------------------------

namespace detail {

// c[M,N] += a[M,K] @ b[K,N]
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        T* crow = c + m * N;
        for (size_t k = 0; k < K; ++k) {
            const T amk = arow[k];
            const T* brow = b + k * N;
            for (size_t n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

// c[M,N] += a[M,K] @ b[N,K]^T
template <typename T>
void gemm_abt_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        T* crow = c + m * N;
        for (size_t n = 0; n < N; ++n) {
            const T* brow = b + n * K;
            T acc = 0;
            for (size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[n] += acc;
        }
    }
}

// c[K,N] += a[M,K]^T @ b[M,N]
template <typename T>
void gemm_atb_acc(const T* a, const T* b, T* c, size_t M, size_t K, size_t N) {
    for (size_t m = 0; m < M; ++m) {
        const T* arow = a + m * K;
        const T* brow = b + m * N;
        for (size_t k = 0; k < K; ++k) {
            const T amk = arow[k];
            T* crow = c + k * N;
            for (size_t n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return detail::make_op<T>("add", a.shape(), std::move(out), {a, b},
                              [na = a.node(), nb = b.node()](typename Tensor<T>::Node& self) {
                                  for (auto& n : {na, nb}) {
                                      if (!n->requires_grad) continue;
                                      detail::ensure_grad<T>(*n);
                                      for (size_t i = 0; i < self.grad.size(); ++i) n->grad[i] += self.grad[i];
                                  }
                              });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b},
                              [na = a.node(), nb = b.node()](typename Tensor<T>::Node& self) {
                                  if (na->requires_grad) {
                                      detail::ensure_grad<T>(*na);
                                      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
                                  }
                                  if (nb->requires_grad) {
                                      detail::ensure_grad<T>(*nb);
                                      for (size_t i = 0; i < self.grad.size(); ++i) nb->grad[i] -= self.grad[i];
                                  }
                              });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b},
                              [na = a.node(), nb = b.node()](typename Tensor<T>::Node& self) {
                                  if (na->requires_grad) {
                                      detail::ensure_grad<T>(*na);
                                      for (size_t i = 0; i < self.grad.size(); ++i)
                                          na->grad[i] += self.grad[i] * nb->value[i];
                                  }
                                  if (nb->requires_grad) {
                                      detail::ensure_grad<T>(*nb);
                                      for (size_t i = 0; i < self.grad.size(); ++i)
                                          nb->grad[i] += self.grad[i] * na->value[i];
                                  }
                              });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    return detail::make_op<T>("scalar_mul", a.shape(), std::move(out), {a},
                              [na = a.node(), c](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i] * c;
                              });
}

// Broadcast multiply by a one-element tensor (the learnable temperature path).
template <typename T>
Tensor<T> scale(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("scale: scale factor must have one element, got " + shape_str(s.shape()));
    const T sv = s.value()[0];
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * sv;
    return detail::make_op<T>("scale", a.shape(), std::move(out), {a, s},
                              [na = a.node(), ns = s.node(), sv](typename Tensor<T>::Node& self) {
                                  if (na->requires_grad) {
                                      detail::ensure_grad<T>(*na);
                                      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i] * sv;
                                  }
                                  if (ns->requires_grad) {
                                      detail::ensure_grad<T>(*ns);
                                      T acc = 0;
                                      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * na->value[i];
                                      ns->grad[0] += acc;
                                  }
                              });
}

// Adds a 1xD row to every row of an NxD matrix (bias addition).
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    detail::require_rank2(a, "add_row");
    detail::require_rank2(row, "add_row");
    if (row.rows() != 1 || row.cols() != a.cols())
        throw ShapeError("add_row: row " + shape_str(row.shape()) + " does not broadcast over " +
                         shape_str(a.shape()));
    const size_t N = a.rows(), D = a.cols();
    std::vector<T> out(a.numel());
    for (size_t r = 0; r < N; ++r)
        for (size_t c = 0; c < D; ++c) out[r * D + c] = a.value()[r * D + c] + row.value()[c];
    return detail::make_op<T>("add_row", a.shape(), std::move(out), {a, row},
                              [na = a.node(), nr = row.node(), N, D](typename Tensor<T>::Node& self) {
                                  if (na->requires_grad) {
                                      detail::ensure_grad<T>(*na);
                                      for (size_t i = 0; i < self.grad.size(); ++i) na->grad[i] += self.grad[i];
                                  }
                                  if (nr->requires_grad) {
                                      detail::ensure_grad<T>(*nr);
                                      for (size_t r = 0; r < N; ++r)
                                          for (size_t c = 0; c < D; ++c) nr->grad[c] += self.grad[r * D + c];
                                  }
                              });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.value()[i]);
    return detail::make_op<T>("exp", a.shape(), std::move(out), {a},
                              [na = a.node()](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                      na->grad[i] += self.grad[i] * self.value[i];
                              });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.value()[i]);
    return detail::make_op<T>("log", a.shape(), std::move(out), {a},
                              [na = a.node()](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t i = 0; i < self.grad.size(); ++i)
                                      na->grad[i] += self.grad[i] / na->value[i];
                              });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<T> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = static_cast<double>(a.value()[i]);
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    return detail::make_op<T>("gelu", a.shape(), std::move(out), {a},
                              [na = a.node()](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t i = 0; i < self.grad.size(); ++i) {
                                      const double x = static_cast<double>(na->value[i]);
                                      const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                                      const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                                      na->grad[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dimensions mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const size_t M = a.rows(), K = a.cols(), N = b.cols();
    std::vector<T> out(M * N, T(0));
    detail::gemm_acc(a.value().data(), b.value().data(), out.data(), M, K, N);
    return detail::make_op<T>("matmul", {M, N}, std::move(out), {a, b},
                              [na = a.node(), nb = b.node(), M, K, N](typename Tensor<T>::Node& self) {
                                  if (na->requires_grad) {
                                      detail::ensure_grad<T>(*na);
                                      detail::gemm_abt_acc(self.grad.data(), nb->value.data(), na->grad.data(), M, N,
                                                           K);
                                  }
                                  if (nb->requires_grad) {
                                      detail::ensure_grad<T>(*nb);
                                      detail::gemm_atb_acc(na->value.data(), self.grad.data(), nb->grad.data(), M, K,
                                                           N);
                                  }
                              });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank2(a, "transpose");
    const size_t N = a.rows(), D = a.cols();
    std::vector<T> out(a.numel());
    for (size_t r = 0; r < N; ++r)
        for (size_t c = 0; c < D; ++c) out[c * N + r] = a.value()[r * D + c];
    return detail::make_op<T>("transpose", {D, N}, std::move(out), {a},
                              [na = a.node(), N, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < N; ++r)
                                      for (size_t c = 0; c < D; ++c) na->grad[r * D + c] += self.grad[c * N + r];
                              });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const size_t D = parts[0].cols();
    size_t N = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != D) throw ShapeError("concat_rows: column counts differ");
        N += p.rows();
    }
    std::vector<T> out;
    out.reserve(N * D);
    for (const auto& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());

    auto node = Tensor<T>::fresh_node({N, D}, std::move(out));
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& p : parts) any = any || p.node()->requires_grad;
        track = any;
    }
    if (track) {
        node->op = "concat_rows";
        node->requires_grad = true;
        std::vector<typename Tensor<T>::NodePtr> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        node->inputs = ins;
        node->backward_fn = [ins, D](typename Tensor<T>::Node& self) {
            size_t off = 0;
            for (const auto& n : ins) {
                const size_t cnt = n->value.size();
                if (n->requires_grad) {
                    detail::ensure_grad<T>(*n);
                    for (size_t i = 0; i < cnt; ++i) n->grad[i] += self.grad[off + i];
                }
                off += cnt;
            }
        };
    }
    return Tensor<T>::wrap(std::move(node));
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const size_t N = parts[0].rows();
    size_t D = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != N) throw ShapeError("concat_cols: row counts differ");
        D += p.cols();
    }
    std::vector<T> out(N * D);
    size_t coff = 0;
    for (const auto& p : parts) {
        const size_t pc = p.cols();
        for (size_t r = 0; r < N; ++r)
            for (size_t c = 0; c < pc; ++c) out[r * D + coff + c] = p.value()[r * pc + c];
        coff += pc;
    }

    auto node = Tensor<T>::fresh_node({N, D}, std::move(out));
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& p : parts) any = any || p.node()->requires_grad;
        track = any;
    }
    if (track) {
        node->op = "concat_cols";
        node->requires_grad = true;
        std::vector<typename Tensor<T>::NodePtr> ins;
        for (const auto& p : parts) ins.push_back(p.node());
        node->inputs = ins;
        node->backward_fn = [ins, N, D](typename Tensor<T>::Node& self) {
            size_t coff = 0;
            for (const auto& n : ins) {
                const size_t pc = n->shape[1];
                if (n->requires_grad) {
                    detail::ensure_grad<T>(*n);
                    for (size_t r = 0; r < N; ++r)
                        for (size_t c = 0; c < pc; ++c) n->grad[r * pc + c] += self.grad[r * D + coff + c];
                }
                coff += pc;
            }
        };
    }
    return Tensor<T>::wrap(std::move(node));
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, size_t start, size_t len) {
    detail::require_rank2(a, "slice_cols");
    if (start + len > a.cols())
        throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") exceeds " + std::to_string(a.cols()) + " columns");
    const size_t N = a.rows(), D = a.cols();
    std::vector<T> out(N * len);
    for (size_t r = 0; r < N; ++r)
        for (size_t c = 0; c < len; ++c) out[r * len + c] = a.value()[r * D + start + c];
    return detail::make_op<T>("slice_cols", {N, len}, std::move(out), {a},
                              [na = a.node(), start, len, N, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < N; ++r)
                                      for (size_t c = 0; c < len; ++c)
                                          na->grad[r * D + start + c] += self.grad[r * len + c];
                              });
}

// Row gather; an index may repeat (gradients scatter-add), which doubles as
// row tiling.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<size_t>& idx) {
    detail::require_rank2(a, "gather_rows");
    const size_t N = a.rows(), D = a.cols();
    for (size_t i : idx)
        if (i >= N)
            throw IndexError("gather_rows: index " + std::to_string(i) + " out of range [0," + std::to_string(N) +
                             ")");
    std::vector<T> out(idx.size() * D);
    for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(a.value().data() + idx[r] * D, D, out.data() + r * D);
    return detail::make_op<T>("gather_rows", {idx.size(), D}, std::move(out), {a},
                              [na = a.node(), idx, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < idx.size(); ++r)
                                      for (size_t c = 0; c < D; ++c)
                                          na->grad[idx[r] * D + c] += self.grad[r * D + c];
                              });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
    detail::require_rank2(a, "sum_axis");
    const size_t N = a.rows(), D = a.cols();
    if (axis == 0) {
        std::vector<T> out(D, T(0));
        for (size_t r = 0; r < N; ++r)
            for (size_t c = 0; c < D; ++c) out[c] += a.value()[r * D + c];
        return detail::make_op<T>("sum_axis0", {1, D}, std::move(out), {a},
                                  [na = a.node(), N, D](typename Tensor<T>::Node& self) {
                                      if (!na->requires_grad) return;
                                      detail::ensure_grad<T>(*na);
                                      for (size_t r = 0; r < N; ++r)
                                          for (size_t c = 0; c < D; ++c) na->grad[r * D + c] += self.grad[c];
                                  });
    }
    if (axis == 1) {
        std::vector<T> out(N, T(0));
        for (size_t r = 0; r < N; ++r)
            for (size_t c = 0; c < D; ++c) out[r] += a.value()[r * D + c];
        return detail::make_op<T>("sum_axis1", {N, 1}, std::move(out), {a},
                                  [na = a.node(), N, D](typename Tensor<T>::Node& self) {
                                      if (!na->requires_grad) return;
                                      detail::ensure_grad<T>(*na);
                                      for (size_t r = 0; r < N; ++r)
                                          for (size_t c = 0; c < D; ++c) na->grad[r * D + c] += self.grad[r];
                                  });
    }
    throw ShapeError("sum_axis: axis must be 0 or 1");
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
    detail::require_rank2(a, "mean_axis");
    const T denom = static_cast<T>(axis == 0 ? a.rows() : a.cols());
    return scalar_mul(sum_axis(a, axis), T(1) / denom);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = 0;
    for (const T& v : a.value()) acc += v;
    return detail::make_op<T>("sum_all", {1, 1}, std::vector<T>{acc}, {a},
                              [na = a.node()](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (auto& g : na->grad) g += self.grad[0];
                              });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scalar_mul(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::require_rank2(a, "softmax_rows");
    const size_t N = a.rows(), D = a.cols();
    std::vector<T> out(N * D);
    for (size_t r = 0; r < N; ++r) {
        const T* x = a.value().data() + r * D;
        T* y = out.data() + r * D;
        T mx = x[0];
        for (size_t c = 1; c < D; ++c) mx = std::max(mx, x[c]);
        T sum = 0;
        for (size_t c = 0; c < D; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        for (size_t c = 0; c < D; ++c) y[c] /= sum;
    }
    return detail::make_op<T>("softmax_rows", a.shape(), std::move(out), {a},
                              [na = a.node(), N, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < N; ++r) {
                                      const T* y = self.value.data() + r * D;
                                      const T* g = self.grad.data() + r * D;
                                      T dot = 0;
                                      for (size_t c = 0; c < D; ++c) dot += g[c] * y[c];
                                      T* gx = na->grad.data() + r * D;
                                      for (size_t c = 0; c < D; ++c) gx[c] += y[c] * (g[c] - dot);
                                  }
                              });
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
    detail::require_rank2(a, "log_softmax_rows");
    const size_t N = a.rows(), D = a.cols();
    std::vector<T> out(N * D);
    for (size_t r = 0; r < N; ++r) {
        const T* x = a.value().data() + r * D;
        T* y = out.data() + r * D;
        T mx = x[0];
        for (size_t c = 1; c < D; ++c) mx = std::max(mx, x[c]);
        T sum = 0;
        for (size_t c = 0; c < D; ++c) sum += std::exp(x[c] - mx);
        const T lse = mx + std::log(sum);
        for (size_t c = 0; c < D; ++c) y[c] = x[c] - lse;
    }
    return detail::make_op<T>("log_softmax_rows", a.shape(), std::move(out), {a},
                              [na = a.node(), N, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < N; ++r) {
                                      const T* y = self.value.data() + r * D;
                                      const T* g = self.grad.data() + r * D;
                                      T gsum = 0;
                                      for (size_t c = 0; c < D; ++c) gsum += g[c];
                                      T* gx = na->grad.data() + r * D;
                                      for (size_t c = 0; c < D; ++c) gx[c] += g[c] - std::exp(y[c]) * gsum;
                                  }
                              });
}

// Rows scaled to unit Euclidean norm; denominator floored at 1e-12 so
// degenerate inputs stay finite.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a) {
    detail::require_rank2(a, "l2_normalize_rows");
    const size_t N = a.rows(), D = a.cols();
    constexpr T kFloor = static_cast<T>(1e-12);
    std::vector<T> out(N * D);
    std::vector<T> denoms(N);
    for (size_t r = 0; r < N; ++r) {
        const T* x = a.value().data() + r * D;
        T sq = 0;
        for (size_t c = 0; c < D; ++c) sq += x[c] * x[c];
        const T d = std::max(std::sqrt(sq), kFloor);
        denoms[r] = d;
        for (size_t c = 0; c < D; ++c) out[r * D + c] = x[c] / d;
    }
    return detail::make_op<T>("l2_normalize_rows", a.shape(), std::move(out), {a},
                              [na = a.node(), denoms = std::move(denoms), N, D](typename Tensor<T>::Node& self) {
                                  if (!na->requires_grad) return;
                                  detail::ensure_grad<T>(*na);
                                  for (size_t r = 0; r < N; ++r) {
                                      const T* y = self.value.data() + r * D;
                                      const T* g = self.grad.data() + r * D;
                                      T* gx = na->grad.data() + r * D;
                                      const T d = denoms[r];
                                      if (d <= kFloor) {
                                          for (size_t c = 0; c < D; ++c) gx[c] += g[c] / d;
                                          continue;
                                      }
                                      T dot = 0;
                                      for (size_t c = 0; c < D; ++c) dot += g[c] * y[c];
                                      for (size_t c = 0; c < D; ++c) gx[c] += (g[c] - y[c] * dot) / d;
                                  }
                              });
}

// Per-row layer normalization with learned gain/offset.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = static_cast<T>(1e-5)) {
    detail::require_rank2(x, "layer_norm");
    const size_t N = x.rows(), D = x.cols();
    if (gain.numel() != D || bias.numel() != D)
        throw ShapeError("layer_norm: gain/bias length must equal row width " + std::to_string(D));
    std::vector<T> out(N * D);
    std::vector<T> xhat(N * D);
    std::vector<T> inv_std(N);
    for (size_t r = 0; r < N; ++r) {
        const T* xr = x.value().data() + r * D;
        T mean = 0;
        for (size_t c = 0; c < D; ++c) mean += xr[c];
        mean /= static_cast<T>(D);
        T var = 0;
        for (size_t c = 0; c < D; ++c) {
            const T d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(D);
        const T istd = T(1) / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (size_t c = 0; c < D; ++c) {
            const T h = (xr[c] - mean) * istd;
            xhat[r * D + c] = h;
            out[r * D + c] = h * gain.value()[c] + bias.value()[c];
        }
    }
    return detail::make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [nx = x.node(), ng = gain.node(), nb = bias.node(), xhat = std::move(xhat), inv_std = std::move(inv_std), N,
         D](typename Tensor<T>::Node& self) {
            if (ng->requires_grad) {
                detail::ensure_grad<T>(*ng);
                for (size_t r = 0; r < N; ++r)
                    for (size_t c = 0; c < D; ++c) ng->grad[c] += self.grad[r * D + c] * xhat[r * D + c];
            }
            if (nb->requires_grad) {
                detail::ensure_grad<T>(*nb);
                for (size_t r = 0; r < N; ++r)
                    for (size_t c = 0; c < D; ++c) nb->grad[c] += self.grad[r * D + c];
            }
            if (nx->requires_grad) {
                detail::ensure_grad<T>(*nx);
                for (size_t r = 0; r < N; ++r) {
                    const T* g = self.grad.data() + r * D;
                    const T* h = xhat.data() + r * D;
                    T sum_dh = 0, sum_dh_h = 0;
                    std::vector<T> dh(D);
                    for (size_t c = 0; c < D; ++c) {
                        dh[c] = g[c] * ng->value[c];
                        sum_dh += dh[c];
                        sum_dh_h += dh[c] * h[c];
                    }
                    T* gx = nx->grad.data() + r * D;
                    const T istd = inv_std[r];
                    const T invD = T(1) / static_cast<T>(D);
                    for (size_t c = 0; c < D; ++c)
                        gx[c] += istd * (dh[c] - invD * sum_dh - h[c] * invD * sum_dh_h);
                }
            }
        });
}

// Forward identity; severs every gradient path through it.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
    auto node = Tensor<T>::fresh_node(a.shape(), a.value());
    node->op = "stop_gradient";
    return Tensor<T>::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// Backward pass. Reachable nodes are processed in decreasing creation order,
// which is a topological order and fixes the accumulation sequence so runs
// are bitwise reproducible.
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));

    using Node = typename Tensor<T>::Node;
    std::vector<std::shared_ptr<Node>> order;
    std::unordered_set<Node*> seen;
    std::vector<std::shared_ptr<Node>> stack{loss.node()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& in : n->inputs)
            if (seen.insert(in.get()).second) stack.push_back(in);
    }
    std::sort(order.begin(), order.end(),
              [](const auto& a, const auto& b) { return a->id > b->id; });

    detail::ensure_grad<T>(*loss.node());
    loss.node()->grad[0] += T(1);
    for (auto& n : order)
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
}

// ---------------------------------------------------------------------------
// Gradient verification harness (64-bit only).
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |central
// difference|) for a scalar-valued graph builder applied to one leaf.
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& point, double h) {
    Tensor<double> x = Tensor<double>::from_data(point.shape(), point.value(), true);
    Tensor<double> y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must produce a scalar");
    backward(y);
    const std::vector<double> analytic = x.grad();

    double max_err = 0.0;
    auto& buf = x.mutable_value();
    for (size_t i = 0; i < buf.size(); ++i) {
        const double save = buf[i];
        double fp, fm;
        {
            NoGradGuard ng;
            buf[i] = save + h;
            fp = f(x).item();
            buf[i] = save - h;
            fm = f(x).item();
            buf[i] = save;
        }
        const double numeric = (fp - fm) / (2.0 * h);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw NumericalError("grad_check: non-finite derivative at coordinate " + std::to_string(i));
        const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

// Same check against every parameter of a model-sized graph. A per-tensor
// coordinate cap (deterministically sampled) keeps large sweeps inside a
// time budget; cap 0 checks every coordinate.
inline double grad_check_params(const std::function<Tensor<double>()>& f,
                                const std::vector<Tensor<double>>& params, double h,
                                size_t max_coords_per_param = 0, uint64_t seed = 0x5eed) {
    for (auto p : params) p.zero_grad();
    Tensor<double> y = f();
    if (y.numel() != 1) throw ContractError("grad_check_params: f must produce a scalar");
    backward(y);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad());

    double max_err = 0.0;
    Rng rng = make_rng(seed, 31);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double> p = params[pi];
        auto& buf = p.mutable_value();
        std::vector<size_t> coords(buf.size());
        std::iota(coords.begin(), coords.end(), size_t{0});
        if (max_coords_per_param != 0 && coords.size() > max_coords_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords_per_param);
        }
        for (size_t i : coords) {
            const double save = buf[i];
            double fp, fm;
            {
                NoGradGuard ng;
                buf[i] = save + h;
                fp = f().item();
                buf[i] = save - h;
                fm = f().item();
                buf[i] = save;
            }
            const double numeric = (fp - fm) / (2.0 * h);
            if (!std::isfinite(numeric) || !std::isfinite(analytic[pi][i]))
                throw NumericalError("grad_check_params: non-finite derivative at parameter " + std::to_string(pi) +
                                     " coordinate " + std::to_string(i));
            const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace rils
