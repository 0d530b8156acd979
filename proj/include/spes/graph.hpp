#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "spes/kernels.hpp"
#include "spes/tensor.hpp"

namespace spes {

// Eager-forward tape with reverse-mode differentiation. Values are computed
// at op creation; backward() walks the tape in exact reverse order. Leaves
// created with requires_grad=false never get a gradient buffer and record no
// dependence on the tape.
template <typename T>
class GraphT {
public:
    using NodeId = int32_t;
    using scalar = T;

    NodeId leaf(TensorT<T> t, bool requires_grad = true) {
        Node n;
        n.value = std::move(t);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const TensorT<T>& value(NodeId id) const { return nodes_[check(id)].value; }

    // Zero tensor if the node has no gradient (frozen leaf or untouched).
    TensorT<T> grad(NodeId id) const {
        const Node& n = nodes_[check(id)];
        if (n.grad.data.empty()) return TensorT<T>::zeros(n.value.shape);
        return n.grad;
    }

    bool has_grad(NodeId id) const { return !nodes_[check(id)].grad.data.empty(); }

    size_t size() const { return nodes_.size(); }

    // ---- primitive ops ----

    NodeId matmul(NodeId a, NodeId b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
            throw std::invalid_argument("matmul: shape mismatch " + shape_str(A.shape) + " * " +
                                        shape_str(B.shape));
        int64_t m = A.rows(), k = A.cols(), n = B.cols();
        TensorT<T> C = TensorT<T>::zeros({m, n});
        kernels::matmul(A.data.data(), B.data.data(), C.data.data(), m, k, n);
        return record(std::move(C), {a, b}, [a, b, m, k, n](GraphT& g, const Node& out) {
            if (g.wants(a))
                kernels::matmul_nt_acc(out.grad.data.data(), g.value(b).data.data(),
                                       g.grad_buf(a), m, n, k);
            if (g.wants(b))
                kernels::matmul_tn_acc(g.value(a).data.data(), out.grad.data.data(),
                                       g.grad_buf(b), m, k, n);
        });
    }

    NodeId add(NodeId a, NodeId b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (!A.same_shape(B))
            throw std::invalid_argument("add: shape mismatch " + shape_str(A.shape) + " vs " +
                                        shape_str(B.shape));
        TensorT<T> C = A;
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
        return record(std::move(C), {a, b}, [a, b](GraphT& g, const Node& out) {
            for (NodeId p : {a, b})
                if (g.wants(p)) {
                    T* gp = g.grad_buf(p);
                    for (size_t i = 0; i < out.grad.data.size(); ++i) gp[i] += out.grad.data[i];
                }
        });
    }

    NodeId scale(NodeId a, T c) {
        TensorT<T> C = value(a);
        for (auto& v : C.data) v *= c;
        return record(std::move(C), {a}, [a, c](GraphT& g, const Node& out) {
            if (!g.wants(a)) return;
            T* gp = g.grad_buf(a);
            for (size_t i = 0; i < out.grad.data.size(); ++i) gp[i] += c * out.grad.data[i];
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (!A.same_shape(B)) throw std::invalid_argument("mul: shape mismatch");
        TensorT<T> C = A;
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] *= B.data[i];
        return record(std::move(C), {a, b}, [a, b](GraphT& g, const Node& out) {
            if (g.wants(a)) {
                T* gp = g.grad_buf(a);
                const auto& bv = g.value(b).data;
                for (size_t i = 0; i < out.grad.data.size(); ++i)
                    gp[i] += out.grad.data[i] * bv[i];
            }
            if (g.wants(b)) {
                T* gp = g.grad_buf(b);
                const auto& av = g.value(a).data;
                for (size_t i = 0; i < out.grad.data.size(); ++i)
                    gp[i] += out.grad.data[i] * av[i];
            }
        });
    }

    NodeId div(NodeId a, NodeId b) {
        const auto& A = value(a);
        const auto& B = value(b);
        if (!A.same_shape(B)) throw std::invalid_argument("div: shape mismatch");
        TensorT<T> C = A;
        for (size_t i = 0; i < C.data.size(); ++i) C.data[i] /= B.data[i];
        return record(std::move(C), {a, b}, [a, b](GraphT& g, const Node& out) {
            const auto& av = g.value(a).data;
            const auto& bv = g.value(b).data;
            if (g.wants(a)) {
                T* gp = g.grad_buf(a);
                for (size_t i = 0; i < out.grad.data.size(); ++i)
                    gp[i] += out.grad.data[i] / bv[i];
            }
            if (g.wants(b)) {
                T* gp = g.grad_buf(b);
                for (size_t i = 0; i < out.grad.data.size(); ++i)
                    gp[i] -= out.grad.data[i] * av[i] / (bv[i] * bv[i]);
            }
        });
    }

    NodeId silu(NodeId a) {
        const auto& A = value(a);
        TensorT<T> C = TensorT<T>::zeros(A.shape);
        kernels::silu_forward(A.data.data(), C.data.data(), A.numel());
        return record(std::move(C), {a}, [a](GraphT& g, const Node& out) {
            if (!g.wants(a)) return;
            kernels::silu_backward_acc(g.value(a).data.data(), out.grad.data.data(),
                                       g.grad_buf(a), out.value.numel());
        });
    }

    NodeId rmsnorm(NodeId x, NodeId gain, T eps) {
        const auto& X = value(x);
        const auto& G = value(gain);
        int64_t d = X.shape.back();
        if (G.numel() != d)
            throw std::invalid_argument("rmsnorm: gain length " + std::to_string(G.numel()) +
                                        " != last dim " + std::to_string(d));
        int64_t rows = X.numel() / d;
        TensorT<T> Y = TensorT<T>::zeros(X.shape);
        kernels::rmsnorm_forward(X.data.data(), G.data.data(), Y.data.data(), rows, d, eps);
        return record(std::move(Y), {x, gain}, [x, gain, rows, d, eps](GraphT& g, const Node& out) {
            kernels::rmsnorm_backward_acc(g.value(x).data.data(), g.value(gain).data.data(),
                                          out.grad.data.data(),
                                          g.wants(x) ? g.grad_buf(x) : nullptr,
                                          g.wants(gain) ? g.grad_buf(gain) : nullptr, rows, d,
                                          eps);
        });
    }

    NodeId softmax_rows(NodeId x) {
        const auto& X = value(x);
        if (X.rank() != 2) throw std::invalid_argument("softmax_rows: rank-2 input required");
        TensorT<T> P = TensorT<T>::zeros(X.shape);
        kernels::softmax_rows(X.data.data(), P.data.data(), X.rows(), X.cols());
        return record(std::move(P), {x}, [x](GraphT& g, const Node& out) {
            if (!g.wants(x)) return;
            int64_t rows = out.value.rows(), cols = out.value.cols();
            T* gx = g.grad_buf(x);
            for (int64_t r = 0; r < rows; ++r) {
                const T* p = out.value.data.data() + r * cols;
                const T* gy = out.grad.data.data() + r * cols;
                T dot = T(0);
                for (int64_t j = 0; j < cols; ++j) dot += gy[j] * p[j];
                for (int64_t j = 0; j < cols; ++j) gx[r * cols + j] += p[j] * (gy[j] - dot);
            }
        });
    }

    // T x 1 column of log-sum-exp per row.
    NodeId logsumexp_rows(NodeId x) {
        const auto& X = value(x);
        if (X.rank() != 2) throw std::invalid_argument("logsumexp_rows: rank-2 input required");
        TensorT<T> L = TensorT<T>::zeros({X.rows(), 1});
        kernels::logsumexp_rows(X.data.data(), L.data.data(), X.rows(), X.cols());
        return record(std::move(L), {x}, [x](GraphT& g, const Node& out) {
            if (!g.wants(x)) return;
            // d lse / d x_j = softmax(x)_j
            const auto& X2 = g.value(x);
            int64_t rows = X2.rows(), cols = X2.cols();
            std::vector<T> p(static_cast<size_t>(rows * cols));
            kernels::softmax_rows(X2.data.data(), p.data(), rows, cols);
            T* gx = g.grad_buf(x);
            for (int64_t r = 0; r < rows; ++r) {
                T go = out.grad.data[static_cast<size_t>(r)];
                for (int64_t j = 0; j < cols; ++j) gx[r * cols + j] += go * p[r * cols + j];
            }
        });
    }

    // Embedding-style lookup: rows of `table` gathered by index.
    NodeId gather_rows(NodeId table, std::vector<int32_t> idx) {
        const auto& Tb = value(table);
        if (Tb.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 table required");
        int64_t d = Tb.cols();
        TensorT<T> Y = TensorT<T>::zeros({static_cast<int64_t>(idx.size()), d});
        for (size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0 || idx[r] >= Tb.rows())
                throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) +
                                        " out of [0," + std::to_string(Tb.rows()) + ")");
            std::copy_n(Tb.data.data() + static_cast<int64_t>(idx[r]) * d, d,
                        Y.data.data() + static_cast<int64_t>(r) * d);
        }
        return record(std::move(Y), {table},
                      [table, idx = std::move(idx), d](GraphT& g, const Node& out) {
                          if (!g.wants(table)) return;
                          T* gt = g.grad_buf(table);
                          for (size_t r = 0; r < idx.size(); ++r) {
                              const T* gy = out.grad.data.data() + static_cast<int64_t>(r) * d;
                              T* dst = gt + static_cast<int64_t>(idx[r]) * d;
                              for (int64_t j = 0; j < d; ++j) dst[j] += gy[j];
                          }
                      });
    }

    // Select a subset of rows of x (same mechanics as gather_rows but the
    // source is an activation, kept separate for clarity at call sites).
    NodeId select_rows(NodeId x, std::vector<int32_t> idx) { return gather_rows(x, std::move(idx)); }

    // Scatter rows of x into a zero [out_rows x d] tensor at positions idx.
    NodeId scatter_rows(NodeId x, std::vector<int32_t> idx, int64_t out_rows) {
        const auto& X = value(x);
        if (X.rank() != 2 || X.rows() != static_cast<int64_t>(idx.size()))
            throw std::invalid_argument("scatter_rows: row count mismatch");
        int64_t d = X.cols();
        TensorT<T> Y = TensorT<T>::zeros({out_rows, d});
        for (size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0 || idx[r] >= out_rows) throw std::out_of_range("scatter_rows: bad index");
            T* dst = Y.data.data() + static_cast<int64_t>(idx[r]) * d;
            const T* src = X.data.data() + static_cast<int64_t>(r) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        return record(std::move(Y), {x}, [x, idx = std::move(idx), d](GraphT& g, const Node& out) {
            if (!g.wants(x)) return;
            T* gx = g.grad_buf(x);
            for (size_t r = 0; r < idx.size(); ++r) {
                const T* gy = out.grad.data.data() + static_cast<int64_t>(idx[r]) * d;
                T* dst = gx + static_cast<int64_t>(r) * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += gy[j];
            }
        });
    }

    // T x 1 column: element (r, col_per_row[r]) of x.
    NodeId gather_cols(NodeId x, std::vector<int32_t> col_per_row) {
        const auto& X = value(x);
        if (X.rank() != 2 || X.rows() != static_cast<int64_t>(col_per_row.size()))
            throw std::invalid_argument("gather_cols: row count mismatch");
        int64_t cols = X.cols();
        TensorT<T> Y = TensorT<T>::zeros({X.rows(), 1});
        for (int64_t r = 0; r < X.rows(); ++r) {
            int32_t c = col_per_row[static_cast<size_t>(r)];
            if (c < 0 || c >= cols)
                throw std::out_of_range("gather_cols: column " + std::to_string(c) +
                                        " out of [0," + std::to_string(cols) + ")");
            Y.data[static_cast<size_t>(r)] = X.at(r, c);
        }
        return record(std::move(Y), {x},
                      [x, col_per_row = std::move(col_per_row), cols](GraphT& g, const Node& out) {
                          if (!g.wants(x)) return;
                          T* gx = g.grad_buf(x);
                          for (size_t r = 0; r < col_per_row.size(); ++r)
                              gx[static_cast<int64_t>(r) * cols + col_per_row[r]] +=
                                  out.grad.data[r];
                      });
    }

    // Scale row r of x by s[r] (s is T x 1).
    NodeId rowwise_mul(NodeId x, NodeId s) {
        const auto& X = value(x);
        const auto& S = value(s);
        if (X.rank() != 2 || S.rank() != 2 || S.cols() != 1 || S.rows() != X.rows())
            throw std::invalid_argument("rowwise_mul: need [RxC] and [Rx1]");
        TensorT<T> Y = X;
        int64_t d = X.cols();
        for (int64_t r = 0; r < X.rows(); ++r) {
            T sv = S.data[static_cast<size_t>(r)];
            for (int64_t j = 0; j < d; ++j) Y.data[static_cast<size_t>(r * d + j)] *= sv;
        }
        return record(std::move(Y), {x, s}, [x, s, d](GraphT& g, const Node& out) {
            const auto& X2 = g.value(x);
            const auto& S2 = g.value(s);
            if (g.wants(x)) {
                T* gx = g.grad_buf(x);
                for (int64_t r = 0; r < X2.rows(); ++r) {
                    T sv = S2.data[static_cast<size_t>(r)];
                    for (int64_t j = 0; j < d; ++j)
                        gx[r * d + j] += out.grad.data[static_cast<size_t>(r * d + j)] * sv;
                }
            }
            if (g.wants(s)) {
                T* gs = g.grad_buf(s);
                for (int64_t r = 0; r < X2.rows(); ++r) {
                    T acc = T(0);
                    for (int64_t j = 0; j < d; ++j)
                        acc += out.grad.data[static_cast<size_t>(r * d + j)] *
                               X2.data[static_cast<size_t>(r * d + j)];
                    gs[r] += acc;
                }
            }
        });
    }

    NodeId sum(NodeId a) {
        const auto& A = value(a);
        T s = T(0);
        for (T v : A.data) s += v;
        TensorT<T> out({1}, {s});
        return record(std::move(out), {a}, [a](GraphT& g, const Node& out2) {
            if (!g.wants(a)) return;
            T* gp = g.grad_buf(a);
            T go = out2.grad.data[0];
            for (size_t i = 0; i < g.value(a).data.size(); ++i) gp[i] += go;
        });
    }

    NodeId mean(NodeId a) { return scale(sum(a), T(1) / static_cast<T>(value(a).numel())); }

    NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, T(-1))); }
    NodeId square(NodeId a) { return mul(a, a); }

    // ---- backward ----

    void backward(NodeId root) {
        Node& r = nodes_[check(root)];
        if (r.value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        r.grad = TensorT<T>::full(r.value.shape, T(1));
        for (int64_t i = root; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.backward_fn && !n.grad.data.empty()) n.backward_fn(*this, n);
        }
    }

private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;  // empty until needed
        bool requires_grad = true;
        std::function<void(GraphT&, const Node&)> backward_fn;
    };

    size_t check(NodeId id) const {
        assert(id >= 0 && static_cast<size_t>(id) < nodes_.size());
        return static_cast<size_t>(id);
    }

    bool wants(NodeId id) { return nodes_[check(id)].requires_grad; }

    T* grad_buf(NodeId id) {
        Node& n = nodes_[check(id)];
        if (n.grad.data.empty()) n.grad = TensorT<T>::zeros(n.value.shape);
        return n.grad.data.data();
    }

    NodeId record(TensorT<T> value, std::initializer_list<NodeId> parents,
                  std::function<void(GraphT&, const Node&)> fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = false;
        for (NodeId p : parents)
            if (nodes_[check(p)].requires_grad) n.requires_grad = true;
        if (n.requires_grad) n.backward_fn = std::move(fn);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;

// ---- composites ----

// (silu(x Wg) * (x Wu)) Wd
template <typename T>
typename GraphT<T>::NodeId swiglu_expert(GraphT<T>& g, typename GraphT<T>::NodeId x,
                                         typename GraphT<T>::NodeId wg,
                                         typename GraphT<T>::NodeId wu,
                                         typename GraphT<T>::NodeId wd) {
    auto gate = g.silu(g.matmul(x, wg));
    auto up = g.matmul(x, wu);
    return g.matmul(g.mul(gate, up), wd);
}

// Mean cross-entropy plus the per-row log-sum-exp column (feeds z-loss).
template <typename T>
struct XentResult {
    typename GraphT<T>::NodeId loss;
    typename GraphT<T>::NodeId lse;  // B x 1
};

template <typename T>
XentResult<T> softmax_cross_entropy(GraphT<T>& g, typename GraphT<T>::NodeId logits,
                                    const std::vector<int32_t>& targets) {
    const auto& L = g.value(logits);
    if (L.rank() != 2 || L.rows() != static_cast<int64_t>(targets.size()))
        throw std::invalid_argument("softmax_cross_entropy: batch size mismatch");
    for (int32_t t : targets)
        if (t < 0 || t >= L.cols())
            throw std::out_of_range("softmax_cross_entropy: target " + std::to_string(t) +
                                    " out of [0," + std::to_string(L.cols()) + ")");
    auto lse = g.logsumexp_rows(logits);
    auto picked = g.gather_cols(logits, targets);
    auto loss = g.mean(g.sub(lse, picked));
    return {loss, lse};
}

// ---- finite-difference gradient checker ----

// `build` constructs a scalar loss from leaf ids inside a fresh graph; it is
// called at both precision T (reverse-mode side) and double (central-difference
// oracle side), so pass a generic lambda. Returns the max relative error over
// all coordinates of all parameters.
template <typename T, typename Builder>
double grad_check(Builder&& build, const std::vector<TensorT<T>>& params, double eps) {
    // Reverse-mode gradients at working precision T.
    std::vector<TensorT<T>> analytic;
    {
        GraphT<T> g;
        std::vector<typename GraphT<T>::NodeId> ids;
        for (const auto& t : params) ids.push_back(g.leaf(t, true));
        auto root = build(g, ids);
        if (!std::isfinite(static_cast<double>(g.value(root).data[0])))
            throw std::runtime_error("grad_check: non-finite loss value");
        g.backward(root);
        for (auto id : ids) analytic.push_back(g.grad(id));
    }

    // Central differences, always evaluated in 64-bit.
    std::vector<TensorD> p64;
    for (const auto& t : params) p64.push_back(t.template cast<double>());
    auto eval64 = [&](const std::vector<TensorD>& p) -> double {
        GraphD g;
        std::vector<GraphD::NodeId> ids;
        for (const auto& t : p) ids.push_back(g.leaf(t, false));
        auto root = build(g, ids);
        double v = g.value(root).data[0];
        if (!std::isfinite(v)) throw std::runtime_error("grad_check: non-finite loss value");
        return v;
    };

    double max_rel = 0.0;
    for (size_t pi = 0; pi < p64.size(); ++pi) {
        for (size_t i = 0; i < p64[pi].data.size(); ++i) {
            double orig = p64[pi].data[i];
            p64[pi].data[i] = orig + eps;
            double fp = eval64(p64);
            p64[pi].data[i] = orig - eps;
            double fm = eval64(p64);
            p64[pi].data[i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = static_cast<double>(analytic[pi].data[i]);
            double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace spes
