#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "milbench/rng.hpp"

namespace milbench {

class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

class TapeError : public std::runtime_error {
public:
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense row-major tensor of doubles. Rank 1 ({n}) or rank 2 ({m,n});
/// everything the models need is expressible with these.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
        data_.assign(count_(shape_), 0.0);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<double> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (data_.size() != count_(shape_))
            throw DimensionError("tensor: value count does not match shape");
    }

    static Tensor zeros(std::size_t m, std::size_t n) { return Tensor({m, n}); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
        return t;
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::size_t m = rows.size();
        std::size_t n = m ? rows.begin()->size() : 0;
        Tensor t({m, n});
        std::size_t i = 0;
        for (const auto& r : rows) {
            if (r.size() != n) throw DimensionError("tensor: ragged initializer");
            std::size_t j = 0;
            for (double v : r) t.at(i, j++) = v;
            ++i;
        }
        return t;
    }

    static Tensor vector(std::vector<double> values) {
        std::vector<std::size_t> shape{values.size()};
        return Tensor(std::move(shape), std::move(values));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
    std::size_t cols() const {
        return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0);
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

    double scalar() const {
        if (size() != 1) throw DimensionError("tensor: not a scalar");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i)
            os << (i ? "x" : "") << shape_[i];
        os << ']';
        return os.str();
    }

private:
    static std::size_t count_(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e == 0) throw DimensionError("tensor: zero extent");
            n *= e;
        }
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Raw matmul kernels (used by forward ops and their backward passes).
// All loops run in a fixed order so results are bitwise reproducible.
// ---------------------------------------------------------------------------

namespace detail {

/// C (+)= A * B, A:[m,k] B:[k,n]
inline void matmul_nn(Tensor& c, const Tensor& a, const Tensor& b, bool accum) {
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (!accum)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = arow[l];
            const double* brow = pb + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C (+)= A * B^T, A:[m,k] B:[n,k]
inline void matmul_nt(Tensor& c, const Tensor& a, const Tensor& b, bool accum) {
    std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* crow = pc + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
            crow[j] = accum ? crow[j] + acc : acc;
        }
    }
}

/// C (+)= A^T * B, A:[m,k] B:[m,n]
inline void matmul_tn(Tensor& c, const Tensor& a, const Tensor& b, bool accum) {
    std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (!accum)
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        const double* brow = pb + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = arow[l];
            double* crow = pc + l * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape: define-by-run reverse-mode autodiff. A fresh tape is built per
// forward pass; backward may run once and accumulates gradients additively
// into every node that requires them.
// ---------------------------------------------------------------------------

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;

    const Tensor& value() const;
    const Tensor& grad() const;
    bool requires_grad() const;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::int32_t self)>;

    struct Node {
        Tensor value;
        Tensor grad;  // empty until backward touches it
        std::vector<std::int32_t> parents;
        BackwardFn backward;  // null for leaves
        bool requires_grad = false;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    Var op(Tensor value, std::vector<std::int32_t> parents, BackwardFn backward) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        for (std::int32_t p : n.parents) {
            check_id(p);
            if (nodes_[p].requires_grad) n.requires_grad = true;
        }
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
    }

    const Tensor& value_of(std::int32_t id) const {
        check_id(id);
        return nodes_[id].value;
    }

    const Tensor& grad_of_const(std::int32_t id) const {
        check_id(id);
        return nodes_[id].grad;
    }

    /// Gradient buffer of a node, allocated (zeroed) on first access.
    Tensor& grad_of(std::int32_t id) {
        check_id(id);
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    bool needs_grad(std::int32_t id) const {
        check_id(id);
        return nodes_[id].requires_grad;
    }

    const std::vector<std::int32_t>& parents_of(std::int32_t id) const {
        check_id(id);
        return nodes_[id].parents;
    }

    std::size_t node_count() const { return nodes_.size(); }

    /// Reverse accumulation from a scalar loss. Every requires_grad leaf
    /// ends up with a gradient buffer (zeros if unreachable from the loss).
    void backward(Var loss) {
        if (loss.tape != this) throw TapeError("backward: node not on this tape");
        check_id(loss.id);
        if (backward_done_) throw TapeError("backward: tape already consumed");
        if (nodes_[loss.id].value.size() != 1)
            throw TapeError("backward: loss is not scalar");
        backward_done_ = true;

        grad_of(loss.id)[0] = 1.0;
        for (std::int32_t id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, id);
        }
        for (auto& n : nodes_)
            if (n.requires_grad && n.grad.empty()) n.grad = Tensor(n.value.shape());
    }

private:
    void check_id(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw TapeError("tape: unknown node id");
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value_of(id); }
inline const Tensor& Var::grad() const { return tape->grad_of_const(id); }
inline bool Var::requires_grad() const { return tape->needs_grad(id); }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

inline Tape& same_tape(Var a, Var b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw TapeError("op: operands live on different tapes");
    return *a.tape;
}

inline void require_matrix(const Tensor& t, const char* who) {
    if (t.rank() != 2) throw DimensionError(std::string(who) + ": expected a matrix");
}

}  // namespace detail

/// C = A·B with grad_a = g·bᵀ and grad_b = aᵀ·g.
inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix(av, "matmul");
    detail::require_matrix(bv, "matmul");
    if (av.cols() != bv.rows())
        throw DimensionError("matmul: inner extents disagree, " + av.shape_str() +
                             " x " + bv.shape_str());
    Tensor out({av.rows(), bv.cols()});
    detail::matmul_nn(out, av, bv, false);
    return t.op(std::move(out), {a.id, b.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        if (tp.needs_grad(ps[0]))
            detail::matmul_nt(tp.grad_of(ps[0]), g, tp.value_of(ps[1]), true);
        if (tp.needs_grad(ps[1]))
            detail::matmul_tn(tp.grad_of(ps[1]), tp.value_of(ps[0]), g, true);
    });
}

inline Var transpose(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "transpose");
    std::size_t m = xv.rows(), n = xv.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = xv.at(i, j);
    return t.op(std::move(out), {x.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        std::size_t m = gx.rows(), n = gx.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx.at(i, j) += g.at(j, i);
    });
}

namespace detail {

enum class Ew { add, sub, hadamard };

inline Var elementwise_binary(Var a, Var b, Ew kind) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    bool a_scalar = av.size() == 1, b_scalar = bv.size() == 1;
    if (!av.same_shape(bv) && !a_scalar && !b_scalar)
        throw DimensionError("elementwise: incompatible shapes " + av.shape_str() +
                             " vs " + bv.shape_str());
    const Tensor& big = a_scalar ? bv : av;
    Tensor out(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = a_scalar ? av[0] : av[i];
        double y = b_scalar ? bv[0] : bv[i];
        out[i] = kind == Ew::add ? x + y : kind == Ew::sub ? x - y : x * y;
    }
    return t.op(std::move(out), {a.id, b.id},
                [kind, a_scalar, b_scalar](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& av = tp.value_of(ps[0]);
        const Tensor& bv = tp.value_of(ps[1]);
        if (tp.needs_grad(ps[0])) {
            Tensor& ga = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d = kind == Ew::hadamard ? g[i] * (b_scalar ? bv[0] : bv[i])
                                                : g[i];
                ga[a_scalar ? 0 : i] += d;
            }
        }
        if (tp.needs_grad(ps[1])) {
            Tensor& gb = tp.grad_of(ps[1]);
            for (std::size_t i = 0; i < g.size(); ++i) {
                double d = kind == Ew::add       ? g[i]
                           : kind == Ew::sub     ? -g[i]
                                                 : g[i] * (a_scalar ? av[0] : av[i]);
                gb[b_scalar ? 0 : i] += d;
            }
        }
    });
}

}  // namespace detail

inline Var add(Var a, Var b) { return detail::elementwise_binary(a, b, detail::Ew::add); }
inline Var sub(Var a, Var b) { return detail::elementwise_binary(a, b, detail::Ew::sub); }
inline Var hadamard(Var a, Var b) {
    return detail::elementwise_binary(a, b, detail::Ew::hadamard);
}

inline Var scale(Var x, double c) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    return t.op(std::move(out), {x.id}, [c](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
}

inline Var tanh(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
    return t.op(std::move(out), {x.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& y = tp.value_of(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

inline Var relu(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return t.op(std::move(out), {x.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& xv = tp.value_of(ps[0]);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) gx[i] += g[i];
    });
}

/// x:[m,d] + b:[d], broadcast over rows.
inline Var add_rowvec(Var x, Var b) {
    Tape& t = detail::same_tape(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    detail::require_matrix(xv, "add_rowvec");
    if (bv.rank() != 1 || bv.cols() != xv.cols())
        throw DimensionError("add_rowvec: vector extent " + bv.shape_str() +
                             " does not match " + xv.shape_str());
    Tensor out(xv.shape());
    std::size_t m = xv.rows(), d = xv.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) + bv[j];
    return t.op(std::move(out), {x.id, b.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        std::size_t m = g.rows(), d = g.cols();
        if (tp.needs_grad(ps[0])) {
            Tensor& gx = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.needs_grad(ps[1])) {
            Tensor& gb = tp.grad_of(ps[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g.at(i, j);
        }
    });
}

/// x:[m,d] ⊙ w:[d], broadcast over rows.
inline Var mul_rowvec(Var x, Var w) {
    Tape& t = detail::same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    detail::require_matrix(xv, "mul_rowvec");
    if (wv.rank() != 1 || wv.cols() != xv.cols())
        throw DimensionError("mul_rowvec: vector extent " + wv.shape_str() +
                             " does not match " + xv.shape_str());
    Tensor out(xv.shape());
    std::size_t m = xv.rows(), d = xv.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) * wv[j];
    return t.op(std::move(out), {x.id, w.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& xv = tp.value_of(ps[0]);
        const Tensor& wv = tp.value_of(ps[1]);
        std::size_t m = g.rows(), d = g.cols();
        if (tp.needs_grad(ps[0])) {
            Tensor& gx = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gx.at(i, j) += g.at(i, j) * wv[j];
        }
        if (tp.needs_grad(ps[1])) {
            Tensor& gw = tp.grad_of(ps[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gw[j] += g.at(i, j) * xv.at(i, j);
        }
    });
}

/// Row-wise softmax with max subtraction; rows sum to 1 for finite input.
inline Var row_softmax(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "row_softmax");
    std::size_t m = xv.rows(), n = xv.cols();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < m; ++i) {
        double mx = xv.at(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv.at(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            double e = std::exp(xv.at(i, j) - mx);
            out.at(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    return t.op(std::move(out), {x.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& y = tp.value_of(self);
        Tensor& gx = tp.grad_of(ps[0]);
        std::size_t m = y.rows(), n = y.cols();
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
            for (std::size_t j = 0; j < n; ++j)
                gx.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
        }
    });
}

/// Inverted dropout: train mode zeroes entries with probability p and
/// scales survivors by 1/(1-p); eval mode is the identity (same node).
inline Var dropout(Var x, double p, bool training, SeededRng& rng) {
    if (p < 0.0 || p >= 1.0)
        throw std::invalid_argument("dropout: p must be in [0,1)");
    if (!training || p == 0.0) return x;
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    auto mask = std::make_shared<std::vector<std::uint8_t>>(xv.size());
    double keep_scale = 1.0 / (1.0 - p);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        bool keep = rng.uniform() >= p;
        (*mask)[i] = keep;
        out[i] = keep ? xv[i] * keep_scale : 0.0;
    }
    return t.op(std::move(out), {x.id},
                [mask, keep_scale](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            if ((*mask)[i]) gx[i] += g[i] * keep_scale;
    });
}

/// Per-row standardization followed by the affine (gain, bias), both [d].
/// Epsilon 1e-6 sits inside the square root, so constant rows map to bias.
inline Var layer_norm(Var x, Var gain, Var bias) {
    constexpr double kEps = 1e-6;
    Tape& t = detail::same_tape(x, gain);
    detail::same_tape(gain, bias);
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    detail::require_matrix(xv, "layer_norm");
    std::size_t m = xv.rows(), d = xv.cols();
    if (gv.rank() != 1 || gv.cols() != d || bv.rank() != 1 || bv.cols() != d)
        throw DimensionError("layer_norm: gain/bias extent does not match " +
                             xv.shape_str());
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xv.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double c = xv.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + kEps);
        (*inv_std)[i] = inv;
        for (std::size_t j = 0; j < d; ++j) {
            double h = (xv.at(i, j) - mean) * inv;
            xhat->at(i, j) = h;
            out.at(i, j) = gv[j] * h + bv[j];
        }
    }
    return t.op(std::move(out), {x.id, gain.id, bias.id},
                [xhat, inv_std](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& gv = tp.value_of(ps[1]);
        std::size_t m = g.rows(), d = g.cols();
        if (tp.needs_grad(ps[0])) {
            Tensor& gx = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < m; ++i) {
                double inv = (*inv_std)[i];
                double sum_dh = 0.0, sum_dh_h = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    double dh = g.at(i, j) * gv[j];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat->at(i, j);
                }
                double dn = static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j) {
                    double dh = g.at(i, j) * gv[j];
                    gx.at(i, j) += inv * (dh - sum_dh / dn -
                                          xhat->at(i, j) * sum_dh_h / dn);
                }
            }
        }
        if (tp.needs_grad(ps[1])) {
            Tensor& gg = tp.grad_of(ps[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    gg[j] += g.at(i, j) * xhat->at(i, j);
        }
        if (tp.needs_grad(ps[2])) {
            Tensor& gb = tp.grad_of(ps[2]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < d; ++j) gb[j] += g.at(i, j);
        }
    });
}

inline Var reshape(Var x, std::vector<std::size_t> shape) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    Tensor out(std::move(shape));
    if (out.size() != xv.size())
        throw DimensionError("reshape: element count changes, " + xv.shape_str());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i];
    return t.op(std::move(out), {x.id}, [](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Stack b under a (both [*,d]).
inline Var concat_rows(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix(av, "concat_rows");
    detail::require_matrix(bv, "concat_rows");
    if (av.cols() != bv.cols())
        throw DimensionError("concat_rows: column mismatch " + av.shape_str() +
                             " vs " + bv.shape_str());
    std::size_t ma = av.rows(), mb = bv.rows(), d = av.cols();
    Tensor out({ma + mb, d});
    for (std::size_t i = 0; i < ma * d; ++i) out[i] = av[i];
    for (std::size_t i = 0; i < mb * d; ++i) out[ma * d + i] = bv[i];
    return t.op(std::move(out), {a.id, b.id}, [ma, d](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        if (tp.needs_grad(ps[0])) {
            Tensor& ga = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ps[1])) {
            Tensor& gb = tp.grad_of(ps[1]);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ma * d + i];
        }
    });
}

/// Rows [r0, r1) of x.
inline Var slice_rows(Var x, std::size_t r0, std::size_t r1) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "slice_rows");
    if (r0 >= r1 || r1 > xv.rows())
        throw DimensionError("slice_rows: range out of bounds for " + xv.shape_str());
    std::size_t d = xv.cols();
    Tensor out({r1 - r0, d});
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[r0 * d + i];
    return t.op(std::move(out), {x.id}, [r0, d](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < g.size(); ++i) gx[r0 * d + i] += g[i];
    });
}

/// out[i,:] = x[idx[i],:]; idx entries of -1 produce zero rows.
inline Var gather_rows(Var x, std::vector<std::int64_t> indices) {
    Tape& t = *x.tape;
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "gather_rows");
    std::size_t d = xv.cols();
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::move(indices));
    Tensor out({idx->size(), d});
    for (std::size_t i = 0; i < idx->size(); ++i) {
        std::int64_t s = (*idx)[i];
        if (s >= static_cast<std::int64_t>(xv.rows()))
            throw DimensionError("gather_rows: index out of range");
        if (s < 0) continue;
        for (std::size_t j = 0; j < d; ++j)
            out.at(i, j) = xv.at(static_cast<std::size_t>(s), j);
    }
    return t.op(std::move(out), {x.id}, [idx, d](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        const Tensor& g = tp.grad_of_const(self);
        Tensor& gx = tp.grad_of(ps[0]);
        for (std::size_t i = 0; i < idx->size(); ++i) {
            std::int64_t s = (*idx)[i];
            if (s < 0) continue;
            for (std::size_t j = 0; j < d; ++j)
                gx.at(static_cast<std::size_t>(s), j) += g.at(i, j);
        }
    });
}

// ---------------------------------------------------------------------------
// Parameter initializers
// ---------------------------------------------------------------------------

inline Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, SeededRng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t({fan_in, fan_out});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
    return t;
}

inline Tensor normal_init(std::vector<std::size_t> shape, double stddev, SeededRng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace milbench
