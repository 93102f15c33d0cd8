#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "milbench/tensor.hpp"

namespace milbench {

/// Pads an [n,d] sequence up to the next perfect square length by cyclically
/// repeating the leading rows.
inline std::size_t square_pad_length(std::size_t n) {
    std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    while (side * side < n) ++side;  // guard against fp rounding
    return side * side;
}

inline Var square_pad(Var x) {
    const Tensor& xv = x.value();
    std::size_t n = xv.rows();
    std::size_t padded = square_pad_length(n);
    if (padded == n) return x;
    std::vector<std::int64_t> idx(padded);
    for (std::size_t i = 0; i < padded; ++i)
        idx[i] = static_cast<std::int64_t>(i % n);
    return gather_rows(x, std::move(idx));
}

namespace detail {

/// Init scale 1/(max row sum * max col sum) for the Newton-Schulz iteration,
/// as a scalar node so the dependence on A is differentiated.
inline Var pinv_init_scale(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    std::size_t m = av.rows(), n = av.cols();
    std::size_t arg_row = 0, arg_col = 0;
    double max_row = -1.0, max_col = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::abs(av.at(i, j));
        if (s > max_row) { max_row = s; arg_row = i; }
    }
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += std::abs(av.at(i, j));
        if (s > max_col) { max_col = s; arg_col = j; }
    }
    double alpha = 1.0 / (max_row * max_col);
    Tensor out({1, 1});
    out[0] = alpha;
    return t.op(std::move(out), {a.id},
                [arg_row, arg_col, max_row, max_col, alpha](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        if (!tp.needs_grad(ps[0])) return;
        double g = tp.grad_of_const(self)[0];
        const Tensor& av = tp.value_of(ps[0]);
        Tensor& ga = tp.grad_of(ps[0]);
        std::size_t m = av.rows(), n = av.cols();
        // d alpha / dA = -alpha^2 * (max_col * d(max_row) + max_row * d(max_col))
        for (std::size_t j = 0; j < n; ++j) {
            double sgn = av.at(arg_row, j) < 0.0 ? -1.0 : 1.0;
            ga.at(arg_row, j) += g * (-alpha * alpha) * max_col * sgn;
        }
        for (std::size_t i = 0; i < m; ++i) {
            double sgn = av.at(i, arg_col) < 0.0 ? -1.0 : 1.0;
            ga.at(i, arg_col) += g * (-alpha * alpha) * max_row * sgn;
        }
    });
}

}  // namespace detail

/// Iterative Moore-Penrose pseudo-inverse of a square matrix:
///   Z <- Z (13 I - P (15 I - P (7 I - P))) / 4,  P = A Z,
/// started from Z0 = A^T / (max row sum * max col sum). Intended for
/// row-stochastic softmax outputs, where the iteration is stable.
inline Var moore_penrose_pinv(Var a, int iters = 6) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    if (av.rank() != 2 || av.rows() != av.cols())
        throw DimensionError("moore_penrose_pinv: expected square matrix, got " +
                             av.shape_str());
    std::size_t m = av.rows();
    auto ident_times = [&](double c) {
        Tensor d({m, m});
        for (std::size_t i = 0; i < m; ++i) d.at(i, i) = c;
        return t.leaf(std::move(d));
    };
    Var i7 = ident_times(7.0);
    Var i15 = ident_times(15.0);
    Var i13 = ident_times(13.0);
    Var z = hadamard(transpose(a), detail::pinv_init_scale(a));
    for (int k = 0; k < iters; ++k) {
        Var p = matmul(a, z);
        Var inner = sub(i7, p);
        Var mid = sub(i15, matmul(p, inner));
        Var outer = sub(i13, matmul(p, mid));
        z = scale(matmul(z, outer), 0.25);
    }
    return z;
}

/// Nyström approximation of softmax attention. Landmarks are the means of
/// contiguous segments of length ceil(N/m); with m = N this reduces to exact
/// attention up to the pseudo-inverse tolerance.
inline Var nystrom_attention(Var q, Var k, Var v, std::size_t landmarks,
                             int pinv_iters = 6) {
    Tape& t = detail::same_tape(q, k);
    detail::same_tape(k, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (landmarks < 1)
        throw std::invalid_argument("nystrom_attention: landmark count must be >= 1");
    std::size_t n = qv.rows(), dh = qv.cols();
    if (kv.rows() != n || kv.cols() != dh || vv.rows() != n)
        throw DimensionError("nystrom_attention: Q/K/V shape mismatch");
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dh));

    std::size_t m = std::min(landmarks, n);
    std::size_t seg = (n + m - 1) / m;
    std::size_t m_eff = (n + seg - 1) / seg;

    // Segment-mean matrix as a constant leaf; matmul carries the gradients.
    Tensor pool({m_eff, n});
    for (std::size_t i = 0; i < m_eff; ++i) {
        std::size_t lo = i * seg, hi = std::min(lo + seg, n);
        double w = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t j = lo; j < hi; ++j) pool.at(i, j) = w;
    }
    Var pool_v = t.leaf(std::move(pool));
    Var q_land = matmul(pool_v, q);
    Var k_land = matmul(pool_v, k);

    Var s1 = row_softmax(scale(matmul(q, transpose(k_land)), inv_sqrt_d));
    Var s2 = row_softmax(scale(matmul(q_land, transpose(k_land)), inv_sqrt_d));
    Var s3 = row_softmax(scale(matmul(q_land, transpose(k)), inv_sqrt_d));
    Var z = moore_penrose_pinv(s2, pinv_iters);
    return matmul(s1, matmul(z, matmul(s3, v)));
}

/// Exact softmax attention, softmax(Q K^T / sqrt(d_h)) V. Reference path for
/// the Nyström approximation.
inline Var exact_attention(Var q, Var k, Var v) {
    double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
    Var s = row_softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
    return matmul(s, v);
}

namespace detail {

/// Accumulates the depthwise correlation term: for every tap (u,v) of a
/// ksize x ksize kernel, dst[p,q,c] += taps[(u,v),c] * src[p+u-h, q+v-h, c],
/// rows indexed as p*side+q, zero outside the grid.
inline void depthwise_accumulate(Tensor& dst, const Tensor& src, const Tensor& taps,
                                 std::size_t side, std::size_t ksize, bool flipped) {
    std::size_t d = src.cols();
    std::ptrdiff_t half = static_cast<std::ptrdiff_t>(ksize / 2);
    std::ptrdiff_t s = static_cast<std::ptrdiff_t>(side);
    for (std::size_t u = 0; u < ksize; ++u) {
        for (std::size_t v = 0; v < ksize; ++v) {
            std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u) - half;
            std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v) - half;
            if (flipped) { du = -du; dv = -dv; }
            const double* tap = taps.data() + (u * ksize + v) * d;
            for (std::ptrdiff_t p = 0; p < s; ++p) {
                std::ptrdiff_t sp = p + du;
                if (sp < 0 || sp >= s) continue;
                for (std::ptrdiff_t q = 0; q < s; ++q) {
                    std::ptrdiff_t sq = q + dv;
                    if (sq < 0 || sq >= s) continue;
                    double* drow = dst.data() + (p * s + q) * static_cast<std::ptrdiff_t>(d);
                    const double* srow =
                        src.data() + (sp * s + sq) * static_cast<std::ptrdiff_t>(d);
                    for (std::size_t c = 0; c < d; ++c) drow[c] += tap[c] * srow[c];
                }
            }
        }
    }
}

/// dTaps[(u,v),c] += sum_{p,q} g[p,q,c] * src[p+u-h, q+v-h, c].
inline void depthwise_tap_grad(Tensor& dtaps, const Tensor& g, const Tensor& src,
                               std::size_t side, std::size_t ksize) {
    std::size_t d = src.cols();
    std::ptrdiff_t half = static_cast<std::ptrdiff_t>(ksize / 2);
    std::ptrdiff_t s = static_cast<std::ptrdiff_t>(side);
    for (std::size_t u = 0; u < ksize; ++u) {
        for (std::size_t v = 0; v < ksize; ++v) {
            std::ptrdiff_t du = static_cast<std::ptrdiff_t>(u) - half;
            std::ptrdiff_t dv = static_cast<std::ptrdiff_t>(v) - half;
            double* tap = dtaps.data() + (u * ksize + v) * d;
            for (std::ptrdiff_t p = 0; p < s; ++p) {
                std::ptrdiff_t sp = p + du;
                if (sp < 0 || sp >= s) continue;
                for (std::ptrdiff_t q = 0; q < s; ++q) {
                    std::ptrdiff_t sq = q + dv;
                    if (sq < 0 || sq >= s) continue;
                    const double* grow =
                        g.data() + (p * s + q) * static_cast<std::ptrdiff_t>(d);
                    const double* srow =
                        src.data() + (sp * s + sq) * static_cast<std::ptrdiff_t>(d);
                    for (std::size_t c = 0; c < d; ++c) tap[c] += grow[c] * srow[c];
                }
            }
        }
    }
}

}  // namespace detail

/// Pyramid positional encoding: the [N,d] feature rows are viewed as a
/// grid_side x grid_side image with d channels, and depthwise 3x3, 5x5 and
/// 7x7 same-padding convolutions of the grid are added to it.
/// Kernel tensors are [k*k, d] (one weight row per tap).
inline Var ppeg(Var x, Var k3, Var k5, Var k7, std::size_t grid_side) {
    Tape& t = detail::same_tape(x, k3);
    detail::same_tape(k3, k5);
    detail::same_tape(k5, k7);
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "ppeg");
    std::size_t n = xv.rows(), d = xv.cols();
    if (grid_side * grid_side != n)
        throw DimensionError("ppeg: row count " + std::to_string(n) +
                             " is not grid_side^2");
    auto check_kernel = [&](const Tensor& kv, std::size_t ks) {
        if (kv.rank() != 2 || kv.rows() != ks * ks || kv.cols() != d)
            throw DimensionError("ppeg: kernel shape " + kv.shape_str() +
                                 " does not match taps x channels");
    };
    check_kernel(k3.value(), 3);
    check_kernel(k5.value(), 5);
    check_kernel(k7.value(), 7);

    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i];
    detail::depthwise_accumulate(out, xv, k3.value(), grid_side, 3, false);
    detail::depthwise_accumulate(out, xv, k5.value(), grid_side, 5, false);
    detail::depthwise_accumulate(out, xv, k7.value(), grid_side, 7, false);

    return t.op(std::move(out), {x.id, k3.id, k5.id, k7.id},
                [grid_side](Tape& tp, std::int32_t self) {
        const auto& ps = tp.parents_of(self);
        const Tensor& g = tp.grad_of_const(self);
        const Tensor& xv = tp.value_of(ps[0]);
        if (tp.needs_grad(ps[0])) {
            Tensor& gx = tp.grad_of(ps[0]);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            detail::depthwise_accumulate(gx, g, tp.value_of(ps[1]), grid_side, 3, true);
            detail::depthwise_accumulate(gx, g, tp.value_of(ps[2]), grid_side, 5, true);
            detail::depthwise_accumulate(gx, g, tp.value_of(ps[3]), grid_side, 7, true);
        }
        const std::size_t ks[3] = {3, 5, 7};
        for (int i = 0; i < 3; ++i) {
            if (!tp.needs_grad(ps[1 + i])) continue;
            detail::depthwise_tap_grad(tp.grad_of(ps[1 + i]), g, xv, grid_side, ks[i]);
        }
    });
}

}  // namespace milbench
