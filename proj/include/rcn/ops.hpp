#pragma once

// Differentiable primitives. Spatial ops act on the trailing two dimensions,
// so a single C×H×W map and an N×C×H×W batch go through the same code.
// Max selections send their gradient to the argmax element; ties resolve to
// the lowest linear index.

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "rcn/tensor.hpp"

namespace rcn {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using MapConstMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_min_rank(const Shape& s, std::size_t r, std::string_view op) {
    if (s.size() < r)
        throw ShapeError(std::string(op) + ": need rank >= " + std::to_string(r) + ", got " + shape_str(s));
}

// Shape of the leading (non-spatial) dims and the spatial extent.
struct SpatialSplit {
    std::size_t planes = 1, height = 1, width = 1;
    Shape lead;
};

inline SpatialSplit split_spatial(const Shape& s, std::string_view op) {
    require_min_rank(s, 2, op);
    SpatialSplit out;
    out.lead.assign(s.begin(), s.end() - 2);
    out.planes = numel(out.lead);
    out.height = s[s.size() - 2];
    out.width = s[s.size() - 1];
    return out;
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& x, std::string_view op, Fwd fwd, Deriv deriv) {
    check_finite(x, op);
    std::vector<T> v(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = fwd(in[i]);
    return make_result<T>(x.shape(), std::move(v), {&x}, op, [deriv](Node<T>& out) {
        T* g = input_grad(out, 0);
        if (!g) return;
        const T* __restrict xv = input_value(out, 0).data();
        const T* __restrict go = out.grad.data();
        const T* __restrict yv = out.value.data();
        T* __restrict gi = g;
        for (std::size_t i = 0, n = out.grad.size(); i < n; ++i) gi[i] += go[i] * deriv(xv[i], yv[i]);
    });
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    detail::check_finite(a, "add");
    detail::check_finite(b, "add");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
    return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, "add", [](Node<T>& out) {
        for (std::size_t k = 0; k < 2; ++k)
            if (T* g = detail::input_grad(out, k))
                for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    detail::check_finite(a, "sub");
    detail::check_finite(b, "sub");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] - b[i];
    return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, "sub", [](Node<T>& out) {
        if (T* g = detail::input_grad(out, 0))
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
        if (T* g = detail::input_grad(out, 1))
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    detail::check_finite(a, "mul");
    detail::check_finite(b, "mul");
    std::vector<T> v(a.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] * b[i];
    return detail::make_result<T>(a.shape(), std::move(v), {&a, &b}, "mul", [](Node<T>& out) {
        const auto& av = detail::input_value(out, 0);
        const auto& bv = detail::input_value(out, 1);
        if (T* g = detail::input_grad(out, 0))
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * bv[i];
        if (T* g = detail::input_grad(out, 1))
            for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * av[i];
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary(x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary(x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

// log(1 + e^x), evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary(
        x, "softplus",
        [](T v) { return v > T(0) ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

// ---- reductions and linear algebra -----------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    detail::check_finite(x, "sum");
    T acc = 0;
    for (T v : x.data()) acc += v;
    return detail::make_result<T>({1}, {acc}, {&x}, "sum", [](Node<T>& out) {
        if (T* g = detail::input_grad(out, 0)) {
            const std::size_t n = out.inputs[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += out.grad[0];
        }
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    detail::check_finite(a, "matmul");
    detail::check_finite(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> v(m * n);
    detail::MapMat<T>(v.data(), m, n).noalias() =
        detail::MapConstMat<T>(a.data().data(), m, k) * detail::MapConstMat<T>(b.data().data(), k, n);
    return detail::make_result<T>({m, n}, std::move(v), {&a, &b}, "matmul", [m, k, n](Node<T>& out) {
        detail::MapConstMat<T> go(out.grad.data(), m, n);
        if (T* g = detail::input_grad(out, 0))
            detail::MapMat<T>(g, m, k).noalias() +=
                go * detail::MapConstMat<T>(detail::input_value(out, 1).data(), k, n).transpose();
        if (T* g = detail::input_grad(out, 1))
            detail::MapMat<T>(g, k, n).noalias() +=
                detail::MapConstMat<T>(detail::input_value(out, 0).data(), m, k).transpose() * go;
    });
}

// Rows [begin, end) along the leading dimension.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    detail::require_min_rank(x.shape(), 1, "slice_rows");
    if (begin > end || end > x.dim(0))
        throw ShapeError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
    const std::size_t stride = x.size() / x.dim(0);
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<T> v(x.data().begin() + begin * stride, x.data().begin() + end * stride);
    return detail::make_result<T>(std::move(shape), std::move(v), {&x}, "slice_rows",
                                  [offset = begin * stride](Node<T>& out) {
                                      if (T* g = detail::input_grad(out, 0))
                                          for (std::size_t i = 0; i < out.grad.size(); ++i)
                                              g[offset + i] += out.grad[i];
                                  });
}

// Concatenation along dim 1 of rank-4 inputs (dim 0 of rank-3 inputs).
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank() || (a.rank() != 3 && a.rank() != 4))
        throw ShapeError("concat_channels: need matching rank 3 or 4, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const std::size_t cdim = a.rank() - 3;
    Shape sa = a.shape(), sb = b.shape();
    sa[cdim] = sb[cdim] = 0;
    if (sa != sb)
        throw ShapeError("concat_channels: non-channel dims differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const std::size_t batch = cdim == 1 ? a.dim(0) : 1;
    const std::size_t chunk_a = a.size() / batch, chunk_b = b.size() / batch;
    Shape shape = a.shape();
    shape[cdim] += b.dim(cdim);
    std::vector<T> v;
    v.reserve(a.size() + b.size());
    for (std::size_t n = 0; n < batch; ++n) {
        v.insert(v.end(), a.data().begin() + n * chunk_a, a.data().begin() + (n + 1) * chunk_a);
        v.insert(v.end(), b.data().begin() + n * chunk_b, b.data().begin() + (n + 1) * chunk_b);
    }
    return detail::make_result<T>(std::move(shape), std::move(v), {&a, &b}, "concat_channels",
                                  [batch, chunk_a, chunk_b](Node<T>& out) {
                                      T* ga = detail::input_grad(out, 0);
                                      T* gb = detail::input_grad(out, 1);
                                      const T* go = out.grad.data();
                                      for (std::size_t n = 0; n < batch; ++n) {
                                          const T* base = go + n * (chunk_a + chunk_b);
                                          if (ga)
                                              for (std::size_t i = 0; i < chunk_a; ++i) ga[n * chunk_a + i] += base[i];
                                          if (gb)
                                              for (std::size_t i = 0; i < chunk_b; ++i)
                                                  gb[n * chunk_b + i] += base[chunk_a + i];
                                      }
                                  });
}

// ---- convolution -------------------------------------------------------------

namespace detail {

struct ConvGeom {
    std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
    std::size_t col_rows() const { return cin * k * k; }
    std::size_t col_cols() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox*stride + kj - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_cols(const ConvGeom& g, std::size_t kj) {
    const long off = static_cast<long>(kj) - static_cast<long>(g.pad);
    const long s = static_cast<long>(g.stride);
    const long lo = off >= 0 ? 0 : (-off + s - 1) / s;
    const long hi = static_cast<long>(g.w) - off <= 0 ? 0 : (static_cast<long>(g.w) - off + s - 1) / s;
    const auto clamp = [&](long v) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(g.ow))); };
    return {clamp(lo), std::max(clamp(lo), clamp(hi))};
}

inline bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// Sum of f(i) for i < n in a fixed 16-lane order. Vectorizes, and unlike
// Eigen's reductions on mapped memory the result does not depend on alignment.
template <class T, class F>
T lane_sum(std::size_t n, F f) {
    constexpr std::size_t L = 16;
    T acc[L] = {};
    std::size_t i = 0;
    for (; i + L <= n; i += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] += f(i + l);
    for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += f(i);
    T total = 0;
    for (T a : acc) total += a;
    return total;
}

template <class T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
    const std::size_t ncols = g.col_cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
                const auto [lo, hi] = valid_cols(g, kj);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    T* dst = row + oy * g.ow;
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) {
                        std::fill_n(dst, g.ow, T(0));
                        continue;
                    }
                    std::fill_n(dst, lo, T(0));
                    std::fill(dst + hi, dst + g.ow, T(0));
                    const std::size_t base = (c * g.h + iy) * g.w + kj - g.pad;  // wraps only when lo > 0
                    if (g.stride == 1)
                        std::copy(img + (base + lo), img + (base + hi), dst + lo);
                    else
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = img[base + ox * g.stride];
                }
            }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
    const std::size_t ncols = g.col_cols();
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = cols + ((c * g.k + ki) * g.k + kj) * ncols;
                const auto [lo, hi] = valid_cols(g, kj);
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    const T* src = row + oy * g.ow;
                    const std::size_t base = (c * g.h + iy) * g.w + kj - g.pad;
                    for (std::size_t ox = lo; ox < hi; ++ox) img[base + ox * g.stride] += src[ox];
                }
            }
}

}  // namespace detail

// input C_in×H×W or N×C_in×H×W; kernel C_out×C_in×k×k; bias C_out or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias = {},
                 std::size_t stride = 1, std::size_t padding = 0) {
    if (input.rank() != 3 && input.rank() != 4)
        throw ShapeError("conv2d: input must be C×H×W or N×C×H×W, got " + shape_str(input.shape()));
    if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
        throw ShapeError("conv2d: kernel must be C_out×C_in×k×k, got " + shape_str(kernel.shape()));
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const bool batched = input.rank() == 4;
    const std::size_t batch = batched ? input.dim(0) : 1;
    detail::ConvGeom g{};
    g.cin = input.dim(batched ? 1 : 0);
    g.h = input.dim(batched ? 2 : 1);
    g.w = input.dim(batched ? 3 : 2);
    g.cout = kernel.dim(0);
    g.k = kernel.dim(2);
    g.stride = stride;
    g.pad = padding;
    if (kernel.dim(1) != g.cin)
        throw ShapeError("conv2d: input has " + std::to_string(g.cin) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)) + " (input " + shape_str(input.shape()) + ", kernel " +
                         shape_str(kernel.shape()) + ")");
    if (g.k > g.h + 2 * padding || g.k > g.w + 2 * padding)
        throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " exceeds padded input " +
                         shape_str(input.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout))
        throw ShapeError("conv2d: bias must have " + std::to_string(g.cout) + " entries, got " +
                         shape_str(bias.shape()));
    detail::check_finite(input, "conv2d");
    detail::check_finite(kernel, "conv2d");
    g.oh = (g.h + 2 * padding - g.k) / stride + 1;
    g.ow = (g.w + 2 * padding - g.k) / stride + 1;

    const std::size_t in_plane = g.cin * g.h * g.w;
    const std::size_t out_plane = g.cout * g.oh * g.ow;
    std::vector<T> out(batch * out_plane);
    const bool pointwise = detail::is_pointwise(g);  // the input already is the column matrix
    std::vector<T> cols(pointwise ? 0 : g.col_rows() * g.col_cols());
    detail::MapConstMat<T> wmat(kernel.data().data(), g.cout, g.col_rows());
    for (std::size_t n = 0; n < batch; ++n) {
        const T* x = input.data().data() + n * in_plane;
        if (!pointwise) detail::im2col(x, g, cols.data());
        detail::MapMat<T> omat(out.data() + n * out_plane, g.cout, g.col_cols());
        omat.noalias() = wmat * detail::MapConstMat<T>(pointwise ? x : cols.data(), g.col_rows(), g.col_cols());
        if (bias.defined())
            for (std::size_t c = 0; c < g.cout; ++c) omat.row(c).array() += bias[c];
    }
    Shape shape = batched ? Shape{batch, g.cout, g.oh, g.ow} : Shape{g.cout, g.oh, g.ow};
    return detail::make_result<T>(
        std::move(shape), std::move(out), {&input, &kernel, &bias}, "conv2d",
        [g, batch, in_plane, out_plane, pointwise](Node<T>& node) {
            T* gin = detail::input_grad(node, 0);
            T* gker = detail::input_grad(node, 1);
            T* gbias = detail::input_grad(node, 2);
            const auto& xin = detail::input_value(node, 0);
            detail::MapConstMat<T> wmat(detail::input_value(node, 1).data(), g.cout, g.col_rows());
            std::vector<T> cols(pointwise ? 0 : g.col_rows() * g.col_cols());
            std::vector<T> dcols(gin && !pointwise ? cols.size() : 0);
            for (std::size_t n = 0; n < batch; ++n) {
                detail::MapConstMat<T> go(node.grad.data() + n * out_plane, g.cout, g.col_cols());
                if (gker) {
                    const T* x = xin.data() + n * in_plane;
                    if (!pointwise) detail::im2col(x, g, cols.data());
                    detail::MapMat<T>(gker, g.cout, g.col_rows()).noalias() +=
                        go * detail::MapConstMat<T>(pointwise ? x : cols.data(), g.col_rows(), g.col_cols()).transpose();
                }
                if (gbias)
                    for (std::size_t c = 0; c < g.cout; ++c) {
                        const T* row = node.grad.data() + n * out_plane + c * g.col_cols();
                        gbias[c] += detail::lane_sum<T>(g.col_cols(), [row](std::size_t i) { return row[i]; });
                    }
                if (gin && pointwise) {
                    detail::MapMat<T>(gin + n * in_plane, g.col_rows(), g.col_cols()).noalias() += wmat.transpose() * go;
                } else if (gin) {
                    detail::MapMat<T>(dcols.data(), g.col_rows(), g.col_cols()).noalias() = wmat.transpose() * go;
                    detail::col2im_add(dcols.data(), g, gin + n * in_plane);
                }
            }
        });
}

// ---- normalization -------------------------------------------------------------

template <class T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

// Channel-wise batch norm over N×C×H×W. Training mode normalizes with batch
// statistics and folds them into the running averages; inference mode uses
// the running averages.
template <class T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                       bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.rank() != 4) throw ShapeError("batch_norm2d: need N×C×H×W, got " + shape_str(x.shape()));
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.size() != c || beta.size() != c || stats.running_mean.size() != c || stats.running_var.size() != c)
        throw ShapeError("batch_norm2d: parameters must have " + std::to_string(c) + " channels");
    detail::check_finite(x, "batch_norm2d");
    const std::size_t count = n * hw;
    std::vector<T> mu(c), invstd(c);
    const auto xv = x.data();
    if (training) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            T s = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * hw;
                s += detail::lane_sum<T>(hw, [p](std::size_t i) { return p[i]; });
            }
            const T m = s / static_cast<T>(count);
            T ss = 0;
            for (std::size_t b = 0; b < n; ++b) {
                const T* p = xv.data() + (b * c + ch) * hw;
                ss += detail::lane_sum<T>(hw, [p, m](std::size_t i) { return (p[i] - m) * (p[i] - m); });
            }
            const T var = ss / static_cast<T>(count);
            mu[ch] = m;
            invstd[ch] = T(1) / std::sqrt(var + eps);
            auto rm = stats.running_mean.mutable_data();
            auto rv = stats.running_var.mutable_data();
            const T unbiased = count > 1 ? ss / static_cast<T>(count - 1) : var;
            rm[ch] = (T(1) - momentum) * rm[ch] + momentum * m;
            rv[ch] = (T(1) - momentum) * rv[ch] + momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.running_mean[ch];
            invstd[ch] = T(1) / std::sqrt(stats.running_var[ch] + eps);
        }
    }
    std::vector<T> xhat(x.size()), y(x.size());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                xhat[off + i] = (xv[off + i] - mu[ch]) * invstd[ch];
                y[off + i] = gamma[ch] * xhat[off + i] + beta[ch];
            }
        }
    return detail::make_result<T>(
        x.shape(), std::move(y), {&x, &gamma, &beta}, "batch_norm2d",
        [n, c, hw, count, training, invstd = std::move(invstd), xhat = std::move(xhat)](Node<T>& out) {
            const auto& gam = detail::input_value(out, 1);
            T* gx = detail::input_grad(out, 0);
            T* gg = detail::input_grad(out, 1);
            T* gb = detail::input_grad(out, 2);
            const T* go = out.grad.data();
            for (std::size_t ch = 0; ch < c; ++ch) {
                T sum_dy = 0, sum_dy_xhat = 0;
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t off = (b * c + ch) * hw;
                    const T* dy = go + off;
                    const T* xh = xhat.data() + off;
                    sum_dy += detail::lane_sum<T>(hw, [dy](std::size_t i) { return dy[i]; });
                    sum_dy_xhat += detail::lane_sum<T>(hw, [dy, xh](std::size_t i) { return dy[i] * xh[i]; });
                }
                if (gg) gg[ch] += sum_dy_xhat;
                if (gb) gb[ch] += sum_dy;
                if (!gx) continue;
                const T k = gam[ch] * invstd[ch];
                const T inv_count = T(1) / static_cast<T>(count);
                for (std::size_t b = 0; b < n; ++b) {
                    const std::size_t off = (b * c + ch) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        if (training)
                            gx[off + i] +=
                                k * (go[off + i] - inv_count * sum_dy - xhat[off + i] * inv_count * sum_dy_xhat);
                        else
                            gx[off + i] += k * go[off + i];
                    }
                }
            }
        });
}

// ---- pooling -----------------------------------------------------------------

template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel = 2, std::size_t stride = 2) {
    const auto sp = detail::split_spatial(x.shape(), "max_pool2d");
    if (kernel == 0 || stride == 0 || kernel > sp.height || kernel > sp.width)
        throw ShapeError("max_pool2d: window " + std::to_string(kernel) + " does not fit " + shape_str(x.shape()));
    detail::check_finite(x, "max_pool2d");
    const std::size_t oh = (sp.height - kernel) / stride + 1, ow = (sp.width - kernel) / stride + 1;
    std::vector<T> v(sp.planes * oh * ow);
    std::vector<std::size_t> arg(v.size());
    const auto xv = x.data();
    for (std::size_t p = 0; p < sp.planes; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = p * sp.height * sp.width + oy * stride * sp.width + ox * stride;
                for (std::size_t ky = 0; ky < kernel; ++ky)
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const std::size_t idx = p * sp.height * sp.width + (oy * stride + ky) * sp.width + ox * stride + kx;
                        if (xv[idx] > xv[best]) best = idx;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                v[o] = xv[best];
                arg[o] = best;
            }
    Shape shape = sp.lead;
    shape.push_back(oh);
    shape.push_back(ow);
    return detail::make_result<T>(std::move(shape), std::move(v), {&x}, "max_pool2d",
                                  [arg = std::move(arg)](Node<T>& out) {
                                      if (T* g = detail::input_grad(out, 0))
                                          for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += out.grad[o];
                                  });
}

// Maximum over the trailing H×W plane. A plain H×W input yields a 1-element tensor.
template <class T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    const auto sp = detail::split_spatial(x.shape(), "global_max_pool");
    detail::check_finite(x, "global_max_pool");
    const std::size_t plane = sp.height * sp.width;
    std::vector<T> v(sp.planes);
    std::vector<std::size_t> arg(sp.planes);
    const auto xv = x.data();
    for (std::size_t p = 0; p < sp.planes; ++p) {
        std::size_t best = p * plane;
        for (std::size_t i = 1; i < plane; ++i)
            if (xv[p * plane + i] > xv[best]) best = p * plane + i;
        v[p] = xv[best];
        arg[p] = best;
    }
    Shape shape = sp.lead.empty() ? Shape{1} : sp.lead;
    return detail::make_result<T>(std::move(shape), std::move(v), {&x}, "global_max_pool",
                                  [arg = std::move(arg)](Node<T>& out) {
                                      if (T* g = detail::input_grad(out, 0))
                                          for (std::size_t o = 0; o < arg.size(); ++o) g[arg[o]] += out.grad[o];
                                  });
}

// Window for output cell i of an adaptive pool: [floor(i*in/out), ceil((i+1)*in/out)).
inline std::pair<std::size_t, std::size_t> adaptive_window(std::size_t i, std::size_t in, std::size_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    const auto sp = detail::split_spatial(x.shape(), "adaptive_avg_pool2d");
    if (out_h < 1 || out_w < 1 || out_h > sp.height || out_w > sp.width)
        throw ShapeError("adaptive_avg_pool2d: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                         " must be within 1.." + std::to_string(sp.height) + "x" + std::to_string(sp.width));
    detail::check_finite(x, "adaptive_avg_pool2d");
    const auto xv = x.data();
    std::vector<T> v(sp.planes * out_h * out_w);
    for (std::size_t p = 0; p < sp.planes; ++p)
        for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto [y0, y1] = adaptive_window(oy, sp.height, out_h);
                const auto [x0, x1] = adaptive_window(ox, sp.width, out_w);
                T s = 0;
                for (std::size_t yy = y0; yy < y1; ++yy)
                    for (std::size_t xx = x0; xx < x1; ++xx) s += xv[(p * sp.height + yy) * sp.width + xx];
                v[(p * out_h + oy) * out_w + ox] = s / static_cast<T>((y1 - y0) * (x1 - x0));
            }
    Shape shape = sp.lead;
    shape.push_back(out_h);
    shape.push_back(out_w);
    return detail::make_result<T>(std::move(shape), std::move(v), {&x}, "adaptive_avg_pool2d",
                                  [sp, out_h, out_w](Node<T>& out) {
                                      T* g = detail::input_grad(out, 0);
                                      if (!g) return;
                                      for (std::size_t p = 0; p < sp.planes; ++p)
                                          for (std::size_t oy = 0; oy < out_h; ++oy)
                                              for (std::size_t ox = 0; ox < out_w; ++ox) {
                                                  const auto [y0, y1] = adaptive_window(oy, sp.height, out_h);
                                                  const auto [x0, x1] = adaptive_window(ox, sp.width, out_w);
                                                  const T share = out.grad[(p * out_h + oy) * out_w + ox] /
                                                                  static_cast<T>((y1 - y0) * (x1 - x0));
                                                  for (std::size_t yy = y0; yy < y1; ++yy)
                                                      for (std::size_t xx = x0; xx < x1; ++xx)
                                                          g[(p * sp.height + yy) * sp.width + xx] += share;
                                              }
                                  });
}

// ---- resampling ----------------------------------------------------------------

namespace detail {
// Half-pixel-centre source coordinate, clamped to the valid range.
struct LerpTap {
    std::size_t lo, hi;
    double frac;
};

inline LerpTap lerp_tap(std::size_t dst, std::size_t in, std::size_t out) {
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    return {lo, hi, src - static_cast<double>(lo)};
}
}  // namespace detail

// Bilinear resize of the trailing plane (align-corners off, edge clamped).
template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    const auto sp = detail::split_spatial(x.shape(), "bilinear_upsample");
    if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_upsample: empty target");
    detail::check_finite(x, "bilinear_upsample");
    std::vector<detail::LerpTap> ty(out_h), tx(out_w);
    for (std::size_t i = 0; i < out_h; ++i) ty[i] = detail::lerp_tap(i, sp.height, out_h);
    for (std::size_t j = 0; j < out_w; ++j) tx[j] = detail::lerp_tap(j, sp.width, out_w);
    const auto xv = x.data();
    std::vector<T> v(sp.planes * out_h * out_w);
    for (std::size_t p = 0; p < sp.planes; ++p) {
        const T* src = xv.data() + p * sp.height * sp.width;
        for (std::size_t i = 0; i < out_h; ++i)
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto& a = ty[i];
                const auto& b = tx[j];
                const T fy = static_cast<T>(a.frac), fx = static_cast<T>(b.frac);
                v[(p * out_h + i) * out_w + j] = (T(1) - fy) * ((T(1) - fx) * src[a.lo * sp.width + b.lo] +
                                                                fx * src[a.lo * sp.width + b.hi]) +
                                                 fy * ((T(1) - fx) * src[a.hi * sp.width + b.lo] +
                                                       fx * src[a.hi * sp.width + b.hi]);
            }
    }
    Shape shape = sp.lead;
    shape.push_back(out_h);
    shape.push_back(out_w);
    return detail::make_result<T>(std::move(shape), std::move(v), {&x}, "bilinear_upsample",
                                  [sp, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](Node<T>& out) {
                                      T* g = detail::input_grad(out, 0);
                                      if (!g) return;
                                      for (std::size_t p = 0; p < sp.planes; ++p) {
                                          T* dst = g + p * sp.height * sp.width;
                                          for (std::size_t i = 0; i < out_h; ++i)
                                              for (std::size_t j = 0; j < out_w; ++j) {
                                                  const T go = out.grad[(p * out_h + i) * out_w + j];
                                                  const T fy = static_cast<T>(ty[i].frac), fx = static_cast<T>(tx[j].frac);
                                                  dst[ty[i].lo * sp.width + tx[j].lo] += go * (T(1) - fy) * (T(1) - fx);
                                                  dst[ty[i].lo * sp.width + tx[j].hi] += go * (T(1) - fy) * fx;
                                                  dst[ty[i].hi * sp.width + tx[j].lo] += go * fy * (T(1) - fx);
                                                  dst[ty[i].hi * sp.width + tx[j].hi] += go * fy * fx;
                                              }
                                      }
                                  });
}

}  // namespace rcn
