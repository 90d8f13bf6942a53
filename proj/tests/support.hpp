#pragma once

// Test-only helpers: random tensors, naive loop oracles and a central
// finite-difference gradient checker. Nothing here calls into the
// optimized code paths it is used to check.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "rcn/rcn.hpp"

namespace rcn::testing {

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                        bool requires_grad = false) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<T> v(numel(shape));
    for (auto& x : v) x = static_cast<T>(u(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

// Six nested loops, no im2col.
inline std::vector<double> naive_conv2d(const std::vector<double>& in, std::size_t cin, std::size_t h, std::size_t w,
                                        const std::vector<double>& k, std::size_t cout, std::size_t ks,
                                        std::size_t stride, std::size_t pad, std::size_t& oh, std::size_t& ow) {
    oh = (h + 2 * pad - ks) / stride + 1;
    ow = (w + 2 * pad - ks) / stride + 1;
    std::vector<double> out(cout * oh * ow, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t c = 0; c < cin; ++c)
                    for (std::size_t i = 0; i < ks; ++i)
                        for (std::size_t j = 0; j < ks; ++j) {
                            const long iy = long(y * stride + i) - long(pad), ix = long(x * stride + j) - long(pad);
                            if (iy < 0 || ix < 0 || iy >= long(h) || ix >= long(w)) continue;
                            out[(o * oh + y) * ow + x] +=
                                in[(c * h + iy) * w + ix] * k[((o * cin + c) * ks + i) * ks + j];
                        }
    return out;
}

// Scalar metric straight from the definitions.
inline double naive_metric(Metric m, const std::vector<double>& a, const std::vector<double>& b, double eps = 1e-8) {
    double dot = 0, na = 0, nb = 0, d2 = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
        d2 += (a[i] - b[i]) * (a[i] - b[i]);
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    switch (m) {
        case Metric::cosine: return dot / std::max(na * nb, eps);
        case Metric::tanimoto:
            if (na < eps || nb < eps) return 0.0;
            if (na * nb - dot < eps) return 1.0;
            return dot / (na * nb - dot);
        case Metric::exp_neg_dist: return std::exp(-std::sqrt(d2));
        case Metric::inv_one_plus_dist: return 1.0 / (1.0 + std::sqrt(d2));
    }
    return 0;
}

// Column (channel vector) at cell i of a C x h x w map.
inline std::vector<double> column(const std::vector<double>& map, std::size_t c, std::size_t hw, std::size_t i) {
    std::vector<double> v(c);
    for (std::size_t ch = 0; ch < c; ++ch) v[ch] = map[ch * hw + i];
    return v;
}

struct GradCheck {
    double max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0;
};

// Central differences on every (or every `stride`-th) component of each
// parameter. Components whose one-sided slopes disagree strongly sit on a
// relu/max kink and are skipped and counted.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& loss_fn, std::vector<Tensor<double>> params,
                                 double step = 1e-5, std::size_t stride = 1) {
    for (auto& p : params) p.zero_grad();
    auto loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    for (auto& p : params)
        analytic.emplace_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                           : std::vector<double>(p.size(), 0.0));
    GradCheck out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto w = params[k].mutable_data();
        for (std::size_t i = 0; i < w.size(); i += stride) {
            const double orig = w[i];
            double f0, fp, fm;
            {
                NoGradGuard g;
                f0 = loss_fn().item();
                w[i] = orig + step;
                fp = loss_fn().item();
                w[i] = orig - step;
                fm = loss_fn().item();
                w[i] = orig;
            }
            const double right = (fp - f0) / step, left = (f0 - fm) / step;
            const double numeric = (fp - fm) / (2 * step);
            const double scale_ = std::max({std::abs(right), std::abs(left), 1e-3});
            if (std::abs(right - left) > 1e-2 * scale_ + 1e-6) {
                ++out.skipped_kinks;
                continue;
            }
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5});
            out.max_rel_error = std::max(out.max_rel_error, rel);
            ++out.checked;
        }
    }
    return out;
}

}  // namespace rcn::testing
