#pragma once

// Region matching: every support cell (a C-vector) is compared against every
// query cell; the per-region similarity maps are max-pooled into one score
// per support region. No learnable state.

#include <string>
#include <utility>

#include "rcn/backbone.hpp"

namespace rcn {

enum class Metric { cosine, tanimoto, exp_neg_dist, inv_one_plus_dist };

inline std::string to_string(Metric m) {
    switch (m) {
        case Metric::cosine: return "cosine";
        case Metric::tanimoto: return "tanimoto";
        case Metric::exp_neg_dist: return "expdist";
        case Metric::inv_one_plus_dist: return "invdist";
    }
    return "?";
}

inline Metric parse_metric(const std::string& s) {
    if (s == "cosine") return Metric::cosine;
    if (s == "tanimoto") return Metric::tanimoto;
    if (s == "expdist") return Metric::exp_neg_dist;
    if (s == "invdist") return Metric::inv_one_plus_dist;
    throw std::invalid_argument("unknown metric '" + s + "' (expected cosine|tanimoto|expdist|invdist)");
}

struct SimilarityMetric {
    Metric kind = Metric::cosine;
    double eps = 1e-8;
};

// Metric value from the dot product and the two norms, plus the partial
// derivatives d/d(dot), d/d(na), d/d(nb) used by the gradient rule.
struct MetricEval {
    double value;
    double d_dot, d_na, d_nb;
};

// Cosine:   dot / max(na*nb, eps); a zero vector scores 0.
// Tanimoto: dot / (na*nb - dot); zero vector scores 0, denominators below
//           eps (parallel vectors) score 1.
// Distance metrics use d = sqrt(na^2 + nb^2 - 2 dot).
inline MetricEval eval_metric(const SimilarityMetric& m, double dot, double na, double nb) {
    switch (m.kind) {
        case Metric::cosine: {
            const double den = na * nb;
            if (den <= m.eps) return {dot / m.eps, 1.0 / m.eps, 0.0, 0.0};
            const double v = dot / den;
            return {v, 1.0 / den, -v / na, -v / nb};
        }
        case Metric::tanimoto: {
            if (na < m.eps || nb < m.eps) return {0.0, 0.0, 0.0, 0.0};
            const double den = na * nb - dot;
            if (den < m.eps) return {1.0, 0.0, 0.0, 0.0};
            const double v = dot / den;
            const double den2 = den * den;
            return {v, (na * nb) / den2, -dot * nb / den2, -dot * na / den2};
        }
        case Metric::exp_neg_dist:
        case Metric::inv_one_plus_dist: {
            const double d2 = std::max(0.0, na * na + nb * nb - 2.0 * dot);
            const double d = std::sqrt(d2);
            const bool is_exp = m.kind == Metric::exp_neg_dist;
            const double v = is_exp ? std::exp(-d) : 1.0 / (1.0 + d);
            if (d < m.eps) return {v, 0.0, 0.0, 0.0};
            const double dv_dd = is_exp ? -v : -v * v;
            // dd/d(dot) = -1/d, dd/d(na) = na/d, dd/d(nb) = nb/d
            return {v, -dv_dd / d, dv_dd * na / d, dv_dd * nb / d};
        }
    }
    return {0, 0, 0, 0};
}

// Value only; must agree with eval_metric(...).value.
template <Metric K>
inline double metric_only(double eps, double dot, double na, double nb) {
    if constexpr (K == Metric::cosine) {
        const double den = na * nb;
        return den <= eps ? dot / eps : dot / den;
    } else if constexpr (K == Metric::tanimoto) {
        if (na < eps || nb < eps) return 0.0;
        const double den = na * nb - dot;
        return den < eps ? 1.0 : dot / den;
    } else {
        const double d = std::sqrt(std::max(0.0, na * na + nb * nb - 2.0 * dot));
        return K == Metric::exp_neg_dist ? std::exp(-d) : 1.0 / (1.0 + d);
    }
}

// Scalar metric between two equal-length vectors.
template <class T>
T metric_value(const SimilarityMetric& m, std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size()) throw ShapeError("metric: vector lengths differ");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    return static_cast<T>(eval_metric(m, dot, std::sqrt(na), std::sqrt(nb)).value);
}

template <class T>
struct RegionVector {
    std::size_t index = 0;  // row-major cell index, 0-based
    std::size_t row = 0, col = 0;
    Tensor<T> values;  // C
};

template <class T>
struct RegionSimilarityMap {
    std::size_t index = 0;
    Tensor<T> values;  // h x w
};

template <class T>
struct RegionScores {
    Tensor<T> values;  // h*w
};

template <class T>
std::vector<RegionVector<T>> decompose(const FeatureMap<T>& map) {
    if (map.values.rank() != 3) throw ShapeError("decompose: expected C x h x w, got " + shape_str(map.values.shape()));
    const std::size_t c = map.channels(), h = map.height(), w = map.width();
    const auto v = map.values.data();
    std::vector<RegionVector<T>> out;
    out.reserve(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
        std::vector<T> col(c);
        for (std::size_t ch = 0; ch < c; ++ch) col[ch] = v[ch * h * w + i];
        out.push_back({i, i / w, i % w, Tensor<T>::from({c}, std::move(col))});
    }
    return out;
}

// Inverse of decompose.
template <class T>
Tensor<T> reassemble(const std::vector<RegionVector<T>>& regions, std::size_t h, std::size_t w) {
    if (regions.size() != h * w) throw ShapeError("reassemble: need h*w regions");
    const std::size_t c = regions.front().values.size();
    std::vector<T> v(c * h * w);
    for (const auto& r : regions)
        for (std::size_t ch = 0; ch < c; ++ch) v[ch * h * w + r.index] = r.values[ch];
    return Tensor<T>::from({c, h, w}, std::move(v));
}

namespace detail {

// Per-cell L2 norms of a C x n column-major-by-cell block (channel stride n).
template <class T>
void cell_norms(const T* base, std::size_t c, std::size_t n, double* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) out[i] += double(base[ch * n + i]) * double(base[ch * n + i]);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(out[i]);
}

// Accumulates dL/da and dL/db given dL/dvalue for one (support cell, query cell) pair.
template <class T>
void metric_backward(const MetricEval& e, double upstream, const T* a, std::size_t a_stride, double na, const T* b,
                     std::size_t b_stride, double nb, std::size_t c, T* ga, T* gb) {
    const double gd = upstream * e.d_dot;
    const double gna = upstream * e.d_na;
    const double gnb = upstream * e.d_nb;
    const double sa = na > 0 ? gna / na : 0.0;
    const double sb = nb > 0 ? gnb / nb : 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double av = a[ch * a_stride], bv = b[ch * b_stride];
        if (ga) ga[ch * a_stride] += static_cast<T>(gd * bv + sa * av);
        if (gb) gb[ch * b_stride] += static_cast<T>(gd * av + sb * bv);
    }
}

}  // namespace detail

// One region vector (C) against every column of a query map (C x h x w).
template <class T>
RegionSimilarityMap<T> similarity_map(const RegionVector<T>& region, const FeatureMap<T>& query,
                                      const SimilarityMetric& metric) {
    const Tensor<T>& r = region.values;
    const Tensor<T>& q = query.values;
    if (q.rank() != 3 || r.rank() != 1 || r.dim(0) != q.dim(0))
        throw ShapeError("similarity_map: region " + shape_str(r.shape()) + " vs query " + shape_str(q.shape()));
    detail::check_finite(r, "similarity_map");
    detail::check_finite(q, "similarity_map");
    const std::size_t c = q.dim(0), h = q.dim(1), w = q.dim(2), n = h * w;
    std::vector<double> qn(n);
    detail::cell_norms(q.data().data(), c, n, qn.data());
    double rn = 0;
    for (T v : r.data()) rn += double(v) * v;
    rn = std::sqrt(rn);
    std::vector<T> out(n);
    std::vector<MetricEval> evals(n);
    for (std::size_t a = 0; a < n; ++a) {
        double dot = 0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += double(r[ch]) * q[ch * n + a];
        evals[a] = eval_metric(metric, dot, rn, qn[a]);
        out[a] = static_cast<T>(evals[a].value);
    }
    auto t = detail::make_result<T>(
        {h, w}, std::move(out), {&r, &q}, "similarity_map",
        [c, n, rn, qn = std::move(qn), evals = std::move(evals)](Node<T>& node) {
            T* gr = detail::input_grad(node, 0);
            T* gq = detail::input_grad(node, 1);
            const T* rv = detail::input_value(node, 0).data();
            const T* qv = detail::input_value(node, 1).data();
            for (std::size_t a = 0; a < n; ++a)
                detail::metric_backward(evals[a], node.grad[a], rv, 1, rn, qv + a, n, qn[a], c, gr,
                                        gq ? gq + a : nullptr);
        });
    return {region.index, std::move(t)};
}

// Batched matching. support: S x C x h x w, query: Q x C x h' x w'.
// Returns pooled region scores S x Q x (h*w); when `maps` is given it also
// receives the raw similarity maps S x Q x (h*w) x (h'*w') (values only).
template <class T>
Tensor<T> match_pairs(const Tensor<T>& support, const Tensor<T>& query, const SimilarityMetric& metric,
                      std::vector<T>* maps = nullptr) {
    if (support.rank() != 4 || query.rank() != 4 || support.dim(1) != query.dim(1))
        throw ShapeError("match_pairs: incompatible support " + shape_str(support.shape()) + " and query " +
                         shape_str(query.shape()));
    detail::check_finite(support, "match_pairs");
    detail::check_finite(query, "match_pairs");
    const std::size_t ns = support.dim(0), nq = query.dim(0), c = support.dim(1);
    const std::size_t rs = support.dim(2) * support.dim(3), rq = query.dim(2) * query.dim(3);
    const T* sv = support.data().data();
    const T* qv = query.data().data();

    std::vector<double> snorm(ns * rs), qnorm(nq * rq);
    for (std::size_t s = 0; s < ns; ++s) detail::cell_norms(sv + s * c * rs, c, rs, snorm.data() + s * rs);
    for (std::size_t q = 0; q < nq; ++q) detail::cell_norms(qv + q * c * rq, c, rq, qnorm.data() + q * rq);

    std::vector<T> scores(ns * nq * rs);
    std::vector<std::uint32_t> arg(ns * nq * rs);
    if (maps) maps->assign(ns * nq * rs * rq, T(0));
    // values are formed in T; norms and the tanimoto guards stay in double
    using Values = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vec = Eigen::Array<T, Eigen::Dynamic, 1>;
    const Vec snt = Eigen::Map<const Eigen::ArrayXd>(snorm.data(), static_cast<long>(snorm.size())).cast<T>();
    const Vec qnt = Eigen::Map<const Eigen::ArrayXd>(qnorm.data(), static_cast<long>(qnorm.size())).cast<T>();
    const T eps = static_cast<T>(metric.eps);
    Values v(rs, rq), den(rs, rq);
    for (std::size_t s = 0; s < ns; ++s) {
        detail::MapConstMat<T> smat(sv + s * c * rs, c, rs);
        const auto sn = snt.segment(static_cast<long>(s * rs), static_cast<long>(rs));
        for (std::size_t q = 0; q < nq; ++q) {
            detail::MapConstMat<T> qmat(qv + q * c * rq, c, rq);
            v.matrix().noalias() = smat.transpose() * qmat;  // dot products
            const auto qn = qnt.segment(static_cast<long>(q * rq), static_cast<long>(rq));
            switch (metric.kind) {
                case Metric::cosine:
                    // dot / max(na*nb, eps) is exactly the guarded cosine
                    den.matrix().noalias() = sn.matrix() * qn.matrix().transpose();
                    v /= den.max(eps);
                    break;
                case Metric::tanimoto:
                    for (std::size_t i = 0; i < rs; ++i)
                        for (std::size_t a = 0; a < rq; ++a)
                            v(i, a) = static_cast<T>(metric_only<Metric::tanimoto>(
                                metric.eps, v(i, a), snorm[s * rs + i], qnorm[q * rq + a]));
                    break;
                case Metric::exp_neg_dist:
                case Metric::inv_one_plus_dist:
                    v = (sn.square().replicate(1, rq) + qn.square().transpose().replicate(rs, 1) - T(2) * v)
                            .max(T(0))
                            .sqrt();
                    if (metric.kind == Metric::exp_neg_dist)
                        v = (-v).exp();
                    else
                        v = T(1) / (T(1) + v);
                    break;
            }
            const std::size_t pair = s * nq + q;
            for (std::size_t i = 0; i < rs; ++i) {
                const T best = v.row(static_cast<long>(i)).maxCoeff();
                const T* row = v.data() + i * rq;
                // first maximum wins ties
                scores[pair * rs + i] = best;
                arg[pair * rs + i] = static_cast<std::uint32_t>(std::find(row, row + rq, best) - row);
            }
            if (maps) std::copy_n(v.data(), rs * rq, maps->begin() + static_cast<long>(pair * rs * rq));
        }
    }
    return detail::make_result<T>(
        {ns, nq, rs}, std::move(scores), {&support, &query}, "match_pairs",
        [ns, nq, c, rs, rq, metric, arg = std::move(arg), snorm = std::move(snorm),
         qnorm = std::move(qnorm)](Node<T>& node) {
            T* gs = detail::input_grad(node, 0);
            T* gq = detail::input_grad(node, 1);
            const T* sv = detail::input_value(node, 0).data();
            const T* qv = detail::input_value(node, 1).data();
            for (std::size_t s = 0; s < ns; ++s)
                for (std::size_t q = 0; q < nq; ++q)
                    for (std::size_t i = 0; i < rs; ++i) {
                        const std::size_t k = (s * nq + q) * rs + i;
                        const double up = node.grad[k];
                        if (up == 0) continue;
                        const std::size_t a = arg[k];
                        const T* av = sv + s * c * rs + i;
                        const T* bv = qv + q * c * rq + a;
                        double dot = 0;
                        for (std::size_t ch = 0; ch < c; ++ch) dot += double(av[ch * rs]) * bv[ch * rq];
                        const auto e = eval_metric(metric, dot, snorm[s * rs + i], qnorm[q * rq + a]);
                        detail::metric_backward(e, up, av, rs, snorm[s * rs + i], bv, rq, qnorm[q * rq + a], c,
                                                gs ? gs + s * c * rs + i : nullptr, gq ? gq + q * c * rq + a : nullptr);
                    }
        });
}

template <class T>
struct MatchResult {
    RegionScores<T> scores;
    std::vector<RegionSimilarityMap<T>> maps;
};

// Single support/query pair: region scores (differentiable) and the h*w
// similarity maps (values) for later visualization.
template <class T>
MatchResult<T> match(const FeatureMap<T>& support, const FeatureMap<T>& query, const SimilarityMetric& metric) {
    const auto& s = support.values;
    const auto& q = query.values;
    if (s.rank() != 3 || q.rank() != 3 || s.dim(0) != q.dim(0))
        throw ShapeError("match: incompatible support " + shape_str(s.shape()) + " and query " + shape_str(q.shape()));
    std::vector<T> raw;
    auto scores = match_pairs(s.reshape({1, s.dim(0), s.dim(1), s.dim(2)}),
                              q.reshape({1, q.dim(0), q.dim(1), q.dim(2)}), metric, &raw);
    const std::size_t rs = s.dim(1) * s.dim(2), rq = q.dim(1) * q.dim(2);
    MatchResult<T> out{{scores.reshape({rs})}, {}};
    out.maps.reserve(rs);
    for (std::size_t i = 0; i < rs; ++i)
        out.maps.push_back({i, Tensor<T>::from({q.dim(1), q.dim(2)},
                                               std::vector<T>(raw.begin() + i * rq, raw.begin() + (i + 1) * rq))});
    return out;
}

}  // namespace rcn
