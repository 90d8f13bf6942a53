#pragma once

// Region weighting heads and the final linear combination s = w . P.
//
//   fixed      every region weighs 1/(h*w)
//   learnable  one shared weight vector, kept positive through softplus
//   meta       per-pair weights from a 1x1-conv network over the channel
//              concatenation [support; query]: (2C -> hidden) and
//              (hidden -> 1), each conv -> batch-norm -> relu

#include <string>

#include "rcn/matcher.hpp"

namespace rcn {

enum class HeadKind { fixed, learnable, meta };

inline std::string to_string(HeadKind h) {
    switch (h) {
        case HeadKind::fixed: return "fixed";
        case HeadKind::learnable: return "learnable";
        case HeadKind::meta: return "meta";
    }
    return "?";
}

inline HeadKind parse_head(const std::string& s) {
    if (s == "fixed") return HeadKind::fixed;
    if (s == "learnable") return HeadKind::learnable;
    if (s == "meta") return HeadKind::meta;
    throw std::invalid_argument("unknown head '" + s + "' (expected fixed|learnable|meta)");
}

template <class T>
struct RegionWeight {
    Tensor<T> values;  // h*w, nonnegative
    HeadKind provenance = HeadKind::fixed;
};

template <class T>
struct SimilarityScore {
    Tensor<T> value;  // 1 element
};

struct MetaLearnerConfig {
    std::size_t feature_channels = 64;  // C; the network sees 2C
    std::size_t hidden = 64;
    // Initial gamma of the final batch norm. With relu(gamma * z), z ~ N(0,1),
    // each weight starts near gamma / sqrt(2 pi) in expectation.
    double output_scale = 1.0;
};

// All (support, query) pairs stacked support-major: row s*Q + q holds
// [support s ; query q] along channels. support S x C x h x w, query Q x C x h x w.
template <class T>
Tensor<T> pair_concat(const Tensor<T>& support, const Tensor<T>& query) {
    if (support.rank() != 4 || query.rank() != 4 || support.dim(1) != query.dim(1) ||
        support.dim(2) != query.dim(2) || support.dim(3) != query.dim(3))
        throw ShapeError("pair_concat: support " + shape_str(support.shape()) + " and query " +
                         shape_str(query.shape()) + " must share C, h, w");
    const std::size_t ns = support.dim(0), nq = query.dim(0);
    const std::size_t plane = support.size() / ns;  // C*h*w
    std::vector<T> v(ns * nq * 2 * plane);
    for (std::size_t s = 0; s < ns; ++s)
        for (std::size_t q = 0; q < nq; ++q) {
            T* dst = v.data() + (s * nq + q) * 2 * plane;
            std::copy_n(support.data().data() + s * plane, plane, dst);
            std::copy_n(query.data().data() + q * plane, plane, dst + plane);
        }
    return detail::make_result<T>(
        {ns * nq, 2 * support.dim(1), support.dim(2), support.dim(3)}, std::move(v), {&support, &query},
        "pair_concat", [ns, nq, plane](Node<T>& out) {
            T* gs = detail::input_grad(out, 0);
            T* gq = detail::input_grad(out, 1);
            for (std::size_t s = 0; s < ns; ++s)
                for (std::size_t q = 0; q < nq; ++q) {
                    const T* src = out.grad.data() + (s * nq + q) * 2 * plane;
                    if (gs)
                        for (std::size_t i = 0; i < plane; ++i) gs[s * plane + i] += src[i];
                    if (gq)
                        for (std::size_t i = 0; i < plane; ++i) gq[q * plane + i] += src[plane + i];
                }
        });
}

template <class T>
class MetaLearner {
   public:
    MetaLearner(const MetaLearnerConfig& config, ParamStore<T>& store, std::mt19937_64& rng,
                const std::string& prefix = "meta")
        : config_(config) {
        const std::size_t cin = 2 * config.feature_channels, hid = config.hidden;
        k1_ = store.add(prefix + ".block0.conv.weight", he_normal<T>({hid, cin, 1, 1}, cin, rng));
        b1_ = store.add(prefix + ".block0.conv.bias", Tensor<T>::zeros({hid}));
        g1_ = store.add(prefix + ".block0.bn.weight", Tensor<T>({hid}, T(1)));
        be1_ = store.add(prefix + ".block0.bn.bias", Tensor<T>::zeros({hid}));
        s1_.running_mean = store.add(prefix + ".block0.bn.running_mean", Tensor<T>::zeros({hid}), false);
        s1_.running_var = store.add(prefix + ".block0.bn.running_var", Tensor<T>({hid}, T(1)), false);
        k2_ = store.add(prefix + ".block1.conv.weight", he_normal<T>({1, hid, 1, 1}, hid, rng));
        b2_ = store.add(prefix + ".block1.conv.bias", Tensor<T>::zeros({1}));
        g2_ = store.add(prefix + ".block1.bn.weight", Tensor<T>({1}, static_cast<T>(config.output_scale)));
        be2_ = store.add(prefix + ".block1.bn.bias", Tensor<T>::zeros({1}));
        s2_.running_mean = store.add(prefix + ".block1.bn.running_mean", Tensor<T>::zeros({1}), false);
        s2_.running_var = store.add(prefix + ".block1.bn.running_var", Tensor<T>({1}, T(1)), false);
    }

    const MetaLearnerConfig& config() const { return config_; }

    // pairs: P x 2C x h x w -> weights P x (h*w).
    Tensor<T> forward(const Tensor<T>& pairs, bool training) {
        if (pairs.rank() != 4 || pairs.dim(1) != 2 * config_.feature_channels)
            throw ShapeError("meta learner: expected P x " + std::to_string(2 * config_.feature_channels) +
                             " x h x w input, got " + shape_str(pairs.shape()));
        auto x = relu(batch_norm2d(conv2d(pairs, k1_, b1_), g1_, be1_, s1_, training));
        x = relu(batch_norm2d(conv2d(x, k2_, b2_), g2_, be2_, s2_, training));
        return x.reshape({pairs.dim(0), pairs.dim(2) * pairs.dim(3)});
    }

    Tensor<T> forward(const Tensor<T>& support, const Tensor<T>& query, bool training) {
        return forward(pair_concat(support, query), training);
    }

    // Parameter handles, exposed for tests and oracles.
    const Tensor<T>& conv1_weight() const { return k1_; }
    const Tensor<T>& conv1_bias() const { return b1_; }
    const Tensor<T>& conv2_weight() const { return k2_; }
    const Tensor<T>& conv2_bias() const { return b2_; }
    const Tensor<T>& bn1_gamma() const { return g1_; }
    const Tensor<T>& bn1_beta() const { return be1_; }
    const Tensor<T>& bn2_gamma() const { return g2_; }
    const Tensor<T>& bn2_beta() const { return be2_; }
    const BatchNormStats<T>& bn1_stats() const { return s1_; }
    const BatchNormStats<T>& bn2_stats() const { return s2_; }

   private:
    MetaLearnerConfig config_;
    Tensor<T> k1_, b1_, g1_, be1_, k2_, b2_, g2_, be2_;
    BatchNormStats<T> s1_, s2_;
};

// Per-pair weight from the meta learner (inference-mode normalization).
template <class T>
RegionWeight<T> meta_weight(const FeatureMap<T>& support, const FeatureMap<T>& query, MetaLearner<T>& learner,
                            bool training = false) {
    const auto& s = support.values;
    const auto& q = query.values;
    if (s.rank() != 3 || q.rank() != 3 || s.shape() != q.shape())
        throw ShapeError("meta_weight: support " + shape_str(s.shape()) + " and query " + shape_str(q.shape()) +
                         " must share C, h, w");
    if (s.dim(0) != learner.config().feature_channels)
        throw ShapeError("meta_weight: maps have " + std::to_string(s.dim(0)) + " channels, learner expects " +
                         std::to_string(learner.config().feature_channels));
    auto w = learner.forward(s.reshape({1, s.dim(0), s.dim(1), s.dim(2)}), q.reshape({1, q.dim(0), q.dim(1), q.dim(2)}),
                             training);
    return {w.reshape({s.dim(1) * s.dim(2)}), HeadKind::meta};
}

template <class T>
RegionWeight<T> fixed_weight(std::size_t h, std::size_t w) {
    if (h < 1 || w < 1) throw std::invalid_argument("fixed_weight: h and w must be >= 1");
    return {Tensor<T>({h * w}, T(1) / static_cast<T>(h * w)), HeadKind::fixed};
}

template <class T>
RegionWeight<T> learnable_weight(const Tensor<T>& raw) {
    if (raw.rank() != 1) throw ShapeError("learnable_weight: raw params must be a vector, got " + shape_str(raw.shape()));
    return {softplus(raw), HeadKind::learnable};
}

// Inner product along the last axis. scores: ... x n; weight: same shape or n.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& weight, const Tensor<T>& scores) {
    detail::require_min_rank(scores.shape(), 1, "combine");
    const std::size_t n = scores.shape().back();
    const bool shared = weight.rank() == 1 && weight.dim(0) == n;
    if (!shared && weight.shape() != scores.shape())
        throw ShapeError("combine: weight " + shape_str(weight.shape()) + " does not fit scores " +
                         shape_str(scores.shape()));
    detail::check_finite(weight, "combine");
    detail::check_finite(scores, "combine");
    const std::size_t rows = scores.size() / n;
    std::vector<T> v(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* w = weight.data().data() + (shared ? 0 : r * n);
        const T* p = scores.data().data() + r * n;
        T acc = 0;
        for (std::size_t i = 0; i < n; ++i) acc += w[i] * p[i];
        v[r] = acc;
    }
    Shape shape(scores.shape().begin(), scores.shape().end() - 1);
    if (shape.empty()) shape = {1};
    return detail::make_result<T>(std::move(shape), std::move(v), {&weight, &scores}, "combine",
                                  [rows, n, shared](Node<T>& out) {
                                      T* gw = detail::input_grad(out, 0);
                                      T* gp = detail::input_grad(out, 1);
                                      const T* wv = detail::input_value(out, 0).data();
                                      const T* pv = detail::input_value(out, 1).data();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const T go = out.grad[r];
                                          const std::size_t wo = shared ? 0 : r * n;
                                          for (std::size_t i = 0; i < n; ++i) {
                                              if (gw) gw[wo + i] += go * pv[r * n + i];
                                              if (gp) gp[r * n + i] += go * wv[wo + i];
                                          }
                                      }
                                  });
}

template <class T>
SimilarityScore<T> combine(const RegionWeight<T>& weight, const RegionScores<T>& scores) {
    if (weight.values.size() != scores.values.size())
        throw ShapeError("combine: weight has " + std::to_string(weight.values.size()) + " entries, scores have " +
                         std::to_string(scores.values.size()));
    return {weighted_sum(weight.values, scores.values)};
}

// Per-region contributions w_i * P_i; they sum to the combined score.
template <class T>
std::vector<T> contributions(const RegionWeight<T>& weight, const RegionScores<T>& scores) {
    std::vector<T> out(scores.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = weight.values[i] * scores.values[i];
    return out;
}

}  // namespace rcn
