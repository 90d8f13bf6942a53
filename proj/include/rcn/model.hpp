#pragma once

// The full region comparison model: backbone -> region matcher -> region
// weighting head -> s = w . P for every (support, query) pair of an episode.

#include <cmath>
#include <numbers>
#include <optional>

#include "rcn/episodes.hpp"
#include "rcn/explainer.hpp"

namespace rcn {

// Parameter-free wrapper around match_pairs; it owns no trainable state.
template <class T>
class RegionMatcher {
   public:
    explicit RegionMatcher(SimilarityMetric metric = {}) : metric_(metric) {}
    const SimilarityMetric& metric() const { return metric_; }
    std::size_t parameter_count() const { return 0; }

    Tensor<T> operator()(const Tensor<T>& support, const Tensor<T>& query, std::vector<T>* maps = nullptr) const {
        return match_pairs(support, query, metric_, maps);
    }

   private:
    SimilarityMetric metric_;
};

enum class ShotAggregation { mean, max };

struct ModelConfig {
    BackboneConfig backbone;
    HeadKind head = HeadKind::meta;
    SimilarityMetric metric;
    std::size_t meta_hidden = 64;
    ShotAggregation aggregation = ShotAggregation::mean;
    std::uint64_t seed = 1;
};

template <class T>
struct PairOutput {
    Tensor<T> similarity;     // S x Q
    Tensor<T> region_scores;  // S x Q x (h*w)
    Tensor<T> weights;        // S x Q x (h*w), or h*w for the shared heads
};

template <class T>
class RcnModel {
   public:
    explicit RcnModel(const ModelConfig& config)
        : config_(config),
          init_rng_(config.seed),
          backbone_(config.backbone, store_, init_rng_),
          matcher_(config.metric) {
        const std::size_t regions = config.backbone.out_h * config.backbone.out_w;
        if (config.head == HeadKind::meta) {
            // expected weight sum starts at 1, so initial scores live on the scale of the targets
            const double scale = std::sqrt(2 * std::numbers::pi) / static_cast<double>(regions);
            meta_.emplace(MetaLearnerConfig{config.backbone.channels, config.meta_hidden, scale}, store_, init_rng_);
        } else if (config.head == HeadKind::learnable) {
            // softplus(raw) starts at the uniform weight 1/(h*w)
            const T init = static_cast<T>(std::log(std::expm1(1.0 / static_cast<double>(regions))));
            learnable_raw_ = store_.add("head.raw_weight", Tensor<T>({regions}, init));
        }
    }

    RcnModel(const RcnModel&) = delete;
    RcnModel& operator=(const RcnModel&) = delete;

    const ModelConfig& config() const { return config_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    Backbone<T>& backbone() { return backbone_; }
    const RegionMatcher<T>& matcher() const { return matcher_; }
    MetaLearner<T>* meta_learner() { return meta_ ? &*meta_ : nullptr; }
    std::size_t regions() const { return config_.backbone.out_h * config_.backbone.out_w; }

    Tensor<T> features(const Tensor<T>& images, bool training) { return backbone_.forward(images, training); }

    // Region weights for every pair, shape S x Q x (h*w) or (h*w).
    Tensor<T> region_weights(const Tensor<T>& support_feats, const Tensor<T>& query_feats, bool training) {
        switch (config_.head) {
            case HeadKind::fixed: return fixed_weight<T>(config_.backbone.out_h, config_.backbone.out_w).values;
            case HeadKind::learnable: return learnable_weight(learnable_raw_).values;
            case HeadKind::meta: {
                auto w = meta_->forward(support_feats, query_feats, training);
                return w.reshape({support_feats.dim(0), query_feats.dim(0), regions()});
            }
        }
        throw std::logic_error("unreachable head kind");
    }

    PairOutput<T> score_pairs(const Tensor<T>& support_feats, const Tensor<T>& query_feats, bool training,
                              std::vector<T>* maps = nullptr) {
        PairOutput<T> out;
        out.region_scores = matcher_(support_feats, query_feats, maps);
        out.weights = region_weights(support_feats, query_feats, training);
        out.similarity = weighted_sum(out.weights, out.region_scores);
        return out;
    }

    // Pair similarities S x Q for an episode. Query images optionally augmented.
    Tensor<T> episode_scores(const LabeledDataset& data, const Episode& ep, bool training,
                             const AugmentPolicy* augment = nullptr, std::uint64_t augment_seed = 0) {
        auto support = stack_images<T>(data, ep.support);
        auto query = stack_images<T>(data, ep.query, augment, augment_seed);
        // one backbone pass so batch statistics cover the whole episode
        const std::size_t ns = ep.support.size(), nq = ep.query.size();
        auto all = concat_rows(support, query);
        auto feats = features(all, training);
        return score_pairs(slice_rows(feats, 0, ns), slice_rows(feats, ns, ns + nq), training).similarity;
    }

   private:
    static Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
        std::vector<T> v(a.data().begin(), a.data().end());
        v.insert(v.end(), b.data().begin(), b.data().end());
        Shape s = a.shape();
        s[0] += b.dim(0);
        return Tensor<T>::from(std::move(s), std::move(v));
    }

    ModelConfig config_;
    ParamStore<T> store_;
    std::mt19937_64 init_rng_;
    Backbone<T> backbone_;
    RegionMatcher<T> matcher_;
    std::optional<MetaLearner<T>> meta_;
    Tensor<T> learnable_raw_;
};

}  // namespace rcn
