#pragma once

// Episodic MSE training, Adam with plateau halving, K-shot aggregation,
// and the episode-averaged evaluation protocol with 95% intervals.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <thread>

#include <json.hpp>

#include "rcn/model.hpp"

namespace rcn {

// ---- loss -----------------------------------------------------------------------

// 1 where support and query share the episode label, support-major S x Q.
inline std::vector<double> pair_targets(const Episode& ep) {
    std::vector<double> t(ep.support.size() * ep.query.size());
    for (std::size_t s = 0; s < ep.support.size(); ++s)
        for (std::size_t q = 0; q < ep.query.size(); ++q)
            t[s * ep.query.size() + q] = ep.support[s].label == ep.query[q].label ? 1.0 : 0.0;
    return t;
}

// Sum over all (support, query) pairs of (s - 1[same class])^2.
template <class T>
Tensor<T> mse_pair_loss(const Tensor<T>& similarity, const Episode& ep) {
    const auto t = pair_targets(ep);
    if (similarity.size() != t.size())
        throw ShapeError("episode loss: " + std::to_string(similarity.size()) + " scores for " +
                         std::to_string(t.size()) + " pairs");
    std::vector<T> tv(t.begin(), t.end());
    return sum(square(sub(similarity, Tensor<T>::from(similarity.shape(), std::move(tv)))));
}

template <class T>
Tensor<T> episode_loss(RcnModel<T>& model, const LabeledDataset& data, const Episode& ep, bool training = true,
                       const AugmentPolicy* augment = nullptr, std::uint64_t augment_seed = 0) {
    return mse_pair_loss(model.episode_scores(data, ep, training, augment, augment_seed), ep);
}

// ---- classification ----------------------------------------------------------------

struct Classification {
    std::size_t label = 0;
    std::vector<double> class_scores;  // per episode label
};

// Class score = mean (or max) of the pair scores against that class's
// support samples; prediction = argmax with ties to the lowest label.
inline Classification classify(std::span<const double> pair_scores, const std::vector<EpisodeItem>& support,
                               std::size_t way, ShotAggregation agg = ShotAggregation::mean) {
    if (pair_scores.size() != support.size()) throw ShapeError("classify: one score per support sample required");
    Classification out;
    out.class_scores.assign(way, agg == ShotAggregation::mean ? 0.0 : -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> count(way, 0);
    for (std::size_t s = 0; s < support.size(); ++s) {
        const std::size_t c = support[s].label;
        if (agg == ShotAggregation::mean)
            out.class_scores[c] += pair_scores[s];
        else
            out.class_scores[c] = std::max(out.class_scores[c], pair_scores[s]);
        ++count[c];
    }
    if (agg == ShotAggregation::mean)
        for (std::size_t c = 0; c < way; ++c)
            if (count[c]) out.class_scores[c] /= static_cast<double>(count[c]);
    for (std::size_t c = 1; c < way; ++c)
        if (out.class_scores[c] > out.class_scores[out.label]) out.label = c;
    return out;
}

// Fraction of correctly classified queries given S x Q pair scores.
inline double episode_accuracy(std::span<const double> scores, const Episode& ep,
                               ShotAggregation agg = ShotAggregation::mean) {
    const std::size_t ns = ep.support.size(), nq = ep.query.size();
    if (scores.size() != ns * nq) throw ShapeError("episode_accuracy: score matrix size mismatch");
    std::size_t correct = 0;
    std::vector<double> col(ns);
    for (std::size_t q = 0; q < nq; ++q) {
        for (std::size_t s = 0; s < ns; ++s) col[s] = scores[s * nq + q];
        if (classify(col, ep.support, ep.way, agg).label == ep.query[q].label) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(nq);
}

// ---- evaluation ----------------------------------------------------------------------

struct EvalReport {
    double mean = 0;        // percent
    double half_width = 0;  // percent, 95% interval
    std::vector<double> per_episode;  // fractions in [0,1]

    std::string formatted() const {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.2f ± %.2f", mean, half_width);
        return buf;
    }

    nlohmann::json to_json() const {
        return {{"mean_accuracy", mean}, {"ci95_half_width", half_width}, {"episodes", per_episode.size()},
                {"per_episode", per_episode}};
    }
};

// half-width = 1.96 * stdev / sqrt(n), population standard deviation.
inline EvalReport make_report(std::vector<double> accuracies) {
    EvalReport r;
    const double n = static_cast<double>(accuracies.size());
    if (accuracies.empty()) return r;
    // deviations are taken from the first entry so a constant list has exactly zero spread
    const double ref = accuracies.front();
    double md = 0;
    for (double a : accuracies) md += a - ref;
    md /= n;
    double ss = 0;
    for (double a : accuracies) ss += (a - ref - md) * (a - ref - md);
    const double sd = std::sqrt(ss / n);
    r.mean = 100.0 * (ref + md);
    r.half_width = 100.0 * 1.96 * sd / std::sqrt(n);
    r.per_episode = std::move(accuracies);
    return r;
}

// Scores one episode: returns S x Q pair scores (support-major).
using EpisodeScorer = std::function<std::vector<double>(const Episode&)>;

struct EvalProtocol {
    Split split = Split::test;
    std::size_t episodes = 600;
    std::size_t way = 5, shot = 1, queries = 15;
    std::uint64_t seed = 2024;
    std::size_t threads = 1;
    ShotAggregation aggregation = ShotAggregation::mean;
};

// Episode e is drawn from its own derived stream, so results do not depend
// on the thread count. `make_scorer` is called once per worker thread.
inline EvalReport evaluate_with(const std::function<EpisodeScorer()>& make_scorer, const LabeledDataset& data,
                                const EvalProtocol& p) {
    if (data.classes_in(p.split).empty()) throw EpisodeError("evaluate: split '" + to_string(p.split) + "' is empty");
    std::vector<double> acc(p.episodes);
    auto work = [&](std::size_t begin, std::size_t end) {
        auto scorer = make_scorer();
        for (std::size_t e = begin; e < end; ++e) {
            std::mt19937_64 rng(derive_seed(p.seed, e));
            const auto ep = sample_episode(data, p.split, p.way, p.shot, p.queries, rng);
            acc[e] = episode_accuracy(scorer(ep), ep, p.aggregation);
        }
    };
    const std::size_t threads = std::max<std::size_t>(1, std::min(p.threads, p.episodes));
    if (threads == 1) {
        work(0, p.episodes);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    work(p.episodes * t / threads, p.episodes * (t + 1) / threads);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    return make_report(std::move(acc));
}

template <class T>
EpisodeScorer model_scorer(RcnModel<T>& model, const LabeledDataset& data) {
    return [&model, &data](const Episode& ep) {
        NoGradGuard guard;
        const auto s = model.episode_scores(data, ep, false);
        return std::vector<double>(s.data().begin(), s.data().end());
    };
}

template <class T>
EvalReport evaluate(RcnModel<T>& model, const LabeledDataset& data, const EvalProtocol& p) {
    EvalProtocol q = p;
    q.aggregation = model.config().aggregation;
    return evaluate_with([&] { return model_scorer(model, data); }, data, q);
}

// ---- optimization ---------------------------------------------------------------------

template <class T>
class Adam {
   public:
    Adam(std::vector<Tensor<T>> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& p : params_) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    std::size_t steps() const { return t_; }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p.has_grad()) continue;
            const auto g = p.grad();
            auto w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g[i];
                v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g[i] * g[i];
                const double update = lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_);
                if (update != 0.0) w[i] = static_cast<T>(w[i] - update);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

   private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
};

// Halves the learning rate after `patience` consecutive checks without an
// improvement of the monitored value.
class PlateauSchedule {
   public:
    PlateauSchedule(double factor = 0.5, std::size_t patience = 3) : factor_(factor), patience_(patience) {}

    // Returns true when the value is a new best.
    bool observe(double value, double& lr) {
        if (!seen_ || value > best_) {
            best_ = value;
            seen_ = true;
            stale_ = 0;
            return true;
        }
        if (++stale_ >= patience_) {
            lr *= factor_;
            ++halvings_;
            stale_ = 0;
        }
        return false;
    }

    std::size_t halvings() const { return halvings_; }
    double best() const { return best_; }

   private:
    double factor_;
    std::size_t patience_;
    double best_ = 0;
    bool seen_ = false;
    std::size_t stale_ = 0;
    std::size_t halvings_ = 0;
};

// ---- training ---------------------------------------------------------------------------

struct TrainConfig {
    double learning_rate = 1e-3;
    double plateau_factor = 0.5;
    std::size_t plateau_patience = 3;
    std::size_t max_halvings = 6;
    std::size_t iterations = 20;
    std::size_t episodes_per_iteration = 500;
    std::size_t val_episodes = 600;
    std::size_t way = 5, shot = 1, queries = 15;
    std::size_t val_queries = 15;
    bool augment = true;
    AugmentPolicy augment_policy;
    double max_seconds = 0;  // wall-clock cap, 0 = none
    std::uint64_t seed = 1;
    std::size_t threads = 1;
};

struct IterationRecord {
    std::size_t iteration = 0;
    double train_loss = 0;
    double val_accuracy = 0;
    double val_half_width = 0;
    double learning_rate = 0;
    double seconds = 0;
    bool best = false;

    nlohmann::json to_json() const {
        return {{"iteration", iteration},   {"train_loss", train_loss}, {"val_accuracy", val_accuracy},
                {"val_ci95", val_half_width}, {"learning_rate", learning_rate}, {"seconds", seconds},
                {"best", best}};
    }
};

struct TrainResult {
    std::vector<IterationRecord> log;
    double best_val_accuracy = 0;
    bool diverged = false;
    std::string stop_reason;
};

class DivergenceError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// One Adam step on one episode; returns the loss value.
template <class T>
double train_step(RcnModel<T>& model, Adam<T>& opt, const LabeledDataset& data, const Episode& ep,
                  const AugmentPolicy* augment, std::uint64_t augment_seed) {
    opt.zero_grad();
    auto loss = episode_loss(model, data, ep, true, augment, augment_seed);
    const double value = loss.item();
    if (!std::isfinite(value)) throw DivergenceError("non-finite training loss");
    loss.backward();
    opt.step();
    // relu and max selections can swallow NaN, so check the parameters themselves
    for (const auto& p : model.params().trainable())
        for (T v : p.data())
            if (!std::isfinite(v)) throw DivergenceError("non-finite parameter after update");
    return value;
}

// Meta-trains in iterations of `episodes_per_iteration` episodes, validating
// after each; leaves the best-validation parameters in the model. `on_iteration`
// sees every log record as it is produced.
template <class T>
TrainResult train(RcnModel<T>& model, const LabeledDataset& data, const TrainConfig& cfg,
                  const std::function<void(const IterationRecord&)>& on_iteration = {}) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

    TrainResult result;
    Adam<T> opt(model.params().trainable(), cfg.learning_rate);
    PlateauSchedule schedule(cfg.plateau_factor, cfg.plateau_patience);
    auto best = model.params().snapshot();
    double lr = cfg.learning_rate;
    const AugmentPolicy* augment = cfg.augment ? &cfg.augment_policy : nullptr;

    EvalProtocol val;
    val.split = Split::val;
    val.episodes = cfg.val_episodes;
    // small validation splits cannot host a full N-way episode; use what exists
    val.way = std::min(cfg.way, data.classes_in(Split::val).size());
    val.shot = cfg.shot;
    val.queries = cfg.val_queries;
    val.seed = derive_seed(cfg.seed, 0xFA11);
    val.threads = cfg.threads;

    std::size_t episode_counter = 0;
    for (std::size_t it = 1; it <= cfg.iterations; ++it) {
        opt.set_learning_rate(lr);
        double loss_sum = 0;
        std::size_t done = 0;
        try {
            for (std::size_t e = 0; e < cfg.episodes_per_iteration; ++e, ++episode_counter) {
                std::mt19937_64 rng(derive_seed(cfg.seed, episode_counter));
                const auto ep = sample_episode(data, Split::train, cfg.way, cfg.shot, cfg.queries, rng);
                loss_sum += train_step(model, opt, data, ep, augment, derive_seed(cfg.seed ^ 0xA06, episode_counter));
                ++done;
                if (cfg.max_seconds > 0 && elapsed() > cfg.max_seconds) break;
            }
        } catch (const DivergenceError&) {
            model.params().restore(best);
            result.diverged = true;
            result.stop_reason = "diverged";
            return result;
        }
        IterationRecord rec;
        rec.iteration = it;
        rec.train_loss = done ? loss_sum / static_cast<double>(done) : 0.0;
        rec.learning_rate = lr;
        if (cfg.val_episodes > 0 && val.way >= 2) {
            const auto report = evaluate(model, data, val);
            rec.val_accuracy = report.mean;
            rec.val_half_width = report.half_width;
        }
        rec.best = schedule.observe(rec.val_accuracy, lr);
        if (rec.best) best = model.params().snapshot();
        rec.seconds = elapsed();
        result.log.push_back(rec);
        if (on_iteration) on_iteration(rec);
        if (schedule.halvings() >= cfg.max_halvings) {
            result.stop_reason = "learning rate halved " + std::to_string(cfg.max_halvings) + " times";
            break;
        }
        if (cfg.max_seconds > 0 && elapsed() > cfg.max_seconds) {
            result.stop_reason = "time budget reached";
            break;
        }
    }
    if (result.stop_reason.empty()) result.stop_reason = "iteration cap";
    model.params().restore(best);
    result.best_val_accuracy = schedule.best();
    return result;
}

}  // namespace rcn
