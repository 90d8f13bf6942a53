#include <gtest/gtest.h>

#include "support.hpp"

using namespace rcn;
using rcn::testing::random_tensor;

namespace {

const LabeledDataset& small_data() {
    static const LabeledDataset data = [] {
        SyntheticSpec spec;
        spec.classes = 10;
        spec.images_per_class = 12;
        spec.image_size = 16;
        spec.part_size = 6;
        return generate_synthetic(spec);
    }();
    return data;
}

ModelConfig tiny_config(HeadKind head = HeadKind::meta) {
    ModelConfig cfg;
    cfg.backbone = BackboneConfig::preset("conv4-32", 16);
    cfg.backbone.channels = 4;
    cfg.backbone.out_h = cfg.backbone.out_w = 3;
    cfg.head = head;
    cfg.meta_hidden = 4;
    cfg.seed = 3;
    return cfg;
}

Episode make_episode(std::size_t way, std::size_t shot, std::size_t queries) {
    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.queries = queries;
    for (std::size_t l = 0; l < way; ++l) {
        for (std::size_t k = 0; k < shot; ++k) ep.support.push_back({l * 100 + k, l});
        for (std::size_t b = 0; b < queries; ++b) ep.query.push_back({l * 100 + 50 + b, l});
    }
    return ep;
}

}  // namespace

TEST(EpisodeLoss, PerfectRegressorIsZero) {
    auto ep = make_episode(3, 2, 2);
    const auto t = pair_targets(ep);
    EXPECT_EQ(mse_pair_loss(Tensor<double>::from({6, 6}, t), ep).item(), 0.0);
}

TEST(EpisodeLoss, ZeroScoresCountPositivePairs) {
    auto ep = make_episode(2, 1, 1);
    EXPECT_EQ(mse_pair_loss(Tensor<double>({2, 2}, 0.0), ep).item(), 2.0);
}

TEST(EpisodeLoss, MatchesPairLoopOracle) {
    const auto& data = small_data();
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto cfg = tiny_config(seed % 3 == 0 ? HeadKind::fixed : seed % 3 == 1 ? HeadKind::learnable : HeadKind::meta);
        cfg.seed = seed;
        cfg.metric.kind = static_cast<Metric>(seed % 4);
        RcnModel<double> model(cfg);
        std::mt19937_64 rng(seed);
        auto ep = sample_episode(data, Split::train, 2 + seed % 3, 1 + seed % 2, 2, rng);
        const double loss = episode_loss(model, data, ep, false).item();

        // every pair rebuilt on its own from per-image features
        double oracle = 0;
        for (const auto& s : ep.support) {
            auto fs = model.backbone().extract(stack_images<double>(data, {s}).reshape({3, 16, 16}));
            for (const auto& q : ep.query) {
                auto fq = model.backbone().extract(stack_images<double>(data, {q}).reshape({3, 16, 16}));
                auto scores = match(fs, fq, cfg.metric).scores;
                RegionWeight<double> w;
                if (cfg.head == HeadKind::fixed)
                    w = fixed_weight<double>(3, 3);
                else if (cfg.head == HeadKind::learnable)
                    w = learnable_weight(model.params().get("head.raw_weight"));
                else
                    w = meta_weight(fs, fq, *model.meta_learner());
                double sim = 0;
                for (std::size_t i = 0; i < 9; ++i) sim += w.values[i] * scores.values[i];
                const double target = s.label == q.label ? 1.0 : 0.0;
                oracle += (sim - target) * (sim - target);
            }
        }
        EXPECT_NEAR(loss, oracle, 1e-6 * std::max(1.0, std::abs(oracle))) << "seed " << seed;
    }
}

TEST(EpisodeLoss, GradientReachesBackboneAndMetaButMatcherHasNoParams) {
    const auto& data = small_data();
    RcnModel<double> model(tiny_config());
    std::mt19937_64 rng(4);
    auto ep = sample_episode(data, Split::train, 3, 1, 2, rng);
    episode_loss(model, data, ep).backward();
    auto nonzero = [&](const std::string& name) {
        const auto& t = model.params().get(name);
        if (!t.has_grad()) return false;
        for (double g : t.grad())
            if (g != 0) return true;
        return false;
    };
    EXPECT_TRUE(nonzero("backbone.block0.conv.weight"));
    EXPECT_TRUE(nonzero("backbone.block3.bn.weight"));
    EXPECT_TRUE(nonzero("meta.block0.conv.weight"));
    EXPECT_EQ(model.matcher().parameter_count(), 0u);
    EXPECT_EQ(model.params().trainable_count("matcher"), 0u);
}

TEST(Classify, SingleShotIsThePairScore) {
    auto ep = make_episode(3, 1, 1);
    const std::vector<double> scores{0.2, 0.7, 0.1};
    auto c = classify(scores, ep.support, 3);
    EXPECT_EQ(c.class_scores, scores);
    EXPECT_EQ(c.label, 1u);
}

TEST(Classify, MeanOverShots) {
    auto ep = make_episode(2, 2, 1);
    auto c = classify(std::vector<double>{0.2, 0.6, 0.1, 0.3}, ep.support, 2);
    EXPECT_NEAR(c.class_scores[0], 0.4, 1e-15);
    EXPECT_NEAR(c.class_scores[1], 0.2, 1e-15);
    EXPECT_EQ(c.label, 0u);
    EXPECT_EQ(classify(std::vector<double>{0.2, 0.6, 0.1, 0.7}, ep.support, 2, ShotAggregation::max).label, 1u);
}

TEST(Classify, TiesGoToLowestLabelAndScalingKeepsPrediction) {
    auto ep = make_episode(4, 1, 1);
    EXPECT_EQ(classify(std::vector<double>{0.1, 0.5, 0.5, 0.2}, ep.support, 4).label, 1u);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1, 1), pos(0.01, 50);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(4);
        for (auto& v : s) v = u(rng);
        auto scaled = s;
        const double k = pos(rng);
        for (auto& v : scaled) v *= k;
        EXPECT_EQ(classify(s, ep.support, 4).label, classify(scaled, ep.support, 4).label);
    }
}

TEST(Report, HalfWidthFormula) {
    auto r = make_report({1.0, 0.5, 0.75, 0.25});
    const double mean = 0.625, var = (0.140625 + 0.015625 + 0.015625 + 0.140625) / 4;
    EXPECT_DOUBLE_EQ(r.mean, 100 * mean);
    EXPECT_DOUBLE_EQ(r.half_width, 100 * 1.96 * std::sqrt(var) / 2.0);
    EXPECT_EQ(make_report(std::vector<double>(10, 0.8)).half_width, 0.0);
}

TEST(Evaluate, PerfectOracleIsHundredPercent) {
    const auto& data = small_data();
    EvalProtocol p;
    p.split = Split::train;
    p.episodes = 50;
    p.queries = 5;
    auto report = evaluate_with(
        [] {
            return [](const Episode& ep) {
                const auto t = pair_targets(ep);
                return std::vector<double>(t.begin(), t.end());
            };
        },
        data, p);
    EXPECT_EQ(report.formatted(), "100.00 ± 0.00");
}

TEST(Evaluate, UniformRandomScorerIsNearChance) {
    const auto& data = small_data();
    EvalProtocol p;
    p.split = Split::train;
    p.episodes = 600;
    p.queries = 5;
    std::uint64_t stream = 0;
    auto report = evaluate_with(
        [&] {
            return [&](const Episode& ep) {
                std::mt19937_64 rng(derive_seed(99, stream++));
                std::uniform_real_distribution<double> u(0, 1);
                std::vector<double> s(ep.support.size() * ep.query.size());
                for (auto& v : s) v = u(rng);
                return s;
            };
        },
        data, p);
    EXPECT_NEAR(report.mean, 20.0, 3.0);
}

TEST(Evaluate, DeterministicAndThreadCountIndependent) {
    const auto& data = small_data();
    RcnModel<float> model(tiny_config());
    EvalProtocol p;
    p.split = Split::train;
    p.episodes = 12;
    p.queries = 3;
    const auto a = evaluate(model, data, p);
    const auto b = evaluate(model, data, p);
    p.threads = 3;
    const auto c = evaluate(model, data, p);
    EXPECT_EQ(a.per_episode, b.per_episode);
    EXPECT_EQ(a.per_episode, c.per_episode);
}

TEST(Adam, ZeroLearningRateLeavesParamsBitIdentical) {
    const auto& data = small_data();
    RcnModel<float> model(tiny_config());
    const auto before = model.params().snapshot();
    Adam<float> opt(model.params().trainable(), 0.0);
    std::mt19937_64 rng(1);
    auto ep = sample_episode(data, Split::train, 3, 1, 2, rng);
    train_step(model, opt, data, ep, nullptr, 0);
    // running statistics move in training mode; trainable values must not
    const auto after = model.params().snapshot();
    const auto& entries = model.params().entries();
    for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].trainable) {
            EXPECT_EQ(before[i], after[i]) << entries[i].name;
        }
}

TEST(Adam, FirstStepMovesByLearningRate) {
    auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
    Adam<double> opt({p}, 0.1);
    sum(mul(p, Tensor<double>::from({3}, {3.0, -0.5, 0.0}))).backward();
    opt.step();
    // bias-corrected first step is lr * sign(g) for nonzero g
    EXPECT_NEAR(p[0], 0.9, 1e-8);
    EXPECT_NEAR(p[1], -1.9, 1e-8);
    EXPECT_EQ(p[2], 0.5);
}

TEST(Plateau, HalvesAfterPatienceAndIsMonotone) {
    PlateauSchedule sched(0.5, 3);
    double lr = 1e-3, prev = lr;
    const std::vector<double> vals{50, 52, 51, 51, 51, 53, 40, 40, 40, 40, 40, 40};
    std::vector<double> lrs;
    for (double v : vals) {
        sched.observe(v, lr);
        EXPECT_LE(lr, prev);
        prev = lr;
        lrs.push_back(lr);
    }
    EXPECT_EQ(lrs[3], 1e-3);
    EXPECT_EQ(lrs[4], 5e-4);
    EXPECT_EQ(lrs[8], 2.5e-4);
    EXPECT_EQ(lrs[11], 1.25e-4);
    EXPECT_EQ(sched.halvings(), 3u);
    EXPECT_EQ(sched.best(), 53);
}

TEST(Train, ZeroIterationsLeavesInitialParams) {
    RcnModel<float> model(tiny_config());
    const auto before = model.params().snapshot();
    TrainConfig cfg;
    cfg.iterations = 0;
    auto res = train(model, small_data(), cfg);
    EXPECT_TRUE(res.log.empty());
    EXPECT_EQ(model.params().snapshot(), before);
}

TEST(Train, StopsAfterConfiguredHalvings) {
    RcnModel<float> model(tiny_config());
    TrainConfig cfg;
    cfg.learning_rate = 0;  // validation never improves after the first check
    cfg.iterations = 50;
    cfg.episodes_per_iteration = 1;
    cfg.val_episodes = 4;
    cfg.way = 2;
    cfg.queries = cfg.val_queries = 2;
    cfg.plateau_patience = 1;
    cfg.max_halvings = 2;
    auto res = train(model, small_data(), cfg);
    EXPECT_EQ(res.log.size(), 3u);
    EXPECT_NE(res.stop_reason.find("halved 2"), std::string::npos);
    for (std::size_t i = 1; i < res.log.size(); ++i) EXPECT_LE(res.log[i].learning_rate, res.log[i - 1].learning_rate);
}

TEST(Train, DivergenceRestoresBestSnapshot) {
    RcnModel<float> model(tiny_config());
    const auto before = model.params().snapshot();
    TrainConfig cfg;
    cfg.learning_rate = 1e30;
    cfg.iterations = 3;
    cfg.episodes_per_iteration = 5;
    cfg.val_episodes = 0;
    cfg.way = 3;
    cfg.queries = 2;
    auto res = train(model, small_data(), cfg);
    EXPECT_TRUE(res.diverged);
    EXPECT_EQ(res.stop_reason, "diverged");
    EXPECT_EQ(model.params().snapshot(), before);
}

TEST(Train, SmoothedLossDecreasesOverFirstIterations) {
    RcnModel<float> model(tiny_config());
    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.episodes_per_iteration = 40;
    cfg.val_episodes = 0;
    cfg.way = 5;
    cfg.queries = 4;
    cfg.learning_rate = 3e-3;
    cfg.seed = 11;
    auto res = train(model, small_data(), cfg);
    ASSERT_EQ(res.log.size(), 5u);
    for (std::size_t i = 1; i < 5; ++i)
        EXPECT_LT(res.log[i].train_loss, res.log[i - 1].train_loss) << "iteration " << i + 1;
}

TEST(Checkpoint, SaveLoadReproducesScores) {
    const auto& data = small_data();
    RcnModel<float> a(tiny_config());
    auto cfg = tiny_config();
    cfg.seed = 99;
    RcnModel<float> b(cfg);
    const auto dir = std::filesystem::temp_directory_path() / "rcn_ckpt_test";
    std::filesystem::remove_all(dir);
    a.params().save(dir);
    b.params().load(dir);
    std::mt19937_64 rng(3);
    auto ep = sample_episode(data, Split::train, 3, 1, 2, rng);
    NoGradGuard g;
    EXPECT_EQ(a.episode_scores(data, ep, false).values(), b.episode_scores(data, ep, false).values());
    std::filesystem::remove_all(dir);
}
