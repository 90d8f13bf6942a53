#include <gtest/gtest.h>

#include "support.hpp"

using namespace rcn;
using rcn::testing::random_tensor;

namespace {

void fill_random(Tensor<double> t, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    for (auto& v : t.mutable_data()) v = u(rng);
}

// Independent per-cell evaluation of the two 1x1-conv blocks in inference mode.
std::vector<double> meta_oracle(const MetaLearner<double>& m, const std::vector<double>& s, const std::vector<double>& q,
                                std::size_t c, std::size_t hw) {
    const std::size_t hid = m.config().hidden;
    auto bn = [](double x, double g, double b, double mean, double var) {
        return g * (x - mean) / std::sqrt(var + 1e-5) + b;
    };
    std::vector<double> out(hw);
    for (std::size_t cell = 0; cell < hw; ++cell) {
        std::vector<double> in(2 * c);
        for (std::size_t ch = 0; ch < c; ++ch) {
            in[ch] = s[ch * hw + cell];
            in[c + ch] = q[ch * hw + cell];
        }
        double acc2 = m.conv2_bias()[0];
        for (std::size_t o = 0; o < hid; ++o) {
            double acc = m.conv1_bias()[o];
            for (std::size_t i = 0; i < 2 * c; ++i) acc += m.conv1_weight()[o * 2 * c + i] * in[i];
            acc = bn(acc, m.bn1_gamma()[o], m.bn1_beta()[o], m.bn1_stats().running_mean[o],
                     m.bn1_stats().running_var[o]);
            acc2 += m.conv2_weight()[o] * std::max(0.0, acc);
        }
        out[cell] = std::max(0.0, bn(acc2, m.bn2_gamma()[0], m.bn2_beta()[0], m.bn2_stats().running_mean[0],
                                     m.bn2_stats().running_var[0]));
    }
    return out;
}

struct MetaFixture {
    ParamStore<double> store;
    std::mt19937_64 rng;
    MetaLearner<double> learner;
    MetaFixture(std::size_t c, std::size_t hidden, std::uint64_t seed)
        : rng(seed), learner(MetaLearnerConfig{c, hidden}, store, rng) {
        // move every parameter and running statistic off its initial value
        for (auto& e : store.entries()) {
            const bool is_var = e.name.ends_with("running_var");
            fill_random(e.tensor, rng, is_var ? 0.5 : -0.5, is_var ? 2.0 : 0.5);
        }
        // keep the final relu mostly active so outputs are informative
        fill_random(store.get("meta.block1.bn.bias"), rng, 0.5, 1.0);
    }
};

}  // namespace

TEST(HeadKind, NamesRoundTrip) {
    for (auto h : {HeadKind::fixed, HeadKind::learnable, HeadKind::meta}) EXPECT_EQ(parse_head(to_string(h)), h);
    EXPECT_THROW(parse_head("attention"), std::invalid_argument);
}

TEST(MetaWeight, ZeroFinalLayerGivesZeroWeight) {
    ParamStore<double> store;
    std::mt19937_64 rng(1);
    MetaLearner<double> m(MetaLearnerConfig{4, 8}, store, rng);
    auto k = store.get("meta.block1.conv.weight");
    for (auto& v : k.mutable_data()) v = 0;
    auto g = store.get("meta.block1.bn.weight");
    for (auto& v : g.mutable_data()) v = 0;
    auto w = meta_weight(FeatureMap<double>{random_tensor<double>({4, 3, 3}, rng)},
                         FeatureMap<double>{random_tensor<double>({4, 3, 3}, rng)}, m);
    EXPECT_EQ(w.provenance, HeadKind::meta);
    for (double v : w.values.data()) EXPECT_EQ(v, 0.0);
}

TEST(MetaWeight, OrderSensitive) {
    MetaFixture f(4, 8, 2);
    auto s = FeatureMap<double>{random_tensor<double>({4, 3, 3}, f.rng)};
    auto q = FeatureMap<double>{random_tensor<double>({4, 3, 3}, f.rng)};
    EXPECT_NE(meta_weight(s, q, f.learner).values.values(), meta_weight(q, s, f.learner).values.values());
}

TEST(MetaWeight, MatchesPerCellOracle) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        MetaFixture f(4, 6, seed);
        auto s = random_tensor<double>({4, 2, 2}, f.rng);
        auto q = random_tensor<double>({4, 2, 2}, f.rng);
        auto w = meta_weight(FeatureMap<double>{s}, FeatureMap<double>{q}, f.learner);
        const auto expected = meta_oracle(f.learner, {s.data().begin(), s.data().end()},
                                          {q.data().begin(), q.data().end()}, 4, 4);
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(w.values[i], expected[i], 1e-6) << "seed " << seed;
    }
}

TEST(MetaWeight, NonnegativeAndTaskSensitive) {
    MetaFixture f(4, 8, 3);
    std::set<std::vector<double>> distinct;
    for (int i = 0; i < 10; ++i) {
        auto w = meta_weight(FeatureMap<double>{random_tensor<double>({4, 3, 3}, f.rng)},
                             FeatureMap<double>{random_tensor<double>({4, 3, 3}, f.rng)}, f.learner);
        for (double v : w.values.data()) EXPECT_GE(v, 0.0);
        distinct.insert(w.values.values());
    }
    EXPECT_GT(distinct.size(), 1u);
}

TEST(MetaWeight, RejectsChannelMismatch) {
    MetaFixture f(4, 8, 4);
    EXPECT_THROW(meta_weight(FeatureMap<double>{Tensor<double>({3, 2, 2}, 0.0)},
                             FeatureMap<double>{Tensor<double>({3, 2, 2}, 0.0)}, f.learner),
                 ShapeError);
    EXPECT_THROW(meta_weight(FeatureMap<double>{Tensor<double>({4, 2, 2}, 0.0)},
                             FeatureMap<double>{Tensor<double>({4, 3, 2}, 0.0)}, f.learner),
                 ShapeError);
}

TEST(MetaWeight, BatchedPairsFollowSupportMajorOrder) {
    MetaFixture f(3, 5, 5);
    auto s = random_tensor<double>({2, 3, 2, 2}, f.rng);
    auto q = random_tensor<double>({3, 3, 2, 2}, f.rng);
    auto all = f.learner.forward(s, q, false);
    ASSERT_EQ(all.shape(), (Shape{6, 4}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            auto w = meta_weight(FeatureMap<double>{slice_rows(s, i, i + 1).reshape({3, 2, 2})},
                                 FeatureMap<double>{slice_rows(q, j, j + 1).reshape({3, 2, 2})}, f.learner);
            for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(all[(i * 3 + j) * 4 + k], w.values[k], 1e-12);
        }
}

TEST(MetaWeight, GradientsFlowToParamsAndBothMaps) {
    MetaFixture f(3, 4, 6);
    auto s = random_tensor<double>({2, 3, 2, 2}, f.rng, -1, 1, true);
    auto q = random_tensor<double>({2, 3, 2, 2}, f.rng, -1, 1, true);
    auto mix = random_tensor<double>({4, 4}, f.rng);
    std::vector<Tensor<double>> params{s, q};
    for (auto& t : f.store.trainable()) params.push_back(t);
    const auto r = rcn::testing::check_gradients([&] { return sum(mul(f.learner.forward(s, q, true), mix)); }, params);
    EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(FixedWeight, Values) {
    auto w = fixed_weight<double>(5, 5);
    ASSERT_EQ(w.values.size(), 25u);
    for (double v : w.values.data()) EXPECT_DOUBLE_EQ(v, 0.04);
    EXPECT_EQ(fixed_weight<double>(1, 1).values.item(), 1.0);
    EXPECT_EQ(fixed_weight<double>(1, 1).provenance, HeadKind::fixed);
}

TEST(FixedWeight, CombineIsMean) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        auto p = random_tensor<double>({9}, rng);
        const double mean = std::accumulate(p.data().begin(), p.data().end(), 0.0) / 9;
        EXPECT_NEAR(combine(fixed_weight<double>(3, 3), RegionScores<double>{p}).value.item(), mean, 1e-15);
    }
}

TEST(LearnableWeight, SoftplusOfZeroIsLn2) {
    auto w = learnable_weight(Tensor<double>({4}, 0.0));
    for (double v : w.values.data()) EXPECT_NEAR(v, 0.6931471805599453, 1e-15);
    EXPECT_EQ(w.provenance, HeadKind::learnable);
}

TEST(LearnableWeight, AlwaysPositive) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        auto w = learnable_weight(random_tensor<double>({25}, rng, -30, 30));
        for (double v : w.values.data()) EXPECT_GT(v, 0.0);
    }
}

TEST(LearnableWeight, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(9);
    auto raw = random_tensor<double>({9}, rng, -3, 3, true);
    auto p = random_tensor<double>({9}, rng);
    const auto r = rcn::testing::check_gradients(
        [&] { return combine(learnable_weight(raw), RegionScores<double>{p}).value; }, {raw});
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_EQ(r.checked, 9u);
}

TEST(Combine, Examples) {
    auto onehot = Tensor<double>::from({4}, {0, 0, 1, 0});
    auto p = Tensor<double>::from({4}, {0.1, 0.2, 0.3, 0.4});
    EXPECT_DOUBLE_EQ(combine(RegionWeight<double>{onehot}, RegionScores<double>{p}).value.item(), 0.3);
    EXPECT_DOUBLE_EQ(combine(fixed_weight<double>(2, 2), RegionScores<double>{Tensor<double>({4}, 1.0)}).value.item(),
                     1.0);
    EXPECT_NEAR(combine(RegionWeight<double>{Tensor<double>::from({2}, {0.2, 0.8})},
                        RegionScores<double>{Tensor<double>::from({2}, {0.5, 0.25})})
                    .value.item(),
                0.30, 1e-15);
}

TEST(Combine, RejectsLengthMismatch) {
    EXPECT_THROW(combine(fixed_weight<double>(2, 2), RegionScores<double>{Tensor<double>({5}, 1.0)}), ShapeError);
}

TEST(Combine, MatchesLoopOracle) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        auto w = random_tensor<double>({3, 4, 9}, rng, 0, 1);
        auto p = random_tensor<double>({3, 4, 9}, rng);
        auto s = weighted_sum(w, p);
        for (std::size_t r = 0; r < 12; ++r) {
            double acc = 0;
            for (std::size_t i = 0; i < 9; ++i) acc += w[r * 9 + i] * p[r * 9 + i];
            EXPECT_NEAR(s[r], acc, 1e-6);
        }
    }
}

TEST(Combine, LinearInScores) {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(-3, 3);
    for (int trial = 0; trial < 50; ++trial) {
        RegionWeight<double> w{random_tensor<double>({9}, rng, 0, 1)};
        auto p1 = random_tensor<double>({9}, rng), p2 = random_tensor<double>({9}, rng);
        const double a = u(rng), b = u(rng);
        const double lhs = combine(w, RegionScores<double>{add(scale(p1, a), scale(p2, b))}).value.item();
        const double rhs = a * combine(w, RegionScores<double>{p1}).value.item() +
                           b * combine(w, RegionScores<double>{p2}).value.item();
        EXPECT_NEAR(lhs, rhs, 1e-6);
    }
}

TEST(Combine, ContributionsSumToScore) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        RegionWeight<double> w{random_tensor<double>({25}, rng, 0, 1)};
        RegionScores<double> p{random_tensor<double>({25}, rng)};
        const auto parts = contributions(w, p);
        EXPECT_NEAR(std::accumulate(parts.begin(), parts.end(), 0.0), combine(w, p).value.item(), 1e-12);
    }
}
