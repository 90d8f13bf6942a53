#include <gtest/gtest.h>

#include "support.hpp"

using namespace rcn;
using rcn::testing::random_tensor;

TEST(Backbone, ZeroImageGivesFiniteWellShapedMap) {
    ParamStore<float> store;
    std::mt19937_64 rng(1);
    Backbone<float> net(BackboneConfig{}, store, rng);
    auto fm = net.extract(Tensor<float>({3, 32, 32}, 0.f));
    EXPECT_EQ(fm.values.shape(), (Shape{64, 5, 5}));
    for (float v : fm.values.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Backbone, Conv4At84GivesFiveByFive) {
    ParamStore<float> store;
    std::mt19937_64 rng(2);
    Backbone<float> net(BackboneConfig::preset("conv4-64", 84), store, rng);
    auto img = random_tensor<float>({3, 84, 84}, rng, 0, 1);
    EXPECT_EQ(net.extract(img).values.shape(), (Shape{64, 5, 5}));
    EXPECT_EQ(BackboneConfig::preset("conv4-64", 84).natural_size(), (std::pair<std::size_t, std::size_t>{5, 5}));
}

TEST(Backbone, SameImageSameOutput) {
    ParamStore<float> store;
    std::mt19937_64 rng(3);
    Backbone<float> net(BackboneConfig::preset("conv4-32"), store, rng);
    auto img = random_tensor<float>({3, 32, 32}, rng, 0, 1);
    EXPECT_EQ(net.extract(img).values.values(), net.extract(img).values.values());
}

TEST(Backbone, RejectsWrongChannelCount) {
    ParamStore<float> store;
    std::mt19937_64 rng(4);
    Backbone<float> net(BackboneConfig{}, store, rng);
    EXPECT_THROW(net.extract(Tensor<float>({1, 32, 32}, 0.f)), ShapeError);
    EXPECT_THROW(net.forward(Tensor<float>({2, 4, 32, 32}, 0.f), false), ShapeError);
    EXPECT_THROW(BackboneConfig::preset("resnet12"), std::invalid_argument);
}

TEST(Backbone, RegistersNamedParameters) {
    ParamStore<float> store;
    std::mt19937_64 rng(5);
    Backbone<float> net(BackboneConfig{}, store, rng);
    EXPECT_NO_THROW(store.get("backbone.block0.conv.weight"));
    EXPECT_EQ(store.get("backbone.block3.conv.weight").shape(), (Shape{64, 64, 3, 3}));
    // running statistics are stored but not trained: conv weight + bias + bn scale + bn shift per block
    const std::size_t first = 64 * 3 * 9 + 3 * 64, rest = 64 * 64 * 9 + 3 * 64;
    EXPECT_EQ(store.trainable_count("backbone"), first + 3 * rest);
}

TEST(Backbone, BatchedEqualsIndependentInEvalMode) {
    ParamStore<double> store;
    std::mt19937_64 rng(6);
    BackboneConfig cfg = BackboneConfig::preset("conv4-32", 16);
    cfg.out_h = cfg.out_w = 3;
    Backbone<double> net(cfg, store, rng);
    auto batch = random_tensor<double>({4, 3, 16, 16}, rng, 0, 1);
    auto all = net.forward(batch, false);
    // permuted batch: rows come back permuted
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<double> pv;
    const std::size_t plane = 3 * 16 * 16;
    for (auto p : perm) pv.insert(pv.end(), batch.data().begin() + p * plane, batch.data().begin() + (p + 1) * plane);
    auto permuted = net.forward(Tensor<double>::from({4, 3, 16, 16}, pv), false);
    const std::size_t fplane = all.size() / 4;
    for (std::size_t i = 0; i < 4; ++i) {
        auto single = net.extract(slice_rows(batch, i, i + 1).reshape({3, 16, 16}));
        for (std::size_t k = 0; k < fplane; ++k) {
            EXPECT_NEAR(single.values[k], all[i * fplane + k], 1e-6);
            EXPECT_NEAR(permuted[i * fplane + k], all[perm[i] * fplane + k], 1e-6);
        }
    }
}

TEST(ResizeSpatial, IdentityAtSameSize) {
    std::mt19937_64 rng(7);
    FeatureMap<float> fm{random_tensor<float>({64, 5, 5}, rng), 3};
    auto out = resize_spatial(fm, 5, 5);
    EXPECT_EQ(out.values.values(), fm.values.values());
    EXPECT_EQ(out.sample_id, 3u);
}

TEST(ResizeSpatial, ConstantStaysConstant) {
    FeatureMap<double> fm{Tensor<double>({1, 4, 4}, 2.5)};
    auto out = resize_spatial(fm, 2, 2);
    for (double v : out.values.data()) EXPECT_DOUBLE_EQ(v, 2.5);
}

TEST(ResizeSpatial, RejectsUpsizing) {
    FeatureMap<double> fm{Tensor<double>({1, 3, 3}, 0.0)};
    EXPECT_THROW(resize_spatial(fm, 4, 3), ShapeError);
}

TEST(ResizeSpatial, MatchesWindowAverages) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        FeatureMap<double> fm{random_tensor<double>({2, 4, 4}, rng)};
        for (std::size_t oh : {1, 2, 3}) {
            auto out = resize_spatial(fm, oh, oh);
            for (std::size_t c = 0; c < 2; ++c)
                for (std::size_t i = 0; i < oh; ++i)
                    for (std::size_t j = 0; j < oh; ++j) {
                        // window [floor(i*4/oh), ceil((i+1)*4/oh))
                        const std::size_t r0 = i * 4 / oh, r1 = ((i + 1) * 4 + oh - 1) / oh;
                        const std::size_t c0 = j * 4 / oh, c1 = ((j + 1) * 4 + oh - 1) / oh;
                        double acc = 0;
                        for (std::size_t r = r0; r < r1; ++r)
                            for (std::size_t q = c0; q < c1; ++q) acc += fm.values[(c * 4 + r) * 4 + q];
                        acc /= double((r1 - r0) * (c1 - c0));
                        EXPECT_NEAR(out.values[(c * oh + i) * oh + j], acc, 1e-6);
                    }
        }
    }
}

TEST(ResizeSpatial, PreservesChannelMeanWhenWindowsTile) {
    std::mt19937_64 rng(9);
    FeatureMap<double> fm{random_tensor<double>({3, 6, 6}, rng)};
    for (std::size_t target : {1, 2, 3}) {
        auto out = resize_spatial(fm, target, target);
        for (std::size_t c = 0; c < 3; ++c) {
            double a = 0, b = 0;
            for (std::size_t k = 0; k < 36; ++k) a += fm.values[c * 36 + k];
            for (std::size_t k = 0; k < target * target; ++k) b += out.values[c * target * target + k];
            EXPECT_NEAR(a / 36, b / double(target * target), 1e-6);
        }
    }
}
