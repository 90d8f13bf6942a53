#pragma once

// Conv4-style feature extractor: each block is conv3x3(pad 1) -> batch-norm
// -> relu -> max-pool(2). A block only pools while halving keeps the map at
// least as large as the requested output; any remaining excess is removed by
// adaptive average pooling, so a 32x32 input and an 84x84 input both land on
// the same h x w grid.

#include <optional>
#include <string>

#include "rcn/ops.hpp"
#include "rcn/params.hpp"

namespace rcn {

struct BackboneConfig {
    std::size_t blocks = 4;
    std::size_t channels = 64;
    std::size_t in_channels = 3;
    std::size_t image_h = 32;
    std::size_t image_w = 32;
    std::size_t out_h = 5;
    std::size_t out_w = 5;

    // Accepted names: conv4-64, conv4-32.
    static BackboneConfig preset(const std::string& name, std::size_t image_size = 32) {
        BackboneConfig cfg;
        if (name == "conv4-64")
            cfg.channels = 64;
        else if (name == "conv4-32")
            cfg.channels = 32;
        else
            throw std::invalid_argument("unknown backbone preset '" + name + "' (expected conv4-64 or conv4-32)");
        cfg.image_h = cfg.image_w = image_size;
        return cfg;
    }

    void validate() const {
        if (blocks == 0 || channels == 0 || in_channels == 0)
            throw std::invalid_argument("backbone: blocks, channels and in_channels must be positive");
        if (out_h < 1 || out_w < 1) throw std::invalid_argument("backbone: output size must be at least 1x1");
        const auto [h, w] = natural_size();
        if (h < out_h || w < out_w)
            throw std::invalid_argument("backbone: input " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                        " is too small for a " + std::to_string(out_h) + "x" +
                                        std::to_string(out_w) + " output");
    }

    bool pools_in_block(std::size_t h, std::size_t w) const { return h / 2 >= out_h && w / 2 >= out_w; }

    // Spatial size after the conv blocks, before adaptive pooling.
    std::pair<std::size_t, std::size_t> natural_size() const {
        std::size_t h = image_h, w = image_w;
        for (std::size_t b = 0; b < blocks; ++b)
            if (pools_in_block(h, w)) h /= 2, w /= 2;
        return {h, w};
    }
};

template <class T>
struct FeatureMap {
    Tensor<T> values;  // C x h x w
    std::size_t sample_id = 0;

    std::size_t channels() const { return values.dim(0); }
    std::size_t height() const { return values.dim(1); }
    std::size_t width() const { return values.dim(2); }
};

template <class T>
class Backbone {
   public:
    Backbone(const BackboneConfig& config, ParamStore<T>& store, std::mt19937_64& rng,
             const std::string& prefix = "backbone")
        : config_(config) {
        config_.validate();
        std::size_t cin = config_.in_channels;
        for (std::size_t b = 0; b < config_.blocks; ++b) {
            const std::string p = prefix + ".block" + std::to_string(b);
            const std::size_t c = config_.channels;
            Block blk;
            blk.kernel = store.add(p + ".conv.weight", he_normal<T>({c, cin, 3, 3}, cin * 9, rng));
            blk.bias = store.add(p + ".conv.bias", Tensor<T>::zeros({c}));
            blk.gamma = store.add(p + ".bn.weight", Tensor<T>({c}, T(1)));
            blk.beta = store.add(p + ".bn.bias", Tensor<T>::zeros({c}));
            blk.stats.running_mean = store.add(p + ".bn.running_mean", Tensor<T>::zeros({c}), false);
            blk.stats.running_var = store.add(p + ".bn.running_var", Tensor<T>({c}, T(1)), false);
            blocks_.push_back(std::move(blk));
            cin = c;
        }
    }

    const BackboneConfig& config() const { return config_; }

    // images: N x C_in x H x W in [0,1]; returns N x C x h x w.
    Tensor<T> forward(const Tensor<T>& images, bool training) {
        if (images.rank() != 4 || images.dim(1) != config_.in_channels)
            throw ShapeError("backbone: expected N x " + std::to_string(config_.in_channels) + " x " +
                             std::to_string(config_.image_h) + " x " + std::to_string(config_.image_w) +
                             " images, got " + shape_str(images.shape()));
        if (images.dim(2) != config_.image_h || images.dim(3) != config_.image_w)
            throw ShapeError("backbone: image size " + shape_str(images.shape()) + " does not match config " +
                             std::to_string(config_.image_h) + "x" + std::to_string(config_.image_w));
        Tensor<T> x = images;
        for (auto& blk : blocks_) {
            x = conv2d(x, blk.kernel, blk.bias, 1, 1);
            x = batch_norm2d(x, blk.gamma, blk.beta, blk.stats, training);
            x = relu(x);
            if (config_.pools_in_block(x.dim(2), x.dim(3))) x = max_pool2d(x, 2, 2);
        }
        if (x.dim(2) != config_.out_h || x.dim(3) != config_.out_w)
            x = adaptive_avg_pool2d(x, config_.out_h, config_.out_w);
        return x;
    }

    // Single image 3 x H x W -> FeatureMap C x h x w.
    FeatureMap<T> extract(const Tensor<T>& image, bool training = false, std::size_t sample_id = 0) {
        if (image.rank() != 3)
            throw ShapeError("extract: expected C x H x W image, got " + shape_str(image.shape()));
        if (image.dim(0) != config_.in_channels)
            throw ShapeError("extract: image has " + std::to_string(image.dim(0)) + " channels, backbone expects " +
                             std::to_string(config_.in_channels));
        auto out = forward(image.reshape({1, image.dim(0), image.dim(1), image.dim(2)}), training);
        return {out.reshape({out.dim(1), out.dim(2), out.dim(3)}), sample_id};
    }

   private:
    struct Block {
        Tensor<T> kernel, bias, gamma, beta;
        BatchNormStats<T> stats;
    };
    BackboneConfig config_;
    std::vector<Block> blocks_;
};

// Adaptive average pooling of a feature map down to h' x w'.
template <class T>
FeatureMap<T> resize_spatial(const FeatureMap<T>& map, std::size_t out_h, std::size_t out_w) {
    if (out_h > map.height() || out_w > map.width())
        throw ShapeError("resize_spatial: cannot upsize " + shape_str(map.values.shape()) + " to " +
                         std::to_string(out_h) + "x" + std::to_string(out_w));
    if (out_h == map.height() && out_w == map.width()) return map;
    return {adaptive_avg_pool2d(map.values, out_h, out_w), map.sample_id};
}

}  // namespace rcn
