#pragma once

// Three-block convolutional feature extractor producing the spatial map F.

#include <bit>
#include <span>
#include <string>
#include <vector>

#include "ivcxr/diff/ops.hpp"
#include "ivcxr/diff/param.hpp"
#include "ivcxr/image.hpp"

namespace ivcxr::backbone {

using diff::Tensor;

/// Feature dimension used by the full-scale model; the desk-scale default is 64.
inline constexpr std::size_t kFullScaleFeatureDim = 2048;

struct BackboneConfig {
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 1;
    std::size_t downsample = 4;  // 1, 2, 4 or 8: one 2x2 pool per block until reached
    std::size_t width1 = 8;      // channels after block 1
    std::size_t width2 = 16;     // channels after block 2
    std::size_t d = 64;          // channels of F
    bool position_embedding = true;
};

/// Batched F: values [B, h, w, d]; flat() is the (h*w) x d view per sample.
template <typename T>
struct FeatureMap {
    Tensor<T> values;
    std::size_t h = 0, w = 0, d = 0;

    Tensor<T> flat() const { return diff::reshape(values, {values.dim(0), h * w, d}); }
};

template <typename T>
Tensor<T> images_to_tensor(std::span<const RasterImage* const> images) {
    require(!images.empty(), "empty image batch");
    const auto& first = *images.front();
    std::vector<T> data;
    data.reserve(images.size() * first.pixels.size());
    for (const RasterImage* img : images) {
        validate(*img);
        require(img->height == first.height && img->width == first.width && img->channels == first.channels,
                "images in a batch must share dimensions");
        for (float p : img->pixels) data.push_back(static_cast<T>(p));
    }
    return Tensor<T>({images.size(), first.height, first.width, first.channels}, std::move(data));
}

template <typename T>
class Backbone {
public:
    Backbone() = default;

    Backbone(diff::ParameterStore<T>& store, const std::string& name, const BackboneConfig& cfg) : cfg_(cfg) {
        require(cfg.downsample >= 1 && cfg.downsample <= 8 && std::has_single_bit(cfg.downsample),
                "backbone downsample must be 1, 2, 4 or 8");
        require(cfg.height % cfg.downsample == 0 && cfg.width % cfg.downsample == 0,
                "image " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width) +
                    " not divisible by downsample " + std::to_string(cfg.downsample));
        pools_ = static_cast<std::size_t>(std::countr_zero(cfg.downsample));
        const std::size_t widths[4] = {cfg.channels, cfg.width1, cfg.width2, cfg.d};
        for (std::size_t b = 0; b < 3; ++b) {
            const std::string n = name + ".conv" + std::to_string(b + 1);
            kernels_[b] = store.add(n + ".weight", {3, 3, widths[b], widths[b + 1]}, diff::Init::fan_in_uniform,
                                    9 * widths[b]);
            biases_[b] = store.add(n + ".bias", {widths[b + 1]}, diff::Init::zeros);
        }
        if (cfg.position_embedding) {
            const std::size_t f = std::size_t{1} << std::min<std::size_t>(pools_, 2);
            position_ = store.add(name + ".position", {cfg.height / f, cfg.width / f, cfg.width2}, diff::Init::zeros);
        }
    }

    const BackboneConfig& config() const { return cfg_; }

    /// images: [B, H, W, C] with values in [0, 1].
    FeatureMap<T> forward(const Tensor<T>& images) const {
        require(images.rank() == 4 && images.dim(1) == cfg_.height && images.dim(2) == cfg_.width &&
                    images.dim(3) == cfg_.channels,
                "backbone input " + diff::to_string(images.shape()) + " does not match configured " +
                    std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + "x" +
                    std::to_string(cfg_.channels));
        for (T v : images.values()) require(v >= T(0) && v <= T(1), "backbone input pixel outside [0,1]");
        Tensor<T> x = images;
        for (std::size_t b = 0; b < 3; ++b) {
            if (b == 2 && position_.defined()) x = diff::add(x, position_);
            x = diff::relu(diff::add(diff::conv2d(x, kernels_[b]), biases_[b]));
            if (b < pools_) x = diff::max_pool2d(x);
        }
        return {x, x.dim(1), x.dim(2), cfg_.d};
    }

    FeatureMap<T> extract_features(const RasterImage& image) const {
        const RasterImage* one[] = {&image};
        require(image.height % cfg_.downsample == 0 && image.width % cfg_.downsample == 0,
                "image dimensions not divisible by downsample " + std::to_string(cfg_.downsample));
        return forward(images_to_tensor<T>(one));
    }

private:
    BackboneConfig cfg_;
    std::size_t pools_ = 0;
    Tensor<T> kernels_[3];
    Tensor<T> biases_[3];
    Tensor<T> position_;
};

}  // namespace ivcxr::backbone
