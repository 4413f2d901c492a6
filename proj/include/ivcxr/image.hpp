#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ivcxr/errors.hpp"

namespace ivcxr {

/// Row-major, channel-last raster with values in [0, 1].
struct RasterImage {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 1;
    std::vector<float> pixels;

    RasterImage() = default;
    RasterImage(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
    float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }

    bool operator==(const RasterImage&) const = default;
};

/// Throws ContractViolation unless dimensions, channel count and value range are valid.
inline void validate(const RasterImage& img) {
    require(img.height > 0 && img.width > 0, "raster has a zero dimension");
    require(img.channels == 1 || img.channels == 3, "raster must have 1 or 3 channels, got " +
                                                        std::to_string(img.channels));
    require(img.pixels.size() == img.height * img.width * img.channels,
            "raster pixel count does not match " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                "x" + std::to_string(img.channels));
    for (float v : img.pixels)
        if (!(v >= 0.0f && v <= 1.0f))
            throw ContractViolation("raster pixel value " + std::to_string(v) + " outside [0,1]");
}

}  // namespace ivcxr
