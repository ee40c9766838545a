#ifndef COLORIZER_IMAGE_HPP
#define COLORIZER_IMAGE_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace colorizer {

/// 8-bit interleaved RGB, the on-disk / metric-facing form.
struct ImageRGB {
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;  // H*W*3, row-major, RGB

    ImageRGB() = default;
    ImageRGB(int h, int w) : height(h), width(w), pixels(static_cast<size_t>(h) * w * 3, 0) {
        if (h < 1 || w < 1) throw std::invalid_argument("ImageRGB: empty dimensions");
    }

    uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
    bool same_size(const ImageRGB& o) const { return height == o.height && width == o.width; }
};

/// CIELAB planes: L in [0,100], a/b unbounded chroma.
struct ImageLab {
    Eigen::ArrayXXf L, a, b;  // height x width each

    int height() const { return static_cast<int>(L.rows()); }
    int width() const { return static_cast<int>(L.cols()); }
};

/// Grayscale input: the lightness plane plus its 8-bit replication for
/// 3-channel encoders.
struct GrayImage {
    Eigen::ArrayXXf L;         // height x width, 0..100
    ImageRGB rgb_replicated;   // L rescaled to 0..255 in all three channels

    int height() const { return static_cast<int>(L.rows()); }
    int width() const { return static_cast<int>(L.cols()); }
};

/// Center-crop to square then resample to size x size (box average when
/// shrinking, bilinear when enlarging).
ImageRGB center_crop_resize(const ImageRGB& img, int size);

}  // namespace colorizer

#endif
