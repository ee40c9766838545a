#include "colorizer/colorspace.hpp"

#include <algorithm>
#include <cmath>

namespace colorizer {

namespace {

constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;
constexpr double kDelta = 6.0 / 29.0;

double srgb_linearize(double v8) {
    double c = v8 / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double srgb_delinearize(double c) {
    double v = c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
    return std::clamp(v * 255.0, 0.0, 255.0);
}

double lab_f(double t) {
    return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}

double lab_finv(double t) {
    return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0);
}

uint8_t quantize(double v) {
    return static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

}  // namespace

void srgb_to_lab(double r8, double g8, double b8, double& L, double& a, double& b) {
    double r = srgb_linearize(r8), g = srgb_linearize(g8), bl = srgb_linearize(b8);
    double X = 0.4124564 * r + 0.3575761 * g + 0.1804375 * bl;
    double Y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * bl;
    double Z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * bl;
    double fx = lab_f(X / kXn), fy = lab_f(Y / kYn), fz = lab_f(Z / kZn);
    L = 116.0 * fy - 16.0;
    a = 500.0 * (fx - fy);
    b = 200.0 * (fy - fz);
}

void lab_to_srgb(double L, double a, double b, double& r8, double& g8, double& b8) {
    double fy = (L + 16.0) / 116.0;
    double fx = fy + a / 500.0;
    double fz = fy - b / 200.0;
    double X = kXn * lab_finv(fx);
    double Y = kYn * lab_finv(fy);
    double Z = kZn * lab_finv(fz);
    double r = 3.2404542 * X - 1.5371385 * Y - 0.4985314 * Z;
    double g = -0.9692660 * X + 1.8760108 * Y + 0.0415560 * Z;
    double bl = 0.0556434 * X - 0.2040259 * Y + 1.0572252 * Z;
    r8 = srgb_delinearize(r);
    g8 = srgb_delinearize(g);
    b8 = srgb_delinearize(bl);
}

ImageLab rgb_to_lab(const ImageRGB& img) {
    ImageLab out;
    out.L.resize(img.height, img.width);
    out.a.resize(img.height, img.width);
    out.b.resize(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            double L, a, b;
            srgb_to_lab(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), L, a, b);
            out.L(y, x) = static_cast<float>(L);
            out.a(y, x) = static_cast<float>(a);
            out.b(y, x) = static_cast<float>(b);
        }
    return out;
}

ImageRGB lab_to_rgb(const ImageLab& img) {
    ImageRGB out(img.height(), img.width());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) {
            double r, g, b;
            lab_to_srgb(img.L(y, x), img.a(y, x), img.b(y, x), r, g, b);
            out.at(y, x, 0) = quantize(r);
            out.at(y, x, 1) = quantize(g);
            out.at(y, x, 2) = quantize(b);
        }
    return out;
}

GrayImage extract_gray(const ImageRGB& img) {
    GrayImage out;
    out.L = rgb_to_lab(img).L;
    out.rgb_replicated = ImageRGB(img.height, img.width);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            uint8_t v = quantize(out.L(y, x) * 255.0 / 100.0);
            out.rgb_replicated.at(y, x, 0) = v;
            out.rgb_replicated.at(y, x, 1) = v;
            out.rgb_replicated.at(y, x, 2) = v;
        }
    return out;
}

ImageRGB luminance_lock(const ImageRGB& colorized, const GrayImage& source) {
    if (colorized.height != source.height() || colorized.width != source.width())
        throw std::invalid_argument("luminance_lock: size mismatch");
    ImageLab lab = rgb_to_lab(colorized);
    lab.L = source.L;
    return lab_to_rgb(lab);
}

ImageRGB center_crop_resize(const ImageRGB& img, int size) {
    int side = std::min(img.height, img.width);
    int y0 = (img.height - side) / 2;
    int x0 = (img.width - side) / 2;
    ImageRGB out(size, size);
    if (side >= size) {
        // box average over the source footprint of each output pixel
        double scale = static_cast<double>(side) / size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                int sy0 = y0 + static_cast<int>(std::floor(y * scale));
                int sy1 = y0 + static_cast<int>(std::ceil((y + 1) * scale));
                int sx0 = x0 + static_cast<int>(std::floor(x * scale));
                int sx1 = x0 + static_cast<int>(std::ceil((x + 1) * scale));
                sy1 = std::min(sy1, y0 + side);
                sx1 = std::min(sx1, x0 + side);
                for (int c = 0; c < 3; ++c) {
                    double acc = 0;
                    for (int sy = sy0; sy < sy1; ++sy)
                        for (int sx = sx0; sx < sx1; ++sx) acc += img.at(sy, sx, c);
                    out.at(y, x, c) =
                        quantize(acc / (static_cast<double>(sy1 - sy0) * (sx1 - sx0)));
                }
            }
    } else {
        double scale = static_cast<double>(side) / size;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                double fy = (y + 0.5) * scale - 0.5;
                double fx = (x + 0.5) * scale - 0.5;
                int iy = static_cast<int>(std::floor(fy));
                int ix = static_cast<int>(std::floor(fx));
                double wy = fy - iy, wx = fx - ix;
                auto sample = [&](int yy, int xx, int c) {
                    yy = std::clamp(yy, 0, side - 1);
                    xx = std::clamp(xx, 0, side - 1);
                    return static_cast<double>(img.at(y0 + yy, x0 + xx, c));
                };
                for (int c = 0; c < 3; ++c) {
                    double v = (1 - wy) * ((1 - wx) * sample(iy, ix, c) + wx * sample(iy, ix + 1, c)) +
                               wy * ((1 - wx) * sample(iy + 1, ix, c) + wx * sample(iy + 1, ix + 1, c));
                    out.at(y, x, c) = quantize(v);
                }
            }
    }
    return out;
}

}  // namespace colorizer
