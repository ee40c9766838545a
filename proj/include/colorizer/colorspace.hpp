#ifndef COLORIZER_COLORSPACE_HPP
#define COLORIZER_COLORSPACE_HPP

#include "colorizer/image.hpp"

namespace colorizer {

// sRGB <-> CIELAB under D65, 2-degree observer. Conversions are total; out of
// gamut values clip per channel on the way back to 8-bit.

ImageLab rgb_to_lab(const ImageRGB& img);
ImageRGB lab_to_rgb(const ImageLab& img);
GrayImage extract_gray(const ImageRGB& img);

/// Replace the lightness of `colorized` with the source grayscale lightness,
/// keeping the chroma. Throws on size mismatch.
ImageRGB luminance_lock(const ImageRGB& colorized, const GrayImage& source);

/// Scalar-level conversions (exposed for palette construction and tests).
void srgb_to_lab(double r8, double g8, double b8, double& L, double& a, double& b);
void lab_to_srgb(double L, double a, double b, double& r8, double& g8, double& b8);

}  // namespace colorizer

#endif
