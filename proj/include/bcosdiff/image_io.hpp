#pragma once

#include "bcosdiff/tensor.hpp"

#include <string>

namespace bcosdiff {

/// Binary PPM (P6, maxval 255) of an image [3,H,W] in [0,1]; values are
/// clamped and rounded. `scale` replicates pixels for viewing.
std::string encode_ppm(const Tensor<double>& img, int scale = 1);
void write_ppm(const std::string& path, const Tensor<double>& img, int scale = 1);
Tensor<double> read_ppm(const std::string& path);

/// Signed map [H,W] -> diverging RGB image [3,H,W]: blue below zero, white at
/// zero, red above, symmetric around 0 with range max|map| (or `range` if > 0).
Tensor<double> diverging_colormap(const Tensor<double>& map, double range = 0);

/// Lowercase words joined by '-', other characters dropped.
std::string slugify(const std::string& text);

void write_text(const std::string& path, const std::string& content);

}  // namespace bcosdiff
