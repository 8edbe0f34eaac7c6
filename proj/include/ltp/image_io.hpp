#pragma once

#include <array>
#include <string>

#include "ltp/data.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

// 8-bit RGB PNG from a {3,H,W} tensor in [0,1] (values clamped)
void write_png(const std::string& path, const Tensor& pixels);

// 1-px box outline, clipped to the image
void draw_box_outline(Tensor& pixels, const BoundingBox& box, const std::array<double, 3>& color);

}  // namespace ltp
