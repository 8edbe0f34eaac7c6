#include "ltp/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include <png.h>

namespace ltp {

void write_png(const std::string& path, const Tensor& pixels) {
    if (pixels.dim() != 3 || pixels.size(0) != 3)
        throw ContractError("write_png expects {3,H,W} pixels, got " + pixels.shape_str());
    int h = pixels.size(1), w = pixels.size(2);

    std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
    int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(pixels[c * hw + static_cast<int64_t>(y) * w + x], 0.0, 1.0);
                rgb[(static_cast<size_t>(y) * w + x) * 3 + static_cast<size_t>(c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }

    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open " + path + " for writing");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(f);
        throw IoError("libpng failure writing " + path);
    }
    png_init_io(png, f);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) png_write_row(png, rgb.data() + static_cast<size_t>(y) * w * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
}

void draw_box_outline(Tensor& pixels, const BoundingBox& box, const std::array<double, 3>& color) {
    int h = pixels.size(1), w = pixels.size(2);
    int64_t hw = static_cast<int64_t>(h) * w;
    int x0 = std::clamp(static_cast<int>(std::lround(box.x0)), 0, w - 1);
    int x1 = std::clamp(static_cast<int>(std::lround(box.x1)) - 1, 0, w - 1);
    int y0 = std::clamp(static_cast<int>(std::lround(box.y0)), 0, h - 1);
    int y1 = std::clamp(static_cast<int>(std::lround(box.y1)) - 1, 0, h - 1);
    auto put = [&](int y, int x) {
        for (int c = 0; c < 3; ++c)
            pixels[c * hw + static_cast<int64_t>(y) * w + x] = color[static_cast<size_t>(c)];
    };
    for (int x = x0; x <= x1; ++x) {
        put(y0, x);
        put(y1, x);
    }
    for (int y = y0; y <= y1; ++y) {
        put(y, x0);
        put(y, x1);
    }
}

}  // namespace ltp
