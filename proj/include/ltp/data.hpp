#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ltp/common.hpp"
#include "ltp/tensor.hpp"

namespace ltp {

// Corner-form box. COCO's (x, y, w, h) is converted at ingestion; everything
// downstream uses corners only.
struct BoundingBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() * height(); }
    bool valid() const { return x0 < x1 && y0 < y1; }

    BoundingBox clipped(double w, double h) const {
        return {std::max(0.0, x0), std::max(0.0, y0), std::min(w, x1), std::min(h, y1)};
    }
};

inline double intersection_area(const BoundingBox& a, const BoundingBox& b) {
    double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    return (w > 0 && h > 0) ? w * h : 0.0;
}

inline double iou(const BoundingBox& a, const BoundingBox& b) {
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

struct Annotation {
    BoundingBox box;
    int category_id = 0;
};

struct ImageRecord {
    int64_t image_id = 0;
    int width = 0, height = 0;
    Tensor pixels;  // {3, H, W} in [0,1]; empty for metadata-only records
    std::vector<Annotation> annotations;

    bool has_pixels() const { return !pixels.empty(); }
};

struct DatasetManifest {
    std::vector<ImageRecord> images;
    int num_classes = 0;
    std::vector<std::string> class_names;  // optional, size num_classes when present

    void validate() const;
};

// Per-class frequency scores plus the raw counts they were derived from, so
// downstream rational arithmetic can stay exact.
struct ClassStats {
    std::vector<double> f_im;  // fraction of images containing the class
    std::vector<double> f_in;  // fraction of instances belonging to the class
    std::vector<int64_t> images_with;
    std::vector<int64_t> instances;
    int64_t num_images = 0;
    int64_t num_instances = 0;
};

enum class ManifestFormat { CocoJson, Internal };

struct LoadResult {
    DatasetManifest manifest;
    int64_t dropped_annotations = 0;
};

LoadResult load_manifest(const std::string& path, ManifestFormat format);
void save_manifest(const DatasetManifest& m, const std::string& path);
std::string serialize_manifest(const DatasetManifest& m);
LoadResult parse_manifest(const std::string& text, ManifestFormat format);

struct SyntheticConfig {
    int num_images = 200;
    int num_classes = 10;
    double zipf_exponent = 1.0;
    int image_size = 64;
    uint64_t seed = 0;
    int min_shapes_per_image = 1;
    int max_shapes_per_image = 6;
};

// Colored geometric shapes on a gray background; class = shape kind x color so
// visual difficulty stays roughly flat across the frequency ranks. Class
// instance counts follow p(c) ~ (c+1)^-s.
DatasetManifest generate_synthetic(const SyntheticConfig& config);

ClassStats compute_class_stats(const DatasetManifest& m);

}  // namespace ltp
