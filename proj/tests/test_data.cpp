#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ltp/data.hpp"

using namespace ltp;

namespace {

DatasetManifest tiny_manifest(int num_classes, std::vector<std::vector<int>> classes_per_image) {
    DatasetManifest m;
    m.num_classes = num_classes;
    int64_t id = 0;
    for (const auto& classes : classes_per_image) {
        ImageRecord im;
        im.image_id = id++;
        im.width = 32;
        im.height = 32;
        double x = 1;
        for (int c : classes) {
            im.annotations.push_back({BoundingBox{x, 1, x + 4, 5}, c});
            x += 1;
        }
        m.images.push_back(std::move(im));
    }
    return m;
}

}  // namespace

TEST_CASE("coco ingestion: minimal file, conversion and category inference") {
    std::string doc = R"({
      "images": [{"id": 5, "width": 100, "height": 80, "file_name": "a.png"}],
      "annotations": [{"id": 1, "image_id": 5, "category_id": 7, "bbox": [10, 20, 30, 40]}],
      "categories": [{"id": 7, "name": "cat"}]
    })";
    LoadResult r = parse_manifest(doc, ManifestFormat::CocoJson);
    CHECK(r.manifest.num_classes == 1);
    CHECK(r.manifest.images.size() == 1);
    REQUIRE(r.manifest.images[0].annotations.size() == 1);
    const BoundingBox& b = r.manifest.images[0].annotations[0].box;
    CHECK(b.x0 == 10);
    CHECK(b.y0 == 20);
    CHECK(b.x1 == 40);  // x + w
    CHECK(b.y1 == 60);  // y + h
    CHECK(r.manifest.images[0].annotations[0].category_id == 0);
    CHECK(r.dropped_annotations == 0);
}

TEST_CASE("coco ingestion: zero-width boxes are dropped with a count") {
    std::string doc = R"({
      "images": [{"id": 1, "width": 50, "height": 50, "file_name": "a.png"}],
      "annotations": [
        {"id": 1, "image_id": 1, "category_id": 1, "bbox": [5, 5, 0, 10]},
        {"id": 2, "image_id": 1, "category_id": 1, "bbox": [5, 5, 10, 10]}
      ],
      "categories": [{"id": 1, "name": "thing"}]
    })";
    LoadResult r = parse_manifest(doc, ManifestFormat::CocoJson);
    CHECK(r.dropped_annotations == 1);
    CHECK(r.manifest.images[0].annotations.size() == 1);
}

TEST_CASE("coco ingestion: errors") {
    CHECK_THROWS_AS(parse_manifest("{not json", ManifestFormat::CocoJson), FormatError);
    try {
        parse_manifest("{\"images\": [", ManifestFormat::CocoJson);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("byte") != std::string::npos);
    }

    std::string unknown_cat = R"({
      "images": [{"id": 1, "width": 50, "height": 50, "file_name": "a.png"}],
      "annotations": [{"id": 1, "image_id": 1, "category_id": 99, "bbox": [5, 5, 10, 10]}],
      "categories": [{"id": 1, "name": "thing"}]
    })";
    try {
        parse_manifest(unknown_cat, ManifestFormat::CocoJson);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("99") != std::string::npos);
    }
}

TEST_CASE("class stats: hand-counted fixtures") {
    // 3 images, classes {0,1}, instance counts {4,1} -> f_in = [0.8, 0.2]
    DatasetManifest m = tiny_manifest(2, {{0, 0}, {0, 1}, {0}});
    ClassStats s = compute_class_stats(m);
    CHECK(s.f_in[0] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(s.f_in[1] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(s.f_im[0] == doctest::Approx(1.0));  // saturation: class 0 in every image
    CHECK(s.f_im[1] == doctest::Approx(1.0 / 3.0));

    // 10 images, class 0 in 2 images with 5 instances out of 50 total
    std::vector<std::vector<int>> layout;
    layout.push_back({0, 0, 0, 1, 1});     // 3 of class 0
    layout.push_back({0, 0, 1, 1, 1});     // 2 of class 0
    for (int i = 0; i < 8; ++i) layout.push_back({1, 1, 1, 1, 1});
    ClassStats s2 = compute_class_stats(tiny_manifest(2, layout));
    CHECK(s2.f_im[0] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(s2.f_in[0] == doctest::Approx(0.1).epsilon(1e-12));

    // absent class scores (0, 0)
    ClassStats s3 = compute_class_stats(tiny_manifest(3, {{0}, {1}}));
    CHECK(s3.f_im[2] == 0.0);
    CHECK(s3.f_in[2] == 0.0);

    DatasetManifest empty;
    empty.num_classes = 2;
    CHECK_THROWS_AS(compute_class_stats(empty), DomainError);
}

TEST_CASE("class stats invariants on synthetic data") {
    SyntheticConfig cfg;
    cfg.num_images = 100;
    cfg.num_classes = 7;
    cfg.zipf_exponent = 0.8;
    cfg.seed = 3;
    DatasetManifest m = generate_synthetic(cfg);
    ClassStats s = compute_class_stats(m);
    double sum_in = 0;
    for (int c = 0; c < 7; ++c) {
        sum_in += s.f_in[static_cast<size_t>(c)];
        CHECK(s.f_im[static_cast<size_t>(c)] >= 0.0);
        CHECK(s.f_im[static_cast<size_t>(c)] <= 1.0);
    }
    CHECK(sum_in == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("synthetic generation: determinism and round-trip") {
    SyntheticConfig cfg;
    cfg.num_images = 20;
    cfg.num_classes = 5;
    cfg.zipf_exponent = 1.2;
    cfg.image_size = 32;
    cfg.seed = 7;

    std::string a = serialize_manifest(generate_synthetic(cfg));
    std::string b = serialize_manifest(generate_synthetic(cfg));
    CHECK(a == b);

    // load-of-save is the identity on the internal format
    LoadResult loaded = parse_manifest(a, ManifestFormat::Internal);
    CHECK(serialize_manifest(loaded.manifest) == a);
    CHECK(loaded.manifest.images[3].has_pixels());
}

TEST_CASE("synthetic generation: config validation") {
    SyntheticConfig cfg;
    cfg.num_images = 3;
    cfg.num_classes = 5;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);

    SyntheticConfig small;
    small.num_images = 10;
    small.num_classes = 2;
    small.image_size = 6;
    CHECK_THROWS_AS(generate_synthetic(small), ConfigError);
}

TEST_CASE("synthetic class counts: uniform at s=0 (chi-square)") {
    SyntheticConfig cfg;
    cfg.num_images = 3000;
    cfg.num_classes = 10;
    cfg.zipf_exponent = 0.0;
    cfg.image_size = 32;
    cfg.seed = 42;
    DatasetManifest m = generate_synthetic(cfg);
    ClassStats s = compute_class_stats(m);
    CHECK(s.num_instances > 10000);
    double expected = static_cast<double>(s.num_instances) / 10.0;
    double chi2 = 0;
    for (int c = 0; c < 10; ++c) {
        double d = static_cast<double>(s.instances[static_cast<size_t>(c)]) - expected;
        chi2 += d * d / expected;
    }
    // chi-square critical value, 9 dof, p = 0.01
    CHECK(chi2 < 21.666);
}

TEST_CASE("synthetic class counts: zipf rank-frequency slope near -s") {
    SyntheticConfig cfg;
    cfg.num_images = 2000;
    cfg.num_classes = 20;
    cfg.zipf_exponent = 1.2;
    cfg.image_size = 32;
    cfg.seed = 11;
    DatasetManifest m = generate_synthetic(cfg);
    ClassStats s = compute_class_stats(m);

    // least-squares slope of log(count) on log(rank)
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int n = 0;
    for (int c = 0; c < 20; ++c) {
        int64_t count = s.instances[static_cast<size_t>(c)];
        REQUIRE(count > 0);
        double x = std::log(static_cast<double>(c + 1));
        double y = std::log(static_cast<double>(count));
        sx += x; sy += y; sxx += x * x; sxy += x * y;
        ++n;
    }
    double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(std::abs(slope - (-1.2)) < 0.15);
}

TEST_CASE("synthetic boxes stay inside the image and pixels are in range") {
    SyntheticConfig cfg;
    cfg.num_images = 30;
    cfg.num_classes = 6;
    cfg.seed = 9;
    DatasetManifest m = generate_synthetic(cfg);
    for (const ImageRecord& im : m.images) {
        CHECK(!im.annotations.empty());
        CHECK(im.annotations.size() <= 6);
        for (const Annotation& a : im.annotations) {
            CHECK(a.box.x0 >= 0);
            CHECK(a.box.y0 >= 0);
            CHECK(a.box.x1 <= im.width);
            CHECK(a.box.y1 <= im.height);
        }
        for (int64_t i = 0; i < im.pixels.numel(); ++i) {
            CHECK(im.pixels[i] >= 0.0);
            CHECK(im.pixels[i] <= 1.0);
        }
    }
}

TEST_CASE("manifest validation catches duplicate ids and bad categories") {
    DatasetManifest m = tiny_manifest(2, {{0}, {1}});
    m.images[1].image_id = m.images[0].image_id;
    CHECK_THROWS_AS(m.validate(), ValidationError);

    DatasetManifest m2 = tiny_manifest(2, {{0}});
    m2.images[0].annotations[0].category_id = 5;
    CHECK_THROWS_AS(m2.validate(), ValidationError);
}
