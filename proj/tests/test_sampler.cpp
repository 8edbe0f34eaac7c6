#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <boost/rational.hpp>
#include <cmath>

#include "ltp/data.hpp"
#include "ltp/sampler.hpp"

using namespace ltp;

namespace {

// Brute-force re-evaluation of the score and repeat factor from raw counts,
// kept independent of the implementation (boost::rational vs the in-tree
// arithmetic).
using Rat = boost::rational<long long>;

double oracle_combined(long long img_with, long long n_img, long long inst, long long n_inst,
                       int epoch, int t_max) {
    Rat a(img_with, n_img);
    Rat b = n_inst > 0 ? Rat(inst, n_inst) : Rat(0);
    Rat alpha(epoch, t_max);
    Rat num = a * b;
    Rat den = alpha * a + (Rat(1) - alpha) * b;
    if (den == Rat(0)) return 0.0;
    Rat f = num / den;
    return static_cast<double>(f.numerator()) / static_cast<double>(f.denominator());
}

double oracle_repeat(double f, double t) { return f > 0 ? std::max(1.0, std::sqrt(t / f)) : 1.0; }

DatasetManifest manifest_from_layout(int num_classes, const std::vector<std::vector<int>>& layout) {
    DatasetManifest m;
    m.num_classes = num_classes;
    int64_t id = 100;
    for (const auto& classes : layout) {
        ImageRecord im;
        im.image_id = id++;
        im.width = im.height = 32;
        double x = 0.5;
        for (int c : classes) {
            im.annotations.push_back({BoundingBox{x, 0.5, x + 3, 4}, c});
            x += 0.25;
        }
        m.images.push_back(std::move(im));
    }
    return m;
}

}  // namespace

TEST_CASE("combined_score: fixed points and boundaries") {
    for (double alpha : {0.0, 0.3, 0.5, 1.0})
        CHECK(combined_score(0.5, 0.5, alpha) == doctest::Approx(0.5).epsilon(1e-15));

    Rng rng(5);
    for (int i = 0; i < 100; ++i) {
        double a = rng.uniform(1e-6, 1.0), b = rng.uniform(1e-6, 1.0);
        CHECK(combined_score(a, b, 0.0) == doctest::Approx(a).epsilon(1e-12));
        CHECK(combined_score(a, b, 1.0) == doctest::Approx(b).epsilon(1e-12));
    }

    // direct evaluation of the blend at (0.2, 0.05, 0.25): 0.01 / 0.0875 = 4/35
    CHECK(combined_score(0.2, 0.05, 0.25) == doctest::Approx(0.11428571428571428).epsilon(1e-12));

    CHECK_THROWS_AS(combined_score(0.0, 0.0, 0.5), DomainError);
    // one factor zero with a vanishing denominator collapses to 0
    CHECK(combined_score(0.3, 0.0, 0.0) == 0.0);
    CHECK(combined_score(0.0, 0.3, 1.0) == 0.0);
}

TEST_CASE("combined_score: swap symmetry and bounds") {
    Rng rng(6);
    for (int i = 0; i < 500; ++i) {
        double a = rng.uniform(1e-4, 1.0), b = rng.uniform(1e-4, 1.0);
        double alpha = rng.uniform();
        CHECK(combined_score(a, b, alpha) ==
              doctest::Approx(combined_score(b, a, 1.0 - alpha)).epsilon(1e-12));
        double f = combined_score(a, b, alpha);
        CHECK(f >= std::min(a, b) - 1e-12);
        CHECK(f <= std::max(a, b) + 1e-12);
    }
}

TEST_CASE("alpha_schedule") {
    CHECK(alpha_schedule(12, 12) == 1.0);
    CHECK(alpha_schedule(6, 12) == 0.5);
    CHECK(alpha_schedule(1, 12) == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
    CHECK_THROWS_AS(alpha_schedule(0, 12), DomainError);
    CHECK_THROWS_AS(alpha_schedule(13, 12), DomainError);
}

TEST_CASE("repeat_factor") {
    CHECK(repeat_factor(0.001, 0.001) == 1.0);
    CHECK(repeat_factor(0.00001, 0.001) == doctest::Approx(10.0).epsilon(1e-15));
    CHECK(repeat_factor(0.004, 0.001) == 1.0);  // clamp branch: sqrt gives 0.5
    CHECK_THROWS_AS(repeat_factor(0.0, 0.001), DomainError);
    CHECK_THROWS_AS(repeat_factor(-1.0, 0.001), DomainError);
}

TEST_CASE("build_table matches the rational brute-force oracle") {
    Rng rng(77);
    ScheduleConfig cfg;
    cfg.t_max = 12;
    cfg.t_threshold = 0.05;
    for (int trial = 0; trial < 10; ++trial) {
        int C = 2 + static_cast<int>(rng.uniform_int(6));
        int n_img = C + static_cast<int>(rng.uniform_int(15));
        std::vector<std::vector<int>> layout(static_cast<size_t>(n_img));
        for (auto& classes : layout) {
            int k = 1 + static_cast<int>(rng.uniform_int(4));
            for (int j = 0; j < k; ++j) classes.push_back(static_cast<int>(rng.uniform_int(static_cast<uint64_t>(C))));
        }
        DatasetManifest m = manifest_from_layout(C, layout);
        ClassStats s = compute_class_stats(m);
        for (int epoch = 1; epoch <= cfg.t_max; ++epoch) {
            RepeatFactorTable t = build_table(s, epoch, cfg);
            CHECK(t.alpha_d == static_cast<double>(epoch) / cfg.t_max);
            for (int c = 0; c < C; ++c) {
                double f = oracle_combined(s.images_with[static_cast<size_t>(c)], s.num_images,
                                           s.instances[static_cast<size_t>(c)], s.num_instances,
                                           epoch, cfg.t_max);
                CHECK(t.combined_score[static_cast<size_t>(c)] == f);
                CHECK(t.repeat_factor[static_cast<size_t>(c)] == oracle_repeat(f, cfg.t_threshold));
            }
        }
    }
}

TEST_CASE("build_table: balanced data never oversamples") {
    SyntheticConfig scfg;
    scfg.num_images = 200;
    scfg.num_classes = 10;
    scfg.zipf_exponent = 0.0;
    scfg.image_size = 32;
    scfg.seed = 13;
    ClassStats s = compute_class_stats(generate_synthetic(scfg));
    ScheduleConfig cfg;  // t = 0.001
    for (int epoch = 1; epoch <= cfg.t_max; ++epoch) {
        RepeatFactorTable t = build_table(s, epoch, cfg);
        for (double r : t.repeat_factor) CHECK(r == 1.0);
    }
}

TEST_CASE("build_table: one-class dataset") {
    DatasetManifest m = manifest_from_layout(1, {{0}, {0, 0}, {0}});
    ClassStats s = compute_class_stats(m);
    ScheduleConfig cfg;
    for (int epoch : {1, 6, 12}) {
        RepeatFactorTable t = build_table(s, epoch, cfg);
        CHECK(t.combined_score[0] == 1.0);
        CHECK(t.repeat_factor[0] == 1.0);
    }
}

TEST_CASE("build_table: absent classes get f=0, r=1") {
    DatasetManifest m = manifest_from_layout(3, {{0}, {1, 0}});
    ClassStats s = compute_class_stats(m);
    RepeatFactorTable t = build_table(s, 3, {.t_threshold = 0.5, .t_max = 12});
    CHECK(t.combined_score[2] == 0.0);
    CHECK(t.repeat_factor[2] == 1.0);
}

TEST_CASE("tail emphasis grows with the epoch") {
    // tail class: f_in < f_im, so the blend decreases in T and r is
    // non-decreasing
    std::vector<std::vector<int>> layout;
    layout.push_back({1});  // one lonely tail instance
    for (int i = 0; i < 9; ++i) layout.push_back({0, 0, 0, 0, 0});
    ClassStats s = compute_class_stats(manifest_from_layout(2, layout));
    REQUIRE(s.f_in[1] < s.f_im[1]);
    ScheduleConfig cfg{.t_threshold = 0.2, .t_max = 12};
    double prev_f = 2.0, prev_r = 0.0;
    for (int epoch = 1; epoch <= 12; ++epoch) {
        RepeatFactorTable t = build_table(s, epoch, cfg);
        CHECK(t.combined_score[1] <= prev_f + 1e-15);
        CHECK(t.repeat_factor[1] >= prev_r - 1e-15);
        prev_f = t.combined_score[1];
        prev_r = t.repeat_factor[1];
    }
}

TEST_CASE("zipf data: repeat factor ordered against class frequency") {
    SyntheticConfig scfg;
    scfg.num_images = 400;
    scfg.num_classes = 12;
    scfg.zipf_exponent = 1.2;
    scfg.image_size = 32;
    scfg.seed = 21;
    ClassStats s = compute_class_stats(generate_synthetic(scfg));
    RepeatFactorTable t = build_table(s, 6, {.t_threshold = 0.05, .t_max = 12});

    std::vector<size_t> order(12);
    for (size_t i = 0; i < 12; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return t.combined_score[a] > t.combined_score[b]; });
    for (size_t i = 1; i < order.size(); ++i)
        CHECK(t.repeat_factor[order[i - 1]] <= t.repeat_factor[order[i]] + 1e-15);
}

TEST_CASE("epoch schedule: no-op resampling is a permutation") {
    DatasetManifest m = manifest_from_layout(2, {{0}, {1}, {0, 1}, {0}});
    ClassStats s = compute_class_stats(m);
    RepeatFactorTable t = build_table(s, 1, {.t_threshold = 0.0001, .t_max = 12});
    for (double r : t.repeat_factor) REQUIRE(r == 1.0);

    EpochSchedule sched = build_epoch_schedule(m, t, 99);
    CHECK(sched.image_ids.size() == 4);
    std::vector<int64_t> sorted = sched.image_ids;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int64_t>{100, 101, 102, 103});
}

TEST_CASE("epoch schedule: determinism and per-image expected multiplicity") {
    DatasetManifest m = manifest_from_layout(2, {{0, 1}});
    RepeatFactorTable t;
    t.epoch = 1;
    t.alpha_d = 0.5;
    t.combined_score = {0.5, 0.01};
    t.repeat_factor = {1.0, 2.5};

    CHECK(image_repeat_factor(m.images[0], t) == 2.5);

    EpochSchedule a = build_epoch_schedule(m, t, 7);
    EpochSchedule b = build_epoch_schedule(m, t, 7);
    CHECK(a.image_ids == b.image_ids);

    double total = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        EpochSchedule s = build_epoch_schedule(m, t, static_cast<uint64_t>(i));
        size_t n = s.image_ids.size();
        CHECK((n == 2 || n == 3));
        total += static_cast<double>(n);
    }
    CHECK(total / trials == doctest::Approx(2.5).epsilon(0.02));
}

TEST_CASE("epoch schedule: image multiplicity oracle on small manifests") {
    Rng rng(404);
    for (int trial = 0; trial < 5; ++trial) {
        int C = 3;
        std::vector<std::vector<int>> layout;
        int n_img = 5 + static_cast<int>(rng.uniform_int(15));
        for (int i = 0; i < n_img; ++i) {
            std::vector<int> cs;
            int k = 1 + static_cast<int>(rng.uniform_int(3));
            for (int j = 0; j < k; ++j) cs.push_back(static_cast<int>(rng.uniform_int(3)));
            layout.push_back(cs);
        }
        DatasetManifest m = manifest_from_layout(C, layout);
        ClassStats s = compute_class_stats(m);
        RepeatFactorTable t = build_table(s, 9, {.t_threshold = 0.3, .t_max = 12});

        for (const ImageRecord& im : m.images) {
            // exhaustive independent recomputation of r(I)
            double want = 1.0;
            std::vector<bool> seen(3, false);
            for (const Annotation& a : im.annotations) seen[static_cast<size_t>(a.category_id)] = true;
            for (int c = 0; c < 3; ++c)
                if (seen[static_cast<size_t>(c)]) want = std::max(want, t.repeat_factor[static_cast<size_t>(c)]);
            CHECK(image_repeat_factor(im, t) == want);
        }

        // schedule never down-samples
        EpochSchedule sched = build_epoch_schedule(m, t, 5);
        CHECK(sched.image_ids.size() >= m.images.size());
    }
}

TEST_CASE("table csv shape") {
    DatasetManifest m = manifest_from_layout(2, {{0}, {1}});
    ClassStats s = compute_class_stats(m);
    RepeatFactorTable t = build_table(s, 2, {.t_threshold = 0.01, .t_max = 4});
    std::string csv = table_to_csv(t, s);
    CHECK(csv.find("class_id,f_im,f_in,f,r\n") == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}
