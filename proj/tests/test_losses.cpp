#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "ltp/losses.hpp"

using namespace ltp;
using ltp::testing::check_gradients;
using ltp::testing::random_tensor;

namespace {

Tensor unit_rows(Tensor t) {
    int n = t.size(0), d = t.size(1);
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += t[static_cast<int64_t>(r) * d + j] * t[static_cast<int64_t>(r) * d + j];
        s = std::sqrt(s);
        for (int j = 0; j < d; ++j) t[static_cast<int64_t>(r) * d + j] /= s;
    }
    return t;
}

}  // namespace

TEST_CASE("hcl: zero negatives gives zero loss (cold start)") {
    Tensor z({1, 2}, {1, 0});
    Tensor pos({1, 2}, {0, 1});
    Tensor empty({0, 2});
    CHECK(hcl_loss_value(z, pos, empty, 0.2) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("hcl: uniform similarity collapses to ln(K+1)") {
    // z matches the positive and every negative equally: loss = ln(K+1)
    for (int k : {1, 3, 15}) {
        Tensor z({1, 2}, {1, 0});
        Tensor pos({1, 2}, {1, 0});
        Tensor negs({k, 2});
        for (int i = 0; i < k; ++i) {
            negs[i * 2] = 1;
            negs[i * 2 + 1] = 0;
        }
        CHECK(hcl_loss_value(z, pos, negs, 0.2) ==
              doctest::Approx(std::log(k + 1.0)).epsilon(1e-12));
    }
}

TEST_CASE("hcl: orthogonal positive/negative scalar case") {
    // -log(e^5 / (e^5 + e^0)) = log(1 + e^-5)
    Tensor z({1, 2}, {1, 0});
    Tensor pos({1, 2}, {1, 0});
    Tensor neg({1, 2}, {0, 1});
    CHECK(hcl_loss_value(z, pos, neg, 0.2) ==
          doctest::Approx(0.006715348489117967).epsilon(1e-12));
}

TEST_CASE("hcl: contract errors") {
    Tensor bad({1, 2}, {0.5, 0.5});
    Tensor pos({1, 2}, {1, 0});
    Tensor empty({0, 2});
    CHECK_THROWS_AS(hcl_loss_value(bad, pos, empty, 0.2), ContractError);
    CHECK_THROWS_AS(hcl_loss_value(pos, bad, empty, 0.2), ContractError);
    CHECK_THROWS_AS(hcl_loss_value(pos, pos, empty, 0.0), ContractError);
}

TEST_CASE("lcl: same kernel, batch mean over proposals") {
    Rng rng(3);
    Tensor z = unit_rows(random_tensor({2, 8}, rng));
    Tensor pos = unit_rows(random_tensor({2, 8}, rng));
    Tensor negs = unit_rows(random_tensor({5, 8}, rng));

    CHECK(lcl_loss_value(z, pos, negs, 0.2) == hcl_loss_value(z, pos, negs, 0.2));

    // batch of 2 equals the mean of the two singles
    auto row = [&](const Tensor& t, int r) {
        Tensor out({1, 8});
        for (int j = 0; j < 8; ++j) out[j] = t[static_cast<int64_t>(r) * 8 + j];
        return out;
    };
    double l0 = lcl_loss_value(row(z, 0), row(pos, 0), negs, 0.2);
    double l1 = lcl_loss_value(row(z, 1), row(pos, 1), negs, 0.2);
    CHECK(lcl_loss_value(z, pos, negs, 0.2) == doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-12));
}

TEST_CASE("hcl: monotone in the positive and negative similarities") {
    Tensor negs({1, 2}, {0, 1});
    double prev = 1e9;
    for (double c : {0.0, 0.3, 0.6, 0.9}) {
        Tensor z({1, 2}, {1, 0});
        Tensor pos({1, 2}, {c, std::sqrt(1 - c * c)});
        double l = hcl_loss_value(z, pos, negs, 0.2);
        CHECK(l < prev);
        prev = l;
    }
    // raising a negative similarity raises the loss
    Tensor z({1, 2}, {1, 0});
    Tensor pos({1, 2}, {0.8, 0.6});
    prev = -1;
    for (double c : {-0.5, 0.0, 0.5, 0.9}) {
        Tensor neg({1, 2}, {c, std::sqrt(1 - c * c)});
        double l = hcl_loss_value(z, pos, neg, 0.2);
        CHECK(l > prev);
        prev = l;
    }
}

TEST_CASE("hcl: invariant under a common rotation") {
    Rng rng(17);
    Tensor z = unit_rows(random_tensor({1, 4}, rng));
    Tensor pos = unit_rows(random_tensor({1, 4}, rng));
    Tensor negs = unit_rows(random_tensor({6, 4}, rng));
    double base = hcl_loss_value(z, pos, negs, 0.2);

    // Gram-Schmidt a random 4x4 into an orthogonal Q
    double q[4][4];
    for (auto& row : q)
        for (double& v : row) v = rng.normal();
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < i; ++j) {
            double dot = 0;
            for (int k = 0; k < 4; ++k) dot += q[i][k] * q[j][k];
            for (int k = 0; k < 4; ++k) q[i][k] -= dot * q[j][k];
        }
        double nrm = 0;
        for (int k = 0; k < 4; ++k) nrm += q[i][k] * q[i][k];
        nrm = std::sqrt(nrm);
        for (int k = 0; k < 4; ++k) q[i][k] /= nrm;
    }
    auto rotate = [&](const Tensor& t) {
        Tensor out(t.shape());
        int n = t.size(0);
        for (int r = 0; r < n; ++r)
            for (int i = 0; i < 4; ++i) {
                double s = 0;
                for (int k = 0; k < 4; ++k) s += q[i][k] * t[static_cast<int64_t>(r) * 4 + k];
                out[static_cast<int64_t>(r) * 4 + i] = s;
            }
        return out;
    };
    double rotated = hcl_loss_value(rotate(z), rotate(pos), rotate(negs), 0.2);
    CHECK(rotated == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("hlcl arithmetic") {
    CHECK(hlcl_loss_value(1, 1, 0.1, 0.05) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(hlcl_loss_value(3.7, -2.0, 0, 0) == 0.0);
    CHECK(hlcl_loss_value(2.0, 4.0, 0.1, 0.05) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK_THROWS_AS(hlcl_loss_value(1, 1, -0.1, 0.05), ContractError);
}

TEST_CASE("ar loss") {
    Rng rng(5);
    Tensor x = random_tensor({3, 2, 2}, rng);
    CHECK(ar_loss_value(x, x) == 0.0);

    Tensor zeros({3, 2, 2});
    Tensor half = Tensor::full({3, 2, 2}, 0.5);
    CHECK(ar_loss_value(zeros, half) == doctest::Approx(0.25).epsilon(1e-12));

    // random pair against the elementwise oracle
    Tensor a = random_tensor({3, 2, 2}, rng), b = random_tensor({3, 2, 2}, rng);
    double want = 0;
    for (int64_t i = 0; i < 12; ++i) want += (a[i] - b[i]) * (a[i] - b[i]);
    want /= 12.0;
    CHECK(ar_loss_value(a, b) == doctest::Approx(want).epsilon(1e-12));

    Tensor wrong({3, 2, 3});
    CHECK_THROWS_AS(ar_loss_value(x, wrong), ContractError);
}

TEST_CASE("sr loss") {
    // identical branches
    Rng rng(7);
    Tensor s1 = random_tensor({4, 3, 3}, rng);
    CHECK(sr_loss_value({s1}, {s1}) == 0.0);

    // P=1 with pre-pooled vectors
    Tensor a({1, 2}, {1, 0}), b({1, 2}, {0, 1});
    CHECK(sr_loss_value({a}, {b}) == doctest::Approx(1.0).epsilon(1e-12));

    // P=2 equals the sum of per-stage values
    Tensor c0 = random_tensor({3, 2, 2}, rng), m0 = random_tensor({3, 2, 2}, rng);
    Tensor c1 = random_tensor({5, 1, 1}, rng), m1 = random_tensor({5, 1, 1}, rng);
    double stage0 = sr_loss_value({c0}, {m0});
    double stage1 = sr_loss_value({c1}, {m1});
    CHECK(sr_loss_value({c0, c1}, {m0, m1}) == doctest::Approx(stage0 + stage1).epsilon(1e-12));

    CHECK_THROWS_AS(sr_loss_value({c0, c1}, {m0}), ContractError);
}

TEST_CASE("drc loss: convex combination") {
    CHECK(drc_loss_value(0.7, 0.3, 1.0) == 0.7);
    CHECK(drc_loss_value(0.7, 0.3, 0.0) == 0.3);
    CHECK(drc_loss_value(0.4, 0.8, 0.1) == doctest::Approx(0.76).epsilon(1e-12));
    Rng rng(9);
    for (int i = 0; i < 50; ++i) {
        double ar = rng.uniform(), sr = rng.uniform(), al = rng.uniform();
        double d = drc_loss_value(ar, sr, al);
        CHECK(d >= std::min(ar, sr) - 1e-12);
        CHECK(d <= std::max(ar, sr) + 1e-12);
    }
    CHECK_THROWS_AS(drc_loss_value(1, 1, 1.5), ContractError);
}

TEST_CASE("det loss closed forms") {
    Tape tape;
    // perfect predictions: +-10 logits, zero deltas
    DetPredictions perfect{
        .objectness_pos = tape.constant(Tensor::full({3, 1}, 10.0)),
        .deltas_pos = tape.constant(Tensor({3, 4})),
        .objectness_neg = tape.constant(Tensor::full({3, 1}, -10.0)),
        .has_negatives = true,
    };
    CHECK(det_loss(tape, perfect).val().item() < 1e-3);

    // zero-initialized head on balanced pos/neg: objectness term is ln 2
    DetPredictions zero{
        .objectness_pos = tape.constant(Tensor({4, 1})),
        .deltas_pos = tape.constant(Tensor({4, 4})),
        .objectness_neg = tape.constant(Tensor({4, 1})),
        .has_negatives = true,
    };
    CHECK(det_loss(tape, zero).val().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    // positives-only fallback
    DetPredictions pos_only{
        .objectness_pos = tape.constant(Tensor({2, 1})),
        .deltas_pos = tape.constant(Tensor({2, 4})),
        .objectness_neg = {},
        .has_negatives = false,
    };
    CHECK(det_loss(tape, pos_only).val().item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss report composition identities") {
    Rng rng(11);
    ContrastiveConfig cc;
    for (int i = 0; i < 100; ++i) {
        double hcl = rng.uniform(0, 3), lcl = rng.uniform(0, 3), ar = rng.uniform(0, 2);
        double sr = rng.uniform(0, 2), det = rng.uniform(0, 2), alpha_r = rng.uniform();
        LossReport r = compose_report(hcl, lcl, ar, sr, det, cc, alpha_r);
        CHECK(std::abs(r.l_hlcl - (cc.alpha_c * r.l_hcl + cc.beta_c * r.l_lcl)) < 1e-9);
        CHECK(std::abs(r.l_drc - (alpha_r * r.l_ar + (1 - alpha_r) * r.l_sr)) < 1e-9);
        CHECK(std::abs(r.total - (r.l_hlcl + r.l_drc + r.l_det)) < 1e-9);
    }
    // unit components with the default weights: 0.15 + 1.0 + 1.0
    LossReport unit = compose_report(1, 1, 1, 1, 1, cc, 0.3);
    CHECK(unit.total == doctest::Approx(2.15).epsilon(1e-12));
    // det-only
    LossReport det_only = compose_report(0, 0, 0, 0, 1.7, cc, 0.5);
    CHECK(det_only.total == doctest::Approx(1.7).epsilon(1e-12));
}

TEST_CASE("loss gradients vs finite differences") {
    Rng rng(13);

    // contrastive: check through the l2-normalize composition the training
    // path uses, so finite-difference steps keep the kernel contract intact
    Tensor pre = random_tensor({2, 8}, rng);
    Tensor pos = unit_rows(random_tensor({2, 8}, rng));
    Tensor negs = unit_rows(random_tensor({6, 8}, rng));
    auto rc = check_gradients(
        [&](Tape& t, const std::vector<Var>& v) {
            return hcl_loss(t, l2_normalize_rows(v[0]), pos, negs, 0.2);
        },
        {pre}, 1e-5);
    CHECK(rc.max_rel_err < 1e-6);

    // ar
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor xh = random_tensor({3, 4, 4}, rng);
    rc = check_gradients(
        [&](Tape& t, const std::vector<Var>& v) { return ar_loss(t, x, v[0]); }, {xh}, 1e-5);
    CHECK(rc.max_rel_err < 1e-6);

    // sr wrt the masked branch (clean branch is detached in training)
    Tensor clean = random_tensor({4, 3, 3}, rng);
    Tensor masked = random_tensor({4, 3, 3}, rng);
    rc = check_gradients(
        [&](Tape& t, const std::vector<Var>& v) {
            return sr_loss({t.constant(clean)}, {v[0]});
        },
        {masked}, 1e-5);
    CHECK(rc.max_rel_err < 1e-6);

    // det
    Tensor obj_p = random_tensor({3, 1}, rng);
    Tensor obj_n = random_tensor({3, 1}, rng);
    Tensor deltas = random_tensor({3, 4}, rng, 0.4);
    rc = check_gradients(
        [&](Tape& t, const std::vector<Var>& v) {
            DetPredictions p{v[0], v[1], v[2], true};
            return det_loss(t, p);
        },
        {obj_p, deltas, obj_n}, 1e-5);
    CHECK(rc.max_rel_err < 1e-6);
}

TEST_CASE("background box sampling") {
    Rng rng(15);
    std::vector<BoundingBox> proposals{{10, 10, 30, 30}, {40, 40, 60, 60}};
    auto boxes = sample_background_boxes(64, 64, proposals, 6, rng);
    CHECK(!boxes.empty());
    for (const BoundingBox& b : boxes) {
        CHECK(b.x0 >= 0);
        CHECK(b.y1 <= 64);
        for (const BoundingBox& p : proposals) CHECK(iou(b, p) < 0.1);
    }

    // crowded image: accept fewer (possibly zero) negatives
    std::vector<BoundingBox> wall{{0, 0, 64, 64}};
    auto none = sample_background_boxes(64, 64, wall, 4, rng, 5);
    CHECK(none.size() <= 4);
}
