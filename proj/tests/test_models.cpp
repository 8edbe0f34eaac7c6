#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "ltp/models.hpp"

using namespace ltp;
using ltp::testing::random_tensor;

namespace {

void zero_all(std::vector<Parameter*> params) {
    for (Parameter* p : params) init_zero(p->value);
}

Tensor random_image(int size, Rng& rng) {
    Tensor t({3, size, size});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
    return t;
}

}  // namespace

TEST_CASE("encoder: stage shapes for a 64x64 input") {
    Rng rng(1);
    Encoder enc("e", EncoderConfig{}, rng);
    CHECK(enc.total_stride() == 32);
    Tape tape;
    EncoderOutput out = enc.forward(tape, tape.constant(random_image(64, rng)));
    REQUIRE(out.stage_features.size() == 4);
    // stem stride 2 then four stride-2 stages: 16, 8, 4, 2
    CHECK(out.stage_features[0].val().shape() == std::vector<int>{32, 16, 16});
    CHECK(out.stage_features[1].val().shape() == std::vector<int>{64, 8, 8});
    CHECK(out.stage_features[2].val().shape() == std::vector<int>{128, 4, 4});
    CHECK(out.stage_features[3].val().shape() == std::vector<int>{256, 2, 2});
    CHECK(out.pooled.val().shape() == std::vector<int>{1, 256});

    CHECK_THROWS_AS(enc.forward(tape, tape.constant(Tensor({3, 48, 48}))), ContractError);
    CHECK_THROWS_AS(enc.forward(tape, tape.constant(Tensor({1, 64, 64}))), ContractError);
}

TEST_CASE("encoder: zero input through a zero-initialized encoder") {
    Rng rng(2);
    Encoder enc("e", EncoderConfig{}, rng);
    std::vector<Parameter*> params;
    enc.collect(params);
    zero_all(params);
    Tape tape;
    EncoderOutput out = enc.forward(tape, tape.constant(Tensor({3, 64, 64})));
    for (const Var& s : out.stage_features)
        for (int64_t i = 0; i < s.val().numel(); ++i) REQUIRE(s.val()[i] == 0.0);
}

TEST_CASE("encoder: determinism on identical inputs") {
    Rng rng(3);
    Encoder enc("e", EncoderConfig{}, rng);
    Tensor img = random_image(64, rng);
    Tape tape;
    EncoderOutput a = enc.forward(tape, tape.constant(img));
    EncoderOutput b = enc.forward(tape, tape.constant(img));
    for (int64_t i = 0; i < a.pooled.val().numel(); ++i)
        REQUIRE(a.pooled.val()[i] == b.pooled.val()[i]);
}

TEST_CASE("ema update") {
    Parameter k("k", Tensor({1, 1}, {1.0}));
    Parameter q("q", Tensor({1, 1}, {0.0}));
    std::vector<Parameter*> mom{&k};
    std::vector<Parameter*> onl{&q};

    ema_update(mom, onl, 1.0);
    CHECK(k.value[0] == 1.0);
    ema_update(mom, onl, 0.0);
    CHECK(k.value[0] == 0.0);

    k.value[0] = 1.0;
    ema_update(mom, onl, 0.999);
    CHECK(k.value[0] == doctest::Approx(0.999).epsilon(1e-15));

    // closed form after n constant updates: a + m^n (b - a)
    const double a = -0.3, b = 1.7, m = 0.97;
    k.value[0] = b;
    q.value[0] = a;
    for (int n = 1; n <= 100; ++n) {
        ema_update(mom, onl, m);
        CHECK(k.value[0] == doctest::Approx(a + std::pow(m, n) * (b - a)).epsilon(1e-9));
    }

    Parameter wrong("w", Tensor({2, 2}));
    std::vector<Parameter*> bad{&wrong};
    CHECK_THROWS_AS(ema_update(bad, onl, 0.9), ContractError);
}

TEST_CASE("roi head: full-extent box equals adaptive average pooling, unit norms") {
    Rng rng(5);
    ModelConfig mc;
    Model model(mc, rng);
    Tape tape;
    Tensor img = random_image(64, rng);
    EncoderOutput enc = model.encoder.forward(tape, tape.constant(img));

    BoundingBox full{0, 0, 64, 64};
    Var pooled = model.roi.pool_boxes(tape, enc, {full}, 64);
    const Tensor& feat = enc.stage_features[0].val();  // {32, 16, 16}
    int C = feat.size(0), S = feat.size(1), P = model.cfg.roi.pooled_size;
    REQUIRE(pooled.val().shape() == std::vector<int>{1, C * P * P});
    // independent adaptive-average reference
    for (int c = 0; c < C; ++c)
        for (int py = 0; py < P; ++py)
            for (int px = 0; px < P; ++px) {
                int y0 = py * S / P, y1 = ((py + 1) * S + P - 1) / P;
                int x0 = px * S / P, x1 = ((px + 1) * S + P - 1) / P;
                double s = 0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) s += feat[(static_cast<int64_t>(c) * S + y) * S + x];
                s /= (y1 - y0) * (x1 - x0);
                REQUIRE(pooled.val()[(static_cast<int64_t>(c) * P + py) * P + px] ==
                        doctest::Approx(s).epsilon(1e-13));
            }

    // identical boxes give identical embeddings; rows are unit-norm
    BoundingBox b{8, 8, 40, 40};
    Var z = model.roi.extract(tape, enc, {b, b}, 64);
    REQUIRE(z.val().shape() == std::vector<int>{2, 256});
    for (int j = 0; j < 256; ++j) REQUIRE(z.val()[j] == z.val()[256 + j]);
    for (int r = 0; r < 2; ++r) {
        double n = 0;
        for (int j = 0; j < 256; ++j) n += z.val()[r * 256 + j] * z.val()[r * 256 + j];
        CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-6);
    }
}

TEST_CASE("generator: shape contract and zero propagation") {
    Rng rng(7);
    ModelConfig mc;
    Model model(mc, rng);
    Tape tape;

    for (int size : {32, 64, 96}) {
        Tensor img = random_image(size, rng);
        EncoderOutput enc = model.encoder.forward(tape, tape.constant(img));
        Var out = model.gen.forward(tape, enc.stage_features.back());
        CHECK(out.val().shape() == std::vector<int>{3, size, size});
    }

    model.gen.zero_init();
    Var zero_out = model.gen.forward(tape, tape.constant(Tensor({256, 2, 2})));
    for (int64_t i = 0; i < zero_out.val().numel(); ++i) REQUIRE(zero_out.val()[i] == 0.0);

    // determinism
    Rng rng2(7);
    Model model2(mc, rng2);
    Tensor feat = random_tensor({256, 2, 2}, rng);
    Var a = model2.gen.forward(tape, tape.constant(feat));
    Var b = model2.gen.forward(tape, tape.constant(feat));
    for (int64_t i = 0; i < a.val().numel(); ++i) REQUIRE(a.val()[i] == b.val()[i]);
}

TEST_CASE("generator channel pattern matches the full-scale recipe at width 2048") {
    // 2048 -> 512 -> 256 -> 64 -> 3 is the published shape; the desk width
    // scales the same pattern
    Rng rng(9);
    Generator g("g", 2048, 32, rng);
    std::vector<Parameter*> params;
    g.collect(params);
    REQUIRE(params.size() == 8);  // 4 x (w, b)
    CHECK(params[0]->value.shape() == std::vector<int>{2048, 512, 4, 4});
    CHECK(params[2]->value.shape() == std::vector<int>{512, 256, 4, 4});
    CHECK(params[4]->value.shape() == std::vector<int>{256, 64, 4, 4});
    CHECK(params[6]->value.shape() == std::vector<int>{64, 3, 4, 4});
}

TEST_CASE("detection head: zero init and delta parameterization") {
    Rng rng(11);
    ModelConfig mc;
    Model model(mc, rng);
    model.det.zero_init();
    Tape tape;
    EncoderOutput enc = model.encoder.forward(tape, tape.constant(random_image(64, rng)));
    BoundingBox b{10, 10, 30, 30};
    auto out = model.det.forward(tape, enc, {b, b}, 64);
    for (int64_t i = 0; i < out.objectness.val().numel(); ++i) CHECK(out.objectness.val()[i] == 0.0);
    for (int64_t i = 0; i < out.deltas.val().numel(); ++i) CHECK(out.deltas.val()[i] == 0.0);

    // zero deltas decode to the proposal itself
    BoundingBox same = decode_box_delta(b, 0, 0, 0, 0);
    CHECK(same.x0 == b.x0);
    CHECK(same.y1 == b.y1);

    // encode/decode round trip on random pairs
    for (int i = 0; i < 100; ++i) {
        BoundingBox p{rng.uniform(0, 20), rng.uniform(0, 20), 0, 0};
        p.x1 = p.x0 + rng.uniform(1, 30);
        p.y1 = p.y0 + rng.uniform(1, 30);
        BoundingBox t{rng.uniform(0, 20), rng.uniform(0, 20), 0, 0};
        t.x1 = t.x0 + rng.uniform(1, 30);
        t.y1 = t.y0 + rng.uniform(1, 30);
        auto d = encode_box_delta(p, t);
        BoundingBox back = decode_box_delta(p, d[0], d[1], d[2], d[3]);
        CHECK(back.x0 == doctest::Approx(t.x0).epsilon(1e-9));
        CHECK(back.y0 == doctest::Approx(t.y0).epsilon(1e-9));
        CHECK(back.x1 == doctest::Approx(t.x1).epsilon(1e-9));
        CHECK(back.y1 == doctest::Approx(t.y1).epsilon(1e-9));
    }
}

TEST_CASE("momentum branch: frozen forwards contribute no gradients") {
    Rng rng(13);
    ModelConfig mc;
    mc.input_size = 32;
    mc.encoder.stage_channels = {8, 16, 32, 64};
    Model model(mc, rng);

    Tape tape;
    Tensor img = random_image(32, rng);
    EncoderOutput enc = model.encoder.forward(tape, tape.constant(img));
    Var z = model.proj.forward(tape, enc.pooled);

    Tensor key;
    {
        FrozenGuard freeze(tape);
        EncoderOutput menc = model.m_encoder.forward(tape, tape.constant(img));
        key = model.m_proj.forward(tape, menc.pooled).val();
    }
    Var loss = sum_all(row_dot_const(z, key));
    tape.backward(loss);
    tape.export_grads();

    bool online_has_grad = false;
    for (Parameter* p : model.trainable())
        for (int64_t i = 0; i < p->grad.numel(); ++i)
            if (p->grad[i] != 0.0) online_has_grad = true;
    CHECK(online_has_grad);
    for (Parameter* p : model.momentum_params())
        for (int64_t i = 0; i < p->grad.numel(); ++i) REQUIRE(p->grad[i] == 0.0);

    // momentum parameters are not in the optimizer's set
    auto trainable = model.trainable();
    for (Parameter* p : model.momentum_params())
        CHECK(std::find(trainable.begin(), trainable.end(), p) == trainable.end());
}

TEST_CASE("sync_momentum copies the online weights") {
    Rng rng(17);
    ModelConfig mc;
    Model model(mc, rng);
    auto online = model.contrastive_online();
    auto mom = model.momentum_params();
    REQUIRE(online.size() == mom.size());
    for (size_t i = 0; i < online.size(); ++i) {
        REQUIRE(online[i]->value.same_shape(mom[i]->value));
        for (int64_t j = 0; j < online[i]->value.numel(); ++j)
            REQUIRE(online[i]->value[j] == mom[i]->value[j]);
    }
}

TEST_CASE("checkpoint round trip and corruption errors") {
    namespace fs = std::filesystem;
    std::string dir = (fs::temp_directory_path() / "ltp_ckpt_test").string();
    fs::remove_all(dir);

    Rng rng(19);
    CheckpointData data;
    data.step = 42;
    data.epoch = 3;
    data.tensors.emplace_back("a.w", random_tensor({3, 4}, rng));
    data.tensors.emplace_back("b.w", random_tensor({2, 2, 2}, rng));
    data.strings["rng"] = "12345 678";
    data.ints["queue.fill"] = 7;
    write_checkpoint(dir, data);

    CheckpointData back = read_checkpoint(dir);
    CHECK(back.step == 42);
    CHECK(back.epoch == 3);
    CHECK(back.ints["queue.fill"] == 7);
    CHECK(back.strings["rng"] == "12345 678");
    REQUIRE(back.tensors.size() == 2);
    for (size_t i = 0; i < 2; ++i) {
        REQUIRE(back.tensors[i].first == data.tensors[i].first);
        REQUIRE(back.tensors[i].second.same_shape(data.tensors[i].second));
        for (int64_t j = 0; j < back.tensors[i].second.numel(); ++j)
            REQUIRE(back.tensors[i].second[j] == data.tensors[i].second[j]);
    }

    // truncate the blob: the named tensor error must surface
    fs::resize_file(dir + "/data.bin", 8);
    try {
        read_checkpoint(dir);
        FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
        CHECK(std::string(e.what()).find("a.w") != std::string::npos);
    }
    fs::remove_all(dir);
}
