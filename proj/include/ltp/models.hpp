#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "ltp/data.hpp"
#include "ltp/nn.hpp"

namespace ltp {

struct EncoderConfig {
    int in_channels = 3;
    int stem_channels = 16;
    std::vector<int> stage_channels = {32, 64, 128, 256};
    int stem_stride = 2;
};

// Stage outputs ordered stem-outward; spatial sizes strictly halve stage to
// stage. pooled is the spatially averaged last stage, {1, out_dim}.
struct EncoderOutput {
    std::vector<Var> stage_features;
    Var pooled;
};

class Encoder {
public:
    Encoder() = default;
    Encoder(const std::string& name, const EncoderConfig& cfg, Rng& rng);

    EncoderOutput forward(Tape& tape, Var image);

    int out_dim() const { return cfg_.stage_channels.back(); }
    int num_stages() const { return static_cast<int>(cfg_.stage_channels.size()); }
    int total_stride() const;
    const EncoderConfig& config() const { return cfg_; }

    void collect(std::vector<Parameter*>& out);

private:
    EncoderConfig cfg_;
    Conv2d stem_;
    std::vector<Conv2d> stages_;
};

// linear -> norm -> relu -> linear, output L2-normalized
struct ProjectionHead {
    Dense l1;
    FeatureNorm norm;
    Dense l2;

    ProjectionHead() = default;
    ProjectionHead(const std::string& name, int in_dim, int out_dim, Rng& rng)
        : l1(name + ".l1", in_dim, out_dim, rng),
          norm(name + ".norm", out_dim),
          l2(name + ".l2", out_dim, out_dim, rng) {}

    Var forward(Tape& tape, Var rows) {
        return l2_normalize_rows(l2.forward(tape, relu(norm.forward(tape, l1.forward(tape, rows)))));
    }

    void collect(std::vector<Parameter*>& out) {
        l1.collect(out);
        norm.collect(out);
        l2.collect(out);
    }
};

struct RoiConfig {
    int stage_index = 0;
    int pooled_size = 7;
};

// Integer-binned average pooling of boxes on one encoder stage, flattened to
// {n, C*P*P}. Shared by the RoI/detection heads and the frozen-feature probe.
Var pool_boxes_on_stage(Tape& tape, const EncoderOutput& enc, int stage_index, int pooled_size,
                        const std::vector<BoundingBox>& boxes, int view_size);

// Region features: integer-binned average pooling on one encoder stage,
// flattened and pushed through a projection head to the shared embedding
// space.
class RoiHead {
public:
    RoiHead() = default;
    RoiHead(const std::string& name, const RoiConfig& cfg, int stage_channels, int embed_dim, Rng& rng)
        : cfg_(cfg), proj_(name + ".proj", stage_channels * cfg.pooled_size * cfg.pooled_size,
                           embed_dim, rng) {}

    // pooled pre-projection features, {n, C*P*P}
    Var pool_boxes(Tape& tape, const EncoderOutput& enc, const std::vector<BoundingBox>& boxes,
                   int view_size) const;
    // unit-norm embeddings, {n, embed_dim}
    Var extract(Tape& tape, const EncoderOutput& enc, const std::vector<BoundingBox>& boxes,
                int view_size);

    const RoiConfig& config() const { return cfg_; }
    void collect(std::vector<Parameter*>& out) { proj_.collect(out); }

private:
    RoiConfig cfg_;
    ProjectionHead proj_;
};

class DetectionHead {
public:
    struct Output {
        Var objectness;  // {n, 1}
        Var deltas;      // {n, 4}
    };

    DetectionHead() = default;
    DetectionHead(const std::string& name, const RoiConfig& cfg, int stage_channels, int hidden,
                  Rng& rng)
        : cfg_(cfg),
          hidden_(name + ".hidden", stage_channels * cfg.pooled_size * cfg.pooled_size, hidden, rng),
          objectness_(name + ".obj", hidden, 1, rng),
          deltas_(name + ".delta", hidden, 4, rng) {}

    Output forward(Tape& tape, const EncoderOutput& enc, const std::vector<BoundingBox>& boxes,
                   int view_size);

    void zero_init() {
        hidden_.zero_init();
        objectness_.zero_init();
        deltas_.zero_init();
    }

    void collect(std::vector<Parameter*>& out) {
        hidden_.collect(out);
        objectness_.collect(out);
        deltas_.collect(out);
    }

private:
    RoiConfig cfg_;
    Dense hidden_;
    Dense objectness_;
    Dense deltas_;
};

// Four transposed-conv stages inverting the encoder's total stride. Channel
// widths follow the D -> D/4 -> D/8 -> D/32 -> 3 pattern of the full-scale
// recipe (2048 -> 512 -> 256 -> 64 -> 3), scaled by the backbone width.
class Generator {
public:
    Generator() = default;
    Generator(const std::string& name, int in_channels, int total_upsample, Rng& rng);

    Var forward(Tape& tape, Var features);

    void zero_init() {
        for (auto& l : layers_) l.zero_init();
    }
    void collect(std::vector<Parameter*>& out) {
        for (auto& l : layers_) l.collect(out);
    }

private:
    std::vector<ConvTranspose2d> layers_;
};

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise; the momentum list
// must mirror the online list in order and shape.
void ema_update(std::vector<Parameter*>& momentum, const std::vector<Parameter*>& online, double m);

// (dx, dy, dw, dh) relative to the proposal; zero deltas decode to the
// proposal itself
std::array<double, 4> encode_box_delta(const BoundingBox& proposal, const BoundingBox& target);
BoundingBox decode_box_delta(const BoundingBox& proposal, double dx, double dy, double dw, double dh);

struct ModelConfig {
    EncoderConfig encoder;
    RoiConfig roi;
    int embed_dim = 256;
    int det_hidden = 256;
    double momentum = 0.999;
    int input_size = 64;
};

// Online components plus the momentum copies of the contrastive branch.
struct Model {
    ModelConfig cfg;
    Encoder encoder;
    ProjectionHead proj;
    RoiHead roi;
    DetectionHead det;
    Generator gen;

    Encoder m_encoder;
    ProjectionHead m_proj;
    RoiHead m_roi;

    Model() = default;
    Model(const ModelConfig& config, Rng& rng);

    std::vector<Parameter*> trainable();            // everything the optimizer sees
    std::vector<Parameter*> contrastive_online();   // ema sources
    std::vector<Parameter*> momentum_params();      // ema targets
    void sync_momentum();                           // theta_k := theta_q
    void ema_step() { auto mp = momentum_params(); ema_update(mp, contrastive_online(), cfg.momentum); }
};

// ---- checkpointing ----

struct CheckpointData {
    int64_t step = 0;
    int epoch = 0;
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::map<std::string, std::string> strings;
    std::map<std::string, int64_t> ints;
};

void write_checkpoint(const std::string& dir, const CheckpointData& data);
CheckpointData read_checkpoint(const std::string& dir);

}  // namespace ltp
