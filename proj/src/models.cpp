#include "ltp/models.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace ltp {

using nlohmann::json;

Encoder::Encoder(const std::string& name, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.stage_channels.empty()) throw ConfigError("encoder needs at least one stage");
    stem_ = Conv2d(name + ".stem", cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride, 1, rng);
    int prev = cfg.stem_channels;
    for (size_t i = 0; i < cfg.stage_channels.size(); ++i) {
        stages_.emplace_back(name + ".stage" + std::to_string(i), prev, cfg.stage_channels[i], 3, 2,
                             1, rng);
        prev = cfg.stage_channels[i];
    }
}

int Encoder::total_stride() const {
    return cfg_.stem_stride * (1 << static_cast<int>(cfg_.stage_channels.size()));
}

EncoderOutput Encoder::forward(Tape& tape, Var image) {
    const Tensor& v = image.val();
    if (v.dim() != 3 || v.size(0) != cfg_.in_channels)
        throw ContractError("encoder expects {" + std::to_string(cfg_.in_channels) +
                            ",H,W} input, got " + v.shape_str());
    if (v.size(1) % total_stride() != 0 || v.size(2) % total_stride() != 0)
        throw ContractError("encoder input " + v.shape_str() + " must be a multiple of stride " +
                            std::to_string(total_stride()));
    EncoderOutput out;
    Var x = relu(stem_.forward(tape, image));
    for (auto& stage : stages_) {
        x = relu(stage.forward(tape, x));
        out.stage_features.push_back(x);
    }
    out.pooled = global_avg_pool(x);
    return out;
}

void Encoder::collect(std::vector<Parameter*>& out) {
    stem_.collect(out);
    for (auto& s : stages_) s.collect(out);
}

Var pool_boxes_on_stage(Tape& tape, const EncoderOutput& enc, int stage_index, int pooled_size,
                        const std::vector<BoundingBox>& boxes, int view_size) {
    if (boxes.empty()) throw ContractError("pool_boxes: empty box list");
    size_t si = static_cast<size_t>(stage_index);
    if (si >= enc.stage_features.size())
        throw ContractError("roi stage index " + std::to_string(stage_index) + " out of range");
    Var feat = enc.stage_features[si];
    double stride = static_cast<double>(view_size) / feat.val().size(2);
    std::vector<Var> rows;
    rows.reserve(boxes.size());
    for (const BoundingBox& b : boxes)
        rows.push_back(roi_avg_pool(feat, b.x0 / stride, b.y0 / stride, b.x1 / stride, b.y1 / stride,
                                    pooled_size));
    return rows.size() == 1 ? rows[0] : stack_rows(tape, rows);
}

Var RoiHead::pool_boxes(Tape& tape, const EncoderOutput& enc, const std::vector<BoundingBox>& boxes,
                        int view_size) const {
    return pool_boxes_on_stage(tape, enc, cfg_.stage_index, cfg_.pooled_size, boxes, view_size);
}

Var RoiHead::extract(Tape& tape, const EncoderOutput& enc, const std::vector<BoundingBox>& boxes,
                     int view_size) {
    return proj_.forward(tape, pool_boxes(tape, enc, boxes, view_size));
}

DetectionHead::Output DetectionHead::forward(Tape& tape, const EncoderOutput& enc,
                                             const std::vector<BoundingBox>& boxes, int view_size) {
    if (boxes.empty()) throw ContractError("detection head: empty box list");
    size_t si = static_cast<size_t>(cfg_.stage_index);
    Var feat = enc.stage_features.at(si);
    double stride = static_cast<double>(view_size) / feat.val().size(2);
    std::vector<Var> rows;
    rows.reserve(boxes.size());
    for (const BoundingBox& b : boxes)
        rows.push_back(roi_avg_pool(feat, b.x0 / stride, b.y0 / stride, b.x1 / stride, b.y1 / stride,
                                    cfg_.pooled_size));
    Var pooled = rows.size() == 1 ? rows[0] : stack_rows(tape, rows);
    Var h = relu(hidden_.forward(tape, pooled));
    return {objectness_.forward(tape, h), deltas_.forward(tape, h)};
}

Generator::Generator(const std::string& name, int in_channels, int total_upsample, Rng& rng) {
    if (total_upsample != 16 && total_upsample != 32)
        throw ConfigError("generator supports x16 or x32 upsampling, got x" +
                          std::to_string(total_upsample));
    int first_stride = total_upsample / 8;  // remaining three layers are x2 each
    std::vector<int> chans = {in_channels, std::max(3, in_channels / 4), std::max(3, in_channels / 8),
                              std::max(3, in_channels / 32), 3};
    std::vector<int> strides = {first_stride, 2, 2, 2};
    for (int i = 0; i < 4; ++i) {
        int pad = strides[static_cast<size_t>(i)] == 4 ? 0 : 1;
        layers_.emplace_back(name + ".deconv" + std::to_string(i), chans[static_cast<size_t>(i)],
                             chans[static_cast<size_t>(i + 1)], 4, strides[static_cast<size_t>(i)],
                             pad, rng);
    }
}

Var Generator::forward(Tape& tape, Var features) {
    Var x = features;
    for (size_t i = 0; i < layers_.size(); ++i) {
        x = layers_[i].forward(tape, x);
        if (i + 1 < layers_.size()) x = relu(x);
    }
    return x;
}

void ema_update(std::vector<Parameter*>& momentum, const std::vector<Parameter*>& online, double m) {
    if (m < 0 || m > 1) throw ContractError("ema momentum must be in [0, 1]");
    if (momentum.size() != online.size())
        throw ContractError("ema: " + std::to_string(momentum.size()) + " momentum vs " +
                            std::to_string(online.size()) + " online parameters");
    for (size_t i = 0; i < momentum.size(); ++i) {
        Parameter* k = momentum[i];
        Parameter* q = online[i];
        if (!k->value.same_shape(q->value))
            throw ContractError("ema shape mismatch at " + q->name + ": " + k->value.shape_str() +
                                " vs " + q->value.shape_str());
        for (int64_t j = 0; j < k->value.numel(); ++j)
            k->value[j] = m * k->value[j] + (1.0 - m) * q->value[j];
    }
}

std::array<double, 4> encode_box_delta(const BoundingBox& proposal, const BoundingBox& target) {
    double pw = proposal.width(), ph = proposal.height();
    double px = proposal.x0 + pw / 2, py = proposal.y0 + ph / 2;
    double tw = target.width(), th = target.height();
    double tx = target.x0 + tw / 2, ty = target.y0 + th / 2;
    return {(tx - px) / pw, (ty - py) / ph, std::log(tw / pw), std::log(th / ph)};
}

BoundingBox decode_box_delta(const BoundingBox& proposal, double dx, double dy, double dw, double dh) {
    double pw = proposal.width(), ph = proposal.height();
    double px = proposal.x0 + pw / 2, py = proposal.y0 + ph / 2;
    double cx = px + dx * pw, cy = py + dy * ph;
    double w = pw * std::exp(dw), h = ph * std::exp(dh);
    return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

Model::Model(const ModelConfig& config, Rng& rng) : cfg(config) {
    const int stage_c = config.encoder.stage_channels.at(static_cast<size_t>(config.roi.stage_index));
    encoder = Encoder("encoder", config.encoder, rng);
    proj = ProjectionHead("proj", encoder.out_dim(), config.embed_dim, rng);
    roi = RoiHead("roi", config.roi, stage_c, config.embed_dim, rng);
    det = DetectionHead("det", config.roi, stage_c, config.det_hidden, rng);
    gen = Generator("gen", encoder.out_dim(), encoder.total_stride(), rng);
    if (config.input_size % encoder.total_stride() != 0)
        throw ConfigError("input_size " + std::to_string(config.input_size) +
                          " is not a multiple of the encoder stride " +
                          std::to_string(encoder.total_stride()));

    // momentum copies share the construction path, then adopt online values
    Rng clone_rng(0);
    m_encoder = Encoder("m_encoder", config.encoder, clone_rng);
    m_proj = ProjectionHead("m_proj", encoder.out_dim(), config.embed_dim, clone_rng);
    m_roi = RoiHead("m_roi", config.roi, stage_c, config.embed_dim, clone_rng);
    sync_momentum();
}

std::vector<Parameter*> Model::trainable() {
    std::vector<Parameter*> out;
    encoder.collect(out);
    proj.collect(out);
    roi.collect(out);
    det.collect(out);
    gen.collect(out);
    return out;
}

std::vector<Parameter*> Model::contrastive_online() {
    std::vector<Parameter*> out;
    encoder.collect(out);
    proj.collect(out);
    roi.collect(out);
    return out;
}

std::vector<Parameter*> Model::momentum_params() {
    std::vector<Parameter*> out;
    m_encoder.collect(out);
    m_proj.collect(out);
    m_roi.collect(out);
    return out;
}

void Model::sync_momentum() {
    auto online = contrastive_online();
    auto mom = momentum_params();
    for (size_t i = 0; i < mom.size(); ++i) mom[i]->value = online[i]->value;
}

// ---- checkpoint format: manifest.json + one raw little-endian f64 blob ----

void write_checkpoint(const std::string& dir, const CheckpointData& data) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);

    json manifest;
    manifest["format"] = "ltp-checkpoint-v1";
    manifest["step"] = data.step;
    manifest["epoch"] = data.epoch;
    manifest["strings"] = data.strings;
    manifest["ints"] = data.ints;

    json tensors = json::array();
    int64_t offset = 0;
    std::ofstream blob(dir + "/data.bin", std::ios::binary);
    if (!blob) throw IoError("cannot write " + dir + "/data.bin");
    for (const auto& [name, t] : data.tensors) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = "f64";
        entry["offset"] = offset;
        entry["count"] = t.numel();
        tensors.push_back(std::move(entry));
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(t.numel() * 8));
        offset += t.numel();
    }
    manifest["tensors"] = std::move(tensors);

    std::ofstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw IoError("cannot write " + dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
}

CheckpointData read_checkpoint(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json", std::ios::binary);
    if (!mf) throw CheckpointError("checkpoint manifest missing at " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::parse_error& e) {
        throw CheckpointError("checkpoint manifest corrupt: " + std::string(e.what()));
    }
    if (manifest.value("format", std::string()) != "ltp-checkpoint-v1")
        throw CheckpointError("unrecognized checkpoint format in " + dir);

    CheckpointData data;
    data.step = manifest.at("step").get<int64_t>();
    data.epoch = manifest.at("epoch").get<int>();
    if (manifest.contains("strings"))
        data.strings = manifest["strings"].get<std::map<std::string, std::string>>();
    if (manifest.contains("ints")) data.ints = manifest["ints"].get<std::map<std::string, int64_t>>();

    std::ifstream blob(dir + "/data.bin", std::ios::binary);
    if (!blob) throw CheckpointError("checkpoint blob missing at " + dir);
    blob.seekg(0, std::ios::end);
    int64_t blob_doubles = static_cast<int64_t>(blob.tellg()) / 8;

    for (const auto& entry : manifest.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
        int64_t offset = entry.at("offset").get<int64_t>();
        int64_t count = entry.at("count").get<int64_t>();
        if (Tensor::numel_of(shape) != count)
            throw CheckpointError("tensor " + name + " has inconsistent shape/count");
        if (offset + count > blob_doubles)
            throw CheckpointError("tensor " + name + " extends past the checkpoint blob (corrupt)");
        Tensor t(shape);
        blob.seekg(offset * 8, std::ios::beg);
        blob.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(count * 8));
        if (!blob) throw CheckpointError("tensor " + name + " could not be read (corrupt blob)");
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

}  // namespace ltp
