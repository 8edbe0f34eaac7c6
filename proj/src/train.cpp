#include "ltp/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ltp {

using nlohmann::json;

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    for (int d : lr_decay_epochs)
        if (d < 1 || d > epochs)
            throw ConfigError("lr decay epoch " + std::to_string(d) + " outside [1, " +
                              std::to_string(epochs) + "]");
    if (queue_capacity < batch_size)
        throw ConfigError("queue_capacity must hold at least one batch");
    if (model.input_size != view.output_size)
        throw ConfigError("model input_size and view output_size disagree");
    if (t_threshold <= 0) throw ConfigError("t_threshold must be positive");
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
    double lr = cfg.base_lr;
    for (int d : cfg.lr_decay_epochs)
        if (epoch > d) lr *= cfg.lr_decay_factor;
    return lr;
}

// --- config text format ------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("key '" + key + "' expects true/false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::string s = trim(v);
    if (s.size() < 2 || s.front() != '[' || s.back() != ']')
        throw ConfigError("key '" + key + "' expects [a, b, ...], got '" + v + "'");
    std::vector<int> out;
    std::string body = s.substr(1, s.size() - 2);
    std::istringstream is(body);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        out.push_back(std::stoi(tok));
    }
    return out;
}

std::string unquote(const std::string& v) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    return v;
}

ProposalSource parse_source(const std::string& v) {
    if (v == "ground-truth") return ProposalSource::GroundTruth;
    if (v == "jittered-gt") return ProposalSource::JitteredGt;
    if (v == "random-boxes") return ProposalSource::RandomBoxes;
    throw ConfigError("unknown proposal_source '" + v + "'");
}

const char* source_name(ProposalSource s) {
    switch (s) {
        case ProposalSource::GroundTruth: return "ground-truth";
        case ProposalSource::JitteredGt: return "jittered-gt";
        default: return "random-boxes";
    }
}

}  // namespace

TrainConfig parse_train_config(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + " is not key = value");
        std::string key = trim(s.substr(0, eq));
        std::string val = trim(s.substr(eq + 1));
        if (val.empty()) throw ConfigError("key '" + key + "' has no value");

        auto d = [&] { return std::stod(val); };
        auto i = [&] { return std::stoi(val); };
        auto b = [&] { return parse_bool(val, key); };

        if (key == "epochs") cfg.epochs = i();
        else if (key == "base_lr") cfg.base_lr = d();
        else if (key == "lr_decay_epochs") cfg.lr_decay_epochs = parse_int_list(val, key);
        else if (key == "lr_decay_factor") cfg.lr_decay_factor = d();
        else if (key == "sgd_momentum") cfg.sgd_momentum = d();
        else if (key == "batch_size") cfg.batch_size = i();
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(std::stoull(val));
        else if (key == "deterministic") cfg.deterministic = b();
        else if (key == "image_size") { cfg.model.input_size = i(); cfg.view.output_size = cfg.model.input_size; }
        else if (key == "stem_channels") cfg.model.encoder.stem_channels = i();
        else if (key == "stem_stride") cfg.model.encoder.stem_stride = i();
        else if (key == "stage_channels") cfg.model.encoder.stage_channels = parse_int_list(val, key);
        else if (key == "embed_dim") cfg.model.embed_dim = i();
        else if (key == "det_hidden") cfg.model.det_hidden = i();
        else if (key == "roi_stage") cfg.model.roi.stage_index = i();
        else if (key == "roi_pooled_size") cfg.model.roi.pooled_size = i();
        else if (key == "ema_momentum") cfg.model.momentum = d();
        else if (key == "temperature") cfg.contrastive.temperature = d();
        else if (key == "alpha_c") cfg.contrastive.alpha_c = d();
        else if (key == "beta_c") cfg.contrastive.beta_c = d();
        else if (key == "alpha_r") cfg.recon.alpha_r = d();
        else if (key == "mask_ratio") cfg.recon.mask_ratio = d();
        else if (key == "t_threshold") cfg.t_threshold = d();
        else if (key == "proposal_source") cfg.proposal_source = parse_source(unquote(val));
        else if (key == "queue_capacity") cfg.queue_capacity = i();
        else if (key == "proposal_queue_capacity") cfg.proposal_queue_capacity = i();
        else if (key == "enable_lcl") cfg.enable_lcl = b();
        else if (key == "enable_drc") cfg.enable_drc = b();
        else if (key == "enable_det") cfg.enable_det = b();
        else if (key == "rebalanced_sampling") cfg.rebalanced_sampling = b();
        else if (key == "mask_all_proposals") cfg.mask_all_proposals = b();
        else if (key == "sr_stop_grad_clean") cfg.sr_stop_grad_clean = b();
        else if (key == "max_steps") cfg.max_steps = i();
        else if (key == "checkpoint_every") cfg.checkpoint_every = i();
        else if (key == "crop_scale_min") cfg.view.crop_scale_min = d();
        else if (key == "crop_scale_max") cfg.view.crop_scale_max = d();
        else if (key == "flip_prob") cfg.view.flip_prob = d();
        else if (key == "color_jitter_prob") cfg.view.color_jitter_prob = d();
        else if (key == "grayscale_prob") cfg.view.grayscale_prob = d();
        else if (key == "blur_prob") cfg.view.blur_prob = d();
        else if (key == "solarize_prob") cfg.view.solarize_prob = d();
        else if (key == "visibility_threshold") cfg.view.visibility_threshold = d();
        else if (key == "max_proposals") cfg.view.max_proposals = i();
        else if (key == "gt_jitter_frac") cfg.view.gt_jitter_frac = d();
        else throw ConfigError("unknown config key '" + key + "'");
    }
    cfg.recon.feature_layers = static_cast<int>(cfg.model.encoder.stage_channels.size());
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config file " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_train_config(ss.str());
}

std::string serialize_train_config(const TrainConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    auto list = [](const std::vector<int>& v) {
        std::string s = "[";
        for (size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
        return s + "]";
    };
    os << "epochs = " << cfg.epochs << "\n";
    os << "base_lr = " << cfg.base_lr << "\n";
    os << "lr_decay_epochs = " << list(cfg.lr_decay_epochs) << "\n";
    os << "lr_decay_factor = " << cfg.lr_decay_factor << "\n";
    os << "sgd_momentum = " << cfg.sgd_momentum << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "deterministic = " << (cfg.deterministic ? "true" : "false") << "\n";
    os << "image_size = " << cfg.model.input_size << "\n";
    os << "stem_channels = " << cfg.model.encoder.stem_channels << "\n";
    os << "stem_stride = " << cfg.model.encoder.stem_stride << "\n";
    os << "stage_channels = " << list(cfg.model.encoder.stage_channels) << "\n";
    os << "embed_dim = " << cfg.model.embed_dim << "\n";
    os << "det_hidden = " << cfg.model.det_hidden << "\n";
    os << "roi_stage = " << cfg.model.roi.stage_index << "\n";
    os << "roi_pooled_size = " << cfg.model.roi.pooled_size << "\n";
    os << "ema_momentum = " << cfg.model.momentum << "\n";
    os << "temperature = " << cfg.contrastive.temperature << "\n";
    os << "alpha_c = " << cfg.contrastive.alpha_c << "\n";
    os << "beta_c = " << cfg.contrastive.beta_c << "\n";
    os << "alpha_r = " << cfg.recon.alpha_r << "\n";
    os << "mask_ratio = " << cfg.recon.mask_ratio << "\n";
    os << "t_threshold = " << cfg.t_threshold << "\n";
    os << "proposal_source = \"" << source_name(cfg.proposal_source) << "\"\n";
    os << "queue_capacity = " << cfg.queue_capacity << "\n";
    os << "proposal_queue_capacity = " << cfg.proposal_queue_capacity << "\n";
    os << "enable_lcl = " << (cfg.enable_lcl ? "true" : "false") << "\n";
    os << "enable_drc = " << (cfg.enable_drc ? "true" : "false") << "\n";
    os << "enable_det = " << (cfg.enable_det ? "true" : "false") << "\n";
    os << "rebalanced_sampling = " << (cfg.rebalanced_sampling ? "true" : "false") << "\n";
    os << "mask_all_proposals = " << (cfg.mask_all_proposals ? "true" : "false") << "\n";
    os << "sr_stop_grad_clean = " << (cfg.sr_stop_grad_clean ? "true" : "false") << "\n";
    os << "max_steps = " << cfg.max_steps << "\n";
    os << "checkpoint_every = " << cfg.checkpoint_every << "\n";
    os << "crop_scale_min = " << cfg.view.crop_scale_min << "\n";
    os << "crop_scale_max = " << cfg.view.crop_scale_max << "\n";
    os << "flip_prob = " << cfg.view.flip_prob << "\n";
    os << "color_jitter_prob = " << cfg.view.color_jitter_prob << "\n";
    os << "grayscale_prob = " << cfg.view.grayscale_prob << "\n";
    os << "blur_prob = " << cfg.view.blur_prob << "\n";
    os << "solarize_prob = " << cfg.view.solarize_prob << "\n";
    os << "visibility_threshold = " << cfg.view.visibility_threshold << "\n";
    os << "max_proposals = " << cfg.view.max_proposals << "\n";
    os << "gt_jitter_frac = " << cfg.view.gt_jitter_frac << "\n";
    return os.str();
}

// --- trainer -----------------------------------------------------------------

namespace {

constexpr uint64_t kSeedSchedule = 0x5c;
constexpr uint64_t kSeedView = 0x71;
constexpr uint64_t kSeedMask = 0x3a;
constexpr uint64_t kSeedBackground = 0xb6;

// Activation buffers hover around glibc's default mmap threshold; without
// this the allocator mmap/munmaps tens of megabytes per training step.
void tune_allocator() {
#if defined(__GLIBC__)
    static const bool done = [] {
        mallopt(M_MMAP_THRESHOLD, 256 << 20);
        mallopt(M_TRIM_THRESHOLD, 256 << 20);
        return true;
    }();
    (void)done;
#endif
}

struct BatchItem {
    const ImageRecord* image = nullptr;
    ViewPair pair;
};

class Trainer {
public:
    Trainer(TrainConfig cfg, const DatasetManifest& manifest, std::string out_dir)
        : cfg_(std::move(cfg)), manifest_(manifest), out_dir_(std::move(out_dir)),
          master_rng_(cfg_.seed),
          queue_h_(cfg_.queue_capacity, cfg_.model.embed_dim),
          queue_p_(cfg_.proposal_queue_capacity, cfg_.model.embed_dim) {
        tune_allocator();
        cfg_.validate();
        manifest_.validate();
        if (manifest_.images.empty()) throw ContractError("training manifest has no images");
        for (const ImageRecord& im : manifest_.images) {
            if (!im.has_pixels())
                throw ContractError("image " + std::to_string(im.image_id) + " has no pixel data");
            by_id_[im.image_id] = &im;
        }
        stats_ = compute_class_stats(manifest_);
        model_ = Model(cfg_.model, master_rng_);

        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(out_dir_, ec);
        metrics_path_ = out_dir_ + "/metrics.jsonl";
        metrics_.open(metrics_path_, std::ios::binary | std::ios::trunc);
        if (!metrics_) throw IoError("cannot write metrics to " + metrics_path_);
    }

    void restore_from(const CheckpointData& ckpt) {
        std::map<std::string, const Tensor*> by_name;
        for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
        auto fetch = [&](const std::string& name, Tensor& dst) {
            auto it = by_name.find(name);
            if (it == by_name.end()) throw CheckpointError("tensor " + name + " missing from checkpoint");
            if (!it->second->same_shape(dst))
                throw CheckpointError("tensor " + name + " has shape " + it->second->shape_str() +
                                      ", expected " + dst.shape_str());
            dst = *it->second;
        };
        for (Parameter* p : model_.trainable()) {
            fetch(p->name, p->value);
            fetch(p->name + ".vel", p->vel);
        }
        for (Parameter* p : model_.momentum_params()) fetch(p->name, p->value);

        Tensor qh({cfg_.queue_capacity, cfg_.model.embed_dim});
        fetch("queue_h.buffer", qh);
        queue_h_.restore(std::move(qh), static_cast<int>(ckpt.ints.at("queue_h.cursor")),
                         static_cast<int>(ckpt.ints.at("queue_h.fill")));
        Tensor qp({cfg_.proposal_queue_capacity, cfg_.model.embed_dim});
        fetch("queue_p.buffer", qp);
        queue_p_.restore(std::move(qp), static_cast<int>(ckpt.ints.at("queue_p.cursor")),
                         static_cast<int>(ckpt.ints.at("queue_p.fill")));

        master_rng_.load_state(ckpt.strings.at("master_rng"));
        step_ = ckpt.step;
        epoch_ = ckpt.epoch;
        epoch_pos_ = ckpt.ints.at("epoch_pos");
        skipped_ = ckpt.ints.count("skipped") ? ckpt.ints.at("skipped") : 0;
    }

    int64_t step_count() const { return step_; }

    TrainResult run() {
        while (epoch_ <= cfg_.epochs && !stop_) {
            run_epoch(epoch_);
            if (stop_) break;  // mid-epoch stop: keep epoch_ and epoch_pos_ for resume
            epoch_pos_ = 0;
            ++epoch_;
        }
        save_checkpoint_now();
        metrics_.flush();
        TrainResult res;
        res.steps = step_;
        res.epochs_run = std::min(epoch_, cfg_.epochs);
        res.skipped_images = skipped_;
        res.last = last_;
        res.metrics_path = metrics_path_;
        res.checkpoint_dir = out_dir_ + "/checkpoint";
        return res;
    }

private:
    RepeatFactorTable table_for(int epoch) {
        ScheduleConfig sc{cfg_.t_threshold, cfg_.epochs, cfg_.seed};
        RepeatFactorTable table = build_table(stats_, epoch, sc);
        if (!cfg_.rebalanced_sampling)
            std::fill(table.repeat_factor.begin(), table.repeat_factor.end(), 1.0);
        return table;
    }

    void run_epoch(int epoch) {
        RepeatFactorTable table = table_for(epoch);
        EpochSchedule sched =
            build_epoch_schedule(manifest_, table, derive_seed(cfg_.seed, {kSeedSchedule, static_cast<uint64_t>(epoch)}));

        std::vector<BatchItem> items;
        for (int64_t pos = epoch_pos_; pos < static_cast<int64_t>(sched.image_ids.size()); ++pos) {
            int64_t id = sched.image_ids[static_cast<size_t>(pos)];
            const ImageRecord* im = by_id_.at(id);
            uint64_t view_seed = derive_seed(cfg_.seed, {kSeedView, static_cast<uint64_t>(id),
                                                        static_cast<uint64_t>(epoch)});
            try {
                BatchItem item;
                item.image = im;
                item.pair = make_view_pair(*im, cfg_.proposal_source, view_seed, cfg_.view);
                items.push_back(std::move(item));
            } catch (const EmptyProposalsError&) {
                ++skipped_;
            }
            if (static_cast<int>(items.size()) == cfg_.batch_size) {
                step(items, epoch, table.alpha_d);
                items.clear();
                epoch_pos_ = pos + 1;
                if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0)
                    save_checkpoint_now();
                if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) {
                    stop_ = true;
                    return;
                }
            }
        }
        if (!items.empty()) {
            step(items, epoch, table.alpha_d);
            epoch_pos_ = static_cast<int64_t>(sched.image_ids.size());
            if (cfg_.max_steps > 0 && step_ >= cfg_.max_steps) stop_ = true;
        }
    }

    void step(std::vector<BatchItem>& items, int epoch, double alpha_d) {
        const int B = static_cast<int>(items.size());
        const int size = cfg_.model.input_size;
        const double tau = cfg_.contrastive.temperature;

        Tensor negs_h = queue_h_.snapshot();
        Tensor negs_p = queue_p_.snapshot();

        int64_t total_props = 0;
        if (cfg_.enable_lcl)
            for (const BatchItem& it : items) total_props += static_cast<int64_t>(it.pair.proposals.size());

        double sum_hcl = 0, sum_lcl = 0, sum_ar = 0, sum_sr = 0, sum_det = 0;
        int det_pos_only = 0;
        std::vector<Tensor> keys_h, keys_p;

        for (const BatchItem& it : items) {
            Tape tape;
            const Tensor& xq = it.pair.view_q.pixels;
            const Tensor& xk = it.pair.view_k.pixels;
            std::vector<BoundingBox> boxes_q, boxes_k;
            for (const MappedProposal& p : it.pair.proposals) {
                boxes_q.push_back(p.box_in_q);
                boxes_k.push_back(p.box_in_k);
            }

            EncoderOutput enc_q = model_.encoder.forward(tape, tape.constant(xq));
            Var z = model_.proj.forward(tape, enc_q.pooled);

            Tensor z_pos, z_bb_pos;
            {
                FrozenGuard freeze(tape);
                EncoderOutput enc_k = model_.m_encoder.forward(tape, tape.constant(xk));
                z_pos = model_.m_proj.forward(tape, enc_k.pooled).val();
                if (cfg_.enable_lcl)
                    z_bb_pos = model_.m_roi.extract(tape, enc_k, boxes_k, size).val();
            }

            Var hcl = hcl_loss(tape, z, z_pos, negs_h, tau);
            Var item_loss = scale(hcl, cfg_.contrastive.alpha_c / B);
            sum_hcl += hcl.val().item();

            if (cfg_.enable_lcl && total_props > 0) {
                Var z_bb = model_.roi.extract(tape, enc_q, boxes_q, size);
                Var lcl_sum = info_nce_sum(tape, z_bb, z_bb_pos, negs_p, tau);
                item_loss = add(item_loss,
                                scale(lcl_sum, cfg_.contrastive.beta_c / static_cast<double>(total_props)));
                sum_lcl += lcl_sum.val().item();
            }

            if (cfg_.enable_drc) {
                Var x_hat = model_.gen.forward(tape, enc_q.stage_features.back());
                Var ar = ar_loss(tape, xq, x_hat);
                sum_ar += ar.val().item();

                Tensor mask = build_mask(it, size, epoch);
                Var masked = mask_mul(x_hat, mask);
                EncoderOutput enc_m = model_.encoder.forward(tape, masked);
                std::vector<Var> clean;
                clean.reserve(enc_q.stage_features.size());
                for (const Var& s : enc_q.stage_features)
                    clean.push_back(cfg_.sr_stop_grad_clean ? stop_grad(s) : s);
                Var sr = sr_loss(clean, enc_m.stage_features);
                sum_sr += sr.val().item();

                Var drc = drc_loss(tape, ar, sr, cfg_.recon.alpha_r);
                item_loss = add(item_loss, scale(drc, 1.0 / B));
            }

            if (cfg_.enable_det) {
                Rng bg_rng(derive_seed(cfg_.seed, {kSeedBackground, static_cast<uint64_t>(it.image->image_id),
                                                   static_cast<uint64_t>(epoch)}));
                std::vector<BoundingBox> neg_boxes = sample_background_boxes(
                    size, size, boxes_q, static_cast<int>(boxes_q.size()), bg_rng);
                DetectionHead::Output pos = model_.det.forward(tape, enc_q, boxes_q, size);
                DetPredictions preds;
                preds.objectness_pos = pos.objectness;
                preds.deltas_pos = pos.deltas;
                preds.has_negatives = !neg_boxes.empty();
                if (preds.has_negatives)
                    preds.objectness_neg = model_.det.forward(tape, enc_q, neg_boxes, size).objectness;
                else
                    det_pos_only = 1;
                Var det = det_loss(tape, preds);
                sum_det += det.val().item();
                item_loss = add(item_loss, scale(det, 1.0 / B));
            }

            tape.backward(item_loss);
            tape.export_grads();

            keys_h.push_back(z_pos);
            if (cfg_.enable_lcl && !z_bb_pos.empty()) keys_p.push_back(z_bb_pos);
        }

        double lr = lr_for_epoch(cfg_, epoch);
        auto params = model_.trainable();
        opt_.momentum = cfg_.sgd_momentum;
        opt_.step(params, lr);
        SgdOptimizer::zero_grad(params);
        model_.ema_step();

        // enqueue this step's keys
        Tensor hk({B, cfg_.model.embed_dim});
        for (int i = 0; i < B; ++i)
            for (int j = 0; j < cfg_.model.embed_dim; ++j)
                hk[static_cast<int64_t>(i) * cfg_.model.embed_dim + j] = keys_h[static_cast<size_t>(i)][j];
        queue_h_.enqueue(hk);
        if (!keys_p.empty()) {
            int64_t rows = 0;
            for (const Tensor& t : keys_p) rows += t.size(0);
            Tensor pk({static_cast<int>(rows), cfg_.model.embed_dim});
            int64_t at = 0;
            for (const Tensor& t : keys_p) {
                for (int64_t i = 0; i < t.numel(); ++i) pk[at * cfg_.model.embed_dim + i] = t[i];
                at += t.size(0);
            }
            queue_p_.enqueue(pk);
        }

        double l_hcl = sum_hcl / B;
        double l_lcl = total_props > 0 ? sum_lcl / static_cast<double>(total_props) : 0.0;
        double l_ar = cfg_.enable_drc ? sum_ar / B : 0.0;
        double l_sr = cfg_.enable_drc ? sum_sr / B : 0.0;
        double l_det = cfg_.enable_det ? sum_det / B : 0.0;
        last_ = compose_report(l_hcl, l_lcl, l_ar, l_sr, l_det, cfg_.contrastive, cfg_.recon.alpha_r);
        ++step_;

        if (!std::isfinite(last_.total)) {
            std::string ids;
            for (const BatchItem& it : items)
                ids += (ids.empty() ? "" : ", ") + std::to_string(it.image->image_id);
            throw Error("non-finite loss at step " + std::to_string(step_) + " (epoch " +
                        std::to_string(epoch) + "), batch images [" + ids + "]");
        }

        json rec;
        rec["step"] = step_;
        rec["epoch"] = epoch;
        rec["lr"] = lr;
        rec["alpha_d"] = alpha_d;
        rec["l_hcl"] = last_.l_hcl;
        rec["l_lcl"] = last_.l_lcl;
        rec["l_hlcl"] = last_.l_hlcl;
        rec["l_ar"] = last_.l_ar;
        rec["l_sr"] = last_.l_sr;
        rec["l_drc"] = last_.l_drc;
        rec["l_det"] = last_.l_det;
        rec["total"] = last_.total;
        rec["queue_h"] = queue_h_.fill();
        rec["queue_p"] = queue_p_.fill();
        rec["det_pos_only"] = det_pos_only;
        metrics_ << rec.dump() << "\n";
    }

    Tensor build_mask(const BatchItem& it, int size, int epoch) {
        // proposals too small for the pixel-window rule fall through to the
        // next candidate; no usable proposal leaves the reconstruction
        // unmasked
        Tensor mask = Tensor::full({3, size, size}, 1.0);
        if (cfg_.recon.mask_ratio <= 0 || it.pair.proposals.empty()) return mask;
        Rng rng(derive_seed(cfg_.seed, {kSeedMask, static_cast<uint64_t>(it.image->image_id),
                                        static_cast<uint64_t>(epoch)}));
        size_t n = it.pair.proposals.size();
        auto window_ok = [&](const BoundingBox& b) {
            int w = static_cast<int>(std::ceil(b.x1)) - static_cast<int>(std::floor(b.x0));
            int h = static_cast<int>(std::ceil(b.y1)) - static_cast<int>(std::floor(b.y0));
            return w * h >= 4;
        };
        auto apply_one = [&](const BoundingBox& b) {
            MaskSpec spec = sample_mask_spec(b, cfg_.recon.mask_ratio, rng.next());
            Tensor m = mask_tensor(size, size, spec);
            for (int64_t i = 0; i < mask.numel(); ++i) mask[i] *= m[i];
        };
        if (cfg_.mask_all_proposals) {
            for (const MappedProposal& p : it.pair.proposals)
                if (window_ok(p.box_in_q)) apply_one(p.box_in_q);
        } else {
            size_t start = static_cast<size_t>(rng.uniform_int(n));
            for (size_t k = 0; k < n; ++k) {
                const BoundingBox& b = it.pair.proposals[(start + k) % n].box_in_q;
                if (window_ok(b)) {
                    apply_one(b);
                    break;
                }
            }
        }
        return mask;
    }

    void save_checkpoint_now() {
        CheckpointData data;
        data.step = step_;
        data.epoch = epoch_;
        data.ints["epoch_pos"] = epoch_pos_;
        data.ints["skipped"] = skipped_;
        data.ints["queue_h.cursor"] = queue_h_.cursor();
        data.ints["queue_h.fill"] = queue_h_.fill();
        data.ints["queue_p.cursor"] = queue_p_.cursor();
        data.ints["queue_p.fill"] = queue_p_.fill();
        data.strings["config"] = serialize_train_config(cfg_);
        data.strings["master_rng"] = master_rng_.save_state();
        for (Parameter* p : model_.trainable()) {
            data.tensors.emplace_back(p->name, p->value);
            data.tensors.emplace_back(p->name + ".vel", p->vel);
        }
        for (Parameter* p : model_.momentum_params()) data.tensors.emplace_back(p->name, p->value);
        data.tensors.emplace_back("queue_h.buffer", queue_h_.buffer());
        data.tensors.emplace_back("queue_p.buffer", queue_p_.buffer());
        write_checkpoint(out_dir_ + "/checkpoint", data);
    }

    TrainConfig cfg_;
    const DatasetManifest& manifest_;
    std::map<int64_t, const ImageRecord*> by_id_;
    ClassStats stats_;
    std::string out_dir_;
    std::string metrics_path_;
    Rng master_rng_;
    Model model_;
    SgdOptimizer opt_;
    EmbeddingQueue queue_h_, queue_p_;
    std::ofstream metrics_;
    int64_t step_ = 0;
    int epoch_ = 1;
    int64_t epoch_pos_ = 0;
    int64_t skipped_ = 0;
    bool stop_ = false;
    LossReport last_;
};

}  // namespace

TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::string& out_dir) {
    Trainer trainer(cfg, manifest, out_dir);
    return trainer.run();
}

TrainConfig checkpoint_config(const std::string& checkpoint_dir) {
    CheckpointData ckpt = read_checkpoint(checkpoint_dir);
    auto it = ckpt.strings.find("config");
    if (it == ckpt.strings.end()) throw CheckpointError("checkpoint has no embedded config");
    return parse_train_config(it->second);
}

Model load_model(const std::string& checkpoint_dir, TrainConfig* cfg_out) {
    CheckpointData ckpt = read_checkpoint(checkpoint_dir);
    auto it = ckpt.strings.find("config");
    if (it == ckpt.strings.end()) throw CheckpointError("checkpoint has no embedded config");
    TrainConfig cfg = parse_train_config(it->second);
    Rng rng(cfg.seed);
    Model model(cfg.model, rng);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
    auto fetch = [&](Parameter* p) {
        auto f = by_name.find(p->name);
        if (f == by_name.end()) throw CheckpointError("tensor " + p->name + " missing from checkpoint");
        if (!f->second->same_shape(p->value))
            throw CheckpointError("tensor " + p->name + " has shape " + f->second->shape_str() +
                                  ", expected " + p->value.shape_str());
        p->value = *f->second;
    };
    for (Parameter* p : model.trainable()) fetch(p);
    for (Parameter* p : model.momentum_params()) fetch(p);
    if (cfg_out) *cfg_out = cfg;
    return model;
}

TrainResult resume(const std::string& checkpoint_dir, const DatasetManifest& manifest,
                   const std::string& out_dir) {
    CheckpointData ckpt = read_checkpoint(checkpoint_dir);
    auto it = ckpt.strings.find("config");
    if (it == ckpt.strings.end()) throw CheckpointError("checkpoint has no embedded config");
    TrainConfig cfg = parse_train_config(it->second);
    Trainer trainer(cfg, manifest, out_dir);
    trainer.restore_from(ckpt);
    return trainer.run();
}

}  // namespace ltp
