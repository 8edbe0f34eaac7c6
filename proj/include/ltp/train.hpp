#pragma once

#include <string>

#include "ltp/data.hpp"
#include "ltp/losses.hpp"
#include "ltp/models.hpp"
#include "ltp/queue.hpp"
#include "ltp/sampler.hpp"
#include "ltp/views.hpp"

namespace ltp {

struct TrainConfig {
    int epochs = 12;
    double base_lr = 0.02;
    std::vector<int> lr_decay_epochs = {8, 11};
    double lr_decay_factor = 0.1;
    double sgd_momentum = 0.9;
    int batch_size = 8;
    uint64_t seed = 0;
    bool deterministic = false;  // single-threaded mode (the testing contract)

    ModelConfig model;
    ContrastiveConfig contrastive;
    ReconstructionConfig recon;
    ViewConfig view;
    double t_threshold = 0.001;
    ProposalSource proposal_source = ProposalSource::JitteredGt;
    int queue_capacity = 1024;           // K_h
    int proposal_queue_capacity = 1024;  // K_p

    // ablation switches; the stripped baseline is HCL-only with uniform
    // sampling and no reconstruction or detection terms
    bool enable_lcl = true;
    bool enable_drc = true;
    bool enable_det = true;
    bool rebalanced_sampling = true;
    bool mask_all_proposals = false;
    bool sr_stop_grad_clean = true;

    int max_steps = 0;         // 0 = run all epochs
    int checkpoint_every = 0;  // steps; 0 = final checkpoint only

    void validate() const;
};

// flat key = value text (unknown keys are errors); see README for the key list
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
std::string serialize_train_config(const TrainConfig& cfg);

double lr_for_epoch(const TrainConfig& cfg, int epoch);

struct TrainResult {
    int64_t steps = 0;
    int epochs_run = 0;
    int64_t skipped_images = 0;
    LossReport last;
    std::string metrics_path;
    std::string checkpoint_dir;
};

// Pre-training entry point: per epoch, rebuild the repeat-factor table and
// schedule; per step, forward both branches, combine the losses, backprop
// through the online branch, SGD step, EMA update, enqueue the keys, and
// append one JSONL metrics record.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest,
                  const std::string& out_dir);

// Continue from a checkpoint written by train(); the embedded config is used.
TrainResult resume(const std::string& checkpoint_dir, const DatasetManifest& manifest,
                   const std::string& out_dir);

// config recovered from a checkpoint (resume() uses this internally)
TrainConfig checkpoint_config(const std::string& checkpoint_dir);

// rebuild a checkpointed model with its weights (values only); used by the
// probe and diagnostics tools
Model load_model(const std::string& checkpoint_dir, TrainConfig* cfg_out = nullptr);

}  // namespace ltp
