#pragma once

#include <vector>

#include "ltp/autodiff.hpp"
#include "ltp/common.hpp"
#include "ltp/data.hpp"

namespace ltp {

struct ContrastiveConfig {
    double temperature = 0.2;
    double alpha_c = 0.1;  // holistic weight
    double beta_c = 0.05;  // local weight
};

struct ReconstructionConfig {
    double alpha_r = 0.1;      // appearance/semantic trade-off
    double mask_ratio = 0.25;  // fraction of the proposal masked
    int feature_layers = 4;    // P
};

// All seven terms of one step plus the combined total. The composition
// identities (total = hlcl + drc + det and the two weighted blends) hold to
// 1e-9 by construction.
struct LossReport {
    double l_hcl = 0, l_lcl = 0, l_hlcl = 0;
    double l_ar = 0, l_sr = 0, l_drc = 0;
    double l_det = 0, total = 0;
};

LossReport compose_report(double hcl, double lcl, double ar, double sr, double det,
                          const ContrastiveConfig& cc, double alpha_r);

// ---- differentiable kernels (per-item tapes) ----
//
// The positive keys and queue negatives come from the momentum branch and are
// passed as detached tensors; gradients flow only through the query
// embeddings. Queue snapshots must stay alive until backward() has run.

// InfoNCE row-sum over a batch of queries; divide by the global row count at
// combination time to get the batch mean.
Var info_nce_sum(Tape& tape, Var z, const Tensor& positives, const Tensor& negatives, double tau);

// batch-mean InfoNCE of holistic embeddings
Var hcl_loss(Tape& tape, Var z, const Tensor& positives, const Tensor& negatives, double tau);
// identical kernel over proposal embeddings (two call sites, one definition)
Var lcl_loss(Tape& tape, Var z_bb, const Tensor& positives, const Tensor& negatives, double tau);

Var hlcl_loss(Tape& tape, Var hcl, Var lcl, double alpha_c, double beta_c);

// per-element mean squared reconstruction error
Var ar_loss(Tape& tape, const Tensor& x, Var x_hat);

// sum over stages of the mean squared distance between spatially pooled
// features; 3-d stage inputs are pooled to per-channel means first
Var sr_loss(const std::vector<Var>& clean_stages, const std::vector<Var>& masked_stages);

Var drc_loss(Tape& tape, Var ar, Var sr, double alpha_r);

struct DetPredictions {
    Var objectness_pos;  // {n_pos, 1} logits for proposal boxes
    Var deltas_pos;      // {n_pos, 4} refinements; the proposal is its own target
    Var objectness_neg;  // {n_neg, 1} logits for sampled background boxes
    bool has_negatives = true;
};

// objectness BCE over positives + sampled background, plus smooth-L1 pulling
// the deltas to zero
Var det_loss(Tape& tape, const DetPredictions& preds);

// ---- value-level wrappers ----
double hcl_loss_value(const Tensor& z, const Tensor& positives, const Tensor& negatives, double tau);
double lcl_loss_value(const Tensor& z_bb, const Tensor& positives, const Tensor& negatives, double tau);
double hlcl_loss_value(double hcl, double lcl, double alpha_c, double beta_c);
double ar_loss_value(const Tensor& x, const Tensor& x_hat);
double sr_loss_value(const std::vector<Tensor>& clean_stages, const std::vector<Tensor>& masked_stages);
double drc_loss_value(double ar, double sr, double alpha_r);

// Random boxes with IoU < 0.1 against every proposal; may return fewer than
// `count` when the image is crowded (caller flags positives-only loss).
std::vector<BoundingBox> sample_background_boxes(int width, int height,
                                                 const std::vector<BoundingBox>& proposals,
                                                 int count, Rng& rng, int max_tries_per_box = 50);

}  // namespace ltp
