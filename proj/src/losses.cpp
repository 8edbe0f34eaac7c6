#include "ltp/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ltp {

namespace {

void check_unit_rows(const Tensor& t, const char* what) {
    int n = t.size(0), d = t.size(1);
    for (int r = 0; r < n; ++r) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
            double v = t[static_cast<int64_t>(r) * d + j];
            s += v * v;
        }
        if (std::abs(std::sqrt(s) - 1.0) > 1e-4)
            throw ContractError(std::string(what) + ": row " + std::to_string(r) +
                                " is not unit-norm (|" + std::to_string(std::sqrt(s)) + "| - 1 > 1e-4)");
    }
}

}  // namespace

Var info_nce_sum(Tape& tape, Var z, const Tensor& positives, const Tensor& negatives, double tau) {
    if (tau <= 0) throw ContractError("temperature must be positive");
    const Tensor& zv = z.val();
    if (zv.dim() != 2) throw ContractError("info_nce: queries must be {n,d}, got " + zv.shape_str());
    if (!zv.same_shape(positives))
        throw ContractError("info_nce: positives " + positives.shape_str() + " do not match queries " +
                            zv.shape_str());
    int n = zv.size(0), d = zv.size(1);
    if (negatives.numel() > 0 && (negatives.dim() != 2 || negatives.size(1) != d))
        throw ContractError("info_nce: negatives " + negatives.shape_str() + " do not match dim " +
                            std::to_string(d));
    check_unit_rows(zv, "info_nce queries");
    check_unit_rows(positives, "info_nce positives");

    int k = negatives.numel() > 0 ? negatives.size(0) : 0;
    Var s_pos = scale(row_dot_const(z, positives), 1.0 / tau);            // {n,1}
    Var s_neg = scale(matmul_nt_const(z, negatives), 1.0 / tau);          // {n,k}

    // detached row-wise max for a stable log-sum-exp; exact for any shift
    Tensor m({n, 1});
    for (int r = 0; r < n; ++r) {
        double mx = s_pos.val()[r];
        for (int j = 0; j < k; ++j) mx = std::max(mx, s_neg.val()[static_cast<int64_t>(r) * k + j]);
        m[r] = mx;
    }
    Var e_pos = exp_of(sub_colvec_const(s_pos, m));
    Var e_neg = exp_of(sub_colvec_const(s_neg, m));
    Var denom = add(e_pos, sum_rows(e_neg));
    Var losses = sub(log_of(denom), sub_colvec_const(s_pos, m));  // {n,1}
    return sum_all(losses);
}

Var hcl_loss(Tape& tape, Var z, const Tensor& positives, const Tensor& negatives, double tau) {
    int n = z.val().size(0);
    return scale(info_nce_sum(tape, z, positives, negatives, tau), 1.0 / n);
}

Var lcl_loss(Tape& tape, Var z_bb, const Tensor& positives, const Tensor& negatives, double tau) {
    return hcl_loss(tape, z_bb, positives, negatives, tau);
}

Var hlcl_loss(Tape& tape, Var hcl, Var lcl, double alpha_c, double beta_c) {
    if (alpha_c < 0 || beta_c < 0) throw ContractError("contrastive weights must be >= 0");
    return add(scale(hcl, alpha_c), scale(lcl, beta_c));
}

Var ar_loss(Tape& tape, const Tensor& x, Var x_hat) {
    if (!x.same_shape(x_hat.val()))
        throw ContractError("ar_loss: reconstruction " + x_hat.val().shape_str() +
                            " does not match input " + x.shape_str());
    Var diff = sub(x_hat, tape.constant(x));
    return mean_all(mul(diff, diff));
}

Var sr_loss(const std::vector<Var>& clean_stages, const std::vector<Var>& masked_stages) {
    if (clean_stages.size() != masked_stages.size())
        throw ContractError("sr_loss: " + std::to_string(clean_stages.size()) + " clean vs " +
                            std::to_string(masked_stages.size()) + " masked stages");
    if (clean_stages.empty()) throw ContractError("sr_loss: no stages");
    Var total;
    for (size_t p = 0; p < clean_stages.size(); ++p) {
        Var a = clean_stages[p], b = masked_stages[p];
        if (a.val().dim() == 3) a = global_avg_pool(a);
        if (b.val().dim() == 3) b = global_avg_pool(b);
        Var diff = sub(a, b);
        Var stage = mean_all(mul(diff, diff));
        total = p == 0 ? stage : add(total, stage);
    }
    return total;
}

Var drc_loss(Tape& tape, Var ar, Var sr, double alpha_r) {
    if (alpha_r < 0 || alpha_r > 1) throw ContractError("alpha_r must be in [0,1]");
    return add(scale(ar, alpha_r), scale(sr, 1.0 - alpha_r));
}

Var det_loss(Tape& tape, const DetPredictions& preds) {
    int n_pos = preds.objectness_pos.val().size(0);
    if (n_pos < 1) throw ContractError("det_loss needs at least one proposal");
    int n_neg = preds.has_negatives ? preds.objectness_neg.val().size(0) : 0;

    Var pos_bce = bce_logits_sum(preds.objectness_pos, Tensor::full({n_pos, 1}, 1.0));
    Var obj_sum = pos_bce;
    if (n_neg > 0) {
        Var neg_bce = bce_logits_sum(preds.objectness_neg, Tensor::full({n_neg, 1}, 0.0));
        obj_sum = add(obj_sum, neg_bce);
    }
    Var obj = scale(obj_sum, 1.0 / (n_pos + n_neg));
    Var reg = smooth_l1_mean(preds.deltas_pos);
    return add(obj, reg);
}

LossReport compose_report(double hcl, double lcl, double ar, double sr, double det,
                          const ContrastiveConfig& cc, double alpha_r) {
    LossReport r;
    r.l_hcl = hcl;
    r.l_lcl = lcl;
    r.l_hlcl = cc.alpha_c * hcl + cc.beta_c * lcl;
    r.l_ar = ar;
    r.l_sr = sr;
    r.l_drc = alpha_r * ar + (1.0 - alpha_r) * sr;
    r.l_det = det;
    r.total = r.l_hlcl + r.l_drc + r.l_det;
    return r;
}

// ---- value wrappers ----

double hcl_loss_value(const Tensor& z, const Tensor& positives, const Tensor& negatives, double tau) {
    Tape tape;
    return hcl_loss(tape, tape.constant(z), positives, negatives, tau).val().item();
}

double lcl_loss_value(const Tensor& z_bb, const Tensor& positives, const Tensor& negatives, double tau) {
    return hcl_loss_value(z_bb, positives, negatives, tau);
}

double hlcl_loss_value(double hcl, double lcl, double alpha_c, double beta_c) {
    if (alpha_c < 0 || beta_c < 0) throw ContractError("contrastive weights must be >= 0");
    return alpha_c * hcl + beta_c * lcl;
}

double ar_loss_value(const Tensor& x, const Tensor& x_hat) {
    Tape tape;
    return ar_loss(tape, x, tape.constant(x_hat)).val().item();
}

double sr_loss_value(const std::vector<Tensor>& clean_stages, const std::vector<Tensor>& masked_stages) {
    Tape tape;
    std::vector<Var> a, b;
    for (const Tensor& t : clean_stages) a.push_back(tape.constant(t));
    for (const Tensor& t : masked_stages) b.push_back(tape.constant(t));
    return sr_loss(a, b).val().item();
}

double drc_loss_value(double ar, double sr, double alpha_r) {
    if (alpha_r < 0 || alpha_r > 1) throw ContractError("alpha_r must be in [0,1]");
    return alpha_r * ar + (1.0 - alpha_r) * sr;
}

std::vector<BoundingBox> sample_background_boxes(int width, int height,
                                                 const std::vector<BoundingBox>& proposals,
                                                 int count, Rng& rng, int max_tries_per_box) {
    std::vector<BoundingBox> out;
    double lo = 0.1 * std::min(width, height), hi = 0.5 * std::min(width, height);
    for (int i = 0; i < count; ++i) {
        for (int attempt = 0; attempt < max_tries_per_box; ++attempt) {
            double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
            double x0 = rng.uniform(0.0, width - w), y0 = rng.uniform(0.0, height - h);
            BoundingBox b{x0, y0, x0 + w, y0 + h};
            bool clear = true;
            for (const BoundingBox& p : proposals)
                if (iou(b, p) >= 0.1) {
                    clear = false;
                    break;
                }
            if (clear) {
                out.push_back(b);
                break;
            }
        }
    }
    return out;
}

}  // namespace ltp
