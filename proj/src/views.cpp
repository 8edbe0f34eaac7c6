#include "ltp/views.hpp"

#include <algorithm>
#include <cmath>

namespace ltp {

ViewConfig identity_view_config(int size) {
    ViewConfig cfg;
    cfg.output_size = size;
    cfg.crop_scale_min = cfg.crop_scale_max = 1.0;
    cfg.crop_ratio_min = cfg.crop_ratio_max = 1.0;
    cfg.flip_prob = 0.0;
    cfg.color_jitter_prob = 0.0;
    cfg.grayscale_prob = 0.0;
    cfg.blur_prob = 0.0;
    cfg.solarize_prob = 0.0;
    return cfg;
}

BoundingBox map_box_to_view(const BoundingBox& source, const AffineRecord& t) {
    double ix0 = std::max(source.x0, t.crop.x0), iy0 = std::max(source.y0, t.crop.y0);
    double ix1 = std::min(source.x1, t.crop.x1), iy1 = std::min(source.y1, t.crop.y1);
    double sx = t.out_w / t.crop.width(), sy = t.out_h / t.crop.height();
    double x0 = (ix0 - t.crop.x0) * sx, x1 = (ix1 - t.crop.x0) * sx;
    double y0 = (iy0 - t.crop.y0) * sy, y1 = (iy1 - t.crop.y0) * sy;
    if (t.hflip) {
        double nx0 = t.out_w - x1, nx1 = t.out_w - x0;
        x0 = nx0;
        x1 = nx1;
    }
    return BoundingBox{x0, y0, x1, y1}.clipped(t.out_w, t.out_h);
}

BoundingBox map_box_from_view(const BoundingBox& in_view, const AffineRecord& t) {
    double x0 = in_view.x0, x1 = in_view.x1;
    if (t.hflip) {
        double nx0 = t.out_w - x1, nx1 = t.out_w - x0;
        x0 = nx0;
        x1 = nx1;
    }
    double sx = t.crop.width() / t.out_w, sy = t.crop.height() / t.out_h;
    return {t.crop.x0 + x0 * sx, t.crop.y0 + in_view.y0 * sy,
            t.crop.x0 + x1 * sx, t.crop.y0 + in_view.y1 * sy};
}

double visible_fraction(const BoundingBox& source, const AffineRecord& t) {
    double a = source.area();
    return a > 0 ? intersection_area(source, t.crop) / a : 0.0;
}

namespace {

double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    v = mx;
    double d = mx - mn;
    s = mx > 0 ? d / mx : 0;
    if (d == 0) {
        h = 0;
        return;
    }
    if (mx == r)
        h = std::fmod((g - b) / d, 6.0);
    else if (mx == g)
        h = (b - r) / d + 2.0;
    else
        h = (r - g) / d + 4.0;
    h /= 6.0;
    if (h < 0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    double i = std::floor(h * 6.0);
    double f = h * 6.0 - i;
    double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

void apply_photometric(Tensor& px, const PhotometricRecord& rec) {
    int h = px.size(1), w = px.size(2);
    int64_t hw = static_cast<int64_t>(h) * w;
    auto at = [&](int c, int64_t i) -> double& { return px[c * hw + i]; };

    if (rec.color_jitter) {
        for (int64_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c) at(c, i) *= rec.brightness;
        double mean = 0;
        for (int64_t i = 0; i < hw; ++i) mean += luminance(at(0, i), at(1, i), at(2, i));
        mean /= static_cast<double>(hw);
        for (int64_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c) at(c, i) = (at(c, i) - mean) * rec.contrast + mean;
        for (int64_t i = 0; i < hw; ++i) {
            double l = luminance(at(0, i), at(1, i), at(2, i));
            for (int c = 0; c < 3; ++c) at(c, i) = (at(c, i) - l) * rec.saturation + l;
        }
        if (rec.hue_shift != 0) {
            for (int64_t i = 0; i < hw; ++i) {
                double r = std::clamp(at(0, i), 0.0, 1.0);
                double g = std::clamp(at(1, i), 0.0, 1.0);
                double b = std::clamp(at(2, i), 0.0, 1.0);
                double hh, ss, vv;
                rgb_to_hsv(r, g, b, hh, ss, vv);
                hh = std::fmod(hh + rec.hue_shift + 1.0, 1.0);
                hsv_to_rgb(hh, ss, vv, r, g, b);
                at(0, i) = r;
                at(1, i) = g;
                at(2, i) = b;
            }
        }
    }
    if (rec.grayscale) {
        for (int64_t i = 0; i < hw; ++i) {
            double l = luminance(at(0, i), at(1, i), at(2, i));
            at(0, i) = at(1, i) = at(2, i) = l;
        }
    }
    if (rec.blur && rec.blur_sigma > 0) {
        int radius = std::max(1, static_cast<int>(std::ceil(2.0 * rec.blur_sigma)));
        std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
        double sum = 0;
        for (int i = -radius; i <= radius; ++i) {
            double v = std::exp(-0.5 * i * i / (rec.blur_sigma * rec.blur_sigma));
            kernel[static_cast<size_t>(i + radius)] = v;
            sum += v;
        }
        for (double& v : kernel) v /= sum;
        Tensor tmp(px.shape());
        for (int c = 0; c < 3; ++c)  // horizontal
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0;
                    for (int k = -radius; k <= radius; ++k) {
                        int xx = std::clamp(x + k, 0, w - 1);
                        acc += kernel[static_cast<size_t>(k + radius)] * px[(static_cast<int64_t>(c) * h + y) * w + xx];
                    }
                    tmp[(static_cast<int64_t>(c) * h + y) * w + x] = acc;
                }
        for (int c = 0; c < 3; ++c)  // vertical
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0;
                    for (int k = -radius; k <= radius; ++k) {
                        int yy = std::clamp(y + k, 0, h - 1);
                        acc += kernel[static_cast<size_t>(k + radius)] * tmp[(static_cast<int64_t>(c) * h + yy) * w + x];
                    }
                    px[(static_cast<int64_t>(c) * h + y) * w + x] = acc;
                }
    }
    if (rec.solarize) {
        for (int64_t i = 0; i < px.numel(); ++i)
            if (px[i] > 0.5) px[i] = 1.0 - px[i];
    }
    for (int64_t i = 0; i < px.numel(); ++i) px[i] = std::clamp(px[i], 0.0, 1.0);
}

Tensor resample_crop(const Tensor& src, int W, int H, const AffineRecord& t) {
    Tensor out({3, t.out_h, t.out_w});
    double sx = t.crop.width() / t.out_w, sy = t.crop.height() / t.out_h;
    for (int c = 0; c < 3; ++c)
        for (int oy = 0; oy < t.out_h; ++oy) {
            double fy = t.crop.y0 + (oy + 0.5) * sy - 0.5;
            int y0 = static_cast<int>(std::floor(fy));
            double wy = fy - y0;
            int y0c = std::clamp(y0, 0, H - 1), y1c = std::clamp(y0 + 1, 0, H - 1);
            for (int ox = 0; ox < t.out_w; ++ox) {
                double fx = t.crop.x0 + (ox + 0.5) * sx - 0.5;
                int x0 = static_cast<int>(std::floor(fx));
                double wx = fx - x0;
                int x0c = std::clamp(x0, 0, W - 1), x1c = std::clamp(x0 + 1, 0, W - 1);
                auto px = [&](int y, int x) { return src[(static_cast<int64_t>(c) * H + y) * W + x]; };
                double v = (1 - wy) * ((1 - wx) * px(y0c, x0c) + wx * px(y0c, x1c)) +
                           wy * ((1 - wx) * px(y1c, x0c) + wx * px(y1c, x1c));
                int out_x = t.hflip ? t.out_w - 1 - ox : ox;
                out[(static_cast<int64_t>(c) * t.out_h + oy) * t.out_w + out_x] = v;
            }
        }
    return out;
}

}  // namespace

AugmentedView make_view(const ImageRecord& image, const ViewConfig& cfg, Rng& rng) {
    if (!image.has_pixels()) throw ContractError("make_view requires pixel data");
    int W = image.width, H = image.height;

    AffineRecord t;
    t.out_w = t.out_h = cfg.output_size;
    double area = static_cast<double>(W) * H;
    bool placed = false;
    for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
        double frac = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
        double log_r = rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max));
        double ratio = std::exp(log_r);
        double cw = std::sqrt(area * frac * ratio), ch = std::sqrt(area * frac / ratio);
        if (cw <= W + 1e-9 && ch <= H + 1e-9) {
            cw = std::min(cw, static_cast<double>(W));
            ch = std::min(ch, static_cast<double>(H));
            double x0 = rng.uniform(0.0, W - cw), y0 = rng.uniform(0.0, H - ch);
            t.crop = {x0, y0, x0 + cw, y0 + ch};
            placed = true;
        }
    }
    if (!placed) t.crop = {0, 0, static_cast<double>(W), static_cast<double>(H)};
    t.hflip = rng.uniform() < cfg.flip_prob;

    // all photometric draws are unconditional so the stream (and therefore
    // the geometry) is identical whichever ops end up enabled
    PhotometricRecord rec;
    rec.color_jitter = rng.uniform() < cfg.color_jitter_prob;
    rec.brightness = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    rec.contrast = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    rec.saturation = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    rec.hue_shift = rng.uniform(-cfg.hue_strength, cfg.hue_strength);
    rec.grayscale = rng.uniform() < cfg.grayscale_prob;
    rec.blur = rng.uniform() < cfg.blur_prob;
    rec.blur_sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max);
    rec.solarize = rng.uniform() < cfg.solarize_prob;
    if (!rec.color_jitter) {
        rec.brightness = rec.contrast = rec.saturation = 1.0;
        rec.hue_shift = 0.0;
    }
    if (!rec.blur) rec.blur_sigma = 0.0;

    AugmentedView view;
    view.transform = t;
    view.photometric = rec;
    view.pixels = resample_crop(image.pixels, W, H, t);
    apply_photometric(view.pixels, rec);
    return view;
}

namespace {

std::vector<BoundingBox> candidate_proposals(const ImageRecord& image, ProposalSource source,
                                             const ViewConfig& cfg, Rng& rng) {
    std::vector<BoundingBox> out;
    switch (source) {
        case ProposalSource::GroundTruth:
            for (const Annotation& a : image.annotations) out.push_back(a.box);
            break;
        case ProposalSource::JitteredGt:
            for (const Annotation& a : image.annotations) {
                double w = a.box.width(), h = a.box.height();
                double f = cfg.gt_jitter_frac;
                BoundingBox b{a.box.x0 + rng.uniform(-f, f) * w, a.box.y0 + rng.uniform(-f, f) * h,
                              a.box.x1 + rng.uniform(-f, f) * w, a.box.y1 + rng.uniform(-f, f) * h};
                b = b.clipped(image.width, image.height);
                if (b.valid()) out.push_back(b);
            }
            break;
        case ProposalSource::RandomBoxes:
            for (int i = 0; i < cfg.random_box_candidates; ++i) {
                double lo = 0.2 * std::min(image.width, image.height);
                double hi = 0.7 * std::min(image.width, image.height);
                double w = rng.uniform(lo, hi), h = rng.uniform(lo, hi);
                double x0 = rng.uniform(0.0, image.width - w), y0 = rng.uniform(0.0, image.height - h);
                out.push_back({x0, y0, x0 + w, y0 + h});
            }
            break;
    }
    return out;
}

}  // namespace

ViewPair make_view_pair(const ImageRecord& image, ProposalSource source, uint64_t seed,
                        const ViewConfig& cfg) {
    Rng rng(seed);
    std::vector<BoundingBox> candidates = candidate_proposals(image, source, cfg, rng);
    if (candidates.empty())
        throw EmptyProposalsError("image " + std::to_string(image.image_id) + " has no proposals");

    for (int attempt = 0; attempt < cfg.retry_attempts; ++attempt) {
        ViewPair pair;
        pair.view_q = make_view(image, cfg, rng);
        pair.view_k = make_view(image, cfg, rng);

        std::vector<size_t> surviving;
        for (size_t i = 0; i < candidates.size(); ++i) {
            if (visible_fraction(candidates[i], pair.view_q.transform) >= cfg.visibility_threshold &&
                visible_fraction(candidates[i], pair.view_k.transform) >= cfg.visibility_threshold)
                surviving.push_back(i);
        }
        if (surviving.empty()) continue;

        std::vector<size_t> picks;
        if (static_cast<int>(surviving.size()) > cfg.max_proposals) {
            std::vector<size_t> order = rng.sample_indices(surviving.size(),
                                                           static_cast<size_t>(cfg.max_proposals));
            for (size_t o : order) picks.push_back(surviving[o]);
        } else {
            picks = surviving;
        }
        for (size_t i : picks) {
            MappedProposal p;
            p.source_box = candidates[i];
            p.box_in_q = map_box_to_view(candidates[i], pair.view_q.transform);
            p.box_in_k = map_box_to_view(candidates[i], pair.view_k.transform);
            pair.proposals.push_back(p);
        }
        return pair;
    }
    throw EmptyProposalsError("image " + std::to_string(image.image_id) + ": no proposal kept " +
                              std::to_string(cfg.visibility_threshold * 100) + "% visibility in " +
                              std::to_string(cfg.retry_attempts) + " crop attempts");
}

MaskSpec sample_mask_spec(const BoundingBox& proposal, double ratio, uint64_t seed) {
    if (ratio < 0 || ratio >= 1) throw ContractError("mask ratio must be in [0, 1)");
    int px0 = static_cast<int>(std::floor(proposal.x0)), py0 = static_cast<int>(std::floor(proposal.y0));
    int px1 = static_cast<int>(std::ceil(proposal.x1)), py1 = static_cast<int>(std::ceil(proposal.y1));
    int wp = px1 - px0, hp = py1 - py0;
    if (wp * hp < 4) throw ContractError("proposal smaller than 4 pixels cannot host a mask");

    MaskSpec spec;
    spec.requested_ratio = ratio;
    if (ratio == 0) return spec;

    Rng rng(seed);
    double target = ratio * wp * hp;
    double aspect = rng.uniform(0.5, 2.0);

    // smallest |area - target| wins; aspect closest to the sample breaks ties
    int best_w = 1, best_h = 1;
    double best_area_err = 1e300, best_aspect_err = 1e300;
    for (int w = 1; w <= wp; ++w)
        for (int h = 1; h <= hp; ++h) {
            double area_err = std::abs(static_cast<double>(w) * h - target);
            double aspect_err = std::abs(std::log(static_cast<double>(w) / h) - std::log(aspect));
            if (area_err < best_area_err - 1e-12 ||
                (std::abs(area_err - best_area_err) <= 1e-12 && aspect_err < best_aspect_err)) {
                best_area_err = area_err;
                best_aspect_err = aspect_err;
                best_w = w;
                best_h = h;
            }
        }
    spec.w = best_w;
    spec.h = best_h;
    spec.relaxed = best_area_err >= 1.0;
    spec.achieved_ratio = static_cast<double>(best_w) * best_h / (static_cast<double>(wp) * hp);
    spec.x0 = px0 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(wp - best_w + 1)));
    spec.y0 = py0 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(hp - best_h + 1)));
    return spec;
}

Tensor apply_mask(const Tensor& pixels, const MaskSpec& spec) {
    if (pixels.dim() != 3) throw ContractError("apply_mask expects {3,H,W} pixels");
    Tensor out = pixels;
    if (spec.empty()) return out;
    int h = pixels.size(1), w = pixels.size(2);
    if (spec.x0 < 0 || spec.y0 < 0 || spec.x0 + spec.w > w || spec.y0 + spec.h > h)
        throw ContractError("mask rectangle outside image bounds");
    for (int c = 0; c < pixels.size(0); ++c)
        for (int y = spec.y0; y < spec.y0 + spec.h; ++y)
            for (int x = spec.x0; x < spec.x0 + spec.w; ++x)
                out[(static_cast<int64_t>(c) * h + y) * w + x] = 0.0;
    return out;
}

Tensor mask_tensor(int height, int width, const MaskSpec& spec) {
    Tensor m = Tensor::full({3, height, width}, 1.0);
    if (spec.empty()) return m;
    if (spec.x0 < 0 || spec.y0 < 0 || spec.x0 + spec.w > width || spec.y0 + spec.h > height)
        throw ContractError("mask rectangle outside image bounds");
    for (int c = 0; c < 3; ++c)
        for (int y = spec.y0; y < spec.y0 + spec.h; ++y)
            for (int x = spec.x0; x < spec.x0 + spec.w; ++x)
                m[(static_cast<int64_t>(c) * height + y) * width + x] = 0.0;
    return m;
}

}  // namespace ltp
