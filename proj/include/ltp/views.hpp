#pragma once

#include <cstdint>
#include <vector>

#include "ltp/common.hpp"
#include "ltp/data.hpp"

namespace ltp {

// Geometric half of an augmentation: crop rectangle in source coordinates,
// resize to the output size, optional horizontal flip. Invertible on the crop
// region.
struct AffineRecord {
    BoundingBox crop;
    bool hflip = false;
    int out_w = 0, out_h = 0;
};

struct PhotometricRecord {
    bool color_jitter = false;
    double brightness = 1.0, contrast = 1.0, saturation = 1.0, hue_shift = 0.0;
    bool grayscale = false;
    bool blur = false;
    double blur_sigma = 0.0;
    bool solarize = false;
};

struct AugmentedView {
    Tensor pixels;  // {3, out_h, out_w}
    AffineRecord transform;
    PhotometricRecord photometric;
};

struct MappedProposal {
    BoundingBox box_in_q;
    BoundingBox box_in_k;
    BoundingBox source_box;
};

struct ViewPair {
    AugmentedView view_q;
    AugmentedView view_k;
    std::vector<MappedProposal> proposals;
};

enum class ProposalSource { GroundTruth, JitteredGt, RandomBoxes };

// Augmentation recipe. The photometric ranges follow the MoCo v2 pipeline:
// jitter strength 0.4 (brightness/contrast/saturation), hue 0.1 at p=0.8,
// grayscale p=0.2, Gaussian blur p=0.5, solarization p=0.2.
struct ViewConfig {
    int output_size = 64;
    double crop_scale_min = 0.4, crop_scale_max = 1.0;  // area fraction
    double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
    double flip_prob = 0.5;
    double color_jitter_prob = 0.8;
    double jitter_strength = 0.4;
    double hue_strength = 0.1;
    double grayscale_prob = 0.2;
    double blur_prob = 0.5;
    double blur_sigma_min = 0.1, blur_sigma_max = 2.0;
    double solarize_prob = 0.2;
    double solarize_threshold = 0.5;
    int max_proposals = 8;
    double visibility_threshold = 0.5;  // source-box area kept in each crop
    double gt_jitter_frac = 0.1;        // jittered-gt corner noise
    int random_box_candidates = 16;
    int retry_attempts = 10;
};

// full-image crop, no flip, no photometric ops; boxes map to themselves
ViewConfig identity_view_config(int size);

BoundingBox map_box_to_view(const BoundingBox& source, const AffineRecord& t);
BoundingBox map_box_from_view(const BoundingBox& in_view, const AffineRecord& t);
double visible_fraction(const BoundingBox& source, const AffineRecord& t);

AugmentedView make_view(const ImageRecord& image, const ViewConfig& cfg, Rng& rng);

// Two independent views with candidate proposals filtered by the visibility
// rule in both crops, then up to max_proposals retained by seeded choice.
// Zero survivors after retry_attempts fresh crops raises EmptyProposalsError.
ViewPair make_view_pair(const ImageRecord& image, ProposalSource source, uint64_t seed,
                        const ViewConfig& cfg);

// Axis-aligned mask rectangle inside a proposal's pixel window. The achieved
// area is the closest integer rectangle to ratio * area with aspect nearest
// the sampled target; `relaxed` flags a gap of one pixel or more.
struct MaskSpec {
    int x0 = 0, y0 = 0, w = 0, h = 0;
    double requested_ratio = 0.0;
    double achieved_ratio = 0.0;
    bool relaxed = false;

    bool empty() const { return w == 0 || h == 0; }
};

MaskSpec sample_mask_spec(const BoundingBox& proposal, double ratio, uint64_t seed);

// copy with the mask rectangle zeroed; everything else bit-identical
Tensor apply_mask(const Tensor& pixels, const MaskSpec& spec);

// {1 everywhere, 0 inside the rect}; multiplied into autodiff graphs
Tensor mask_tensor(int height, int width, const MaskSpec& spec);

}  // namespace ltp
