#pragma once

#include <cstdint>
#include <vector>

#include "ltp/common.hpp"
#include "ltp/data.hpp"

namespace ltp {

struct ScheduleConfig {
    double t_threshold = 0.001;  // repeat-factor threshold t
    int t_max = 12;              // total pre-training epochs
    uint64_t seed = 0;
};

// Per-class rebalancing state for one epoch. Classes absent from the manifest
// carry combined_score 0 and repeat_factor 1 and never influence per-image
// maxima.
struct RepeatFactorTable {
    int epoch = 1;
    double alpha_d = 0.0;                // epoch / t_max, exact
    std::vector<double> combined_score;  // f[c]
    std::vector<double> repeat_factor;   // r[c] >= 1
};

struct EpochSchedule {
    std::vector<int64_t> image_ids;  // visit order, repetitions included
};

// Epoch-blended score: f_im * f_in / (alpha * f_im + (1 - alpha) * f_in).
// Returns 0 when the denominator vanishes with a zero numerator factor; both
// scores zero is a domain error (absent classes are excluded upstream).
double combined_score(double f_im, double f_in, double alpha_d);

// alpha_d = T / T_max with 1-indexed epochs, so alpha_d is in (0, 1].
double alpha_schedule(int epoch, int t_max);

// r = max(1, sqrt(t / f)) for f > 0.
double repeat_factor(double f, double t);

// Composes the score and repeat factor per class. Counts in `stats` are used
// for exact rational evaluation where they fit; falls back to double
// arithmetic on overflow.
RepeatFactorTable build_table(const ClassStats& stats, int epoch, const ScheduleConfig& config);

// Max of the class repeat factors present in the image, floor 1.
double image_repeat_factor(const ImageRecord& image, const RepeatFactorTable& table);

// Integer part replicated deterministically, fractional part by one seeded
// Bernoulli draw per image, then a seeded shuffle.
EpochSchedule build_epoch_schedule(const DatasetManifest& manifest, const RepeatFactorTable& table,
                                   uint64_t seed);

std::string table_to_csv(const RepeatFactorTable& table, const ClassStats& stats);

}  // namespace ltp
