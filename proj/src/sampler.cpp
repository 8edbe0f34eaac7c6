#include "ltp/sampler.hpp"

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace ltp {

namespace {

struct RationalOverflow {};

// Minimal exact rational on int64 with 128-bit intermediates. Throws
// RationalOverflow when a reduced result no longer fits; build_table catches
// and falls back to doubles.
struct Rational {
    int64_t num = 0;
    int64_t den = 1;

    static Rational of(int64_t n, int64_t d) {
        if (d == 0) throw DomainError("rational with zero denominator");
        if (d < 0) { n = -n; d = -d; }
        int64_t g = std::gcd(n < 0 ? -n : n, d);
        if (g > 1) { n /= g; d /= g; }
        return {n, d};
    }

    static Rational reduce128(__int128 n, __int128 d) {
        if (d < 0) { n = -n; d = -d; }
        __int128 a = n < 0 ? -n : n, b = d;
        while (b) { __int128 t = a % b; a = b; b = t; }
        if (a > 1) { n /= a; d /= a; }
        constexpr __int128 lim = INT64_MAX;
        if (n > lim || n < -lim || d > lim) throw RationalOverflow{};
        return {static_cast<int64_t>(n), static_cast<int64_t>(d)};
    }

    Rational operator*(const Rational& o) const {
        return reduce128(static_cast<__int128>(num) * o.num, static_cast<__int128>(den) * o.den);
    }
    Rational operator+(const Rational& o) const {
        return reduce128(static_cast<__int128>(num) * o.den + static_cast<__int128>(o.num) * den,
                         static_cast<__int128>(den) * o.den);
    }
    Rational operator/(const Rational& o) const {
        if (o.num == 0) throw DomainError("rational division by zero");
        return reduce128(static_cast<__int128>(num) * o.den, static_cast<__int128>(den) * o.num);
    }

    bool zero() const { return num == 0; }
    double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }
};

}  // namespace

double combined_score(double f_im, double f_in, double alpha_d) {
    if (f_im < 0 || f_in < 0) throw DomainError("combined_score requires non-negative scores");
    if (alpha_d < 0 || alpha_d > 1) throw DomainError("alpha_d must be in [0, 1]");
    if (f_im == 0 && f_in == 0)
        throw DomainError("combined_score undefined for a class with both scores zero");
    double denom = alpha_d * f_im + (1.0 - alpha_d) * f_in;
    if (denom == 0) return 0.0;
    return f_im * f_in / denom;
}

double alpha_schedule(int epoch, int t_max) {
    if (t_max < 1) throw DomainError("t_max must be >= 1");
    if (epoch < 1 || epoch > t_max)
        throw DomainError("epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(t_max) + "]");
    return static_cast<double>(epoch) / static_cast<double>(t_max);
}

double repeat_factor(double f, double t) {
    if (f <= 0) throw DomainError("repeat_factor requires f > 0");
    if (t <= 0) throw DomainError("repeat_factor requires t > 0");
    return std::max(1.0, std::sqrt(t / f));
}

RepeatFactorTable build_table(const ClassStats& stats, int epoch, const ScheduleConfig& config) {
    RepeatFactorTable table;
    table.epoch = epoch;
    table.alpha_d = alpha_schedule(epoch, config.t_max);
    size_t C = stats.f_im.size();
    table.combined_score.assign(C, 0.0);
    table.repeat_factor.assign(C, 1.0);

    for (size_t c = 0; c < C; ++c) {
        if (stats.images_with[c] == 0 && stats.instances[c] == 0) continue;  // absent: f=0, r=1
        double f;
        try {
            Rational a = Rational::of(stats.images_with[c], stats.num_images);
            Rational b = stats.num_instances > 0 ? Rational::of(stats.instances[c], stats.num_instances)
                                                 : Rational{0, 1};
            Rational alpha = Rational::of(epoch, config.t_max);
            Rational one_minus = Rational::of(config.t_max - epoch, config.t_max);
            Rational num = a * b;
            Rational den = alpha * a + one_minus * b;
            f = den.zero() ? 0.0 : (num / den).to_double();
        } catch (const RationalOverflow&) {
            f = combined_score(stats.f_im[c], stats.f_in[c], table.alpha_d);
        }
        table.combined_score[c] = f;
        table.repeat_factor[c] = f > 0 ? repeat_factor(f, config.t_threshold) : 1.0;
    }
    return table;
}

double image_repeat_factor(const ImageRecord& image, const RepeatFactorTable& table) {
    double r = 1.0;
    for (const Annotation& a : image.annotations) {
        size_t c = static_cast<size_t>(a.category_id);
        if (c < table.repeat_factor.size()) r = std::max(r, table.repeat_factor[c]);
    }
    return r;
}

EpochSchedule build_epoch_schedule(const DatasetManifest& manifest, const RepeatFactorTable& table,
                                   uint64_t seed) {
    if (table.repeat_factor.size() != static_cast<size_t>(manifest.num_classes))
        throw ContractError("repeat-factor table covers " + std::to_string(table.repeat_factor.size()) +
                            " classes, manifest has " + std::to_string(manifest.num_classes));
    Rng rng(seed);
    EpochSchedule sched;
    sched.image_ids.reserve(manifest.images.size());
    for (const ImageRecord& im : manifest.images) {
        double r = image_repeat_factor(im, table);
        int64_t copies = static_cast<int64_t>(std::floor(r));
        double frac = r - static_cast<double>(copies);
        if (rng.uniform() < frac) ++copies;
        for (int64_t k = 0; k < copies; ++k) sched.image_ids.push_back(im.image_id);
    }
    rng.shuffle(sched.image_ids);
    return sched;
}

std::string table_to_csv(const RepeatFactorTable& table, const ClassStats& stats) {
    std::ostringstream os;
    os << "class_id,f_im,f_in,f,r\n";
    os.precision(17);
    for (size_t c = 0; c < table.combined_score.size(); ++c) {
        os << c << "," << stats.f_im[c] << "," << stats.f_in[c] << "," << table.combined_score[c]
           << "," << table.repeat_factor[c] << "\n";
    }
    return os.str();
}

}  // namespace ltp
