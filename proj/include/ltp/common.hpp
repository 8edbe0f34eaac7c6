#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ltp {

// Error hierarchy. Messages carry the offending detail (byte offset, tensor
// name, expected/actual shape) so callers can report without re-deriving it.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : Error { using Error::Error; };      // unparseable input
struct ValidationError : Error { using Error::Error; };  // parseable but inconsistent
struct DomainError : Error { using Error::Error; };      // argument outside math domain
struct ContractError : Error { using Error::Error; };    // API precondition breach
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct CheckpointError : Error { using Error::Error; };
struct EmptyProposalsError : Error { using Error::Error; };

inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Stable seed derivation for worker-local generators:
// derive_seed(global, {image_id, epoch, ...}).
inline uint64_t derive_seed(uint64_t base, std::initializer_list<uint64_t> parts) {
    uint64_t h = mix64(base);
    for (uint64_t p : parts) h = mix64(h ^ p);
    return h;
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are hand-coded because std::uniform_*_distribution and
// std::shuffle are implementation-defined and would break byte-identical
// logs across toolchains.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : next() % n; }

    // standard normal via Box-Muller (no cached spare, keeps state trivial)
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices from [0, n), order randomized
    std::vector<size_t> sample_indices(size_t n, size_t k) {
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; ++i) idx[i] = i;
        shuffle(idx);
        if (k < n) idx.resize(k);
        return idx;
    }

    std::string save_state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
        if (is.fail()) throw CheckpointError("rng state string is corrupt");
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace ltp
