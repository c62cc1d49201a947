#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace augsearch {

// Stream splitting: every random stream is seeded by
//   derive_seed(user_seed, stream_name, indices...)
// which folds the FNV-1a hash of the stream name and each index into the
// user seed through splitmix64. Named streams ("init", "shuffle", "inner",
// "hyper", "eval", ...) are therefore independent but reproducible, and
// per-image streams are keyed by (step, image) so results do not depend on
// how work is partitioned across workers.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                          std::initializer_list<std::uint64_t> indices = {});

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    Rng(std::uint64_t seed, std::string_view stream, std::initializer_list<std::uint64_t> indices = {})
        : engine_(derive_seed(seed, stream, indices)) {}

    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform();
    double normal();
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace augsearch
