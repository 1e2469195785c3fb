#pragma once

#include <cstdint>
#include <random>

namespace diffattn {

// Named, explicitly threaded RNG. Every initializer takes one of these;
// there is no ambient global randomness anywhere in the library.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    float normal(float mean = 0.0f, float stddev = 1.0f) {
        std::normal_distribution<float> dist(mean, stddev);
        return dist(engine_);
    }

    float uniform(float lo = 0.0f, float hi = 1.0f) {
        std::uniform_real_distribution<float> dist(lo, hi);
        return dist(engine_);
    }

    // Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> dist(0, n - 1);
        return dist(engine_);
    }

    std::uint64_t next_u64() { return engine_(); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace diffattn
