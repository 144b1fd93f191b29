// leosat - LEO satellite IoT downlink simulation and learning toolkit
// Copyright (C) 2026 the leosat authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ------------------------------------------------------------------------

#pragma once

#include <random>

#include "leosat/common.hpp"

namespace leosat {

// Deterministic RNG. std::mt19937_64 output is fully specified by the
// standard, and all distribution transforms are written out explicitly
// (std::normal_distribution etc. are implementation-defined), so streams
// are bit-identical across platforms and library versions.
class Rng {
public:
    explicit Rng(uint64_t seed = 1) : engine_(seed) {}

    uint64_t raw() { return engine_(); }

    // Uniform in [0,1): 53 random mantissa bits.
    double uniform() { return double(engine_() >> 11) * (1.0 / 9007199254740992.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; consumes two uniforms per pair, caches the second.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Circularly-symmetric complex normal with E[|z|^2] = 1.
    cplx cnormal() {
        const double s = std::sqrt(0.5);
        double re = normal();
        double im = normal();
        return {s * re, s * im};
    }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[below(i)]);
        }
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace leosat
