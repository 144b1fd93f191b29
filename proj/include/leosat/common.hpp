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

#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace leosat {

using cplx = std::complex<double>;

inline constexpr double kLightSpeed = 299792458.0;  // m/s

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double linear_to_db(double lin) { return 10.0 * std::log10(lin); }
inline double dbm_to_watt(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }
inline double dbw_to_watt(double dbw) { return std::pow(10.0, dbw / 10.0); }
inline double deg_to_rad(double deg) { return deg * M_PI / 180.0; }

// FNV-1a, used for config/content hashing and seed derivation.
inline uint64_t fnv1a(const void* bytes, size_t n, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a(const std::string& s, uint64_t h = 14695981039346656037ull) {
    return fnv1a(s.data(), s.size(), h);
}

// splitmix64 finalizer; decorrelates derived seeds.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Independent per-stream seed from a master seed and a stream index.
inline uint64_t derive_seed(uint64_t master, uint64_t stream) {
    return mix64(master ^ mix64(stream + 0x51ed270b7a1fca5dull));
}

}  // namespace leosat
