// SPDX-License-Identifier: Apache-2.0
#include "dtme/rng.hpp"

#include <cmath>

namespace dtme {
namespace {

// SplitMix64 finalizer; good avalanche for seed derivation.
uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace

uint64_t Rng::substream(uint64_t seed, uint64_t stream_id) {
    return splitmix64(splitmix64(seed) ^ (stream_id * 0x9e3779b97f4a7c15ull));
}

double Rng::uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

int Rng::uniform_int(int n) {
    // Lemire's multiply-shift map; bias is < 2^-32 for desk-scale n.
    return static_cast<int>((static_cast<__uint128_t>(gen_()) * static_cast<uint64_t>(n)) >> 64);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

double Rng::trunc_normal(double sigma) {
    for (;;) {
        double x = normal() * sigma;
        if (std::fabs(x) <= 2.0 * sigma) return x;
    }
}

void Rng::shuffle(std::vector<int>& v) {
    for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
        int j = uniform_int(i + 1);
        std::swap(v[i], v[j]);
    }
}

}  // namespace dtme
