// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace dtme {

// Deterministic random stream. mt19937_64 output is fixed by the standard;
// all distributions are hand-rolled on top of it so results do not depend on
// the standard library implementation.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Derives an independent substream seed from a root seed and a stream id.
    static uint64_t substream(uint64_t seed, uint64_t stream_id);

    uint64_t next_u64() { return gen_(); }

    // Uniform on [0, 1) with 53 random bits.
    double uniform();

    // Uniform integer in [0, n), n > 0.
    int uniform_int(int n);

    // Standard normal via Box-Muller (caches the spare deviate).
    double normal();

    // Normal(0, sigma) resampled until |x| <= 2*sigma.
    double trunc_normal(double sigma);

    // In-place Fisher-Yates shuffle.
    void shuffle(std::vector<int>& v);

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Named substream ids for the root run seed. Keeping streams separate means
// e.g. plan sampling never perturbs data order.
enum class Stream : uint64_t {
    Init = 1,
    DataOrder = 2,
    Plan = 3,
    DataGen = 4,
};

inline Rng make_stream(uint64_t seed, Stream s) {
    return Rng(Rng::substream(seed, static_cast<uint64_t>(s)));
}

}  // namespace dtme
