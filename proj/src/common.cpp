// SPDX-License-Identifier: Apache-2.0
#include "dtme/common.hpp"

#include <cstdio>

namespace dtme {

uint64_t fnv1a64(std::span<const unsigned char> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(const std::string& text) {
    return fnv1a64(std::span<const unsigned char>(
        reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace dtme
