// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace dtme {

// Shape or arity mismatch between operands.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced where finite values are required, or a matrix failed a
// numeric precondition (e.g. PSD check).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: calling an operation outside its documented contract.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed configs, bad file headers, I/O failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

uint64_t fnv1a64(std::span<const unsigned char> bytes);
uint64_t fnv1a64(const std::string& text);
std::string hash_hex(uint64_t h);

}  // namespace dtme
