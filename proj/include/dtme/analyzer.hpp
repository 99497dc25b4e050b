// SPDX-License-Identifier: Apache-2.0
//
// Token-space analysis: uncentered token covariance per layer, its
// eigendecomposition split into a high-variance range subspace and a
// low-variance null subspace, and gradient-conflict statistics between task
// pairs inside each subspace. All routines are pure and single-threaded.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "dtme/tensor.hpp"

namespace dtme {

// Running mean of t t^T over tokens: columns of the p x N arrangement are
// tokens, so each token contributes one p x p outer product.
struct TokenCovariance {
    int layer = 0;  // 1-based layer id for reporting
    int dim = 0;    // p
    Tensor matrix;  // p x p, symmetric PSD
    long samples = 0;
};

// Accumulates covariance over batches of tokens (each batch N x p, rows are
// tokens). `samples` counts batches, matching the 1/n averaging convention.
class CovarianceAccumulator {
public:
    CovarianceAccumulator(int layer, int dim);
    void add_tokens(const Tensor& tokens_n_by_p);
    TokenCovariance finalize() const;

private:
    int layer_;
    int dim_;
    std::vector<double> sum_;  // upper triangle accumulated, mirrored at finalize
    long samples_ = 0;
};

// Convenience for tests: covariance of a single list of token batches.
TokenCovariance uncentered_covariance(int layer, const std::vector<Tensor>& token_batches);

struct SymmetricEigen {
    Tensor vectors;              // p x p, columns are unit eigenvectors
    std::vector<double> values;  // descending
};

// Cyclic Jacobi rotations; stops when the off-diagonal Frobenius norm drops
// below 1e-12 * trace (or after a fixed sweep cap, which is an error).
SymmetricEigen jacobi_eigendecompose(const Tensor& symmetric);

// High-variance/low-variance split of a covariance spectrum. The split index
// m is the smallest count of leading eigenvalues whose mass exceeds r times
// the remaining mass (a zero remainder counts as exceeding any r).
struct SpectralBasis {
    int layer = 0;
    Tensor vectors;              // p x p eigenvector columns, descending eigenvalue order
    std::vector<double> values;  // descending, clamped to >= 0 within tolerance
    int split = 0;               // m = number of range directions, 1..p
    double ratio = 0.0;          // the r used

    int dim() const { return static_cast<int>(values.size()); }
    // Projects a length-p vector onto the range / null subspace.
    void project(const double* g, double* range_out, double* null_out) const;
};

SpectralBasis spectral_split(const TokenCovariance& cov, double r);

// Projections of one task's token gradients (N x p, rows are tokens).
struct ProjectedGradients {
    int task = 0;
    Tensor range_part;  // N x p
    Tensor null_part;   // N x p
};

ProjectedGradients project_gradients(int task, const Tensor& token_grads,
                                     const SpectralBasis& basis);

constexpr int kCosineHistogramBins = 18;
constexpr double kZeroGradNorm = 1e-12;

// Conflict counts for one ordered task pair (i < j), accumulated per token.
struct PairConflicts {
    int task_i = 0;
    int task_j = 0;
    long range_conflicts = 0;
    long null_conflicts = 0;
    long tokens = 0;  // (token, sample) observations examined
    // Histogram of unprojected cosine similarity over [-1, 1]; pairs with a
    // near-zero vector land in the bin containing 0.
    std::array<long, kCosineHistogramBins> cosine_hist{};
};

struct ConflictStats {
    int layer = 0;
    int num_tasks = 0;
    std::vector<PairConflicts> pairs;  // lexicographic (i, j), i < j

    void merge(const ConflictStats& other);
    long total_tokens() const;
    long total_range() const;
    long total_null() const;
};

// Counts sign conflicts between every task pair per token. `task_grads` holds
// one N x p gradient batch per task; a projected pair conflicts when its dot
// product is <= 0 and neither side is a near-zero vector.
ConflictStats detect_conflicts(const std::vector<Tensor>& task_grads, const SpectralBasis& basis);

struct LayerSeverity {
    int layer = 0;
    double range_score = 0.0;  // mean conflict indicator over (sample, token, pair)
    double null_score = 0.0;
};

LayerSeverity aggregate_layer_conflicts(const ConflictStats& stats);

int cosine_histogram_bin(double c);

}  // namespace dtme
