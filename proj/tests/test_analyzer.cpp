// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "dtme/analyzer.hpp"
#include "dtme/rng.hpp"

using namespace dtme;

namespace {

Tensor random_matrix(int rows, int cols, Rng& rng, double spread = 1.0) {
    std::vector<double> vals(static_cast<size_t>(rows) * cols);
    for (auto& v : vals) v = spread * rng.normal();
    return Tensor::from({rows, cols}, std::move(vals));
}

Tensor random_psd(int p, Rng& rng) {
    Tensor b = random_matrix(p, p, rng);
    Tensor c = matmul(transpose(b), b);
    // Exact symmetry for the Jacobi precheck.
    std::vector<double> vals(c.data().begin(), c.data().end());
    for (int i = 0; i < p; ++i) {
        for (int j = i + 1; j < p; ++j) {
            const double v =
                0.5 * (vals[static_cast<size_t>(i) * p + j] + vals[static_cast<size_t>(j) * p + i]);
            vals[static_cast<size_t>(i) * p + j] = v;
            vals[static_cast<size_t>(j) * p + i] = v;
        }
    }
    return Tensor::from({p, p}, std::move(vals));
}

TokenCovariance cov_of(Tensor matrix, int layer = 1) {
    TokenCovariance cov;
    cov.layer = layer;
    cov.dim = matrix.dim(0);
    cov.matrix = std::move(matrix);
    cov.samples = 1;
    return cov;
}

Tensor diag(const std::vector<double>& d) {
    const int p = static_cast<int>(d.size());
    std::vector<double> vals(static_cast<size_t>(p) * p, 0.0);
    for (int i = 0; i < p; ++i) vals[static_cast<size_t>(i) * p + i] = d[static_cast<size_t>(i)];
    return Tensor::from({p, p}, std::move(vals));
}

double frob_diff(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace

TEST_SUITE("analyzer") {

TEST_CASE("covariance matches hand-summed outer products") {
    // One batch of two unit tokens: T T^T = I.
    Tensor batch1 = Tensor::from({2, 2}, {1.0, 0.0, 0.0, 1.0});
    TokenCovariance c1 = uncentered_covariance(1, {batch1});
    CHECK(c1.samples == 1);
    CHECK(c1.matrix.at({0, 0}) == 1.0);
    CHECK(c1.matrix.at({0, 1}) == 0.0);
    CHECK(c1.matrix.at({1, 1}) == 1.0);

    // Second batch [2,0] contributes diag(4,0); mean over batches.
    Tensor batch2 = Tensor::from({1, 2}, {2.0, 0.0});
    TokenCovariance c2 = uncentered_covariance(1, {batch1, batch2});
    CHECK(c2.matrix.at({0, 0}) == doctest::Approx(2.5));
    CHECK(c2.matrix.at({1, 1}) == doctest::Approx(0.5));
    CHECK(c2.matrix.at({1, 0}) == 0.0);

    // Mixed-sign tokens: [1,2] and [-1,1].
    Tensor batch3 = Tensor::from({2, 2}, {1.0, 2.0, -1.0, 1.0});
    TokenCovariance c3 = uncentered_covariance(4, {batch3});
    CHECK(c3.layer == 4);
    CHECK(c3.matrix.at({0, 0}) == doctest::Approx(2.0));
    CHECK(c3.matrix.at({0, 1}) == doctest::Approx(1.0));
    CHECK(c3.matrix.at({1, 0}) == doctest::Approx(1.0));
    CHECK(c3.matrix.at({1, 1}) == doctest::Approx(5.0));

    CovarianceAccumulator acc(1, 2);
    CHECK_THROWS_AS(acc.finalize(), ContractError);
    CHECK_THROWS_AS(acc.add_tokens(Tensor::from({1, 3}, {1, 2, 3})), ShapeError);
}

TEST_CASE("jacobi eigendecomposition satisfies the spectral identities") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        const int p = 2 + rng.uniform_int(7);
        Tensor a = random_psd(p, rng);
        SymmetricEigen eig = jacobi_eigendecompose(a);
        REQUIRE(static_cast<int>(eig.values.size()) == p);

        // Descending order.
        for (int i = 1; i < p; ++i) CHECK(eig.values[i - 1] >= eig.values[i]);

        // U^T U = I.
        Tensor utu = matmul(transpose(eig.vectors), eig.vectors);
        Tensor id = diag(std::vector<double>(static_cast<size_t>(p), 1.0));
        CHECK(frob_diff(utu, id) < 1e-8);

        // A u_i = lambda_i u_i.
        for (int i = 0; i < p; ++i) {
            for (int rrow = 0; rrow < p; ++rrow) {
                double av = 0.0;
                for (int k = 0; k < p; ++k) av += a.at({rrow, k}) * eig.vectors.at({k, i});
                CHECK(av == doctest::Approx(eig.values[static_cast<size_t>(i)] *
                                            eig.vectors.at({rrow, i}))
                                .epsilon(1e-7));
            }
        }
    }
    CHECK_THROWS_AS(jacobi_eigendecompose(Tensor::from({2, 2}, {0, 1, 0, 0})), NumericError);
}

TEST_CASE("split index on a known spectrum") {
    // diag(100, 1, 0) with r = 100: the first eigenvalue alone gives
    // 100 > 100 * 1 false, so two are needed.
    SpectralBasis b = spectral_split(cov_of(diag({100.0, 1.0, 0.0})), 100.0);
    CHECK(b.split == 2);
    CHECK(b.values[0] == doctest::Approx(100.0));

    // Identity spectrum, odd p, r = 1: first k with k > (p - k).
    SpectralBasis bi = spectral_split(cov_of(diag({1, 1, 1, 1, 1})), 1.0);
    CHECK(bi.split == 3);

    // Zero tail counts as exceeding any ratio.
    SpectralBasis bz = spectral_split(cov_of(diag({5.0, 0.0, 0.0})), 1e9);
    CHECK(bz.split == 1);

    CHECK_THROWS_AS(spectral_split(cov_of(diag({1.0, 1.0})), 0.0), ContractError);
    CHECK_THROWS_AS(spectral_split(cov_of(diag({1.0, -2.0})), 1.0), NumericError);
}

TEST_CASE("split is monotone in r and scale invariant") {
    Rng rng(23);
    const std::vector<double> sweep = {1.0, 10.0, 100.0, 500.0, 1000.0};
    for (int trial = 0; trial < 10; ++trial) {
        const int p = 4 + rng.uniform_int(13);
        Tensor a = random_psd(p, rng);
        int prev = 0;
        for (double r : sweep) {
            const int m = spectral_split(cov_of(a), r).split;
            CHECK(m >= prev);
            CHECK(m >= 1);
            CHECK(m <= p);
            prev = m;
        }
        // Scaling the covariance rescales both masses identically.
        Tensor scaled = scale(a, 17.0);
        CHECK(spectral_split(cov_of(a), 100.0).split ==
              spectral_split(cov_of(scaled), 100.0).split);
    }
}

TEST_CASE("spectral basis reconstruction and projector algebra") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const int p = 2 + rng.uniform_int(63);
        Tensor a = random_psd(p, rng);
        SpectralBasis basis = spectral_split(cov_of(a), 100.0);

        // Reconstruction U diag(values) U^T == C.
        Tensor lam = diag(basis.values);
        Tensor rec = matmul(matmul(basis.vectors, lam), transpose(basis.vectors));
        CHECK(frob_diff(rec, a) <= 1e-8 * std::max(1.0, std::abs(basis.values[0])));

        // Completeness and idempotence of the two projections.
        std::vector<double> g(static_cast<size_t>(p));
        for (auto& v : g) v = rng.normal();
        std::vector<double> r1(static_cast<size_t>(p)), n1(static_cast<size_t>(p));
        basis.project(g.data(), r1.data(), n1.data());
        double comp = 0.0;
        for (int i = 0; i < p; ++i) comp = std::max(comp, std::abs(g[static_cast<size_t>(i)] -
                                                                   r1[static_cast<size_t>(i)] -
                                                                   n1[static_cast<size_t>(i)]));
        CHECK(comp <= 1e-8);
        std::vector<double> r2(static_cast<size_t>(p)), n2(static_cast<size_t>(p));
        basis.project(r1.data(), r2.data(), n2.data());
        double idem = 0.0, cross = 0.0;
        for (int i = 0; i < p; ++i) {
            idem = std::max(idem, std::abs(r2[static_cast<size_t>(i)] - r1[static_cast<size_t>(i)]));
            cross = std::max(cross, std::abs(n2[static_cast<size_t>(i)]));
        }
        CHECK(idem <= 1e-8);
        CHECK(cross <= 1e-8);
    }
}

TEST_CASE("cosine histogram bin edges") {
    CHECK(cosine_histogram_bin(-1.0) == 0);
    CHECK(cosine_histogram_bin(1.0) == kCosineHistogramBins - 1);
    CHECK(cosine_histogram_bin(0.0) == kCosineHistogramBins / 2);
    CHECK(cosine_histogram_bin(-0.9999) == 0);
    CHECK(cosine_histogram_bin(0.9999) == kCosineHistogramBins - 1);
    // Out-of-range values clamp.
    CHECK(cosine_histogram_bin(-1.5) == 0);
    CHECK(cosine_histogram_bin(1.5) == kCosineHistogramBins - 1);
}

TEST_CASE("conflict detection equals a brute-force reference") {
    Rng rng(41);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + rng.uniform_int(8);
        const int k = 2 + rng.uniform_int(3);
        const int p = 2 + rng.uniform_int(7);
        Tensor cov_src = random_psd(p, rng);
        SpectralBasis basis = spectral_split(cov_of(cov_src), 10.0);

        std::vector<Tensor> grads;
        for (int t = 0; t < k; ++t) {
            Tensor g = random_matrix(n, p, rng);
            if (trial % 7 == 0) {
                // Exercise the zero-gradient guard.
                auto d = g.mutable_data();
                for (int j = 0; j < p; ++j) d[static_cast<size_t>(j)] = 0.0;
            }
            grads.push_back(g);
        }

        ConflictStats stats = detect_conflicts(grads, basis);
        REQUIRE(static_cast<int>(stats.pairs.size()) == k * (k - 1) / 2);

        // Independent reference: project through U coordinates directly.
        auto project = [&](const double* g, std::vector<double>& range_out,
                           std::vector<double>& null_out) {
            range_out.assign(static_cast<size_t>(p), 0.0);
            null_out.assign(static_cast<size_t>(p), 0.0);
            for (int e = 0; e < p; ++e) {
                double coord = 0.0;
                for (int x = 0; x < p; ++x) coord += basis.vectors.at({x, e}) * g[x];
                for (int x = 0; x < p; ++x) {
                    const double contrib = coord * basis.vectors.at({x, e});
                    if (e < basis.split) {
                        range_out[static_cast<size_t>(x)] += contrib;
                    } else {
                        null_out[static_cast<size_t>(x)] += contrib;
                    }
                }
            }
        };
        auto norm = [&](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x * x;
            return std::sqrt(s);
        };
        auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
            double s = 0.0;
            for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
            return s;
        };

        size_t pair_idx = 0;
        for (int i = 0; i < k; ++i) {
            for (int j = i + 1; j < k; ++j, ++pair_idx) {
                long range_expected = 0, null_expected = 0;
                for (int t = 0; t < n; ++t) {
                    const double* gi = grads[static_cast<size_t>(i)].data().data() +
                                       static_cast<size_t>(t) * p;
                    const double* gj = grads[static_cast<size_t>(j)].data().data() +
                                       static_cast<size_t>(t) * p;
                    std::vector<double> ri, ni, rj, nj;
                    project(gi, ri, ni);
                    project(gj, rj, nj);
                    if (norm(ri) >= kZeroGradNorm && norm(rj) >= kZeroGradNorm &&
                        dot(ri, rj) <= 0.0) {
                        ++range_expected;
                    }
                    if (norm(ni) >= kZeroGradNorm && norm(nj) >= kZeroGradNorm &&
                        dot(ni, nj) <= 0.0) {
                        ++null_expected;
                    }
                }
                const PairConflicts& pc = stats.pairs[pair_idx];
                CHECK(pc.task_i == i);
                CHECK(pc.task_j == j);
                CHECK(pc.tokens == n);
                CHECK(pc.range_conflicts == range_expected);
                CHECK(pc.null_conflicts == null_expected);
                long hist_total = 0;
                for (long c : pc.cosine_hist) hist_total += c;
                CHECK(hist_total == n);
            }
        }
    }
}

TEST_CASE("conflict statistics merge and aggregate") {
    Rng rng(43);
    Tensor cov_src = random_psd(4, rng);
    SpectralBasis basis = spectral_split(cov_of(cov_src, 2), 10.0);
    std::vector<Tensor> g1 = {random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    std::vector<Tensor> g2 = {random_matrix(3, 4, rng), random_matrix(3, 4, rng)};
    ConflictStats a = detect_conflicts(g1, basis);
    ConflictStats b = detect_conflicts(g2, basis);
    ConflictStats m;
    m.merge(a);
    m.merge(b);
    CHECK(m.layer == 2);
    CHECK(m.total_tokens() == a.total_tokens() + b.total_tokens());
    CHECK(m.total_range() == a.total_range() + b.total_range());
    CHECK(m.total_null() == a.total_null() + b.total_null());

    LayerSeverity sev = aggregate_layer_conflicts(m);
    CHECK(sev.layer == 2);
    CHECK(sev.range_score == doctest::Approx(static_cast<double>(m.total_range()) /
                                             static_cast<double>(m.total_tokens())));
    CHECK(sev.null_score == doctest::Approx(static_cast<double>(m.total_null()) /
                                            static_cast<double>(m.total_tokens())));

    ConflictStats other = detect_conflicts({g1[0], g1[1], random_matrix(3, 4, rng)}, basis);
    CHECK_THROWS_AS(m.merge(other), ContractError);

    CHECK_THROWS_AS(detect_conflicts({g1[0]}, basis), ContractError);
}

}
