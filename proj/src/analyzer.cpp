// SPDX-License-Identifier: Apache-2.0
#include "dtme/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dtme {

// ---- covariance ----

CovarianceAccumulator::CovarianceAccumulator(int layer, int dim) : layer_(layer), dim_(dim) {
    if (dim <= 0) throw ContractError("covariance: dim must be positive");
    sum_.assign(static_cast<size_t>(dim) * dim, 0.0);
}

void CovarianceAccumulator::add_tokens(const Tensor& tokens) {
    if (tokens.ndim() != 2 || tokens.dim(1) != dim_) {
        throw ShapeError("covariance: expected tokens of width " + std::to_string(dim_));
    }
    const int n_tok = tokens.dim(0);
    const auto td = tokens.data();
    // Upper triangle only; the matrix is symmetric by construction.
    for (int k = 0; k < n_tok; ++k) {
        const double* row = td.data() + static_cast<size_t>(k) * dim_;
        for (int i = 0; i < dim_; ++i) {
            const double vi = row[i];
            if (vi == 0.0) continue;
            double* dst = sum_.data() + static_cast<size_t>(i) * dim_;
            for (int j = i; j < dim_; ++j) dst[j] += vi * row[j];
        }
    }
    ++samples_;
}

TokenCovariance CovarianceAccumulator::finalize() const {
    if (samples_ == 0) throw ContractError("covariance: no token batches accumulated");
    std::vector<double> m(sum_.size());
    const double inv = 1.0 / static_cast<double>(samples_);
    for (int i = 0; i < dim_; ++i) {
        for (int j = i; j < dim_; ++j) {
            const double v = sum_[static_cast<size_t>(i) * dim_ + j] * inv;
            m[static_cast<size_t>(i) * dim_ + j] = v;
            m[static_cast<size_t>(j) * dim_ + i] = v;
        }
    }
    TokenCovariance cov;
    cov.layer = layer_;
    cov.dim = dim_;
    cov.matrix = Tensor::from({dim_, dim_}, std::move(m));
    cov.samples = samples_;
    return cov;
}

TokenCovariance uncentered_covariance(int layer, const std::vector<Tensor>& token_batches) {
    if (token_batches.empty()) throw ContractError("covariance: no token batches");
    CovarianceAccumulator acc(layer, token_batches[0].dim(1));
    for (const auto& t : token_batches) acc.add_tokens(t);
    return acc.finalize();
}

// ---- eigendecomposition ----

SymmetricEigen jacobi_eigendecompose(const Tensor& symmetric) {
    if (symmetric.ndim() != 2 || symmetric.dim(0) != symmetric.dim(1)) {
        throw ShapeError("jacobi: matrix must be square");
    }
    const int p = symmetric.dim(0);
    std::vector<double> a(symmetric.data().begin(), symmetric.data().end());
    for (int i = 0; i < p; ++i) {
        for (int j = i + 1; j < p; ++j) {
            const double d = std::fabs(a[static_cast<size_t>(i) * p + j] -
                                       a[static_cast<size_t>(j) * p + i]);
            const double s = std::max({1.0, std::fabs(a[static_cast<size_t>(i) * p + j]),
                                       std::fabs(a[static_cast<size_t>(j) * p + i])});
            if (d > 1e-10 * s) throw NumericError("jacobi: matrix is not symmetric");
        }
    }
    std::vector<double> v(static_cast<size_t>(p) * p, 0.0);
    for (int i = 0; i < p; ++i) v[static_cast<size_t>(i) * p + i] = 1.0;

    auto off_norm = [&]() {
        double s = 0.0;
        for (int i = 0; i < p; ++i)
            for (int j = i + 1; j < p; ++j) {
                const double x = a[static_cast<size_t>(i) * p + j];
                s += 2.0 * x * x;
            }
        return std::sqrt(s);
    };
    double trace = 0.0;
    for (int i = 0; i < p; ++i) trace += std::fabs(a[static_cast<size_t>(i) * p + i]);
    const double stop = 1e-12 * std::max(trace, 1e-300);

    constexpr int kMaxSweeps = 100;
    int sweep = 0;
    while (off_norm() > stop) {
        if (++sweep > kMaxSweeps) throw NumericError("jacobi: failed to converge");
        for (int pq = 0; pq < p; ++pq) {
            for (int q = pq + 1; q < p; ++q) {
                const double apq = a[static_cast<size_t>(pq) * p + q];
                if (apq == 0.0) continue;
                const double app = a[static_cast<size_t>(pq) * p + pq];
                const double aqq = a[static_cast<size_t>(q) * p + q];
                const double theta = (aqq - app) / (2.0 * apq);
                // Smaller-magnitude root keeps rotations <= 45 degrees.
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < p; ++k) {
                    const double akp = a[static_cast<size_t>(k) * p + pq];
                    const double akq = a[static_cast<size_t>(k) * p + q];
                    a[static_cast<size_t>(k) * p + pq] = c * akp - s * akq;
                    a[static_cast<size_t>(k) * p + q] = s * akp + c * akq;
                }
                for (int k = 0; k < p; ++k) {
                    const double apk = a[static_cast<size_t>(pq) * p + k];
                    const double aqk = a[static_cast<size_t>(q) * p + k];
                    a[static_cast<size_t>(pq) * p + k] = c * apk - s * aqk;
                    a[static_cast<size_t>(q) * p + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < p; ++k) {
                    const double vkp = v[static_cast<size_t>(k) * p + pq];
                    const double vkq = v[static_cast<size_t>(k) * p + q];
                    v[static_cast<size_t>(k) * p + pq] = c * vkp - s * vkq;
                    v[static_cast<size_t>(k) * p + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    std::vector<int> idx(static_cast<size_t>(p));
    std::iota(idx.begin(), idx.end(), 0);
    std::vector<double> diag(static_cast<size_t>(p));
    for (int i = 0; i < p; ++i) diag[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * p + i];
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int x, int y) { return diag[static_cast<size_t>(x)] > diag[static_cast<size_t>(y)]; });

    SymmetricEigen out;
    out.values.resize(static_cast<size_t>(p));
    std::vector<double> vec(static_cast<size_t>(p) * p);
    for (int c = 0; c < p; ++c) {
        const int src = idx[static_cast<size_t>(c)];
        out.values[static_cast<size_t>(c)] = diag[static_cast<size_t>(src)];
        for (int rrow = 0; rrow < p; ++rrow) {
            vec[static_cast<size_t>(rrow) * p + c] = v[static_cast<size_t>(rrow) * p + src];
        }
    }
    out.vectors = Tensor::from({p, p}, std::move(vec));
    return out;
}

// ---- spectral split ----

SpectralBasis spectral_split(const TokenCovariance& cov, double r) {
    if (!(r > 0.0) || !std::isfinite(r)) throw ContractError("spectral_split: r must be positive");
    SymmetricEigen eig = jacobi_eigendecompose(cov.matrix);
    const int p = static_cast<int>(eig.values.size());

    for (double& l : eig.values) {
        if (l < -1e-8) throw NumericError("spectral_split: covariance is not PSD");
        if (l < 0.0) l = 0.0;
    }

    double total = 0.0;
    for (double l : eig.values) total += l;
    int m = p;
    double head = 0.0;
    for (int i = 0; i < p; ++i) {
        head += eig.values[static_cast<size_t>(i)];
        const double tail = total - head;
        // Zero tail mass counts as exceeding any ratio.
        if (tail <= 0.0 || head > r * tail) {
            m = i + 1;
            break;
        }
    }

    SpectralBasis basis;
    basis.layer = cov.layer;
    basis.vectors = std::move(eig.vectors);
    basis.values = std::move(eig.values);
    basis.split = m;
    basis.ratio = r;
    return basis;
}

void SpectralBasis::project(const double* g, double* range_out, double* null_out) const {
    const int p = dim();
    const auto vd = vectors.data();
    // coords = U^T g, then range = U_R coords_R, null = U_N coords_N.
    std::vector<double> coords(static_cast<size_t>(p), 0.0);
    for (int c = 0; c < p; ++c) {
        double acc = 0.0;
        for (int rrow = 0; rrow < p; ++rrow) acc += vd[static_cast<size_t>(rrow) * p + c] * g[rrow];
        coords[static_cast<size_t>(c)] = acc;
    }
    for (int rrow = 0; rrow < p; ++rrow) {
        double racc = 0.0, nacc = 0.0;
        const double* vrow = vd.data() + static_cast<size_t>(rrow) * p;
        for (int c = 0; c < split; ++c) racc += vrow[c] * coords[static_cast<size_t>(c)];
        for (int c = split; c < p; ++c) nacc += vrow[c] * coords[static_cast<size_t>(c)];
        range_out[rrow] = racc;
        null_out[rrow] = nacc;
    }
}

ProjectedGradients project_gradients(int task, const Tensor& token_grads,
                                     const SpectralBasis& basis) {
    if (token_grads.ndim() != 2 || token_grads.dim(1) != basis.dim()) {
        throw ShapeError("project_gradients: token width does not match basis dim");
    }
    const int n = token_grads.dim(0);
    const int p = basis.dim();
    std::vector<double> rp(static_cast<size_t>(n) * p), np(static_cast<size_t>(n) * p);
    const auto gd = token_grads.data();
    for (int k = 0; k < n; ++k) {
        basis.project(gd.data() + static_cast<size_t>(k) * p,
                      rp.data() + static_cast<size_t>(k) * p,
                      np.data() + static_cast<size_t>(k) * p);
    }
    ProjectedGradients out;
    out.task = task;
    out.range_part = Tensor::from({n, p}, std::move(rp));
    out.null_part = Tensor::from({n, p}, std::move(np));
    return out;
}

// ---- conflicts ----

int cosine_histogram_bin(double c) {
    c = std::clamp(c, -1.0, 1.0);
    int b = static_cast<int>((c + 1.0) * 0.5 * kCosineHistogramBins);
    return std::min(b, kCosineHistogramBins - 1);
}

namespace {

double dot(const double* a, const double* b, int p) {
    double s = 0.0;
    for (int i = 0; i < p; ++i) s += a[i] * b[i];
    return s;
}

double norm(const double* a, int p) { return std::sqrt(dot(a, a, p)); }

}  // namespace

ConflictStats detect_conflicts(const std::vector<Tensor>& task_grads, const SpectralBasis& basis) {
    const int k_tasks = static_cast<int>(task_grads.size());
    if (k_tasks < 2) throw ContractError("detect_conflicts: need at least two tasks");
    const int p = basis.dim();
    const int n = task_grads[0].dim(0);
    for (const auto& g : task_grads) {
        if (g.ndim() != 2 || g.dim(0) != n || g.dim(1) != p) {
            throw ShapeError("detect_conflicts: gradients must share shape [N,p]");
        }
    }

    std::vector<ProjectedGradients> proj;
    proj.reserve(static_cast<size_t>(k_tasks));
    for (int i = 0; i < k_tasks; ++i) proj.push_back(project_gradients(i, task_grads[i], basis));

    ConflictStats stats;
    stats.layer = basis.layer;
    stats.num_tasks = k_tasks;
    for (int i = 0; i < k_tasks; ++i) {
        for (int j = i + 1; j < k_tasks; ++j) {
            PairConflicts pc;
            pc.task_i = i;
            pc.task_j = j;
            for (int t = 0; t < n; ++t) {
                const size_t off = static_cast<size_t>(t) * p;
                const double* gi = task_grads[static_cast<size_t>(i)].data().data() + off;
                const double* gj = task_grads[static_cast<size_t>(j)].data().data() + off;
                const double ni = norm(gi, p), nj = norm(gj, p);
                double c = 0.0;
                if (ni >= kZeroGradNorm && nj >= kZeroGradNorm) c = dot(gi, gj, p) / (ni * nj);
                ++pc.cosine_hist[static_cast<size_t>(cosine_histogram_bin(c))];

                const double* ri = proj[static_cast<size_t>(i)].range_part.data().data() + off;
                const double* rj = proj[static_cast<size_t>(j)].range_part.data().data() + off;
                if (norm(ri, p) >= kZeroGradNorm && norm(rj, p) >= kZeroGradNorm &&
                    dot(ri, rj, p) <= 0.0) {
                    ++pc.range_conflicts;
                }
                const double* ui = proj[static_cast<size_t>(i)].null_part.data().data() + off;
                const double* uj = proj[static_cast<size_t>(j)].null_part.data().data() + off;
                if (norm(ui, p) >= kZeroGradNorm && norm(uj, p) >= kZeroGradNorm &&
                    dot(ui, uj, p) <= 0.0) {
                    ++pc.null_conflicts;
                }
                ++pc.tokens;
            }
            stats.pairs.push_back(pc);
        }
    }
    return stats;
}

void ConflictStats::merge(const ConflictStats& other) {
    if (pairs.empty()) {
        *this = other;
        return;
    }
    if (other.layer != layer || other.num_tasks != num_tasks ||
        other.pairs.size() != pairs.size()) {
        throw ContractError("ConflictStats::merge: incompatible statistics");
    }
    for (size_t i = 0; i < pairs.size(); ++i) {
        pairs[i].range_conflicts += other.pairs[i].range_conflicts;
        pairs[i].null_conflicts += other.pairs[i].null_conflicts;
        pairs[i].tokens += other.pairs[i].tokens;
        for (int b = 0; b < kCosineHistogramBins; ++b)
            pairs[i].cosine_hist[static_cast<size_t>(b)] +=
                other.pairs[i].cosine_hist[static_cast<size_t>(b)];
    }
}

long ConflictStats::total_tokens() const {
    long t = 0;
    for (const auto& pr : pairs) t += pr.tokens;
    return t;
}

long ConflictStats::total_range() const {
    long t = 0;
    for (const auto& pr : pairs) t += pr.range_conflicts;
    return t;
}

long ConflictStats::total_null() const {
    long t = 0;
    for (const auto& pr : pairs) t += pr.null_conflicts;
    return t;
}

LayerSeverity aggregate_layer_conflicts(const ConflictStats& stats) {
    LayerSeverity sev;
    sev.layer = stats.layer;
    const long tok = stats.total_tokens();
    if (tok > 0) {
        sev.range_score = static_cast<double>(stats.total_range()) / static_cast<double>(tok);
        sev.null_score = static_cast<double>(stats.total_null()) / static_cast<double>(tok);
    }
    return sev;
}

}  // namespace dtme
