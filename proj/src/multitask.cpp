// SPDX-License-Identifier: Apache-2.0
#include "dtme/multitask.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "dtme/analyzer.hpp"
#include "dtme/common.hpp"
#include "dtme/rng.hpp"

namespace dtme {

void SyntheticSpec::validate() const {
    if (samples <= 0) throw ContractError("dataset spec: samples must be positive");
    if (grid_rows <= 0 || grid_cols <= 0) throw ContractError("dataset spec: bad grid");
    if (channels <= 0) throw ContractError("dataset spec: channels must be positive");
    if (latent_dim <= 1) throw ContractError("dataset spec: latent dim must exceed 1");
    if (!(kappa >= 0.0 && kappa <= 1.0)) {
        throw ContractError("dataset spec: kappa must lie in [0,1]");
    }
    if (noise < 0.0) throw ContractError("dataset spec: noise must be non-negative");
    if (tasks.empty()) throw ContractError("dataset spec: at least one task required");
    for (const auto& t : tasks) {
        if (t.dim <= 1 && t.kind == HeadSpec::Kind::ClassLogits) {
            throw ContractError("dataset spec: classification needs >= 2 classes");
        }
        if (t.dim <= 0) throw ContractError("dataset spec: task dim must be positive");
    }
}

uint64_t SyntheticSpec::content_hash() const {
    std::ostringstream os;
    os << "v1|seed=" << seed << "|n=" << samples << "|grid=" << grid_rows << "x" << grid_cols
       << "|c=" << channels << "|q=" << latent_dim << "|kappa=" << kappa << "|noise=" << noise;
    for (const auto& t : tasks) {
        os << "|task=" << (t.kind == HeadSpec::Kind::ClassLogits ? "class" : "reg") << ":" << t.dim;
    }
    return fnv1a64(os.str());
}

std::vector<int> Dataset::train_indices(double eval_fraction) const {
    const int n_eval = static_cast<int>(std::floor(size() * eval_fraction));
    std::vector<int> idx;
    for (int i = 0; i < size() - n_eval; ++i) idx.push_back(i);
    return idx;
}

std::vector<int> Dataset::eval_indices(double eval_fraction) const {
    const int n_eval = static_cast<int>(std::floor(size() * eval_fraction));
    std::vector<int> idx;
    for (int i = size() - n_eval; i < size(); ++i) idx.push_back(i);
    return idx;
}

namespace {

// Deterministic random rotation: eigenvectors of a random symmetric matrix.
std::vector<double> random_rotation(int q, Rng& rng) {
    std::vector<double> sym(static_cast<size_t>(q) * q);
    for (int i = 0; i < q; ++i) {
        for (int j = i; j < q; ++j) {
            const double v = rng.normal();
            sym[static_cast<size_t>(i) * q + j] = v;
            sym[static_cast<size_t>(j) * q + i] = v;
        }
    }
    SymmetricEigen eig = jacobi_eigendecompose(Tensor::from({q, q}, std::move(sym)));
    return std::vector<double>(eig.vectors.data().begin(), eig.vectors.data().end());
}

void matvec(const std::vector<double>& m, int rows, int cols, const std::vector<double>& x,
            std::vector<double>& out) {
    out.assign(static_cast<size_t>(rows), 0.0);
    for (int i = 0; i < rows; ++i) {
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) acc += m[static_cast<size_t>(i) * cols + j] * x[static_cast<size_t>(j)];
        out[static_cast<size_t>(i)] = acc;
    }
}

}  // namespace

std::vector<HeadSpec> head_specs_for(const SyntheticSpec& spec) {
    std::vector<HeadSpec> out;
    for (const auto& t : spec.tasks) out.push_back({t.kind, t.dim});
    return out;
}

Dataset generate_dataset(const SyntheticSpec& spec) {
    spec.validate();
    const int q = spec.latent_dim;
    const int n_tok = spec.tokens();
    const int c = spec.channels;
    const int k = spec.num_tasks();

    Rng rng = make_stream(spec.seed, Stream::DataGen);

    // Fixed structure first (task operators, readouts, token mixing), then
    // per-sample draws; the order pins determinism.
    std::vector<std::vector<double>> rotations;  // per task, q x q; task 0 unused
    for (int i = 0; i < k; ++i) {
        if (i == 0) {
            rotations.emplace_back();
        } else {
            rotations.push_back(random_rotation(q, rng));
        }
    }

    // Tasks sharing (kind, dim) share a readout so kappa = 0 with identical
    // specs yields identical targets.
    std::map<std::pair<int, int>, std::vector<double>> readouts;
    for (const auto& t : spec.tasks) {
        const std::pair<int, int> key{t.kind == HeadSpec::Kind::ClassLogits ? 0 : 1, t.dim};
        if (readouts.count(key)) continue;
        std::vector<double> a(static_cast<size_t>(t.dim) * q);
        for (double& v : a) v = rng.normal() / std::sqrt(static_cast<double>(q));
        readouts[key] = std::move(a);
    }

    std::vector<double> mixing(static_cast<size_t>(n_tok) * c * q);
    for (double& v : mixing) v = rng.normal() / std::sqrt(static_cast<double>(q));

    Dataset data;
    data.spec = spec;
    data.labels.resize(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        if (spec.tasks[static_cast<size_t>(i)].kind == HeadSpec::Kind::ClassLogits) {
            data.labels[static_cast<size_t>(i)].class_labels.reserve(static_cast<size_t>(spec.samples));
        } else {
            data.labels[static_cast<size_t>(i)].targets.reserve(static_cast<size_t>(spec.samples));
        }
    }

    std::vector<double> z(static_cast<size_t>(q));
    std::vector<double> fz(static_cast<size_t>(q));
    std::vector<double> feat(static_cast<size_t>(q));
    std::vector<double> read;
    for (int l = 0; l < spec.samples; ++l) {
        for (double& v : z) v = rng.normal();

        std::vector<double> x(static_cast<size_t>(n_tok) * c);
        matvec(mixing, n_tok * c, q, z, x);
        for (double& v : x) v += spec.noise * rng.normal();
        data.inputs.push_back(Tensor::from({n_tok, c}, std::move(x)));

        for (int i = 0; i < k; ++i) {
            const TaskSpec& t = spec.tasks[static_cast<size_t>(i)];
            if (i == 0) {
                feat = z;
            } else {
                matvec(rotations[static_cast<size_t>(i)], q, q, z, fz);
                for (int j = 0; j < q; ++j) {
                    feat[static_cast<size_t>(j)] =
                        (1.0 - spec.kappa) * z[static_cast<size_t>(j)] - spec.kappa * fz[static_cast<size_t>(j)];
                }
            }
            for (double& v : feat) v = std::tanh(v);
            const std::pair<int, int> key{t.kind == HeadSpec::Kind::ClassLogits ? 0 : 1, t.dim};
            matvec(readouts.at(key), t.dim, q, feat, read);
            if (t.kind == HeadSpec::Kind::ClassLogits) {
                int best = 0;
                for (int cidx = 1; cidx < t.dim; ++cidx) {
                    if (read[static_cast<size_t>(cidx)] > read[static_cast<size_t>(best)]) best = cidx;
                }
                data.labels[static_cast<size_t>(i)].class_labels.push_back(best);
            } else {
                data.labels[static_cast<size_t>(i)].targets.push_back(
                    Tensor::from({1, t.dim}, read));
            }
        }
    }
    return data;
}

Tensor task_loss(const TaskSpec& spec, const Tensor& output, const Dataset& data, int task,
                 int sample) {
    if (spec.kind == HeadSpec::Kind::ClassLogits) {
        return cross_entropy(output, {data.labels[static_cast<size_t>(task)].class_labels[static_cast<size_t>(sample)]});
    }
    return mse_loss(output, data.labels[static_cast<size_t>(task)].targets[static_cast<size_t>(sample)]);
}

MultitaskLoss multitask_loss(const std::vector<Tensor>& per_task,
                             const std::vector<double>& weights) {
    if (per_task.empty()) throw ContractError("multitask_loss: no task losses");
    if (weights.size() != per_task.size()) {
        throw ContractError("multitask_loss: weight count mismatch");
    }
    MultitaskLoss out;
    out.per_task = per_task;
    Tensor total = scale(per_task[0], weights[0]);
    for (size_t i = 1; i < per_task.size(); ++i) {
        total = add(total, scale(per_task[i], weights[i]));
    }
    out.total = total;
    return out;
}

double delta_m(const std::vector<double>& model_vals, const std::vector<double>& baseline_vals,
               const std::vector<bool>& lower_is_better) {
    const size_t k = model_vals.size();
    if (k == 0 || baseline_vals.size() != k || lower_is_better.size() != k) {
        throw ContractError("delta_m: input lengths must match and be non-empty");
    }
    double acc = 0.0;
    for (size_t i = 0; i < k; ++i) {
        if (baseline_vals[i] == 0.0) throw NumericError("delta_m: zero baseline value");
        const double rel = (model_vals[i] - baseline_vals[i]) / baseline_vals[i];
        acc += lower_is_better[i] ? -rel : rel;
    }
    return 100.0 * acc / static_cast<double>(k);
}

double delta_m_from_table(const MetricTable& table) {
    std::vector<double> m, b;
    std::vector<bool> low;
    for (const auto& r : table.rows) {
        if (!r.has_baseline) throw ContractError("delta_m: metric row lacks a baseline");
        m.push_back(r.model);
        b.push_back(r.baseline);
        low.push_back(r.lower_is_better);
    }
    return delta_m(m, b, low);
}

MetricTable evaluate_model(const TransformerModel& model, const Dataset& data,
                           const std::vector<int>& indices) {
    if (indices.empty()) throw ContractError("evaluate_model: no samples");
    const int k = data.spec.num_tasks();
    std::vector<double> acc(static_cast<size_t>(k), 0.0);
    for (int idx : indices) {
        ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)]);
        for (int i = 0; i < k; ++i) {
            const TaskSpec& t = data.spec.tasks[static_cast<size_t>(i)];
            const Tensor& out = res.task_outputs[static_cast<size_t>(i)];
            if (t.kind == HeadSpec::Kind::ClassLogits) {
                int best = 0;
                for (int cdx = 1; cdx < t.dim; ++cdx) {
                    if (out.at({0, cdx}) > out.at({0, best})) best = cdx;
                }
                if (best == data.labels[static_cast<size_t>(i)].class_labels[static_cast<size_t>(idx)]) {
                    acc[static_cast<size_t>(i)] += 1.0;
                }
            } else {
                const Tensor& tgt = data.labels[static_cast<size_t>(i)].targets[static_cast<size_t>(idx)];
                double l1 = 0.0;
                for (int j = 0; j < t.dim; ++j) {
                    l1 += std::fabs(out.at({0, j}) - tgt.at({0, j}));
                }
                acc[static_cast<size_t>(i)] += l1 / t.dim;
            }
        }
    }
    MetricTable table;
    for (int i = 0; i < k; ++i) {
        const TaskSpec& t = data.spec.tasks[static_cast<size_t>(i)];
        MetricRow row;
        row.task = "task" + std::to_string(i);
        row.metric = t.kind == HeadSpec::Kind::ClassLogits ? "acc" : "l1";
        row.model = acc[static_cast<size_t>(i)] / static_cast<double>(indices.size());
        row.lower_is_better = t.kind != HeadSpec::Kind::ClassLogits;
        table.rows.push_back(row);
    }
    return table;
}

}  // namespace dtme
