// SPDX-License-Identifier: Apache-2.0
#include "dtme/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>

#include "dtme/common.hpp"

namespace dtme {

// ---- optimizer ----

void Optimizer::register_params(const std::vector<TransformerModel::NamedParam>& params) {
    for (const auto& p : params) {
        bool known = false;
        for (const auto& s : states_) {
            if (s.name == p.name) {
                known = true;
                break;
            }
        }
        if (known) continue;
        State st;
        st.name = p.name;
        st.param = p.value;
        st.m.assign(static_cast<size_t>(p.value.numel()), 0.0);
        st.v.assign(static_cast<size_t>(p.value.numel()), 0.0);
        states_.push_back(std::move(st));
    }
}

double Optimizer::lr_at(int step, int total_steps) const {
    if (cfg_.poly_power == 0.0) return cfg_.lr;
    const double frac = total_steps > 0 ? static_cast<double>(step) / total_steps : 0.0;
    return cfg_.lr * std::pow(1.0 - frac, cfg_.poly_power);
}

void Optimizer::step(int step_index, int total_steps) {
    const double lr = lr_at(step_index, total_steps);
    for (auto& s : states_) {
        if (!s.param.grad_ready()) continue;
        auto data = s.param.mutable_data();
        const auto grad = s.param.grad();
        if (cfg_.kind == OptimConfig::Kind::Sgd) {
            for (size_t i = 0; i < data.size(); ++i) {
                const double g = grad[i] + cfg_.weight_decay * data[i];
                data[i] -= lr * g;
            }
        } else {
            // Per-parameter step counts would diverge after extension
            // installs; a shared step counter keeps bias correction uniform.
            const long t = steps_taken_ + 1;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
            for (size_t i = 0; i < data.size(); ++i) {
                const double g = grad[i] + cfg_.weight_decay * data[i];
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mh = s.m[i] / bc1;
                const double vh = s.v[i] / bc2;
                data[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }
    ++steps_taken_;
}

// ---- config ----

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "joint") return TrainMode::Joint;
    if (s == "st") return TrainMode::SingleTask;
    if (s == "dtme") return TrainMode::Dtme;
    if (s == "pcgrad") return TrainMode::PcGrad;
    throw ContractError("unknown mode '" + s + "' (expected joint|st|dtme|pcgrad)");
}

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::Joint: return "joint";
        case TrainMode::SingleTask: return "st";
        case TrainMode::Dtme: return "dtme";
        case TrainMode::PcGrad: return "pcgrad";
    }
    return "joint";
}

void TrainConfig::validate(int num_tasks) const {
    if (steps <= 0) throw ContractError("train config: steps must be positive");
    if (batch <= 0) throw ContractError("train config: batch must be positive");
    if (!(eval_fraction >= 0.0 && eval_fraction < 1.0)) {
        throw ContractError("train config: eval fraction must lie in [0,1)");
    }
    if (mode == TrainMode::SingleTask && (single_task < 0 || single_task >= num_tasks)) {
        throw ContractError("train config: single-task index out of range");
    }
    if (!task_weights.empty() && static_cast<int>(task_weights.size()) != num_tasks) {
        throw ContractError("train config: task weight count mismatch");
    }
    if (!(r > 0.0)) throw ContractError("train config: r must be positive");
    if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("train config: beta must lie in (0,1]");
    if (tokens_per_task <= 0) throw ContractError("train config: tokens per task must be positive");
    if (!(timing >= 0.0 && timing < 1.0)) {
        throw ContractError("train config: timing must lie in [0,1)");
    }
    if (modulator_kind != "affine") {
        throw ContractError("train config: modulator kind '" + modulator_kind +
                            "' is not implemented (only 'affine')");
    }
    if (mode != TrainMode::SingleTask && num_tasks < 1) {
        throw ContractError("train config: dataset has no tasks");
    }
}

// ---- conflict measurement ----

namespace {

// Streams feeding each task's path at a layer: the single shared stream
// before any branch, one stream per task after it.
const Tensor& stream_for_task(const std::vector<Tensor>& streams, int task) {
    if (streams.size() == 1) return streams[0];
    return streams[static_cast<size_t>(task)];
}

std::vector<Tensor> per_task_losses(const TransformerModel& model, const Dataset& data,
                                    const std::vector<int>& batch, const ForwardOptions& opts,
                                    std::vector<LayerActivations>* acts_out) {
    const int k = data.spec.num_tasks();
    std::vector<Tensor> sums(static_cast<size_t>(k));
    for (int idx : batch) {
        ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)], opts);
        for (int i = 0; i < k; ++i) {
            Tensor l = task_loss(data.spec.tasks[static_cast<size_t>(i)],
                                 res.task_outputs[static_cast<size_t>(i)], data, i, idx);
            sums[static_cast<size_t>(i)] =
                sums[static_cast<size_t>(i)].defined() ? add(sums[static_cast<size_t>(i)], l) : l;
        }
        if (acts_out) acts_out->push_back(std::move(res.activations));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& s : sums) s = scale(s, inv);
    return sums;
}

Tensor grad_as_tensor(const Tensor& t) {
    return Tensor::from(t.shape(), std::vector<double>(t.grad().begin(), t.grad().end()));
}

}  // namespace

ConflictMeasurement measure_conflicts(const TransformerModel& model, const Dataset& data,
                                      const std::vector<int>& samples, double r) {
    if (samples.empty()) throw ContractError("measure_conflicts: no samples");
    const int depth = model.config().depth;
    const int p = model.config().hidden;
    const int k = data.spec.num_tasks();
    if (k < 2) throw ContractError("measure_conflicts: need at least two tasks");

    // Pass A: token covariance per layer.
    std::vector<CovarianceAccumulator> accs;
    accs.reserve(static_cast<size_t>(depth));
    for (int d = 0; d < depth; ++d) accs.emplace_back(d + 1, p);
    {
        ForwardOptions opts;
        opts.capture_activations = true;
        for (int idx : samples) {
            ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)], opts);
            for (int d = 0; d < depth; ++d) {
                for (const auto& s : res.activations.streams[static_cast<size_t>(d)]) {
                    accs[static_cast<size_t>(d)].add_tokens(s);
                }
            }
        }
    }
    ConflictMeasurement out;
    for (int d = 0; d < depth; ++d) {
        out.bases.push_back(spectral_split(accs[static_cast<size_t>(d)].finalize(), r));
    }

    // Pass B: per-task token gradients per sample, counted against the bases.
    out.stats.resize(static_cast<size_t>(depth));
    ForwardOptions opts;
    opts.capture_activations = true;
    opts.retain_token_grads = true;
    for (int idx : samples) {
        ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)], opts);
        std::vector<Tensor> losses(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            losses[static_cast<size_t>(i)] =
                task_loss(data.spec.tasks[static_cast<size_t>(i)],
                          res.task_outputs[static_cast<size_t>(i)], data, i, idx);
        }
        // task -> layer -> gradient batch
        std::vector<std::vector<Tensor>> grads(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            for (auto& layer_streams : res.activations.streams) {
                for (auto& s : layer_streams) s.zero_grad();
            }
            backward(losses[static_cast<size_t>(i)]);
            for (int d = 0; d < depth; ++d) {
                const Tensor& s = stream_for_task(res.activations.streams[static_cast<size_t>(d)], i);
                grads[static_cast<size_t>(i)].push_back(grad_as_tensor(s));
            }
        }
        for (int d = 0; d < depth; ++d) {
            std::vector<Tensor> layer_grads;
            layer_grads.reserve(static_cast<size_t>(k));
            for (int i = 0; i < k; ++i) layer_grads.push_back(grads[static_cast<size_t>(i)][static_cast<size_t>(d)]);
            out.stats[static_cast<size_t>(d)].merge(
                detect_conflicts(layer_grads, out.bases[static_cast<size_t>(d)]));
        }
    }
    for (const auto& st : out.stats) out.severities.push_back(aggregate_layer_conflicts(st));
    return out;
}

ConflictSnapshot monitor_conflicts(const TransformerModel& model, const Dataset& data,
                                   const std::vector<int>& samples,
                                   const std::vector<SpectralBasis>& bases, int step) {
    const int depth = model.config().depth;
    const int k = data.spec.num_tasks();
    if (k < 2) throw ContractError("monitor_conflicts: need at least two tasks");
    if (static_cast<int>(bases.size()) != depth) {
        throw ContractError("monitor_conflicts: basis cache size mismatch");
    }

    ConflictSnapshot snap;
    snap.step = step;

    // Parameter-space pass: one graph over the monitor batch, one backward
    // per task, shared parameters flattened into a single vector each.
    std::vector<Tensor> losses = per_task_losses(model, data, samples, {}, nullptr);

    std::vector<std::vector<double>> flat(static_cast<size_t>(k));
    std::vector<ConflictStats> stats(static_cast<size_t>(depth));
    const auto& params = model.parameters();
    // Mutation is limited to gradient buffers; zero them around each task.
    auto& mut = const_cast<TransformerModel&>(model);
    for (int i = 0; i < k; ++i) {
        mut.zero_all_grads();
        backward(losses[static_cast<size_t>(i)]);
        for (const auto& prm : params) {
            if (!model.is_shared_parameter(prm.name)) continue;
            if (prm.value.grad_ready()) {
                flat[static_cast<size_t>(i)].insert(flat[static_cast<size_t>(i)].end(),
                                                    prm.value.grad().begin(), prm.value.grad().end());
            } else {
                flat[static_cast<size_t>(i)].insert(flat[static_cast<size_t>(i)].end(),
                                                    static_cast<size_t>(prm.value.numel()), 0.0);
            }
        }
    }

    // Parameter-space histogram over task pairs.
    for (int i = 0; i < k; ++i) {
        for (int j = i + 1; j < k; ++j) {
            const auto& gi = flat[static_cast<size_t>(i)];
            const auto& gj = flat[static_cast<size_t>(j)];
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (size_t x = 0; x < gi.size(); ++x) {
                dot += gi[x] * gj[x];
                ni += gi[x] * gi[x];
                nj += gj[x] * gj[x];
            }
            double c = 0.0;
            if (std::sqrt(ni) >= kZeroGradNorm && std::sqrt(nj) >= kZeroGradNorm) {
                c = dot / (std::sqrt(ni) * std::sqrt(nj));
            }
            ++snap.param_cos_hist[static_cast<size_t>(cosine_histogram_bin(c))];
        }
    }

    // Token-space pass: per sample, gather all task gradients on the layer
    // streams and count conflicts against the cached bases.
    ForwardOptions opts;
    opts.capture_activations = true;
    opts.retain_token_grads = true;
    for (int idx : samples) {
        ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)], opts);
        std::vector<std::vector<Tensor>> grads(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            Tensor l = task_loss(data.spec.tasks[static_cast<size_t>(i)],
                                 res.task_outputs[static_cast<size_t>(i)], data, i, idx);
            for (auto& layer_streams : res.activations.streams) {
                for (auto& s : layer_streams) s.zero_grad();
            }
            backward(l);
            for (int d = 0; d < depth; ++d) {
                const Tensor& s = stream_for_task(res.activations.streams[static_cast<size_t>(d)], i);
                grads[static_cast<size_t>(i)].push_back(grad_as_tensor(s));
            }
        }
        for (int d = 0; d < depth; ++d) {
            std::vector<Tensor> layer_grads;
            for (int i = 0; i < k; ++i) layer_grads.push_back(grads[static_cast<size_t>(i)][static_cast<size_t>(d)]);
            stats[static_cast<size_t>(d)].merge(detect_conflicts(layer_grads, bases[static_cast<size_t>(d)]));
        }
    }

    for (int d = 0; d < depth; ++d) {
        snap.layers.push_back(aggregate_layer_conflicts(stats[static_cast<size_t>(d)]));
        snap.range_total += stats[static_cast<size_t>(d)].total_range();
        snap.null_total += stats[static_cast<size_t>(d)].total_null();
        snap.tokens_total += stats[static_cast<size_t>(d)].total_tokens();
    }
    mut.zero_all_grads();
    return snap;
}

double conflict_reduction_percent(const std::vector<ConflictSnapshot>& snaps, bool range_space) {
    if (snaps.size() < 2) return 0.0;
    const ConflictSnapshot& a = snaps.front();
    const ConflictSnapshot& b = snaps.back();
    if (a.tokens_total == 0 || b.tokens_total == 0) return 0.0;
    const double fa = static_cast<double>(range_space ? a.range_total : a.null_total) /
                      static_cast<double>(a.tokens_total);
    const double fb = static_cast<double>(range_space ? b.range_total : b.null_total) /
                      static_cast<double>(b.tokens_total);
    if (fa == 0.0) return 0.0;
    return 100.0 * (fa - fb) / fa;
}

// ---- gradient surgery ----

std::vector<double> pcgrad_combine(const std::vector<std::vector<double>>& grads,
                                   const std::vector<std::vector<int>>& orders) {
    const size_t k = grads.size();
    if (k == 0) throw ContractError("pcgrad: no gradients");
    const size_t n = grads[0].size();
    for (const auto& g : grads) {
        if (g.size() != n) throw ContractError("pcgrad: gradient length mismatch");
    }
    if (orders.size() != k) throw ContractError("pcgrad: order list size mismatch");

    std::vector<double> norms_sq(k, 0.0);
    for (size_t j = 0; j < k; ++j) {
        for (double v : grads[j]) norms_sq[j] += v * v;
    }
    std::vector<double> out(n, 0.0);
    std::vector<double> gi(n);
    for (size_t i = 0; i < k; ++i) {
        gi = grads[i];
        for (int j : orders[i]) {
            if (j < 0 || static_cast<size_t>(j) >= k || static_cast<size_t>(j) == i) {
                throw ContractError("pcgrad: bad order entry");
            }
            if (norms_sq[static_cast<size_t>(j)] < kZeroGradNorm * kZeroGradNorm) continue;
            double dot = 0.0;
            for (size_t x = 0; x < n; ++x) dot += gi[x] * grads[static_cast<size_t>(j)][x];
            if (dot < 0.0) {
                const double coef = dot / norms_sq[static_cast<size_t>(j)];
                for (size_t x = 0; x < n; ++x) gi[x] -= coef * grads[static_cast<size_t>(j)][x];
            }
        }
        for (size_t x = 0; x < n; ++x) out[x] += gi[x];
    }
    return out;
}

std::vector<double> pcgrad_step(const std::vector<std::vector<double>>& grads, Rng& rng) {
    const int k = static_cast<int>(grads.size());
    std::vector<std::vector<int>> orders(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            if (j != i) orders[static_cast<size_t>(i)].push_back(j);
        }
        rng.shuffle(orders[static_cast<size_t>(i)]);
    }
    return pcgrad_combine(grads, orders);
}

// ---- training ----

namespace {

class BatchSampler {
public:
    BatchSampler(std::vector<int> indices, int batch, Rng rng)
        : order_(std::move(indices)), batch_(batch), rng_(std::move(rng)) {
        if (order_.empty()) throw ContractError("training split is empty");
        rng_.shuffle(order_);
    }

    std::vector<int> next() {
        std::vector<int> out;
        out.reserve(static_cast<size_t>(batch_));
        for (int i = 0; i < batch_; ++i) {
            if (pos_ == order_.size()) {
                rng_.shuffle(order_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<int> order_;
    int batch_;
    Rng rng_;
    size_t pos_ = 0;
};

std::vector<double> effective_weights(const TrainConfig& cfg, int k) {
    if (!cfg.task_weights.empty()) return cfg.task_weights;
    return std::vector<double>(static_cast<size_t>(k), 1.0);
}

bool is_monitor_step(const TrainConfig& cfg, int step) {
    if (step == 0 || step == cfg.steps - 1) return true;
    return cfg.monitor_every > 0 && step % cfg.monitor_every == 0;
}

}  // namespace

RunRecord train_run(TransformerModel& model, const Dataset& data, const TrainConfig& cfg) {
    const int k = data.spec.num_tasks();
    cfg.validate(k);
    const auto t_start = std::chrono::steady_clock::now();

    RunRecord rec;
    rec.mode = cfg.mode;
    rec.seed = cfg.seed;
    rec.params_before = model.parameter_count();

    const std::vector<int> train_idx = data.train_indices(cfg.eval_fraction);
    const std::vector<int> eval_idx = data.eval_indices(cfg.eval_fraction);
    BatchSampler sampler(train_idx, cfg.batch, make_stream(cfg.seed, Stream::DataOrder));
    Optimizer optim(cfg.optim);
    optim.register_params(model.parameters());

    std::vector<double> weights = effective_weights(cfg, k);
    const bool can_monitor = k >= 2 && cfg.mode != TrainMode::SingleTask;
    std::vector<int> monitor_idx;
    if (can_monitor) {
        const int m = std::min<int>(cfg.monitor_samples, static_cast<int>(train_idx.size()));
        monitor_idx.assign(train_idx.begin(), train_idx.begin() + m);
    }
    std::vector<SpectralBasis> monitor_bases;

    const int expansion_step =
        cfg.mode == TrainMode::Dtme
            ? static_cast<int>(std::llround(cfg.timing * static_cast<double>(cfg.steps)))
            : -1;

    Rng pc_rng = make_stream(cfg.seed, Stream::Plan);

    for (int step = 0; step < cfg.steps; ++step) {
        if (step == expansion_step && cfg.mode == TrainMode::Dtme) {
            std::vector<int> conflict_idx = train_idx;
            if (cfg.conflict_samples > 0 &&
                cfg.conflict_samples < static_cast<int>(conflict_idx.size())) {
                conflict_idx.resize(static_cast<size_t>(cfg.conflict_samples));
            }
            ConflictMeasurement meas = measure_conflicts(model, data, conflict_idx, cfg.r);
            ExpansionPlan plan = build_plan(meas.severities, cfg.beta, cfg.tokens_per_task,
                                            cfg.strategy, cfg.seed, step, cfg.actions);
            apply_plan(model, plan);
            optim.register_params(model.parameters());
            model.zero_all_grads();
            rec.plan = std::move(plan);
        }

        if (can_monitor && is_monitor_step(cfg, step)) {
            if (monitor_bases.empty()) {
                ConflictMeasurement meas = measure_conflicts(model, data, monitor_idx, cfg.r);
                monitor_bases = std::move(meas.bases);
            }
            rec.snapshots.push_back(
                monitor_conflicts(model, data, monitor_idx, monitor_bases, step));
        }

        const std::vector<int> batch = sampler.next();
        StepLoss sl;
        sl.step = step;
        sl.lr = optim.lr_at(step, cfg.steps);
        sl.per_task.assign(static_cast<size_t>(k), std::numeric_limits<double>::quiet_NaN());

        model.zero_all_grads();
        if (cfg.mode == TrainMode::SingleTask) {
            Tensor loss;
            for (int idx : batch) {
                ForwardResult res = model.forward_all_tasks(data.inputs[static_cast<size_t>(idx)]);
                Tensor l = task_loss(data.spec.tasks[static_cast<size_t>(cfg.single_task)],
                                     res.task_outputs[static_cast<size_t>(cfg.single_task)], data,
                                     cfg.single_task, idx);
                loss = loss.defined() ? add(loss, l) : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
            sl.total = loss.value();
            sl.per_task[static_cast<size_t>(cfg.single_task)] = sl.total;
            backward(loss);
        } else if (cfg.mode == TrainMode::PcGrad) {
            std::vector<Tensor> losses = per_task_losses(model, data, batch, {}, nullptr);
            // Per-task gradients over everything; surgery applies to the
            // shared parameters, task parameters keep their own gradients.
            const auto& params = model.parameters();
            std::vector<std::vector<double>> shared(static_cast<size_t>(k));
            std::vector<std::vector<double>> own(static_cast<size_t>(params.size()));
            double total = 0.0;
            for (int i = 0; i < k; ++i) {
                model.zero_all_grads();
                Tensor weighted = scale(losses[static_cast<size_t>(i)], weights[static_cast<size_t>(i)]);
                backward(weighted);
                sl.per_task[static_cast<size_t>(i)] = losses[static_cast<size_t>(i)].value();
                total += weighted.value();
                for (size_t pi = 0; pi < params.size(); ++pi) {
                    const auto& prm = params[pi];
                    if (model.is_shared_parameter(prm.name)) {
                        if (prm.value.grad_ready()) {
                            shared[static_cast<size_t>(i)].insert(shared[static_cast<size_t>(i)].end(),
                                                                  prm.value.grad().begin(),
                                                                  prm.value.grad().end());
                        } else {
                            shared[static_cast<size_t>(i)].insert(shared[static_cast<size_t>(i)].end(),
                                                                  static_cast<size_t>(prm.value.numel()),
                                                                  0.0);
                        }
                    } else if (prm.value.grad_ready()) {
                        if (own[pi].empty()) own[pi].assign(static_cast<size_t>(prm.value.numel()), 0.0);
                        for (int x = 0; x < prm.value.numel(); ++x) {
                            own[pi][static_cast<size_t>(x)] += prm.value.grad()[static_cast<size_t>(x)];
                        }
                    }
                }
            }
            sl.total = total;
            std::vector<double> combined = pcgrad_step(shared, pc_rng);
            model.zero_all_grads();
            size_t cursor = 0;
            for (size_t pi = 0; pi < params.size(); ++pi) {
                const auto& prm = params[pi];
                if (model.is_shared_parameter(prm.name)) {
                    auto& impl = *prm.value.impl();
                    impl.grad.assign(combined.begin() + static_cast<long>(cursor),
                                     combined.begin() + static_cast<long>(cursor) + prm.value.numel());
                    cursor += static_cast<size_t>(prm.value.numel());
                } else if (!own[pi].empty()) {
                    prm.value.impl()->grad = own[pi];
                }
            }
        } else {
            std::vector<Tensor> losses = per_task_losses(model, data, batch, {}, nullptr);
            MultitaskLoss ml = multitask_loss(losses, weights);
            sl.total = ml.total.value();
            for (int i = 0; i < k; ++i) {
                sl.per_task[static_cast<size_t>(i)] = losses[static_cast<size_t>(i)].value();
            }
            backward(ml.total);
        }

        if (!std::isfinite(sl.total)) throw NumericError("training loss diverged");
        optim.step(step, cfg.steps);
        rec.losses.push_back(std::move(sl));
    }

    rec.params_after = model.parameter_count();
    rec.overhead_percent = param_overhead(static_cast<double>(rec.params_before),
                                          static_cast<double>(rec.params_after));
    rec.metrics = evaluate_model(model, data, eval_idx);
    if (cfg.mode == TrainMode::SingleTask) {
        MetricTable only;
        only.rows.push_back(rec.metrics.rows[static_cast<size_t>(cfg.single_task)]);
        rec.metrics = std::move(only);
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return rec;
}

uint64_t parameter_hash(const TransformerModel& model) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : model.parameters()) {
        for (double v : p.value.data()) {
            unsigned char bytes[sizeof(double)];
            std::memcpy(bytes, &v, sizeof(double));
            for (unsigned char b : bytes) {
                h ^= b;
                h *= 0x100000001b3ull;
            }
        }
    }
    return h;
}

}  // namespace dtme
