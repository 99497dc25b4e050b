// SPDX-License-Identifier: Apache-2.0
//
// Deterministic training loops for the experiment matrix: joint training,
// single-task references, conflict-driven expansion mid-run, and projecting
// gradient surgery as an external mitigation baseline. All randomness flows
// through named substreams of the run seed.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtme/analyzer.hpp"
#include "dtme/expansion.hpp"
#include "dtme/model.hpp"
#include "dtme/multitask.hpp"
#include "dtme/rng.hpp"

namespace dtme {

struct OptimConfig {
    enum class Kind { Sgd, Adam };
    Kind kind = Kind::Adam;
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    // Polynomial decay lr * (1 - t/T)^power; power 0 keeps lr constant.
    double poly_power = 0.9;
};

// First-order optimizer over the model's named parameters. Parameters added
// after construction (extension installs) register with fresh state; skips
// any parameter without a populated gradient.
class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {}

    void register_params(const std::vector<TransformerModel::NamedParam>& params);
    double lr_at(int step, int total_steps) const;
    void step(int step_index, int total_steps);

private:
    struct State {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };
    OptimConfig cfg_;
    std::vector<State> states_;
    long steps_taken_ = 0;
};

enum class TrainMode { Joint, SingleTask, Dtme, PcGrad };
TrainMode train_mode_from_string(const std::string& s);
std::string to_string(TrainMode m);

struct TrainConfig {
    TrainMode mode = TrainMode::Joint;
    uint64_t seed = 1;
    int steps = 200;
    int batch = 8;
    OptimConfig optim;
    int single_task = 0;  // SingleTask mode only
    double eval_fraction = 0.25;
    int monitor_every = 0;     // 0 disables periodic snapshots (ends still run)
    int monitor_samples = 16;  // fixed leading slice of the training split
    std::vector<double> task_weights;  // empty = all ones

    // Model shape (token/channel counts come from the dataset).
    int depth = 4;
    int hidden = 32;
    int heads = 4;

    // Expansion knobs (Dtme mode).
    double r = 100.0;
    double beta = 0.5;
    int tokens_per_task = 6;
    double timing = 0.05;  // fraction of the step budget spent before expansion
    PlanStrategy strategy = PlanStrategy::Standard;
    PlanActions actions = PlanActions::Both;
    int conflict_samples = 0;  // 0 = full training split
    std::string modulator_kind = "affine";  // accepted: affine; others rejected

    void validate(int num_tasks) const;
};

struct StepLoss {
    int step = 0;
    double lr = 0.0;
    double total = 0.0;
    std::vector<double> per_task;  // NaN for tasks not trained this run
};

struct ConflictSnapshot {
    int step = 0;
    // Parameter-space cosine histogram over task pairs (shared params only).
    std::array<long, kCosineHistogramBins> param_cos_hist{};
    // Token-space conflict fractions per layer under the cached bases.
    std::vector<LayerSeverity> layers;
    long range_total = 0;
    long null_total = 0;
    long tokens_total = 0;
};

struct RunRecord {
    TrainMode mode = TrainMode::Joint;
    uint64_t seed = 0;
    std::vector<StepLoss> losses;
    std::vector<ConflictSnapshot> snapshots;
    MetricTable metrics;
    std::optional<ExpansionPlan> plan;
    long params_before = 0;
    long params_after = 0;
    double overhead_percent = 0.0;
    double wall_seconds = 0.0;
};

// Token covariance + split + conflict statistics over the given samples.
struct ConflictMeasurement {
    std::vector<SpectralBasis> bases;      // per layer
    std::vector<ConflictStats> stats;      // per layer
    std::vector<LayerSeverity> severities; // per layer
};

ConflictMeasurement measure_conflicts(const TransformerModel& model, const Dataset& data,
                                      const std::vector<int>& samples, double r);

// One monitoring snapshot against previously fitted bases.
ConflictSnapshot monitor_conflicts(const TransformerModel& model, const Dataset& data,
                                   const std::vector<int>& samples,
                                   const std::vector<SpectralBasis>& bases, int step);

// Percent reduction of a conflict fraction between the first and last
// snapshot; returns 0 when either end is empty.
double conflict_reduction_percent(const std::vector<ConflictSnapshot>& snaps, bool range_space);

// Pure projecting combination: for each task gradient, subtract the
// projection onto every conflicting other-task gradient, visiting the others
// in the given per-task order; returns the sum of the surgered gradients.
std::vector<double> pcgrad_combine(const std::vector<std::vector<double>>& grads,
                                   const std::vector<std::vector<int>>& orders);

// Seeded-order wrapper over pcgrad_combine.
std::vector<double> pcgrad_step(const std::vector<std::vector<double>>& grads, Rng& rng);

RunRecord train_run(TransformerModel& model, const Dataset& data, const TrainConfig& cfg);

// FNV-1a hash over all parameter bytes in registry order.
uint64_t parameter_hash(const TransformerModel& model);

}  // namespace dtme
