// SPDX-License-Identifier: Apache-2.0
//
// Layer selection and installation of the two conflict-mitigation extensions:
// per-task channel modulation for range-space conflicts and per-task token
// expansion for null-space conflicts. Also numeric verification of the two
// first-order claims behind them on constructed instances.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtme/analyzer.hpp"
#include "dtme/model.hpp"
#include "dtme/rng.hpp"

namespace dtme {

enum class LayerAction { None, Modulate, Expand, Both };

enum class PlanStrategy { Standard, Random, Reverse, Swap };

PlanStrategy plan_strategy_from_string(const std::string& s);
std::string to_string(PlanStrategy s);
std::string to_string(LayerAction a);

// Which extension kinds a plan may assign.
enum class PlanActions { Both, ModulateOnly, ExpandOnly, None };
PlanActions plan_actions_from_string(const std::string& s);
std::string to_string(PlanActions a);

struct ExpansionPlan {
    int depth = 0;
    double beta = 0.5;
    int tokens_per_task = 6;
    PlanStrategy strategy = PlanStrategy::Standard;
    uint64_t seed = 0;
    int created_step = 0;  // training step at which the plan was built
    std::vector<LayerAction> actions;            // size = depth, index 0 = first layer
    std::vector<double> range_scores;            // per layer, as measured
    std::vector<double> null_scores;

    int budget() const;  // ceil(beta * depth), per action kind
    int count(LayerAction which) const;
    bool modulates(int layer) const;
    bool expands(int layer) const;
    void validate() const;
};

// Ranks layers per action kind and assigns each action to its own budget of
// layers (a layer can receive both). Standard ranks modulation by range score
// and expansion by null score, descending; Reverse ranks ascending; Swap
// exchanges the two score vectors; Random ignores scores and samples layers
// from the plan RNG stream. Ties break toward the lower layer index.
ExpansionPlan build_plan(const std::vector<LayerSeverity>& severities, double beta,
                         int tokens_per_task, PlanStrategy strategy, uint64_t seed,
                         int created_step, PlanActions allowed = PlanActions::Both);

// Installs the plan's extensions on the model: identity modulation (unit
// scale, zero shift) and zero expansion tokens. Model outputs are unchanged
// until the new parameters train away from their initial values. Fails if the
// model already carries extensions.
void apply_plan(TransformerModel& model, const ExpansionPlan& plan);

// 100 * (after - before) / before.
double param_overhead(double params_before, double params_after);

// Expected added parameter count for a plan on a given model shape.
long planned_extra_params(const ExpansionPlan& plan, int num_tasks, int hidden);

// ---- first-order verification on constructed instances ----

struct ToyInstanceSpec {
    uint64_t seed = 0;
    int dim = 8;         // channel width p
    int tokens = 6;      // rows N
    int range_dim = 4;   // constructed split index m
    int task_tokens = 2; // expansion rows per task (token-step check only)
};

struct ModulationStepResult {
    double max_null_grad = 0.0;        // max |null-projected token gradient|
    double step_size = 0.0;            // accepted eta
    double loss_before = 0.0;
    double loss_after = 0.0;
    double taylor_ratio = 0.0;         // residual(eta) / residual(eta/2)
    bool decreased = false;
};

// Builds a two-task quadratic objective whose token gradients live in the
// range space of a constructed basis, then checks that a modulation-only
// gradient step decreases the summed loss and that the first-order Taylor
// residual scales quadratically in the step size.
ModulationStepResult verify_modulation_step(const ToyInstanceSpec& spec);

struct TokenStepResult {
    double max_range_grad = 0.0;       // max |range-projected token gradient|
    double loss_before = 0.0;
    double loss_after = 0.0;
    double head_grad_norm = 0.0;       // admissible head update direction at the instance
    double first_order_decrease = 0.0; // predicted eta * sum ||grad||^2
    double actual_decrease = 0.0;
    bool decreased = false;
};

// Builds a two-task objective whose token gradients live in the null space
// and whose targets are reachable only through added per-task tokens: a step
// on the task tokens decreases the summed loss while the frozen-shared
// baseline admits no first-order decrease through the heads.
TokenStepResult verify_token_step(const ToyInstanceSpec& spec);

}  // namespace dtme
