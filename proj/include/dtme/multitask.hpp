// SPDX-License-Identifier: Apache-2.0
//
// Synthetic multi-task datasets over a token grid with a conflict knob, task
// losses, and the relative multi-task performance metric.
//
// Generation: each sample draws latent factors z. Task 0 reads z directly;
// task i >= 1 reads ((1-kappa) I + kappa (-R_i)) z for a fixed random
// rotation R_i. At kappa = 0 all tasks see identical features (tasks with the
// same kind and width get identical targets); at kappa = 1 the features are
// rotated and sign-flipped, so task gradients through shared representations
// oppose each other. Targets apply a shared nonlinear readout so the trunk,
// not the linear heads, must resolve the disagreement.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dtme/model.hpp"
#include "dtme/tensor.hpp"

namespace dtme {

struct TaskSpec {
    HeadSpec::Kind kind = HeadSpec::Kind::Regression;
    int dim = 1;
};

struct SyntheticSpec {
    uint64_t seed = 0;
    int samples = 64;
    int grid_rows = 8;
    int grid_cols = 8;
    int channels = 8;
    int latent_dim = 8;
    double kappa = 0.0;  // conflict knob in [0, 1]
    double noise = 0.01;
    std::vector<TaskSpec> tasks;

    int tokens() const { return grid_rows * grid_cols; }
    int num_tasks() const { return static_cast<int>(tasks.size()); }
    void validate() const;
    // Hash over the canonical serialized form; embedded in dataset files.
    uint64_t content_hash() const;
};

struct TaskLabels {
    std::vector<int> class_labels;  // classification: one label per sample
    std::vector<Tensor> targets;    // regression: one [1, dim] target per sample
};

struct Dataset {
    SyntheticSpec spec;
    std::vector<Tensor> inputs;     // one [tokens, channels] tensor per sample
    std::vector<TaskLabels> labels;  // one entry per task

    int size() const { return static_cast<int>(inputs.size()); }
    // Deterministic split: leading samples train, trailing samples evaluate.
    std::vector<int> train_indices(double eval_fraction) const;
    std::vector<int> eval_indices(double eval_fraction) const;
};

Dataset generate_dataset(const SyntheticSpec& spec);

std::vector<HeadSpec> head_specs_for(const SyntheticSpec& spec);

// Training loss for one task on one sample.
Tensor task_loss(const TaskSpec& spec, const Tensor& output, const Dataset& data, int task,
                 int sample);

struct MultitaskLoss {
    Tensor total;
    std::vector<Tensor> per_task;
};

// total = sum_i weights[i] * per_task[i], built on the same graph.
MultitaskLoss multitask_loss(const std::vector<Tensor>& per_task,
                             const std::vector<double>& weights);

struct MetricRow {
    std::string task;
    std::string metric;
    double model = 0.0;
    double baseline = 0.0;
    bool has_baseline = false;
    bool lower_is_better = false;
};

struct MetricTable {
    std::vector<MetricRow> rows;
};

// Mean signed relative difference to the baseline in percent; positive means
// the model beats its baselines. Entries with lower_is_better flip sign.
double delta_m(const std::vector<double>& model_vals, const std::vector<double>& baseline_vals,
               const std::vector<bool>& lower_is_better);

double delta_m_from_table(const MetricTable& table);

// Evaluates a model on the given sample indices: classification reports
// accuracy (higher is better), regression reports mean L1 error (lower).
MetricTable evaluate_model(const TransformerModel& model, const Dataset& data,
                           const std::vector<int>& indices);

}  // namespace dtme
