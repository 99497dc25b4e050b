// SPDX-License-Identifier: Apache-2.0
//
// Toy pre-norm transformer encoder over a fixed token grid with per-task
// heads. Supports two per-layer extensions installed mid-training:
//   - channel modulation: the stream branches into one stream per task, each
//     transformed by a learnable per-channel affine before the block;
//   - token expansion: learnable per-task tokens join the block's attention
//     as extra key/value rows and contribute an additive term to the shared
//     rows' attention output. Zero tokens contribute exactly zero (the
//     key/value projections carry no bias and the extra tokens bypass the
//     pre-attention normalization), so installing them never changes outputs.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dtme/rng.hpp"
#include "dtme/tensor.hpp"

namespace dtme {

struct HeadSpec {
    enum class Kind { ClassLogits, Regression };
    Kind kind = Kind::Regression;
    int dim = 1;
};

struct ModelConfig {
    int depth = 2;           // number of transformer blocks
    int hidden = 16;         // channel width p
    int heads = 2;           // attention heads, must divide hidden
    int tokens = 16;         // tokens per sample N
    int input_channels = 8;  // raw channels per token
    std::vector<HeadSpec> head_specs;  // one per task
    // Alternative attention coupling for expansion tokens: fold them into the
    // shared softmax instead of the additive extension term. Changes outputs
    // as soon as tokens are installed, so it is off by default.
    bool joint_expansion_softmax = false;

    int num_tasks() const { return static_cast<int>(head_specs.size()); }
    void validate() const;
};

// Per-layer expansion state; empty vectors mean the layer is untouched.
struct LayerExtension {
    bool modulated = false;
    bool expanded = false;
    std::vector<Tensor> mod_scale;    // K tensors [p]
    std::vector<Tensor> mod_shift;    // K tensors [p]
    std::vector<Tensor> task_tokens;  // K tensors [t, p]
};

struct ForwardOptions {
    bool capture_activations = false;
    // Marks captured block-input tokens to retain gradients across backward.
    bool retain_token_grads = false;
};

// Block-input tokens per layer. Before any branch there is a single stream;
// after the first modulated layer there is one stream per task. Tokens are
// captured before the layer's own modulation is applied.
struct LayerActivations {
    std::vector<std::vector<Tensor>> streams;  // [layer][stream]
};

struct ForwardResult {
    std::vector<Tensor> task_outputs;  // one [1, head_dim] tensor per task
    LayerActivations activations;
};

class TransformerModel {
public:
    explicit TransformerModel(ModelConfig cfg, uint64_t init_seed);

    const ModelConfig& config() const { return cfg_; }

    // Forward for one sample (tokens x input_channels).
    ForwardResult forward_all_tasks(const Tensor& sample, const ForwardOptions& opts = {}) const;

    // Named parameters in registration order (stable across runs; extension
    // parameters append at install time).
    struct NamedParam {
        std::string name;
        Tensor value;
    };
    const std::vector<NamedParam>& parameters() const { return params_; }
    Tensor find_parameter(const std::string& name) const;
    long parameter_count() const;
    void zero_all_grads();

    // Shared parameters exclude per-task heads and extension parameters.
    bool is_shared_parameter(const std::string& name) const;
    bool is_task_parameter(const std::string& name, int task) const;

    // Extension installation (used by plan application). Layer is 0-based.
    void install_modulation(int layer, std::vector<Tensor> scale, std::vector<Tensor> shift);
    void install_expansion(int layer, std::vector<Tensor> tokens);
    bool has_extensions() const;
    const std::vector<LayerExtension>& extensions() const { return extensions_; }

    // Number of attention key rows consumed at a layer (shared + expansion).
    int attention_rows(int layer) const;

private:
    struct Block {
        Tensor ln1_scale, ln1_shift;
        Tensor wq, wk, wv, wo;  // p x p, no biases
        Tensor ln2_scale, ln2_shift;
        Tensor w1, b1;  // p x 4p
        Tensor w2, b2;  // 4p x p
    };
    struct Head {
        Tensor w;  // p x dim
        Tensor b;  // dim
    };

    Tensor embed(const Tensor& sample) const;
    // Runs one block on a stream. `tokens_for_stream` lists the expansion
    // token tensors participating at this layer for this stream.
    Tensor block_forward(int layer, const Tensor& stream_tokens,
                         const std::vector<Tensor>& tokens_for_stream) const;
    Tensor attention(const Block& blk, const Tensor& normed,
                     const std::vector<Tensor>& extra_tokens) const;
    Tensor head_forward(int task, const Tensor& tokens) const;

    void register_param(const std::string& name, Tensor t);

    ModelConfig cfg_;
    Tensor embed_w_;    // c x p
    Tensor embed_pos_;  // N x p
    std::vector<Block> blocks_;
    std::vector<Head> heads_;
    std::vector<LayerExtension> extensions_;
    std::vector<NamedParam> params_;
};

}  // namespace dtme
