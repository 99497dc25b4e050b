// SPDX-License-Identifier: Apache-2.0
#include "dtme/model.hpp"

#include <cmath>

namespace dtme {

void ModelConfig::validate() const {
    if (depth <= 0) throw ContractError("model: depth must be positive");
    if (hidden <= 0) throw ContractError("model: hidden width must be positive");
    if (heads <= 0 || hidden % heads != 0) {
        throw ContractError("model: heads must divide hidden width");
    }
    if (tokens <= 0) throw ContractError("model: token count must be positive");
    if (input_channels <= 0) throw ContractError("model: input channels must be positive");
    if (head_specs.empty()) throw ContractError("model: at least one task head required");
    for (const auto& h : head_specs) {
        if (h.dim <= 0) throw ContractError("model: head dim must be positive");
    }
}

namespace {

Tensor init_weight(std::vector<int> shape, Rng& rng, double sigma = 0.02) {
    Tensor t = Tensor::zeros(std::move(shape));
    auto d = t.mutable_data();
    for (double& v : d) v = rng.trunc_normal(sigma);
    t.set_requires_grad(true);
    return t;
}

Tensor init_const(std::vector<int> shape, double value) {
    Tensor t = Tensor::full(std::move(shape), value);
    t.set_requires_grad(true);
    return t;
}

}  // namespace

TransformerModel::TransformerModel(ModelConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = make_stream(init_seed, Stream::Init);
    const int p = cfg_.hidden;

    embed_w_ = init_weight({cfg_.input_channels, p}, rng);
    embed_pos_ = init_weight({cfg_.tokens, p}, rng);
    register_param("embed.weight", embed_w_);
    register_param("embed.pos", embed_pos_);

    blocks_.resize(static_cast<size_t>(cfg_.depth));
    for (int d = 0; d < cfg_.depth; ++d) {
        Block& b = blocks_[static_cast<size_t>(d)];
        const std::string pre = "block" + std::to_string(d) + ".";
        b.ln1_scale = init_const({p}, 1.0);
        b.ln1_shift = init_const({p}, 0.0);
        b.wq = init_weight({p, p}, rng);
        b.wk = init_weight({p, p}, rng);
        b.wv = init_weight({p, p}, rng);
        b.wo = init_weight({p, p}, rng);
        b.ln2_scale = init_const({p}, 1.0);
        b.ln2_shift = init_const({p}, 0.0);
        b.w1 = init_weight({p, 4 * p}, rng);
        b.b1 = init_const({4 * p}, 0.0);
        b.w2 = init_weight({4 * p, p}, rng);
        b.b2 = init_const({p}, 0.0);
        register_param(pre + "ln1.scale", b.ln1_scale);
        register_param(pre + "ln1.shift", b.ln1_shift);
        register_param(pre + "attn.wq", b.wq);
        register_param(pre + "attn.wk", b.wk);
        register_param(pre + "attn.wv", b.wv);
        register_param(pre + "attn.wo", b.wo);
        register_param(pre + "ln2.scale", b.ln2_scale);
        register_param(pre + "ln2.shift", b.ln2_shift);
        register_param(pre + "mlp.w1", b.w1);
        register_param(pre + "mlp.b1", b.b1);
        register_param(pre + "mlp.w2", b.w2);
        register_param(pre + "mlp.b2", b.b2);
    }

    for (int i = 0; i < cfg_.num_tasks(); ++i) {
        Head h;
        h.w = init_weight({p, cfg_.head_specs[static_cast<size_t>(i)].dim}, rng);
        h.b = init_const({cfg_.head_specs[static_cast<size_t>(i)].dim}, 0.0);
        heads_.push_back(h);
        register_param("head" + std::to_string(i) + ".weight", h.w);
        register_param("head" + std::to_string(i) + ".bias", h.b);
    }

    extensions_.resize(static_cast<size_t>(cfg_.depth));
}

void TransformerModel::register_param(const std::string& name, Tensor t) {
    for (const auto& p : params_) {
        if (p.name == name) throw ContractError("duplicate parameter name: " + name);
    }
    params_.push_back({name, std::move(t)});
}

Tensor TransformerModel::find_parameter(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw ContractError("unknown parameter: " + name);
}

long TransformerModel::parameter_count() const {
    long n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

void TransformerModel::zero_all_grads() {
    for (auto& p : params_) p.value.zero_grad();
}

bool TransformerModel::is_shared_parameter(const std::string& name) const {
    return name.rfind("head", 0) != 0 && name.rfind("mod.", 0) != 0 &&
           name.rfind("tok.", 0) != 0;
}

bool TransformerModel::is_task_parameter(const std::string& name, int task) const {
    const std::string t = std::to_string(task);
    if (name.rfind("head" + t + ".", 0) == 0) return true;
    const std::string task_suffix = ".task" + t;
    if (name.rfind("mod.", 0) == 0 || name.rfind("tok.", 0) == 0) {
        const auto pos = name.find(task_suffix);
        if (pos != std::string::npos) {
            const size_t end = pos + task_suffix.size();
            return end == name.size() || name[end] == '.';
        }
    }
    return false;
}

void TransformerModel::install_modulation(int layer, std::vector<Tensor> scale,
                                          std::vector<Tensor> shift) {
    if (layer < 0 || layer >= cfg_.depth) throw ContractError("install_modulation: bad layer");
    LayerExtension& ext = extensions_[static_cast<size_t>(layer)];
    if (ext.modulated) throw ContractError("install_modulation: layer already modulated");
    const int k = cfg_.num_tasks();
    if (static_cast<int>(scale.size()) != k || static_cast<int>(shift.size()) != k) {
        throw ContractError("install_modulation: need one scale/shift per task");
    }
    for (int i = 0; i < k; ++i) {
        if (scale[static_cast<size_t>(i)].shape() != std::vector<int>{cfg_.hidden} ||
            shift[static_cast<size_t>(i)].shape() != std::vector<int>{cfg_.hidden}) {
            throw ShapeError("install_modulation: scale/shift must have shape [hidden]");
        }
        register_param("mod.layer" + std::to_string(layer) + ".task" + std::to_string(i) + ".scale",
                       scale[static_cast<size_t>(i)]);
        register_param("mod.layer" + std::to_string(layer) + ".task" + std::to_string(i) + ".shift",
                       shift[static_cast<size_t>(i)]);
    }
    ext.modulated = true;
    ext.mod_scale = std::move(scale);
    ext.mod_shift = std::move(shift);
}

void TransformerModel::install_expansion(int layer, std::vector<Tensor> tokens) {
    if (layer < 0 || layer >= cfg_.depth) throw ContractError("install_expansion: bad layer");
    LayerExtension& ext = extensions_[static_cast<size_t>(layer)];
    if (ext.expanded) throw ContractError("install_expansion: layer already expanded");
    const int k = cfg_.num_tasks();
    if (static_cast<int>(tokens.size()) != k) {
        throw ContractError("install_expansion: need one token block per task");
    }
    for (int i = 0; i < k; ++i) {
        const Tensor& t = tokens[static_cast<size_t>(i)];
        if (t.ndim() != 2 || t.dim(1) != cfg_.hidden) {
            throw ShapeError("install_expansion: tokens must have shape [t, hidden]");
        }
        register_param("tok.layer" + std::to_string(layer) + ".task" + std::to_string(i),
                       t);
    }
    ext.expanded = true;
    ext.task_tokens = std::move(tokens);
}

bool TransformerModel::has_extensions() const {
    for (const auto& e : extensions_) {
        if (e.modulated || e.expanded) return true;
    }
    return false;
}

int TransformerModel::attention_rows(int layer) const {
    if (layer < 0 || layer >= cfg_.depth) throw ContractError("attention_rows: bad layer");
    int rows = cfg_.tokens;
    const LayerExtension& ext = extensions_[static_cast<size_t>(layer)];
    if (ext.expanded) {
        bool branched = false;
        for (int d = 0; d <= layer; ++d) {
            if (extensions_[static_cast<size_t>(d)].modulated) branched = true;
        }
        if (branched) {
            rows += ext.task_tokens[0].dim(0);  // each stream sees its own task's tokens
        } else {
            for (const auto& t : ext.task_tokens) rows += t.dim(0);
        }
    }
    return rows;
}

Tensor TransformerModel::embed(const Tensor& sample) const {
    if (sample.ndim() != 2 || sample.dim(0) != cfg_.tokens ||
        sample.dim(1) != cfg_.input_channels) {
        throw ShapeError("forward: sample must be [tokens, input_channels]");
    }
    return add(matmul(sample, embed_w_), embed_pos_);
}

Tensor TransformerModel::attention(const Block& blk, const Tensor& normed,
                                   const std::vector<Tensor>& extra_tokens) const {
    const int p = cfg_.hidden;
    const int h = cfg_.heads;
    const int dh = p / h;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor q = matmul(normed, blk.wq);
    Tensor k = matmul(normed, blk.wk);
    Tensor v = matmul(normed, blk.wv);

    // Expansion tokens feed the key/value projections directly: no bias and
    // no normalization on this path, so zero tokens yield exactly zero rows.
    Tensor ek, ev;
    if (!extra_tokens.empty()) {
        Tensor ecat = extra_tokens.size() == 1 ? extra_tokens[0] : concat(extra_tokens, 0);
        ek = matmul(ecat, blk.wk);
        ev = matmul(ecat, blk.wv);
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(h));
    for (int hd = 0; hd < h; ++hd) {
        const int c0 = hd * dh, c1 = (hd + 1) * dh;
        Tensor qh = slice(q, 1, c0, c1);
        Tensor kh = slice(k, 1, c0, c1);
        Tensor vh = slice(v, 1, c0, c1);
        if (ek.defined() && cfg_.joint_expansion_softmax) {
            kh = concat({kh, slice(ek, 1, c0, c1)}, 0);
            vh = concat({vh, slice(ev, 1, c0, c1)}, 0);
        }
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        Tensor out = matmul(softmax(scores, 1), vh);
        if (ek.defined() && !cfg_.joint_expansion_softmax) {
            Tensor escores = scale(matmul(qh, transpose(slice(ek, 1, c0, c1))), inv_sqrt_dh);
            out = add(out, matmul(softmax(escores, 1), slice(ev, 1, c0, c1)));
        }
        head_outs.push_back(out);
    }
    Tensor merged = head_outs.size() == 1 ? head_outs[0] : concat(head_outs, 1);
    return matmul(merged, blk.wo);
}

Tensor TransformerModel::block_forward(int layer, const Tensor& stream_tokens,
                                       const std::vector<Tensor>& tokens_for_stream) const {
    const Block& blk = blocks_[static_cast<size_t>(layer)];
    Tensor normed = add(mul(layernorm(stream_tokens, 1), blk.ln1_scale), blk.ln1_shift);
    Tensor x1 = add(stream_tokens, attention(blk, normed, tokens_for_stream));
    Tensor normed2 = add(mul(layernorm(x1, 1), blk.ln2_scale), blk.ln2_shift);
    Tensor hidden = gelu(add(matmul(normed2, blk.w1), blk.b1));
    Tensor mlp_out = add(matmul(hidden, blk.w2), blk.b2);
    return add(x1, mlp_out);
}

Tensor TransformerModel::head_forward(int task, const Tensor& tokens) const {
    const Head& h = heads_[static_cast<size_t>(task)];
    // Mean pool over tokens via a constant averaging row.
    Tensor pool = Tensor::full({1, cfg_.tokens}, 1.0 / cfg_.tokens);
    Tensor pooled = matmul(pool, tokens);
    return add(matmul(pooled, h.w), h.b);
}

ForwardResult TransformerModel::forward_all_tasks(const Tensor& sample,
                                                  const ForwardOptions& opts) const {
    const int k = cfg_.num_tasks();
    ForwardResult res;
    if (opts.capture_activations) res.activations.streams.resize(static_cast<size_t>(cfg_.depth));

    std::vector<Tensor> streams;
    streams.push_back(embed(sample));
    bool branched = false;

    for (int d = 0; d < cfg_.depth; ++d) {
        const LayerExtension& ext = extensions_[static_cast<size_t>(d)];
        if (opts.capture_activations) {
            for (auto& s : streams) {
                if (opts.retain_token_grads) s.set_retain_grad(true);
            }
            res.activations.streams[static_cast<size_t>(d)] = streams;
        }
        if (ext.modulated) {
            if (!branched) {
                std::vector<Tensor> split;
                split.reserve(static_cast<size_t>(k));
                for (int i = 0; i < k; ++i) split.push_back(streams[0]);
                streams = std::move(split);
                branched = true;
            }
            for (int i = 0; i < k; ++i) {
                streams[static_cast<size_t>(i)] =
                    add(mul(streams[static_cast<size_t>(i)], ext.mod_scale[static_cast<size_t>(i)]),
                        ext.mod_shift[static_cast<size_t>(i)]);
            }
        }
        for (size_t s = 0; s < streams.size(); ++s) {
            std::vector<Tensor> extra;
            if (ext.expanded) {
                if (branched) {
                    extra.push_back(ext.task_tokens[s]);
                } else {
                    extra = ext.task_tokens;  // single stream serves every task
                }
            }
            streams[s] = block_forward(d, streams[s], extra);
        }
    }

    res.task_outputs.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const Tensor& src = branched ? streams[static_cast<size_t>(i)] : streams[0];
        res.task_outputs.push_back(head_forward(i, src));
    }
    return res;
}

}  // namespace dtme
