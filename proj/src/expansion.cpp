// SPDX-License-Identifier: Apache-2.0
#include "dtme/expansion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace dtme {

PlanStrategy plan_strategy_from_string(const std::string& s) {
    if (s == "standard") return PlanStrategy::Standard;
    if (s == "random") return PlanStrategy::Random;
    if (s == "reverse") return PlanStrategy::Reverse;
    if (s == "swap") return PlanStrategy::Swap;
    throw ContractError("unknown strategy '" + s + "' (expected standard|random|reverse|swap)");
}

std::string to_string(PlanStrategy s) {
    switch (s) {
        case PlanStrategy::Standard: return "standard";
        case PlanStrategy::Random: return "random";
        case PlanStrategy::Reverse: return "reverse";
        case PlanStrategy::Swap: return "swap";
    }
    return "standard";
}

std::string to_string(LayerAction a) {
    switch (a) {
        case LayerAction::None: return "none";
        case LayerAction::Modulate: return "modulate";
        case LayerAction::Expand: return "expand";
        case LayerAction::Both: return "both";
    }
    return "none";
}

PlanActions plan_actions_from_string(const std::string& s) {
    if (s == "both") return PlanActions::Both;
    if (s == "tm" || s == "modulate") return PlanActions::ModulateOnly;
    if (s == "te" || s == "expand") return PlanActions::ExpandOnly;
    if (s == "none") return PlanActions::None;
    throw ContractError("unknown actions '" + s + "' (expected both|tm|te|none)");
}

std::string to_string(PlanActions a) {
    switch (a) {
        case PlanActions::Both: return "both";
        case PlanActions::ModulateOnly: return "tm";
        case PlanActions::ExpandOnly: return "te";
        case PlanActions::None: return "none";
    }
    return "both";
}

int ExpansionPlan::budget() const {
    return static_cast<int>(std::ceil(beta * depth));
}

int ExpansionPlan::count(LayerAction which) const {
    int n = 0;
    for (LayerAction a : actions) {
        if (a == which) ++n;
    }
    return n;
}

bool ExpansionPlan::modulates(int layer) const {
    const LayerAction a = actions.at(static_cast<size_t>(layer));
    return a == LayerAction::Modulate || a == LayerAction::Both;
}

bool ExpansionPlan::expands(int layer) const {
    const LayerAction a = actions.at(static_cast<size_t>(layer));
    return a == LayerAction::Expand || a == LayerAction::Both;
}

void ExpansionPlan::validate() const {
    if (depth <= 0) throw ContractError("plan: depth must be positive");
    if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("plan: beta must lie in (0,1]");
    if (tokens_per_task <= 0) throw ContractError("plan: tokens per task must be positive");
    if (static_cast<int>(actions.size()) != depth) throw ContractError("plan: action list size");
    int n_mod = 0, n_exp = 0;
    for (int d = 0; d < depth; ++d) {
        if (modulates(d)) ++n_mod;
        if (expands(d)) ++n_exp;
    }
    if (n_mod > budget() || n_exp > budget()) {
        throw ContractError("plan: per-action layer count exceeds budget");
    }
}

namespace {

// Layer indices ranked by score; ties go to the lower layer index.
std::vector<int> ranked_layers(const std::vector<double>& scores, bool descending) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        const double sa = scores[static_cast<size_t>(a)];
        const double sb = scores[static_cast<size_t>(b)];
        if (sa != sb) return descending ? sa > sb : sa < sb;
        return a < b;
    });
    return idx;
}

std::vector<int> sample_layers(int depth, int budget, Rng& rng) {
    std::vector<int> idx(static_cast<size_t>(depth));
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    idx.resize(static_cast<size_t>(budget));
    return idx;
}

}  // namespace

ExpansionPlan build_plan(const std::vector<LayerSeverity>& severities, double beta,
                         int tokens_per_task, PlanStrategy strategy, uint64_t seed,
                         int created_step, PlanActions allowed) {
    const int depth = static_cast<int>(severities.size());
    ExpansionPlan plan;
    plan.depth = depth;
    plan.beta = beta;
    plan.tokens_per_task = tokens_per_task;
    plan.strategy = strategy;
    plan.seed = seed;
    plan.created_step = created_step;
    plan.actions.assign(static_cast<size_t>(depth), LayerAction::None);
    for (const auto& s : severities) {
        plan.range_scores.push_back(s.range_score);
        plan.null_scores.push_back(s.null_score);
    }
    if (depth == 0) throw ContractError("build_plan: no layer severities");
    if (!(beta > 0.0 && beta <= 1.0)) throw ContractError("build_plan: beta must lie in (0,1]");
    if (tokens_per_task <= 0) throw ContractError("build_plan: tokens per task must be positive");

    const int budget = plan.budget();
    std::vector<int> mod_layers, exp_layers;
    switch (strategy) {
        case PlanStrategy::Standard:
            mod_layers = ranked_layers(plan.range_scores, true);
            exp_layers = ranked_layers(plan.null_scores, true);
            break;
        case PlanStrategy::Reverse:
            mod_layers = ranked_layers(plan.range_scores, false);
            exp_layers = ranked_layers(plan.null_scores, false);
            break;
        case PlanStrategy::Swap:
            mod_layers = ranked_layers(plan.null_scores, true);
            exp_layers = ranked_layers(plan.range_scores, true);
            break;
        case PlanStrategy::Random: {
            Rng rng = make_stream(seed, Stream::Plan);
            mod_layers = sample_layers(depth, budget, rng);
            exp_layers = sample_layers(depth, budget, rng);
            break;
        }
    }
    if (mod_layers.size() > static_cast<size_t>(budget)) mod_layers.resize(static_cast<size_t>(budget));
    if (exp_layers.size() > static_cast<size_t>(budget)) exp_layers.resize(static_cast<size_t>(budget));

    const bool want_mod = allowed == PlanActions::Both || allowed == PlanActions::ModulateOnly;
    const bool want_exp = allowed == PlanActions::Both || allowed == PlanActions::ExpandOnly;
    if (want_mod) {
        for (int d : mod_layers) plan.actions[static_cast<size_t>(d)] = LayerAction::Modulate;
    }
    if (want_exp) {
        for (int d : exp_layers) {
            LayerAction& a = plan.actions[static_cast<size_t>(d)];
            a = (a == LayerAction::Modulate) ? LayerAction::Both : LayerAction::Expand;
        }
    }
    plan.validate();
    return plan;
}

void apply_plan(TransformerModel& model, const ExpansionPlan& plan) {
    plan.validate();
    if (plan.depth != model.config().depth) {
        throw ContractError("apply_plan: plan depth does not match model depth");
    }
    if (model.has_extensions()) {
        throw ContractError("apply_plan: model already carries extensions");
    }
    const int k = model.config().num_tasks();
    const int p = model.config().hidden;
    for (int d = 0; d < plan.depth; ++d) {
        if (plan.modulates(d)) {
            std::vector<Tensor> scales, shifts;
            for (int i = 0; i < k; ++i) {
                Tensor w = Tensor::full({p}, 1.0);
                w.set_requires_grad(true);
                Tensor b = Tensor::zeros({p});
                b.set_requires_grad(true);
                scales.push_back(w);
                shifts.push_back(b);
            }
            model.install_modulation(d, std::move(scales), std::move(shifts));
        }
        if (plan.expands(d)) {
            std::vector<Tensor> toks;
            for (int i = 0; i < k; ++i) {
                Tensor t = Tensor::zeros({plan.tokens_per_task, p});
                t.set_requires_grad(true);
                toks.push_back(t);
            }
            model.install_expansion(d, std::move(toks));
        }
    }
}

double param_overhead(double params_before, double params_after) {
    if (!(params_before > 0.0) || !(params_after > 0.0)) {
        throw ContractError("param_overhead: counts must be positive");
    }
    return 100.0 * (params_after - params_before) / params_before;
}

long planned_extra_params(const ExpansionPlan& plan, int num_tasks, int hidden) {
    long n_mod = 0, n_exp = 0;
    for (int d = 0; d < plan.depth; ++d) {
        if (plan.modulates(d)) ++n_mod;
        if (plan.expands(d)) ++n_exp;
    }
    return n_mod * static_cast<long>(num_tasks) * 2L * hidden +
           n_exp * static_cast<long>(num_tasks) * static_cast<long>(plan.tokens_per_task) * hidden;
}

// ---- first-order verification ----

namespace {

// Constructed basis with a pinned split: unit-mass leading directions and
// near-zero trailing directions around a random orthonormal frame.
SpectralBasis make_toy_basis(int p, int m, Rng& rng) {
    std::vector<double> sym(static_cast<size_t>(p) * p);
    for (int i = 0; i < p; ++i) {
        for (int j = i; j < p; ++j) {
            const double v = rng.normal();
            sym[static_cast<size_t>(i) * p + j] = v;
            sym[static_cast<size_t>(j) * p + i] = v;
        }
    }
    SymmetricEigen frame = jacobi_eigendecompose(Tensor::from({p, p}, std::move(sym)));
    const auto u = frame.vectors.data();
    std::vector<double> cov(static_cast<size_t>(p) * p, 0.0);
    for (int c = 0; c < p; ++c) {
        const double lambda = c < m ? 1.0 : 1e-12;
        for (int i = 0; i < p; ++i) {
            const double ui = u[static_cast<size_t>(i) * p + c];
            for (int j = 0; j < p; ++j) {
                cov[static_cast<size_t>(i) * p + j] += lambda * ui * u[static_cast<size_t>(j) * p + c];
            }
        }
    }
    // Exact symmetry despite accumulation order.
    for (int i = 0; i < p; ++i) {
        for (int j = i + 1; j < p; ++j) {
            const double v = 0.5 * (cov[static_cast<size_t>(i) * p + j] + cov[static_cast<size_t>(j) * p + i]);
            cov[static_cast<size_t>(i) * p + j] = v;
            cov[static_cast<size_t>(j) * p + i] = v;
        }
    }
    TokenCovariance tc;
    tc.layer = 1;
    tc.dim = p;
    tc.matrix = Tensor::from({p, p}, std::move(cov));
    tc.samples = 1;
    return spectral_split(tc, 100.0);
}

// Rows are random combinations of the basis columns [c0, c1).
Tensor span_rows(const SpectralBasis& basis, int rows, int c0, int c1, Rng& rng) {
    const int p = basis.dim();
    const auto u = basis.vectors.data();
    std::vector<double> out(static_cast<size_t>(rows) * p, 0.0);
    for (int r = 0; r < rows; ++r) {
        for (int c = c0; c < c1; ++c) {
            const double coef = rng.normal();
            for (int j = 0; j < p; ++j) {
                out[static_cast<size_t>(r) * p + j] += coef * u[static_cast<size_t>(j) * p + c];
            }
        }
    }
    return Tensor::from({rows, p}, std::move(out));
}

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
}

double grad_sq_norm(const Tensor& t) {
    double s = 0.0;
    for (double g : t.grad()) s += g * g;
    return s;
}

}  // namespace

ModulationStepResult verify_modulation_step(const ToyInstanceSpec& spec) {
    Rng rng(Rng::substream(spec.seed, 11));
    SpectralBasis basis = make_toy_basis(spec.dim, spec.range_dim, rng);
    const int n = spec.tokens, p = spec.dim;

    Tensor tokens = span_rows(basis, n, 0, basis.split, rng);
    Tensor delta = span_rows(basis, n, 0, basis.split, rng);
    Tensor y0 = Tensor::from({n, p}, std::vector<double>(delta.data().begin(), delta.data().end()));
    {
        auto yd = y0.mutable_data();
        const auto td = tokens.data();
        for (size_t i = 0; i < yd.size(); ++i) yd[i] = td[i] + yd[i];
    }
    Tensor y1 = Tensor::from({n, p}, std::vector<double>(delta.data().begin(), delta.data().end()));
    {
        auto yd = y1.mutable_data();
        const auto td = tokens.data();
        for (size_t i = 0; i < yd.size(); ++i) yd[i] = td[i] - yd[i];
    }

    // Loss at given per-task channel scale/shift values.
    auto loss_at = [&](const Tensor& w0, const Tensor& b0, const Tensor& w1, const Tensor& b1) {
        Tensor l0 = mse_loss(add(mul(tokens, w0), b0), y0);
        Tensor l1 = mse_loss(add(mul(tokens, w1), b1), y1);
        return add(l0, l1);
    };

    ModulationStepResult res;

    // (a) token gradients at identity modulation stay out of the null space.
    {
        Tensor t_leaf = tokens.detached_copy();
        t_leaf.set_requires_grad(true);
        Tensor w = Tensor::full({p}, 1.0);
        Tensor b = Tensor::zeros({p});
        for (int task = 0; task < 2; ++task) {
            Tensor loss = mse_loss(add(mul(t_leaf, w), b), task == 0 ? y0 : y1);
            t_leaf.zero_grad();
            backward(loss);
            Tensor g = Tensor::from({n, p},
                                    std::vector<double>(t_leaf.grad().begin(), t_leaf.grad().end()));
            ProjectedGradients proj = project_gradients(task, g, basis);
            res.max_null_grad = std::max(res.max_null_grad, max_abs(proj.null_part.data()));
        }
    }

    // (b) gradient step on the modulation parameters alone.
    Tensor w0 = Tensor::full({p}, 1.0);
    Tensor b0 = Tensor::zeros({p});
    Tensor w1 = Tensor::full({p}, 1.0);
    Tensor b1 = Tensor::zeros({p});
    for (Tensor* t : {&w0, &b0, &w1, &b1}) t->set_requires_grad(true);

    Tensor total = loss_at(w0, b0, w1, b1);
    res.loss_before = total.value();
    backward(total);
    const double gsq = grad_sq_norm(w0) + grad_sq_norm(b0) + grad_sq_norm(w1) + grad_sq_norm(b1);

    auto stepped = [&](const Tensor& param, double eta) {
        Tensor out = param.detached_copy();
        auto od = out.mutable_data();
        const auto gd = param.grad();
        for (size_t i = 0; i < od.size(); ++i) od[i] -= eta * gd[i];
        return out;
    };
    auto loss_after_step = [&](double eta) {
        return loss_at(stepped(w0, eta), stepped(b0, eta), stepped(w1, eta), stepped(b1, eta))
            .value();
    };

    double eta = 0.5;
    for (int tries = 0; tries < 60; ++tries) {
        const double after = loss_after_step(eta);
        if (after < res.loss_before) {
            res.step_size = eta;
            res.loss_after = after;
            res.decreased = true;
            break;
        }
        eta *= 0.5;
    }

    // (c) first-order Taylor residual halves twice when eta halves.
    const double eta_t = 0.1;
    const double r_full = std::fabs(loss_after_step(eta_t) - res.loss_before + eta_t * gsq);
    const double r_half = std::fabs(loss_after_step(eta_t / 2.0) - res.loss_before + (eta_t / 2.0) * gsq);
    res.taylor_ratio = r_half > 0.0 ? r_full / r_half : 0.0;
    return res;
}

TokenStepResult verify_token_step(const ToyInstanceSpec& spec) {
    Rng rng(Rng::substream(spec.seed, 13));
    const int p = spec.dim, n = spec.tokens, t_rows = spec.task_tokens;
    if (spec.range_dim > p - 2) throw ContractError("verify_token_step: need null dim >= 2");
    SpectralBasis basis = make_toy_basis(p, spec.range_dim, rng);

    // Shared tokens occupy the leading null directions; the target offset
    // uses the last null direction, so it is orthogonal to every token row
    // (heads that rescale outputs see exactly zero first-order signal).
    Tensor tokens = span_rows(basis, n, basis.split, p - 1, rng);
    std::vector<double> dirv(static_cast<size_t>(p));
    {
        const auto u = basis.vectors.data();
        for (int j = 0; j < p; ++j) dirv[static_cast<size_t>(j)] = u[static_cast<size_t>(j) * p + (p - 1)];
    }

    auto make_target = [&](double sign) {
        std::vector<double> y(tokens.data().begin(), tokens.data().end());
        for (int r = 0; r < n; ++r) {
            for (int j = 0; j < p; ++j) y[static_cast<size_t>(r) * p + j] += sign * dirv[static_cast<size_t>(j)];
        }
        return Tensor::from({n, p}, std::move(y));
    };
    Tensor y0 = make_target(1.0);
    Tensor y1 = make_target(-1.0);

    // Attachment matrix: every shared row receives the mean of the task rows.
    Tensor attach = Tensor::full({n, t_rows}, 1.0 / t_rows);

    Tensor tok0 = Tensor::zeros({t_rows, p});
    Tensor tok1 = Tensor::zeros({t_rows, p});
    Tensor gain0 = Tensor::full({1}, 1.0);
    Tensor gain1 = Tensor::full({1}, 1.0);
    for (Tensor* t : {&tok0, &tok1, &gain0, &gain1}) t->set_requires_grad(true);

    auto loss_for = [&](int task, const Tensor& tok, const Tensor& gain, const Tensor& shared) {
        Tensor out = mul(add(shared, matmul(attach, tok)), gain);
        return mse_loss(out, task == 0 ? y0 : y1);
    };

    TokenStepResult res;

    // (a) token gradients at the instance stay out of the range space.
    {
        Tensor t_leaf = tokens.detached_copy();
        t_leaf.set_requires_grad(true);
        for (int task = 0; task < 2; ++task) {
            Tensor loss = loss_for(task, task == 0 ? tok0 : tok1, task == 0 ? gain0 : gain1, t_leaf);
            t_leaf.zero_grad();
            backward(loss);
            Tensor g = Tensor::from({n, p},
                                    std::vector<double>(t_leaf.grad().begin(), t_leaf.grad().end()));
            ProjectedGradients proj = project_gradients(task, g, basis);
            res.max_range_grad = std::max(res.max_range_grad, max_abs(proj.range_part.data()));
        }
    }
    // The instrumentation backward above also touched the token/gain grads.
    for (Tensor* t : {&tok0, &tok1, &gain0, &gain1}) t->zero_grad();

    Tensor total = add(loss_for(0, tok0, gain0, tokens), loss_for(1, tok1, gain1, tokens));
    res.loss_before = total.value();
    backward(total);
    res.head_grad_norm = std::sqrt(grad_sq_norm(gain0) + grad_sq_norm(gain1));

    const double eta = 1e-4;
    const double tok_gsq = grad_sq_norm(tok0) + grad_sq_norm(tok1);
    res.first_order_decrease = eta * tok_gsq;

    auto stepped = [&](const Tensor& param) {
        Tensor out = param.detached_copy();
        auto od = out.mutable_data();
        const auto gd = param.grad();
        for (size_t i = 0; i < od.size(); ++i) od[i] -= eta * gd[i];
        return out;
    };
    Tensor tok0s = stepped(tok0);
    Tensor tok1s = stepped(tok1);
    const double after = add(loss_for(0, tok0s, gain0.detached_copy(), tokens),
                             loss_for(1, tok1s, gain1.detached_copy(), tokens))
                             .value();
    res.loss_after = after;
    res.actual_decrease = res.loss_before - after;
    res.decreased = after < res.loss_before;
    return res;
}

}  // namespace dtme
