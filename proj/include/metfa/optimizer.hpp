#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "metfa/datagen.hpp"
#include "metfa/errors.hpp"
#include "metfa/losses.hpp"
#include "metfa/model.hpp"
#include "metfa/rng.hpp"
#include "metfa/tape.hpp"

namespace metfa {

struct OptConfig {
    double lr = 3e-4;
    double momentum = 0.9;
    double l2_scale = 1e-5;
    std::size_t epochs = 100;
    std::size_t steps_per_epoch = 0; // 0: ceil(|source train| / batch size)
    std::uint64_t seed = 0;
    // Simultaneous update of both groups per step (one forward, sign-flipped
    // entropy gradient at W) is the default; strict_alternate runs a W step
    // and then a fresh main step on the same batch.
    bool strict_alternate = false;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
        if (l2_scale < 0.0) throw ConfigError("l2_scale must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const OptConfig& c) {
    j = nlohmann::json{{"lr", c.lr},
                       {"momentum", c.momentum},
                       {"l2_scale", c.l2_scale},
                       {"epochs", c.epochs},
                       {"steps_per_epoch", c.steps_per_epoch},
                       {"seed", c.seed},
                       {"strict_alternate", c.strict_alternate}};
}

inline void from_json(const nlohmann::json& j, OptConfig& c) {
    OptConfig d;
    c.lr = j.value("lr", d.lr);
    c.momentum = j.value("momentum", d.momentum);
    c.l2_scale = j.value("l2_scale", d.l2_scale);
    c.epochs = j.value("epochs", d.epochs);
    c.steps_per_epoch = j.value("steps_per_epoch", d.steps_per_epoch);
    c.seed = j.value("seed", d.seed);
    c.strict_alternate = j.value("strict_alternate", d.strict_alternate);
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
    j = nlohmann::json{{"lambda1", w.lambda1}, {"lambda2", w.lambda2},
                       {"lambda3", w.lambda3}, {"lambda4", w.lambda4},
                       {"lambda5", w.lambda5}, {"lambda6", w.lambda6},
                       {"tau1", w.tau1}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w) {
    LossWeights d;
    w.lambda1 = j.value("lambda1", d.lambda1);
    w.lambda2 = j.value("lambda2", d.lambda2);
    w.lambda3 = j.value("lambda3", d.lambda3);
    w.lambda4 = j.value("lambda4", d.lambda4);
    w.lambda5 = j.value("lambda5", d.lambda5);
    w.lambda6 = j.value("lambda6", d.lambda6);
    w.tau1 = j.value("tau1", d.tau1);
}

// Per-parameter velocity buffers, aligned with ParamStore order.
struct MomentumState {
    std::vector<Tensor> velocity;

    static MomentumState zeros_like(const ParamStore& ps) {
        MomentumState s;
        s.velocity.reserve(ps.size());
        for (std::size_t i = 0; i < ps.size(); ++i) {
            s.velocity.push_back(Tensor::zeros(ps.entry(i).value.shape()));
        }
        return s;
    }
};

// v <- momentum v + (g + l2 w); w <- w - lr v, applied to one group only.
// All gradients of the group are validated before anything is mutated.
inline void sgd_step(ParamStore& ps, ParamGroup group, const std::vector<Tensor>& grads,
                     MomentumState& state, const OptConfig& cfg) {
    if (grads.size() != ps.size() || state.velocity.size() != ps.size()) {
        throw ShapeError("sgd_step: gradient/state not aligned with parameters");
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps.entry(i).group != group) continue;
        if (!ps.entry(i).value.same_shape(grads[i])) {
            throw ShapeError("sgd_step: gradient shape mismatch for " + ps.entry(i).name);
        }
        if (!grads[i].all_finite()) {
            throw NumericError("non-finite gradient for " + ps.entry(i).name);
        }
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps.entry(i).group != group) continue;
        Tensor& w = ps.entry(i).value;
        Tensor& v = state.velocity[i];
        const Tensor& g = grads[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            v[k] = cfg.momentum * v[k] + (g[k] + cfg.l2_scale * w[k]);
            w[k] -= cfg.lr * v[k];
        }
    }
}

struct StepReport {
    double ce = 0.0;
    double prior = 0.0;
    double metric = 0.0;
    double rec = 0.0;
    double classdist = 0.0;
    double entropy = 0.0;
    double objective_main = 0.0;
    double objective_proto = 0.0;
    double grad_norm_main = 0.0;
    double grad_norm_proto = 0.0;
};

namespace detail {

struct ForwardLosses {
    Tape tape;
    BoundParams bp;
    LossSet losses;
    Objectives obj;
};

// One forward pass over both domains; loss terms with zero weight are skipped
// and recorded as exactly zero.
inline void forward_losses(ForwardLosses& fl, const Batch& batch, const NetConfig& net,
                           const ParamStore& ps, const LossWeights& w, Rng& rng) {
    fl.bp = bind_params(fl.tape, ps, true);
    Var x_s = fl.tape.leaf(batch.x_s, false);
    Var x_t = fl.tape.leaf(batch.x_t, false);

    Var f_s = encode(net, fl.bp, x_s);
    GaussianCode code_s = embed(net, fl.bp, f_s, Mode::train, &rng);
    ClassifierOut clf_s = classify(net, fl.bp, code_s.z);

    Var f_t = encode(net, fl.bp, x_t);
    GaussianCode code_t = embed(net, fl.bp, f_t, Mode::train, &rng);
    ClassifierOut clf_t = classify(net, fl.bp, code_t.z);

    PseudoLabels pseudo = PseudoLabels::from_probs(clf_t.p.value());

    if (w.lambda1 != 0.0) fl.losses.ce = loss_ce(clf_s.g, batch.y_s);
    if (w.lambda2 != 0.0) {
        fl.losses.prior = loss_prior(code_s.mu, code_s.logvar, code_t.mu, code_t.logvar);
    }
    if (w.lambda3 != 0.0) fl.losses.metric = loss_metric(code_s.z, batch.y_s, code_t.z, pseudo);
    if (w.lambda4 != 0.0) {
        Var zhat_s = reconstruct(net, fl.bp, code_s.z);
        Var zhat_t = reconstruct(net, fl.bp, code_t.z);
        fl.losses.rec = loss_rec(f_s, zhat_s, f_t, zhat_t);
    }
    if (w.lambda5 != 0.0) fl.losses.classdist = loss_classdist(clf_s.g, batch.y_s, clf_t.g, pseudo, w.tau1);
    if (w.lambda6 != 0.0) fl.losses.entropy = loss_entropy(clf_t.p);

    fl.obj = objectives(fl.tape, fl.losses, w);
}

inline void record_losses(StepReport& report, const ForwardLosses& fl) {
    auto value_or_zero = [](const std::optional<Var>& v) {
        return v ? v->value().value() : 0.0;
    };
    report.ce = value_or_zero(fl.losses.ce);
    report.prior = value_or_zero(fl.losses.prior);
    report.metric = value_or_zero(fl.losses.metric);
    report.rec = value_or_zero(fl.losses.rec);
    report.classdist = value_or_zero(fl.losses.classdist);
    report.entropy = value_or_zero(fl.losses.entropy);
    report.objective_main = fl.obj.main.value().value();
    report.objective_proto = fl.obj.proto.value().value();
}

inline double group_grad_norm(const ParamStore& ps, ParamGroup group,
                              const std::vector<Tensor>& grads) {
    double ss = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (ps.entry(i).group != group) continue;
        for (std::size_t k = 0; k < grads[i].size(); ++k) ss += grads[i][k] * grads[i][k];
    }
    return std::sqrt(ss);
}

inline std::vector<Tensor> collect_grads(const ForwardLosses& fl, const Gradients& g) {
    std::vector<Tensor> out;
    out.reserve(fl.bp.vars.size());
    for (Var v : fl.bp.vars) out.push_back(g.of(v));
    return out;
}

} // namespace detail

// One optimization step of the alternating objective: the prototype weights
// descend proto = L - l6 Lh while everything else descends main = L + l6 Lh.
inline StepReport train_step(const Batch& batch, const NetConfig& net, ParamStore& ps,
                             MomentumState& state, const LossWeights& w,
                             const OptConfig& cfg, Rng& rng) {
    StepReport report;

    if (cfg.strict_alternate) {
        {
            detail::ForwardLosses fl;
            detail::forward_losses(fl, batch, net, ps, w, rng);
            Gradients g_proto = fl.tape.backward(fl.obj.proto);
            std::vector<Tensor> grads = detail::collect_grads(fl, g_proto);
            report.grad_norm_proto = detail::group_grad_norm(ps, ParamGroup::prototype, grads);
            sgd_step(ps, ParamGroup::prototype, grads, state, cfg);
        }
        detail::ForwardLosses fl;
        detail::forward_losses(fl, batch, net, ps, w, rng);
        Gradients g_main = fl.tape.backward(fl.obj.main);
        std::vector<Tensor> grads = detail::collect_grads(fl, g_main);
        report.grad_norm_main = detail::group_grad_norm(ps, ParamGroup::main, grads);
        detail::record_losses(report, fl);
        sgd_step(ps, ParamGroup::main, grads, state, cfg);
        return report;
    }

    detail::ForwardLosses fl;
    detail::forward_losses(fl, batch, net, ps, w, rng);
    detail::record_losses(report, fl);

    Gradients g_main = fl.tape.backward(fl.obj.main);
    Gradients g_proto = fl.tape.backward(fl.obj.proto);
    std::vector<Tensor> main_grads = detail::collect_grads(fl, g_main);
    std::vector<Tensor> proto_grads = detail::collect_grads(fl, g_proto);
    report.grad_norm_main = detail::group_grad_norm(ps, ParamGroup::main, main_grads);
    report.grad_norm_proto = detail::group_grad_norm(ps, ParamGroup::prototype, proto_grads);

    // Validate both groups before either mutates, so a bad step leaves the
    // parameters untouched.
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const bool is_proto = ps.entry(i).group == ParamGroup::prototype;
        const Tensor& g = is_proto ? proto_grads[i] : main_grads[i];
        if (!g.all_finite()) {
            throw NumericError("non-finite gradient for " + ps.entry(i).name);
        }
    }
    sgd_step(ps, ParamGroup::main, main_grads, state, cfg);
    sgd_step(ps, ParamGroup::prototype, proto_grads, state, cfg);
    return report;
}

} // namespace metfa
