#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "metfa/errors.hpp"
#include "metfa/model.hpp"
#include "metfa/tape.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

struct LossWeights {
    double lambda1 = 10.0;  // cross-entropy
    double lambda2 = 1e-2;  // prior alignment
    double lambda3 = 1e-1;  // cross-domain metric
    double lambda4 = 1.0;   // reconstruction
    double lambda5 = 10.0;  // class-distribution alignment
    double lambda6 = 5.0;   // target entropy
    double tau1 = 2.0;

    void validate() const {
        for (double l : {lambda1, lambda2, lambda3, lambda4, lambda5, lambda6}) {
            if (l < 0.0) throw ConfigError("loss weights must be >= 0");
        }
        if (!(tau1 > 0.0)) throw ConfigError("tau1 must be > 0");
    }
};

// Hard target-domain class assignments induced by the current predictions.
// No gradient flows through the assignment.
struct PseudoLabels {
    std::vector<int> yhat;
    std::vector<int> counts;

    static PseudoLabels from_probs(const Tensor& p) {
        PseudoLabels pl;
        pl.yhat = argmax_rows(p);
        pl.counts.assign(p.cols(), 0);
        for (int y : pl.yhat) pl.counts[static_cast<std::size_t>(y)] += 1;
        return pl;
    }

    std::size_t num_classes() const { return counts.size(); }
    std::size_t total() const { return yhat.size(); }
};

namespace detail {

inline std::vector<std::vector<std::size_t>> group_by_class(const std::vector<int>& labels,
                                                            std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> groups(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
            throw DomainError("label " + std::to_string(y) + " outside [0, " +
                              std::to_string(num_classes) + ")");
        }
        groups[static_cast<std::size_t>(y)].push_back(i);
    }
    return groups;
}

inline Var ones_row(Tape& tape, std::size_t n) {
    return tape.leaf(Tensor::full({1, n}, 1.0), false);
}

} // namespace detail

// Mean over the batch of -log softmax(logits)[label].
inline Var loss_ce(Var logits, const std::vector<int>& labels) {
    if (labels.empty()) throw EmptyBatchError("loss_ce on empty batch");
    const Tensor& g = logits.value();
    if (g.rank() != 2 || g.rows() != labels.size()) {
        throw ShapeError("loss_ce: logits " + shape_str(g.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = g.rows(), m = g.cols();
    Tensor onehot = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= m) {
            throw DomainError("loss_ce: label outside [0, M)");
        }
        onehot.at(i, static_cast<std::size_t>(y)) = 1.0;
    }
    Var mask = logits.tape->leaf(std::move(onehot), false);
    return scale(sum(mul(log_softmax_rows(logits), mask)), -1.0 / static_cast<double>(n));
}

namespace detail {

// Batch mean of KL(N(mu, diag e^logvar) || N(0, I)) in closed form.
inline Var gaussian_prior_kl(Var mu, Var logvar) {
    const std::size_t n = mu.value().rows();
    Var ones = mu.tape->leaf(Tensor::full(mu.value().shape(), 1.0), false);
    Var term = sub(add(square(mu), exp(logvar)), add(logvar, ones));
    return scale(sum(term), 0.5 / static_cast<double>(n));
}

} // namespace detail

inline Var loss_prior(Var mu_s, Var logvar_s, Var mu_t, Var logvar_t) {
    return add(detail::gaussian_prior_kl(mu_s, logvar_s),
               detail::gaussian_prior_kl(mu_t, logvar_t));
}

// Batch mean of ||F - Zhat||^2, summed over the two domains.
inline Var loss_rec(Var f_s, Var zhat_s, Var f_t, Var zhat_t) {
    auto one_domain = [](Var f, Var zhat) {
        const std::size_t n = f.value().rows();
        return scale(sum(square(sub(f, zhat))), 1.0 / static_cast<double>(n));
    };
    return add(one_domain(f_s, zhat_s), one_domain(f_t, zhat_t));
}

// Batch mean of -sum_i p log p with the 0 log 0 := 0 convention. Exact zeros
// in p are shifted to log(1) via a constant mask, which also zeroes their
// gradient contribution.
inline Var loss_entropy(Var probs) {
    const Tensor& p = probs.value();
    if (p.rank() != 2) throw ShapeError("loss_entropy expects (batch x M) probabilities");
    const std::size_t n = p.rows();
    Tensor zero_mask = Tensor::zeros(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] == 0.0) zero_mask[i] = 1.0;
    }
    Var shifted = add(probs, probs.tape->leaf(std::move(zero_mask), false));
    return scale(sum(mul(probs, log(shifted))), -1.0 / static_cast<double>(n));
}

// Cross-domain metric loss with hard mining: per query, the distance to its
// farthest same-class support and the nearest support of each other class,
// combined through a stable log-sum-exp. Queries are target latents grouped
// by pseudo-label; supports are source latents with ground-truth labels.
inline Var loss_metric(Var z_s, const std::vector<int>& y_s, Var z_t,
                       const PseudoLabels& pseudo) {
    const std::size_t m = pseudo.num_classes();
    if (pseudo.yhat.size() != z_t.value().rows()) {
        throw ShapeError("loss_metric: pseudo-label count does not match target batch");
    }
    const auto support = detail::group_by_class(y_s, m);
    const auto queries = detail::group_by_class(pseudo.yhat, m);

    for (std::size_t i = 0; i < m; ++i) {
        if (queries[i].empty()) continue;
        for (std::size_t k = 0; k < m; ++k) {
            if (support[k].empty()) {
                throw MissingSupportError("pseudo-class " + std::to_string(i) +
                                          " has queries but class " + std::to_string(k) +
                                          " has no source supports");
            }
        }
    }

    Tape& tape = *z_s.tape;
    const double n_queries = static_cast<double>(pseudo.total());
    std::optional<Var> total;
    for (std::size_t i = 0; i < m; ++i) {
        if (queries[i].empty()) continue;
        Var q = gather_rows(z_t, queries[i]);
        Var d_same = max_reduce(pairwise_sqdist(q, gather_rows(z_s, support[i])));

        // Row r of Y is [0, d_same - d_k1, d_same - d_k2, ...]; its row
        // log-sum-exp is the per-query log(1 + sum_k exp(.)).
        std::optional<Var> y;
        std::size_t col = 1;
        for (std::size_t k = 0; k < m; ++k) {
            if (k == i) continue;
            Var d_other = min_reduce(pairwise_sqdist(q, gather_rows(z_s, support[k])));
            Tensor unit = Tensor::zeros({1, m});
            unit[col] = 1.0;
            Var placed = matmul(sub(d_same, d_other), tape.leaf(std::move(unit), false));
            y = y ? add(*y, placed) : placed;
            ++col;
        }
        Tensor col0 = Tensor::zeros({queries[i].size(), m});
        for (std::size_t r = 0; r < queries[i].size(); ++r) col0.at(r, 0) = 1.0;
        Var lse = scale(sum(mul(log_softmax_rows(*y), tape.leaf(std::move(col0), false))),
                        -1.0);
        total = total ? add(*total, lse) : lse;
    }
    if (!total) return tape.leaf(Tensor::scalar(0.0), false);
    return scale(*total, 1.0 / n_queries);
}

// Symmetrized KL between per-class mean-logit distributions of the two
// domains, weighted by the target pseudo-label counts. Classes without
// target queries are skipped.
inline Var loss_classdist(Var g_s, const std::vector<int>& y_s, Var g_t,
                          const PseudoLabels& pseudo, double tau1) {
    if (!(tau1 > 0.0)) throw ConfigError("tau1 must be > 0");
    const std::size_t m = pseudo.num_classes();
    if (g_s.value().cols() != m || g_t.value().cols() != m) {
        throw ShapeError("loss_classdist: logit width does not match class count");
    }
    const auto src = detail::group_by_class(y_s, m);
    const auto tgt = detail::group_by_class(pseudo.yhat, m);

    Tape& tape = *g_s.tape;
    std::optional<Var> total;
    for (std::size_t i = 0; i < m; ++i) {
        if (tgt[i].empty()) continue;
        if (src[i].empty()) {
            throw MissingSupportError("class " + std::to_string(i) +
                                      " has target queries but no source samples");
        }
        auto mean_logits = [&](Var g, const std::vector<std::size_t>& idx) {
            Var picked = gather_rows(g, idx);
            return scale(matmul(detail::ones_row(tape, idx.size()), picked),
                         1.0 / (static_cast<double>(idx.size()) * tau1));
        };
        Var a = mean_logits(g_s, src[i]);
        Var b = mean_logits(g_t, tgt[i]);
        Var pa = softmax_rows(a), la = log_softmax_rows(a);
        Var pb = softmax_rows(b), lb = log_softmax_rows(b);
        Var sym = add(sum(mul(pa, sub(la, lb))), sum(mul(pb, sub(lb, la))));
        Var weighted = scale(sym, static_cast<double>(pseudo.counts[i]));
        total = total ? add(*total, weighted) : weighted;
    }
    if (!total) return tape.leaf(Tensor::scalar(0.0), false);
    return scale(*total, 1.0 / static_cast<double>(m));
}

// The ablation ladder: each named configuration keeps a subset of the loss
// terms by zeroing the other weights.
inline const std::vector<std::string>& ablation_names() {
    static const std::vector<std::string> names = {
        "source-only", "mme-like", "metfa-1", "metfa-2", "metfa-3", "metfa-4", "metfa-5"};
    return names;
}

inline LossWeights apply_ablation_mask(LossWeights w, const std::string& name) {
    auto drop_prior = [&] { w.lambda2 = 0.0; };
    auto drop_metric = [&] { w.lambda3 = 0.0; };
    auto drop_rec = [&] { w.lambda4 = 0.0; };
    auto drop_classdist = [&] { w.lambda5 = 0.0; };
    auto drop_entropy = [&] { w.lambda6 = 0.0; };

    if (name == "source-only") {
        drop_prior(); drop_metric(); drop_rec(); drop_classdist(); drop_entropy();
    } else if (name == "mme-like") {
        drop_prior(); drop_metric(); drop_rec(); drop_classdist();
    } else if (name == "metfa-1") {
        drop_metric(); drop_rec(); drop_classdist();
    } else if (name == "metfa-2") {
        drop_rec(); drop_classdist();
    } else if (name == "metfa-3") {
        drop_rec();
    } else if (name == "metfa-4") {
        drop_classdist();
    } else if (name != "metfa-5") {
        throw ConfigError("unknown ablation config: " + name);
    }
    return w;
}

// Inputs to the combined objectives; absent terms count as zero.
struct LossSet {
    std::optional<Var> ce;
    std::optional<Var> prior;
    std::optional<Var> metric;
    std::optional<Var> rec;
    std::optional<Var> classdist;
    std::optional<Var> entropy;
};

struct Objectives {
    Var main;  // minimized over encoder, embedding, decoder, classifier trunk
    Var proto; // minimized over the prototype weights W
};

// L = l1 Lce + l2 Lprior + l3 Lm + l4 Lrec + l5 Lkl;
// main = L + l6 Lh, proto = L - l6 Lh.
inline Objectives objectives(Tape& tape, const LossSet& losses, const LossWeights& w) {
    Var total = tape.leaf(Tensor::scalar(0.0), false);
    auto accumulate = [&](const std::optional<Var>& term, double weight) {
        if (term && weight != 0.0) total = add(total, scale(*term, weight));
    };
    accumulate(losses.ce, w.lambda1);
    accumulate(losses.prior, w.lambda2);
    accumulate(losses.metric, w.lambda3);
    accumulate(losses.rec, w.lambda4);
    accumulate(losses.classdist, w.lambda5);

    Objectives obj;
    if (losses.entropy && w.lambda6 != 0.0) {
        Var weighted_h = scale(*losses.entropy, w.lambda6);
        obj.main = add(total, weighted_h);
        obj.proto = sub(total, weighted_h);
    } else {
        obj.main = total;
        obj.proto = total;
    }
    return obj;
}

} // namespace metfa
