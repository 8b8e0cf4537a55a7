#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metfa/gradcheck.hpp"
#include "metfa/losses.hpp"
#include "metfa/rng.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

struct LossGradCheck {
    std::string name;
    double max_rel_err = 0.0;
};

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stddev);
    return t;
}

inline std::vector<int> cyclic_labels(std::size_t n, std::size_t m) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % m);
    return y;
}

inline std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t m) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(rng.index(m));
    return y;
}

inline PseudoLabels make_pseudo(const std::vector<int>& yhat, std::size_t m) {
    PseudoLabels pl;
    pl.yhat = yhat;
    pl.counts.assign(m, 0);
    for (int y : yhat) pl.counts[static_cast<std::size_t>(y)] += 1;
    return pl;
}

} // namespace detail

// Finite-difference verification of each loss term on random non-degenerate
// configurations. Continuous random inputs keep the hard-mining extrema away
// from ties.
inline std::vector<LossGradCheck> verify_loss_gradients(std::size_t configs_per_loss = 10,
                                                        double h = 1e-5,
                                                        std::uint64_t seed = 2024) {
    std::vector<LossGradCheck> out;
    const std::size_t m = 4;

    auto record = [&](const std::string& name, auto make_point_and_fn) {
        LossGradCheck check{name, 0.0};
        for (std::size_t c = 0; c < configs_per_loss; ++c) {
            Rng rng(splitmix64(seed + 1000 * out.size() + c));
            auto [point, fn] = make_point_and_fn(rng);
            check.max_rel_err = std::max(check.max_rel_err, grad_check(fn, point, h));
        }
        out.push_back(check);
    };

    record("loss_ce", [&](Rng& rng) {
        std::vector<NamedTensor> point{{"logits", detail::random_tensor(rng, {8, m}, 2.0)}};
        auto labels = detail::random_labels(rng, 8, m);
        ScalarFn fn = [labels](Tape&, const std::vector<Var>& vars) {
            return loss_ce(vars[0], labels);
        };
        return std::make_pair(point, fn);
    });

    record("loss_prior", [&](Rng& rng) {
        std::vector<NamedTensor> point{{"mu_s", detail::random_tensor(rng, {5, 3})},
                                       {"logvar_s", detail::random_tensor(rng, {5, 3}, 0.7)},
                                       {"mu_t", detail::random_tensor(rng, {4, 3})},
                                       {"logvar_t", detail::random_tensor(rng, {4, 3}, 0.7)}};
        ScalarFn fn = [](Tape&, const std::vector<Var>& vars) {
            return loss_prior(vars[0], vars[1], vars[2], vars[3]);
        };
        return std::make_pair(point, fn);
    });

    record("loss_rec", [&](Rng& rng) {
        std::vector<NamedTensor> point{{"f_s", detail::random_tensor(rng, {4, 6})},
                                       {"zhat_s", detail::random_tensor(rng, {4, 6})},
                                       {"f_t", detail::random_tensor(rng, {3, 6})},
                                       {"zhat_t", detail::random_tensor(rng, {3, 6})}};
        ScalarFn fn = [](Tape&, const std::vector<Var>& vars) {
            return loss_rec(vars[0], vars[1], vars[2], vars[3]);
        };
        return std::make_pair(point, fn);
    });

    record("loss_entropy", [&](Rng& rng) {
        // Strictly interior probability rows via a softmax of random logits.
        Tensor logits = detail::random_tensor(rng, {6, m}, 1.5);
        Tensor probs = Tensor::zeros({6, m});
        for (std::size_t r = 0; r < 6; ++r) {
            double mx = logits.at(r, 0);
            for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, logits.at(r, c));
            double z = 0.0;
            for (std::size_t c = 0; c < m; ++c) z += std::exp(logits.at(r, c) - mx);
            for (std::size_t c = 0; c < m; ++c) {
                probs.at(r, c) = std::exp(logits.at(r, c) - mx) / z;
            }
        }
        std::vector<NamedTensor> point{{"probs", probs}};
        ScalarFn fn = [](Tape&, const std::vector<Var>& vars) {
            return loss_entropy(vars[0]);
        };
        return std::make_pair(point, fn);
    });

    record("loss_metric", [&](Rng& rng) {
        std::vector<NamedTensor> point{{"z_s", detail::random_tensor(rng, {3 * m, 4}, 2.0)},
                                       {"z_t", detail::random_tensor(rng, {7, 4}, 2.0)}};
        auto y_s = detail::cyclic_labels(3 * m, m);
        auto pseudo = detail::make_pseudo(detail::random_labels(rng, 7, m), m);
        ScalarFn fn = [y_s, pseudo](Tape&, const std::vector<Var>& vars) {
            return loss_metric(vars[0], y_s, vars[1], pseudo);
        };
        return std::make_pair(point, fn);
    });

    record("loss_classdist", [&](Rng& rng) {
        std::vector<NamedTensor> point{{"g_s", detail::random_tensor(rng, {3 * m, m}, 2.0)},
                                       {"g_t", detail::random_tensor(rng, {8, m}, 2.0)}};
        auto y_s = detail::cyclic_labels(3 * m, m);
        auto pseudo = detail::make_pseudo(detail::random_labels(rng, 8, m), m);
        ScalarFn fn = [y_s, pseudo](Tape&, const std::vector<Var>& vars) {
            return loss_classdist(vars[0], y_s, vars[1], pseudo, 2.0);
        };
        return std::make_pair(point, fn);
    });

    return out;
}

} // namespace metfa
