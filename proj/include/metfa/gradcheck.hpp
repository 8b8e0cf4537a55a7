#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "metfa/errors.hpp"
#include "metfa/tape.hpp"
#include "metfa/tensor.hpp"

namespace metfa {

struct NamedTensor {
    std::string name;
    Tensor value;
};

// A differentiable scalar function: given a tape and one leaf Var per point
// entry (same order), build the computation and return the scalar loss.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_input;
    std::size_t worst_coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::vector<NamedTensor>& point) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const auto& nt : point) vars.push_back(tape.leaf(nt.value, false));
    const double v = f(tape, vars).value().value();
    if (!std::isfinite(v)) {
        throw NumericError("non-finite value in finite-difference probe");
    }
    return v;
}

} // namespace detail

// Central-difference verification of reverse-mode gradients.
// Error metric per coordinate: |analytic - fd| / max(1, |analytic|).
inline GradCheckReport grad_check_report(const ScalarFn& f,
                                         const std::vector<NamedTensor>& point,
                                         double h = 1e-5) {
    if (h <= 0.0) throw Error("grad_check requires h > 0");

    Tape tape;
    std::vector<Var> vars;
    vars.reserve(point.size());
    for (const auto& nt : point) vars.push_back(tape.leaf(nt.value, true));
    Var loss = f(tape, vars);
    if (!loss.value().all_finite()) {
        throw NumericError("non-finite loss at grad_check point");
    }
    Gradients grads = tape.backward(loss);

    GradCheckReport report;
    std::vector<NamedTensor> probe = point;
    for (std::size_t p = 0; p < point.size(); ++p) {
        const Tensor analytic = grads.of(vars[p]);
        if (!analytic.all_finite()) {
            throw NumericError("non-finite analytic gradient for input " + point[p].name);
        }
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double saved = probe[p].value[i];
            probe[p].value[i] = saved + h;
            const double fp = detail::eval_scalar(f, probe);
            probe[p].value[i] = saved - h;
            const double fm = detail::eval_scalar(f, probe);
            probe[p].value[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double rel = std::fabs(analytic[i] - fd) /
                               std::max(1.0, std::fabs(analytic[i]));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_input = point[p].name;
                report.worst_coord = i;
                report.analytic = analytic[i];
                report.numeric = fd;
            }
        }
    }
    return report;
}

inline double grad_check(const ScalarFn& f, const std::vector<NamedTensor>& point,
                         double h = 1e-5) {
    return grad_check_report(f, point, h).max_rel_err;
}

} // namespace metfa
