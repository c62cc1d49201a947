#pragma once

// Central finite-difference oracle for tape gradients. Test-only: it calls
// the function under test purely through forward evaluation, so it shares no
// code path with the backward sweep it verifies.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "augsearch/autodiff.hpp"

namespace augsearch::testing {

using Builder = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

inline double evaluate(const Builder& f, const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, false));
    return f(tape, vars).item();
}

inline std::vector<Tensor> analytic_grads(const Builder& f, const std::vector<Tensor>& inputs) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    ad::Var loss = f(tape, vars);
    tape.backward(loss);
    std::vector<Tensor> out;
    for (const auto& v : vars) out.push_back(tape.grad(v));
    return out;
}

inline std::vector<Tensor> numeric_grads(const Builder& f, std::vector<Tensor> inputs, double h = 1e-5) {
    std::vector<Tensor> out;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor g(inputs[k].shape());
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            inputs[k][i] = x0 + h;
            const double fp = evaluate(f, inputs);
            inputs[k][i] = x0 - h;
            const double fm = evaluate(f, inputs);
            inputs[k][i] = x0;
            g[i] = (fp - fm) / (2.0 * h);
        }
        out.push_back(std::move(g));
    }
    return out;
}

struct GradCheckResult {
    double max_rel_error = 0.0;  // over entries whose magnitude exceeds the floor
    double max_abs_error = 0.0;  // over all entries
    std::size_t checked = 0;
};

inline GradCheckResult compare_grads(const std::vector<Tensor>& analytic, const std::vector<Tensor>& numeric,
                                     double floor = 1e-8) {
    GradCheckResult r;
    for (std::size_t k = 0; k < analytic.size(); ++k)
        for (std::size_t i = 0; i < analytic[k].size(); ++i) {
            const double a = analytic[k][i];
            const double n = numeric[k][i];
            const double err = std::abs(a - n);
            r.max_abs_error = std::max(r.max_abs_error, err);
            const double mag = std::max(std::abs(a), std::abs(n));
            if (mag > floor) {
                r.max_rel_error = std::max(r.max_rel_error, err / mag);
                ++r.checked;
            }
        }
    return r;
}

inline GradCheckResult gradcheck(const Builder& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
    return compare_grads(analytic_grads(f, inputs), numeric_grads(f, inputs, h));
}

}  // namespace augsearch::testing
