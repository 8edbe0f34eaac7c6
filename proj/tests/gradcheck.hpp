#pragma once

// Central finite-difference gradient checking used across the loss and op
// tests. The numeric side re-evaluates the full forward pass and never touches
// the analytic path.

#include <cmath>
#include <functional>
#include <vector>

#include "ltp/autodiff.hpp"
#include "ltp/common.hpp"

namespace ltp::testing {

using BuildFn = std::function<Var(Tape&, const std::vector<Var>&)>;

inline double rel_err(double a, double b) {
    double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

inline GradCheckResult check_gradients(const BuildFn& build, std::vector<Tensor> inputs,
                                       double h = 1e-5, double abs_floor = 1e-9) {
    // analytic gradients
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(inputs.size());
        for (const Tensor& t : inputs) vars.push_back(tape.input(t));
        Var loss = build(tape, vars);
        tape.backward(loss);
        for (const Var& v : vars) analytic.push_back(v.grad());
    }

    auto eval = [&](const std::vector<Tensor>& ins) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(ins.size());
        for (const Tensor& t : ins) vars.push_back(tape.constant(t));
        return build(tape, vars).val().item();
    };

    GradCheckResult res;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t j = 0; j < inputs[i].numel(); ++j) {
            std::vector<Tensor> plus = inputs, minus = inputs;
            plus[i][j] += h;
            minus[i][j] -= h;
            double numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            double a = analytic[i][j];
            if (std::abs(a) < abs_floor && std::abs(numeric) < abs_floor) {
                ++res.checked;
                continue;
            }
            res.max_rel_err = std::max(res.max_rel_err, rel_err(a, numeric));
            ++res.checked;
        }
    }
    return res;
}

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
    return t;
}

}  // namespace ltp::testing
