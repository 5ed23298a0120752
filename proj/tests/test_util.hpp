#pragma once

// Shared test helpers: the relative-error convention used by every
// finite-difference comparison, and a generic central-difference check
// of tape graphs against their recorded gradients.

#include <functional>
#include <vector>

#include "ldn/matrix.hpp"
#include "ldn/tape.hpp"

namespace ldn::test {

inline double rel_err(double a, double b) {
    return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-8});
}

inline Matrix random_matrix(SeededRng& rng, int rows, int cols, double stddev = 1.0) {
    return rand_normal(rng, rows, cols, stddev);
}

// Builds loss = sum(R ⊙ f(inputs)) on a fresh tape, where R is a fixed
// random weighting that keeps every output entry in play, then checks
// each input entry's tape gradient against central differences.
// Returns the worst relative error seen.
inline double fd_check(const std::vector<Matrix>& inputs,
                       const std::function<Var(Tape&, const std::vector<Var>&)>& build,
                       double eps = 1e-5, std::uint64_t weight_seed = 7) {
    const auto loss_value = [&](const std::vector<Matrix>& ins, Matrix* weights) {
        Tape tape;
        std::vector<Var> vars;
        vars.reserve(ins.size());
        for (const Matrix& m : ins) vars.push_back(tape.leaf(m));
        Var out = build(tape, vars);
        if (weights->empty()) {
            SeededRng wrng(weight_seed);
            *weights = rand_normal(wrng, tape.value(out).rows(), tape.value(out).cols(), 1.0);
        }
        return tape.value(tape.sum_all(tape.mul_const(out, *weights)))(0, 0);
    };

    Matrix weights;
    loss_value(inputs, &weights); // fixes the weighting to the output shape

    Tape tape;
    std::vector<Var> vars;
    for (const Matrix& m : inputs) vars.push_back(tape.leaf(m));
    Var out = build(tape, vars);
    Var loss = tape.sum_all(tape.mul_const(out, weights));
    tape.backward(loss);

    double worst = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Matrix ad = tape.grad(vars[i]);
        std::vector<Matrix> probe = inputs;
        for (std::size_t e = 0; e < inputs[i].size(); ++e) {
            const double saved = probe[i][e];
            probe[i][e] = saved + eps;
            const double up = loss_value(probe, &weights);
            probe[i][e] = saved - eps;
            const double down = loss_value(probe, &weights);
            probe[i][e] = saved;
            worst = std::max(worst, rel_err(ad[e], (up - down) / (2.0 * eps)));
        }
    }
    return worst;
}

} // namespace ldn::test
