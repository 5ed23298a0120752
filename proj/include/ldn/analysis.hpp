#pragma once

// Executable checks for the two kernel-level guarantees: iterated
// diffusion under a strongly connected nonnegative kernel eventually
// couples every pair of positions (powers of the effective operator
// become entrywise positive), and inside the rate bound each update is
// a convex combination of the previous states, so per-column token
// envelopes can only contract. Also hosts the model-wide gradient
// checker.

#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "ldn/kernel.hpp"
#include "ldn/matrix.hpp"
#include "ldn/model.hpp"

namespace ldn {

struct EffectiveOperator {
    Matrix a; // T×T, rows sum to 1
};

// A = I + delta_t (W − diag(row_sums)): one explicit update step. In
// the stable regime every entry is nonnegative and rows sum to 1.
inline EffectiveOperator effective_operator(const KernelOutput& ker) {
    const int t_len = ker.weights.rows();
    if (ker.weights.cols() != t_len)
        throw ShapeError("effective_operator: kernel must be square, got " + ker.weights.shape());
    if (ker.row_sums.rows() != t_len || ker.row_sums.cols() != 1)
        throw ShapeError("effective_operator: row sums want " + shape_string(t_len, 1) + ", got " +
                         ker.row_sums.shape());
    EffectiveOperator op;
    op.a = scaled(ker.weights, ker.delta_t_eff);
    for (int t = 0; t < t_len; ++t) {
        const double diag = 1.0 - ker.delta_t_eff * ker.row_sums(t, 0);
        if (diag < 0.0)
            throw std::logic_error("effective_operator: negative diagonal " + std::to_string(diag) +
                                   " at row " + std::to_string(t) + "; kernel violates the rate bound");
        op.a(t, t) = diag;
    }
    return op;
}

struct DependencyReport {
    bool reached = false;
    int witness_power = -1;  // minimal L with every entry positive
    int max_power = 0;
    bool underflow = false;  // max |entry| of some power fell below 1e-250
    double min_entry_at_witness = 0.0;
};

constexpr double kPositivityThreshold = 1e-300;
constexpr double kUnderflowThreshold = 1e-250;

// Repeated multiplication until every entry of A^L clears the
// positivity threshold, or L_max powers have been tried.
inline DependencyReport global_dependency_L(const EffectiveOperator& op, int max_power) {
    if (max_power < 1) throw InputError("global_dependency_L: max_power must be >= 1");
    DependencyReport report;
    report.max_power = max_power;
    Matrix power = op.a;
    for (int l = 1; l <= max_power; ++l) {
        double min_entry = std::numeric_limits<double>::infinity();
        double max_entry = 0.0;
        for (std::size_t i = 0; i < power.size(); ++i) {
            min_entry = std::min(min_entry, power[i]);
            max_entry = std::max(max_entry, std::fabs(power[i]));
        }
        if (max_entry < kUnderflowThreshold) report.underflow = true;
        if (min_entry > kPositivityThreshold) {
            report.reached = true;
            report.witness_power = l;
            report.min_entry_at_witness = min_entry;
            return report;
        }
        if (l < max_power) power = matmul(power, op.a);
    }
    return report;
}

struct StabilityReport {
    double bound = 0.0; // min over rows with positive sum of 1/row_sum
    double delta_t_eff = 0.0;
    bool satisfied = false;
};

inline StabilityReport check_stability_bound(const KernelOutput& ker) {
    StabilityReport r;
    r.delta_t_eff = ker.delta_t_eff;
    r.bound = std::numeric_limits<double>::infinity(); // all-zero kernel: any rate is safe
    for (int t = 0; t < ker.row_sums.rows(); ++t)
        if (ker.row_sums(t, 0) > 0.0) r.bound = std::min(r.bound, 1.0 / ker.row_sums(t, 0));
    r.satisfied = r.delta_t_eff <= r.bound;
    return r;
}

// Plain-value twin of the tape-side diffusion step, used to iterate
// pure diffusion without recording anything.
inline Matrix diffusion_delta(const Matrix& h, const KernelOutput& ker) {
    if (ker.weights.cols() != h.rows())
        throw ShapeError("diffusion_delta: kernel " + ker.weights.shape() + " does not act on " + h.shape());
    Matrix delta = matmul(ker.weights, h);
    for (int t = 0; t < h.rows(); ++t)
        for (int j = 0; j < h.cols(); ++j)
            delta(t, j) = ker.delta_t_eff * (delta(t, j) - ker.row_sums(t, 0) * h(t, j));
    return delta;
}

struct EnvelopeResult {
    bool pass = true;
    int iterations = 0;
    int fail_iteration = -1;
    int fail_column = -1;
    double violation = 0.0;
    // Per-iteration envelope trace: entry i holds, per column, the max
    // and min over tokens after i iterations (entry 0 is the input).
    std::vector<std::vector<double>> max_trace;
    std::vector<std::vector<double>> min_trace;
    double final_gap = 0.0; // max over columns of (max − min) at the end
    // Largest per-iteration Frobenius-norm ratio, logged for reference:
    // the envelope argument bounds rows, not this ratio, and it can
    // legitimately exceed 1.
    double max_l2_ratio = 0.0;
};

// Iterates H ← H + diffusion_delta(H) with a fixed kernel and checks
// that, per feature column, the max over tokens never increases and the
// min never decreases.
inline EnvelopeResult envelope_contraction_test(const Matrix& h0, const KernelOutput& ker, int iters,
                                                double tol = 1e-12) {
    if (!check_stability_bound(ker).satisfied)
        throw InputError("envelope_contraction_test: kernel violates the stability bound");
    const int cols = h0.cols();
    auto envelopes = [&](const Matrix& h, std::vector<double>& hi, std::vector<double>& lo) {
        hi.assign(cols, -std::numeric_limits<double>::infinity());
        lo.assign(cols, std::numeric_limits<double>::infinity());
        for (int t = 0; t < h.rows(); ++t)
            for (int j = 0; j < cols; ++j) {
                hi[j] = std::max(hi[j], h(t, j));
                lo[j] = std::min(lo[j], h(t, j));
            }
    };
    const auto frobenius = [](const Matrix& m) {
        double s = 0.0;
        for (std::size_t i = 0; i < m.size(); ++i) s += m[i] * m[i];
        return std::sqrt(s);
    };
    EnvelopeResult r;
    r.iterations = iters;
    Matrix h = h0;
    std::vector<double> hi, lo;
    envelopes(h, hi, lo);
    r.max_trace.push_back(hi);
    r.min_trace.push_back(lo);
    double prev_norm = frobenius(h);
    for (int it = 1; it <= iters; ++it) {
        h = add(h, diffusion_delta(h, ker));
        const double norm = frobenius(h);
        if (prev_norm > 0.0) r.max_l2_ratio = std::max(r.max_l2_ratio, norm / prev_norm);
        prev_norm = norm;
        std::vector<double> nhi, nlo;
        envelopes(h, nhi, nlo);
        for (int j = 0; j < cols; ++j) {
            const double up = nhi[j] - hi[j];
            const double down = lo[j] - nlo[j];
            if (up > tol || down > tol) {
                r.pass = false;
                r.fail_iteration = it;
                r.fail_column = j;
                r.violation = std::max(up, down);
            }
        }
        hi = nhi;
        lo = nlo;
        r.max_trace.push_back(std::move(nhi));
        r.min_trace.push_back(std::move(nlo));
        if (!r.pass) break;
    }
    for (int j = 0; j < cols; ++j) r.final_gap = std::max(r.final_gap, hi[j] - lo[j]);
    return r;
}

// --- model-wide gradient checker -------------------------------------------

struct TensorGradReport {
    std::string name;
    int checked = 0;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double ad_at_worst = 0.0;
    double fd_at_worst = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    bool pass = true;
    double tol = 0.0;
    double eps = 0.0;
    std::vector<TensorGradReport> tensors;
};

struct GradCheckOptions {
    int max_entries_per_tensor = 64;          // larger tensors get a random subsample
    double pair_gate_w_grad_scale = 1.0;      // test hook, forwarded to the tape
};

// Central-difference check of every parameter tensor against the tape
// gradients. The model is re-drawn at unit-ish scale: the cautious
// training init leaves gate gradients near 1e-9, under the
// finite-difference noise floor, where relative error is meaningless.
// The loss sums cross-entropy over a few random sequences so every
// path carries signal.
inline GradCheckReport grad_check(const ModelConfig& cfg, std::uint64_t seed, double eps = 1e-5,
                                  double tol = 1e-4, const GradCheckOptions& opt = {}) {
    ModelConfig config = cfg;
    config.seed = seed;
    ModelParams params = init_params(config);
    SeededRng spread(seed);
    for_each_tensor(params, [&](const std::string&, Matrix& m) {
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * spread.next_normal();
    });

    SeededRng data_rng(seed + 1);
    constexpr int kSequences = 3;
    std::vector<std::vector<int>> token_sets(kSequences, std::vector<int>(config.max_seq_len));
    std::vector<int> labels(kSequences);
    for (int b = 0; b < kSequences; ++b) {
        for (int& t : token_sets[b]) t = data_rng.next_int(config.vocab_size);
        labels[b] = data_rng.next_int(config.num_classes);
    }

    const auto total_loss = [&](const ModelParams& p) {
        double total = 0.0;
        for (int b = 0; b < kSequences; ++b) total += loss_of(p, config, token_sets[b], labels[b]);
        return total;
    };

    // Reverse-mode gradients, one tape over all sequences.
    Tape tape;
    tape.pair_gate_w_grad_scale = opt.pair_gate_w_grad_scale;
    const ModelVars vars = bind_params(tape, params);
    Var loss{};
    for (int b = 0; b < kSequences; ++b) {
        const ModelForwardResult fwd = model_forward(tape, token_sets[b], vars, config);
        Var term = cross_entropy(tape, fwd.logits, labels[b]);
        loss = (b == 0) ? term : tape.add(loss, term);
    }
    tape.backward(loss);

    GradCheckReport report;
    report.tol = tol;
    report.eps = eps;
    SeededRng pick_rng(seed + 2);
    for_each_tensor(params, [&](const std::string& name, Matrix& tensor) {
        const Matrix ad = tape.grad(vars.by_name.at(name));
        TensorGradReport tr;
        tr.name = name;
        std::vector<std::size_t> indices;
        if (static_cast<int>(tensor.size()) <= opt.max_entries_per_tensor) {
            for (std::size_t i = 0; i < tensor.size(); ++i) indices.push_back(i);
        } else {
            std::set<std::size_t> chosen;
            while (static_cast<int>(chosen.size()) < opt.max_entries_per_tensor)
                chosen.insert(static_cast<std::size_t>(pick_rng.next_int(static_cast<int>(tensor.size()))));
            indices.assign(chosen.begin(), chosen.end());
        }
        for (std::size_t idx : indices) {
            const double saved = tensor[idx];
            tensor[idx] = saved + eps;
            const double up = total_loss(params);
            tensor[idx] = saved - eps;
            const double down = total_loss(params);
            tensor[idx] = saved;
            const double fd = (up - down) / (2.0 * eps);
            const double rel = std::fabs(ad[idx] - fd) /
                               std::max({std::fabs(ad[idx]), std::fabs(fd), 1e-8});
            if (rel > tr.max_rel_err) {
                tr.max_rel_err = rel;
                tr.worst_index = idx;
                tr.ad_at_worst = ad[idx];
                tr.fd_at_worst = fd;
            }
            ++tr.checked;
        }
        tr.pass = tr.max_rel_err <= tol;
        if (!tr.pass) report.pass = false;
        report.tensors.push_back(std::move(tr));
    });
    return report;
}

} // namespace ldn
