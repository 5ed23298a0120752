#pragma once

// Content-gated diffusion kernels. A fixed temporal mask, a Gaussian
// distance decay and a learned pairwise gate multiply into raw scores;
// softplus makes them positive, the mask then zeroes the diagonal (and
// the future, in causal mode), and the rows are rescaled so the largest
// row sum is exactly 1. Together with an effective rate in (0, 1) this
// keeps every realized kernel inside the stable explicit-update regime
// by construction. The same machinery realizes both the primary
// diffusion kernel and the attention kernel; they never share
// parameters.

#include <cmath>
#include <string>

#include "ldn/matrix.hpp"
#include "ldn/tape.hpp"

namespace ldn {

enum class MaskMode { Bidirectional, Causal };

inline std::string to_string(MaskMode m) {
    return m == MaskMode::Bidirectional ? "bidirectional" : "causal";
}

// 0/1 pair admissibility; the diagonal is always 0 (it is reconstructed
// as the negative row sum downstream). Causal mode admits only s < t.
inline double temporal_mask(MaskMode mode, int t, int s) {
    if (t == s) return 0.0;
    if (mode == MaskMode::Causal && s > t) return 0.0;
    return 1.0;
}

inline Matrix mask_matrix(MaskMode mode, int t_len) {
    Matrix m(t_len, t_len);
    for (int t = 0; t < t_len; ++t)
        for (int s = 0; s < t_len; ++s) m(t, s) = temporal_mask(mode, t, s);
    return m;
}

// exp(-delta² / (2 sigma²)), in (0, 1].
inline double distance_decay(double delta, double sigma) {
    if (delta < 0.0) throw InputError("distance_decay: delta must be nonnegative");
    if (!(sigma > 0.0)) throw InputError("distance_decay: sigma must be positive");
    return std::exp(-(delta * delta) / (2.0 * sigma * sigma));
}

// One tanh hidden layer with a scalar sigmoid readout.
struct ContentGateParams {
    Matrix u; // hidden×width, applied to the target state
    Matrix v; // hidden×width, applied to the source state
    Matrix w; // hidden×1 readout
    Matrix b; // 1×1 readout bias
};

// sigmoid(wᵀ tanh(U h_t + V h_s) + b), in (0, 1).
inline double content_gate(const Matrix& h_t, const Matrix& h_s, const ContentGateParams& gate) {
    const int hidden = gate.u.rows();
    const int width = gate.u.cols();
    if (h_t.cols() != 1 || h_t.rows() != width)
        throw ShapeError("content_gate: target state wants " + shape_string(width, 1) + ", got " + h_t.shape());
    if (h_s.cols() != 1 || h_s.rows() != width)
        throw ShapeError("content_gate: source state wants " + shape_string(width, 1) + ", got " + h_s.shape());
    require_same_shape(gate.u, gate.v, "content_gate");
    if (gate.w.cols() != 1 || gate.w.rows() != hidden)
        throw ShapeError("content_gate: readout wants " + shape_string(hidden, 1) + ", got " + gate.w.shape());
    double acc = gate.b(0, 0);
    for (int i = 0; i < hidden; ++i) {
        double pre = 0.0;
        for (int j = 0; j < width; ++j) pre += gate.u(i, j) * h_t(j, 0) + gate.v(i, j) * h_s(j, 0);
        acc += gate.w(i, 0) * std::tanh(pre);
    }
    return sigmoid(acc);
}

struct KernelParams {
    Matrix raw_rate;        // 1×1; effective rate = sigmoid(clamp(raw_rate, ±30)) ∈ (0,1)
    Matrix log_decay_scale; // 1×1; decay scale = exp(log_decay_scale) > 0
    ContentGateParams gate;
    MaskMode mask = MaskMode::Bidirectional;
};

inline KernelParams init_kernel_params(int width, int gate_hidden, MaskMode mask, SeededRng& rng) {
    KernelParams p;
    p.raw_rate = Matrix(1, 1, -2.0);                 // cautious initial rate, sigmoid(-2) ≈ 0.119
    p.log_decay_scale = Matrix(1, 1, std::log(4.0)); // moderate locality
    p.gate.u = rand_normal(rng, gate_hidden, width, 0.02);
    p.gate.v = rand_normal(rng, gate_hidden, width, 0.02);
    p.gate.w = rand_normal(rng, gate_hidden, 1, 0.02);
    p.gate.b = Matrix(1, 1, 0.0);
    p.mask = mask;
    return p;
}

struct KernelParamVars {
    Var raw_rate, log_decay_scale, gate_u, gate_v, gate_w, gate_b;
    MaskMode mask = MaskMode::Bidirectional;
};

inline KernelParamVars bind_kernel_params(Tape& tape, const KernelParams& p) {
    KernelParamVars v;
    v.raw_rate = tape.leaf(p.raw_rate);
    v.log_decay_scale = tape.leaf(p.log_decay_scale);
    v.gate_u = tape.leaf(p.gate.u);
    v.gate_v = tape.leaf(p.gate.v);
    v.gate_w = tape.leaf(p.gate.w);
    v.gate_b = tape.leaf(p.gate.b);
    v.mask = p.mask;
    return v;
}

// Realized kernel on the tape: nonnegative off-diagonal weights with a
// zero diagonal, their row sums, and the effective rate.
struct KernelVars {
    Var weights;  // T×T
    Var row_sums; // T×1
    Var delta_t;  // 1×1
};

constexpr double kRowSumFloor = 1e-12;

// Raw score for t≠s is decay(|t-s|) · gate(h_t, h_s); softplus makes it
// positive, the mask is applied after softplus so masked pairs stay
// exactly zero, and a single global rescale caps the max row sum at 1.
inline KernelVars build_kernel(Tape& tape, Var h, const KernelParamVars& p) {
    const Matrix& hv = tape.value(h);
    if (!hv.all_finite()) throw InputError("build_kernel: hidden states contain non-finite entries");
    const int t_len = hv.rows();

    Var target_proj = tape.matmul(h, tape.transpose(p.gate_u)); // T×hidden, row t = U h_t
    Var source_proj = tape.matmul(h, tape.transpose(p.gate_v)); // T×hidden, row s = V h_s
    Var gate = tape.pair_gate(target_proj, source_proj, p.gate_w, p.gate_b);
    Var decay = tape.gauss_decay(p.log_decay_scale, t_len);
    Var raw = tape.mul(decay, gate);
    Var positive = tape.cwise(Unary::Softplus, raw);
    Var masked = tape.mul_const(positive, mask_matrix(p.mask, t_len));
    Var peak = tape.max_floor(tape.row_sums(masked), kRowSumFloor);
    Var weights = tape.div_scalar(masked, peak);
    Var sums = tape.row_sums(weights);
    Var delta_t = tape.cwise(Unary::Sigmoid, tape.clamp(p.raw_rate, -30.0, 30.0));
    return KernelVars{weights, sums, delta_t};
}

// Plain value snapshot, the carrier the analysis tools work on.
struct KernelOutput {
    Matrix weights;  // T×T
    Matrix row_sums; // T×1
    double delta_t_eff = 0.0;
};

inline KernelOutput snapshot(const Tape& tape, const KernelVars& k) {
    return KernelOutput{tape.value(k.weights), tape.value(k.row_sums), tape.value(k.delta_t)(0, 0)};
}

inline KernelOutput realize_kernel(const Matrix& h, const KernelParams& p) {
    Tape tape;
    const KernelParamVars pv = bind_kernel_params(tape, p);
    return snapshot(tape, build_kernel(tape, tape.leaf(h), pv));
}

} // namespace ldn
