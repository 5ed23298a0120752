#pragma once

// One network layer: a diffusion step under the primary kernel, a gated
// per-token local update, a second diffusion step under the attention
// kernel, all added onto the raw residual path. Normalization, when
// enabled, is applied to the input the three modules see (pre-norm);
// the residual stays untouched.

#include <optional>

#include "ldn/kernel.hpp"
#include "ldn/matrix.hpp"
#include "ldn/tape.hpp"

namespace ldn {

struct LocalUpdateParams {
    Matrix gate_weight; // d×2d, consumes [h_t; e_t]
    Matrix gate_bias;   // d×1
    Matrix out_weight;  // d×d
    Matrix out_bias;    // d×1
};

struct NormParams {
    Matrix gamma; // d×1
    Matrix beta;  // d×1
};

struct LayerParams {
    KernelParams diffusion;
    KernelParams attention; // same machinery, independent parameters
    LocalUpdateParams local;
    std::optional<NormParams> norm;
};

inline LayerParams init_layer_params(int width, int gate_hidden, MaskMode mask, bool use_norm,
                                     SeededRng& rng) {
    LayerParams p;
    p.diffusion = init_kernel_params(width, gate_hidden, mask, rng);
    p.attention = init_kernel_params(width, gate_hidden, mask, rng);
    p.local.gate_weight = rand_normal(rng, width, 2 * width, 0.02);
    p.local.gate_bias = Matrix(width, 1, 0.0);
    p.local.out_weight = rand_normal(rng, width, width, 0.02);
    p.local.out_bias = Matrix(width, 1, 0.0);
    if (use_norm) p.norm = NormParams{Matrix(width, 1, 1.0), Matrix(width, 1, 0.0)};
    return p;
}

struct LocalUpdateVars {
    Var gate_weight, gate_bias, out_weight, out_bias;
};

struct NormVars {
    Var gamma, beta;
};

struct LayerVars {
    KernelParamVars diffusion;
    KernelParamVars attention;
    LocalUpdateVars local;
    std::optional<NormVars> norm;
};

inline LayerVars bind_layer_params(Tape& tape, const LayerParams& p) {
    LayerVars v;
    v.diffusion = bind_kernel_params(tape, p.diffusion);
    v.attention = bind_kernel_params(tape, p.attention);
    v.local.gate_weight = tape.leaf(p.local.gate_weight);
    v.local.gate_bias = tape.leaf(p.local.gate_bias);
    v.local.out_weight = tape.leaf(p.local.out_weight);
    v.local.out_bias = tape.leaf(p.local.out_bias);
    if (p.norm) v.norm = NormVars{tape.leaf(p.norm->gamma), tape.leaf(p.norm->beta)};
    return v;
}

// delta_t · (W·H − diag(row_sums)·H): row t moves toward the weighted
// average of its sources. Constant fields are annihilated.
inline Var diffusion_step(Tape& tape, Var h, const KernelVars& kernel) {
    Var mixed = tape.matmul(kernel.weights, h);
    Var drained = tape.row_scale(h, kernel.row_sums);
    return tape.mul_scalar(tape.sub(mixed, drained), kernel.delta_t);
}

// Identical contract to diffusion_step, run with the attention-side
// kernel and its own rate.
inline Var attention_diffusion(Tape& tape, Var h, const KernelVars& attn_kernel) {
    return diffusion_step(tape, h, attn_kernel);
}

// sigmoid(W_g [h_t; e_t] + b_g) ⊙ (W_o h_t + b_o), row-wise.
inline Var local_update(Tape& tape, Var embeddings, Var h, const LocalUpdateVars& p) {
    require_same_shape(tape.value(embeddings), tape.value(h), "local_update");
    Var both = tape.concat_cols(h, embeddings);
    Var gate = tape.cwise(Unary::Sigmoid,
                          tape.add_row_vec(tape.matmul(both, tape.transpose(p.gate_weight)), p.gate_bias));
    Var out = tape.add_row_vec(tape.matmul(h, tape.transpose(p.out_weight)), p.out_bias);
    return tape.mul(gate, out);
}

inline Var layernorm(Tape& tape, Var h, Var gamma, Var beta) {
    return tape.layer_norm(h, gamma, beta);
}

struct LayerForwardResult {
    Var h;
    KernelVars diffusion;
    KernelVars attention;
};

// H_out = H_in + diffusion(Z) + local(E, Z) + attention_diffusion(Z)
// where Z is the (optionally normalized) layer input. Both kernels are
// rebuilt from Z, so they are data-dependent and per-sample.
inline LayerForwardResult layer_forward(Tape& tape, Var h_in, Var embeddings, const LayerVars& p,
                                        bool use_norm) {
    if (use_norm && !p.norm)
        throw InputError("layer_forward: use_norm set but the layer has no normalization parameters");
    Var z = use_norm ? layernorm(tape, h_in, p.norm->gamma, p.norm->beta) : h_in;
    KernelVars diff_kernel = build_kernel(tape, z, p.diffusion);
    KernelVars attn_kernel = build_kernel(tape, z, p.attention);
    Var out = tape.add(tape.add(h_in, diffusion_step(tape, z, diff_kernel)),
                       tape.add(local_update(tape, embeddings, z, p.local),
                                attention_diffusion(tape, z, attn_kernel)));
    return LayerForwardResult{out, diff_kernel, attn_kernel};
}

} // namespace ldn
