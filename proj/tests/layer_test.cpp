#include "ldn/layer.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace ldn;
using ldn::test::rel_err;

namespace {

// Fabricates a fixed tape-side kernel from plain values.
KernelVars fixed_kernel(Tape& tape, const Matrix& weights, double delta_t) {
    Matrix sums(weights.rows(), 1);
    for (int t = 0; t < weights.rows(); ++t)
        for (int s = 0; s < weights.cols(); ++s) sums(t, 0) += weights(t, s);
    return KernelVars{tape.leaf(weights), tape.leaf(sums), tape.leaf(Matrix(1, 1, delta_t))};
}

LayerParams random_layer(int width, int hidden, MaskMode mode, bool use_norm, SeededRng& rng) {
    LayerParams p = init_layer_params(width, hidden, mode, use_norm, rng);
    // init gives tiny gate weights; spread them out for stronger tests
    p.diffusion.gate.u = rand_normal(rng, hidden, width, 0.5);
    p.diffusion.gate.v = rand_normal(rng, hidden, width, 0.5);
    p.diffusion.gate.w = rand_normal(rng, hidden, 1, 0.5);
    p.attention.gate.u = rand_normal(rng, hidden, width, 0.5);
    p.attention.gate.v = rand_normal(rng, hidden, width, 0.5);
    p.attention.gate.w = rand_normal(rng, hidden, 1, 0.5);
    p.local.gate_weight = rand_normal(rng, width, 2 * width, 0.5);
    p.local.gate_bias = rand_normal(rng, width, 1, 0.5);
    p.local.out_weight = rand_normal(rng, width, width, 0.5);
    p.local.out_bias = rand_normal(rng, width, 1, 0.5);
    return p;
}

} // namespace

TEST(DiffusionStep, HandWorkedConsensusMove) {
    Tape tape;
    const KernelVars ker = fixed_kernel(tape, Matrix::of({{0, 1}, {1, 0}}), 0.5);
    Var h = tape.leaf(Matrix::of({{1}, {3}}));
    const Matrix delta = tape.value(diffusion_step(tape, h, ker));
    EXPECT_DOUBLE_EQ(delta(0, 0), 1.0);  // 0.5 * (3 - 1)
    EXPECT_DOUBLE_EQ(delta(1, 0), -1.0); // 0.5 * (1 - 3)
}

TEST(DiffusionStep, ConstantFieldAnnihilated) {
    SeededRng rng(40);
    Tape tape;
    const KernelVars ker = fixed_kernel(tape, elementwise(Unary::Sigmoid, rand_normal(rng, 4, 4, 1.0)), 0.7);
    Matrix constant(4, 3);
    for (int t = 0; t < 4; ++t)
        for (int j = 0; j < 3; ++j) constant(t, j) = 1.5 * (j + 1);
    Var h = tape.leaf(constant);
    EXPECT_LE(max_abs(tape.value(diffusion_step(tape, h, ker))), 1e-12);
}

TEST(DiffusionStep, FullyMaskedKernelIsNoOp) {
    Tape tape;
    const KernelVars ker = fixed_kernel(tape, Matrix(3, 3, 0.0), 0.9);
    Var h = tape.leaf(Matrix::of({{1, 2}, {3, 4}, {5, 6}}));
    EXPECT_EQ(max_abs(tape.value(diffusion_step(tape, h, ker))), 0.0);
}

TEST(LocalUpdate, HalfGateTimesIdentity) {
    Tape tape;
    LocalUpdateVars p;
    p.gate_weight = tape.leaf(Matrix(2, 4, 0.0));
    p.gate_bias = tape.leaf(Matrix(2, 1, 0.0));
    p.out_weight = tape.leaf(Matrix::identity(2));
    p.out_bias = tape.leaf(Matrix(2, 1, 0.0));
    Var h = tape.leaf(Matrix::of({{2, -4}}));
    Var e = tape.leaf(Matrix::of({{0.3, 0.9}}));
    const Matrix out = tape.value(local_update(tape, e, h, p));
    EXPECT_DOUBLE_EQ(out(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(out(0, 1), -2.0);
}

TEST(LocalUpdate, ZeroValuePathGivesZero) {
    SeededRng rng(41);
    Tape tape;
    LocalUpdateVars p;
    p.gate_weight = tape.leaf(rand_normal(rng, 3, 6, 1.0));
    p.gate_bias = tape.leaf(rand_normal(rng, 3, 1, 1.0));
    p.out_weight = tape.leaf(Matrix(3, 3, 0.0));
    p.out_bias = tape.leaf(Matrix(3, 1, 0.0));
    Var h = tape.leaf(rand_normal(rng, 4, 3, 1.0));
    Var e = tape.leaf(rand_normal(rng, 4, 3, 1.0));
    EXPECT_EQ(max_abs(tape.value(local_update(tape, e, h, p))), 0.0);
}

TEST(LocalUpdate, MatchesScalarOracle) {
    SeededRng rng(42);
    const int width = 3, t_len = 4;
    const Matrix gate_w = rand_normal(rng, width, 2 * width, 1.0);
    const Matrix gate_b = rand_normal(rng, width, 1, 1.0);
    const Matrix out_w = rand_normal(rng, width, width, 1.0);
    const Matrix out_b = rand_normal(rng, width, 1, 1.0);
    const Matrix h = rand_normal(rng, t_len, width, 1.0);
    const Matrix e = rand_normal(rng, t_len, width, 1.0);

    Tape tape;
    LocalUpdateVars p{tape.leaf(gate_w), tape.leaf(gate_b), tape.leaf(out_w), tape.leaf(out_b)};
    const Matrix got = tape.value(local_update(tape, tape.leaf(e), tape.leaf(h), p));

    for (int t = 0; t < t_len; ++t) {
        for (int i = 0; i < width; ++i) {
            double gate_pre = gate_b(i, 0);
            for (int j = 0; j < width; ++j)
                gate_pre += gate_w(i, j) * h(t, j) + gate_w(i, width + j) * e(t, j);
            double value = out_b(i, 0);
            for (int j = 0; j < width; ++j) value += out_w(i, j) * h(t, j);
            const double want = (1.0 / (1.0 + std::exp(-gate_pre))) * value;
            EXPECT_LE(std::fabs(got(t, i) - want), 1e-12);
        }
    }
}

TEST(AttentionDiffusion, ClonedParametersReproduceDiffusion) {
    SeededRng rng(43);
    LayerParams p = random_layer(4, 3, MaskMode::Bidirectional, false, rng);
    p.attention = p.diffusion; // cloned parameters, identical machinery
    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    Var h = tape.leaf(rand_normal(rng, 5, 4, 1.0));
    const KernelVars kd = build_kernel(tape, h, vars.diffusion);
    const KernelVars ka = build_kernel(tape, h, vars.attention);
    EXPECT_EQ(tape.value(diffusion_step(tape, h, kd)), tape.value(attention_diffusion(tape, h, ka)));
}

TEST(AttentionDiffusion, RateShutoff) {
    SeededRng rng(44);
    LayerParams p = random_layer(4, 3, MaskMode::Bidirectional, false, rng);
    p.attention.raw_rate = Matrix(1, 1, -1e9); // clamps to sigmoid(-30)
    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    Var h = tape.leaf(rand_normal(rng, 5, 4, 1.0));
    const KernelVars ka = build_kernel(tape, h, vars.attention);
    EXPECT_NEAR(tape.value(ka.delta_t)(0, 0), sigmoid(-30.0), 1e-18);
    EXPECT_LE(max_abs(tape.value(attention_diffusion(tape, h, ka))), 1e-12);
}

TEST(Layernorm, AnalyticRows) {
    Tape tape;
    Var gamma = tape.leaf(Matrix(2, 1, 1.0));
    Var beta = tape.leaf(Matrix(2, 1, 0.0));
    Var constant = tape.leaf(Matrix::of({{3.0, 3.0}}));
    EXPECT_EQ(max_abs(tape.value(layernorm(tape, constant, gamma, beta))), 0.0);

    Var pm = tape.leaf(Matrix::of({{1.0, -1.0}}));
    const Matrix out = tape.value(layernorm(tape, pm, gamma, beta));
    const double want = 1.0 / std::sqrt(1.0 + 1e-5);
    EXPECT_DOUBLE_EQ(out(0, 0), want);
    EXPECT_DOUBLE_EQ(out(0, 1), -want);
}

TEST(Layernorm, NormalizesRandomRows) {
    SeededRng rng(45);
    Tape tape;
    const int d = 8;
    Var gamma = tape.leaf(Matrix(d, 1, 1.0));
    Var beta = tape.leaf(Matrix(d, 1, 0.0));
    const Matrix out = tape.value(layernorm(tape, tape.leaf(rand_normal(rng, 6, d, 2.0)), gamma, beta));
    for (int t = 0; t < out.rows(); ++t) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < d; ++j) mean += out(t, j);
        mean /= d;
        for (int j = 0; j < d; ++j) var += (out(t, j) - mean) * (out(t, j) - mean);
        var /= d;
        EXPECT_LE(std::fabs(mean), 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(LayerForward, NearIdentityWhenEverythingShutOff) {
    SeededRng rng(46);
    LayerParams p = init_layer_params(3, 2, MaskMode::Bidirectional, false, rng);
    p.local.gate_weight = Matrix(3, 6, 0.0);
    p.local.out_weight = Matrix(3, 3, 0.0); // local term: 0.5 gate times zero value
    p.diffusion.raw_rate = Matrix(1, 1, -1e9);
    p.attention.raw_rate = Matrix(1, 1, -1e9);
    Matrix constant(4, 3);
    for (int t = 0; t < 4; ++t)
        for (int j = 0; j < 3; ++j) constant(t, j) = 0.7 * (j + 1);
    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    Var h = tape.leaf(constant);
    Var e = tape.leaf(rand_normal(rng, 4, 3, 1.0));
    const Matrix out = tape.value(layer_forward(tape, h, e, vars, false).h);
    EXPECT_LE(max_abs_diff(out, constant), 1e-10);
}

TEST(LayerForward, SingleTokenKeepsOnlyLocalTerm) {
    SeededRng rng(47);
    const LayerParams p = random_layer(3, 2, MaskMode::Bidirectional, false, rng);
    const Matrix h0 = rand_normal(rng, 1, 3, 1.0);
    const Matrix e0 = rand_normal(rng, 1, 3, 1.0);
    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    Var h = tape.leaf(h0);
    Var e = tape.leaf(e0);
    const Matrix out = tape.value(layer_forward(tape, h, e, vars, false).h);
    const Matrix local = tape.value(local_update(tape, e, h, vars.local));
    EXPECT_LE(max_abs_diff(out, add(h0, local)), 1e-15);
}

// Composite of the independently verified pieces, T=2, d=1: the kernel
// normalizes to [[0,1],[1,0]] when the gate readout is zero, both
// diffusion terms move the states toward each other, and the local
// term follows the scalar gate formula.
TEST(LayerForward, HandWorkedTwoTokenComposite) {
    LayerParams p;
    const auto plain_kernel = [](double raw_rate) {
        KernelParams k;
        k.raw_rate = Matrix(1, 1, raw_rate);
        k.log_decay_scale = Matrix(1, 1, 0.0);
        k.gate.u = Matrix(2, 1, 0.3);
        k.gate.v = Matrix(2, 1, -0.2);
        k.gate.w = Matrix(2, 1, 0.0); // gate pinned to 0.5
        k.gate.b = Matrix(1, 1, 0.0);
        k.mask = MaskMode::Bidirectional;
        return k;
    };
    p.diffusion = plain_kernel(0.0);  // delta_t = 0.5
    p.attention = plain_kernel(-2.0); // delta_t = sigmoid(-2)
    p.local.gate_weight = Matrix::of({{0.4, -0.6}});
    p.local.gate_bias = Matrix(1, 1, 0.1);
    p.local.out_weight = Matrix(1, 1, 1.5);
    p.local.out_bias = Matrix(1, 1, -0.2);

    const Matrix h = Matrix::of({{1.0}, {3.0}});
    const Matrix e = Matrix::of({{0.5}, {-0.5}});

    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    const Matrix got = tape.value(layer_forward(tape, tape.leaf(h), tape.leaf(e), vars, false).h);

    const double dt_attn = 1.0 / (1.0 + std::exp(2.0));
    const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    Matrix want(2, 1);
    for (int t = 0; t < 2; ++t) {
        const double other = h(1 - t, 0);
        const double diffusion = 0.5 * (other - h(t, 0));          // W = [[0,1],[1,0]]
        const double attention = dt_attn * (other - h(t, 0));
        const double gate = sig(0.4 * h(t, 0) - 0.6 * e(t, 0) + 0.1);
        const double local = gate * (1.5 * h(t, 0) - 0.2);
        want(t, 0) = h(t, 0) + diffusion + local + attention;
    }
    EXPECT_LE(max_abs_diff(got, want), 1e-12);
}

TEST(LayerForward, NormRequestWithoutParametersRejected) {
    SeededRng rng(48);
    const LayerParams p = random_layer(3, 2, MaskMode::Bidirectional, false, rng);
    Tape tape;
    const LayerVars vars = bind_layer_params(tape, p);
    Var h = tape.leaf(rand_normal(rng, 2, 3, 1.0));
    EXPECT_THROW(layer_forward(tape, h, h, vars, true), InputError);
}

TEST(LayerForward, ConstantFieldInvarianceAcrossSeeds) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        SeededRng rng(seed);
        const int t_len = 2 + rng.next_int(15);
        const int width = 2 + rng.next_int(5);
        const MaskMode mode = (seed % 2 == 0) ? MaskMode::Bidirectional : MaskMode::Causal;
        const LayerParams p = random_layer(width, 3, mode, false, rng);
        Matrix constant(t_len, width);
        const Matrix row = rand_normal(rng, 1, width, 2.0);
        for (int t = 0; t < t_len; ++t)
            for (int j = 0; j < width; ++j) constant(t, j) = row(0, j);

        Tape tape;
        const LayerVars vars = bind_layer_params(tape, p);
        Var h = tape.leaf(constant);
        const KernelVars kd = build_kernel(tape, h, vars.diffusion);
        const KernelVars ka = build_kernel(tape, h, vars.attention);
        EXPECT_LE(max_abs(tape.value(diffusion_step(tape, h, kd))), 1e-12);
        EXPECT_LE(max_abs(tape.value(attention_diffusion(tape, h, ka))), 1e-12);
    }
}

// Iterating pure diffusion with a fixed kernel: per feature column the
// token max never rises and the token min never falls.
TEST(LayerForward, PureDiffusionEnvelopesMonotone) {
    SeededRng rng(49);
    const KernelParams kp = init_kernel_params(3, 2, MaskMode::Bidirectional, rng);
    Matrix h = rand_normal(rng, 6, 3, 1.0);
    const KernelOutput fixed = realize_kernel(h, kp);

    for (int iter = 0; iter < 20; ++iter) {
        std::vector<double> hi(3, -1e300), lo(3, 1e300);
        for (int t = 0; t < 6; ++t)
            for (int j = 0; j < 3; ++j) {
                hi[j] = std::max(hi[j], h(t, j));
                lo[j] = std::min(lo[j], h(t, j));
            }
        Tape tape;
        KernelVars kv{tape.leaf(fixed.weights), tape.leaf(fixed.row_sums),
                      tape.leaf(Matrix(1, 1, fixed.delta_t_eff))};
        Var hv = tape.leaf(h);
        h = add(h, tape.value(diffusion_step(tape, hv, kv)));
        for (int t = 0; t < 6; ++t)
            for (int j = 0; j < 3; ++j) {
                EXPECT_LE(h(t, j), hi[j] + 1e-12);
                EXPECT_GE(h(t, j), lo[j] - 1e-12);
            }
    }
}

// With a kernel built once and held fixed, perturbing token s cannot
// change any strictly earlier row of H + diffusion_step(H) in causal
// mode; row s itself moves only through the residual and its own row.
TEST(LayerForward, CausalPerturbationLocalityUnderFixedKernel) {
    SeededRng rng(50);
    const int t_len = 8, width = 4;
    const KernelParams kp = init_kernel_params(width, 3, MaskMode::Causal, rng);
    const Matrix h = rand_normal(rng, t_len, width, 1.0);
    const KernelOutput fixed = realize_kernel(h, kp);

    const auto apply = [&](const Matrix& input) {
        Tape tape;
        KernelVars kv{tape.leaf(fixed.weights), tape.leaf(fixed.row_sums),
                      tape.leaf(Matrix(1, 1, fixed.delta_t_eff))};
        Var hv = tape.leaf(input);
        return add(input, tape.value(diffusion_step(tape, hv, kv)));
    };

    const Matrix base = apply(h);
    const int s = 4;
    Matrix perturbed = h;
    perturbed(s, 1) += 0.25;
    const Matrix moved = apply(perturbed);

    for (int t = 0; t < s; ++t)
        for (int j = 0; j < width; ++j) EXPECT_EQ(moved(t, j), base(t, j)) << "row " << t;
    EXPECT_GT(max_abs_diff(moved, base), 0.0);
    double row_s_change = 0.0;
    for (int j = 0; j < width; ++j) row_s_change = std::max(row_s_change, std::fabs(moved(s, j) - base(s, j)));
    EXPECT_GT(row_s_change, 0.0);
}

TEST(LayerForward, GradientsMatchFiniteDifferences) {
    SeededRng rng(51);
    const int t_len = 6, width = 8, hidden = 4;
    LayerParams params = init_layer_params(width, hidden, MaskMode::Bidirectional, true, rng);
    Matrix h0 = rand_normal(rng, t_len, width, 1.0);
    Matrix emb = rand_normal(rng, t_len, width, 1.0);
    const Matrix weighting = rand_normal(rng, t_len, width, 1.0);
    const double eps = 1e-5;

    const auto loss_plain = [&]() {
        Tape tape;
        const LayerVars vars = bind_layer_params(tape, params);
        Var out = layer_forward(tape, tape.leaf(h0), tape.leaf(emb), vars, true).h;
        return tape.value(tape.sum_all(tape.mul_const(out, weighting)))(0, 0);
    };

    Tape tape;
    const LayerVars vars = bind_layer_params(tape, params);
    Var hv = tape.leaf(h0);
    Var ev = tape.leaf(emb);
    Var loss = tape.sum_all(tape.mul_const(layer_forward(tape, hv, ev, vars, true).h, weighting));
    tape.backward(loss);

    const auto check = [&](const char* name, Matrix& tensor, Var var) {
        const Matrix ad = tape.grad(var);
        for (std::size_t e = 0; e < tensor.size(); ++e) {
            const double saved = tensor[e];
            tensor[e] = saved + eps;
            const double up = loss_plain();
            tensor[e] = saved - eps;
            const double down = loss_plain();
            tensor[e] = saved;
            EXPECT_LE(rel_err(ad[e], (up - down) / (2 * eps)), 1e-4) << name << " entry " << e;
        }
    };
    check("h0", h0, hv);
    check("emb", emb, ev);
    check("diff.raw_rate", params.diffusion.raw_rate, vars.diffusion.raw_rate);
    check("diff.log_decay_scale", params.diffusion.log_decay_scale, vars.diffusion.log_decay_scale);
    check("diff.gate.u", params.diffusion.gate.u, vars.diffusion.gate_u);
    check("diff.gate.w", params.diffusion.gate.w, vars.diffusion.gate_w);
    check("attn.raw_rate", params.attention.raw_rate, vars.attention.raw_rate);
    check("attn.gate.v", params.attention.gate.v, vars.attention.gate_v);
    check("local.gate_weight", params.local.gate_weight, vars.local.gate_weight);
    check("local.out_bias", params.local.out_bias, vars.local.out_bias);
    check("norm.gamma", params.norm->gamma, vars.norm->gamma);
    check("norm.beta", params.norm->beta, vars.norm->beta);
}
