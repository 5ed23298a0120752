#pragma once

// Full sequence classifier: token embedding plus sinusoidal positional
// codes, a stack of layers each with its own parameters, mean pooling
// over time and a linear head.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ldn/layer.hpp"
#include "ldn/matrix.hpp"
#include "ldn/tape.hpp"

namespace ldn {

struct ModelConfig {
    int vocab_size = 2;
    int width = 32;       // d, must be even for the sinusoidal pairing
    int num_layers = 2;
    int max_seq_len = 64;
    int num_classes = 2;
    MaskMode mask = MaskMode::Bidirectional;
    int gate_hidden = 16;
    bool use_norm = true;
    std::uint64_t seed = 42;

    void validate() const {
        if (vocab_size < 1) throw ConfigError("model.vocab_size must be >= 1");
        if (width < 1) throw ConfigError("model.d must be >= 1");
        if (width % 2 != 0) throw ConfigError("model.d must be even, got " + std::to_string(width));
        if (num_layers < 0) throw ConfigError("model.L_layers must be >= 0");
        if (max_seq_len < 1) throw ConfigError("model.T_max must be >= 1");
        if (num_classes < 1) throw ConfigError("model.num_classes must be >= 1");
        if (gate_hidden < 1) throw ConfigError("model.psi_hidden must be >= 1");
    }
};

struct HeadParams {
    Matrix weight; // num_classes×d
    Matrix bias;   // num_classes×1
};

struct ModelParams {
    Matrix embedding; // vocab_size×d
    std::vector<LayerParams> layers;
    HeadParams head;
};

inline ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    SeededRng rng(cfg.seed);
    ModelParams p;
    p.embedding = rand_normal(rng, cfg.vocab_size, cfg.width, 0.02);
    p.layers.reserve(cfg.num_layers);
    for (int i = 0; i < cfg.num_layers; ++i)
        p.layers.push_back(init_layer_params(cfg.width, cfg.gate_hidden, cfg.mask, cfg.use_norm, rng));
    p.head.weight = rand_normal(rng, cfg.num_classes, cfg.width, 0.02);
    p.head.bias = Matrix(cfg.num_classes, 1, 0.0);
    return p;
}

// Deterministic (name, tensor) walk over every learnable tensor; shared
// by the optimizer, the checkpoint writer and the gradient checker.
template <class Params, class Fn>
void for_each_tensor(Params& p, Fn&& fn) {
    fn("embedding", p.embedding);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        auto& layer = p.layers[i];
        auto kernel = [&](const std::string& side, auto& k) {
            fn(base + side + ".raw_rate", k.raw_rate);
            fn(base + side + ".log_decay_scale", k.log_decay_scale);
            fn(base + side + ".gate.u", k.gate.u);
            fn(base + side + ".gate.v", k.gate.v);
            fn(base + side + ".gate.w", k.gate.w);
            fn(base + side + ".gate.b", k.gate.b);
        };
        kernel("diff", layer.diffusion);
        kernel("attn", layer.attention);
        fn(base + "local.gate_weight", layer.local.gate_weight);
        fn(base + "local.gate_bias", layer.local.gate_bias);
        fn(base + "local.out_weight", layer.local.out_weight);
        fn(base + "local.out_bias", layer.local.out_bias);
        if (layer.norm) {
            fn(base + "norm.gamma", layer.norm->gamma);
            fn(base + "norm.beta", layer.norm->beta);
        }
    }
    fn("head.weight", p.head.weight);
    fn("head.bias", p.head.bias);
}

// Sinusoidal positional code for 0-based position t: entry 2i holds
// sin(t / 10000^(2i/d)), entry 2i+1 the matching cosine.
inline Matrix pos_enc(int t, int width) {
    if (width % 2 != 0)
        throw ConfigError("pos_enc: width must be even, got " + std::to_string(width));
    Matrix p(width, 1);
    for (int i = 0; i < width / 2; ++i) {
        const double freq = std::pow(10000.0, (2.0 * i) / width);
        p(2 * i, 0) = std::sin(t / freq);
        p(2 * i + 1, 0) = std::cos(t / freq);
    }
    return p;
}

inline Matrix pos_enc_rows(int t_len, int width) {
    Matrix table(t_len, width);
    for (int t = 0; t < t_len; ++t) {
        const Matrix col = pos_enc(t, width);
        for (int j = 0; j < width; ++j) table(t, j) = col(j, 0);
    }
    return table;
}

struct ModelVars {
    Var embedding;
    std::vector<LayerVars> layers;
    Var head_weight, head_bias;
    std::map<std::string, Var> by_name;
};

inline ModelVars bind_params(Tape& tape, const ModelParams& p) {
    ModelVars v;
    for_each_tensor(p, [&](const std::string& name, const Matrix& m) { v.by_name[name] = tape.leaf(m); });
    v.embedding = v.by_name.at("embedding");
    v.layers.resize(p.layers.size());
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        auto kernel = [&](const std::string& side, MaskMode mask) {
            KernelParamVars k;
            k.raw_rate = v.by_name.at(base + side + ".raw_rate");
            k.log_decay_scale = v.by_name.at(base + side + ".log_decay_scale");
            k.gate_u = v.by_name.at(base + side + ".gate.u");
            k.gate_v = v.by_name.at(base + side + ".gate.v");
            k.gate_w = v.by_name.at(base + side + ".gate.w");
            k.gate_b = v.by_name.at(base + side + ".gate.b");
            k.mask = mask;
            return k;
        };
        v.layers[i].diffusion = kernel("diff", p.layers[i].diffusion.mask);
        v.layers[i].attention = kernel("attn", p.layers[i].attention.mask);
        v.layers[i].local.gate_weight = v.by_name.at(base + "local.gate_weight");
        v.layers[i].local.gate_bias = v.by_name.at(base + "local.gate_bias");
        v.layers[i].local.out_weight = v.by_name.at(base + "local.out_weight");
        v.layers[i].local.out_bias = v.by_name.at(base + "local.out_bias");
        if (p.layers[i].norm)
            v.layers[i].norm = NormVars{v.by_name.at(base + "norm.gamma"), v.by_name.at(base + "norm.beta")};
    }
    v.head_weight = v.by_name.at("head.weight");
    v.head_bias = v.by_name.at("head.bias");
    return v;
}

struct EncodedInput {
    Var states;     // T×d: embedding + positional code
    Var embeddings; // T×d: raw embeddings, fed to the local update
};

inline EncodedInput encode_input(Tape& tape, std::span<const int> tokens, Var embedding_table,
                                 const ModelConfig& cfg) {
    if (tokens.empty()) throw InputError("encode_input: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
        throw InputError("encode_input: sequence length " + std::to_string(tokens.size()) +
                         " exceeds T_max " + std::to_string(cfg.max_seq_len));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || tokens[i] >= cfg.vocab_size)
            throw InputError("encode_input: token id " + std::to_string(tokens[i]) + " at index " +
                             std::to_string(i) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    Var e = tape.gather_rows(embedding_table, std::vector<int>(tokens.begin(), tokens.end()));
    Var h0 = tape.add_const(e, pos_enc_rows(static_cast<int>(tokens.size()), cfg.width));
    return EncodedInput{h0, e};
}

struct ModelForwardResult {
    Var logits; // num_classes×1
    std::vector<LayerForwardResult> layers;
    Var h0;
    Var embeddings;
};

inline ModelForwardResult model_forward(Tape& tape, std::span<const int> tokens, const ModelVars& v,
                                        const ModelConfig& cfg) {
    ModelForwardResult r;
    const EncodedInput enc = encode_input(tape, tokens, v.embedding, cfg);
    r.h0 = enc.states;
    r.embeddings = enc.embeddings;
    Var h = enc.states;
    r.layers.reserve(v.layers.size());
    for (const LayerVars& layer : v.layers) {
        LayerForwardResult lf = layer_forward(tape, h, enc.embeddings, layer, cfg.use_norm);
        h = lf.h;
        r.layers.push_back(lf);
    }
    Var pooled = tape.mean_rows(h); // d×1
    r.logits = tape.add(tape.matmul(v.head_weight, pooled), v.head_bias);
    return r;
}

// -log softmax(logits)[label], computed with max subtraction.
inline Var cross_entropy(Tape& tape, Var logits, int label) {
    return tape.softmax_xent(logits, label);
}

// --- plain-value helpers --------------------------------------------------

inline Matrix softmax(const Matrix& logits) {
    if (logits.cols() != 1) throw ShapeError("softmax: logits must be a column, got " + logits.shape());
    double top = logits(0, 0);
    for (int i = 1; i < logits.rows(); ++i) top = std::max(top, logits(i, 0));
    Matrix p(logits.rows(), 1);
    double denom = 0.0;
    for (int i = 0; i < logits.rows(); ++i) {
        p(i, 0) = std::exp(logits(i, 0) - top);
        denom += p(i, 0);
    }
    for (int i = 0; i < logits.rows(); ++i) p(i, 0) /= denom;
    return p;
}

inline int argmax(const Matrix& column) {
    int best = 0;
    for (int i = 1; i < column.rows(); ++i)
        if (column(i, 0) > column(best, 0)) best = i;
    return best;
}

inline Matrix logits_of(const ModelParams& params, const ModelConfig& cfg, std::span<const int> tokens) {
    Tape tape;
    const ModelVars v = bind_params(tape, params);
    return tape.value(model_forward(tape, tokens, v, cfg).logits);
}

inline double loss_of(const ModelParams& params, const ModelConfig& cfg, std::span<const int> tokens,
                      int label) {
    Tape tape;
    const ModelVars v = bind_params(tape, params);
    const ModelForwardResult r = model_forward(tape, tokens, v, cfg);
    return tape.value(cross_entropy(tape, r.logits, label))(0, 0);
}

} // namespace ldn
