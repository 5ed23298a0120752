#pragma once

// Synthetic task generators, Adam with decoupled weight decay, the
// training loop with held-out evaluation, and binary checkpoint
// persistence.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ldn/model.hpp"

namespace ldn {

enum class Task { Majority, CopyFirst, Parity };

inline std::string to_string(Task t) {
    switch (t) {
        case Task::Majority: return "majority";
        case Task::CopyFirst: return "copy_first";
        case Task::Parity: return "parity";
    }
    return "?";
}

inline Task parse_task(const std::string& s) {
    if (s == "majority") return Task::Majority;
    if (s == "copy_first") return Task::CopyFirst;
    if (s == "parity") return Task::Parity;
    throw ConfigError("unknown task \"" + s + "\" (want majority, copy_first or parity)");
}

inline int task_vocab(Task t) { return t == Task::CopyFirst ? 8 : 2; }
inline int task_classes(Task t) { return t == Task::CopyFirst ? 8 : 2; }

struct TrainConfig {
    Task task = Task::Majority;
    int seq_len = 15; // T
    int steps = 3000;
    int batch_size = 32;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int eval_every = 100;
    std::uint64_t seed = 42;
    bool cosine_lr = false;

    void validate() const {
        if (seq_len < 2) throw ConfigError("train.T must be >= 2");
        if (steps < 0) throw ConfigError("train.steps must be >= 0");
        if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
        if (eval_every < 1) throw ConfigError("train.eval_every must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    }
};

struct TaskBatch {
    std::vector<std::vector<int>> sequences;
    std::vector<int> labels;
};

inline TaskBatch generate_task(Task task, int t_len, int batch_size, SeededRng& rng) {
    if (t_len < 2) throw InputError("generate_task: T must be >= 2");
    if (task == Task::Majority && t_len % 2 == 0)
        throw ConfigError("majority task needs odd T to avoid ties, got " + std::to_string(t_len));
    TaskBatch batch;
    batch.sequences.reserve(batch_size);
    batch.labels.reserve(batch_size);
    const int vocab = task_vocab(task);
    for (int b = 0; b < batch_size; ++b) {
        std::vector<int> seq(t_len);
        for (int& tok : seq) tok = rng.next_int(vocab);
        int label = 0;
        switch (task) {
            case Task::Majority: {
                int ones = 0;
                for (int tok : seq) ones += tok;
                label = (2 * ones > t_len) ? 1 : 0;
                break;
            }
            case Task::CopyFirst:
                label = seq.front();
                break;
            case Task::Parity: {
                int x = 0;
                for (int tok : seq) x ^= tok;
                label = x;
                break;
            }
        }
        batch.sequences.push_back(std::move(seq));
        batch.labels.push_back(label);
    }
    return batch;
}

// --- Adam -------------------------------------------------------------------

struct AdamHyper {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamState {
    Matrix m, v;
};

// Bias-corrected moments; weight decay is decoupled from the adaptive
// rescale and applied directly to the parameter.
inline void adam_step(Matrix& param, const Matrix& grad, AdamState& state, int t,
                      const AdamHyper& hyper) {
    require_same_shape(param, grad, "adam_step");
    if (t < 1) throw InputError("adam_step: step index must be >= 1");
    if (state.m.empty()) state.m = Matrix(param.rows(), param.cols());
    if (state.v.empty()) state.v = Matrix(param.rows(), param.cols());
    require_same_shape(param, state.m, "adam_step state");
    const double c1 = 1.0 - std::pow(hyper.beta1, t);
    const double c2 = 1.0 - std::pow(hyper.beta2, t);
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * grad[i];
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        param[i] -= hyper.lr * (m_hat / (std::sqrt(v_hat) + hyper.eps) + hyper.weight_decay * param[i]);
    }
}

// --- checkpoints ------------------------------------------------------------

// File layout, little-endian: magic "LDN1"; u32 tensor count; per
// tensor u32 name length, name bytes, u32 ndim, ndim u32 dims, row-major
// f64 data; then u64 step.
struct Checkpoint {
    std::map<std::string, Matrix> tensors;
    std::uint64_t step = 0;
    std::string config_echo; // in-memory note only, not part of the file format
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size())
            throw FormatError("checkpoint truncated at offset " + std::to_string(pos) + " while reading " +
                              what + " (need " + std::to_string(n) + " bytes, have " +
                              std::to_string(buf.size() - pos) + ")");
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

} // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string out;
    out += "LDN1";
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, tensor] : ckpt.tensors) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put_u32(out, 2);
        detail::put_u32(out, static_cast<std::uint32_t>(tensor.rows()));
        detail::put_u32(out, static_cast<std::uint32_t>(tensor.cols()));
        for (std::size_t i = 0; i < tensor.size(); ++i)
            detail::put_u64(out, std::bit_cast<std::uint64_t>(tensor[i]));
    }
    detail::put_u64(out, ckpt.step);
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw InputError("save_checkpoint: cannot open " + path + " for writing");
    file.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!file) throw InputError("save_checkpoint: write to " + path + " failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) throw InputError("load_checkpoint: cannot open " + path);
    std::stringstream ss;
    ss << file.rdbuf();
    const std::string buf = ss.str();
    detail::Reader r{buf};
    const std::string magic = r.bytes(4, "magic");
    if (magic != "LDN1")
        throw FormatError("checkpoint has bad magic at offset 0 (expected \"LDN1\")");
    Checkpoint ckpt;
    const std::uint32_t count = r.u32("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("tensor name length");
        const std::string name = r.bytes(name_len, "tensor name");
        const std::uint32_t ndim = r.u32("tensor rank");
        if (ndim == 0 || ndim > 8)
            throw FormatError("checkpoint tensor \"" + name + "\" has unsupported rank " +
                              std::to_string(ndim) + " at offset " + std::to_string(r.pos - 4));
        std::vector<std::uint32_t> dims(ndim);
        std::size_t numel = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            dims[d] = r.u32("tensor dim");
            numel *= dims[d];
        }
        // Everything this project writes is 2-D; accept rank-n by folding
        // trailing dims into columns.
        const int rows = static_cast<int>(dims[0]);
        const int cols = static_cast<int>(numel / dims[0]);
        Matrix tensor(rows, cols);
        for (std::size_t e = 0; e < numel; ++e)
            tensor[e] = std::bit_cast<double>(r.u64("tensor data"));
        if (ckpt.tensors.count(name))
            throw FormatError("checkpoint repeats tensor name \"" + name + "\" at offset " +
                              std::to_string(r.pos));
        ckpt.tensors.emplace(name, std::move(tensor));
    }
    ckpt.step = r.u64("step");
    if (r.pos != buf.size())
        throw FormatError("checkpoint has " + std::to_string(buf.size() - r.pos) +
                          " trailing bytes at offset " + std::to_string(r.pos));
    return ckpt;
}

inline Checkpoint checkpoint_from_params(const ModelParams& params, std::uint64_t step,
                                         std::string config_echo = {}) {
    Checkpoint ckpt;
    ckpt.step = step;
    ckpt.config_echo = std::move(config_echo);
    for_each_tensor(params, [&](const std::string& name, const Matrix& m) { ckpt.tensors.emplace(name, m); });
    return ckpt;
}

// Copies checkpoint tensors into params; every name and shape must
// match the model instantiated from the config.
inline void apply_checkpoint(const Checkpoint& ckpt, ModelParams& params) {
    std::vector<std::string> problems;
    std::set<std::string> expected;
    for_each_tensor(params, [&](const std::string& name, Matrix& m) {
        expected.insert(name);
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) {
            problems.push_back("missing tensor \"" + name + "\"");
        } else if (!it->second.same_shape(m)) {
            problems.push_back("tensor \"" + name + "\" has shape " + it->second.shape() + ", model wants " +
                               m.shape());
        } else {
            m = it->second;
        }
    });
    for (const auto& [name, tensor] : ckpt.tensors)
        if (!expected.count(name)) problems.push_back("unknown tensor name \"" + name + "\"");
    if (!problems.empty()) {
        std::string msg = "checkpoint does not match the model:";
        for (const std::string& p : problems) msg += "\n  " + p;
        throw FormatError(msg);
    }
}

// --- training loop ----------------------------------------------------------

struct MetricPoint {
    std::uint64_t step = 0;
    double loss = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
    std::vector<std::array<double, 2>> dt_per_layer; // [diffusion, attention]
};

// Per-step view handed to an optional observer: the effective rates and
// the largest realized row sums (worst sample in the batch) per layer.
struct StepObservation {
    std::uint64_t step = 0;
    std::vector<std::array<double, 2>> dt_per_layer;
    std::vector<std::array<double, 2>> max_row_sums;
};

struct TrainResult {
    std::vector<MetricPoint> metrics;
    ModelParams params;
    std::uint64_t final_step = 0;
    double final_accuracy = 0.0;
};

inline constexpr int kTrainEvalSamples = 512;

inline double eval_accuracy(const ModelParams& params, const ModelConfig& cfg, Task task, int t_len,
                            int samples, std::uint64_t eval_seed) {
    SeededRng rng(eval_seed);
    const TaskBatch batch = generate_task(task, t_len, samples, rng);
    int correct = 0;
    for (int i = 0; i < samples; ++i) {
        const Matrix logits = logits_of(params, cfg, batch.sequences[i]);
        if (argmax(logits) == batch.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / samples;
}

using StepObserver = std::function<void(const StepObservation&)>;
using MetricSink = std::function<void(const MetricPoint&)>;

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg,
                         const MetricSink& on_metric = {}, const StepObserver& observer = {}) {
    model_cfg.validate();
    train_cfg.validate();
    if (model_cfg.vocab_size < task_vocab(train_cfg.task))
        throw ConfigError("model.vocab_size " + std::to_string(model_cfg.vocab_size) + " too small for task " +
                          to_string(train_cfg.task) + " (needs " + std::to_string(task_vocab(train_cfg.task)) + ")");
    if (model_cfg.num_classes < task_classes(train_cfg.task))
        throw ConfigError("model.num_classes " + std::to_string(model_cfg.num_classes) + " too small for task " +
                          to_string(train_cfg.task) + " (needs " + std::to_string(task_classes(train_cfg.task)) + ")");
    if (train_cfg.seq_len > model_cfg.max_seq_len)
        throw ConfigError("train.T " + std::to_string(train_cfg.seq_len) + " exceeds model.T_max " +
                          std::to_string(model_cfg.max_seq_len));
    if (train_cfg.task == Task::Majority && train_cfg.seq_len % 2 == 0)
        throw ConfigError("majority task needs odd T, got " + std::to_string(train_cfg.seq_len));

    TrainResult result;
    result.params = init_params(model_cfg);
    SeededRng train_rng(train_cfg.seed);
    const std::uint64_t eval_seed = train_cfg.seed + 1;

    std::map<std::string, AdamState> adam;
    for_each_tensor(result.params, [&](const std::string& name, Matrix&) { adam[name] = AdamState{}; });

    const auto lr_at = [&](int step) {
        if (!train_cfg.cosine_lr || train_cfg.steps == 0) return train_cfg.lr;
        return train_cfg.lr * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(step) / train_cfg.steps));
    };

    const auto batch_loss_only = [&](const TaskBatch& batch) {
        double total = 0.0;
        for (std::size_t i = 0; i < batch.sequences.size(); ++i)
            total += loss_of(result.params, model_cfg, batch.sequences[i], batch.labels[i]);
        return total / static_cast<double>(batch.sequences.size());
    };

    double last_loss;
    {
        SeededRng peek = train_rng; // the first training batch, not consumed
        last_loss = batch_loss_only(generate_task(train_cfg.task, train_cfg.seq_len,
                                                  train_cfg.batch_size, peek));
    }

    const auto emit = [&](std::uint64_t step, double loss, double lr,
                          const std::vector<std::array<double, 2>>& dts) {
        MetricPoint m;
        m.step = step;
        m.loss = loss;
        m.lr = lr;
        m.dt_per_layer = dts;
        m.accuracy = eval_accuracy(result.params, model_cfg, train_cfg.task, train_cfg.seq_len,
                                   kTrainEvalSamples, eval_seed);
        result.final_accuracy = m.accuracy;
        result.metrics.push_back(m);
        if (on_metric) on_metric(m);
    };

    const auto current_dts = [&]() {
        std::vector<std::array<double, 2>> dts;
        for (const LayerParams& layer : result.params.layers) {
            const auto eff = [](const KernelParams& k) {
                return sigmoid(std::min(30.0, std::max(-30.0, k.raw_rate(0, 0))));
            };
            dts.push_back({eff(layer.diffusion), eff(layer.attention)});
        }
        return dts;
    };

    emit(0, last_loss, lr_at(0), current_dts());

    for (int step = 1; step <= train_cfg.steps; ++step) {
        const TaskBatch batch = generate_task(train_cfg.task, train_cfg.seq_len, train_cfg.batch_size,
                                              train_rng);
        Tape tape;
        const ModelVars vars = bind_params(tape, result.params);
        Var total{};
        StepObservation obs;
        obs.step = static_cast<std::uint64_t>(step);
        obs.dt_per_layer.assign(result.params.layers.size(), {0.0, 0.0});
        obs.max_row_sums.assign(result.params.layers.size(), {0.0, 0.0});
        for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
            const ModelForwardResult fwd = model_forward(tape, batch.sequences[i], vars, model_cfg);
            for (std::size_t l = 0; l < fwd.layers.size(); ++l) {
                const auto peak = [&](const KernelVars& k) {
                    double top = 0.0;
                    const Matrix& sums = tape.value(k.row_sums);
                    for (int t = 0; t < sums.rows(); ++t) top = std::max(top, sums(t, 0));
                    return top;
                };
                obs.dt_per_layer[l] = {tape.value(fwd.layers[l].diffusion.delta_t)(0, 0),
                                       tape.value(fwd.layers[l].attention.delta_t)(0, 0)};
                obs.max_row_sums[l][0] = std::max(obs.max_row_sums[l][0], peak(fwd.layers[l].diffusion));
                obs.max_row_sums[l][1] = std::max(obs.max_row_sums[l][1], peak(fwd.layers[l].attention));
            }
            Var sample_loss = cross_entropy(tape, fwd.logits, batch.labels[i]);
            total = (i == 0) ? sample_loss : tape.add(total, sample_loss);
        }
        Var loss_node = tape.scale(total, 1.0 / static_cast<double>(batch.sequences.size()));
        last_loss = tape.value(loss_node)(0, 0);
        if (!std::isfinite(last_loss)) {
            std::string dump = "training diverged: non-finite loss at step " + std::to_string(step);
            dump += "\n  per-layer delta_t [diffusion, attention]:";
            for (std::size_t l = 0; l < obs.dt_per_layer.size(); ++l)
                dump += "\n    layer " + std::to_string(l) + ": [" + std::to_string(obs.dt_per_layer[l][0]) +
                        ", " + std::to_string(obs.dt_per_layer[l][1]) + "]";
            dump += "\n  offending batch (sequence -> label):";
            for (std::size_t i = 0; i < batch.sequences.size(); ++i) {
                dump += "\n    ";
                for (int tok : batch.sequences[i]) dump += std::to_string(tok) + " ";
                dump += "-> " + std::to_string(batch.labels[i]);
            }
            throw DivergenceError(dump);
        }
        if (observer) observer(obs);
        tape.backward(loss_node);

        AdamHyper hyper{lr_at(step), train_cfg.beta1, train_cfg.beta2, train_cfg.eps,
                        train_cfg.weight_decay};
        for_each_tensor(result.params, [&](const std::string& name, Matrix& tensor) {
            adam_step(tensor, tape.grad(vars.by_name.at(name)), adam[name], step, hyper);
        });

        result.final_step = static_cast<std::uint64_t>(step);
        if (step % train_cfg.eval_every == 0 || step == train_cfg.steps)
            emit(static_cast<std::uint64_t>(step), last_loss, lr_at(step), current_dts());
    }
    return result;
}

} // namespace ldn
