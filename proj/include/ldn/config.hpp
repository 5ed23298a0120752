#pragma once

// JSON run configuration: a "model" section and a "train" section,
// command-line overrides as dotted key=value pairs, defaults only for
// absent keys, and rejection of unknown keys.

#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ldn/model.hpp"
#include "ldn/train.hpp"

namespace ldn {

struct CliConfig {
    ModelConfig model;
    TrainConfig train;
};

namespace detail {

inline const std::set<std::string>& model_keys() {
    static const std::set<std::string> keys = {"vocab_size", "d",          "L_layers", "T_max",
                                               "num_classes", "mask_mode", "psi_hidden", "use_norm",
                                               "seed"};
    return keys;
}

inline const std::set<std::string>& train_keys() {
    static const std::set<std::string> keys = {"task",        "T",    "steps",        "batch_size",
                                               "lr",          "betas", "eps",         "weight_decay",
                                               "eval_every",  "seed", "cosine_lr"};
    return keys;
}

inline void reject_unknown(const nlohmann::json& section, const std::set<std::string>& known,
                           const std::string& prefix) {
    for (auto it = section.begin(); it != section.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("unknown key \"" + prefix + it.key() + "\"");
}

template <class T>
T get_field(const nlohmann::json& section, const std::string& key, const std::string& prefix, T fallback) {
    if (!section.contains(key)) return fallback;
    try {
        return section.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("key \"" + prefix + key + "\" has the wrong type: " + section.at(key).dump());
    }
}

} // namespace detail

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "bidirectional") return MaskMode::Bidirectional;
    if (s == "causal") return MaskMode::Causal;
    throw ConfigError("unknown mask_mode \"" + s + "\" (want bidirectional or causal)");
}

// Parses the merged JSON document. Defaults fill only absent keys;
// vocab_size, num_classes and T_max, when absent, are derived from the
// task and the training sequence length.
inline CliConfig parse_config(const nlohmann::json& root) {
    if (!root.is_object()) throw ConfigError("config root must be a JSON object");
    for (auto it = root.begin(); it != root.end(); ++it)
        if (it.key() != "model" && it.key() != "train")
            throw ConfigError("unknown key \"" + it.key() + "\" (top level allows model, train)");

    const nlohmann::json model = root.contains("model") ? root.at("model") : nlohmann::json::object();
    const nlohmann::json train = root.contains("train") ? root.at("train") : nlohmann::json::object();
    if (!model.is_object()) throw ConfigError("\"model\" must be an object");
    if (!train.is_object()) throw ConfigError("\"train\" must be an object");
    detail::reject_unknown(model, detail::model_keys(), "model.");
    detail::reject_unknown(train, detail::train_keys(), "train.");

    CliConfig cfg;
    cfg.train.task = parse_task(detail::get_field<std::string>(train, "task", "train.", "majority"));
    cfg.train.seq_len = detail::get_field<int>(train, "T", "train.", cfg.train.task == Task::Majority ? 15 : 16);
    cfg.train.steps = detail::get_field<int>(train, "steps", "train.", 3000);
    cfg.train.batch_size = detail::get_field<int>(train, "batch_size", "train.", 32);
    cfg.train.lr = detail::get_field<double>(train, "lr", "train.", 3e-3);
    if (train.contains("betas")) {
        const auto& betas = train.at("betas");
        if (!betas.is_array() || betas.size() != 2)
            throw ConfigError("key \"train.betas\" must be a 2-element array");
        cfg.train.beta1 = betas.at(0).get<double>();
        cfg.train.beta2 = betas.at(1).get<double>();
    }
    cfg.train.eps = detail::get_field<double>(train, "eps", "train.", 1e-8);
    cfg.train.weight_decay = detail::get_field<double>(train, "weight_decay", "train.", 0.0);
    cfg.train.eval_every = detail::get_field<int>(train, "eval_every", "train.", 100);
    cfg.train.seed = detail::get_field<std::uint64_t>(train, "seed", "train.", 42);
    cfg.train.cosine_lr = detail::get_field<bool>(train, "cosine_lr", "train.", false);

    cfg.model.vocab_size = detail::get_field<int>(model, "vocab_size", "model.", task_vocab(cfg.train.task));
    cfg.model.width = detail::get_field<int>(model, "d", "model.", 32);
    cfg.model.num_layers = detail::get_field<int>(model, "L_layers", "model.", 2);
    cfg.model.max_seq_len = detail::get_field<int>(model, "T_max", "model.", cfg.train.seq_len);
    cfg.model.num_classes = detail::get_field<int>(model, "num_classes", "model.", task_classes(cfg.train.task));
    cfg.model.mask = parse_mask_mode(detail::get_field<std::string>(model, "mask_mode", "model.", "bidirectional"));
    cfg.model.gate_hidden = detail::get_field<int>(model, "psi_hidden", "model.", 16);
    cfg.model.use_norm = detail::get_field<bool>(model, "use_norm", "model.", true);
    cfg.model.seed = detail::get_field<std::uint64_t>(model, "seed", "model.", 42);

    cfg.model.validate();
    cfg.train.validate();
    return cfg;
}

// Applies one "dotted.key=value" override into the JSON tree. The value
// is parsed as JSON when possible and falls back to a bare string.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
    const std::size_t eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override \"" + assignment + "\" is not of the form key=value");
    const std::string dotted = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
        value = raw;
    }
    nlohmann::json* at = &root;
    std::size_t start = 0;
    while (true) {
        const std::size_t dot = dotted.find('.', start);
        const std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
        if (part.empty()) throw ConfigError("override \"" + assignment + "\" has an empty key segment");
        if (dot == std::string::npos) {
            (*at)[part] = value;
            return;
        }
        if (!at->contains(part)) (*at)[part] = nlohmann::json::object();
        at = &(*at)[part];
        start = dot + 1;
    }
}

inline CliConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {},
                             std::optional<std::uint64_t> seed_override = {}) {
    std::ifstream file(path);
    if (!file) throw ConfigError("cannot open config file " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(file);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    for (const std::string& o : overrides) apply_override(root, o);
    if (seed_override) {
        root["model"]["seed"] = *seed_override;
        root["train"]["seed"] = *seed_override;
    }
    return parse_config(root);
}

} // namespace ldn
