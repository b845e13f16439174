// SPDX-License-Identifier: Apache-2.0
#pragma once

// JSON-configured end-to-end runs: build the two domains, train the base
// model on the source domain (or load it), then run the forgetting
// experiment or the learning-rate sweep.

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peftvit/checkpoint.hpp"
#include "peftvit/data.hpp"
#include "peftvit/experiment.hpp"
#include "peftvit/report.hpp"

namespace peftvit {

struct DomainConfig {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t classes = 0;
    std::size_t n = 0;
    std::string idx_images;  // when set, load IDX files instead of generating
    std::string idx_labels;
};

struct HarnessConfig {
    ViTConfig model = ViTConfig::desk(8);
    DomainConfig source{"source", 11, 8, 4000, {}, {}};
    DomainConfig transfer{"transfer", 12, 4, 2000, {}, {}};
    std::uint64_t pretrain_seed = 42;  // weight init of the base model
    TrainConfig pretrain{0.01, 0.9, 1500, 100, 32, 5};
    TrainConfig finetune{0.05, 0.9, 2000, 100, 32, 0};
    std::string base_checkpoint;  // when set, skip pretraining and load this
    std::size_t k = 20;
    std::uint64_t seed = 7;
    std::size_t threads = 1;
    std::vector<std::string> strategies{"full", "linear", "top1", "lora_r8", "blockexp_p1", "blockexp_p2"};
    std::vector<double> lrs{0.05, 0.01, 0.005};
    std::vector<std::size_t> p_values{1, 2};
    std::string output = "report.csv";
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
    if (j.contains(key)) out = j.at(key).get<V>();
}

inline void read_domain(const nlohmann::json& j, DomainConfig& d, const std::string& where) {
    reject_unknown(j, {"name", "seed", "classes", "n", "idx_images", "idx_labels"}, where);
    read_opt(j, "name", d.name);
    read_opt(j, "seed", d.seed);
    read_opt(j, "classes", d.classes);
    read_opt(j, "n", d.n);
    read_opt(j, "idx_images", d.idx_images);
    read_opt(j, "idx_labels", d.idx_labels);
    if (d.idx_images.empty() != d.idx_labels.empty())
        throw ConfigError(where + ": idx_images and idx_labels must be given together");
}

inline void read_train(const nlohmann::json& j, TrainConfig& t, const std::string& where) {
    reject_unknown(j, {"lr", "momentum", "steps", "eval_every", "batch_size", "seed"}, where);
    read_opt(j, "lr", t.lr);
    read_opt(j, "momentum", t.momentum);
    read_opt(j, "steps", t.steps);
    read_opt(j, "eval_every", t.eval_every);
    read_opt(j, "batch_size", t.batch_size);
    read_opt(j, "seed", t.seed);
}

inline nlohmann::json domain_config_json(const DomainConfig& d) {
    nlohmann::json j{{"name", d.name}, {"seed", d.seed}, {"classes", d.classes}, {"n", d.n}};
    if (!d.idx_images.empty()) {
        j["idx_images"] = d.idx_images;
        j["idx_labels"] = d.idx_labels;
    }
    return j;
}

}  // namespace detail

/// Parses a harness config; absent keys keep their defaults, unknown keys
/// are rejected.
inline HarnessConfig parse_harness_config(const nlohmann::json& j) {
    using detail::read_opt;
    detail::reject_unknown(j,
                           {"model", "source", "transfer", "pretrain_seed", "pretrain", "finetune", "base_checkpoint",
                            "k", "seed", "threads", "strategies", "lrs", "p_values", "output"},
                           "harness config");
    HarnessConfig c;
    try {
        if (j.contains("model")) {
            const auto& m = j.at("model");
            detail::reject_unknown(m, {"image_size", "patch_size", "channels", "dim", "depth", "heads", "mlp_ratio"},
                                   "model");
            read_opt(m, "image_size", c.model.image_size);
            read_opt(m, "patch_size", c.model.patch_size);
            read_opt(m, "channels", c.model.channels);
            read_opt(m, "dim", c.model.dim);
            read_opt(m, "depth", c.model.depth);
            read_opt(m, "heads", c.model.heads);
            read_opt(m, "mlp_ratio", c.model.mlp_ratio);
        }
        if (j.contains("source")) detail::read_domain(j.at("source"), c.source, "source");
        if (j.contains("transfer")) detail::read_domain(j.at("transfer"), c.transfer, "transfer");
        read_opt(j, "pretrain_seed", c.pretrain_seed);
        if (j.contains("pretrain")) detail::read_train(j.at("pretrain"), c.pretrain, "pretrain");
        if (j.contains("finetune")) detail::read_train(j.at("finetune"), c.finetune, "finetune");
        read_opt(j, "base_checkpoint", c.base_checkpoint);
        read_opt(j, "k", c.k);
        read_opt(j, "seed", c.seed);
        read_opt(j, "threads", c.threads);
        read_opt(j, "strategies", c.strategies);
        read_opt(j, "lrs", c.lrs);
        read_opt(j, "p_values", c.p_values);
        read_opt(j, "output", c.output);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("harness config: ") + e.what());
    }
    c.model.num_classes = c.source.classes;
    c.model.validate();
    for (const auto& s : c.strategies) Strategy::parse(s);
    return c;
}

inline HarnessConfig load_harness_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_harness_config(j);
}

inline Dataset make_domain(const DomainConfig& d, std::size_t image_size, std::size_t channels) {
    if (!d.idx_images.empty()) return load_idx(d.idx_images, d.idx_labels, d.seed, d.name);
    return gen_domain(d.name, d.seed, d.classes, d.n, image_size, channels);
}

/// Everything an experiment or sweep needs: the domains and the base model.
struct HarnessSetup {
    Dataset source;
    Dataset transfer;
    ViTModel<float> base;
    std::optional<TrainHistory<float>> pretrain_history;
};

inline HarnessSetup prepare_harness(const HarnessConfig& c) {
    HarnessSetup s{make_domain(c.source, c.model.image_size, c.model.channels),
                   make_domain(c.transfer, c.model.image_size, c.model.channels),
                   {},
                   std::nullopt};
    if (!c.base_checkpoint.empty()) {
        s.base = load_checkpoint(c.base_checkpoint).model;
    } else {
        TrainHistory<float> h;
        s.base = pretrain_on_source<float>(c.model, s.source, c.pretrain, c.pretrain_seed, &h);
        s.pretrain_history = std::move(h);
    }
    return s;
}

inline ExperimentConfig experiment_config(const HarnessConfig& c) {
    ExperimentConfig e;
    e.finetune = c.finetune;
    e.k = c.k;
    e.seed = c.seed;
    e.threads = c.threads;
    return e;
}

/// Sidecar fields describing how the base model was obtained.
inline nlohmann::json harness_extra(const HarnessConfig& c, const HarnessSetup& s) {
    nlohmann::json j;
    if (!c.base_checkpoint.empty()) {
        j["base"] = {{"checkpoint", c.base_checkpoint}};
    } else {
        nlohmann::json b{{"seed", c.pretrain_seed},
                         {"train_seed", c.pretrain.seed},
                         {"train", detail::train_config_json(c.pretrain)}};
        if (s.pretrain_history) {
            b["best_step"] = s.pretrain_history->best_step;
            b["best_val_accuracy"] = s.pretrain_history->best_accuracy;
        }
        j["base"] = std::move(b);
    }
    j["domains"] = {{"source", detail::domain_config_json(c.source)},
                    {"transfer", detail::domain_config_json(c.transfer)}};
    return j;
}

inline std::vector<Strategy> parse_strategies(const std::vector<std::string>& tags) {
    std::vector<Strategy> out;
    for (const auto& t : tags) out.push_back(Strategy::parse(t));
    return out;
}

/// Full pipeline for the forgetting experiment; writes the report when
/// `write` is set.
inline ExperimentReport run_harness_experiment(const HarnessConfig& c, bool write = true) {
    const auto setup = prepare_harness(c);
    auto report = run_forgetting_experiment(setup.base, setup.source, setup.transfer, parse_strategies(c.strategies),
                                            experiment_config(c));
    if (write) emit_report(report, c.output, harness_extra(c, setup));
    return report;
}

inline SweepGrid run_harness_sweep(const HarnessConfig& c, bool write = true) {
    const auto setup = prepare_harness(c);
    auto grid = lr_sweep(setup.base, setup.source, setup.transfer, c.lrs, c.p_values, experiment_config(c));
    if (write) emit_sweep(grid, c.output, harness_extra(c, setup));
    return grid;
}

}  // namespace peftvit
