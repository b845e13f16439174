// SPDX-License-Identifier: Apache-2.0
#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error (bad flags,
// invalid specs or configs), 2 runtime failure (I/O, file format, data).

#include <cstdint>
#include <fstream>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "peftvit/checkpoint.hpp"
#include "peftvit/harness.hpp"

namespace peftvit::cli {

/// Model config file: either {"preset": "vit_b16" | "desk", "num_classes": n}
/// or explicit ViTConfig fields (missing ones default to the desk preset).
inline ViTConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(path + ": expected a JSON object");
    ViTConfig c = ViTConfig::desk(10);
    try {
        if (j.contains("preset")) {
            const auto preset = j.at("preset").get<std::string>();
            if (preset == "vit_b16")
                c = ViTConfig::vit_b16(1000);
            else if (preset != "desk")
                throw ConfigError(path + ": unknown preset '" + preset + "'");
        }
        for (const auto& [key, value] : j.items()) {
            if (key == "preset") continue;
            std::size_t* field = key == "image_size"    ? &c.image_size
                                 : key == "patch_size"  ? &c.patch_size
                                 : key == "channels"    ? &c.channels
                                 : key == "dim"         ? &c.dim
                                 : key == "depth"       ? &c.depth
                                 : key == "heads"       ? &c.heads
                                 : key == "mlp_ratio"   ? &c.mlp_ratio
                                 : key == "num_classes" ? &c.num_classes
                                                        : nullptr;
            if (!field) throw ConfigError(path + ": unknown key '" + key + "'");
            *field = value.get<std::size_t>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    c.validate();
    return c;
}

/// `--data` / `--source`: "a.idx,b.idx" loads an IDX image/label pair,
/// anything else names a synthetic domain.
inline Dataset load_data_spec(const std::string& spec, std::uint64_t seed, std::size_t classes, std::size_t n,
                              const ViTConfig& model) {
    const auto comma = spec.find(',');
    if (comma != std::string::npos) return load_idx(spec.substr(0, comma), spec.substr(comma + 1), seed);
    return gen_domain(spec, seed, classes, n, model.image_size, model.channels);
}

// A malformed tag on the command line is a usage error, not bad data.
template <typename S>
S parse_tag(const std::string& tag) {
    try {
        return S::parse(tag);
    } catch (const InputError& e) {
        throw UsageError(e.what());
    }
}

inline void print_counts(std::ostream& out, const ParamCount& c) {
    out << "total " << c.total << "\n"
        << "trainable " << c.trainable << "\n";
}

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Parameter-efficient fine-tuning of Vision Transformers"};
    app.name("peftvit");
    app.require_subcommand(1);

    // count-params
    auto* count = app.add_subcommand("count-params", "Print total and trainable parameter counts");
    std::string count_config, count_strategy = "full";
    count->add_option("--config", count_config, "Model config JSON")->required();
    count->add_option("--strategy", count_strategy, "full | linear | top<k> | lora_r<r> | blockexp_p<p>");

    // init
    auto* init = app.add_subcommand("init", "Write a freshly initialized checkpoint");
    std::string init_config, init_out;
    std::uint64_t init_seed = 0;
    init->add_option("--config", init_config, "Model config JSON")->required();
    init->add_option("--seed", init_seed, "Weight seed");
    init->add_option("--out", init_out, "Output checkpoint")->required();

    // expand
    auto* expand = app.add_subcommand("expand", "Insert identity blocks (Block Expansion)");
    std::string expand_in, expand_out;
    std::size_t expand_p = 0;
    expand->add_option("--in", expand_in)->required();
    expand->add_option("--p", expand_p, "Number of inserted blocks")->required();
    expand->add_option("--out", expand_out)->required();

    // lora-attach
    auto* attach = app.add_subcommand("lora-attach", "Attach LoRA adapters to the query and value projections");
    std::string attach_in, attach_out;
    std::size_t attach_r = 8;
    double attach_alpha = -1;
    std::uint64_t attach_seed = 0;
    attach->add_option("--in", attach_in)->required();
    attach->add_option("--r", attach_r, "Rank")->required();
    attach->add_option("--alpha", attach_alpha, "Scale numerator (default: r)");
    attach->add_option("--seed", attach_seed, "Seed for the A matrices");
    attach->add_option("--out", attach_out)->required();

    // lora-merge
    auto* merge = app.add_subcommand("lora-merge", "Fold LoRA adapters into the base weights");
    std::string merge_in, merge_out;
    merge->add_option("--in", merge_in)->required();
    merge->add_option("--out", merge_out)->required();

    // verify-identity
    auto* verify = app.add_subcommand("verify-identity", "Max |logit difference| of two checkpoints on random probes");
    std::string verify_a, verify_b;
    std::size_t verify_probes = 16;
    std::uint64_t verify_seed = 0;
    verify->add_option("--a", verify_a)->required();
    verify->add_option("--b", verify_b)->required();
    verify->add_option("--probes", verify_probes)->check(CLI::PositiveNumber);
    verify->add_option("--seed", verify_seed);

    // train
    auto* trn = app.add_subcommand("train", "Fine-tune a checkpoint with its freeze mask");
    std::string train_ckpt, train_data, train_out, train_mask;
    TrainConfig tc;
    std::size_t train_n = 2000, train_classes = 0;
    trn->add_option("--ckpt", train_ckpt)->required();
    trn->add_option("--data", train_data, "Synthetic domain name or images.idx,labels.idx")->required();
    trn->add_option("--lr", tc.lr);
    trn->add_option("--steps", tc.steps);
    trn->add_option("--eval-every", tc.eval_every);
    trn->add_option("--batch-size", tc.batch_size);
    trn->add_option("--seed", tc.seed);
    trn->add_option("--n", train_n, "Synthetic domain size");
    trn->add_option("--classes", train_classes, "Synthetic class count (default: head size; a different value swaps the head)");
    trn->add_option("--mask", train_mask, "Override the stored mask: full | top_k(k) | linear | lora_only | expanded_only");
    trn->add_option("--out", train_out)->required();

    // eval-knn
    auto* knn = app.add_subcommand("eval-knn", "K-NN accuracy of a checkpoint's backbone on a domain");
    std::string knn_ckpt, knn_source;
    std::size_t knn_k = 20, knn_n = 4000, knn_classes = 0;
    std::uint64_t knn_seed = 0;
    knn->add_option("--ckpt", knn_ckpt)->required();
    knn->add_option("--source", knn_source, "Synthetic domain name or images.idx,labels.idx")->required();
    knn->add_option("--k", knn_k);
    knn->add_option("--seed", knn_seed);
    knn->add_option("--n", knn_n);
    knn->add_option("--classes", knn_classes, "Synthetic class count (default: head size)");

    // experiment / sweep
    auto* exp = app.add_subcommand("experiment", "Run the forgetting experiment and write a report");
    std::string exp_config, exp_out;
    exp->add_option("--config", exp_config, "Harness config JSON")->required();
    exp->add_option("--out", exp_out, "Report CSV (overrides the config)");
    auto* sweep = app.add_subcommand("sweep", "Run the Block Expansion learning-rate sweep");
    std::string sweep_config, sweep_out;
    sweep->add_option("--config", sweep_config, "Harness config JSON")->required();
    sweep->add_option("--out", sweep_out, "Sweep CSV (overrides the config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "peftvit: " << e.what() << "\n" << "run 'peftvit --help' for usage\n";
        return 1;
    }

    try {
        if (*count) {
            const auto config = load_model_config(count_config);
            const auto strategy = parse_tag<Strategy>(count_strategy);
            const auto base = build_vit<float>(config, 0, WeightInit::structure_only);
            const auto model = apply_surgery(base, strategy, 0);
            print_counts(out, param_count(model, build_freeze_mask(model, strategy.mask())));
        } else if (*init) {
            const auto model = build_vit<float>(load_model_config(init_config), init_seed);
            save_checkpoint(model, build_freeze_mask(model, MaskStrategy::full()), init_out);
        } else if (*expand) {
            const auto ck = load_checkpoint(expand_in);
            const auto model = expand_blocks(ck.model, ExpansionSpec{expand_p});
            const auto mask = build_freeze_mask(model, MaskStrategy::expanded_only());
            save_checkpoint(model, mask, expand_out);
            print_counts(out, param_count(model, mask));
        } else if (*attach) {
            const auto ck = load_checkpoint(attach_in);
            AdapterSpec spec = AdapterSpec::with_rank(attach_r);
            if (attach_alpha >= 0) spec.alpha = attach_alpha;
            const auto model = attach_lora(ck.model, spec, attach_seed);
            const auto mask = build_freeze_mask(model, MaskStrategy::lora_only());
            save_checkpoint(model, mask, attach_out);
            print_counts(out, param_count(model, mask));
        } else if (*merge) {
            const auto ck = load_checkpoint(merge_in);
            const auto model = merge_lora(ck.model);
            save_checkpoint(model, build_freeze_mask(model, MaskStrategy::full()), merge_out);
        } else if (*verify) {
            const auto a = load_checkpoint(verify_a);
            const auto b = load_checkpoint(verify_b);
            if (a.model.config.image_size != b.model.config.image_size ||
                a.model.config.channels != b.model.config.channels)
                throw UsageError("checkpoints take different input shapes");
            const auto probes = random_probes<float>(a.model.config, verify_probes, verify_seed);
            out << verify_identity(a.model, b.model, probes) << "\n";
        } else if (*trn) {
            auto ck = load_checkpoint(train_ckpt);
            const std::size_t classes = train_classes ? train_classes : ck.model.config.num_classes;
            const auto data = load_data_spec(train_data, tc.seed, classes, train_n, ck.model.config);
            if (data.num_classes != ck.model.config.num_classes)
                replace_head(ck.model, data.num_classes, derive_seed(tc.seed, "head"));
            const auto mask =
                build_freeze_mask(ck.model, train_mask.empty() ? ck.mask.strategy : parse_tag<MaskStrategy>(train_mask));
            auto history = train(ck.model, mask, data, tc);
            for (const auto& p : history.points)
                out << "step " << p.step << " val_accuracy " << p.val_accuracy << " loss " << p.loss << "\n";
            const auto& best = history.best_snapshot ? *history.best_snapshot : ck.model;
            if (history.best_snapshot) out << "best_step " << history.best_step << "\n";
            save_checkpoint(best, mask, train_out);
        } else if (*knn) {
            const auto ck = load_checkpoint(knn_ckpt);
            const std::size_t classes = knn_classes ? knn_classes : ck.model.config.num_classes;
            const auto data = load_data_spec(knn_source, knn_seed, classes, knn_n, ck.model.config);
            out << detail::format_hundredths(detail::hundredths(detail::percent(knn_accuracy(ck.model, data, knn_k))))
                << "\n";
        } else if (*exp) {
            auto config = load_harness_config(exp_config);
            if (!exp_out.empty()) config.output = exp_out;
            run_harness_experiment(config);
            out << "wrote " << config.output << " and " << sidecar_path(config.output).string() << "\n";
        } else if (*sweep) {
            auto config = load_harness_config(sweep_config);
            if (!sweep_out.empty()) config.output = sweep_out;
            run_harness_sweep(config);
            out << "wrote " << config.output << " and " << sidecar_path(config.output).string() << "\n";
        }
    } catch (const UsageError& e) {
        err << "peftvit: " << e.what() << "\n";
        return 1;
    } catch (const SpecError& e) {
        err << "peftvit: " << e.what() << "\n";
        return 1;
    } catch (const ConfigError& e) {
        err << "peftvit: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        err << "peftvit: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace peftvit::cli
