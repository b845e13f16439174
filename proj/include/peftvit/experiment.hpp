// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "peftvit/data.hpp"
#include "peftvit/knn.hpp"
#include "peftvit/peft.hpp"
#include "peftvit/train.hpp"

namespace peftvit {

/// A fine-tuning recipe: surgery (if any) plus the matching freeze mask.
/// Tags: "full", "linear", "top<k>", "lora_r<r>", "blockexp_p<p>".
struct Strategy {
    enum class Kind { full, top_k, linear, lora, blockexp };
    Kind kind = Kind::full;
    std::size_t param = 0;

    static Strategy full() { return {Kind::full, 0}; }
    static Strategy linear() { return {Kind::linear, 0}; }
    static Strategy top_k(std::size_t k) { return {Kind::top_k, k}; }
    static Strategy lora(std::size_t r) { return {Kind::lora, r}; }
    static Strategy blockexp(std::size_t p) { return {Kind::blockexp, p}; }

    std::string tag() const {
        switch (kind) {
            case Kind::full: return "full";
            case Kind::linear: return "linear";
            case Kind::top_k: return "top" + std::to_string(param);
            case Kind::lora: return "lora_r" + std::to_string(param);
            case Kind::blockexp: return "blockexp_p" + std::to_string(param);
        }
        return "full";
    }

    static Strategy parse(const std::string& tag) {
        auto number = [&](std::size_t prefix) -> std::size_t {
            const auto digits = tag.substr(prefix);
            if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos)
                throw InputError("unknown strategy '" + tag + "'");
            return std::stoul(digits);
        };
        if (tag == "full") return full();
        if (tag == "linear") return linear();
        if (tag.rfind("blockexp_p", 0) == 0) return blockexp(number(10));
        if (tag.rfind("lora_r", 0) == 0) return lora(number(6));
        if (tag.rfind("top", 0) == 0) return top_k(number(3));
        throw InputError("unknown strategy '" + tag + "'");
    }

    MaskStrategy mask() const {
        switch (kind) {
            case Kind::full: return MaskStrategy::full();
            case Kind::linear: return MaskStrategy::linear();
            case Kind::top_k: return MaskStrategy::top_k(param);
            case Kind::lora: return MaskStrategy::lora_only();
            case Kind::blockexp: return MaskStrategy::expanded_only();
        }
        return MaskStrategy::full();
    }

    bool operator==(const Strategy&) const = default;
};

/// Applies the strategy's surgery to a copy of `base`.
template <Real T>
ViTModel<T> apply_surgery(const ViTModel<T>& base, const Strategy& s, std::uint64_t seed) {
    switch (s.kind) {
        case Strategy::Kind::lora: return attach_lora(base, AdapterSpec::with_rank(s.param), seed);
        case Strategy::Kind::blockexp: return expand_blocks(base, ExpansionSpec{s.param});
        default: return base;
    }
}

/// K-NN accuracy (fraction) of a backbone on a domain: features of the
/// training split form the index, the validation split is queried. Returns 0
/// when the backbone produces non-finite features.
template <Real T>
double knn_accuracy(const ViTModel<T>& model, const Dataset& data, std::size_t k) {
    const auto train_f = extract_features(model, data, data.train);
    for (T v : train_f.data())
        if (!std::isfinite(v)) return 0.0;
    const FeatureIndex index(train_f, data.labels_of(data.train));
    const auto preds = knn_predict(index, extract_features(model, data, data.val), k);
    return top1_accuracy(preds, data.labels_of(data.val));
}

struct ExperimentConfig {
    TrainConfig finetune;
    std::size_t k = 20;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
    std::size_t identity_probes = 16;
};

/// One strategy's outcome. Accuracies are percentages.
struct ExperimentRow {
    std::string strategy;
    std::size_t trainable_params = 0;
    std::size_t total_params = 0;
    double transfer_acc = 0;
    double source_acc = 0;
    double mean = 0;
    double drop = 0;
    double first_window_source_acc = 0;  // source K-NN accuracy at the first eval point
    std::size_t best_step = 0;
    double identity_gap = 0;  // max |logit change| caused by the surgery, before training
    std::vector<EvalPoint> history;
};

struct DomainInfo {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t num_classes = 0;
    std::size_t n = 0;

    static DomainInfo of(const Dataset& d) { return {d.name, d.seed, d.num_classes, d.size()}; }
};

struct ExperimentReport {
    std::vector<ExperimentRow> rows;
    double baseline_source_acc = 0;  // percent, untouched backbone
    ExperimentConfig config;
    ViTConfig model;
    DomainInfo source;
    DomainInfo transfer;
};

namespace detail {

// Runs task(i) for i in [0, n) on up to `threads` workers. Results are
// written by index, so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) task(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    task(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline double percent(double fraction) { return 100.0 * fraction; }

}  // namespace detail

/// Fine-tunes one strategy on the transfer domain and measures what the
/// resulting backbone retained on the source domain.
template <Real T>
ExperimentRow run_strategy(const ViTModel<T>& base, const Dataset& source, const Dataset& transfer,
                           const Strategy& strategy, const ExperimentConfig& config, double baseline_percent,
                           std::uint64_t stream_seed) {
    ExperimentRow row;
    row.strategy = strategy.tag();

    ViTModel<T> model = apply_surgery(base, strategy, derive_seed(stream_seed, "surgery"));
    {
        const std::size_t probes = std::min(config.identity_probes, source.val.size());
        const auto idx = std::span<const std::size_t>(source.val).first(probes);
        row.identity_gap = verify_identity(base, model, source.batch<T>(idx));
    }
    replace_head(model, transfer.num_classes, derive_seed(stream_seed, "head"));
    const auto mask = build_freeze_mask(model, strategy.mask());
    const auto counts = param_count(model, mask);
    row.trainable_params = counts.trainable;
    row.total_params = counts.total;

    TrainConfig tc = config.finetune;
    tc.seed = derive_seed(stream_seed, "train");
    bool first = true;
    row.first_window_source_acc = baseline_percent;
    const auto history = train(model, mask, transfer, tc, [&](std::size_t, const ViTModel<T>& m) {
        if (!first) return;
        first = false;
        row.first_window_source_acc = detail::percent(knn_accuracy(m, source, config.k));
    });
    row.history = history.points;

    double source_after = baseline_percent;
    double transfer_acc = 0;
    if (history.best_snapshot) {
        row.best_step = history.best_step;
        transfer_acc = detail::percent(history.best_accuracy);
        source_after = detail::percent(knn_accuracy(*history.best_snapshot, source, config.k));
    } else {
        transfer_acc = detail::percent(evaluate(model, transfer, transfer.val));
    }
    const auto rec = forgetting_report(baseline_percent, source_after, transfer_acc);
    row.transfer_acc = rec.transfer_acc;
    row.source_acc = rec.source_acc_after;
    row.mean = rec.mean;
    row.drop = rec.drop;
    return row;
}

/// For each strategy: copy the source-trained base, apply surgery, swap in a
/// fresh transfer head, fine-tune on the transfer domain, and record the
/// best-checkpoint transfer accuracy together with the source K-NN accuracy
/// of that checkpoint's backbone. Rows follow the input strategy order.
template <Real T>
ExperimentReport run_forgetting_experiment(const ViTModel<T>& base, const Dataset& source, const Dataset& transfer,
                                           const std::vector<Strategy>& strategies, const ExperimentConfig& config) {
    if (strategies.empty()) throw InputError("no strategies requested");
    if (base.config.num_classes != source.num_classes)
        throw UsageError("base model head does not match the source domain");
    for (const auto& s : strategies) {
        if (s.kind == Strategy::Kind::top_k && (s.param < 1 || s.param > base.depth()))
            throw UsageError("strategy " + s.tag() + " incompatible with depth " + std::to_string(base.depth()));
        if (s.kind == Strategy::Kind::blockexp) {
            try {
                ExpansionSpec{s.param}.validate(base.depth());
            } catch (const SpecError& e) {
                throw UsageError("strategy " + s.tag() + ": " + e.what());
            }
        }
        if (s.kind == Strategy::Kind::lora && (s.param < 1 || base.has_lora()))
            throw UsageError("strategy " + s.tag() + " incompatible with the base model");
    }

    ExperimentReport report;
    report.config = config;
    report.model = base.config;
    report.source = DomainInfo::of(source);
    report.transfer = DomainInfo::of(transfer);
    report.baseline_source_acc = detail::percent(knn_accuracy(base, source, config.k));
    report.rows.resize(strategies.size());
    detail::parallel_for(strategies.size(), config.threads, [&](std::size_t i) {
        const auto stream = derive_seed(config.seed, strategies[i].tag(), i);
        report.rows[i] = run_strategy(base, source, transfer, strategies[i], config, report.baseline_source_acc, stream);
    });
    return report;
}

struct SweepCell {
    std::size_t p = 0;
    double lr = 0;
    std::size_t trainable_params = 0;
    std::size_t best_step = 0;
    ForgettingRecord record;
};

struct SweepGrid {
    std::vector<double> lrs;
    std::vector<std::size_t> p_values;
    std::vector<SweepCell> cells;  // p-major: cells[pi * lrs.size() + li]
    double baseline_source_acc = 0;
    ExperimentConfig config;
    ViTConfig model;
    DomainInfo source;
    DomainInfo transfer;

    const SweepCell& at(std::size_t pi, std::size_t li) const { return cells.at(pi * lrs.size() + li); }
};

/// Block Expansion learning-rate sweep over the full lrs x p_values grid.
template <Real T>
SweepGrid lr_sweep(const ViTModel<T>& base, const Dataset& source, const Dataset& transfer,
                   const std::vector<double>& lrs, const std::vector<std::size_t>& p_values,
                   const ExperimentConfig& config) {
    if (lrs.empty() || p_values.empty()) throw InputError("learning-rate sweep needs non-empty lr and p lists");
    for (auto p : p_values) ExpansionSpec{p}.validate(base.depth());
    for (auto lr : lrs)
        if (!(lr > 0)) throw InputError("sweep learning rates must be positive");

    SweepGrid grid;
    grid.lrs = lrs;
    grid.p_values = p_values;
    grid.config = config;
    grid.model = base.config;
    grid.source = DomainInfo::of(source);
    grid.transfer = DomainInfo::of(transfer);
    grid.baseline_source_acc = detail::percent(knn_accuracy(base, source, config.k));
    grid.cells.resize(lrs.size() * p_values.size());
    detail::parallel_for(grid.cells.size(), config.threads, [&](std::size_t cell) {
        const std::size_t pi = cell / lrs.size(), li = cell % lrs.size();
        const auto strategy = Strategy::blockexp(p_values[pi]);
        ExperimentConfig cc = config;
        cc.finetune.lr = lrs[li];
        const auto stream = derive_seed(config.seed, strategy.tag(), cell);
        const auto row = run_strategy(base, source, transfer, strategy, cc, grid.baseline_source_acc, stream);
        SweepCell& out = grid.cells[cell];
        out.p = p_values[pi];
        out.lr = lrs[li];
        out.trainable_params = row.trainable_params;
        out.best_step = row.best_step;
        out.record = forgetting_report(grid.baseline_source_acc, row.source_acc, row.transfer_acc);
    });
    return grid;
}

/// Supervised training of a fresh ViT on the source domain; stands in for the
/// pre-trained backbone. Returns the best validation checkpoint.
template <Real T>
ViTModel<T> pretrain_on_source(ViTConfig config, const Dataset& source, const TrainConfig& train_config,
                               std::uint64_t seed, TrainHistory<T>* history_out = nullptr) {
    config.num_classes = source.num_classes;
    auto model = build_vit<T>(config, seed);
    const auto mask = build_freeze_mask(model, MaskStrategy::full());
    auto history = train(model, mask, source, train_config);
    ViTModel<T> best = history.best_snapshot ? *history.best_snapshot : model;
    if (history_out) {
        history.best_snapshot.reset();
        *history_out = std::move(history);
    }
    return best;
}

}  // namespace peftvit
