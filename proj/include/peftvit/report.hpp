// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peftvit/error.hpp"
#include "peftvit/experiment.hpp"

namespace peftvit {

namespace detail {

// Accuracies are written as percentages with two decimals. Everything derived
// from them is computed on the printed values, in integer hundredths, so each
// CSV row satisfies mean = (transfer + source) / 2 and drop = baseline - source
// exactly as read back (the mean rounds half up).
inline std::int64_t hundredths(double percent) { return std::llround(percent * 100.0); }

inline std::string format_hundredths(std::int64_t h) {
    const bool neg = h < 0;
    const std::int64_t a = neg ? -h : h;
    std::string frac = std::to_string(a % 100);
    if (frac.size() < 2) frac.insert(0, 1, '0');
    return (neg ? "-" : "") + std::to_string(a / 100) + "." + frac;
}

inline std::int64_t mean_hundredths(std::int64_t a, std::int64_t b) {
    const std::int64_t s = a + b;
    return s >= 0 ? (s + 1) / 2 : -((-s) / 2);
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    out.close();
    if (!out) throw IoError("failed writing " + path.string());
}

inline nlohmann::json train_config_json(const TrainConfig& c) {
    return {{"lr", c.lr},
            {"momentum", c.momentum},
            {"steps", c.steps},
            {"eval_every", c.eval_every},
            {"batch_size", c.batch_size}};
}

inline nlohmann::json vit_config_json(const ViTConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"channels", c.channels},
            {"dim", c.dim},               {"depth", c.depth},           {"heads", c.heads},
            {"mlp_ratio", c.mlp_ratio},   {"num_classes", c.num_classes}};
}

inline nlohmann::json domain_json(const DomainInfo& d) {
    return {{"name", d.name}, {"seed", d.seed}, {"num_classes", d.num_classes}, {"n", d.n}};
}

}  // namespace detail

/// One formatted CSV line (without newline) for an experiment row.
inline std::string report_csv_row(const std::string& strategy, std::size_t trainable, double transfer_pct,
                                  double source_pct, double baseline_pct) {
    const auto t = detail::hundredths(transfer_pct);
    const auto s = detail::hundredths(source_pct);
    const auto b = detail::hundredths(baseline_pct);
    return strategy + "," + std::to_string(trainable) + "," + detail::format_hundredths(t) + "," +
           detail::format_hundredths(s) + "," + detail::format_hundredths(detail::mean_hundredths(t, s)) + "," +
           detail::format_hundredths(b - s);
}

inline std::string report_csv(const ExperimentReport& report) {
    if (report.rows.empty()) throw InputError("report has no rows");
    std::string out = "strategy,trainable_params,transfer_acc,source_acc,mean,drop\n";
    for (const auto& r : report.rows)
        out += report_csv_row(r.strategy, r.trainable_params, r.transfer_acc, r.source_acc, report.baseline_source_acc) +
               "\n";
    return out;
}

/// Sidecar: the full configuration plus per-row detail that does not fit the
/// CSV (total params, best step, first-window source accuracy, curves).
/// `extra` is merged in at the top level (e.g. the pretraining setup).
inline nlohmann::json report_json(const ExperimentReport& report, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j;
    j["config"] = {{"seed", report.config.seed},
                   {"k", report.config.k},
                   {"identity_probes", report.config.identity_probes},
                   {"finetune", detail::train_config_json(report.config.finetune)},
                   {"model", detail::vit_config_json(report.model)},
                   {"source", detail::domain_json(report.source)},
                   {"transfer", detail::domain_json(report.transfer)}};
    j["baseline_source_acc"] = detail::format_hundredths(detail::hundredths(report.baseline_source_acc));
    auto rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        auto curve = nlohmann::json::array();
        for (const auto& p : r.history) curve.push_back({{"step", p.step}, {"val_accuracy", p.val_accuracy}, {"loss", p.loss}});
        rows.push_back({{"strategy", r.strategy},
                        {"trainable_params", r.trainable_params},
                        {"total_params", r.total_params},
                        {"transfer_acc", detail::format_hundredths(detail::hundredths(r.transfer_acc))},
                        {"source_acc", detail::format_hundredths(detail::hundredths(r.source_acc))},
                        {"first_window_source_acc",
                         detail::format_hundredths(detail::hundredths(r.first_window_source_acc))},
                        {"best_step", r.best_step},
                        {"identity_gap", r.identity_gap},
                        {"history", std::move(curve)}});
    }
    j["rows"] = std::move(rows);
    for (const auto& [key, value] : extra.items()) j[key] = value;
    return j;
}

/// The JSON sidecar of `csv_path`: same stem, ".json" extension.
inline std::filesystem::path sidecar_path(const std::filesystem::path& csv_path) {
    auto p = csv_path;
    return p.replace_extension(".json");
}

/// Writes the CSV at `path` and the JSON sidecar next to it.
inline void emit_report(const ExperimentReport& report, const std::filesystem::path& path,
                        const nlohmann::json& extra = nlohmann::json::object()) {
    const auto csv = report_csv(report);
    detail::write_file(path, csv);
    detail::write_file(sidecar_path(path), report_json(report, extra).dump(2) + "\n");
}

inline std::string sweep_csv(const SweepGrid& grid) {
    if (grid.cells.empty()) throw InputError("sweep grid has no cells");
    const auto b = detail::hundredths(grid.baseline_source_acc);
    std::ostringstream out;
    out << "p,lr,trainable_params,transfer_acc,source_acc,mean,drop,baseline_source_acc\n";
    for (const auto& c : grid.cells) {
        const auto t = detail::hundredths(c.record.transfer_acc);
        const auto s = detail::hundredths(c.record.source_acc_after);
        out << c.p << ',' << nlohmann::json(c.lr).dump() << ',' << c.trainable_params << ','
            << detail::format_hundredths(t) << ',' << detail::format_hundredths(s) << ','
            << detail::format_hundredths(detail::mean_hundredths(t, s)) << ',' << detail::format_hundredths(b - s)
            << ',' << detail::format_hundredths(b) << '\n';
    }
    return out.str();
}

inline nlohmann::json sweep_json(const SweepGrid& grid, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j;
    j["config"] = {{"seed", grid.config.seed},
                   {"k", grid.config.k},
                   {"lrs", grid.lrs},
                   {"p_values", grid.p_values},
                   {"finetune", detail::train_config_json(grid.config.finetune)},
                   {"model", detail::vit_config_json(grid.model)},
                   {"source", detail::domain_json(grid.source)},
                   {"transfer", detail::domain_json(grid.transfer)}};
    j["baseline_source_acc"] = detail::format_hundredths(detail::hundredths(grid.baseline_source_acc));
    auto cells = nlohmann::json::array();
    for (const auto& c : grid.cells)
        cells.push_back({{"p", c.p},
                         {"lr", c.lr},
                         {"trainable_params", c.trainable_params},
                         {"best_step", c.best_step},
                         {"transfer_acc", detail::format_hundredths(detail::hundredths(c.record.transfer_acc))},
                         {"source_acc", detail::format_hundredths(detail::hundredths(c.record.source_acc_after))},
                         {"drop", detail::format_hundredths(detail::hundredths(grid.baseline_source_acc) -
                                                            detail::hundredths(c.record.source_acc_after))}});
    j["cells"] = std::move(cells);
    for (const auto& [key, value] : extra.items()) j[key] = value;
    return j;
}

inline void emit_sweep(const SweepGrid& grid, const std::filesystem::path& path,
                       const nlohmann::json& extra = nlohmann::json::object()) {
    const auto csv = sweep_csv(grid);
    detail::write_file(path, csv);
    detail::write_file(sidecar_path(path), sweep_json(grid, extra).dump(2) + "\n");
}

}  // namespace peftvit
