// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peftvit/report.hpp"

using namespace peftvit;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(item);
    return out;
}

ExperimentReport sample() {
    ExperimentReport r;
    r.baseline_source_acc = 76.11;
    r.rows.push_back({"blockexp_p3", 21340516, 0, 88.58, 74.61});
    r.rows.push_back({"full", 85875556, 0, 88.13, 25.24});
    r.rows.push_back({"linear", 76900, 0, 80.57, 76.11});
    return r;
}

}  // namespace

TEST(Report, MeanColumnUsesHalfUpRounding) {
    // Reference rows: mean == round_half_up((transfer + source) / 2).
    struct Row { double t, s; const char* mean; };
    const Row rows[] = {{88.13, 25.24, "56.69"}, {84.56, 74.15, "79.36"}, {80.57, 76.11, "78.34"},
                        {87.91, 66.82, "77.37"}, {88.27, 65.99, "77.13"}, {87.84, 65.06, "76.45"},
                        {82.72, 75.75, "79.24"}, {86.70, 75.54, "81.12"}, {88.58, 74.61, "81.60"},
                        {89.09, 72.28, "80.69"}};
    for (const auto& r : rows) {
        const auto f = split(report_csv_row("x", 1, r.t, r.s, 80.0), ',');
        EXPECT_EQ(f[4], r.mean) << r.t << " " << r.s;
    }
}

TEST(Report, CsvLayout) {
    const auto csv = report_csv(sample());
    const auto lines = split(csv, '\n');
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], "strategy,trainable_params,transfer_acc,source_acc,mean,drop");
    EXPECT_EQ(lines[1], "blockexp_p3,21340516,88.58,74.61,81.60,1.50");
    EXPECT_EQ(lines[2], "full,85875556,88.13,25.24,56.69,50.87");
    EXPECT_EQ(lines[3], "linear,76900,80.57,76.11,78.34,0.00");
}

TEST(Report, NegativeDropAndSmallValues) {
    EXPECT_EQ(report_csv_row("s", 5, 3.0, 60.5, 60.25), "s,5,3.00,60.50,31.75,-0.25");
    EXPECT_EQ(report_csv_row("s", 5, 0.0, 0.04, 0.0), "s,5,0.00,0.04,0.02,-0.04");
}

TEST(Report, EmptyReportIsAnInputError) {
    ExperimentReport r;
    EXPECT_THROW(report_csv(r), InputError);
    EXPECT_THROW(emit_report(r, "unused.csv"), InputError);
}

TEST(Report, EmitWritesCsvAndSidecarThatReloadConsistently) {
    const auto dir = fs::temp_directory_path() / "peftvit_report_test";
    fs::create_directories(dir);
    auto rep = sample();
    rep.config.seed = 7;
    rep.config.k = 20;
    rep.config.finetune.lr = 0.05;
    emit_report(rep, dir / "out.csv", {{"note", "x"}});
    std::ifstream in(dir / "out.csv");
    std::string line;
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line)) {
        const auto f = split(line, ',');
        const double t = std::stod(f[2]), s = std::stod(f[3]), mean = std::stod(f[4]), drop = std::stod(f[5]);
        EXPECT_NEAR(mean, (t + s) / 2, 0.01);
        EXPECT_NEAR(drop, 76.11 - s, 1e-9);
        ++rows;
    }
    EXPECT_EQ(rows, 3);
    std::ifstream js(dir / "out.json");
    const auto j = nlohmann::json::parse(js);
    EXPECT_EQ(j.at("config").at("seed"), 7);
    EXPECT_EQ(j.at("config").at("k"), 20);
    EXPECT_EQ(j.at("config").at("finetune").at("lr"), 0.05);
    EXPECT_EQ(j.at("config").at("finetune").at("steps"), 2000);
    EXPECT_EQ(j.at("rows").size(), 3u);
    EXPECT_EQ(j.at("note"), "x");
    EXPECT_THROW(emit_report(rep, "/nonexistent-dir/r.csv"), IoError);
    fs::remove_all(dir);
}

TEST(Report, SweepCsvCarriesBaseline) {
    SweepGrid g;
    g.lrs = {0.05, 0.005};
    g.p_values = {1};
    g.baseline_source_acc = 90.0;
    g.cells.push_back({1, 0.05, 10, 100, forgetting_report(90.0, 80.0, 70.0)});
    g.cells.push_back({1, 0.005, 10, 100, forgetting_report(90.0, 88.0, 71.0)});
    const auto lines = split(sweep_csv(g), '\n');
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines[0], "p,lr,trainable_params,transfer_acc,source_acc,mean,drop,baseline_source_acc");
    EXPECT_EQ(lines[1], "1,0.05,10,70.00,80.00,75.00,10.00,90.00");
    EXPECT_EQ(lines[2], "1,0.005,10,71.00,88.00,79.50,2.00,90.00");
}
