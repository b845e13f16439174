// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <vector>

#include "peftvit/knn.hpp"

using namespace peftvit;

namespace {

// Brute force: score every stored row, fully sort, vote.
std::size_t brute_force(const std::vector<double>& rows, const std::vector<std::size_t>& labels,
                        const std::vector<double>& q, std::size_t dim, std::size_t k) {
    const std::size_t n = labels.size();
    double qn = 0;
    for (double v : q) qn += v * v;
    qn = std::sqrt(qn);
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < n; ++i) {
        double rn = 0, dot = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            rn += rows[i * dim + j] * rows[i * dim + j];
            dot += rows[i * dim + j] * q[j];
        }
        scored.push_back({dot / (std::sqrt(rn) * qn), i});
    }
    std::sort(scored.begin(), scored.end(), [](auto a, auto b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    std::map<std::size_t, double> votes;
    for (std::size_t r = 0; r < k; ++r) votes[labels[scored[r].second]] += scored[r].first;
    std::size_t best = votes.begin()->first;
    for (auto [l, v] : votes)
        if (v > votes[best]) best = l;
    return best;
}

}  // namespace

TEST(Knn, MatchesBruteForceOnRandomInstances) {
    Rng rng(31);
    for (int inst = 0; inst < 100; ++inst) {
        const std::size_t n = 1 + rng.below(50), dim = 1 + rng.below(8), classes = 1 + rng.below(5);
        std::vector<double> rows(n * dim);
        for (auto& v : rows) v = rng.normal();
        std::vector<std::size_t> labels(n);
        for (auto& l : labels) l = rng.below(classes);
        const FeatureIndex index(Tensor<double>::from({n, dim}, rows), labels);
        const std::size_t m = 5;
        std::vector<double> qs(m * dim);
        for (auto& v : qs) v = rng.normal();
        const auto queries = Tensor<double>::from({m, dim}, qs);
        for (std::size_t k = 1; k <= n; ++k) {
            const auto pred = knn_predict(index, queries, k);
            for (std::size_t qi = 0; qi < m; ++qi) {
                std::vector<double> q(qs.begin() + qi * dim, qs.begin() + (qi + 1) * dim);
                ASSERT_EQ(pred[qi], brute_force(rows, labels, q, dim, k)) << "inst " << inst << " k " << k;
            }
        }
    }
}

TEST(Knn, HandExampleWithWeightedVote) {
    // Two weakly similar class-1 rows outvote one strongly similar class-0 row at k = 3.
    const auto feats = Tensor<double>::from({3, 2}, {1, 0, 0.8, 0.6, 0.8, -0.6});
    const std::vector<std::size_t> labels{0, 1, 1};
    const FeatureIndex index(feats, labels);
    const auto q = Tensor<double>::from({1, 2}, {1, 0});
    EXPECT_EQ(knn_predict(index, q, 1)[0], 0u);
    EXPECT_EQ(knn_predict(index, q, 3)[0], 1u);  // 1.0 vs 0.8 + 0.8
}

TEST(Knn, TiesGoToSmallerLabelAndLowerIndex) {
    const auto feats = Tensor<double>::from({2, 2}, {0, 1, 0, -1});
    const std::vector<std::size_t> labels{3, 2};
    const FeatureIndex index(feats, labels);
    // Query orthogonal to both: similarities tie at 0; k=1 takes row 0 (lower index).
    EXPECT_EQ(knn_predict(index, Tensor<double>::from({1, 2}, {1, 0}), 1)[0], 3u);
    // k=2: both vote 0 -> tie broken to the smaller label.
    EXPECT_EQ(knn_predict(index, Tensor<double>::from({1, 2}, {1, 0}), 2)[0], 2u);
}

TEST(Knn, F32FeaturesGiveTheSameAnswers) {
    Rng rng(4);
    std::vector<float> rows(40 * 6);
    for (auto& v : rows) v = static_cast<float>(rng.normal());
    std::vector<std::size_t> labels(40);
    for (auto& l : labels) l = rng.below(3);
    const FeatureIndex a(Tensor<float>::from({40, 6}, rows), labels);
    const FeatureIndex b(Tensor<double>::from({40, 6}, std::vector<double>(rows.begin(), rows.end())), labels);
    const auto q = Tensor<float>::from({5, 6}, std::vector<float>(rows.begin(), rows.begin() + 30));
    EXPECT_EQ(knn_predict(a, q, 7), knn_predict(b, q, 7));
}

TEST(Knn, Errors) {
    const auto feats = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    const std::vector<std::size_t> labels{0, 1};
    const FeatureIndex index(feats, labels);
    const auto q = Tensor<double>::from({1, 2}, {1, 1});
    EXPECT_THROW(knn_predict(index, q, 0), InputError);
    EXPECT_THROW(knn_predict(index, q, 3), InputError);
    EXPECT_THROW(knn_predict(index, Tensor<double>::from({1, 3}, {1, 1, 1}), 1), ShapeError);
    const std::vector<std::size_t> one{0};
    EXPECT_THROW((void)FeatureIndex(feats, one), InputError);
    EXPECT_THROW((void)FeatureIndex(Tensor<double>::from({1, 2}, {0, 0}), one), InputError);
    EXPECT_THROW((void)FeatureIndex(Tensor<double>::from({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 1}), one), InputError);
}

TEST(Knn, NonFiniteQueriesRankLast) {
    const auto feats = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    const std::vector<std::size_t> labels{0, 1};
    const FeatureIndex index(feats, labels);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    EXPECT_EQ(knn_predict(index, Tensor<double>::from({1, 2}, {nan, nan}), 1)[0], 0u);
}

TEST(Top1, Accuracy) {
    const std::vector<std::size_t> p{0, 1, 2, 2}, t{0, 1, 1, 2};
    EXPECT_DOUBLE_EQ(top1_accuracy(p, t), 0.75);
    const std::vector<std::size_t> empty;
    EXPECT_THROW(top1_accuracy(empty, empty), InputError);
    EXPECT_THROW(top1_accuracy(p, std::vector<std::size_t>{0}), InputError);
}

TEST(Forgetting, DropAndMean) {
    const auto r = forgetting_report(76.11, 25.24, 88.13);
    EXPECT_NEAR(r.drop, 50.87, 1e-9);
    EXPECT_NEAR(r.mean, 56.685, 1e-9);
    const auto f = forgetting_report(0.5, 0.75, 0.25, AccuracyUnit::fraction);
    EXPECT_DOUBLE_EQ(f.drop, -0.25);
    EXPECT_DOUBLE_EQ(f.mean, 0.5);
    EXPECT_THROW(forgetting_report(101, 50, 50), InputError);
    EXPECT_THROW(forgetting_report(0.5, 1.5, 0.5, AccuracyUnit::fraction), InputError);
}
