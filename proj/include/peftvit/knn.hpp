// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "peftvit/error.hpp"
#include "peftvit/tensor.hpp"

namespace peftvit {

/// Labelled, L2-normalized feature rows. Similarities are computed in double
/// whatever the precision of the features that built it.
class FeatureIndex {
public:
    template <Real T>
    FeatureIndex(const Tensor<T>& features, std::span<const std::size_t> labels) {
        if (features.rank() != 2) throw ShapeError("feature index expects [n, dim], got " + shape_str(features.shape()));
        n_ = features.dim(0);
        dim_ = features.dim(1);
        if (labels.size() != n_)
            throw InputError("got " + std::to_string(labels.size()) + " labels for " + std::to_string(n_) + " features");
        rows_.resize(n_ * dim_);
        labels_.assign(labels.begin(), labels.end());
        const auto src = features.data();
        for (std::size_t i = 0; i < n_; ++i) {
            double norm = 0;
            for (std::size_t j = 0; j < dim_; ++j) norm += static_cast<double>(src[i * dim_ + j]) * src[i * dim_ + j];
            norm = std::sqrt(norm);
            if (!(norm > 0) || !std::isfinite(norm))
                throw InputError("feature row " + std::to_string(i) + " has zero or non-finite norm");
            for (std::size_t j = 0; j < dim_; ++j) rows_[i * dim_ + j] = src[i * dim_ + j] / norm;
        }
    }

    std::size_t size() const { return n_; }
    std::size_t dim() const { return dim_; }
    std::span<const double> row(std::size_t i) const { return {rows_.data() + i * dim_, dim_}; }
    std::size_t label(std::size_t i) const { return labels_[i]; }
    std::span<const std::size_t> labels() const { return labels_; }

private:
    std::size_t n_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> rows_;
    std::vector<std::size_t> labels_;
};

/// Cosine-similarity K-NN. Among the k most similar stored rows (ties by
/// lower row index) each votes for its label with weight equal to its
/// similarity; the label with the largest total wins, ties to the smaller
/// label id. Non-finite query similarities rank below every finite one.
template <Real T>
std::vector<std::size_t> knn_predict(const FeatureIndex& index, const Tensor<T>& queries, std::size_t k) {
    if (k == 0 || k > index.size())
        throw InputError("k=" + std::to_string(k) + " must be in [1, " + std::to_string(index.size()) + "]");
    if (queries.rank() != 2 || queries.dim(1) != index.dim())
        throw ShapeError("queries " + shape_str(queries.shape()) + " do not match index width " +
                         std::to_string(index.dim()));
    const std::size_t m = queries.dim(0), dim = index.dim(), n = index.size();
    std::size_t max_label = 0;
    for (auto l : index.labels()) max_label = std::max(max_label, l);

    std::vector<std::size_t> out(m);
    std::vector<double> q(dim), sims(n), votes(max_label + 1);
    std::vector<std::size_t> order(n);
    const auto src = queries.data();
    for (std::size_t qi = 0; qi < m; ++qi) {
        double norm = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            q[j] = src[qi * dim + j];
            norm += q[j] * q[j];
        }
        norm = std::sqrt(norm);
        if (norm > 0)
            for (auto& v : q) v /= norm;
        for (std::size_t i = 0; i < n; ++i) {
            const auto r = index.row(i);
            double s = 0;
            for (std::size_t j = 0; j < dim; ++j) s += q[j] * r[j];
            sims[i] = std::isfinite(s) ? s : -std::numeric_limits<double>::infinity();
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                          [&](std::size_t a, std::size_t b) { return sims[a] > sims[b] || (sims[a] == sims[b] && a < b); });
        std::fill(votes.begin(), votes.end(), 0.0);
        std::vector<bool> voted(max_label + 1, false);
        for (std::size_t r = 0; r < k; ++r) {
            const std::size_t l = index.label(order[r]);
            voted[l] = true;
            if (std::isfinite(sims[order[r]])) votes[l] += sims[order[r]];
        }
        std::size_t best = max_label + 1;
        for (std::size_t l = 0; l <= max_label; ++l) {
            if (!voted[l]) continue;
            if (best > max_label || votes[l] > votes[best]) best = l;
        }
        out[qi] = best;
    }
    return out;
}

/// Fraction of positions where prediction equals truth.
inline double top1_accuracy(std::span<const std::size_t> predictions, std::span<const std::size_t> truth) {
    if (predictions.empty() || truth.empty()) throw InputError("accuracy of an empty prediction list");
    if (predictions.size() != truth.size())
        throw InputError("prediction/truth length mismatch (" + std::to_string(predictions.size()) + " vs " +
                         std::to_string(truth.size()) + ")");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) hits += predictions[i] == truth[i];
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

enum class AccuracyUnit { fraction, percent };

/// Source-domain forgetting and the mean of transfer and retained source
/// accuracy.
struct ForgettingRecord {
    double source_acc_before = 0;
    double source_acc_after = 0;
    double transfer_acc = 0;
    double drop = 0;  // before - after
    double mean = 0;  // (transfer + after) / 2
    AccuracyUnit unit = AccuracyUnit::percent;
};

inline ForgettingRecord forgetting_report(double source_before, double source_after, double transfer,
                                          AccuracyUnit unit = AccuracyUnit::percent) {
    const double hi = unit == AccuracyUnit::percent ? 100.0 : 1.0;
    for (double v : {source_before, source_after, transfer})
        if (!(v >= 0 && v <= hi))
            throw InputError("accuracy " + std::to_string(v) + " outside [0, " + std::to_string(hi) + "]");
    ForgettingRecord r;
    r.source_acc_before = source_before;
    r.source_acc_after = source_after;
    r.transfer_acc = transfer;
    r.drop = source_before - source_after;
    r.mean = (transfer + source_after) / 2;
    r.unit = unit;
    return r;
}

}  // namespace peftvit
