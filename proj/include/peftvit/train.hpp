// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "peftvit/data.hpp"
#include "peftvit/freeze_mask.hpp"
#include "peftvit/optim.hpp"
#include "peftvit/vit.hpp"

namespace peftvit {

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    std::size_t steps = 2000;
    std::size_t eval_every = 100;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(lr > 0)) throw InputError("lr must be positive");
        if (!(momentum >= 0 && momentum < 1)) throw InputError("momentum must be in [0, 1)");
        if (batch_size < 1) throw InputError("batch_size must be >= 1");
        if (eval_every < 1 || steps % eval_every != 0)
            throw InputError("eval_every=" + std::to_string(eval_every) + " must divide steps=" + std::to_string(steps));
    }
};

struct EvalPoint {
    std::size_t step = 0;
    double val_accuracy = 0;  // fraction
    double loss = 0;          // mean training loss since the previous eval point
};

template <Real T>
struct TrainHistory {
    std::vector<EvalPoint> points;
    std::size_t best_step = 0;
    double best_accuracy = 0;
    double initial_loss = 0;  // loss of the first minibatch
    std::optional<ViTModel<T>> best_snapshot;
};

/// Called at every eval point with the step and the current model.
template <Real T>
using EvalHook = std::function<void(std::size_t step, const ViTModel<T>&)>;

/// Top-1 accuracy of argmax logits (ties to the smaller class) over `indices`.
template <Real T>
double evaluate(const ViTModel<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                std::size_t batch_size = 256) {
    if (indices.empty()) throw InputError("evaluate on an empty split");
    NoGradGuard guard;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
        const auto logits = forward_logits(model, data.batch<T>(chunk));
        const std::size_t classes = logits.dim(1);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            const auto row = logits.data().subspan(i * classes, classes);
            const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
            hits += pred == data.labels[chunk[i]];
        }
    }
    return static_cast<double>(hits) / static_cast<double>(indices.size());
}

/// Backbone features [n, dim] for the given samples.
template <Real T>
Tensor<T> extract_features(const ViTModel<T>& model, const Dataset& data, std::span<const std::size_t> indices,
                           std::size_t batch_size = 256) {
    if (indices.empty()) throw InputError("feature extraction on an empty split");
    NoGradGuard guard;
    std::vector<T> out;
    out.reserve(indices.size() * model.config.dim);
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
        const auto f = forward_features(model, data.batch<T>(chunk));
        out.insert(out.end(), f.data().begin(), f.data().end());
    }
    return Tensor<T>::from({indices.size(), model.config.dim}, std::move(out));
}

/// Minibatch SGD on cross-entropy over data.train. Batches are drawn in order
/// from a permutation of the training split that is reshuffled (seeded by
/// config.seed) every epoch. Every eval_every steps the model is scored on
/// data.val; the best-scoring state (earliest on ties) is kept in the history.
/// Parameters frozen by `mask` are never written.
template <Real T>
TrainHistory<T> train(ViTModel<T>& model, const FreezeMask& mask, const Dataset& data, const TrainConfig& config,
                      const std::type_identity_t<EvalHook<T>>& on_eval = {}) {
    config.validate();
    if (model.config.num_classes != data.num_classes)
        throw UsageError("model head has " + std::to_string(model.config.num_classes) + " classes, dataset has " +
                         std::to_string(data.num_classes));
    if (model.config.channels != data.channels || model.config.image_size != data.image_size)
        throw UsageError("dataset images do not match the model input");
    if (data.train.empty() || data.val.empty()) throw InputError("dataset split is empty");
    param_count(model, mask);  // validates the mask against the model

    TrainHistory<T> history;
    if (config.steps == 0) return history;

    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
        params[i].zero_grad();
        params[i].set_requires_grad(mask[i]);
    }
    Sgd<T> opt(config.lr, config.momentum);

    Rng rng(derive_seed(config.seed, "batches"));
    std::vector<std::size_t> order = data.train;
    rng.shuffle(order.begin(), order.end());
    std::size_t cursor = 0;
    std::vector<std::size_t> batch_idx(config.batch_size);

    double window_loss = 0;
    bool have_best = false;
    for (std::size_t step = 1; step <= config.steps; ++step) {
        for (auto& idx : batch_idx) {
            if (cursor == order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            idx = order[cursor++];
        }
        const auto labels = data.labels_of(batch_idx);
        auto loss = cross_entropy(forward_logits(model, data.batch<T>(batch_idx)), labels);
        if (step == 1) history.initial_loss = loss.item();
        window_loss += loss.item();
        backward(loss);
        opt.step(params, mask);
        for (auto& p : params) p.zero_grad();

        if (step % config.eval_every == 0) {
            const double acc = evaluate(model, data, data.val);
            history.points.push_back({step, acc, window_loss / static_cast<double>(config.eval_every)});
            window_loss = 0;
            if (!have_best || acc > history.best_accuracy) {
                have_best = true;
                history.best_accuracy = acc;
                history.best_step = step;
                history.best_snapshot = model;
            }
            if (on_eval) on_eval(step, model);
        }
    }
    return history;
}

}  // namespace peftvit
