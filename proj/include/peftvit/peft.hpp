// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "peftvit/freeze_mask.hpp"
#include "peftvit/specs.hpp"
#include "peftvit/vit.hpp"

namespace peftvit {

/// Block Expansion. Original blocks are split into p groups of M = depth / p;
/// after each group a copy of its topmost block is inserted with the
/// attention output projection and the MLP down projection (weights and
/// biases) zeroed. Both feed the residual stream, so each inserted block
/// adds exactly zero and the model function is unchanged. The input model is
/// not modified.
template <Real T>
ViTModel<T> expand_blocks(const ViTModel<T>& model, const ExpansionSpec& spec) {
    const std::size_t depth = model.depth();
    const std::size_t group = spec.group_size(depth);

    ViTModel<T> out = model;
    auto originals = std::move(out.blocks);
    out.blocks.clear();
    for (std::size_t g = 0; g < spec.p; ++g) {
        for (std::size_t i = g * group; i < (g + 1) * group; ++i) out.blocks.push_back(std::move(originals[i]));
        TransformerBlock<T> copy = out.blocks.back();
        TransformerBlock<T>::visit(copy, "", [](const std::string&, Tensor<T>& t) { t = t.clone(); });
        for (auto& v : copy.proj_weight.data()) v = T(0);
        for (auto& v : copy.proj_bias.data()) v = T(0);
        for (auto& v : copy.fc2_weight.data()) v = T(0);
        for (auto& v : copy.fc2_bias.data()) v = T(0);
        copy.origin = BlockOrigin::expanded;
        out.blocks.push_back(std::move(copy));
    }
    out.config.depth = out.blocks.size();
    out.expansions.push_back(spec);
    return out;
}

/// Attaches LoRA adapters to the query and value projections of every
/// block. A is N(0, init_std) and B is zero, so the forward pass is
/// unchanged until B is trained.
template <Real T>
ViTModel<T> attach_lora(const ViTModel<T>& model, const AdapterSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (model.has_lora()) throw UsageError("model already carries LoRA adapters");
    ViTModel<T> out = model;
    const std::size_t d = model.config.dim, r = spec.rank;
    for (std::size_t i = 0; i < out.blocks.size(); ++i) {
        auto& b = out.blocks[i];
        b.lora_q = LoraPair<T>{Tensor<T>::seeded_normal({d, r}, derive_seed(seed, "lora_q", i), 0.0, spec.init_std),
                               Tensor<T>::zeros({r, d})};
        b.lora_v = LoraPair<T>{Tensor<T>::seeded_normal({d, r}, derive_seed(seed, "lora_v", i), 0.0, spec.init_std),
                               Tensor<T>::zeros({r, d})};
    }
    out.lora = spec;
    return out;
}

/// Folds every adapter into its projection, W <- W + (alpha / rank) A B,
/// and removes the adapters.
template <Real T>
ViTModel<T> merge_lora(const ViTModel<T>& model) {
    if (!model.has_lora()) throw UsageError("model has no LoRA adapters to merge");
    ViTModel<T> out = model;
    const std::size_t d = model.config.dim;
    const T s = static_cast<T>(model.lora->scale());
    for (auto& b : out.blocks) {
        auto fold = [&](const LoraPair<T>& lp, std::size_t col0) {
            const std::size_t r = lp.a.dim(1);
            std::vector<T> ab(d * d, T(0));
            detail::gemm_acc(lp.a.data().data(), lp.b.data().data(), ab.data(), d, r, d);
            auto w = b.qkv_weight.data();
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) w[i * 3 * d + col0 + j] += s * ab[i * d + j];
        };
        if (b.lora_q) fold(*b.lora_q, 0);
        if (b.lora_v) fold(*b.lora_v, 2 * d);
        b.lora_q.reset();
        b.lora_v.reset();
    }
    out.lora.reset();
    return out;
}

/// Trainability map for a strategy:
///  - full: everything
///  - top_k(k): last k blocks and head (the final norm stays frozen)
///  - linear: head only
///  - lora_only: every adapter matrix and the head
///  - expanded_only: blocks inserted by expansion and the head
template <Real T>
FreezeMask build_freeze_mask(const ViTModel<T>& model, const MaskStrategy& strategy) {
    const std::size_t depth = model.depth();
    switch (strategy.kind) {
        case StrategyKind::top_k:
            if (strategy.k < 1 || strategy.k > depth)
                throw UsageError("top_k(" + std::to_string(strategy.k) + ") invalid for depth " + std::to_string(depth));
            break;
        case StrategyKind::lora_only:
            if (!model.has_lora()) throw UsageError("lora_only requires a model with LoRA adapters");
            break;
        case StrategyKind::expanded_only:
            if (!model.has_expanded_blocks()) throw UsageError("expanded_only requires a model with expanded blocks");
            break;
        default:
            break;
    }

    FreezeMask mask;
    mask.strategy = strategy;
    auto block_of = [](const std::string& name) -> long {
        if (name.rfind("blocks.", 0) != 0) return -1;
        return std::stol(name.substr(7, name.find('.', 7) - 7));
    };
    model.visit_parameters([&](const std::string& name, const Tensor<T>&) {
        const bool head = name.rfind("head.", 0) == 0;
        const long bi = block_of(name);
        bool on = false;
        switch (strategy.kind) {
            case StrategyKind::full:
                on = true;
                break;
            case StrategyKind::top_k:
                on = head || (bi >= 0 && static_cast<std::size_t>(bi) >= depth - strategy.k);
                break;
            case StrategyKind::linear:
                on = head;
                break;
            case StrategyKind::lora_only:
                on = head || name.find(".lora_") != std::string::npos;
                break;
            case StrategyKind::expanded_only:
                on = head || (bi >= 0 && model.blocks[static_cast<std::size_t>(bi)].origin == BlockOrigin::expanded);
                break;
        }
        mask.names.push_back(name);
        mask.trainable.push_back(on);
    });
    return mask;
}

/// Largest |logit difference| between two models over a probe batch.
template <Real T>
double verify_identity(const ViTModel<T>& original, const ViTModel<T>& modified, const Tensor<T>& probes) {
    if (original.config.num_classes != modified.config.num_classes)
        throw UsageError("models have different class counts (" + std::to_string(original.config.num_classes) + " vs " +
                         std::to_string(modified.config.num_classes) + ")");
    NoGradGuard guard;
    const auto a = forward_logits(original, probes);
    const auto b = forward_logits(modified, probes);
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double diff = std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]));
        if (std::isnan(diff)) return diff;
        worst = std::max(worst, diff);
    }
    return worst;
}

/// Uniform [0, 1) probe images for identity and equivalence checks.
template <Real T>
Tensor<T> random_probes(const ViTConfig& config, std::size_t count, std::uint64_t seed) {
    std::vector<T> data(count * config.channels * config.image_size * config.image_size);
    Rng rng(seed);
    for (auto& v : data) v = static_cast<T>(rng.uniform());
    return Tensor<T>::from({count, config.channels, config.image_size, config.image_size}, std::move(data));
}

}  // namespace peftvit
