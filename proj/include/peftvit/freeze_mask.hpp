// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "peftvit/error.hpp"

namespace peftvit {

enum class StrategyKind { full, top_k, linear, lora_only, expanded_only };

/// Which parameters a fine-tuning strategy trains. `k` is only meaningful for
/// top_k.
struct MaskStrategy {
    StrategyKind kind = StrategyKind::full;
    std::size_t k = 0;

    static MaskStrategy full() { return {StrategyKind::full, 0}; }
    static MaskStrategy top_k(std::size_t k) { return {StrategyKind::top_k, k}; }
    static MaskStrategy linear() { return {StrategyKind::linear, 0}; }
    static MaskStrategy lora_only() { return {StrategyKind::lora_only, 0}; }
    static MaskStrategy expanded_only() { return {StrategyKind::expanded_only, 0}; }

    /// "full", "top_k(3)", "linear", "lora_only", "expanded_only".
    std::string tag() const {
        switch (kind) {
            case StrategyKind::full: return "full";
            case StrategyKind::top_k: return "top_k(" + std::to_string(k) + ")";
            case StrategyKind::linear: return "linear";
            case StrategyKind::lora_only: return "lora_only";
            case StrategyKind::expanded_only: return "expanded_only";
        }
        return "full";
    }

    static MaskStrategy parse(const std::string& tag) {
        if (tag == "full") return full();
        if (tag == "linear") return linear();
        if (tag == "lora_only") return lora_only();
        if (tag == "expanded_only") return expanded_only();
        if (tag.rfind("top_k(", 0) == 0 && tag.size() > 7 && tag.back() == ')') {
            const auto digits = tag.substr(6, tag.size() - 7);
            if (digits.find_first_not_of("0123456789") == std::string::npos) return top_k(std::stoul(digits));
        }
        throw InputError("unknown mask strategy '" + tag + "'");
    }

    bool operator==(const MaskStrategy&) const = default;
};

/// Per-parameter-tensor trainability flags, aligned with a model's canonical
/// parameter order (see ViTModel::visit_parameters).
struct FreezeMask {
    MaskStrategy strategy;
    std::vector<std::string> names;
    std::vector<bool> trainable;

    std::size_t size() const { return trainable.size(); }
    bool operator[](std::size_t i) const { return trainable[i]; }
    std::size_t trainable_tensors() const {
        std::size_t n = 0;
        for (bool t : trainable) n += t;
        return n;
    }
};

}  // namespace peftvit
