// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "peftvit/error.hpp"

namespace peftvit {

/// Block Expansion request: add `p` identity blocks, one per group of
/// M = depth / p consecutive original blocks.
struct ExpansionSpec {
    std::size_t p = 1;

    void validate(std::size_t depth) const {
        if (p < 1 || p > depth)
            throw SpecError("expansion p=" + std::to_string(p) + " must be in [1, " + std::to_string(depth) + "]");
        if (depth % p != 0)
            throw SpecError("depth " + std::to_string(depth) + " is not divisible into " + std::to_string(p) +
                            " groups");
    }

    std::size_t group_size(std::size_t depth) const {
        validate(depth);
        return depth / p;
    }

    /// 1-indexed positions of the original blocks after which a copy is
    /// inserted: M, 2M, ..., pM.
    std::vector<std::size_t> placement(std::size_t depth) const {
        const std::size_t m = group_size(depth);
        std::vector<std::size_t> out;
        for (std::size_t g = 1; g <= p; ++g) out.push_back(g * m);
        return out;
    }
};

/// LoRA attachment on the query and value projections. The adapted
/// projection is x W + (alpha / rank) (x A) B with A [d, rank] drawn from
/// N(0, init_std) and B [rank, d] zero.
struct AdapterSpec {
    std::size_t rank = 8;
    double alpha = 8;
    double init_std = 0.02;

    /// alpha defaults to the rank, i.e. a scale of exactly 1.
    static AdapterSpec with_rank(std::size_t r) { return {r, static_cast<double>(r), 0.02}; }

    double scale() const { return alpha / static_cast<double>(rank); }

    void validate() const {
        if (rank < 1) throw SpecError("LoRA rank must be at least 1");
        if (!(init_std >= 0)) throw SpecError("LoRA init_std must be non-negative");
    }
};

}  // namespace peftvit
