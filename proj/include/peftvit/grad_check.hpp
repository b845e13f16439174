// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <span>
#include <vector>

#include "peftvit/tensor.hpp"

namespace peftvit {

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t worst_param = 0;
    std::size_t worst_coord = 0;
    double analytic = 0;
    double numeric = 0;
    std::size_t coordinates = 0;
};

/// Compares reverse-mode gradients of `build()` (a scalar loss recomputed from
/// `params`) against central differences (f(p+eps) - f(p-eps)) / 2eps, one
/// coordinate at a time. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-12); the worst one is returned.
template <Real T, typename Builder>
    requires std::invocable<Builder&> && std::same_as<std::invoke_result_t<Builder&>, Tensor<T>>
GradCheckResult grad_check(Builder&& build, std::span<Tensor<T>> params, double epsilon) {
    if constexpr (precision_of<T> != Precision::f64) {
        throw UsageError("grad_check requires F64 precision");
    } else {
        if (!(epsilon > 0)) throw InputError("grad_check epsilon must be positive");

        std::vector<bool> saved_flags;
        for (auto& p : params) {
            saved_flags.push_back(p.requires_grad());
            p.set_requires_grad(true);
            p.zero_grad();
        }
        backward(build());
        std::vector<std::vector<double>> analytic;
        for (auto& p : params) {
            analytic.emplace_back(p.grad().begin(), p.grad().end());
            if (analytic.back().empty()) analytic.back().assign(p.numel(), 0.0);
            p.zero_grad();
        }

        GradCheckResult res;
        NoGradGuard guard;
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            auto data = params[pi].data();
            for (std::size_t j = 0; j < data.size(); ++j) {
                const double orig = data[j];
                data[j] = orig + epsilon;
                const double fp = build().item();
                data[j] = orig - epsilon;
                const double fm = build().item();
                data[j] = orig;
                const double num = (fp - fm) / (2 * epsilon);
                const double an = analytic[pi][j];
                const double denom = std::max({std::abs(an), std::abs(num), 1e-12});
                const double rel = std::abs(an - num) / denom;
                ++res.coordinates;
                if (res.coordinates == 1 || rel > res.max_rel_error) {
                    res.max_rel_error = rel;
                    res.worst_param = pi;
                    res.worst_coord = j;
                    res.analytic = an;
                    res.numeric = num;
                }
            }
        }
        for (std::size_t pi = 0; pi < params.size(); ++pi) params[pi].set_requires_grad(saved_flags[pi]);
        return res;
    }
}

}  // namespace peftvit
