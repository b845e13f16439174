// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "peftvit/freeze_mask.hpp"
#include "peftvit/tensor.hpp"

namespace peftvit {

/// SGD with heavy-ball momentum and no weight decay:
///   v <- momentum * v + g;  p <- p - lr * v
/// Frozen parameters and their velocity buffers are never touched.
template <Real T>
class Sgd {
public:
    explicit Sgd(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {
        if (!(lr >= 0)) throw InputError("learning rate must be non-negative");
        if (!(momentum >= 0 && momentum < 1)) throw InputError("momentum must be in [0, 1)");
    }

    double lr() const { return lr_; }
    double momentum() const { return momentum_; }

    void step(std::span<Tensor<T>> params, const FreezeMask& mask) {
        if (mask.size() != params.size())
            throw UsageError("freeze mask covers " + std::to_string(mask.size()) + " tensors, optimizer got " +
                             std::to_string(params.size()));
        if (velocity_.empty()) velocity_.resize(params.size());
        if (velocity_.size() != params.size()) throw UsageError("parameter list changed between optimizer steps");

        const T lr = static_cast<T>(lr_);
        const T mom = static_cast<T>(momentum_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!mask[i]) continue;
            auto& p = params[i];
            if (!p.has_grad())
                throw UsageError("trainable parameter '" + (i < mask.names.size() ? mask.names[i] : std::to_string(i)) +
                                 "' has no gradient");
            auto& v = velocity_[i];
            if (v.empty()) v.assign(p.numel(), T(0));
            auto data = p.data();
            const auto g = p.grad();
            for (std::size_t j = 0; j < data.size(); ++j) {
                v[j] = mom * v[j] + g[j];
                data[j] -= lr * v[j];
            }
        }
    }

    /// Velocity buffer of parameter i (empty if never updated).
    const std::vector<T>& velocity(std::size_t i) const { return velocity_.at(i); }

private:
    double lr_;
    double momentum_;
    std::vector<std::vector<T>> velocity_;
};

}  // namespace peftvit
