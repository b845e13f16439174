// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "peftvit/grad_check.hpp"
#include "peftvit/tensor.hpp"

using namespace peftvit;
using T64 = Tensor<double>;

namespace {

// Central differences, written independently of grad_check.
void expect_matches_fd(const std::function<T64()>& f, std::vector<T64> params, double tol = 1e-7) {
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    backward(f());
    NoGradGuard guard;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto d = params[pi].data();
        for (std::size_t j = 0; j < d.size(); ++j) {
            const double o = d[j], h = 1e-6;
            d[j] = o + h;
            const double up = f().item();
            d[j] = o - h;
            const double dn = f().item();
            d[j] = o;
            const double num = (up - dn) / (2 * h);
            const double an = params[pi].has_grad() ? params[pi].grad()[j] : 0.0;
            ASSERT_NEAR(an, num, tol * std::max(1.0, std::abs(num))) << "param " << pi << " coord " << j;
        }
    }
}

// A fixed random projection to turn any tensor into a scalar with
// non-uniform upstream gradients.
T64 probe_sum(const T64& x, std::uint64_t seed = 77) {
    return sum(x * T64::seeded_normal(x.shape(), seed, 0, 1));
}

}  // namespace

TEST(Backward, Matmul) {
    auto a = T64::seeded_normal({2, 5, 3}, 1, 0, 1), b = T64::seeded_normal({3, 4}, 2, 0, 1);
    expect_matches_fd([&] { return probe_sum(matmul(a, b)); }, {a, b});
}

TEST(Backward, ElementwiseWithBroadcast) {
    auto a = T64::seeded_normal({2, 3}, 1, 0, 1), b = T64::seeded_normal({3}, 2, 0, 1), c = T64::seeded_normal({2, 1}, 3, 0, 1);
    expect_matches_fd([&] { return probe_sum((a + b) * c - b); }, {a, b, c});
}

TEST(Backward, ScaleAddScalarSum) {
    auto a = T64::seeded_normal({4}, 1, 0, 1);
    expect_matches_fd([&] { return probe_sum(add_scalar(scale(a, 2.5), -1.0)); }, {a});
}

TEST(Backward, SoftmaxBothAxes) {
    auto a = T64::seeded_normal({3, 4}, 1, 0, 1);
    expect_matches_fd([&] { return probe_sum(softmax(a, 1)); }, {a});
    expect_matches_fd([&] { return probe_sum(softmax(a, 0)); }, {a});
}

TEST(Backward, LayerNorm) {
    auto x = T64::seeded_normal({3, 5}, 1, 0, 1), g = T64::seeded_normal({5}, 2, 1, 0.3), b = T64::seeded_normal({5}, 3, 0, 1);
    expect_matches_fd([&] { return probe_sum(layer_norm(x, g, b, 1e-6)); }, {x, g, b});
}

TEST(Backward, Gelu) {
    auto x = T64::seeded_normal({6}, 1, 0, 2);
    expect_matches_fd([&] { return probe_sum(gelu(x)); }, {x});
}

TEST(Backward, CrossEntropy) {
    auto x = T64::seeded_normal({3, 4}, 1, 0, 1);
    std::vector<std::size_t> y{0, 3, 1};
    expect_matches_fd([&] { return cross_entropy(x, y); }, {x});
}

TEST(Backward, TokenOps) {
    auto x = T64::seeded_normal({2, 3, 4}, 1, 0, 1), t = T64::seeded_normal({4}, 2, 0, 1);
    expect_matches_fd([&] { return probe_sum(select_token(prepend_token(x, t), 1)) + probe_sum(slice_last(x, 1, 2), 5); },
                      {x, t});
}

TEST(Backward, Attention) {
    auto q = T64::seeded_normal({2, 3, 4}, 1, 0, 1), k = T64::seeded_normal({2, 3, 4}, 2, 0, 1),
         v = T64::seeded_normal({2, 3, 4}, 3, 0, 1);
    expect_matches_fd([&] { return probe_sum(multi_head_attention(q, k, v, 2)); }, {q, k, v});
}

TEST(Backward, SharedSubexpressionsAccumulate) {
    auto a = T64::from({1}, {3.0});
    a.set_requires_grad(true);
    auto y = a * a;                 // 2a
    auto z = sum(y * a + y);        // a^3 + a^2 -> 3a^2 + 2a = 33
    backward(z);
    EXPECT_DOUBLE_EQ(a.grad()[0], 33.0);
    backward(sum(scale(a, 2.0)));   // gradients accumulate across calls
    EXPECT_DOUBLE_EQ(a.grad()[0], 35.0);
}

TEST(Backward, Errors) {
    auto a = T64::seeded_normal({2}, 1, 0, 1);
    a.set_requires_grad(true);
    EXPECT_THROW(backward(a), UsageError);
    EXPECT_THROW(backward(sum(T64::zeros({2}))), UsageError);
}

TEST(Backward, NoGradGuardStopsRecording) {
    auto a = T64::seeded_normal({2}, 1, 0, 1);
    a.set_requires_grad(true);
    {
        NoGradGuard g;
        EXPECT_FALSE(grad_enabled());
        EXPECT_FALSE(sum(a * a).requires_grad());
    }
    EXPECT_TRUE(sum(a * a).requires_grad());
}

TEST(GradCheck, KnownGradientOfQuadratic) {
    auto x = T64::from({3}, {1, -2, 0.5});
    std::vector<T64> ps{x};
    auto r = grad_check<double>([&] { return sum(x * x); }, std::span<T64>(ps), 1e-6);
    EXPECT_LE(r.max_rel_error, 1e-8);
    EXPECT_EQ(r.coordinates, 3u);
    EXPECT_FALSE(x.requires_grad());  // flags restored
}

TEST(GradCheck, DetectsAWrongGradient) {
    // The detached branch is invisible to backward but not to finite
    // differences.
    auto x = T64::from({2}, {1.0, 2.0});
    std::vector<T64> ps{x};
    auto r = grad_check<double>([&] { return sum(x.detach() * x.detach()) + sum(scale(x, 0.0)); },
                                std::span<T64>(ps), 1e-6);
    EXPECT_GT(r.max_rel_error, 0.5);
}

TEST(GradCheck, RejectsF32AndBadEpsilon) {
    auto xf = Tensor<float>::from({1}, {1.0f});
    std::vector<Tensor<float>> pf{xf};
    EXPECT_THROW(grad_check<float>([&] { return sum(xf); }, std::span<Tensor<float>>(pf), 1e-3), UsageError);
    auto x = T64::from({1}, {1.0});
    std::vector<T64> ps{x};
    EXPECT_THROW(grad_check<double>([&] { return sum(x); }, std::span<T64>(ps), 0.0), InputError);
}
