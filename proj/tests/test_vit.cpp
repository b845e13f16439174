// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "peftvit/peft.hpp"
#include "peftvit/vit.hpp"

using namespace peftvit;

namespace {

ViTConfig tiny(std::size_t classes = 3) { return {8, 4, 2, 8, 2, 2, 2, classes, 1e-6}; }

// Plain-loop forward pass in double, independent of the tensor ops.
struct Naive {
    const ViTModel<double>& m;
    const ViTConfig& c;

    static std::vector<double> ln(const std::vector<double>& x, const Tensor<double>& g, const Tensor<double>& b,
                                  double eps) {
        const std::size_t n = x.size();
        double mu = std::accumulate(x.begin(), x.end(), 0.0) / n, var = 0;
        for (double v : x) var += (v - mu) * (v - mu);
        var /= n;
        std::vector<double> y(n);
        for (std::size_t i = 0; i < n; ++i) y[i] = (x[i] - mu) / std::sqrt(var + eps) * g.data()[i] + b.data()[i];
        return y;
    }
    static std::vector<double> affine(const std::vector<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
        const std::size_t in = w.dim(0), out = w.dim(1);
        std::vector<double> y(b.data().begin(), b.data().end());
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t i = 0; i < in; ++i) y[o] += x[i] * w.data()[i * out + o];
        return y;
    }

    std::vector<double> logits(const double* img) const {
        const std::size_t p = c.patch_size, g = c.grid(), d = c.dim;
        std::vector<std::vector<double>> tok;
        tok.emplace_back(m.cls_token.data().begin(), m.cls_token.data().end());
        for (std::size_t py = 0; py < g; ++py)
            for (std::size_t px = 0; px < g; ++px) {
                std::vector<double> patch;
                for (std::size_t ch = 0; ch < c.channels; ++ch)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx)
                            patch.push_back(img[(ch * c.image_size + py * p + dy) * c.image_size + px * p + dx]);
                tok.push_back(affine(patch, m.patch_weight, m.patch_bias));
            }
        for (std::size_t t = 0; t < tok.size(); ++t)
            for (std::size_t j = 0; j < d; ++j) tok[t][j] += m.pos_embed.data()[t * d + j];

        const double s = m.lora ? m.lora->scale() : 1.0;
        for (const auto& b : m.blocks) {
            const std::size_t n = tok.size(), dh = d / c.heads;
            std::vector<std::vector<double>> q(n), k(n), v(n);
            for (std::size_t t = 0; t < n; ++t) {
                const auto h = ln(tok[t], b.ln1_gamma, b.ln1_beta, c.eps);
                const auto qkv = affine(h, b.qkv_weight, b.qkv_bias);
                q[t].assign(qkv.begin(), qkv.begin() + d);
                k[t].assign(qkv.begin() + d, qkv.begin() + 2 * d);
                v[t].assign(qkv.begin() + 2 * d, qkv.end());
                auto low_rank = [&](const LoraPair<double>& lp, std::vector<double>& dst) {
                    const std::size_t r = lp.a.dim(1);
                    for (std::size_t o = 0; o < d; ++o)
                        for (std::size_t rr = 0; rr < r; ++rr) {
                            double xa = 0;
                            for (std::size_t i = 0; i < d; ++i) xa += h[i] * lp.a.data()[i * r + rr];
                            dst[o] += s * xa * lp.b.data()[rr * d + o];
                        }
                };
                if (b.lora_q) low_rank(*b.lora_q, q[t]);
                if (b.lora_v) low_rank(*b.lora_v, v[t]);
            }
            std::vector<std::vector<double>> attn(n, std::vector<double>(d, 0.0));
            for (std::size_t hd = 0; hd < c.heads; ++hd)
                for (std::size_t i = 0; i < n; ++i) {
                    std::vector<double> w(n);
                    double mx = -1e300, z = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        double sc = 0;
                        for (std::size_t e = 0; e < dh; ++e) sc += q[i][hd * dh + e] * k[j][hd * dh + e];
                        w[j] = sc / std::sqrt(double(dh));
                        mx = std::max(mx, w[j]);
                    }
                    for (auto& x : w) z += (x = std::exp(x - mx));
                    for (std::size_t j = 0; j < n; ++j)
                        for (std::size_t e = 0; e < dh; ++e) attn[i][hd * dh + e] += w[j] / z * v[j][hd * dh + e];
                }
            for (std::size_t t = 0; t < n; ++t) {
                const auto o = affine(attn[t], b.proj_weight, b.proj_bias);
                for (std::size_t j = 0; j < d; ++j) tok[t][j] += o[j];
                auto hid = affine(ln(tok[t], b.ln2_gamma, b.ln2_beta, c.eps), b.fc1_weight, b.fc1_bias);
                for (auto& x : hid) x = 0.5 * x * (1 + std::erf(x / std::sqrt(2.0)));
                const auto o2 = affine(hid, b.fc2_weight, b.fc2_bias);
                for (std::size_t j = 0; j < d; ++j) tok[t][j] += o2[j];
            }
        }
        return affine(ln(tok[0], m.norm_gamma, m.norm_beta, c.eps), m.head_weight, m.head_bias);
    }
};

// Perturb every parameter so that zero biases and unit gammas do not hide
// indexing mistakes.
template <Real T>
void jitter(ViTModel<T>& m, std::uint64_t seed) {
    std::size_t i = 0;
    m.visit_parameters([&](const std::string&, Tensor<T>& t) {
        Rng r(derive_seed(seed, "jitter", i++));
        for (auto& v : t.data()) v += static_cast<T>(r.normal(0, 0.2));
    });
}

}  // namespace

TEST(ViTForward, MatchesNaiveLoopOracle) {
    const auto c = tiny();
    auto m = build_vit<double>(c, 5);
    jitter(m, 1);
    const auto x = random_probes<double>(c, 3, 9);
    const auto logits = forward_logits(m, x);
    const Naive ref{m, c};
    for (std::size_t b = 0; b < 3; ++b) {
        const auto want = ref.logits(x.data().data() + b * c.channels * c.image_size * c.image_size);
        for (std::size_t j = 0; j < c.num_classes; ++j) EXPECT_NEAR(logits.data()[b * c.num_classes + j], want[j], 1e-10);
    }
}

TEST(ViTForward, MatchesNaiveOracleWithAdapters) {
    const auto c = tiny();
    auto m = attach_lora(build_vit<double>(c, 5), AdapterSpec{2, 3.0, 0.1}, 4);
    jitter(m, 2);
    const auto x = random_probes<double>(c, 2, 9);
    const auto logits = forward_logits(m, x);
    const Naive ref{m, c};
    for (std::size_t b = 0; b < 2; ++b) {
        const auto want = ref.logits(x.data().data() + b * c.channels * c.image_size * c.image_size);
        for (std::size_t j = 0; j < c.num_classes; ++j) EXPECT_NEAR(logits.data()[b * c.num_classes + j], want[j], 1e-10);
    }
}

TEST(ViTForward, BatchPermutationEquivariantBitExact) {
    const auto c = ViTConfig::desk(5);
    auto m = build_vit<float>(c, 3);
    const auto x = random_probes<float>(c, 6, 1);
    const std::vector<std::size_t> perm{4, 0, 5, 2, 1, 3};
    const std::size_t per = c.channels * c.image_size * c.image_size;
    std::vector<float> px;
    for (auto i : perm) px.insert(px.end(), x.data().begin() + i * per, x.data().begin() + (i + 1) * per);
    const auto a = forward_logits(m, x);
    const auto b = forward_logits(m, Tensor<float>::from(x.shape(), px));
    for (std::size_t r = 0; r < 6; ++r)
        for (std::size_t j = 0; j < 5; ++j) ASSERT_EQ(b.data()[r * 5 + j], a.data()[perm[r] * 5 + j]);
}

TEST(ViTForward, RejectsWrongInputShape) {
    auto m = build_vit<float>(tiny(), 1);
    EXPECT_THROW(forward_logits(m, Tensor<float>::zeros({1, 3, 8, 8})), ShapeError);
    EXPECT_THROW(forward_logits(m, Tensor<float>::zeros({2, 8, 8})), ShapeError);
}

TEST(Patchify, ChannelMajorRowColumnOrder) {
    // 2 channels, 4x4 image, 2-pixel patches; value encodes (c, y, x).
    std::vector<double> img(2 * 4 * 4);
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) img[(ch * 4 + y) * 4 + x] = 100 * ch + 10 * y + x;
    const auto p = patchify(Tensor<double>::from({2, 4, 4}, img), 2);
    ASSERT_EQ(p.shape(), (Shape{4, 8}));
    // Patch 1 is grid row 0, column 1: pixels x in {2,3}, y in {0,1}.
    const std::vector<double> want{2, 3, 12, 13, 102, 103, 112, 113};
    EXPECT_EQ(std::vector<double>(p.data().begin() + 8, p.data().begin() + 16), want);
    EXPECT_THROW(patchify(Tensor<double>::from({2, 4, 4}, img), 3), ShapeError);
}

TEST(ParamCount, EnumerationAgreesWithClosedFormOnRandomConfigs) {
    Rng rng(2024);
    for (int trial = 0; trial < 20; ++trial) {
        ViTConfig c;
        c.patch_size = 1 + rng.below(4);
        c.image_size = c.patch_size * (1 + rng.below(4));
        c.channels = 1 + rng.below(3);
        c.heads = 1 + rng.below(4);
        c.dim = c.heads * (1 + rng.below(6));
        c.depth = 1 + rng.below(6);
        c.mlp_ratio = 1 + rng.below(4);
        c.num_classes = 1 + rng.below(10);
        const auto m = build_vit<float>(c, 0, WeightInit::structure_only);
        // Independent hand tally of the architecture.
        const std::size_t d = c.dim, h = c.mlp_ratio * d, pd = c.patch_size * c.patch_size * c.channels;
        const std::size_t tokens = (c.image_size / c.patch_size) * (c.image_size / c.patch_size) + 1;
        const std::size_t per_block = d * 3 * d + 3 * d + d * d + d + d * h + h + h * d + d + 4 * d;
        const std::size_t want = pd * d + d + d + tokens * d + c.depth * per_block + 2 * d + d * c.num_classes + c.num_classes;
        EXPECT_EQ(param_count(m).total, want) << "trial " << trial;
        EXPECT_EQ(vit_param_count(c), want) << "trial " << trial;
    }
}

TEST(ParamCount, VitB16) {
    const auto c = ViTConfig::vit_b16(100);
    EXPECT_EQ(block_param_count(768, 4), 7087872u);
    EXPECT_EQ(vit_param_count(c), 85875556u);
    EXPECT_EQ(head_param_count(768, 100), 76900u);
    EXPECT_EQ(lora_param_count(12, 768, 1), 36864u);
}

TEST(ParamCount, MaskMismatchIsAUsageError) {
    const auto a = build_vit<float>(tiny(), 0);
    const auto b = expand_blocks(a, ExpansionSpec{1});
    const auto mask = build_freeze_mask(a, MaskStrategy::full());
    EXPECT_THROW(param_count(b, mask), UsageError);
}

TEST(ViTConfigTest, ValidateRejectsBadShapes) {
    auto c = tiny();
    c.heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = tiny();
    c.patch_size = 3;
    EXPECT_THROW(build_vit<float>(c, 0), ConfigError);
    c = tiny();
    c.depth = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ViTModelTest, CopiesAreDeep) {
    auto a = build_vit<float>(tiny(), 1);
    auto b = a;
    b.blocks[0].qkv_weight.data()[0] += 1.0f;
    b.head_bias.data()[0] += 1.0f;
    EXPECT_NE(a.blocks[0].qkv_weight.data()[0], b.blocks[0].qkv_weight.data()[0]);
    EXPECT_NE(a.head_bias.data()[0], b.head_bias.data()[0]);
}

TEST(ViTModelTest, SeededBuildIsDeterministic) {
    const auto a = build_vit<float>(ViTConfig::desk(4), 17);
    const auto b = build_vit<float>(ViTConfig::desk(4), 17);
    const auto c = build_vit<float>(ViTConfig::desk(4), 18);
    const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        ASSERT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
        differs |= !std::equal(pa[i].data().begin(), pa[i].data().end(), pc[i].data().begin());
    }
    EXPECT_TRUE(differs);
}

TEST(ViTModelTest, CastPreservesValuesWithinFloatRounding) {
    const auto a = build_vit<double>(tiny(), 4);
    const auto f = a.cast<float>();
    const auto x = random_probes<double>(tiny(), 2, 3);
    const auto la = forward_logits(a, x);
    const auto lf = forward_logits(f, random_probes<float>(tiny(), 2, 3));
    for (std::size_t i = 0; i < la.numel(); ++i) EXPECT_NEAR(la.data()[i], lf.data()[i], 1e-5);
}
