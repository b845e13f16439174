// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "peftvit/freeze_mask.hpp"
#include "peftvit/specs.hpp"
#include "peftvit/tensor.hpp"

namespace peftvit {

struct ViTConfig {
    std::size_t image_size = 224;
    std::size_t patch_size = 16;
    std::size_t channels = 3;
    std::size_t dim = 768;
    std::size_t depth = 12;
    std::size_t heads = 12;
    std::size_t mlp_ratio = 4;
    std::size_t num_classes = 1000;
    double eps = 1e-6;

    static ViTConfig vit_b16(std::size_t num_classes) { return {224, 16, 3, 768, 12, 12, 4, num_classes, 1e-6}; }

    /// CPU-sized model used by the experiment harness.
    static ViTConfig desk(std::size_t num_classes) { return {32, 8, 3, 64, 4, 4, 4, num_classes, 1e-6}; }

    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return patch_size * patch_size * channels; }
    std::size_t mlp_hidden() const { return mlp_ratio * dim; }

    void validate() const {
        if (image_size == 0 || patch_size == 0 || image_size % patch_size != 0)
            throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of patch_size " +
                              std::to_string(patch_size));
        if (channels == 0) throw ConfigError("channels must be >= 1");
        if (dim == 0 || heads == 0 || dim % heads != 0)
            throw ConfigError("dim " + std::to_string(dim) + " must be divisible by heads " + std::to_string(heads));
        if (depth < 1) throw ConfigError("depth must be >= 1");
        if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
        if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
        if (!(eps > 0)) throw ConfigError("eps must be positive");
    }

    bool operator==(const ViTConfig&) const = default;
};

// Closed-form parameter counts.

constexpr std::size_t block_param_count(std::size_t dim, std::size_t mlp_ratio) {
    const std::size_t m = mlp_ratio * dim;
    return (3 * dim * dim + 3 * dim)  // qkv
           + (dim * dim + dim)        // attention output
           + (dim * m + m)            // mlp up
           + (m * dim + dim)          // mlp down
           + 4 * dim;                 // two layer norms
}

constexpr std::size_t head_param_count(std::size_t dim, std::size_t num_classes) { return dim * num_classes + num_classes; }

constexpr std::size_t lora_param_count(std::size_t depth, std::size_t dim, std::size_t rank) {
    return depth * 2 * (dim * rank + rank * dim);
}

inline std::size_t vit_param_count(const ViTConfig& c) {
    return c.patch_dim() * c.dim + c.dim  // patch embedding
           + c.dim                        // class token
           + c.tokens() * c.dim           // positional embedding
           + c.depth * block_param_count(c.dim, c.mlp_ratio) + 2 * c.dim + head_param_count(c.dim, c.num_classes);
}

enum class BlockOrigin { original, expanded };

inline const char* to_string(BlockOrigin o) { return o == BlockOrigin::original ? "original" : "expanded"; }

template <Real T>
struct LoraPair {
    Tensor<T> a;  // [dim, rank]
    Tensor<T> b;  // [rank, dim]
};

/// Pre-norm transformer block. The fused qkv weight is [dim, 3*dim] with
/// column blocks ordered Q, K, V.
template <Real T>
struct TransformerBlock {
    Tensor<T> ln1_gamma, ln1_beta;
    Tensor<T> qkv_weight, qkv_bias;
    Tensor<T> proj_weight, proj_bias;
    Tensor<T> ln2_gamma, ln2_beta;
    Tensor<T> fc1_weight, fc1_bias;
    Tensor<T> fc2_weight, fc2_bias;
    BlockOrigin origin = BlockOrigin::original;
    std::optional<LoraPair<T>> lora_q;
    std::optional<LoraPair<T>> lora_v;

    bool has_lora() const { return lora_q.has_value(); }

    template <typename Self, typename F>
    static void visit(Self& self, const std::string& prefix, F&& f) {
        f(prefix + "ln1.gamma", self.ln1_gamma);
        f(prefix + "ln1.beta", self.ln1_beta);
        f(prefix + "attn.qkv.weight", self.qkv_weight);
        f(prefix + "attn.qkv.bias", self.qkv_bias);
        if (self.lora_q) {
            f(prefix + "attn.lora_q.a", self.lora_q->a);
            f(prefix + "attn.lora_q.b", self.lora_q->b);
        }
        if (self.lora_v) {
            f(prefix + "attn.lora_v.a", self.lora_v->a);
            f(prefix + "attn.lora_v.b", self.lora_v->b);
        }
        f(prefix + "attn.proj.weight", self.proj_weight);
        f(prefix + "attn.proj.bias", self.proj_bias);
        f(prefix + "ln2.gamma", self.ln2_gamma);
        f(prefix + "ln2.beta", self.ln2_beta);
        f(prefix + "mlp.fc1.weight", self.fc1_weight);
        f(prefix + "mlp.fc1.bias", self.fc1_bias);
        f(prefix + "mlp.fc2.weight", self.fc2_weight);
        f(prefix + "mlp.fc2.bias", self.fc2_bias);
    }
};

/// Vision Transformer parameters plus the surgery applied to them.
///
/// Copies are deep: copying a model clones every parameter tensor, so
/// transformations that take a model by const reference and return a new one
/// never alias the input.
template <Real T>
class ViTModel {
public:
    ViTConfig config;
    Tensor<T> patch_weight;  // [patch_dim, dim]
    Tensor<T> patch_bias;    // [dim]
    Tensor<T> cls_token;     // [dim]
    Tensor<T> pos_embed;     // [tokens, dim]
    std::vector<TransformerBlock<T>> blocks;
    Tensor<T> norm_gamma, norm_beta;
    Tensor<T> head_weight;  // [dim, num_classes]
    Tensor<T> head_bias;    // [num_classes]

    std::optional<AdapterSpec> lora;
    std::vector<ExpansionSpec> expansions;

    ViTModel() = default;
    ViTModel(ViTModel&&) noexcept = default;
    ViTModel& operator=(ViTModel&&) noexcept = default;

    ViTModel(const ViTModel& other)
        : config(other.config),
          patch_weight(other.patch_weight),
          patch_bias(other.patch_bias),
          cls_token(other.cls_token),
          pos_embed(other.pos_embed),
          blocks(other.blocks),
          norm_gamma(other.norm_gamma),
          norm_beta(other.norm_beta),
          head_weight(other.head_weight),
          head_bias(other.head_bias),
          lora(other.lora),
          expansions(other.expansions) {
        visit_parameters([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    }

    ViTModel& operator=(const ViTModel& other) {
        if (this != &other) {
            ViTModel tmp(other);
            *this = std::move(tmp);
        }
        return *this;
    }

    std::size_t depth() const { return blocks.size(); }
    bool has_lora() const { return lora.has_value(); }
    bool has_expanded_blocks() const {
        for (const auto& b : blocks)
            if (b.origin == BlockOrigin::expanded) return true;
        return false;
    }

    /// Visits every parameter tensor in canonical order with its dotted name.
    template <typename F>
    void visit_parameters(F&& f) {
        visit_impl(*this, f);
    }
    template <typename F>
    void visit_parameters(F&& f) const {
        visit_impl(*this, f);
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        visit_parameters([&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
        return out;
    }

    std::vector<std::string> parameter_names() const {
        std::vector<std::string> out;
        visit_parameters([&](const std::string& n, const Tensor<T>&) { out.push_back(n); });
        return out;
    }

    /// Same model in another precision.
    template <Real U>
    ViTModel<U> cast() const {
        ViTModel<U> out;
        out.config = config;
        out.lora = lora;
        out.expansions = expansions;
        auto conv = [](const Tensor<T>& t) {
            std::vector<U> d(t.data().begin(), t.data().end());
            auto r = Tensor<U>::from(t.shape(), std::move(d));
            r.set_requires_grad(t.requires_grad());
            return r;
        };
        out.patch_weight = conv(patch_weight);
        out.patch_bias = conv(patch_bias);
        out.cls_token = conv(cls_token);
        out.pos_embed = conv(pos_embed);
        for (const auto& b : blocks) {
            TransformerBlock<U> nb;
            nb.ln1_gamma = conv(b.ln1_gamma);
            nb.ln1_beta = conv(b.ln1_beta);
            nb.qkv_weight = conv(b.qkv_weight);
            nb.qkv_bias = conv(b.qkv_bias);
            nb.proj_weight = conv(b.proj_weight);
            nb.proj_bias = conv(b.proj_bias);
            nb.ln2_gamma = conv(b.ln2_gamma);
            nb.ln2_beta = conv(b.ln2_beta);
            nb.fc1_weight = conv(b.fc1_weight);
            nb.fc1_bias = conv(b.fc1_bias);
            nb.fc2_weight = conv(b.fc2_weight);
            nb.fc2_bias = conv(b.fc2_bias);
            nb.origin = b.origin;
            if (b.lora_q) nb.lora_q = LoraPair<U>{conv(b.lora_q->a), conv(b.lora_q->b)};
            if (b.lora_v) nb.lora_v = LoraPair<U>{conv(b.lora_v->a), conv(b.lora_v->b)};
            out.blocks.push_back(std::move(nb));
        }
        out.norm_gamma = conv(norm_gamma);
        out.norm_beta = conv(norm_beta);
        out.head_weight = conv(head_weight);
        out.head_bias = conv(head_bias);
        return out;
    }

private:
    template <typename Self, typename F>
    static void visit_impl(Self& self, F& f) {
        f(std::string("patch_embed.weight"), self.patch_weight);
        f(std::string("patch_embed.bias"), self.patch_bias);
        f(std::string("cls_token"), self.cls_token);
        f(std::string("pos_embed"), self.pos_embed);
        for (std::size_t i = 0; i < self.blocks.size(); ++i)
            TransformerBlock<T>::visit(self.blocks[i], "blocks." + std::to_string(i) + ".", f);
        f(std::string("norm.gamma"), self.norm_gamma);
        f(std::string("norm.beta"), self.norm_beta);
        f(std::string("head.weight"), self.head_weight);
        f(std::string("head.bias"), self.head_bias);
    }
};

namespace detail {

template <Real T>
TransformerBlock<T> init_block(const ViTConfig& c, std::uint64_t seed, std::size_t index, bool random) {
    const std::size_t d = c.dim, m = c.mlp_hidden();
    auto w = [&](Shape s, const char* tag) {
        return random ? Tensor<T>::seeded_normal(std::move(s), derive_seed(seed, tag, index), 0.0, 0.02)
                      : Tensor<T>::zeros(std::move(s));
    };
    TransformerBlock<T> b;
    b.ln1_gamma = Tensor<T>::constant({d}, T(1));
    b.ln1_beta = Tensor<T>::zeros({d});
    b.qkv_weight = w({d, 3 * d}, "qkv");
    b.qkv_bias = Tensor<T>::zeros({3 * d});
    b.proj_weight = w({d, d}, "proj");
    b.proj_bias = Tensor<T>::zeros({d});
    b.ln2_gamma = Tensor<T>::constant({d}, T(1));
    b.ln2_beta = Tensor<T>::zeros({d});
    b.fc1_weight = w({d, m}, "fc1");
    b.fc1_bias = Tensor<T>::zeros({m});
    b.fc2_weight = w({m, d}, "fc2");
    b.fc2_bias = Tensor<T>::zeros({d});
    return b;
}

}  // namespace detail

/// `structure_only` allocates every tensor with zero weights; it exists for
/// parameter accounting on large configurations.
enum class WeightInit { seeded, structure_only };

/// Fresh model: weights N(0, 0.02), biases and layer-norm betas zero,
/// layer-norm gammas one. Each tensor draws from its own seed derived from
/// `seed` and its role, so the result is a pure function of (config, seed).
template <Real T = float>
ViTModel<T> build_vit(const ViTConfig& config, std::uint64_t seed, WeightInit init = WeightInit::seeded) {
    config.validate();
    const std::size_t d = config.dim;
    const bool random = init == WeightInit::seeded;
    auto w = [&](Shape s, const char* tag) {
        return random ? Tensor<T>::seeded_normal(std::move(s), derive_seed(seed, tag), 0.0, 0.02)
                      : Tensor<T>::zeros(std::move(s));
    };
    ViTModel<T> m;
    m.config = config;
    m.patch_weight = w({config.patch_dim(), d}, "patch_embed");
    m.patch_bias = Tensor<T>::zeros({d});
    m.cls_token = w({d}, "cls_token");
    m.pos_embed = w({config.tokens(), d}, "pos_embed");
    for (std::size_t i = 0; i < config.depth; ++i) m.blocks.push_back(detail::init_block<T>(config, seed, i, random));
    m.norm_gamma = Tensor<T>::constant({d}, T(1));
    m.norm_beta = Tensor<T>::zeros({d});
    m.head_weight = w({d, config.num_classes}, "head");
    m.head_bias = Tensor<T>::zeros({config.num_classes});
    return m;
}

/// Replaces the classifier with a freshly initialized one for `num_classes`.
template <Real T>
void replace_head(ViTModel<T>& model, std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    model.config.num_classes = num_classes;
    model.head_weight = Tensor<T>::seeded_normal({model.config.dim, num_classes}, derive_seed(seed, "head"), 0.0, 0.02);
    model.head_bias = Tensor<T>::zeros({num_classes});
}

/// image [C, H, W] -> [num_patches, patch*patch*C]. Patches are taken in
/// row-major grid order; each is flattened channel-major, then row, then
/// column: index = c*p*p + dy*p + dx.
template <Real T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
    if (image.rank() != 3) throw ShapeError("patchify expects [C,H,W], got " + shape_str(image.shape()));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("image " + shape_str(image.shape()) + " not divisible into " + std::to_string(patch) +
                         "-pixel patches");
    const std::size_t gh = h / patch, gw = w / patch, pd = patch * patch * c;
    std::vector<T> out(gh * gw * pd);
    const auto src = image.data();
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            T* dst = out.data() + (py * gw + px) * pd;
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t dy = 0; dy < patch; ++dy)
                    for (std::size_t dx = 0; dx < patch; ++dx)
                        dst[ch * patch * patch + dy * patch + dx] =
                            src[(ch * h + py * patch + dy) * w + px * patch + dx];
        }
    return Tensor<T>::from({gh * gw, pd}, std::move(out));
}

/// batch [B, C, H, W] -> [B, num_patches, patch_dim]. Images are inputs, so
/// the result carries no gradient.
template <Real T>
Tensor<T> patchify_batch(const Tensor<T>& batch, std::size_t patch) {
    if (batch.rank() != 4) throw ShapeError("expected a batch [B,C,H,W], got " + shape_str(batch.shape()));
    const std::size_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const std::size_t per = c * h * w;
    std::vector<T> out;
    Shape ps;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<T> img(batch.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                           batch.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
        auto p = patchify(Tensor<T>::from({c, h, w}, std::move(img)), patch);
        ps = p.shape();
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return Tensor<T>::from({b, ps[0], ps[1]}, std::move(out));
}

/// x + Attn(LN1(x)), then x + MLP(LN2(x)).
template <Real T>
Tensor<T> block_forward(const TransformerBlock<T>& blk, const Tensor<T>& x, const ViTConfig& cfg, T lora_scale) {
    const std::size_t d = cfg.dim;
    auto h = layer_norm(x, blk.ln1_gamma, blk.ln1_beta, cfg.eps);
    auto qkv = add(matmul(h, blk.qkv_weight), blk.qkv_bias);
    auto q = slice_last(qkv, 0, d);
    auto k = slice_last(qkv, d, d);
    auto v = slice_last(qkv, 2 * d, d);
    if (blk.lora_q) q = add(q, scale(matmul(matmul(h, blk.lora_q->a), blk.lora_q->b), lora_scale));
    if (blk.lora_v) v = add(v, scale(matmul(matmul(h, blk.lora_v->a), blk.lora_v->b), lora_scale));
    auto attn = multi_head_attention(q, k, v, cfg.heads);
    auto x1 = add(x, add(matmul(attn, blk.proj_weight), blk.proj_bias));
    auto h2 = layer_norm(x1, blk.ln2_gamma, blk.ln2_beta, cfg.eps);
    auto mlp = add(matmul(gelu(add(matmul(h2, blk.fc1_weight), blk.fc1_bias)), blk.fc2_weight), blk.fc2_bias);
    return add(x1, mlp);
}

template <Real T>
void check_batch(const ViTModel<T>& model, const Tensor<T>& batch) {
    const auto& c = model.config;
    if (batch.rank() != 4 || batch.dim(1) != c.channels || batch.dim(2) != c.image_size || batch.dim(3) != c.image_size)
        throw ShapeError("batch " + shape_str(batch.shape()) + " does not match model input [B," +
                         std::to_string(c.channels) + "," + std::to_string(c.image_size) + "," +
                         std::to_string(c.image_size) + "]");
}

/// Backbone features: the class token after the final layer norm, [B, dim].
template <Real T>
Tensor<T> forward_features(const ViTModel<T>& model, const Tensor<T>& batch) {
    check_batch(model, batch);
    const auto& cfg = model.config;
    const T lora_scale = model.lora ? static_cast<T>(model.lora->scale()) : T(1);
    auto patches = patchify_batch(batch, cfg.patch_size);
    auto x = add(matmul(patches, model.patch_weight), model.patch_bias);
    x = add(prepend_token(x, model.cls_token), model.pos_embed);
    for (const auto& blk : model.blocks) x = block_forward(blk, x, cfg, lora_scale);
    return layer_norm(select_token(x, 0), model.norm_gamma, model.norm_beta, cfg.eps);
}

template <Real T>
Tensor<T> forward_logits(const ViTModel<T>& model, const Tensor<T>& batch) {
    auto f = forward_features(model, batch);
    return add(matmul(f, model.head_weight), model.head_bias);
}

struct ParamCount {
    std::size_t total = 0;
    std::size_t trainable = 0;
};

/// Exact scalar counts; every parameter counts as trainable when no mask is
/// given.
template <Real T>
ParamCount param_count(const ViTModel<T>& model, const FreezeMask* mask = nullptr) {
    ParamCount pc;
    std::size_t i = 0;
    if (mask && mask->names.size() != mask->trainable.size())
        throw UsageError("freeze mask names and flags disagree in length");
    model.visit_parameters([&](const std::string& name, const Tensor<T>& t) {
        pc.total += t.numel();
        if (!mask) {
            pc.trainable += t.numel();
        } else {
            if (i >= mask->size() || mask->names[i] != name)
                throw UsageError("freeze mask does not match model parameter '" + name + "'");
            if ((*mask)[i]) pc.trainable += t.numel();
        }
        ++i;
    });
    if (mask && i != mask->size()) throw UsageError("freeze mask has entries for parameters the model lacks");
    return pc;
}

template <Real T>
ParamCount param_count(const ViTModel<T>& model, const FreezeMask& mask) {
    return param_count(model, &mask);
}

}  // namespace peftvit
