// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "peftvit/error.hpp"
#include "peftvit/rng.hpp"
#include "peftvit/tensor.hpp"

namespace peftvit {

/// Labelled images in [0, 1], stored [n, channels, size, size], with a fixed
/// 80/20 train/validation split.
struct Dataset {
    std::string name;
    std::uint64_t seed = 0;
    std::size_t num_classes = 0;
    std::size_t channels = 3;
    std::size_t image_size = 0;
    std::vector<float> images;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> train;  // indices
    std::vector<std::size_t> val;

    std::size_t size() const { return labels.size(); }
    std::size_t image_numel() const { return channels * image_size * image_size; }

    template <Real T>
    Tensor<T> batch(std::span<const std::size_t> indices) const {
        const std::size_t per = image_numel();
        std::vector<T> out(indices.size() * per);
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const float* src = images.data() + indices[i] * per;
            std::copy(src, src + per, out.begin() + static_cast<std::ptrdiff_t>(i * per));
        }
        return Tensor<T>::from({indices.size(), channels, image_size, image_size}, std::move(out));
    }

    std::vector<std::size_t> labels_of(std::span<const std::size_t> indices) const {
        std::vector<std::size_t> out;
        out.reserve(indices.size());
        for (auto i : indices) out.push_back(labels[i]);
        return out;
    }
};

namespace detail {

inline void assign_split(Dataset& ds) {
    std::vector<std::size_t> perm(ds.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(derive_seed(ds.seed, "split/" + ds.name));
    rng.shuffle(perm.begin(), perm.end());
    const std::size_t n_train = ds.size() * 4 / 5;
    ds.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    ds.val.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
    std::sort(ds.train.begin(), ds.train.end());
    std::sort(ds.val.begin(), ds.val.end());
}

struct Blob {
    double x, y, radius;
    std::array<double, 3> amp;
};

struct ClassPrototype {
    std::vector<Blob> blobs;
    double theta, freq;
};

}  // namespace detail

/// Procedural class-conditional images. Each class of a domain has a layout
/// of coloured Gaussian blobs overlaid with an oriented grating; the class
/// prototypes depend only on the domain name. Per-image translation, blob
/// scale, grating phase, contrast, brightness and pixel noise come from
/// `seed`. Labels cycle through the classes so every class is present.
inline Dataset gen_domain(const std::string& name, std::uint64_t seed, std::size_t num_classes, std::size_t n,
                          std::size_t image_size, std::size_t channels = 3) {
    if (num_classes < 2) throw InputError("a domain needs at least 2 classes");
    if (n < num_classes) throw InputError("n=" + std::to_string(n) + " is smaller than the class count");
    if (image_size < 2) throw InputError("image_size must be at least 2");
    if (channels < 1 || channels > 3) throw InputError("channels must be 1, 2 or 3");

    constexpr double pi = std::numbers::pi;
    Rng proto(derive_seed(0, "domain/" + name));
    const double offset = proto.uniform(0, pi);
    std::vector<detail::ClassPrototype> classes(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& k = classes[c];
        k.blobs.resize(3);
        for (auto& b : k.blobs) {
            b.x = proto.uniform(0.2, 0.8);
            b.y = proto.uniform(0.2, 0.8);
            b.radius = proto.uniform(0.08, 0.18);
            for (auto& a : b.amp) a = proto.uniform(-0.35, 0.35);
        }
        k.theta = offset + pi * static_cast<double>(c) / static_cast<double>(num_classes);
        k.freq = proto.uniform(2.0, 4.0);
    }

    Dataset ds;
    ds.name = name;
    ds.seed = seed;
    ds.num_classes = num_classes;
    ds.channels = channels;
    ds.image_size = image_size;
    ds.labels.resize(n);
    ds.images.resize(n * ds.image_numel());

    Rng rng(derive_seed(seed, "images/" + name));
    const double inv = 1.0 / static_cast<double>(image_size);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t label = i % num_classes;
        ds.labels[i] = label;
        const auto& k = classes[label];
        const double dx = rng.uniform(-0.08, 0.08), dy = rng.uniform(-0.08, 0.08);
        const double size = rng.uniform(0.85, 1.15);
        const double t = k.theta + rng.normal(0, 0.05);
        const double ph = rng.uniform(0, 2 * pi);
        const double contrast = rng.uniform(0.7, 1.0);
        const double brightness = rng.uniform(-0.1, 0.1);
        const double ct = std::cos(t), st = std::sin(t);
        float* img = ds.images.data() + i * ds.image_numel();
        for (std::size_t y = 0; y < image_size; ++y) {
            for (std::size_t x = 0; x < image_size; ++x) {
                const double u = (static_cast<double>(x) + 0.5) * inv, v = (static_cast<double>(y) + 0.5) * inv;
                const double wave = 0.12 * std::sin(2 * pi * k.freq * (u * ct + v * st) + ph);
                std::array<double, 3> px{};
                for (const auto& b : k.blobs) {
                    const double r = b.radius * size;
                    const double d2 = (u - b.x - dx) * (u - b.x - dx) + (v - b.y - dy) * (v - b.y - dy);
                    const double w = std::exp(-d2 / (2 * r * r));
                    for (std::size_t ch = 0; ch < 3; ++ch) px[ch] += b.amp[ch] * w;
                }
                for (std::size_t ch = 0; ch < channels; ++ch) {
                    const double val = 0.5 + brightness + contrast * (px[ch] + wave) + rng.normal(0, 0.08);
                    img[(ch * image_size + y) * image_size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
            }
        }
    }
    detail::assign_split(ds);
    return ds;
}

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw FormatError("truncated IDX header in " + path);
    return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace detail

/// Loads an IDX image file (magic 0x00000803: n x rows x cols unsigned bytes)
/// and an IDX label file (magic 0x00000801) as a single-channel dataset.
/// Pixels are scaled to [0, 1]; the class count is max(label) + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::uint64_t seed,
                        const std::string& name = "idx") {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw IoError("cannot open " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw IoError("cannot open " + labels_path);

    if (detail::read_be32(img, images_path) != 0x00000803)
        throw FormatError(images_path + " is not an IDX ubyte image file (magic 0x00000803)");
    const std::size_t n = detail::read_be32(img, images_path);
    const std::size_t rows = detail::read_be32(img, images_path);
    const std::size_t cols = detail::read_be32(img, images_path);
    if (rows != cols || rows == 0) throw FormatError("IDX images must be square and non-empty");
    if (detail::read_be32(lab, labels_path) != 0x00000801)
        throw FormatError(labels_path + " is not an IDX ubyte label file (magic 0x00000801)");
    if (detail::read_be32(lab, labels_path) != n) throw FormatError("IDX image and label counts differ");

    Dataset ds;
    ds.name = name;
    ds.seed = seed;
    ds.channels = 1;
    ds.image_size = rows;
    std::vector<unsigned char> pixels(n * rows * cols);
    if (!img.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        throw FormatError("truncated IDX image payload in " + images_path);
    std::vector<unsigned char> labels(n);
    if (!lab.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(labels.size())))
        throw FormatError("truncated IDX label payload in " + labels_path);
    ds.images.resize(pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i) ds.images[i] = static_cast<float>(pixels[i]) / 255.0f;
    ds.labels.assign(labels.begin(), labels.end());
    std::size_t max_label = 0;
    for (auto l : ds.labels) max_label = std::max(max_label, l);
    ds.num_classes = n == 0 ? 0 : max_label + 1;
    if (n < 2) throw InputError("IDX dataset needs at least 2 samples");
    detail::assign_split(ds);
    return ds;
}

}  // namespace peftvit
