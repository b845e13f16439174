// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include "peftvit/data.hpp"

using namespace peftvit;

TEST(GenDomain, DeterministicForSameArguments) {
    const auto a = gen_domain("src", 3, 4, 40, 16);
    const auto b = gen_domain("src", 3, 4, 40, 16);
    EXPECT_EQ(a.images, b.images);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_EQ(a.train, b.train);
    const auto c = gen_domain("src", 4, 4, 40, 16);
    EXPECT_NE(a.images, c.images);
}

TEST(GenDomain, ContractForTinyDomain) {
    const auto d = gen_domain("t", 1, 2, 10, 8);
    EXPECT_EQ(d.size(), 10u);
    EXPECT_EQ(d.images.size(), 10u * 3 * 8 * 8);
    for (auto l : d.labels) EXPECT_LT(l, 2u);
    EXPECT_TRUE(std::all_of(d.images.begin(), d.images.end(), [](float v) { return v >= 0 && v <= 1; }));
}

TEST(GenDomain, SplitIsDisjointEightyTwenty) {
    const auto d = gen_domain("s", 9, 5, 103, 8);
    EXPECT_EQ(d.train.size(), 103u * 4 / 5);
    EXPECT_EQ(d.train.size() + d.val.size(), 103u);
    std::set<std::size_t> all(d.train.begin(), d.train.end());
    for (auto v : d.val) EXPECT_TRUE(all.insert(v).second);
    EXPECT_EQ(all.size(), 103u);
    EXPECT_TRUE(std::is_sorted(d.train.begin(), d.train.end()));
}

TEST(GenDomain, EveryClassPresent) {
    const auto d = gen_domain("c", 2, 7, 21, 8);
    EXPECT_EQ(std::set<std::size_t>(d.labels.begin(), d.labels.end()).size(), 7u);
}

TEST(GenDomain, DomainsDifferByName) {
    const auto a = gen_domain("alpha", 1, 3, 9, 8);
    const auto b = gen_domain("beta", 1, 3, 9, 8);
    EXPECT_NE(a.images, b.images);
}

TEST(GenDomain, InvalidCounts) {
    EXPECT_THROW(gen_domain("x", 1, 1, 10, 8), InputError);
    EXPECT_THROW(gen_domain("x", 1, 5, 4, 8), InputError);
    EXPECT_THROW(gen_domain("x", 1, 2, 10, 1), InputError);
    EXPECT_THROW(gen_domain("x", 1, 2, 10, 8, 4), InputError);
}

TEST(Dataset, BatchGathersImages) {
    const auto d = gen_domain("b", 1, 2, 6, 4);
    const std::vector<std::size_t> idx{4, 1};
    const auto t = d.batch<double>(idx);
    ASSERT_EQ(t.shape(), (Shape{2, 3, 4, 4}));
    EXPECT_EQ(t.data()[0], static_cast<double>(d.images[4 * 48]));
    EXPECT_EQ(t.data()[48 + 5], static_cast<double>(d.images[48 + 5]));
    EXPECT_EQ(d.labels_of(idx), (std::vector<std::size_t>{d.labels[4], d.labels[1]}));
}

namespace {
void write_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}
}  // namespace

TEST(Idx, LoadsImagesAndLabels) {
    const auto dir = std::filesystem::temp_directory_path() / "peftvit_idx_test";
    std::filesystem::create_directories(dir);
    const auto img = (dir / "img.idx").string(), lab = (dir / "lab.idx").string();
    {
        std::ofstream f(img, std::ios::binary);
        write_be32(f, 0x803);
        write_be32(f, 5);
        write_be32(f, 2);
        write_be32(f, 2);
        for (int i = 0; i < 20; ++i) f.put(static_cast<char>(i * 10));
        std::ofstream g(lab, std::ios::binary);
        write_be32(g, 0x801);
        write_be32(g, 5);
        for (int l : {0, 2, 1, 2, 0}) g.put(static_cast<char>(l));
    }
    const auto d = load_idx(img, lab, 3);
    EXPECT_EQ(d.size(), 5u);
    EXPECT_EQ(d.channels, 1u);
    EXPECT_EQ(d.image_size, 2u);
    EXPECT_EQ(d.num_classes, 3u);
    EXPECT_FLOAT_EQ(d.images[5], 50.0f / 255.0f);
    EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 2, 1, 2, 0}));
    EXPECT_EQ(d.train.size(), 4u);

    EXPECT_THROW(load_idx(lab, img, 3), FormatError);  // magics swapped
    EXPECT_THROW(load_idx((dir / "missing").string(), lab, 3), IoError);
    {
        std::ofstream f(img, std::ios::binary);
        write_be32(f, 0x803);
        write_be32(f, 5);
        write_be32(f, 2);
        write_be32(f, 2);
        f.put(1);
    }
    EXPECT_THROW(load_idx(img, lab, 3), FormatError);
    std::filesystem::remove_all(dir);
}
