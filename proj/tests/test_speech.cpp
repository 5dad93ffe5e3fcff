// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "phonecot/speech.hpp"

using namespace phonecot;

namespace {

PhonemeInventory tiny_inventory(int n = 30) {
    PhonemeInventory inv;
    for (int i = 0; i < n; ++i) inv.symbols.push_back(codepoint_to_utf8(0x250 + uint32_t(i)));
    return inv;
}

}  // namespace

TEST_CASE("feature synthesis handles the empty string") {
    SpeechSynthesizer synth(tiny_inventory(), 7);
    Rng rng(1);
    auto frames = synth.synthesize("", 0, rng);
    CHECK(frames.rows() == 0);
}

TEST_CASE("zero noise and zero speaker offset reproduce the prototypes exactly") {
    SpeechConfig cfg;
    cfg.sigma_noise = 0.0;
    cfg.sigma_speaker = 0.0;
    auto inv = tiny_inventory();
    SpeechSynthesizer synth(inv, 7, cfg);
    Rng rng(2);
    const std::string phonemes = inv.symbols[0] + inv.symbols[1];
    auto frames = synth.synthesize(phonemes, 123, rng);
    REQUIRE(frames.rows() >= 4);
    int t = 0;
    for (int p = 0; p < 2; ++p) {
        const int row = synth.prototype_row(inv.symbols[size_t(p)]);
        while (t < frames.rows()) {
            if ((frames.row(t) - synth.prototypes().row(row)).norm() > 0) break;
            ++t;
        }
    }
    CHECK(t == frames.rows());
}

TEST_CASE("frames per phoneme stay in the configured range") {
    auto inv = tiny_inventory();
    SpeechSynthesizer synth(inv, 7);
    Rng rng(3);
    const std::string phonemes = inv.symbols[4];
    for (int i = 0; i < 200; ++i) {
        auto frames = synth.synthesize(phonemes, 0, rng);
        CHECK(frames.rows() >= 2);
        CHECK(frames.rows() <= 4);
    }
}

TEST_CASE("unknown phoneme symbols are rejected") {
    SpeechSynthesizer synth(tiny_inventory(4), 7);
    Rng rng(4);
    CHECK_THROWS_AS(synth.synthesize("Q", 0, rng), Error);
}

TEST_CASE("nearest-prototype classification recovers the emitting phoneme") {
    auto inv = tiny_inventory();
    SpeechSynthesizer synth(inv, 7);
    Rng rng(5);
    int total = 0, correct = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const auto& sym = inv.symbols[size_t(rng.below(inv.symbols.size()))];
        const int truth = synth.prototype_row(sym);
        auto frames = synth.synthesize(sym, rng.u64(), rng);
        for (Eigen::Index t = 0; t < frames.rows(); ++t) {
            double best = 1e300;
            int arg = -1;
            for (Eigen::Index r = 0; r < synth.prototypes().rows(); ++r) {
                const double d = (frames.row(t) - synth.prototypes().row(r)).squaredNorm();
                if (d < best) {
                    best = d;
                    arg = int(r);
                }
            }
            ++total;
            correct += (arg == truth);
        }
    }
    CHECK(double(correct) / double(total) >= 0.99);
}

TEST_CASE("k-means separates two well-separated clouds") {
    Rng rng(6);
    FrameMatrix frames(200, 4);
    for (int i = 0; i < 200; ++i) {
        const double center = (i < 100) ? -10.0 : 10.0;
        for (int d = 0; d < 4; ++d) frames(i, d) = float(center + rng.normal() * 0.1);
    }
    auto cb = train_codebook(frames, 2, 50, 1);
    std::vector<double> c0(4), c1(4);
    const bool first_negative = cb.centroids(0, 0) < 0;
    const int neg = first_negative ? 0 : 1;
    const int pos = 1 - neg;
    for (int d = 0; d < 4; ++d) {
        CHECK(cb.centroids(neg, d) == Catch::Approx(-10.0).margin(0.05));
        CHECK(cb.centroids(pos, d) == Catch::Approx(10.0).margin(0.05));
    }
}

TEST_CASE("k-means inertia is non-increasing") {
    Rng rng(7);
    FrameMatrix frames(500, 8);
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
        for (Eigen::Index d = 0; d < frames.cols(); ++d) frames(i, d) = float(rng.normal());
    auto cb = train_codebook(frames, 16, 40, 2);
    REQUIRE(cb.meta.inertia_per_iter.size() >= 2);
    for (size_t i = 1; i < cb.meta.inertia_per_iter.size(); ++i)
        CHECK(cb.meta.inertia_per_iter[i] <= cb.meta.inertia_per_iter[i - 1] + 1e-6);
}

TEST_CASE("k-means on noise-free prototype frames recovers the prototypes bijectively") {
    auto inv = tiny_inventory();
    SpeechConfig cfg;
    cfg.sigma_noise = 0.0;
    cfg.sigma_speaker = 0.0;
    SpeechSynthesizer synth(inv, 7, cfg);
    Rng rng(8);
    std::string all;
    for (const auto& s : inv.symbols) all += s;
    std::vector<FrameMatrix> parts;
    for (int rep = 0; rep < 8; ++rep) parts.push_back(synth.synthesize(all, 0, rng));
    Eigen::Index rows = 0;
    for (auto& p : parts) rows += p.rows();
    FrameMatrix frames(rows, cfg.feat_dim);
    Eigen::Index at = 0;
    for (auto& p : parts) {
        frames.middleRows(at, p.rows()) = p;
        at += p.rows();
    }

    auto cb = train_codebook(frames, 30, 100, 3);

    // Greedy assignment oracle: repeatedly match the closest (centroid,
    // prototype) pair; every match must be within epsilon and bijective.
    std::set<int> used_c, used_p;
    for (int step = 0; step < 30; ++step) {
        double best = 1e300;
        int bc = -1, bp = -1;
        for (int c = 0; c < 30; ++c) {
            if (used_c.count(c)) continue;
            for (int p = 0; p < 30; ++p) {
                if (used_p.count(p)) continue;
                const double d = (cb.centroids.row(c) - synth.prototypes().row(p)).norm();
                if (d < best) {
                    best = d;
                    bc = c;
                    bp = p;
                }
            }
        }
        REQUIRE(bc >= 0);
        used_c.insert(bc);
        used_p.insert(bp);
        CHECK(best <= 1e-6);
    }
}

TEST_CASE("k-means rejects inputs with fewer than k distinct frames") {
    FrameMatrix frames = FrameMatrix::Zero(50, 4);
    for (int i = 0; i < 50; ++i) frames(i, 0) = float(i % 3);
    CHECK_THROWS_AS(train_codebook(frames, 4, 10, 1), Error);
}

TEST_CASE("codebook training is bit-reproducible for a fixed seed") {
    Rng rng(9);
    FrameMatrix frames(400, 6);
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
        for (Eigen::Index d = 0; d < frames.cols(); ++d) frames(i, d) = float(rng.normal());
    auto a = train_codebook(frames, 12, 30, 4);
    auto b = train_codebook(frames, 12, 30, 4);
    CHECK(std::memcmp(a.centroids.data(), b.centroids.data(),
                      sizeof(float) * size_t(a.centroids.size())) == 0);
}

TEST_CASE("quantize maps centroids to the identity sequence") {
    Rng rng(10);
    FrameMatrix frames(24, 5);
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
        for (Eigen::Index d = 0; d < frames.cols(); ++d) frames(i, d) = float(rng.normal() * 3);
    auto cb = train_codebook(frames, 8, 30, 5);
    auto seq = quantize(cb.centroids, cb);
    REQUIRE(seq.units.size() == 8);
    for (int i = 0; i < 8; ++i) CHECK(seq.units[size_t(i)] == i);
}

TEST_CASE("quantize of an empty sequence is empty") {
    Codebook cb;
    cb.centroids = FrameMatrix::Random(4, 3);
    FrameMatrix empty(0, 3);
    CHECK(quantize(empty, cb).units.empty());
}

TEST_CASE("quantize agrees with a brute-force nearest-centroid scan") {
    Rng rng(11);
    FrameMatrix frames(1000, 7);
    for (Eigen::Index i = 0; i < frames.rows(); ++i)
        for (Eigen::Index d = 0; d < frames.cols(); ++d) frames(i, d) = float(rng.normal());
    Codebook cb;
    cb.centroids.resize(20, 7);
    for (Eigen::Index i = 0; i < cb.centroids.rows(); ++i)
        for (Eigen::Index d = 0; d < cb.centroids.cols(); ++d)
            cb.centroids(i, d) = float(rng.normal());

    auto seq = quantize(frames, cb);
    for (Eigen::Index i = 0; i < frames.rows(); ++i) {
        double best = 1e300;
        int arg = 0;
        for (int c = 0; c < cb.k(); ++c) {
            double acc = 0.0;
            for (Eigen::Index d = 0; d < frames.cols(); ++d) {
                const double diff = double(frames(i, d)) - double(cb.centroids(c, d));
                acc += diff * diff;
            }
            if (acc < best) {
                best = acc;
                arg = c;
            }
        }
        CHECK(seq.units[size_t(i)] == arg);
    }
}

TEST_CASE("quantize rejects dimension mismatch") {
    Codebook cb;
    cb.centroids = FrameMatrix::Random(4, 3);
    FrameMatrix frames = FrameMatrix::Random(5, 2);
    CHECK_THROWS_AS(quantize(frames, cb), Error);
}

TEST_CASE("codebook binary persistence round-trips") {
    Rng rng(12);
    Codebook cb;
    cb.centroids.resize(6, 4);
    for (Eigen::Index i = 0; i < cb.centroids.rows(); ++i)
        for (Eigen::Index d = 0; d < cb.centroids.cols(); ++d)
            cb.centroids(i, d) = float(rng.normal());
    const auto path = std::filesystem::temp_directory_path() / "phonecot_codebook_test.bin";
    save_codebook(cb, path.string());

    std::ifstream f(path, std::ios::binary);
    char magic[4];
    f.read(magic, 4);
    CHECK(std::string_view(magic, 4) == "PCLB");
    f.close();

    auto loaded = load_codebook(path.string());
    CHECK(loaded.k() == cb.k());
    CHECK(loaded.dim() == cb.dim());
    CHECK(std::memcmp(loaded.centroids.data(), cb.centroids.data(),
                      sizeof(float) * size_t(cb.centroids.size())) == 0);
    std::filesystem::remove(path);
}

TEST_CASE("rendered speech token format") {
    SpeechTokenSequence seq;
    seq.units = {409, 7};
    CHECK(seq.rendered() == "<sosp><409><7><eosp>");
}
