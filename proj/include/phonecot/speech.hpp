// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <limits>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "phonecot/common.hpp"
#include "phonecot/synthlang.hpp"

namespace phonecot {

using FrameMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct SpeechConfig {
    int feat_dim = 16;
    double sigma_noise = 0.3;
    double sigma_speaker = 0.1;
    int frames_min = 2;
    int frames_max = 4;
    // Nominal frame rate of the simulated encoder output.
    static constexpr int kFrameRateHz = 25;
};

struct SpeechTokenSequence {
    std::vector<int> units;

    std::string rendered() const {
        std::string s = "<sosp>";
        for (int u : units) s += "<" + std::to_string(u) + ">";
        s += "<eosp>";
        return s;
    }
};

// Emits feature frames for phoneme strings. Every phoneme (and the word
// separator) has one fixed prototype vector shared by all languages; an
// utterance adds a per-speaker offset and white noise on top.
class SpeechSynthesizer {
public:
    SpeechSynthesizer(const PhonemeInventory& inventory, uint64_t world_seed,
                      const SpeechConfig& cfg = {})
        : cfg_(cfg), inventory_(inventory) {
        const size_t n = inventory.symbols.size() + 1;  // + separator
        prototypes_.resize(Eigen::Index(n), cfg.feat_dim);
        Rng rng(mix_seed(world_seed, "speech-prototypes"));
        for (Eigen::Index r = 0; r < prototypes_.rows(); ++r)
            for (Eigen::Index c = 0; c < prototypes_.cols(); ++c)
                prototypes_(r, c) = float(rng.normal());
        for (size_t i = 0; i < inventory.symbols.size(); ++i)
            symbol_row_[inventory.symbols[i]] = int(i);
        symbol_row_[inventory.separator] = int(inventory.symbols.size());
    }

    const FrameMatrix& prototypes() const { return prototypes_; }
    const SpeechConfig& config() const { return cfg_; }

    int prototype_row(const std::string& symbol) const {
        auto it = symbol_row_.find(symbol);
        require(it != symbol_row_.end(), "unknown phoneme symbol: " + symbol);
        return it->second;
    }

    FrameMatrix synthesize(std::string_view phonemes, uint64_t speaker_seed, Rng& rng) const {
        const auto symbols = utf8_codepoints(phonemes);
        std::vector<int> rows;
        rows.reserve(symbols.size());
        for (const auto& s : symbols) rows.push_back(prototype_row(s));

        Eigen::VectorXf offset(cfg_.feat_dim);
        Rng speaker(mix_seed(speaker_seed, "speaker-offset"));
        for (int d = 0; d < cfg_.feat_dim; ++d)
            offset(d) = float(speaker.normal() * cfg_.sigma_speaker);

        std::vector<int> counts;
        counts.reserve(rows.size());
        int total = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            const int n = int(rng.range(cfg_.frames_min, cfg_.frames_max));
            counts.push_back(n);
            total += n;
        }
        FrameMatrix frames(total, cfg_.feat_dim);
        int t = 0;
        for (size_t i = 0; i < rows.size(); ++i) {
            for (int f = 0; f < counts[i]; ++f, ++t)
                for (int d = 0; d < cfg_.feat_dim; ++d)
                    frames(t, d) = prototypes_(rows[size_t(i)], d) + offset(d) +
                                   float(rng.normal() * cfg_.sigma_noise);
        }
        return frames;
    }

private:
    SpeechConfig cfg_;
    PhonemeInventory inventory_;
    FrameMatrix prototypes_;
    std::map<std::string, int> symbol_row_;
};

// ---------------------------------------------------------------------------
// K-means codebook
// ---------------------------------------------------------------------------

struct CodebookMeta {
    uint64_t seed = 0;
    int iterations = 0;
    double final_inertia = 0.0;
    int reseed_events = 0;
    std::vector<double> inertia_per_iter;
};

struct Codebook {
    FrameMatrix centroids;  // k x d_f
    CodebookMeta meta;

    int k() const { return int(centroids.rows()); }
    int dim() const { return int(centroids.cols()); }
};

namespace detail {

inline double sq_distance(const FrameMatrix& a, Eigen::Index ra, const FrameMatrix& b,
                          Eigen::Index rb) {
    double acc = 0.0;
    for (Eigen::Index d = 0; d < a.cols(); ++d) {
        const double diff = double(a(ra, d)) - double(b(rb, d));
        acc += diff * diff;
    }
    return acc;
}

inline size_t count_distinct_rows(const FrameMatrix& m, size_t stop_at) {
    std::unordered_set<uint64_t> seen;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const char* bytes = reinterpret_cast<const char*>(m.row(r).data());
        seen.insert(fnv1a64(std::string_view(bytes, size_t(m.cols()) * sizeof(float))));
        if (seen.size() >= stop_at) return seen.size();
    }
    return seen.size();
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding. The assignment step runs in
// parallel; the update step accumulates in frame order so results are
// bit-identical for any worker count.
inline Codebook train_codebook(const FrameMatrix& frames, int k, int max_iters, uint64_t seed) {
    require(k >= 2, "train_codebook: k must be >= 2");
    require(max_iters >= 1, "train_codebook: max_iters must be >= 1");
    const Eigen::Index n = frames.rows();
    require(detail::count_distinct_rows(frames, size_t(k)) >= size_t(k),
            "train_codebook: fewer than k distinct frames");

    Rng rng(mix_seed(seed, "kmeans"));
    Codebook cb;
    cb.meta.seed = seed;
    cb.centroids.resize(k, frames.cols());

    // k-means++ seeding.
    std::vector<double> best_d2(size_t(n), std::numeric_limits<double>::infinity());
    {
        const Eigen::Index first = Eigen::Index(rng.below(uint64_t(n)));
        cb.centroids.row(0) = frames.row(first);
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double d2 = detail::sq_distance(frames, i, cb.centroids, c - 1);
                if (d2 < best_d2[size_t(i)]) best_d2[size_t(i)] = d2;
                total += best_d2[size_t(i)];
            }
            double target = rng.uniform() * total;
            Eigen::Index chosen = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                target -= best_d2[size_t(i)];
                if (target <= 0.0) {
                    chosen = i;
                    break;
                }
            }
            cb.centroids.row(c) = frames.row(chosen);
        }
    }

    std::vector<int> assign(size_t(n), -1);
    std::vector<int> prev_assign;
    for (int iter = 0; iter < max_iters; ++iter) {
        prev_assign = assign;
        parallel_chunks(size_t(n), [&](size_t lo, size_t hi, unsigned) {
            for (size_t i = lo; i < hi; ++i) {
                double best = std::numeric_limits<double>::infinity();
                int best_c = 0;
                for (int c = 0; c < k; ++c) {
                    const double d2 = detail::sq_distance(frames, Eigen::Index(i), cb.centroids, c);
                    if (d2 < best) {
                        best = d2;
                        best_c = c;
                    }
                }
                assign[i] = best_c;
            }
        });

        // Sequential update pass: sums in frame order, inertia alongside.
        Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sums =
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(
                k, frames.cols());
        std::vector<int64_t> counts(size_t(k), 0);
        double inertia = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int c = assign[size_t(i)];
            counts[size_t(c)]++;
            for (Eigen::Index d = 0; d < frames.cols(); ++d) sums(c, d) += double(frames(i, d));
            inertia += detail::sq_distance(frames, i, cb.centroids, c);
        }
        cb.meta.inertia_per_iter.push_back(inertia);
        cb.meta.final_inertia = inertia;
        cb.meta.iterations = iter + 1;

        for (int c = 0; c < k; ++c) {
            if (counts[size_t(c)] > 0) {
                for (Eigen::Index d = 0; d < frames.cols(); ++d)
                    cb.centroids(c, d) = float(sums(c, d) / double(counts[size_t(c)]));
            } else {
                // Re-seed an empty cluster from the farthest frame.
                double worst = -1.0;
                Eigen::Index far = 0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double d2 =
                        detail::sq_distance(frames, i, cb.centroids, assign[size_t(i)]);
                    if (d2 > worst) {
                        worst = d2;
                        far = i;
                    }
                }
                cb.centroids.row(c) = frames.row(far);
                cb.meta.reseed_events++;
            }
        }

        if (assign == prev_assign && iter > 0) break;
    }
    return cb;
}

inline SpeechTokenSequence quantize(const FrameMatrix& frames, const Codebook& cb) {
    require(frames.cols() == cb.centroids.cols() || frames.rows() == 0,
            "quantize: frame dimension does not match codebook");
    SpeechTokenSequence out;
    out.units.resize(size_t(frames.rows()));
    parallel_chunks(size_t(frames.rows()), [&](size_t lo, size_t hi, unsigned) {
        for (size_t i = lo; i < hi; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int best_c = 0;
            for (int c = 0; c < cb.k(); ++c) {
                const double d2 = detail::sq_distance(frames, Eigen::Index(i), cb.centroids, c);
                if (d2 < best) {  // strict: ties resolve to the lowest index
                    best = d2;
                    best_c = c;
                }
            }
            out.units[i] = best_c;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Binary persistence: magic "PCLB", u32 version, u32 k, u32 d_f, then
// k * d_f little-endian 32-bit floats, row-major.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(bool(is), "unexpected end of binary file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void write_f32(std::ostream& os, float f) {
    uint32_t v;
    std::memcpy(&v, &f, 4);
    write_u32(os, v);
}

inline float read_f32(std::istream& is) {
    const uint32_t v = read_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace detail

inline constexpr uint32_t kCodebookVersion = 1;

inline void save_codebook(const Codebook& cb, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open codebook file for writing: " + path);
    f.write("PCLB", 4);
    detail::write_u32(f, kCodebookVersion);
    detail::write_u32(f, uint32_t(cb.k()));
    detail::write_u32(f, uint32_t(cb.dim()));
    for (Eigen::Index r = 0; r < cb.centroids.rows(); ++r)
        for (Eigen::Index c = 0; c < cb.centroids.cols(); ++c)
            detail::write_f32(f, cb.centroids(r, c));
    require(f.good(), "failed writing codebook file: " + path);
}

inline Codebook load_codebook(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open codebook file: " + path);
    char magic[4];
    f.read(magic, 4);
    require(bool(f) && std::string_view(magic, 4) == "PCLB", "bad codebook magic: " + path);
    const uint32_t version = detail::read_u32(f);
    require(version == kCodebookVersion, "unsupported codebook version");
    const uint32_t k = detail::read_u32(f);
    const uint32_t d = detail::read_u32(f);
    Codebook cb;
    cb.centroids.resize(Eigen::Index(k), Eigen::Index(d));
    for (Eigen::Index r = 0; r < cb.centroids.rows(); ++r)
        for (Eigen::Index c = 0; c < cb.centroids.cols(); ++c)
            cb.centroids(r, c) = detail::read_f32(f);
    return cb;
}

}  // namespace phonecot
