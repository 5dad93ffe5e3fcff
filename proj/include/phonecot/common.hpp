// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace phonecot {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// ---------------------------------------------------------------------------
// Hashing (FNV-1a, 64-bit). Used for config digests and rng stream derivation.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(std::string_view data, uint64_t seed = 0xcbf29ce484222325ull) {
    uint64_t h = seed;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

inline uint64_t mix_seed(uint64_t seed, std::string_view tag) {
    return mix_seed(seed, fnv1a64(tag));
}

inline std::string digest_hex(uint64_t d) {
    static const char* hex = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[size_t(i)] = hex[d & 0xf];
        d >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 is fully specified by the standard; all
// distribution transforms are implemented here so streams are reproducible
// across platforms and library versions.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed), seed_digest_(seed) {}

    uint64_t u64() { return engine_(); }

    // Unbiased integer in [0, bound) via rejection.
    uint64_t below(uint64_t bound) {
        require(bound > 0, "Rng::below: bound must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

    int64_t range(int64_t lo, int64_t hi_inclusive) {
        require(hi_inclusive >= lo, "Rng::range: empty range");
        return lo + int64_t(below(uint64_t(hi_inclusive - lo) + 1));
    }

    double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }

    double normal() {
        // Box-Muller; discards the second variate to keep the stream simple.
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Beta(a, b) for small integer shape parameters via order statistics:
    // the a-th smallest of a+b-1 uniforms.
    double beta_int(int a, int b) {
        require(a >= 1 && b >= 1, "Rng::beta_int: shapes must be >= 1");
        const int n = a + b - 1;
        std::vector<double> u(static_cast<size_t>(n), 0.0);
        for (auto& x : u) x = uniform();
        std::nth_element(u.begin(), u.begin() + (a - 1), u.end());
        return u[size_t(a - 1)];
    }

    template <class T>
    const T& pick(const std::vector<T>& v) {
        require(!v.empty(), "Rng::pick: empty vector");
        return v[size_t(below(v.size()))];
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    Rng fork(uint64_t stream) const {
        // Stream derivation does not consume engine state.
        return Rng(mix_seed(seed_digest_, stream));
    }

    Rng fork(std::string_view tag) const { return Rng(mix_seed(seed_digest_, fnv1a64(tag))); }

    uint64_t seed() const { return seed_digest_; }

private:
    std::mt19937_64 engine_;
    uint64_t seed_digest_ = 0;
};

// ---------------------------------------------------------------------------
// UTF-8 helpers. Text is handled as sequences of codepoints; invalid bytes
// are rejected at the boundary.
// ---------------------------------------------------------------------------

inline size_t utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xe) return 3;
    if ((lead >> 3) == 0x1e) return 4;
    return 0;
}

inline std::vector<std::string> utf8_codepoints(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        const size_t n = utf8_len(static_cast<unsigned char>(text[i]));
        require(n > 0 && i + n <= text.size(), "invalid UTF-8 input");
        out.emplace_back(text.substr(i, n));
        i += n;
    }
    return out;
}

inline std::string codepoint_to_utf8(uint32_t cp) {
    std::string s;
    if (cp < 0x80) {
        s += char(cp);
    } else if (cp < 0x800) {
        s += char(0xc0 | (cp >> 6));
        s += char(0x80 | (cp & 0x3f));
    } else if (cp < 0x10000) {
        s += char(0xe0 | (cp >> 12));
        s += char(0x80 | ((cp >> 6) & 0x3f));
        s += char(0x80 | (cp & 0x3f));
    } else {
        s += char(0xf0 | (cp >> 18));
        s += char(0x80 | ((cp >> 12) & 0x3f));
        s += char(0x80 | ((cp >> 6) & 0x3f));
        s += char(0x80 | (cp & 0x3f));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Worker-count policy. PCL_THREADS caps all thread pools.
// ---------------------------------------------------------------------------

inline unsigned worker_count() {
    unsigned n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("PCL_THREADS")) {
        const long cap = std::strtol(env, nullptr, 10);
        if (cap >= 1 && unsigned(cap) < n) n = unsigned(cap);
    }
    return n;
}

// Runs fn(begin, end) over a static partition of [0, total) across workers.
// Partitioning depends only on total and the worker count.
template <class Fn>
void parallel_chunks(size_t total, Fn&& fn) {
    const unsigned workers = std::min<size_t>(worker_count(), total ? total : 1);
    if (workers <= 1) {
        fn(size_t(0), total, 0u);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const size_t chunk = (total + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
        const size_t lo = std::min(total, size_t(w) * chunk);
        const size_t hi = std::min(total, lo + chunk);
        pool.emplace_back([&fn, lo, hi, w] { fn(lo, hi, w); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace phonecot
