// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "phonecot/common.hpp"

namespace phonecot {

using TokenId = int32_t;

namespace tok {
inline constexpr const char* kPad = "<pad>";
inline constexpr const char* kUnk = "\xef\xbf\xbd";  // replacement glyph, U+FFFD
inline constexpr const char* kEot = "<eot>";
inline constexpr const char* kImStart = "<|im_start|>";
inline constexpr const char* kImEnd = "<|im_end|>";
inline constexpr const char* kSosp = "<sosp>";
inline constexpr const char* kEosp = "<eosp>";
inline constexpr const char* kSoph = "<soph>";
inline constexpr const char* kEoph = "<eoph>";
}  // namespace tok

// Token universe with three contiguous segments: base text tokens, speech
// unit tokens, phoneme tokens. Indices are stable: base tokens occupy
// [0, n_base), speech tokens the next n_speech, phoneme tokens the rest.
class Vocabulary {
public:
    Vocabulary() = default;

    // Builds the base segment: specials, chat control markers, then every
    // distinct codepoint of the corpus sorted by codepoint.
    static Vocabulary build_base(const std::vector<std::string>& corpus_text, size_t max_size = 4096) {
        require(!corpus_text.empty(), "empty corpus");
        bool any = false;
        std::set<std::string> chars;
        for (const auto& doc : corpus_text) {
            if (!doc.empty()) any = true;
            for (auto& cp : utf8_codepoints(doc)) chars.insert(std::move(cp));
        }
        require(any, "empty corpus");

        Vocabulary v;
        for (const char* s : {tok::kPad, tok::kUnk, tok::kEot, tok::kImStart, tok::kImEnd})
            v.append_token(s);
        for (const auto& c : chars)
            if (!v.index_.count(c)) v.append_token(c);
        require(v.size() <= max_size, "base vocabulary exceeds max_size");
        v.n_base_ = v.size();
        v.rebuild_matcher();
        return v;
    }

    // Appends the speech segment (<sosp>, <eosp>, <0>..<n_units-1>) and the
    // phoneme segment (<soph>, <eoph>, inventory symbols). Base indices are
    // unchanged.
    Vocabulary expanded(size_t n_units, const std::vector<std::string>& phoneme_inventory) const {
        require(n_units >= 1, "expand_vocab: n_units must be >= 1");
        require(!phoneme_inventory.empty(), "expand_vocab: empty phoneme inventory");
        require(n_speech_ == 0 && n_phoneme_ == 0, "expand_vocab: vocabulary already expanded");
        {
            std::set<std::string> uniq(phoneme_inventory.begin(), phoneme_inventory.end());
            require(uniq.size() == phoneme_inventory.size(), "expand_vocab: duplicate phoneme symbols");
        }

        Vocabulary v = *this;
        v.append_token(tok::kSosp);
        v.append_token(tok::kEosp);
        for (size_t u = 0; u < n_units; ++u) v.append_token("<" + std::to_string(u) + ">");
        v.n_speech_ = v.size() - v.n_base_;
        v.append_token(tok::kSoph);
        v.append_token(tok::kEoph);
        for (const auto& p : phoneme_inventory) v.append_token(p);
        v.n_phoneme_ = v.size() - v.n_base_ - v.n_speech_;
        v.check_invariants();
        v.rebuild_matcher();
        return v;
    }

    size_t size() const { return tokens_.size(); }
    size_t n_base() const { return n_base_; }
    size_t n_speech() const { return n_speech_; }
    size_t n_phoneme() const { return n_phoneme_; }

    TokenId pad_id() const { return lookup(tok::kPad); }
    TokenId unk_id() const { return lookup(tok::kUnk); }
    TokenId eot_id() const { return lookup(tok::kEot); }
    TokenId im_start_id() const { return lookup(tok::kImStart); }
    TokenId im_end_id() const { return lookup(tok::kImEnd); }
    TokenId sosp_id() const { return lookup(tok::kSosp); }
    TokenId eosp_id() const { return lookup(tok::kEosp); }
    TokenId soph_id() const { return lookup(tok::kSoph); }
    TokenId eoph_id() const { return lookup(tok::kEoph); }
    TokenId unit_id(size_t u) const { return lookup("<" + std::to_string(u) + ">"); }

    TokenId lookup(const std::string& s) const {
        auto it = index_.find(s);
        require(it != index_.end(), "unknown token string: " + s);
        return it->second;
    }

    bool contains(const std::string& s) const { return index_.count(s) != 0; }

    const std::string& token_string(TokenId id) const {
        require(id >= 0 && size_t(id) < tokens_.size(), "token id out of range");
        return tokens_[size_t(id)];
    }

    bool is_speech(TokenId id) const {
        return size_t(id) >= n_base_ && size_t(id) < n_base_ + n_speech_;
    }
    bool is_phoneme(TokenId id) const { return size_t(id) >= n_base_ + n_speech_; }

    // Greedy longest-match tokenization. Codepoints with no matching token
    // map to unk.
    std::vector<TokenId> encode(std::string_view text) const {
        std::vector<TokenId> out;
        size_t i = 0;
        while (i < text.size()) {
            size_t best_len = 0;
            TokenId best_id = -1;
            const auto bucket = matcher_.find(text[i]);
            if (bucket != matcher_.end()) {
                for (const auto& [len, id] : bucket->second) {  // sorted by len desc
                    if (len <= text.size() - i && text.compare(i, len, tokens_[size_t(id)]) == 0) {
                        best_len = len;
                        best_id = id;
                        break;
                    }
                }
            }
            if (best_id < 0) {
                const size_t n = utf8_len(static_cast<unsigned char>(text[i]));
                require(n > 0 && i + n <= text.size(), "invalid UTF-8 input");
                out.push_back(unk_id());
                i += n;
            } else {
                out.push_back(best_id);
                i += best_len;
            }
        }
        return out;
    }

    std::string decode(std::span<const TokenId> ids) const {
        std::string out;
        for (TokenId id : ids) out += token_string(id);
        return out;
    }

    // One token per line; segment boundaries marked by "#SEGMENT" comment
    // lines. Backslash, newline, and carriage return are escaped so the
    // format stays line-oriented.
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        require(f.good(), "cannot open vocabulary file for writing: " + path);
        f << "#SEGMENT base\n";
        for (size_t i = 0; i < n_base_; ++i) f << escape(tokens_[i]) << "\n";
        f << "#SEGMENT speech\n";
        for (size_t i = n_base_; i < n_base_ + n_speech_; ++i) f << escape(tokens_[i]) << "\n";
        f << "#SEGMENT phoneme\n";
        for (size_t i = n_base_ + n_speech_; i < tokens_.size(); ++i) f << escape(tokens_[i]) << "\n";
        require(f.good(), "failed writing vocabulary file: " + path);
    }

    static Vocabulary load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        require(f.good(), "cannot open vocabulary file: " + path);
        Vocabulary v;
        std::string line;
        int segment = -1;
        size_t counts[3] = {0, 0, 0};
        while (std::getline(f, line)) {
            if (line.rfind("#SEGMENT ", 0) == 0) {
                const std::string name = line.substr(9);
                if (name == "base") segment = 0;
                else if (name == "speech") segment = 1;
                else if (name == "phoneme") segment = 2;
                else fail("unknown segment in vocabulary file: " + name);
                continue;
            }
            require(segment >= 0, "vocabulary file: token before #SEGMENT header");
            v.append_token(unescape(line));
            counts[segment]++;
        }
        v.n_base_ = counts[0];
        v.n_speech_ = counts[1];
        v.n_phoneme_ = counts[2];
        v.check_invariants();
        v.rebuild_matcher();
        return v;
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    void append_token(const std::string& s) {
        require(!index_.count(s), "token string collision: " + s);
        index_.emplace(s, TokenId(tokens_.size()));
        tokens_.push_back(s);
    }

    void check_invariants() const {
        require(n_base_ + n_speech_ + n_phoneme_ == tokens_.size(),
                "vocabulary segments do not cover the token list");
        require(index_.size() == tokens_.size(), "vocabulary token strings are not unique");
    }

    void rebuild_matcher() {
        matcher_.clear();
        for (size_t i = 0; i < tokens_.size(); ++i) {
            const auto& s = tokens_[i];
            if (s.empty()) continue;
            auto& bucket = matcher_[s[0]];
            bucket.emplace_back(s.size(), TokenId(i));
        }
        for (auto& [c, bucket] : matcher_)
            std::sort(bucket.begin(), bucket.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first; });
    }

    static std::string escape(const std::string& s) {
        std::string out;
        for (char c : s) {
            if (c == '\\') out += "\\\\";
            else if (c == '\n') out += "\\n";
            else if (c == '\r') out += "\\r";
            else out += c;
        }
        return out;
    }

    static std::string unescape(const std::string& s) {
        std::string out;
        for (size_t i = 0; i < s.size(); ++i) {
            if (s[i] == '\\' && i + 1 < s.size()) {
                const char n = s[++i];
                if (n == 'n') out += '\n';
                else if (n == 'r') out += '\r';
                else out += n;
            } else {
                out += s[i];
            }
        }
        return out;
    }

    std::vector<std::string> tokens_;
    std::map<std::string, TokenId> index_;
    std::map<char, std::vector<std::pair<size_t, TokenId>>> matcher_;
    size_t n_base_ = 0;
    size_t n_speech_ = 0;
    size_t n_phoneme_ = 0;
};

// Offsets and widths of the three embedding blocks within one |V| x d matrix.
struct EmbeddingLayout {
    size_t dim = 0;
    size_t base_offset = 0;
    size_t base_count = 0;
    size_t speech_offset = 0;
    size_t speech_count = 0;
    size_t phoneme_offset = 0;
    size_t phoneme_count = 0;

    static EmbeddingLayout of(const Vocabulary& v, size_t dim) {
        require(dim > 0, "embedding dim must be positive");
        EmbeddingLayout l;
        l.dim = dim;
        l.base_offset = 0;
        l.base_count = v.n_base();
        l.speech_offset = v.n_base();
        l.speech_count = v.n_speech();
        l.phoneme_offset = v.n_base() + v.n_speech();
        l.phoneme_count = v.n_phoneme();
        return l;
    }

    size_t total() const { return base_count + speech_count + phoneme_count; }
};

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Grows a |V_o| x d embedding matrix to |V| x d. Original rows are copied
// bit-identically; new rows are drawn from a seeded zero-mean Gaussian.
template <class Scalar>
MatrixX<Scalar> expand_embeddings(const MatrixX<Scalar>& existing, const EmbeddingLayout& layout,
                                  uint64_t seed, double init_std = 0.02) {
    require(size_t(existing.rows()) == layout.base_count,
            "expand_embeddings: row count does not match layout base segment");
    require(size_t(existing.cols()) == layout.dim,
            "expand_embeddings: column count does not match layout dim");
    MatrixX<Scalar> out(Eigen::Index(layout.total()), Eigen::Index(layout.dim));
    out.topRows(existing.rows()) = existing;
    Rng rng(mix_seed(seed, "embedding-expansion"));
    for (Eigen::Index r = existing.rows(); r < out.rows(); ++r)
        for (Eigen::Index c = 0; c < out.cols(); ++c)
            out(r, c) = Scalar(rng.normal() * init_std);
    return out;
}

}  // namespace phonecot
