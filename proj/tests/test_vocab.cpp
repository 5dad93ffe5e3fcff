// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "phonecot/synthlang.hpp"
#include "phonecot/vocab.hpp"

using namespace phonecot;

namespace {

std::vector<std::string> tiny_corpus() { return {"ab", "ba"}; }

Vocabulary expanded_fixture(size_t n_units = 8) {
    auto base = Vocabulary::build_base({"hello world", "abc xyz 0123456789"});
    return base.expanded(n_units, {"\xc9\x90", "\xc9\x91", "\xc9\x92"});  // three IPA symbols
}

}  // namespace

TEST_CASE("base vocabulary covers corpus characters plus specials") {
    auto v = Vocabulary::build_base(tiny_corpus());
    CHECK(v.size() == 5 + 2);  // pad, unk, eot, im_start, im_end, 'a', 'b'
    CHECK(v.n_base() == v.size());
    CHECK(v.contains("a"));
    CHECK(v.contains("b"));
    CHECK(v.contains(tok::kPad));
    CHECK(v.contains(tok::kImStart));
}

TEST_CASE("base vocabulary build is deterministic") {
    auto a = Vocabulary::build_base({"x"});
    auto b = Vocabulary::build_base({"x"});
    CHECK(a.tokens() == b.tokens());
}

TEST_CASE("empty corpus is rejected") {
    CHECK_THROWS_AS(Vocabulary::build_base({}), Error);
    CHECK_THROWS_AS(Vocabulary::build_base({"", ""}), Error);
}

TEST_CASE("base vocabulary size matches an independent character census") {
    // Independent oracle: scan a generated world's text for distinct codepoints.
    auto world = generate_world(11, {});
    std::vector<std::string> corpus;
    std::set<std::string> census;
    auto add = [&](const std::string& s) {
        corpus.push_back(s);
        for (auto& cp : utf8_codepoints(s)) census.insert(cp);
    };
    for (const auto* lang : world.source_languages())
        for (const auto& e : lang->lexicon) add(e.grapheme);
    for (const auto& e : world.english.lexicon) add(e.grapheme);
    add("The translation from x to English is:\n ");

    auto v = Vocabulary::build_base(corpus);
    CHECK(v.n_base() == census.size() + 5);
}

TEST_CASE("expansion appends speech and phoneme segments with stable base indices") {
    auto base = Vocabulary::build_base(tiny_corpus());
    auto v = base.expanded(500, {"p", "q"});
    CHECK(v.n_speech() == 502);
    CHECK(v.n_phoneme() == 4);
    CHECK(v.size() == base.size() + 502 + 4);
    for (size_t i = 0; i < base.size(); ++i) CHECK(v.tokens()[i] == base.tokens()[i]);
    CHECK(v.contains("<sosp>"));
    CHECK(v.contains("<409>"));

    auto v2 = base.expanded(500, {"p", "q"});
    CHECK(v.tokens() == v2.tokens());
}

TEST_CASE("expansion size arithmetic for the minimal case") {
    auto base = Vocabulary::build_base({"zq"});
    auto v = base.expanded(1, {"\xc9\x90"});
    CHECK(v.size() == base.size() + 3 + 3);
}

TEST_CASE("expansion rejects duplicates and collisions") {
    auto base = Vocabulary::build_base(tiny_corpus());
    CHECK_THROWS_AS(base.expanded(4, {"p", "p"}), Error);
    CHECK_THROWS_AS(base.expanded(4, {"a"}), Error);  // collides with base token "a"
}

TEST_CASE("segment predicates follow index layout") {
    auto v = expanded_fixture();
    for (size_t i = 0; i < v.size(); ++i) {
        const auto id = TokenId(i);
        const bool speech = i >= v.n_base() && i < v.n_base() + v.n_speech();
        const bool phoneme = i >= v.n_base() + v.n_speech();
        CHECK(v.is_speech(id) == speech);
        CHECK(v.is_phoneme(id) == phoneme);
    }
}

TEST_CASE("encode and decode round-trip rendered token runs") {
    auto v = expanded_fixture(500);
    const std::string s = "<sosp><409><eosp>";
    auto ids = v.encode(s);
    REQUIRE(ids.size() == 3);
    CHECK(v.decode(ids) == s);
    CHECK(v.encode("").empty());
}

TEST_CASE("unknown characters map to unk which decodes to the replacement glyph") {
    auto v = Vocabulary::build_base(tiny_corpus());
    auto ids = v.encode("a#b");
    REQUIRE(ids.size() == 3);
    CHECK(ids[1] == v.unk_id());
    CHECK(v.decode(ids) == std::string("a") + "\xef\xbf\xbd" + "b");
}

TEST_CASE("decode rejects out-of-range indices") {
    auto v = Vocabulary::build_base(tiny_corpus());
    std::vector<TokenId> bad = {TokenId(v.size())};
    CHECK_THROWS_AS(v.decode(bad), Error);
}

TEST_CASE("randomized in-vocabulary strings round-trip") {
    auto v = expanded_fixture(32);
    Rng rng(404);
    for (int trial = 0; trial < 1000; ++trial) {
        std::string s;
        const int len = int(rng.range(0, 24));
        for (int i = 0; i < len; ++i)
            s += v.token_string(TokenId(rng.below(v.size())));
        auto ids = v.encode(s);
        CHECK(v.decode(ids) == s);
    }
}

TEST_CASE("vocabulary file persistence preserves order and segments") {
    auto v = expanded_fixture(16);
    const auto path = std::filesystem::temp_directory_path() / "phonecot_vocab_test.txt";
    v.save(path.string());
    auto loaded = Vocabulary::load(path.string());
    CHECK(loaded.tokens() == v.tokens());
    CHECK(loaded.n_base() == v.n_base());
    CHECK(loaded.n_speech() == v.n_speech());
    CHECK(loaded.n_phoneme() == v.n_phoneme());
    std::filesystem::remove(path);
}

TEST_CASE("embedding expansion keeps original rows bit-identical") {
    auto v = expanded_fixture(16);
    auto layout = EmbeddingLayout::of(v, 8);
    MatrixX<float> base(Eigen::Index(v.n_base()), 8);
    Rng rng(3);
    for (Eigen::Index r = 0; r < base.rows(); ++r)
        for (Eigen::Index c = 0; c < base.cols(); ++c) base(r, c) = float(rng.normal());

    auto full = expand_embeddings(base, layout, 99);
    REQUIRE(size_t(full.rows()) == v.size());
    for (Eigen::Index r = 0; r < base.rows(); ++r)
        for (Eigen::Index c = 0; c < base.cols(); ++c)
            CHECK(std::memcmp(&full(r, c), &base(r, c), sizeof(float)) == 0);

    auto again = expand_embeddings(base, layout, 99);
    CHECK(full == again);
}

TEST_CASE("expanded embedding rows match the configured init scale") {
    auto v = expanded_fixture(256);
    auto layout = EmbeddingLayout::of(v, 64);
    MatrixX<float> base = MatrixX<float>::Zero(Eigen::Index(v.n_base()), 64);
    auto full = expand_embeddings(base, layout, 7, 0.02);
    const Eigen::Index new_rows = full.rows() - base.rows();
    REQUIRE(new_rows * 64 >= 10000);
    double sum = 0.0, sum_sq = 0.0;
    int64_t n = 0;
    for (Eigen::Index r = base.rows(); r < full.rows(); ++r)
        for (Eigen::Index c = 0; c < full.cols(); ++c) {
            sum += full(r, c);
            sum_sq += double(full(r, c)) * full(r, c);
            ++n;
        }
    const double mean = sum / double(n);
    const double stddev = std::sqrt(sum_sq / double(n) - mean * mean);
    CHECK(stddev == Catch::Approx(0.02).epsilon(0.05));
}

TEST_CASE("embedding expansion rejects dimension mismatch") {
    auto v = expanded_fixture(8);
    auto layout = EmbeddingLayout::of(v, 8);
    MatrixX<float> wrong = MatrixX<float>::Zero(3, 8);
    CHECK_THROWS_AS(expand_embeddings(wrong, layout, 1), Error);
}
