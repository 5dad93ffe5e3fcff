// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "phonecot/corpus.hpp"
#include "test_fixtures.hpp"

using namespace phonecot;
using phonecot::testing::Fixture;

namespace {

FieldMap dummy_fields() {
    return {{"language", "ava"},
            {"audio", "<sosp><409><7><eosp>"},
            {"phonemes", "\xc9\x90\xc9\x91 \xc9\x92"},
            {"text", "riga moku"},
            {"translation", "stone falls"}};
}

std::string golden_path(TaskKind kind) {
    return std::string(PHONECOT_GOLDEN_DIR) + "/prompt_" + task_kind_name(kind) + ".txt";
}

}  // namespace

TEST_CASE("cot prompt embeds the audio token run verbatim") {
    auto r = render_prompt(TaskKind::S2TT_COT_PH, dummy_fields());
    CHECK(r.prompt.find("<sosp><409><7><eosp>") != std::string::npos);
    CHECK(r.prompt.find("Convert the following speech audio into a phonemic sequence in ava, "
                        "then transcribe it to graphemes and then translate it to English.") !=
          std::string::npos);
    // Three labeled output sections in chain order.
    const auto ph = r.output.find("The phonemic sequence in ava is:");
    const auto tr = r.output.find("The transcription of the phonemic sequence in ava is:");
    const auto tl = r.output.find("The translation from ava to English is:");
    REQUIRE(ph != std::string::npos);
    REQUIRE(tr != std::string::npos);
    REQUIRE(tl != std::string::npos);
    CHECK(ph < tr);
    CHECK(tr < tl);
    CHECK(r.sections.size() == 3);
}

TEST_CASE("render_prompt reports missing fields by name") {
    FieldMap f = dummy_fields();
    f.erase("audio");
    CHECK_THROWS_WITH(render_prompt(TaskKind::PR, f),
                      Catch::Matchers::ContainsSubstring("audio"));
}

TEST_CASE("section labels parse back to the rendered fields") {
    auto f = dummy_fields();
    auto r = render_prompt(TaskKind::PR, f);
    const std::string header = prompt::phoneme_header("ava") + "\n";
    const auto at = r.output.find(header);
    REQUIRE(at != std::string::npos);
    std::string body = r.output.substr(at + header.size());
    body = body.substr(0, body.find(tok::kImEnd));
    CHECK(body == prompt::wrap_phonemes(f["phonemes"]));
}

TEST_CASE("rendered prompts match the golden files") {
    const bool update = std::getenv("PHONECOT_UPDATE_GOLDEN") != nullptr;
    for (TaskKind kind : all_task_kinds()) {
        auto r = render_prompt(kind, dummy_fields());
        const std::string full = "== prompt ==\n" + r.prompt + "\n== output ==\n" + r.output + "\n";
        const auto path = golden_path(kind);
        if (update) {
            std::ofstream out(path, std::ios::binary);
            out << full;
            continue;
        }
        std::ifstream in(path, std::ios::binary);
        INFO("golden file: " << path);
        REQUIRE(in.good());
        std::string want((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        CHECK(full == want);
    }
}

TEST_CASE("chat samples enable loss exactly on the assistant output") {
    const auto& fx = Fixture::get();
    Rng rng(1);
    auto sent = sample_sentence(fx.world, "ava", rng);
    auto ctx = fx.ctx();
    auto fields = fields_for(ctx, TaskKind::S2TT_COT_PH, "ava", sent, rng);
    auto sample = make_chat_sample(fx.vocab, TaskKind::S2TT_COT_PH, "ava", fields, 0, 2048);

    REQUIRE(sample.tokens.size() == sample.loss_mask.size());
    // The loss-enabled span decodes to exactly the rendered expected output.
    std::vector<TokenId> span;
    for (size_t i = 0; i < sample.tokens.size(); ++i)
        if (sample.loss_mask[i]) span.push_back(sample.tokens[i]);
    const auto rendered = render_prompt(TaskKind::S2TT_COT_PH, fields);
    CHECK(fx.vocab.decode(span) == rendered.output);

    // The mask is one contiguous run that starts right after the assistant
    // prefix.
    size_t first = 0;
    while (first < sample.loss_mask.size() && !sample.loss_mask[first]) ++first;
    size_t last = sample.loss_mask.size();
    while (last > 0 && sample.loss_mask[last - 1]) --last;
    for (size_t i = first; i < sample.tokens.size(); ++i) CHECK(sample.loss_mask[i] == 1);
    const std::string prefix = fx.vocab.decode(
        std::span<const TokenId>(sample.tokens.data(), first));
    CHECK(prefix ==
          prompt::chat_user_prefix() + rendered.prompt + prompt::chat_assistant_prefix());
}

TEST_CASE("stage-1 packing arithmetic and loss masks") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    StageDataset ds;
    ds.stage = 1;
    // Three sources of known token lengths 400, 400, 300 (unit tokens).
    std::vector<std::pair<std::string, std::string>> bodies;
    for (int n : {400, 400, 300}) {
        std::string body;
        for (int i = 0; i < n; ++i) body += "<1>";
        bodies.emplace_back("ava", body);
    }
    pack_phase(ctx, ds, TaskKind::LM_SPEECH, bodies, 1024, 0);

    REQUIRE(ds.samples.size() == 2);  // 1102 tokens -> one full pack + remainder
    CHECK(ds.samples[0].tokens.size() == 1024);
    CHECK(ds.samples[1].tokens.size() == 1024);
    int64_t non_pad = 0, pad = 0, separators = 0;
    for (const auto& s : ds.samples) {
        REQUIRE(s.loss_mask.size() == s.tokens.size());
        for (size_t i = 0; i < s.tokens.size(); ++i) {
            const bool is_pad = s.tokens[i] == fx.vocab.pad_id();
            CHECK(s.loss_mask[i] == (is_pad ? 0 : 1));
            non_pad += !is_pad;
            pad += is_pad;
            separators += s.tokens[i] == fx.vocab.eot_id();
        }
    }
    // Token conservation: sources = packed non-pad tokens minus separators.
    CHECK(separators == 2);
    CHECK(non_pad - separators == 400 + 400 + 300);
    CHECK(pad == 2 * 1024 - 1102);
}

TEST_CASE("stage-1 keeps the speech-then-phonemes schedule and reports splits") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    Stage1Quotas q;
    q.lm_speech = {{"ava", 10}, {"kel", 6}, {"eng", 4}};
    q.lm_phoneme = {{"ava", 8}, {"avo", 8}};
    auto ds = build_stage1(ctx, q, 256);
    REQUIRE(!ds.samples.empty());
    int last_phase = 0;
    for (const auto& s : ds.samples) {
        CHECK(s.meta.phase >= last_phase);
        last_phase = s.meta.phase;
        CHECK(s.tokens.size() == 256);
        CHECK((s.kind == TaskKind::LM_SPEECH) == (s.meta.phase == 0));
    }
    CHECK(ds.notes.count("split_sources") == 1);
    CHECK(zero_tier_speech_samples(ds, fx.world) == 0);

    Stage1Quotas bad;
    bad.lm_speech = {{"avo", 2}};  // zero-tier language
    CHECK_THROWS_AS(build_stage1(ctx, bad, 256), Error);
}

TEST_CASE("stage-2 quotas build exactly the requested mix") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    auto pool = sample_t2tt_pool(ctx, {"ava", "avi", "avo"}, 12);
    auto [chunk3, chunk2] = subsample_t2tt(pool, 18, 18);

    QuotaMap q;
    q[TaskKind::PR] = {{"ava", 4}, {"avi", 2}};
    q[TaskKind::ASR] = {{"ava", 3}, {"eng", 2}};
    q[TaskKind::G2P] = {{"avo", 5}};
    q[TaskKind::P2G] = {{"avo", 4}};
    q[TaskKind::T2TT] = {{"ava", 6}, {"avi", 6}, {"avo", 6}};
    auto ds = build_stage2(ctx, q, chunk2, 1024);

    CHECK(ds.counts_by_kind_lang.at("pr/ava") == 4);
    CHECK(ds.counts_by_kind_lang.at("asr/eng") == 2);
    CHECK(ds.counts_by_kind_lang.at("g2p/avo") == 5);
    CHECK(ds.counts_by_kind_lang.at("t2tt/avo") == 6);
    CHECK(ds.samples.size() == 4 + 2 + 3 + 2 + 5 + 4 + 18);
    CHECK(zero_tier_speech_samples(ds, fx.world) == 0);

    // Zero-tier text quotas are fine; zero-tier speech quotas are an error.
    QuotaMap zq;
    zq[TaskKind::PR] = {{"avo", 1}};
    CHECK_THROWS_WITH(build_stage2(ctx, zq, chunk2, 1024),
                      Catch::Matchers::ContainsSubstring("zero-tier"));

    QuotaMap wrong;
    wrong[TaskKind::S2TT_COT] = {{"ava", 1}};
    CHECK_THROWS_AS(build_stage2(ctx, wrong, chunk2, 1024), Error);
}

TEST_CASE("per-kind loss masks disable every prompt token") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q;
    q[TaskKind::PR] = {{"ava", 2}};
    q[TaskKind::G2P] = {{"kel", 2}};
    auto ds = build_stage2(ctx, q, {}, 1024);
    const TokenId im_start = fx.vocab.im_start_id();
    for (const auto& s : ds.samples) {
        // Oracle: find the second im_start marker (assistant turn); loss must
        // be off before the assistant text and on after it.
        std::vector<size_t> starts;
        for (size_t i = 0; i < s.tokens.size(); ++i)
            if (s.tokens[i] == im_start) starts.push_back(i);
        REQUIRE(starts.size() == 2);
        // The assistant prefix is im_start + "assistant" + newline.
        size_t body_begin = starts[1];
        while (body_begin < s.tokens.size() && fx.vocab.token_string(s.tokens[body_begin]) != "\n")
            ++body_begin;
        ++body_begin;
        for (size_t i = 0; i < body_begin; ++i) CHECK(s.loss_mask[i] == 0);
        for (size_t i = body_begin; i < s.tokens.size(); ++i) CHECK(s.loss_mask[i] == 1);
    }
}

TEST_CASE("stage-3 variants carry exactly their task mix") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    auto pool = sample_t2tt_pool(ctx, {"ava", "kel"}, 10);
    auto [chunk3, chunk2] = subsample_t2tt(pool, 8, 8);

    QuotaMap direct_q;
    direct_q[TaskKind::ASR] = {{"ava", 2}};
    direct_q[TaskKind::T2TT] = {{"ava", 2}, {"kel", 2}};
    direct_q[TaskKind::S2TT_DIRECT] = {{"ava", 2}};
    auto direct = build_stage3(ctx, Stage3Variant::Direct, direct_q, chunk3, 2048);
    for (const auto& s : direct.samples) {
        CHECK(s.kind != TaskKind::S2TT_COT);
        CHECK(s.kind != TaskKind::S2TT_COT_PH);
        CHECK(s.kind != TaskKind::ASR_COT);
    }

    QuotaMap ph_q;
    ph_q[TaskKind::ASR_COT] = {{"ava", 2}};
    ph_q[TaskKind::P2TT_COT] = {{"ava", 2}, {"kel", 2}};
    ph_q[TaskKind::S2TT_COT_PH] = {{"ava", 2}};
    auto cot_ph = build_stage3(ctx, Stage3Variant::CotPh, ph_q, chunk3, 2048);
    bool saw_full_chain = false;
    for (const auto& s : cot_ph.samples) {
        if (s.kind != TaskKind::S2TT_COT_PH) continue;
        saw_full_chain = true;
        const auto rendered = render_prompt(TaskKind::S2TT_COT_PH, s.meta.fields);
        CHECK(rendered.sections.count("phonemes") == 1);
        CHECK(rendered.sections.count("transcription") == 1);
        CHECK(rendered.sections.count("translation") == 1);
    }
    CHECK(saw_full_chain);

    // Kind outside the variant's mix.
    QuotaMap bad;
    bad[TaskKind::S2TT_COT_PH] = {{"ava", 1}};
    CHECK_THROWS_AS(build_stage3(ctx, Stage3Variant::Direct, bad, chunk3, 2048), Error);
}

TEST_CASE("chained kinds reuse the sentences of their plain counterparts") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q2;
    q2[TaskKind::ASR] = {{"ava", 3}};
    auto s2 = build_stage2(ctx, q2, {}, 1024);
    QuotaMap q3;
    q3[TaskKind::ASR_COT] = {{"ava", 3}};
    auto s3 = build_stage3(ctx, Stage3Variant::CotPh, q3, {}, 2048);
    REQUIRE(s2.samples.size() == 3);
    REQUIRE(s3.samples.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(s2.samples[i].meta.fields.at("text") == s3.samples[i].meta.fields.at("text"));
        CHECK(s2.samples[i].meta.fields.at("audio") == s3.samples[i].meta.fields.at("audio"));
    }
}

TEST_CASE("t2tt subsampling takes the best-aligned pairs for stage 3") {
    std::vector<ParallelSentence> pairs(4);
    const double scores[] = {0.9, 0.8, 0.7, 0.6};
    for (int i = 0; i < 4; ++i) {
        pairs[size_t(i)].lang = "ava";
        pairs[size_t(i)].id = i;
        pairs[size_t(i)].alignment_score = scores[3 - i];  // shuffled in
    }
    auto [s3, s2] = subsample_t2tt(pairs, 2, 2);
    REQUIRE(s3.size() == 2);
    REQUIRE(s2.size() == 2);
    CHECK(s3[0].alignment_score == 0.9);
    CHECK(s3[1].alignment_score == 0.8);
    CHECK(s2[0].alignment_score == 0.7);
    CHECK(s2[1].alignment_score == 0.6);

    std::set<int64_t> ids;
    for (const auto& p : s3) ids.insert(p.id);
    for (const auto& p : s2) CHECK(ids.count(p.id) == 0);

    CHECK_THROWS_AS(subsample_t2tt(pairs, 3, 2), Error);
}

TEST_CASE("t2tt subsampling stays language-balanced") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    auto pool = sample_t2tt_pool(ctx, {"ava", "kel", "zar"}, 20);
    auto [s3, s2] = subsample_t2tt(pool, 30, 15);
    std::map<std::string, int> c3, c2;
    for (const auto& p : s3) c3[p.lang]++;
    for (const auto& p : s2) c2[p.lang]++;
    for (const auto& lang : {"ava", "kel", "zar"}) {
        CHECK(c3[lang] == 10);
        CHECK(c2[lang] == 5);
    }
}

TEST_CASE("sequence-length caps are enforced") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q;
    q[TaskKind::PR] = {{"ava", 1}};
    CHECK_THROWS_WITH(build_stage2(ctx, q, {}, 16),
                      Catch::Matchers::ContainsSubstring("max length"));
}

TEST_CASE("holdout sentences never appear in built datasets") {
    const auto& fx = Fixture::get();
    Rng probe(99);
    std::set<std::string> holdout;
    // Reserve a large batch of sentences, then check builders avoid them.
    for (int i = 0; i < 200; ++i) {
        auto s = sample_sentence(fx.world, "ava", probe);
        holdout.insert("ava|" + s.source_text);
    }
    auto ctx = fx.ctx(11, &holdout);
    QuotaMap q;
    q[TaskKind::G2P] = {{"ava", 30}};
    auto ds = build_stage2(ctx, q, {}, 1024);
    for (const auto& s : ds.samples)
        CHECK(holdout.count("ava|" + s.meta.fields.at("text")) == 0);
}
