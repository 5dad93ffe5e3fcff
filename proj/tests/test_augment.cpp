// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "phonecot/augment.hpp"
#include "test_fixtures.hpp"

using namespace phonecot;
using phonecot::testing::Fixture;

namespace {

std::string sample_phonemes(const WorldSpec& world, const std::string& lang, Rng& rng) {
    return sample_sentence(world, lang, rng).source_phonemes;
}

TaskSample chained_sample(const Fixture& fx, TaskKind kind, int64_t id, Rng& rng) {
    auto ctx = fx.ctx();
    auto sent = sample_sentence(fx.world, "ava", rng);
    auto fields = fields_for(ctx, kind, "ava", sent, rng);
    return make_chat_sample(fx.vocab, kind, "ava", fields, id, 2048);
}

}  // namespace

TEST_CASE("empty input returns unchanged and unmodified") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    Rng rng(1);
    auto res = pda_augment("", policy, rng);
    CHECK(res.augmented.empty());
    CHECK(!res.modified);
}

TEST_CASE("the keep path returns the input untouched") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 1.0;
    Rng rng(2);
    const auto ph = sample_phonemes(fx.world, "ava", rng);
    auto res = pda_augment(ph, policy, rng);
    CHECK(res.augmented == ph);
    CHECK(!res.modified);
    CHECK(res.ops.empty());
}

TEST_CASE("a forced single deletion removes exactly one phoneme") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 0.0;
    policy.p_delete = 1.0;
    policy.p_mask = policy.p_substitute = policy.p_insert = policy.p_space_shift = 0.0;
    policy.span_min = policy.span_max = 1;
    Rng rng(3);
    const auto ph = sample_phonemes(fx.world, "kel", rng);
    const auto n = utf8_codepoints(ph).size();
    auto res = pda_augment(ph, policy, rng);
    CHECK(res.modified);
    CHECK(utf8_codepoints(res.augmented).size() == n - 1);
    REQUIRE(res.ops.size() == 1);
    CHECK(res.ops[0].kind == "delete");
}

TEST_CASE("unchanged fraction tracks the keep fraction") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    Rng rng(4);
    const auto ph = sample_phonemes(fx.world, "zar", rng);
    int unchanged = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        auto res = pda_augment(ph, policy, rng);
        if (!res.modified) {
            CHECK(res.augmented == ph);
            ++unchanged;
        } else {
            CHECK(res.augmented != ph);
        }
    }
    CHECK(double(unchanged) / n == Catch::Approx(0.25).margin(0.01));
}

TEST_CASE("augmented output stays inside inventory, separator, and mask") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 0.0;
    std::set<std::string> allowed(fx.world.inventory.symbols.begin(),
                                  fx.world.inventory.symbols.end());
    allowed.insert(fx.world.inventory.separator);
    Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        const auto ph = sample_phonemes(fx.world, "avi", rng);
        auto res = pda_augment(ph, policy, rng);
        // Strip mask tokens, then verify the rest is inventory material.
        std::string rest = res.augmented;
        size_t at;
        while ((at = rest.find(policy.mask_symbol)) != std::string::npos)
            rest.erase(at, policy.mask_symbol.size());
        for (const auto& cp : utf8_codepoints(rest)) CHECK(allowed.count(cp) == 1);
    }
}

TEST_CASE("replaying the ops log reproduces the augmented string") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 0.0;
    Rng rng(6);
    for (int i = 0; i < 500; ++i) {
        const auto ph = sample_phonemes(fx.world, "kil", rng);
        auto res = pda_augment(ph, policy, rng);
        CHECK(pda_replay(ph, res.ops) == res.augmented);
    }
}

TEST_CASE("apply_pda masks the phoneme section loss and nothing else") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 0.0;  // always corrupt
    Rng rng(7);
    auto sample = chained_sample(fx, TaskKind::S2TT_COT_PH, 0, rng);
    auto out = apply_pda(sample, policy, rng, fx.vocab, 2048);
    REQUIRE(out.meta.augmented);

    // Zero loss-enabled tokens inside the phoneme section.
    const auto rendered = render_prompt(out.kind, out.meta.fields);
    const auto span = rendered.sections.at("phonemes");
    const std::string prefix =
        prompt::chat_user_prefix() + rendered.prompt + prompt::chat_assistant_prefix();
    const size_t begin = fx.vocab.encode(prefix + rendered.output.substr(0, span.first)).size();
    const size_t end = fx.vocab.encode(prefix + rendered.output.substr(0, span.second)).size();
    for (size_t i = begin; i < end; ++i) CHECK(out.loss_mask[i] == 0);

    // Loss-enabled counts outside the phoneme section are unchanged.
    auto enabled_outside = [&](const TaskSample& s, size_t b, size_t e) {
        int64_t n = 0;
        for (size_t i = 0; i < s.loss_mask.size(); ++i)
            if ((i < b || i >= e) && s.loss_mask[i]) ++n;
        return n;
    };
    const auto rendered_orig = render_prompt(sample.kind, sample.meta.fields);
    const auto span_orig = rendered_orig.sections.at("phonemes");
    const size_t b0 =
        fx.vocab.encode(prefix + rendered_orig.output.substr(0, span_orig.first)).size();
    const size_t e0 =
        fx.vocab.encode(prefix + rendered_orig.output.substr(0, span_orig.second)).size();
    CHECK(enabled_outside(out, begin, end) == enabled_outside(sample, b0, e0));

    // Downstream sections are byte-identical to the pre-augmentation render.
    CHECK(rendered.output.substr(span.second) == rendered_orig.output.substr(span_orig.second));

    // The ops log replays.
    auto ops = ops_from_json(nlohmann::json::parse(out.meta.ops_log));
    CHECK(pda_replay(out.meta.fields.at("phonemes_original"), ops) ==
          out.meta.fields.at("phonemes"));
}

TEST_CASE("apply_pda keeps unmodified samples untouched") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    policy.keep_fraction = 1.0;
    Rng rng(8);
    auto sample = chained_sample(fx, TaskKind::ASR_COT, 1, rng);
    auto out = apply_pda(sample, policy, rng, fx.vocab, 2048);
    CHECK(out.tokens == sample.tokens);
    CHECK(out.loss_mask == sample.loss_mask);
    CHECK(!out.meta.augmented);
}

TEST_CASE("apply_pda rejects kinds without a generated phoneme step") {
    const auto& fx = Fixture::get();
    auto policy = default_pda_policy(fx.world);
    Rng rng(9);
    auto sample = chained_sample(fx, TaskKind::S2TT_COT, 2, rng);
    CHECK_THROWS_AS(apply_pda(sample, policy, rng, fx.vocab, 2048), Error);
}

TEST_CASE("dps mix validation and degenerate all-two-step mix") {
    DpsMix bad{0.5, 0.4, 0.2};
    CHECK_THROWS_AS(bad.validate(), Error);

    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q;
    q[TaskKind::S2TT_COT_PH] = {{"ava", 6}};
    q[TaskKind::ASR_COT] = {{"kel", 4}};
    auto ds = build_stage3(ctx, Stage3Variant::CotPh, q, {}, 2048);
    auto policy = default_pda_policy(fx.world);
    auto mixed = dps_mix(ds, DpsMix{1.0, 0.0, 0.0}, policy, ctx, 2048, 5);
    CHECK(mixed.samples.size() == ds.samples.size());
    for (const auto& s : mixed.samples) {
        CHECK((s.kind == TaskKind::S2TT_COT || s.kind == TaskKind::ASR));
        CHECK(s.meta.no_phoneme);
    }
}

TEST_CASE("dps mix matches the configured fractions") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q;
    q[TaskKind::S2TT_COT_PH] = {{"ava", 2600}, {"kel", 2600}};
    auto ds = build_stage3(ctx, Stage3Variant::CotPh, q, {}, 2048);
    REQUIRE(ds.samples.size() >= 5000);
    auto policy = default_pda_policy(fx.world);
    auto mixed = dps_mix(ds, DpsMix{}, policy, ctx, 2048, 6);
    CHECK(mixed.samples.size() == ds.samples.size());

    int64_t no_ph = 0, pda = 0, original = 0;
    for (const auto& s : mixed.samples) {
        const auto& path = s.meta.fields.at("dps_path");
        if (path == "no_phoneme") ++no_ph;
        else if (path == "pda") ++pda;
        else ++original;
        CHECK(s.meta.no_phoneme == (path == "no_phoneme"));
    }
    const double n = double(mixed.samples.size());
    CHECK(double(no_ph) / n == Catch::Approx(0.20).margin(0.02));
    CHECK(double(pda) / n == Catch::Approx(0.75).margin(0.02));
    CHECK(double(original) / n == Catch::Approx(0.05).margin(0.02));
}

TEST_CASE("dps assignment is independent of sample order") {
    const auto& fx = Fixture::get();
    auto ctx = fx.ctx();
    QuotaMap q;
    q[TaskKind::S2TT_COT_PH] = {{"ava", 40}};
    auto ds = build_stage3(ctx, Stage3Variant::CotPh, q, {}, 2048);
    auto policy = default_pda_policy(fx.world);
    auto mixed_a = dps_mix(ds, DpsMix{}, policy, ctx, 2048, 7);

    StageDataset shuffled = ds;
    Rng rng(10);
    rng.shuffle(shuffled.samples);
    auto mixed_b = dps_mix(shuffled, DpsMix{}, policy, ctx, 2048, 7);

    REQUIRE(mixed_a.samples.size() == mixed_b.samples.size());
    for (size_t i = 0; i < mixed_a.samples.size(); ++i) {
        CHECK(mixed_a.samples[i].kind == mixed_b.samples[i].kind);
        CHECK(mixed_a.samples[i].meta.sentence_id == mixed_b.samples[i].meta.sentence_id);
        CHECK(mixed_a.samples[i].tokens == mixed_b.samples[i].tokens);
    }
}
