// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "phonecot/decode.hpp"
#include "test_fixtures.hpp"

using namespace phonecot;
using phonecot::testing::Fixture;

namespace {

Eigen::Matrix<float, 1, Eigen::Dynamic> make_logits(const std::vector<float>& v) {
    Eigen::Matrix<float, 1, Eigen::Dynamic> out(Eigen::Index(v.size()));
    for (size_t i = 0; i < v.size(); ++i) out(Eigen::Index(i)) = v[i];
    return out;
}

}  // namespace

TEST_CASE("one-hot logits always sample the hot token") {
    auto logits = make_logits({-1e9f, -1e9f, 50.0f, -1e9f});
    StepSamplingConfig cfg;
    Rng rng(1);
    for (int i = 0; i < 200; ++i) CHECK(sample_step(logits, cfg, rng) == 2);
}

TEST_CASE("top_k of one is a deterministic argmax") {
    auto logits = make_logits({0.4f, 1.2f, 0.9f, 1.1f});
    StepSamplingConfig cfg;
    cfg.top_k = 1;
    Rng rng(2);
    for (int i = 0; i < 100; ++i) CHECK(sample_step(logits, cfg, rng) == 1);
    cfg.top_k = 50;
    cfg.greedy = true;
    for (int i = 0; i < 10; ++i) CHECK(sample_step(logits, cfg, rng) == 1);
}

TEST_CASE("empirical sampling matches the truncated-renormalized distribution") {
    // Independent oracle: compute the truncated distribution by hand.
    std::vector<float> raw = {2.0f, 1.5f, 1.2f, 0.7f, 0.2f, -0.3f, -1.0f, -2.5f};
    StepSamplingConfig cfg;
    cfg.temperature = 0.8;
    cfg.top_k = 5;
    cfg.top_p = 0.9;

    std::vector<double> scaled;
    for (float v : raw) scaled.push_back(double(v) / cfg.temperature);
    double mx = *std::max_element(scaled.begin(), scaled.end());
    double z = 0;
    for (double s : scaled) z += std::exp(s - mx);
    std::vector<double> probs;
    for (double s : scaled) probs.push_back(std::exp(s - mx) / z);
    // Logits are already sorted descending: keep top 5, then the nucleus.
    std::vector<double> kept(probs.begin(), probs.begin() + 5);
    std::vector<double> expected;
    double cum = 0;
    for (double p : kept) {
        expected.push_back(p);
        cum += p;
        if (cum >= cfg.top_p) break;
    }
    double norm = 0;
    for (double p : expected) norm += p;
    for (double& p : expected) p /= norm;

    auto logits = make_logits(raw);
    Rng rng(3);
    std::vector<int64_t> counts(raw.size(), 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) counts[size_t(sample_step(logits, cfg, rng))]++;
    double tv = 0;
    for (size_t i = 0; i < raw.size(); ++i) {
        const double emp = double(counts[i]) / n;
        const double exp_p = i < expected.size() ? expected[i] : 0.0;
        tv += std::abs(emp - exp_p);
    }
    CHECK(tv / 2.0 <= 0.01);
}

TEST_CASE("degenerate all-minus-infinity logits are rejected") {
    const float ninf = -std::numeric_limits<float>::infinity();
    auto logits = make_logits({ninf, ninf, ninf});
    StepSamplingConfig cfg;
    Rng rng(4);
    CHECK_THROWS_AS(sample_step(logits, cfg, rng), Error);
}

TEST_CASE("incremental decoding matches the full forward pass") {
    const auto& fx = Fixture::get();
    ModelConfig mc;
    mc.n_layers = 2;
    mc.n_heads = 2;
    mc.dim = 32;
    mc.max_len = 64;
    mc.seed = 9;
    auto st = init_model<float>(mc, EmbeddingLayout::of(fx.vocab, 32));

    Rng rng(5);
    std::vector<TokenId> ids;
    for (int i = 0; i < 20; ++i) ids.push_back(TokenId(rng.below(st.cfg.vocab_size)));
    auto logits = forward(st, std::span<const TokenId>(ids));

    DecoderSession<float> sess(st);
    sess.feed(std::span<const TokenId>(ids));
    const auto& last = sess.last_logits();
    for (Eigen::Index j = 0; j < last.size(); ++j)
        CHECK(last(j) == Catch::Approx(logits(logits.rows() - 1, j)).margin(1e-3));
}

namespace {

// Overfits a small model on a handful of fixed samples until it reproduces
// them, so greedy decoding has a known right answer.
struct OverfitRig {
    ModelState<float> model;
    std::vector<TaskSample> samples;

    static OverfitRig build(TaskKind kind, GenMode mode, int n_samples, int epochs) {
        (void)mode;
        const auto& fx = Fixture::get();
        auto ctx = fx.ctx(77);
        StageDataset ds;
        ds.stage = 3;
        Rng rng(6);
        for (int i = 0; i < n_samples; ++i) {
            auto sent = sample_sentence(fx.world, "ava", rng);
            auto fields = fields_for(ctx, kind, "ava", sent, rng);
            ds.samples.push_back(make_chat_sample(fx.vocab, kind, "ava", fields, i, 2048));
        }

        ModelConfig mc;
        mc.n_layers = 2;
        mc.n_heads = 4;
        mc.dim = 64;
        mc.max_len = 1024;
        mc.seed = 21;
        OverfitRig rig{init_model<float>(mc, EmbeddingLayout::of(fx.vocab, 64)), ds.samples};

        StageTrainConfig tc = StageTrainConfig::defaults_for_stage(3);
        tc.lr_peak = 2e-3;
        tc.epochs = epochs;
        tc.batch_effective = n_samples;
        tc.micro_batch = n_samples;
        tc.max_len = 1024;
        Rng train_rng(7);
        train_stage(rig.model, ds, tc, train_rng);
        return rig;
    }
};

}  // namespace

TEST_CASE("greedy decoding reproduces an overfit model's training target") {
    const auto& fx = Fixture::get();
    auto rig = OverfitRig::build(TaskKind::S2TT_COT_PH, GenMode::CotPh, 2, 220);

    StepSamplingConfig base;
    base.greedy = true;
    base.n_beams = 1;
    auto plan = GenerationPlan::standard(GenMode::CotPh, base, 10);
    plan.phoneme_step.greedy = true;

    for (const auto& s : rig.samples) {
        Rng rng(8);
        auto trace = controlled_generate(rig.model, fx.vocab, s.meta.fields.at("audio"), "ava",
                                         plan, rng);
        REQUIRE(trace.steps.size() == 3);
        CHECK(trace.steps[0].top_k_used == 10);
        CHECK(trace.steps[1].top_k_used == 50);
        CHECK(*trace.phonemes == s.meta.fields.at("phonemes"));
        CHECK(*trace.transcription == s.meta.fields.at("text"));
        CHECK(trace.translation == s.meta.fields.at("translation"));
        CHECK(!trace.truncated);

        // The raw output equals the training target minus the end marker.
        const auto rendered = render_prompt(TaskKind::S2TT_COT_PH, s.meta.fields);
        std::string want = rendered.output;
        want = want.substr(0, want.size() - std::string(tok::kImEnd).size());
        CHECK(trace.raw_output == want);
    }
}

TEST_CASE("direct mode runs a single generation step") {
    const auto& fx = Fixture::get();
    auto rig = OverfitRig::build(TaskKind::S2TT_DIRECT, GenMode::Direct, 2, 150);
    StepSamplingConfig base;
    base.greedy = true;
    base.n_beams = 1;
    auto plan = GenerationPlan::standard(GenMode::Direct, base);
    Rng rng(9);
    auto trace = controlled_generate(rig.model, fx.vocab, rig.samples[0].meta.fields.at("audio"),
                                     "ava", plan, rng);
    REQUIRE(trace.steps.size() == 1);
    CHECK(trace.steps[0].name == "translation");
    CHECK(!trace.phonemes.has_value());
    CHECK(!trace.transcription.has_value());
    CHECK(trace.translation == rig.samples[0].meta.fields.at("translation"));
}

TEST_CASE("the no-phoneme plan never mentions the phoneme header") {
    const auto& fx = Fixture::get();
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.dim = 16;
    mc.max_len = 640;
    mc.seed = 10;
    auto st = init_model<float>(mc, EmbeddingLayout::of(fx.vocab, 16));
    StepSamplingConfig base;
    base.max_new_tokens = 4;
    auto plan = GenerationPlan::standard(GenMode::CotDpsNoPh, base);
    Rng rng(10);
    auto trace = controlled_generate(st, fx.vocab, "<sosp><1><eosp>", "avo", plan, rng);
    CHECK(trace.raw_output.find("phonemic sequence") == std::string::npos);
    CHECK(!trace.phonemes.has_value());
    REQUIRE(trace.steps.size() == 2);
    CHECK(trace.steps[0].name == "transcription");

    // Step isolation: the translation header appears after the transcription
    // section in the assembled output.
    const auto tr = trace.raw_output.find(prompt::transcription_of_audio_header("avo"));
    const auto tl = trace.raw_output.find(prompt::translation_header("avo"));
    REQUIRE(tr != std::string::npos);
    REQUIRE(tl != std::string::npos);
    CHECK(tr < tl);
}

TEST_CASE("generation with a fixed seed and a single beam is reproducible") {
    const auto& fx = Fixture::get();
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.dim = 16;
    mc.max_len = 640;
    mc.seed = 11;
    auto st = init_model<float>(mc, EmbeddingLayout::of(fx.vocab, 16));
    StepSamplingConfig base;
    base.n_beams = 1;
    base.max_new_tokens = 16;
    auto plan = GenerationPlan::standard(GenMode::Direct, base);
    Rng ra(12), rb(12);
    auto ta = controlled_generate(st, fx.vocab, "<sosp><2><3><eosp>", "kel", plan, ra);
    auto tb = controlled_generate(st, fx.vocab, "<sosp><2><3><eosp>", "kel", plan, rb);
    CHECK(ta.raw_output == tb.raw_output);
}

TEST_CASE("untrained models yield truncated traces, not exceptions") {
    const auto& fx = Fixture::get();
    ModelConfig mc;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.dim = 16;
    mc.max_len = 640;
    mc.seed = 12;
    auto st = init_model<float>(mc, EmbeddingLayout::of(fx.vocab, 16));
    StepSamplingConfig base;
    base.max_new_tokens = 5;
    base.n_beams = 2;
    auto plan = GenerationPlan::standard(GenMode::CotPh, base, 10);
    plan.phoneme_step.max_new_tokens = 5;
    Rng rng(13);
    auto trace = controlled_generate(st, fx.vocab, "<sosp><0><eosp>", "ava", plan, rng);
    CHECK(trace.truncated);
    CHECK(trace.steps.size() == 3);
}

TEST_CASE("parse_trace inverts the rendered output") {
    FieldMap f{{"language", "zir"},
               {"audio", "<sosp><5><eosp>"},
               {"phonemes", "\xc9\x90 \xc9\x93"},
               {"text", "tavo ri"},
               {"translation", "green bird"}};
    auto r = render_prompt(TaskKind::S2TT_COT_PH, f);
    auto trace = parse_trace(r.output, GenMode::CotPh, "zir");
    REQUIRE(trace.parse_ok);
    CHECK(*trace.phonemes == f["phonemes"]);
    CHECK(*trace.transcription == f["text"]);
    CHECK(trace.translation == f["translation"]);

    // Leading whitespace is tolerated.
    auto trace2 = parse_trace("\n  " + r.output, GenMode::CotPh, "zir");
    CHECK(trace2.parse_ok);

    auto direct = render_prompt(TaskKind::S2TT_DIRECT, f);
    auto trace3 = parse_trace(direct.output, GenMode::Direct, "zir");
    REQUIRE(trace3.parse_ok);
    CHECK(trace3.translation == f["translation"]);
}

TEST_CASE("corrupted section labels are parse errors, never misattributed") {
    FieldMap f{{"language", "ava"},
               {"audio", "<sosp><5><eosp>"},
               {"phonemes", "\xc9\x90"},
               {"text", "ta"},
               {"translation", "it"}};
    auto r = render_prompt(TaskKind::S2TT_COT_PH, f);
    Rng rng(14);
    // Collect header character ranges inside the output.
    std::vector<std::pair<size_t, size_t>> headers;
    for (const auto& h : {prompt::phoneme_header("ava"),
                          prompt::transcription_of_phonemes_header("ava"),
                          prompt::translation_header("ava")}) {
        const auto at = r.output.find(h);
        REQUIRE(at != std::string::npos);
        headers.emplace_back(at, at + h.size());
    }
    for (int trial = 0; trial < 200; ++trial) {
        const auto& [b, e] = headers[size_t(rng.below(headers.size()))];
        const size_t pos = b + size_t(rng.below(e - b));
        std::string corrupted = r.output;
        corrupted[pos] = corrupted[pos] == '#' ? '@' : '#';
        auto trace = parse_trace(corrupted, GenMode::CotPh, "ava");
        CHECK(!trace.parse_ok);
        CHECK(!trace.parse_error.empty());
    }
}
