// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "phonecot/augment.hpp"
#include "phonecot/corpus_io.hpp"
#include "phonecot/eval.hpp"
#include "phonecot/model.hpp"
#include "phonecot/world_io.hpp"

namespace phonecot {

// Exit codes: 2 missing artifact, 3 digest mismatch, 4 malformed config.
struct MissingArtifact : Error {
    using Error::Error;
    static constexpr int kExitCode = 2;
};
struct DigestMismatch : Error {
    using Error::Error;
    static constexpr int kExitCode = 3;
};
struct ConfigError : Error {
    using Error::Error;
    static constexpr int kExitCode = 4;
};

// ---------------------------------------------------------------------------
// Key-value configuration: "[section]" headers, "key = value" lines, '#'
// comments. Unknown keys are rejected.
// ---------------------------------------------------------------------------

class KvConfig {
public:
    static KvConfig parse_string(const std::string& text) {
        KvConfig cfg;
        std::istringstream in(text);
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']')
                    throw ConfigError("config line " + std::to_string(line_no) +
                                      ": malformed section header");
                section = trim(line.substr(1, line.size() - 2));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
            cfg.values_[section + "." + key] = value;
        }
        return cfg;
    }

    static KvConfig parse_file(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f.good()) throw ConfigError("cannot open config file: " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse_string(ss.str());
    }

    std::string str(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return it->second;
    }

    double num(const std::string& key, double fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        try {
            size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": not a number: " + it->second);
        }
    }

    int64_t integer(const std::string& key, int64_t fallback) const {
        const double v = num(key, double(fallback));
        const auto r = int64_t(std::llround(v));
        if (double(r) != v) throw ConfigError("config key " + key + ": expected an integer");
        return r;
    }

    bool flag(const std::string& key, bool fallback) const {
        const std::string v = str(key, fallback ? "true" : "false");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key " + key + ": expected a boolean");
    }

    std::vector<std::string> list(const std::string& key, const std::string& fallback) const {
        const std::string v = str(key, fallback);
        std::vector<std::string> out;
        std::string cur;
        for (char c : v + ",") {
            if (c == ',') {
                const std::string t = trim(cur);
                if (!t.empty()) out.push_back(t);
                cur.clear();
            } else {
                cur += c;
            }
        }
        return out;
    }

    void reject_unknown_keys() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key)) throw ConfigError("unknown config key: " + key);
    }

private:
    static std::string trim(std::string s) {
        const auto is_ws = [](char c) { return c == ' ' || c == '\t' || c == '\r'; };
        while (!s.empty() && is_ws(s.front())) s.erase(s.begin());
        while (!s.empty() && is_ws(s.back())) s.pop_back();
        return s;
    }

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

// ---------------------------------------------------------------------------
// Run configuration with all defaults
// ---------------------------------------------------------------------------

struct QuotaConfig {
    int s1_speech_high = 220;
    int s1_speech_low = 40;
    int s1_speech_eng = 220;
    int s1_phoneme_per_lang = 150;
    int s2_pr_high = 220;
    int s2_pr_low = 44;
    int s2_pr_eng = 160;
    int s2_asr_high = 220;
    int s2_asr_low = 44;
    int s2_asr_eng = 220;
    int s2_g2p_per_lang = 110;
    int s2_p2g_per_lang = 110;
    int s2_t2tt_per_lang = 130;
    int s3_asr_high = 100;
    int s3_asr_low = 20;
    int s3_asr_eng = 100;
    int s3_t2tt_per_lang = 110;
    int s3_s2tt_high = 130;
    int s3_s2tt_low = 26;
};

struct StageTrainSettings {
    double lr_peak;
    double warmup_frac;
    int epochs;
    int batch_effective;
    size_t max_len;
};

struct RunConfig {
    WorldConfig world;
    SpeechConfig speech;
    int codebook_k = 64;
    int codebook_max_iters = 40;
    int codebook_utterances_per_lang = 80;
    bool codebook_include_english = true;

    uint64_t data_seed = 101;
    int t2tt_pool_per_lang = 400;
    int t2tt_stage3_per_lang = 110;
    int t2tt_stage2_per_lang = 130;
    int test_per_lang = 200;
    size_t pack_len = 1024;
    uint64_t eval_seed = 9001;
    QuotaConfig quotas;

    PdaPolicy pda;      // inventory filled after world generation
    DpsMix dps;

    ModelConfig model;  // vocab_size filled later
    double batch_scale = 1.0;
    int micro_batch = 8;
    uint64_t train_seed = 202;
    StageTrainSettings stage1{7e-5, 0.03, 1, 256, 1024};
    StageTrainSettings stage2{4e-5, 0.10, 2, 512, 1024};
    StageTrainSettings stage3{1e-5, 0.10, 1, 512, 2048};

    StepSamplingConfig sampling;
    int phoneme_top_k = 10;
    int max_new_phonemes = 256;
    int max_new_transcription = 128;
    int max_new_translation = 128;
    uint64_t decode_seed = 303;

    std::string baseline_system = "cot";
    int n_resamples = 1000;

    std::vector<std::string> systems = {"direct", "cot", "cot_ph", "cot_ph_pda", "cot_ph_dps"};
    std::vector<uint64_t> experiment_seeds = {0, 1, 2};

    static RunConfig from_kv(const KvConfig& kv) {
        RunConfig c;
        c.world.seed = uint64_t(kv.integer("world.seed", int64_t(c.world.seed)));
        c.world.n_families = int(kv.integer("world.families", c.world.n_families));
        c.world.langs_per_family = int(kv.integer("world.langs_per_family", c.world.langs_per_family));
        c.world.n_concepts = int(kv.integer("world.concepts", c.world.n_concepts));
        c.world.n_phonemes = int(kv.integer("world.phonemes", c.world.n_phonemes));
        c.world.root_len_min = int(kv.integer("world.root_len_min", c.world.root_len_min));
        c.world.root_len_max = int(kv.integer("world.root_len_max", c.world.root_len_max));
        c.world.word_len_min = int(kv.integer("world.word_len_min", c.world.word_len_min));
        c.world.word_len_max = int(kv.integer("world.word_len_max", c.world.word_len_max));
        c.world.alphabet_size = int(kv.integer("world.alphabet_size", c.world.alphabet_size));
        c.world.exotic_symbols = int(kv.integer("world.exotic_symbols", c.world.exotic_symbols));
        c.world.exotic_swaps = int(kv.integer("world.exotic_swaps", c.world.exotic_swaps));

        c.speech.feat_dim = int(kv.integer("speech.feat_dim", c.speech.feat_dim));
        c.speech.sigma_noise = kv.num("speech.sigma_noise", c.speech.sigma_noise);
        c.speech.sigma_speaker = kv.num("speech.sigma_speaker", c.speech.sigma_speaker);
        c.speech.frames_min = int(kv.integer("speech.frames_min", c.speech.frames_min));
        c.speech.frames_max = int(kv.integer("speech.frames_max", c.speech.frames_max));

        c.codebook_k = int(kv.integer("codebook.k", c.codebook_k));
        c.codebook_max_iters = int(kv.integer("codebook.max_iters", c.codebook_max_iters));
        c.codebook_utterances_per_lang =
            int(kv.integer("codebook.utterances_per_lang", c.codebook_utterances_per_lang));
        c.codebook_include_english =
            kv.flag("codebook.include_english", c.codebook_include_english);

        c.data_seed = uint64_t(kv.integer("data.seed", int64_t(c.data_seed)));
        c.t2tt_pool_per_lang = int(kv.integer("data.t2tt_pool_per_lang", c.t2tt_pool_per_lang));
        c.t2tt_stage3_per_lang = int(kv.integer("data.t2tt_stage3_per_lang", c.t2tt_stage3_per_lang));
        c.t2tt_stage2_per_lang = int(kv.integer("data.t2tt_stage2_per_lang", c.t2tt_stage2_per_lang));
        c.test_per_lang = int(kv.integer("data.test_per_lang", c.test_per_lang));
        c.pack_len = size_t(kv.integer("data.pack_len", int64_t(c.pack_len)));
        c.eval_seed = uint64_t(kv.integer("data.eval_seed", int64_t(c.eval_seed)));

        auto& q = c.quotas;
        q.s1_speech_high = int(kv.integer("quotas.stage1_speech_high", q.s1_speech_high));
        q.s1_speech_low = int(kv.integer("quotas.stage1_speech_low", q.s1_speech_low));
        q.s1_speech_eng = int(kv.integer("quotas.stage1_speech_eng", q.s1_speech_eng));
        q.s1_phoneme_per_lang =
            int(kv.integer("quotas.stage1_phoneme_per_lang", q.s1_phoneme_per_lang));
        q.s2_pr_high = int(kv.integer("quotas.stage2_pr_high", q.s2_pr_high));
        q.s2_pr_low = int(kv.integer("quotas.stage2_pr_low", q.s2_pr_low));
        q.s2_pr_eng = int(kv.integer("quotas.stage2_pr_eng", q.s2_pr_eng));
        q.s2_asr_high = int(kv.integer("quotas.stage2_asr_high", q.s2_asr_high));
        q.s2_asr_low = int(kv.integer("quotas.stage2_asr_low", q.s2_asr_low));
        q.s2_asr_eng = int(kv.integer("quotas.stage2_asr_eng", q.s2_asr_eng));
        q.s2_g2p_per_lang = int(kv.integer("quotas.stage2_g2p_per_lang", q.s2_g2p_per_lang));
        q.s2_p2g_per_lang = int(kv.integer("quotas.stage2_p2g_per_lang", q.s2_p2g_per_lang));
        q.s2_t2tt_per_lang = int(kv.integer("quotas.stage2_t2tt_per_lang", q.s2_t2tt_per_lang));
        q.s3_asr_high = int(kv.integer("quotas.stage3_asr_high", q.s3_asr_high));
        q.s3_asr_low = int(kv.integer("quotas.stage3_asr_low", q.s3_asr_low));
        q.s3_asr_eng = int(kv.integer("quotas.stage3_asr_eng", q.s3_asr_eng));
        q.s3_t2tt_per_lang = int(kv.integer("quotas.stage3_t2tt_per_lang", q.s3_t2tt_per_lang));
        q.s3_s2tt_high = int(kv.integer("quotas.stage3_s2tt_high", q.s3_s2tt_high));
        q.s3_s2tt_low = int(kv.integer("quotas.stage3_s2tt_low", q.s3_s2tt_low));

        c.pda.p_delete = kv.num("augment.p_delete", c.pda.p_delete);
        c.pda.p_mask = kv.num("augment.p_mask", c.pda.p_mask);
        c.pda.p_substitute = kv.num("augment.p_substitute", c.pda.p_substitute);
        c.pda.p_insert = kv.num("augment.p_insert", c.pda.p_insert);
        c.pda.p_space_shift = kv.num("augment.p_space_shift", c.pda.p_space_shift);
        c.pda.span_min = int(kv.integer("augment.span_min", c.pda.span_min));
        c.pda.span_max = int(kv.integer("augment.span_max", c.pda.span_max));
        c.pda.max_ops = int(kv.integer("augment.max_ops", c.pda.max_ops));
        c.pda.keep_fraction = kv.num("augment.keep_fraction", c.pda.keep_fraction);

        c.dps.frac_no_phoneme = kv.num("dps.frac_no_phoneme", c.dps.frac_no_phoneme);
        c.dps.frac_pda = kv.num("dps.frac_pda", c.dps.frac_pda);
        c.dps.frac_original = kv.num("dps.frac_original", c.dps.frac_original);

        c.model.n_layers = int(kv.integer("model.n_layers", c.model.n_layers));
        c.model.n_heads = int(kv.integer("model.n_heads", c.model.n_heads));
        c.model.dim = int(kv.integer("model.dim", c.model.dim));
        c.model.ffn_mult = int(kv.integer("model.ffn_mult", c.model.ffn_mult));
        c.model.max_len = int(kv.integer("model.max_len", c.model.max_len));
        c.model.dropout = kv.num("model.dropout", c.model.dropout);
        c.model.init_std = kv.num("model.init_std", c.model.init_std);
        c.model.seed = uint64_t(kv.integer("model.seed", int64_t(c.model.seed)));

        c.batch_scale = kv.num("train.batch_scale", c.batch_scale);
        c.micro_batch = int(kv.integer("train.micro_batch", c.micro_batch));
        c.train_seed = uint64_t(kv.integer("train.seed", int64_t(c.train_seed)));
        auto stage = [&](const char* name, StageTrainSettings& s) {
            const std::string p = std::string("train.") + name + "_";
            s.lr_peak = kv.num(p + "lr_peak", s.lr_peak);
            s.warmup_frac = kv.num(p + "warmup_frac", s.warmup_frac);
            s.epochs = int(kv.integer(p + "epochs", s.epochs));
            s.batch_effective = int(kv.integer(p + "batch_effective", s.batch_effective));
            s.max_len = size_t(kv.integer(p + "max_len", int64_t(s.max_len)));
        };
        stage("stage1", c.stage1);
        stage("stage2", c.stage2);
        stage("stage3", c.stage3);

        c.sampling.temperature = kv.num("decode.temperature", c.sampling.temperature);
        c.sampling.top_p = kv.num("decode.top_p", c.sampling.top_p);
        c.sampling.top_k = int(kv.integer("decode.top_k", c.sampling.top_k));
        c.sampling.n_beams = int(kv.integer("decode.n_beams", c.sampling.n_beams));
        c.sampling.early_stopping = kv.flag("decode.early_stopping", c.sampling.early_stopping);
        c.phoneme_top_k = int(kv.integer("decode.top_k_phoneme", c.phoneme_top_k));
        c.max_new_phonemes = int(kv.integer("decode.max_new_phonemes", c.max_new_phonemes));
        c.max_new_transcription =
            int(kv.integer("decode.max_new_transcription", c.max_new_transcription));
        c.max_new_translation = int(kv.integer("decode.max_new_translation", c.max_new_translation));
        c.decode_seed = uint64_t(kv.integer("decode.seed", int64_t(c.decode_seed)));

        c.baseline_system = kv.str("eval.baseline", c.baseline_system);
        c.n_resamples = int(kv.integer("eval.n_resamples", c.n_resamples));

        c.systems = kv.list("experiment.systems", "direct,cot,cot_ph,cot_ph_pda,cot_ph_dps");
        c.experiment_seeds.clear();
        for (const auto& s : kv.list("experiment.seeds", "0,1,2"))
            c.experiment_seeds.push_back(uint64_t(std::stoll(s)));

        kv.reject_unknown_keys();
        try {
            c.pda.validate();
            c.dps.validate();
        } catch (const Error& e) {
            throw ConfigError(e.what());
        }
        return c;
    }

    static RunConfig from_file(const std::string& path) {
        return from_kv(KvConfig::parse_file(path));
    }

    // Folds one experiment seed into every stochastic stream so independent
    // runs differ in world, data, training, and decoding.
    RunConfig with_run_seed(uint64_t run_seed) const {
        RunConfig c = *this;
        c.world.seed = mix_seed(world.seed, mix_seed(run_seed, "run-world"));
        c.data_seed = mix_seed(data_seed, mix_seed(run_seed, "run-data"));
        c.eval_seed = mix_seed(eval_seed, mix_seed(run_seed, "run-eval"));
        c.train_seed = mix_seed(train_seed, mix_seed(run_seed, "run-train"));
        c.model.seed = mix_seed(model.seed, mix_seed(run_seed, "run-model"));
        c.decode_seed = mix_seed(decode_seed, mix_seed(run_seed, "run-decode"));
        return c;
    }

    GenerationPlan plan_for(GenMode mode) const {
        auto plan = GenerationPlan::standard(mode, sampling, phoneme_top_k);
        plan.phoneme_step.max_new_tokens = max_new_phonemes;
        plan.transcription_step.max_new_tokens = max_new_transcription;
        plan.translation_step.max_new_tokens = max_new_translation;
        return plan;
    }

    int scaled_batch(int base) const {
        return std::max(1, int(std::llround(double(base) * batch_scale)));
    }
};

// ---------------------------------------------------------------------------
// Quota resolution per stage and variant
// ---------------------------------------------------------------------------

namespace detail {

inline void add_tiered(const WorldSpec& world, std::map<std::string, int>& out, int high, int low,
                       int eng) {
    for (const auto* l : world.source_languages()) {
        if (l->tier == Tier::High && high > 0) out[l->code] = high;
        if (l->tier == Tier::Low && low > 0) out[l->code] = low;
    }
    if (eng > 0) out[world.english.code] = eng;
}

inline std::map<std::string, int> all_source_langs(const WorldSpec& world, int n) {
    std::map<std::string, int> out;
    if (n > 0)
        for (const auto* l : world.source_languages()) out[l->code] = n;
    return out;
}

}  // namespace detail

inline Stage1Quotas resolve_stage1_quotas(const WorldSpec& world, const QuotaConfig& q) {
    Stage1Quotas out;
    detail::add_tiered(world, out.lm_speech, q.s1_speech_high, q.s1_speech_low, q.s1_speech_eng);
    out.lm_phoneme = detail::all_source_langs(world, q.s1_phoneme_per_lang);
    if (q.s1_phoneme_per_lang > 0) out.lm_phoneme[world.english.code] = q.s1_phoneme_per_lang;
    return out;
}

// The two baselines train stage 2 on ASR and T2TT only; the phoneme systems
// add PR, G2P, and P2G.
inline QuotaMap resolve_stage2_quotas(const WorldSpec& world, const QuotaConfig& q,
                                      Stage3Variant variant) {
    QuotaMap out;
    detail::add_tiered(world, out[TaskKind::ASR], q.s2_asr_high, q.s2_asr_low, q.s2_asr_eng);
    out[TaskKind::T2TT] = detail::all_source_langs(world, q.s2_t2tt_per_lang);
    const bool phoneme_system =
        variant == Stage3Variant::CotPh || variant == Stage3Variant::CotPhPda ||
        variant == Stage3Variant::CotPhDps;
    if (phoneme_system) {
        detail::add_tiered(world, out[TaskKind::PR], q.s2_pr_high, q.s2_pr_low, q.s2_pr_eng);
        out[TaskKind::G2P] = detail::all_source_langs(world, q.s2_g2p_per_lang);
        out[TaskKind::P2G] = detail::all_source_langs(world, q.s2_p2g_per_lang);
    }
    for (auto it = out.begin(); it != out.end();) {
        if (it->second.empty()) it = out.erase(it);
        else ++it;
    }
    return out;
}

inline QuotaMap resolve_stage3_quotas(const WorldSpec& world, const QuotaConfig& q,
                                      Stage3Variant variant) {
    QuotaMap out;
    const bool phoneme_system =
        variant == Stage3Variant::CotPh || variant == Stage3Variant::CotPhPda ||
        variant == Stage3Variant::CotPhDps;
    const TaskKind asr_kind = phoneme_system ? TaskKind::ASR_COT : TaskKind::ASR;
    const TaskKind text_kind = phoneme_system ? TaskKind::P2TT_COT : TaskKind::T2TT;
    const TaskKind s2tt_kind = variant == Stage3Variant::Direct ? TaskKind::S2TT_DIRECT
                               : variant == Stage3Variant::Cot  ? TaskKind::S2TT_COT
                                                                : TaskKind::S2TT_COT_PH;
    detail::add_tiered(world, out[asr_kind], q.s3_asr_high, q.s3_asr_low, q.s3_asr_eng);
    out[text_kind] = detail::all_source_langs(world, q.s3_t2tt_per_lang);
    detail::add_tiered(world, out[s2tt_kind], q.s3_s2tt_high, q.s3_s2tt_low, 0);
    for (auto it = out.begin(); it != out.end();) {
        if (it->second.empty()) it = out.erase(it);
        else ++it;
    }
    return out;
}

inline std::string quota_canonical(const QuotaMap& q) {
    std::ostringstream os;
    for (const auto& [kind, per_lang] : q)
        for (const auto& [lang, n] : per_lang)
            os << task_kind_name(kind) << "/" << lang << "=" << n << ";";
    return os.str();
}

inline std::string quota_canonical(const Stage1Quotas& q) {
    std::ostringstream os;
    for (const auto& [lang, n] : q.lm_speech) os << "lm_speech/" << lang << "=" << n << ";";
    for (const auto& [lang, n] : q.lm_phoneme) os << "lm_phoneme/" << lang << "=" << n << ";";
    return os.str();
}

// ---------------------------------------------------------------------------
// Digest chain
// ---------------------------------------------------------------------------

namespace digests {

inline std::string world(const RunConfig& c) {
    std::ostringstream os;
    const auto& w = c.world;
    os << "world|seed=" << w.seed << "|fam=" << w.n_families << "|lpf=" << w.langs_per_family
       << "|con=" << w.n_concepts << "|ph=" << w.n_phonemes << "|rl=" << w.root_len_min << "-"
       << w.root_len_max << "|wl=" << w.word_len_min << "-" << w.word_len_max
       << "|ab=" << w.alphabet_size << "|ex=" << w.exotic_symbols << "," << w.exotic_swaps;
    return digest_hex(fnv1a64(os.str()));
}

inline std::string codebook(const RunConfig& c) {
    std::ostringstream os;
    os << "codebook|" << world(c) << "|fd=" << c.speech.feat_dim << "|sn=" << c.speech.sigma_noise
       << "|ss=" << c.speech.sigma_speaker << "|fr=" << c.speech.frames_min << "-"
       << c.speech.frames_max << "|k=" << c.codebook_k << "|it=" << c.codebook_max_iters
       << "|upl=" << c.codebook_utterances_per_lang << "|en=" << c.codebook_include_english;
    return digest_hex(fnv1a64(os.str()));
}

inline std::string vocab(const RunConfig& c) {
    return digest_hex(fnv1a64("vocab|" + world(c) + "|k=" + std::to_string(c.codebook_k)));
}

inline std::string testset(const RunConfig& c) {
    std::ostringstream os;
    os << "testset|" << codebook(c) << "|n=" << c.test_per_lang << "|seed=" << c.eval_seed;
    return digest_hex(fnv1a64(os.str()));
}

inline std::string augment_str(const RunConfig& c) {
    std::ostringstream os;
    const auto& p = c.pda;
    os << "pda=" << p.p_delete << "," << p.p_mask << "," << p.p_substitute << "," << p.p_insert
       << "," << p.p_space_shift << "," << p.span_min << "-" << p.span_max << "," << p.max_ops
       << "," << p.keep_fraction << "|dps=" << c.dps.frac_no_phoneme << "," << c.dps.frac_pda
       << "," << c.dps.frac_original;
    return os.str();
}

inline std::string dataset(const RunConfig& c, const WorldSpec& w, int stage,
                           Stage3Variant variant) {
    std::ostringstream os;
    os << "data|" << codebook(c) << "|" << testset(c) << "|seed=" << c.data_seed
       << "|stage=" << stage << "|pool=" << c.t2tt_pool_per_lang << ","
       << c.t2tt_stage3_per_lang << "," << c.t2tt_stage2_per_lang << "|pack=" << c.pack_len;
    if (stage == 1) {
        os << "|q=" << quota_canonical(resolve_stage1_quotas(w, c.quotas));
    } else if (stage == 2) {
        os << "|q=" << quota_canonical(resolve_stage2_quotas(w, c.quotas, variant));
    } else {
        os << "|q=" << quota_canonical(resolve_stage3_quotas(w, c.quotas, variant));
        if (variant == Stage3Variant::CotPhPda || variant == Stage3Variant::CotPhDps)
            os << "|aug=" << augment_str(c) << "|v=" << variant_name(variant);
    }
    return digest_hex(fnv1a64(os.str()));
}

inline std::string train_str(const RunConfig& c, const StageTrainSettings& s) {
    std::ostringstream os;
    os << "lr=" << s.lr_peak << "|wu=" << s.warmup_frac << "|ep=" << s.epochs
       << "|bs=" << c.scaled_batch(s.batch_effective) << "|mb=" << c.micro_batch
       << "|ml=" << s.max_len;
    return os.str();
}

inline std::string model_str(const RunConfig& c) {
    std::ostringstream os;
    os << "L=" << c.model.n_layers << "|H=" << c.model.n_heads << "|d=" << c.model.dim
       << "|f=" << c.model.ffn_mult << "|ml=" << c.model.max_len << "|do=" << c.model.dropout
       << "|is=" << c.model.init_std << "|seed=" << c.model.seed;
    return os.str();
}

inline std::string checkpoint(const RunConfig& c, const WorldSpec& w, int stage,
                              Stage3Variant variant) {
    std::string prev = stage == 1 ? "init" : checkpoint(c, w, stage - 1, variant);
    const StageTrainSettings& s = stage == 1 ? c.stage1 : (stage == 2 ? c.stage2 : c.stage3);
    std::ostringstream os;
    os << "ckpt|" << prev << "|" << dataset(c, w, stage, variant) << "|" << model_str(c) << "|"
       << train_str(c, s) << "|tseed=" << c.train_seed << "|stage=" << stage;
    return digest_hex(fnv1a64(os.str()));
}

inline std::string decode_str(const RunConfig& c) {
    std::ostringstream os;
    os << "T=" << c.sampling.temperature << "|p=" << c.sampling.top_p << "|k=" << c.sampling.top_k
       << "|kph=" << c.phoneme_top_k << "|b=" << c.sampling.n_beams << "|es="
       << c.sampling.early_stopping << "|mx=" << c.max_new_phonemes << ","
       << c.max_new_transcription << "," << c.max_new_translation << "|seed=" << c.decode_seed;
    return os.str();
}

inline std::string traces(const RunConfig& c, const WorldSpec& w, const std::string& system,
                          GenMode mode) {
    const auto variant = variant_from(system);
    std::ostringstream os;
    os << "traces|" << checkpoint(c, w, 3, variant) << "|" << testset(c) << "|"
       << decode_str(c) << "|mode=" << gen_mode_name(mode);
    return digest_hex(fnv1a64(os.str()));
}

inline std::string report(const RunConfig& c, const WorldSpec& w) {
    std::ostringstream os;
    os << "report|" << testset(c) << "|base=" << c.baseline_system << "|n=" << c.n_resamples;
    for (const auto& system : c.systems) {
        const auto variant = variant_from(system);
        os << "|" << checkpoint(c, w, 3, variant);
    }
    os << "|" << decode_str(c);
    return digest_hex(fnv1a64(os.str()));
}

}  // namespace digests

// ---------------------------------------------------------------------------
// Workspace: artifact paths, digest-checked load/store
// ---------------------------------------------------------------------------

struct Workspace {
    std::filesystem::path out;
    RunConfig cfg;
    bool force = false;
    bool quiet = false;

    void log(const std::string& msg) const {
        if (!quiet) std::cout << msg << "\n";
    }

    std::filesystem::path world_path() const { return out / "world.json"; }
    std::filesystem::path vocab_path() const { return out / "vocab.txt"; }
    std::filesystem::path vocab_meta_path() const { return out / "vocab.meta.json"; }
    std::filesystem::path codebook_path() const { return out / "codebook.bin"; }
    std::filesystem::path codebook_meta_path() const { return out / "codebook.meta.json"; }
    std::filesystem::path testset_path(const std::string& digest) const {
        return out / ("testset-" + digest.substr(0, 8) + ".jsonl");
    }
    std::filesystem::path dataset_path(int stage, const std::string& digest) const {
        return out / ("data-stage" + std::to_string(stage) + "-" + digest.substr(0, 8) + ".jsonl");
    }
    std::filesystem::path manifest_path(int stage, const std::string& digest) const {
        return out / ("data-stage" + std::to_string(stage) + "-" + digest.substr(0, 8) +
                      ".manifest.json");
    }
    std::filesystem::path checkpoint_path(int stage, const std::string& digest) const {
        return out / ("ckpt-stage" + std::to_string(stage) + "-" + digest.substr(0, 8) + ".pcms");
    }
    std::filesystem::path metrics_path(int stage, const std::string& digest) const {
        return out / ("metrics-stage" + std::to_string(stage) + "-" + digest.substr(0, 8) + ".csv");
    }
    std::filesystem::path traces_path(const std::string& system, GenMode mode,
                                      const std::string& digest) const {
        return out / ("traces-" + system + "-" + gen_mode_name(mode) + "-" + digest.substr(0, 8) +
                      ".jsonl");
    }
    std::filesystem::path report_path() const { return out / "report.json"; }
    std::filesystem::path report_table_path() const { return out / "report.txt"; }
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline WorldSpec cmd_world(const Workspace& ws) {
    std::filesystem::create_directories(ws.out);
    const std::string digest = digests::world(ws.cfg);
    if (std::filesystem::exists(ws.world_path()) && !ws.force) {
        std::ifstream f(ws.world_path());
        nlohmann::json j;
        f >> j;
        const std::string have = j.value("config_digest", "");
        if (have == digest) {
            ws.log("[world] up-to-date (" + digest.substr(0, 8) + ")");
            return world_from_json(j);
        }
        throw DigestMismatch("world.json was built from a different configuration (have " +
                             have.substr(0, 8) + ", want " + digest.substr(0, 8) +
                             "); use --force to rebuild");
    }
    auto world = generate_world(ws.cfg.world.seed, ws.cfg.world);
    auto j = world_to_json(world);
    j["config_digest"] = digest;
    std::ofstream f(ws.world_path(), std::ios::binary);
    require(f.good(), "cannot write world file");
    f << j.dump(2) << "\n";
    ws.log("[world] generated " + std::to_string(world.source_languages().size()) +
           " source languages (" + digest.substr(0, 8) + ")");
    return world;
}

inline WorldSpec load_world_checked(const Workspace& ws) {
    if (!std::filesystem::exists(ws.world_path()))
        throw MissingArtifact("missing artifact: " + ws.world_path().string() +
                              " (run the world command first)");
    std::ifstream f(ws.world_path());
    nlohmann::json j;
    f >> j;
    const std::string digest = digests::world(ws.cfg);
    const std::string have = j.value("config_digest", "");
    if (have != digest && !ws.force)
        throw DigestMismatch("world.json digest mismatch (have " + have.substr(0, 8) + ", want " +
                             digest.substr(0, 8) + ")");
    return world_from_json(j);
}

// Codebook training frames come from the speech-rich languages only.
inline Codebook cmd_codebook(const Workspace& ws) {
    auto world = load_world_checked(ws);
    const std::string digest = digests::codebook(ws.cfg);
    if (std::filesystem::exists(ws.codebook_path()) && !ws.force) {
        std::ifstream mf(ws.codebook_meta_path());
        if (mf.good()) {
            nlohmann::json m;
            mf >> m;
            if (m.value("config_digest", "") == digest) {
                ws.log("[codebook] up-to-date (" + digest.substr(0, 8) + ")");
                return load_codebook(ws.codebook_path().string());
            }
        }
        throw DigestMismatch("codebook.bin was built from a different configuration; use --force");
    }

    SpeechSynthesizer synth(world.inventory, ws.cfg.world.seed, ws.cfg.speech);
    std::vector<std::string> langs;
    for (const auto* l : world.source_languages())
        if (l->tier == Tier::High) langs.push_back(l->code);
    if (ws.cfg.codebook_include_english) langs.push_back(world.english.code);

    std::vector<FrameMatrix> parts;
    for (const auto& lang : langs) {
        Rng rng(mix_seed(ws.cfg.data_seed, "codebook/" + lang));
        for (int i = 0; i < ws.cfg.codebook_utterances_per_lang; ++i) {
            auto s = sample_sentence(world, lang, rng);
            parts.push_back(synth.synthesize(s.source_phonemes, rng.u64(), rng));
        }
    }
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.rows();
    FrameMatrix frames(rows, ws.cfg.speech.feat_dim);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        frames.middleRows(at, p.rows()) = p;
        at += p.rows();
    }
    auto cb = train_codebook(frames, ws.cfg.codebook_k, ws.cfg.codebook_max_iters,
                             mix_seed(ws.cfg.data_seed, "codebook-train"));
    save_codebook(cb, ws.codebook_path().string());
    nlohmann::json m;
    m["config_digest"] = digest;
    m["seed"] = cb.meta.seed;
    m["iterations"] = cb.meta.iterations;
    m["final_inertia"] = cb.meta.final_inertia;
    m["reseed_events"] = cb.meta.reseed_events;
    m["inertia_per_iter"] = cb.meta.inertia_per_iter;
    m["training_frames"] = rows;
    std::ofstream mf(ws.codebook_meta_path(), std::ios::binary);
    mf << m.dump(2) << "\n";
    ws.log("[codebook] trained k=" + std::to_string(cb.k()) + " on " + std::to_string(rows) +
           " frames, " + std::to_string(cb.meta.iterations) + " iterations (" +
           digest.substr(0, 8) + ")");
    return cb;
}

inline Codebook load_codebook_checked(const Workspace& ws) {
    if (!std::filesystem::exists(ws.codebook_path()))
        throw MissingArtifact("missing artifact: " + ws.codebook_path().string() +
                              " (run the codebook command first)");
    std::ifstream mf(ws.codebook_meta_path());
    if (mf.good() && !ws.force) {
        nlohmann::json m;
        mf >> m;
        const std::string have = m.value("config_digest", "");
        const std::string want = digests::codebook(ws.cfg);
        if (have != want)
            throw DigestMismatch("codebook digest mismatch (have " + have.substr(0, 8) +
                                 ", want " + want.substr(0, 8) + ")");
    }
    return load_codebook(ws.codebook_path().string());
}

inline Vocabulary ensure_vocab(const Workspace& ws, const WorldSpec& world) {
    const std::string digest = digests::vocab(ws.cfg);
    if (std::filesystem::exists(ws.vocab_path())) {
        std::ifstream mf(ws.vocab_meta_path());
        if (mf.good()) {
            nlohmann::json m;
            mf >> m;
            if (m.value("config_digest", "") == digest)
                return Vocabulary::load(ws.vocab_path().string());
        }
        if (!ws.force)
            throw DigestMismatch("vocab.txt was built from a different configuration; use --force");
    }
    auto vocab = build_world_vocabulary(world, size_t(ws.cfg.codebook_k));
    vocab.save(ws.vocab_path().string());
    nlohmann::json m;
    m["config_digest"] = digest;
    m["n_base"] = vocab.n_base();
    m["n_speech"] = vocab.n_speech();
    m["n_phoneme"] = vocab.n_phoneme();
    std::ofstream mf(ws.vocab_meta_path(), std::ios::binary);
    mf << m.dump(2) << "\n";
    ws.log("[vocab] " + std::to_string(vocab.size()) + " tokens (" + digest.substr(0, 8) + ")");
    return vocab;
}

inline TestSet ensure_testset(const Workspace& ws, const WorldSpec& world,
                              const SpeechSynthesizer& synth, const Codebook& cb) {
    const std::string digest = digests::testset(ws.cfg);
    const auto path = ws.testset_path(digest);
    if (std::filesystem::exists(path)) {
        std::ifstream f(path);
        TestSet ts;
        std::string line;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            TestSentence s;
            s.sent.lang = j.at("lang").get<std::string>();
            s.sent.id = j.at("id").get<int64_t>();
            s.sent.source_text = j.at("source").get<std::string>();
            s.sent.source_phonemes = j.at("phonemes").get<std::string>();
            s.sent.target_text = j.at("target").get<std::string>();
            s.audio = j.at("audio").get<std::string>();
            ts[s.sent.lang].push_back(std::move(s));
        }
        return ts;
    }
    auto ts = build_test_set(world, synth, cb, ws.cfg.eval_seed, ws.cfg.test_per_lang);
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot write test set");
    for (const auto& [lang, list] : ts) {
        for (const auto& s : list) {
            nlohmann::json j;
            j["lang"] = lang;
            j["id"] = s.sent.id;
            j["source"] = s.sent.source_text;
            j["phonemes"] = s.sent.source_phonemes;
            j["target"] = s.sent.target_text;
            j["audio"] = s.audio;
            f << j.dump() << "\n";
        }
    }
    ws.log("[testset] " + std::to_string(ts.size()) + " languages x " +
           std::to_string(ws.cfg.test_per_lang) + " sentences (" + digest.substr(0, 8) + ")");
    return ts;
}

// Builds (or reuses) the dataset for one stage and variant.
inline std::string cmd_data(const Workspace& ws, int stage, Stage3Variant variant) {
    auto world = load_world_checked(ws);
    auto cb = load_codebook_checked(ws);
    auto vocab = ensure_vocab(ws, world);
    SpeechSynthesizer synth(world.inventory, ws.cfg.world.seed, ws.cfg.speech);
    auto testset = ensure_testset(ws, world, synth, cb);

    const std::string digest = digests::dataset(ws.cfg, world, stage, variant);
    const auto path = ws.dataset_path(stage, digest);
    if (std::filesystem::exists(path) && !ws.force) {
        ws.log("[data] stage " + std::to_string(stage) + " " + variant_name(variant) +
               " up-to-date (" + digest.substr(0, 8) + ")");
        return digest;
    }

    const auto holdout = holdout_keys(testset);
    CorpusContext ctx{world, synth, cb, vocab, ws.cfg.data_seed, &holdout};

    StageDataset ds;
    if (stage == 1) {
        ds = build_stage1(ctx, resolve_stage1_quotas(world, ws.cfg.quotas), ws.cfg.pack_len);
    } else {
        std::vector<std::string> langs;
        for (const auto* l : world.source_languages()) langs.push_back(l->code);
        auto pool = sample_t2tt_pool(ctx, langs, ws.cfg.t2tt_pool_per_lang);
        const int64_t n_langs = int64_t(langs.size());
        auto [chunk3, chunk2] = subsample_t2tt(std::move(pool),
                                               n_langs * ws.cfg.t2tt_stage3_per_lang,
                                               n_langs * ws.cfg.t2tt_stage2_per_lang);
        if (stage == 2) {
            ds = build_stage2(ctx, resolve_stage2_quotas(world, ws.cfg.quotas, variant), chunk2,
                              ws.cfg.stage2.max_len);
        } else {
            ds = build_stage3(ctx, variant, resolve_stage3_quotas(world, ws.cfg.quotas, variant),
                              chunk3, ws.cfg.stage3.max_len);
            PdaPolicy policy = ws.cfg.pda;
            policy.inventory = world.inventory.symbols;
            policy.mask_symbol = kPhonemeMask;
            policy.separator = world.inventory.separator;
            if (variant == Stage3Variant::CotPhPda) {
                StageDataset augmented;
                augmented.stage = ds.stage;
                augmented.notes = ds.notes;
                for (const auto& s : ds.samples) {
                    if (s.kind == TaskKind::ASR_COT || s.kind == TaskKind::S2TT_COT_PH) {
                        Rng rng(mix_seed(ws.cfg.data_seed,
                                         std::string("pda/") + task_kind_name(s.kind) + "/" +
                                             s.lang + "/" + std::to_string(s.meta.sentence_id)));
                        augmented.samples.push_back(
                            apply_pda(s, policy, rng, vocab, ws.cfg.stage3.max_len));
                    } else {
                        augmented.samples.push_back(s);
                    }
                }
                canonicalize_order(augmented);
                recount_provenance(augmented, world);
                ds = std::move(augmented);
            } else if (variant == Stage3Variant::CotPhDps) {
                ds = dps_mix(ds, ws.cfg.dps, policy, ctx, ws.cfg.stage3.max_len,
                             mix_seed(ws.cfg.data_seed, "dps"));
            }
        }
    }

    require(zero_tier_speech_samples(ds, world) == 0,
            "zero-tier audit failed for stage " + std::to_string(stage));
    save_dataset(ds, path.string(), ws.manifest_path(stage, digest).string(), digest);
    ws.log("[data] stage " + std::to_string(stage) + " " + variant_name(variant) + ": " +
           std::to_string(ds.samples.size()) + " samples (" + digest.substr(0, 8) + ")");
    return digest;
}

inline StageTrainConfig stage_train_config(const RunConfig& cfg, int stage) {
    StageTrainConfig tc = StageTrainConfig::defaults_for_stage(stage);
    const StageTrainSettings& s = stage == 1 ? cfg.stage1 : (stage == 2 ? cfg.stage2 : cfg.stage3);
    tc.lr_peak = s.lr_peak;
    tc.warmup_frac = s.warmup_frac;
    tc.epochs = s.epochs;
    tc.batch_effective = cfg.scaled_batch(s.batch_effective);
    tc.micro_batch = std::min(cfg.micro_batch, tc.batch_effective);
    tc.max_len = s.max_len;
    return tc;
}

// Trains one curriculum stage on top of the previous stage's checkpoint.
inline std::string cmd_train(const Workspace& ws, int stage, Stage3Variant variant) {
    require(stage >= 1 && stage <= 3, "train: stage must be 1, 2, or 3");
    auto world = load_world_checked(ws);
    auto vocab = ensure_vocab(ws, world);

    const std::string ckpt_digest = digests::checkpoint(ws.cfg, world, stage, variant);
    const auto ckpt_path = ws.checkpoint_path(stage, ckpt_digest);
    if (std::filesystem::exists(ckpt_path) && !ws.force) {
        ws.log("[train] stage " + std::to_string(stage) + " " + variant_name(variant) +
               " up-to-date (" + ckpt_digest.substr(0, 8) + ")");
        return ckpt_digest;
    }

    const std::string data_digest = digests::dataset(ws.cfg, world, stage, variant);
    const auto data_path = ws.dataset_path(stage, data_digest);
    if (!std::filesystem::exists(data_path))
        throw MissingArtifact("missing artifact: " + data_path.string() +
                              " (run the data command for stage " + std::to_string(stage) + ")");
    auto ds = load_dataset(data_path.string(), ws.manifest_path(stage, data_digest).string());

    ModelState<float> model;
    if (stage == 1) {
        ModelConfig mc = ws.cfg.model;
        model = init_model<float>(mc, EmbeddingLayout::of(vocab, size_t(mc.dim)));
    } else {
        const std::string prev_digest = digests::checkpoint(ws.cfg, world, stage - 1, variant);
        const auto prev_path = ws.checkpoint_path(stage - 1, prev_digest);
        if (!std::filesystem::exists(prev_path))
            throw MissingArtifact("missing artifact: " + prev_path.string() + " (train stage " +
                                  std::to_string(stage - 1) + " first)");
        CheckpointInfo info;
        model = load_checkpoint<float>(prev_path.string(), &info);
        if (info.config_digest != fnv1a64(prev_digest) && !ws.force)
            throw DigestMismatch("stage " + std::to_string(stage - 1) +
                                 " checkpoint digest mismatch");
    }

    auto tc = stage_train_config(ws.cfg, stage);
    Rng rng(mix_seed(ws.cfg.train_seed,
                     "train/stage" + std::to_string(stage) + "/" + variant_name(variant)));
    auto metrics = train_stage(model, ds, tc, rng);
    save_checkpoint(model, ckpt_path.string(), fnv1a64(ckpt_digest));
    metrics.save_csv(ws.metrics_path(stage, ckpt_digest).string());
    std::ostringstream note;
    note << "[train] stage " << stage << " " << variant_name(variant) << ": "
         << metrics.steps.size() << " steps, final loss " << std::fixed << std::setprecision(4)
         << metrics.final_loss << " (" << ckpt_digest.substr(0, 8) << ")";
    ws.log(note.str());
    return ckpt_digest;
}

// Decodes the evaluation set with one trained system and writes traces.
inline std::string cmd_decode(const Workspace& ws, const std::string& system, GenMode mode) {
    auto world = load_world_checked(ws);
    auto cb = load_codebook_checked(ws);
    auto vocab = ensure_vocab(ws, world);
    SpeechSynthesizer synth(world.inventory, ws.cfg.world.seed, ws.cfg.speech);
    auto testset = ensure_testset(ws, world, synth, cb);

    const auto variant = variant_from(system);
    const std::string ckpt_digest = digests::checkpoint(ws.cfg, world, 3, variant);
    const auto ckpt_path = ws.checkpoint_path(3, ckpt_digest);
    if (!std::filesystem::exists(ckpt_path))
        throw MissingArtifact("missing artifact: " + ckpt_path.string() + " (train system " +
                              system + " first)");

    const std::string digest = digests::traces(ws.cfg, world, system, mode);
    const auto path = ws.traces_path(system, mode, digest);
    if (std::filesystem::exists(path) && !ws.force) {
        ws.log("[decode] " + system + "/" + gen_mode_name(mode) + " up-to-date (" +
               digest.substr(0, 8) + ")");
        return digest;
    }

    auto model = load_checkpoint<float>(ckpt_path.string());
    auto plan = ws.cfg.plan_for(mode);
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot write traces file");
    int64_t truncated = 0;
    for (const auto& [lang, list] : testset) {
        std::vector<CoTTrace> traces(list.size());
        parallel_chunks(list.size(), [&](size_t lo, size_t hi, unsigned) {
            for (size_t i = lo; i < hi; ++i) {
                Rng rng(mix_seed(ws.cfg.decode_seed, system + "/" + gen_mode_name(mode) + "/" +
                                                         lang + "/" + std::to_string(i)));
                traces[i] = controlled_generate(model, vocab, list[i].audio, lang, plan, rng);
            }
        });
        for (size_t i = 0; i < list.size(); ++i) {
            truncated += traces[i].truncated;
            f << trace_to_json(int64_t(i), lang, mode, traces[i]).dump() << "\n";
        }
    }
    ws.log("[decode] " + system + "/" + gen_mode_name(mode) + ": wrote traces, " +
           std::to_string(truncated) + " truncated (" + digest.substr(0, 8) + ")");
    return digest;
}

inline std::vector<std::pair<std::string, GenMode>> report_rows(const RunConfig& cfg) {
    std::vector<std::pair<std::string, GenMode>> rows;
    for (const auto& system : cfg.systems) {
        const auto variant = variant_from(system);
        switch (variant) {
            case Stage3Variant::Direct: rows.emplace_back(system, GenMode::Direct); break;
            case Stage3Variant::Cot: rows.emplace_back(system, GenMode::Cot); break;
            case Stage3Variant::CotPh:
            case Stage3Variant::CotPhPda: rows.emplace_back(system, GenMode::CotPh); break;
            case Stage3Variant::CotPhDps:
                rows.emplace_back(system, GenMode::CotPh);
                rows.emplace_back(system, GenMode::CotDpsNoPh);
                break;
        }
    }
    return rows;
}

// Scores every system of the roster on the shared test set.
inline EvalReport cmd_eval(const Workspace& ws) {
    auto world = load_world_checked(ws);
    auto cb = load_codebook_checked(ws);
    auto vocab = ensure_vocab(ws, world);
    SpeechSynthesizer synth(world.inventory, ws.cfg.world.seed, ws.cfg.speech);
    auto testset = ensure_testset(ws, world, synth, cb);

    ExperimentRecipe recipe;
    recipe.baseline_system = ws.cfg.baseline_system;
    recipe.baseline_mode = GenMode::Cot;
    recipe.sampling = ws.cfg.sampling;
    recipe.phoneme_top_k = ws.cfg.phoneme_top_k;
    recipe.max_new_phonemes = ws.cfg.max_new_phonemes;
    recipe.max_new_transcription = ws.cfg.max_new_transcription;
    recipe.max_new_translation = ws.cfg.max_new_translation;
    recipe.n_resamples = ws.cfg.n_resamples;
    recipe.decode_seed = ws.cfg.decode_seed;
    recipe.bootstrap_seed = mix_seed(ws.cfg.decode_seed, "bootstrap");
    std::vector<std::string> missing;
    for (const auto& [system, mode] : report_rows(ws.cfg)) {
        const auto variant = variant_from(system);
        const auto path = ws.checkpoint_path(3, digests::checkpoint(ws.cfg, world, 3, variant));
        if (!std::filesystem::exists(path)) missing.push_back(system);
        recipe.rows.push_back({system, mode, path.string()});
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing) list += " " + m;
        throw MissingArtifact("missing stage-3 checkpoints for:" + list);
    }

    std::map<std::string, std::ofstream> trace_files;
    std::map<std::string, int64_t> trace_counters;
    TraceSink sink = [&](const std::string& system, GenMode mode, const std::string& lang,
                         const CoTTrace& trace) {
        const std::string key = system + "-" + gen_mode_name(mode);
        auto it = trace_files.find(key);
        if (it == trace_files.end()) {
            const std::string digest = digests::traces(ws.cfg, world, system, mode);
            it = trace_files
                     .emplace(key, std::ofstream(ws.traces_path(system, mode, digest),
                                                 std::ios::binary))
                     .first;
        }
        it->second << trace_to_json(trace_counters[key + lang]++, lang, mode, trace).dump()
                   << "\n";
    };

    auto report = run_experiment<float>(world, vocab, testset, recipe, sink);
    report.config_digest = digests::report(ws.cfg, world);
    report.seeds = {ws.cfg.world.seed};

    {
        std::ofstream f(ws.report_path(), std::ios::binary);
        require(f.good(), "cannot write report");
        f << report_to_json(report).dump(2) << "\n";
    }
    const std::string table = report_table(report, world);
    {
        std::ofstream f(ws.report_table_path(), std::ios::binary);
        f << table;
    }
    ws.log(table);
    return report;
}

// Full pipeline for every experiment seed: world, codebook, data, the
// three-stage curriculum for every system, decoding, and scoring.
inline std::vector<EvalReport> cmd_experiment(const Workspace& base) {
    std::vector<EvalReport> reports;
    for (const uint64_t seed : base.cfg.experiment_seeds) {
        Workspace ws = base;
        ws.cfg = base.cfg.with_run_seed(seed);
        ws.out = base.out / ("seed" + std::to_string(seed));
        std::filesystem::create_directories(ws.out);
        ws.log("=== experiment seed " + std::to_string(seed) + " ===");
        cmd_world(ws);
        cmd_codebook(ws);
        for (const auto& system : ws.cfg.systems) {
            const auto variant = variant_from(system);
            for (int stage = 1; stage <= 3; ++stage) {
                cmd_data(ws, stage, variant);
                cmd_train(ws, stage, variant);
            }
        }
        auto report = cmd_eval(ws);
        report.seeds = {seed};
        reports.push_back(std::move(report));
    }

    // Seed-averaged tier means per (system, mode) row.
    nlohmann::json summary;
    summary["seeds"] = base.cfg.experiment_seeds;
    nlohmann::json rows = nlohmann::json::array();
    if (!reports.empty()) {
        for (size_t r = 0; r < reports[0].rows.size(); ++r) {
            nlohmann::json jr;
            jr["system"] = reports[0].rows[r].system;
            jr["mode"] = reports[0].rows[r].mode;
            std::map<std::string, double> tier_sum;
            for (const auto& rep : reports)
                for (const auto& [tier, avg] : rep.rows[r].tier_avg) tier_sum[tier] += avg;
            nlohmann::json tiers;
            for (const auto& [tier, sum] : tier_sum)
                tiers[tier] = sum / double(reports.size());
            jr["tier_avg_mean"] = std::move(tiers);
            rows.push_back(std::move(jr));
        }
    }
    summary["rows"] = std::move(rows);
    std::filesystem::create_directories(base.out);
    std::ofstream f(base.out / "experiment-summary.json", std::ios::binary);
    f << summary.dump(2) << "\n";
    base.log("[experiment] wrote " + (base.out / "experiment-summary.json").string());
    return reports;
}

}  // namespace phonecot
