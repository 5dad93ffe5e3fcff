// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "phonecot/speech.hpp"
#include "phonecot/synthlang.hpp"
#include "phonecot/vocab.hpp"

namespace phonecot {

// ---------------------------------------------------------------------------
// Task kinds
// ---------------------------------------------------------------------------

enum class TaskKind {
    LM_SPEECH,
    LM_PHONEME,
    PR,
    P2G,
    G2P,
    ASR,
    T2TT,
    S2TT_DIRECT,
    ASR_COT,
    P2TT_COT,
    S2TT_COT,
    S2TT_COT_PH,
};

inline const std::vector<TaskKind>& all_task_kinds() {
    static const std::vector<TaskKind> kinds = {
        TaskKind::LM_SPEECH, TaskKind::LM_PHONEME, TaskKind::PR,       TaskKind::P2G,
        TaskKind::G2P,       TaskKind::ASR,        TaskKind::T2TT,     TaskKind::S2TT_DIRECT,
        TaskKind::ASR_COT,   TaskKind::P2TT_COT,   TaskKind::S2TT_COT, TaskKind::S2TT_COT_PH,
    };
    return kinds;
}

inline const char* task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::LM_SPEECH: return "lm_speech";
        case TaskKind::LM_PHONEME: return "lm_phoneme";
        case TaskKind::PR: return "pr";
        case TaskKind::P2G: return "p2g";
        case TaskKind::G2P: return "g2p";
        case TaskKind::ASR: return "asr";
        case TaskKind::T2TT: return "t2tt";
        case TaskKind::S2TT_DIRECT: return "s2tt_direct";
        case TaskKind::ASR_COT: return "asr_cot";
        case TaskKind::P2TT_COT: return "p2tt_cot";
        case TaskKind::S2TT_COT: return "s2tt_cot";
        case TaskKind::S2TT_COT_PH: return "s2tt_cot_ph";
    }
    fail("unknown task kind");
}

inline TaskKind task_kind_from(const std::string& name) {
    for (TaskKind k : all_task_kinds())
        if (name == task_kind_name(k)) return k;
    fail("unknown task kind name: " + name);
}

// Kinds whose input carries speech tokens; these are forbidden for zero-tier
// languages at every stage.
inline bool is_speech_kind(TaskKind k) {
    switch (k) {
        case TaskKind::LM_SPEECH:
        case TaskKind::PR:
        case TaskKind::ASR:
        case TaskKind::ASR_COT:
        case TaskKind::S2TT_DIRECT:
        case TaskKind::S2TT_COT:
        case TaskKind::S2TT_COT_PH:
            return true;
        default:
            return false;
    }
}

inline const std::set<TaskKind>& stage2_kinds() {
    static const std::set<TaskKind> kinds = {TaskKind::PR, TaskKind::P2G, TaskKind::G2P,
                                             TaskKind::ASR, TaskKind::T2TT};
    return kinds;
}

enum class Stage3Variant { Direct, Cot, CotPh, CotPhPda, CotPhDps };

inline const char* variant_name(Stage3Variant v) {
    switch (v) {
        case Stage3Variant::Direct: return "direct";
        case Stage3Variant::Cot: return "cot";
        case Stage3Variant::CotPh: return "cot_ph";
        case Stage3Variant::CotPhPda: return "cot_ph_pda";
        case Stage3Variant::CotPhDps: return "cot_ph_dps";
    }
    fail("unknown variant");
}

inline Stage3Variant variant_from(const std::string& name) {
    for (auto v : {Stage3Variant::Direct, Stage3Variant::Cot, Stage3Variant::CotPh,
                   Stage3Variant::CotPhPda, Stage3Variant::CotPhDps})
        if (name == variant_name(v)) return v;
    fail("unknown variant name: " + name);
}

inline const std::set<TaskKind>& stage3_kinds(Stage3Variant v) {
    static const std::set<TaskKind> direct = {TaskKind::ASR, TaskKind::T2TT,
                                              TaskKind::S2TT_DIRECT};
    static const std::set<TaskKind> cot = {TaskKind::ASR, TaskKind::T2TT, TaskKind::S2TT_COT};
    static const std::set<TaskKind> cot_ph = {TaskKind::ASR_COT, TaskKind::P2TT_COT,
                                              TaskKind::S2TT_COT_PH};
    switch (v) {
        case Stage3Variant::Direct: return direct;
        case Stage3Variant::Cot: return cot;
        default: return cot_ph;
    }
}

// ---------------------------------------------------------------------------
// Prompt templates. Section headers are shared across task kinds so skills
// learned in one task transfer to the chained ones.
// ---------------------------------------------------------------------------

namespace prompt {

inline std::string phoneme_header(const std::string& lang) {
    return "The phonemic sequence in " + lang + " is:";
}
inline std::string transcription_of_phonemes_header(const std::string& lang) {
    return "The transcription of the phonemic sequence in " + lang + " is:";
}
inline std::string transcription_of_audio_header(const std::string& lang) {
    return "The transcription of the speech audio in " + lang + " is:";
}
inline std::string translation_header(const std::string& lang) {
    return "The translation from " + lang + " to English is:";
}

inline std::string wrap_phonemes(const std::string& phonemes) {
    return std::string(tok::kSoph) + phonemes + tok::kEoph;
}

inline std::string chat_user_prefix() { return std::string(tok::kImStart) + "user\n"; }
inline std::string chat_assistant_prefix() {
    return std::string(tok::kImEnd) + "\n" + tok::kImStart + "assistant\n";
}

}  // namespace prompt

using FieldMap = std::map<std::string, std::string>;

struct RenderedPrompt {
    std::string prompt;   // user-turn text
    std::string output;   // assistant-turn text, ends with the end marker
    // Character ranges of each labeled section within `output`, keyed by
    // section name ("phonemes", "transcription", "translation"). A range
    // spans from its header start to the start of the next section.
    std::map<std::string, std::pair<size_t, size_t>> sections;
};

namespace detail {

inline const std::string& field(const FieldMap& fields, const std::string& key, TaskKind kind) {
    auto it = fields.find(key);
    require(it != fields.end(), std::string("render_prompt(") + task_kind_name(kind) +
                                    "): missing field: " + key);
    return it->second;
}

}  // namespace detail

// Byte-exact prompt/output templates per task kind. LM kinds have an empty
// prompt and a bare body.
inline RenderedPrompt render_prompt(TaskKind kind, const FieldMap& fields) {
    using detail::field;
    RenderedPrompt r;
    auto lang = [&] { return field(fields, "language", kind); };
    auto audio = [&] { return field(fields, "audio", kind); };
    auto phonemes = [&] { return prompt::wrap_phonemes(field(fields, "phonemes", kind)); };
    auto text = [&] { return field(fields, "text", kind); };
    auto translation = [&] { return field(fields, "translation", kind); };

    struct Section {
        std::string name;
        std::string header;
        std::string body;
    };
    std::vector<Section> sections;

    switch (kind) {
        case TaskKind::LM_SPEECH:
            r.output = audio();
            return r;
        case TaskKind::LM_PHONEME:
            r.output = phonemes();
            return r;
        case TaskKind::PR:
            r.prompt = "Convert the following speech audio into a phonemic sequence in " + lang() +
                       ". The audio is:\n" + audio();
            sections = {{"phonemes", prompt::phoneme_header(lang()), phonemes()}};
            break;
        case TaskKind::G2P:
            r.prompt = "Convert the following text in " + lang() +
                       " into a phonemic sequence. The text is:\n" + text();
            sections = {{"phonemes", prompt::phoneme_header(lang()), phonemes()}};
            break;
        case TaskKind::P2G:
            r.prompt = "Transcribe the following phonemic sequence in " + lang() +
                       " to graphemes. The phonemic sequence is:\n" + phonemes();
            sections = {{"transcription", prompt::transcription_of_phonemes_header(lang()), text()}};
            break;
        case TaskKind::ASR:
            r.prompt = "Transcribe the following speech audio in " + lang() +
                       ". The audio is:\n" + audio();
            sections = {{"transcription", prompt::transcription_of_audio_header(lang()), text()}};
            break;
        case TaskKind::T2TT:
            r.prompt = "Translate the following text from " + lang() +
                       " to English. The text is:\n" + text();
            sections = {{"translation", prompt::translation_header(lang()), translation()}};
            break;
        case TaskKind::S2TT_DIRECT:
            r.prompt = "Translate the following speech audio from " + lang() +
                       " to English. The audio is:\n" + audio();
            sections = {{"translation", prompt::translation_header(lang()), translation()}};
            break;
        case TaskKind::ASR_COT:
            r.prompt = "Convert the following speech audio into a phonemic sequence in " + lang() +
                       ", then transcribe it to graphemes. The audio is:\n" + audio();
            sections = {{"phonemes", prompt::phoneme_header(lang()), phonemes()},
                        {"transcription", prompt::transcription_of_phonemes_header(lang()), text()}};
            break;
        case TaskKind::P2TT_COT:
            r.prompt = "Transcribe the following phonemic sequence in " + lang() +
                       " to graphemes, then translate it to English. The phonemic sequence is:\n" +
                       phonemes();
            sections = {{"transcription", prompt::transcription_of_phonemes_header(lang()), text()},
                        {"translation", prompt::translation_header(lang()), translation()}};
            break;
        case TaskKind::S2TT_COT:
            r.prompt = "Convert the following speech audio in " + lang() +
                       " into a transcription, then translate it to English. The audio is:\n" +
                       audio();
            sections = {{"transcription", prompt::transcription_of_audio_header(lang()), text()},
                        {"translation", prompt::translation_header(lang()), translation()}};
            break;
        case TaskKind::S2TT_COT_PH:
            r.prompt = "Convert the following speech audio into a phonemic sequence in " + lang() +
                       ", then transcribe it to graphemes and then translate it to English. The "
                       "audio is:\n" +
                       audio();
            sections = {{"phonemes", prompt::phoneme_header(lang()), phonemes()},
                        {"transcription", prompt::transcription_of_phonemes_header(lang()), text()},
                        {"translation", prompt::translation_header(lang()), translation()}};
            break;
    }

    for (size_t i = 0; i < sections.size(); ++i) {
        const size_t begin = r.output.size();
        r.output += sections[i].header;
        r.output += "\n";
        r.output += sections[i].body;
        if (i + 1 < sections.size()) r.output += "\n\n";
        r.sections[sections[i].name] = {begin, r.output.size()};
    }
    r.output += tok::kImEnd;
    return r;
}

// ---------------------------------------------------------------------------
// Task samples and datasets
// ---------------------------------------------------------------------------

struct SampleMeta {
    int64_t sentence_id = -1;
    int phase = 0;           // stage-1 sub-phase; 0 otherwise
    bool augmented = false;  // phoneme section replaced by its corrupted form
    bool no_phoneme = false; // rewritten without the phoneme step
    FieldMap fields;         // render fields kept for audits and re-rendering
    std::string ops_log;     // serialized augmentation operations
};

struct TaskSample {
    std::vector<TokenId> tokens;
    std::vector<uint8_t> loss_mask;  // 1 where the next-token loss is enabled
    TaskKind kind = TaskKind::T2TT;
    std::string lang;
    SampleMeta meta;
};

struct StageDataset {
    int stage = 0;
    std::vector<TaskSample> samples;
    std::map<std::string, int64_t> counts_by_kind;
    std::map<std::string, int64_t> counts_by_lang;
    std::map<std::string, int64_t> counts_by_kind_lang;  // "kind/lang"
    std::map<std::string, int64_t> counts_by_tier;
    std::map<std::string, int64_t> notes;  // split counts etc.
};

inline std::string tier_of_lang(const WorldSpec& world, const std::string& lang) {
    if (lang == world.english.code) return "en";
    if (lang == "pack") return "pack";
    return tier_name(world.language(lang).tier);
}

inline void recount_provenance(StageDataset& ds, const WorldSpec& world) {
    ds.counts_by_kind.clear();
    ds.counts_by_lang.clear();
    ds.counts_by_kind_lang.clear();
    ds.counts_by_tier.clear();
    for (const auto& s : ds.samples) {
        ds.counts_by_kind[task_kind_name(s.kind)]++;
        ds.counts_by_lang[s.lang]++;
        ds.counts_by_kind_lang[std::string(task_kind_name(s.kind)) + "/" + s.lang]++;
        ds.counts_by_tier[tier_of_lang(world, s.lang)]++;
    }
}

inline void canonicalize_order(StageDataset& ds) {
    std::stable_sort(ds.samples.begin(), ds.samples.end(),
                     [](const TaskSample& a, const TaskSample& b) {
                         if (a.meta.phase != b.meta.phase) return a.meta.phase < b.meta.phase;
                         if (a.kind != b.kind) return int(a.kind) < int(b.kind);
                         if (a.lang != b.lang) return a.lang < b.lang;
                         return a.meta.sentence_id < b.meta.sentence_id;
                     });
}

// Counts speech-kind samples attributed to zero-tier languages; must be zero
// for every dataset the builders produce.
inline int64_t zero_tier_speech_samples(const StageDataset& ds, const WorldSpec& world) {
    int64_t bad = 0;
    for (const auto& s : ds.samples) {
        if (!is_speech_kind(s.kind)) continue;
        if (s.lang == "pack") {
            // Packed stage-1 samples carry their source languages in fields.
            for (const auto& [key, val] : s.meta.fields) {
                if (key.rfind("src_lang_", 0) == 0 && val != world.english.code &&
                    world.language(val).tier == Tier::Zero)
                    ++bad;
            }
            continue;
        }
        if (s.lang != world.english.code && world.language(s.lang).tier == Tier::Zero) ++bad;
    }
    return bad;
}

// ---------------------------------------------------------------------------
// Sample assembly
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<TokenId> append_encoded(const Vocabulary& vocab, std::vector<TokenId>& tokens,
                                           std::vector<uint8_t>& mask, const std::string& text,
                                           bool loss) {
    auto ids = vocab.encode(text);
    tokens.insert(tokens.end(), ids.begin(), ids.end());
    mask.insert(mask.end(), ids.size(), loss ? 1 : 0);
    return ids;
}

}  // namespace detail

// Builds a chat-formatted sample. Loss is enabled exactly on the assistant
// output span (which ends with the end marker).
inline TaskSample make_chat_sample(const Vocabulary& vocab, TaskKind kind, const std::string& lang,
                                   const FieldMap& fields, int64_t sentence_id, size_t max_len) {
    const auto rendered = render_prompt(kind, fields);
    TaskSample s;
    s.kind = kind;
    s.lang = lang;
    s.meta.sentence_id = sentence_id;
    s.meta.fields = fields;
    detail::append_encoded(vocab, s.tokens, s.loss_mask,
                           prompt::chat_user_prefix() + rendered.prompt +
                               prompt::chat_assistant_prefix(),
                           false);
    detail::append_encoded(vocab, s.tokens, s.loss_mask, rendered.output, true);
    require(s.tokens.size() <= max_len,
            std::string("sample exceeds stage max length: ") + task_kind_name(kind) + "/" + lang);
    return s;
}

struct CorpusContext {
    const WorldSpec& world;
    const SpeechSynthesizer& synth;
    const Codebook& codebook;
    const Vocabulary& vocab;
    uint64_t seed = 0;
    // Sentences reserved for evaluation, keyed "lang|source_text"; sampling
    // rejects them so the test set never leaks into training data.
    const std::set<std::string>* holdout = nullptr;
};

namespace detail {

inline bool held_out(const CorpusContext& ctx, const std::string& lang, const std::string& text) {
    return ctx.holdout && ctx.holdout->count(lang + "|" + text) > 0;
}

inline ParallelSentence sample_train_sentence(const CorpusContext& ctx, const std::string& lang,
                                              Rng& rng) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        auto s = sample_sentence(ctx.world, lang, rng);
        if (!held_out(ctx, lang, s.source_text)) return s;
    }
    fail("could not sample a training sentence outside the holdout for " + lang);
}

inline std::string render_audio(const CorpusContext& ctx, const std::string& phonemes,
                                Rng& rng) {
    auto frames = ctx.synth.synthesize(phonemes, rng.u64(), rng);
    return quantize(frames, ctx.codebook).rendered();
}

}  // namespace detail

// Field assembly for one sentence. Speech kinds get the audio rendering;
// text-only kinds omit it.
inline FieldMap fields_for(const CorpusContext& ctx, TaskKind kind, const std::string& lang,
                           const ParallelSentence& sent, Rng& rng) {
    FieldMap f;
    f["language"] = lang;
    f["text"] = sent.source_text;
    f["phonemes"] = sent.source_phonemes;
    f["translation"] = sent.target_text;
    if (is_speech_kind(kind) && kind != TaskKind::LM_SPEECH)
        f["audio"] = detail::render_audio(ctx, sent.source_phonemes, rng);
    return f;
}

// ---------------------------------------------------------------------------
// Stage 1: next-token prediction with packing
// ---------------------------------------------------------------------------

struct Stage1Quotas {
    std::map<std::string, int> lm_speech;   // lang -> utterance count
    std::map<std::string, int> lm_phoneme;  // lang -> sentence count
};

// Packs the rendered bodies of one sub-phase into sequences of exactly
// pack_len, separated by the end-of-text token. Bodies straddle pack
// boundaries; sources longer than pack_len are reported in `notes`.
inline void pack_phase(const CorpusContext& ctx, StageDataset& ds, TaskKind kind,
                       const std::vector<std::pair<std::string, std::string>>& bodies,
                       size_t pack_len, int phase) {
    std::vector<TokenId> stream;
    std::vector<std::string> stream_langs;  // parallel per-source record
    int64_t split_sources = 0;
    for (size_t i = 0; i < bodies.size(); ++i) {
        auto ids = ctx.vocab.encode(bodies[i].second);
        if (ids.size() > pack_len) ++split_sources;
        if (i) stream.push_back(ctx.vocab.eot_id());
        stream.insert(stream.end(), ids.begin(), ids.end());
        stream_langs.push_back(bodies[i].first);
    }
    ds.notes["split_sources"] += split_sources;
    ds.notes[std::string("source_tokens_") + task_kind_name(kind)] +=
        int64_t(stream.size()) - std::max<int64_t>(0, int64_t(bodies.size()) - 1);
    ds.notes[std::string("separators_") + task_kind_name(kind)] +=
        std::max<int64_t>(0, int64_t(bodies.size()) - 1);

    int64_t pack_id = 0;
    for (size_t at = 0; at < stream.size(); at += pack_len, ++pack_id) {
        TaskSample s;
        s.kind = kind;
        s.lang = "pack";
        s.meta.sentence_id = pack_id;
        s.meta.phase = phase;
        const size_t n = std::min(pack_len, stream.size() - at);
        s.tokens.assign(stream.begin() + long(at), stream.begin() + long(at + n));
        s.loss_mask.assign(n, 1);
        if (n < pack_len) {
            s.tokens.resize(pack_len, ctx.vocab.pad_id());
            s.loss_mask.resize(pack_len, 0);
        }
        int src = 0;
        for (const auto& lang : std::set<std::string>(stream_langs.begin(), stream_langs.end()))
            s.meta.fields["src_lang_" + std::to_string(src++)] = lang;
        ds.samples.push_back(std::move(s));
    }
}

inline StageDataset build_stage1(const CorpusContext& ctx, const Stage1Quotas& quotas,
                                 size_t pack_len) {
    require(pack_len >= 8, "build_stage1: pack_len too small");
    StageDataset ds;
    ds.stage = 1;

    std::vector<std::pair<std::string, std::string>> speech_bodies;
    for (const auto& [lang, n] : quotas.lm_speech) {
        if (n <= 0) continue;
        require(lang == ctx.world.english.code || ctx.world.language(lang).tier != Tier::Zero,
                "build_stage1: speech data requested for zero-tier language " + lang);
        Rng rng(mix_seed(ctx.seed, "stage1/speech/" + lang));
        for (int i = 0; i < n; ++i) {
            auto sent = detail::sample_train_sentence(ctx, lang, rng);
            speech_bodies.emplace_back(lang, detail::render_audio(ctx, sent.source_phonemes, rng));
        }
    }
    std::vector<std::pair<std::string, std::string>> phoneme_bodies;
    for (const auto& [lang, n] : quotas.lm_phoneme) {
        if (n <= 0) continue;
        Rng rng(mix_seed(ctx.seed, "stage1/phoneme/" + lang));
        for (int i = 0; i < n; ++i) {
            auto sent = detail::sample_train_sentence(ctx, lang, rng);
            phoneme_bodies.emplace_back(lang, prompt::wrap_phonemes(sent.source_phonemes));
        }
    }

    pack_phase(ctx, ds, TaskKind::LM_SPEECH, speech_bodies, pack_len, 0);
    pack_phase(ctx, ds, TaskKind::LM_PHONEME, phoneme_bodies, pack_len, 1);
    canonicalize_order(ds);
    recount_provenance(ds, ctx.world);
    // Source-language provenance for the packed phases.
    for (const auto& [lang, n] : quotas.lm_speech)
        if (n > 0) ds.counts_by_kind_lang["lm_speech_src/" + lang] = n;
    for (const auto& [lang, n] : quotas.lm_phoneme)
        if (n > 0) ds.counts_by_kind_lang["lm_phoneme_src/" + lang] = n;
    return ds;
}

// ---------------------------------------------------------------------------
// Stages 2 and 3
// ---------------------------------------------------------------------------

using QuotaMap = std::map<TaskKind, std::map<std::string, int>>;

// Sentence streams are derived from a task-group tag rather than the task
// kind itself, so chained variants of a task reuse the same sentences (and
// the same synthesized audio) as their plain counterparts.
inline const char* sentence_group(TaskKind kind) {
    switch (kind) {
        case TaskKind::ASR:
        case TaskKind::ASR_COT: return "asr";
        case TaskKind::S2TT_DIRECT:
        case TaskKind::S2TT_COT:
        case TaskKind::S2TT_COT_PH: return "s2tt";
        case TaskKind::PR: return "pr";
        case TaskKind::G2P: return "g2p";
        case TaskKind::P2G: return "p2g";
        default: return "misc";
    }
}

namespace detail {

inline void build_generated_kind(const CorpusContext& ctx, StageDataset& ds, TaskKind kind,
                                 const std::string& lang, int n, size_t max_len) {
    if (n <= 0) return;
    if (is_speech_kind(kind)) {
        require(lang == ctx.world.english.code || ctx.world.language(lang).tier != Tier::Zero,
                std::string("quota requests speech data for zero-tier language: ") +
                    task_kind_name(kind) + "/" + lang);
    }
    const std::string group = sentence_group(kind);
    for (int i = 0; i < n; ++i) {
        Rng rng(mix_seed(ctx.seed, group + "/" + lang + "/" + std::to_string(i)));
        auto sent = sample_train_sentence(ctx, lang, rng);
        auto fields = fields_for(ctx, kind, lang, sent, rng);
        ds.samples.push_back(make_chat_sample(ctx.vocab, kind, lang, fields, i, max_len));
    }
}

inline void build_chunk_kind(const CorpusContext& ctx, StageDataset& ds, TaskKind kind,
                             const std::vector<ParallelSentence>& chunk,
                             const std::map<std::string, int>& per_lang, size_t max_len) {
    std::map<std::string, int> taken;
    for (const auto& sent : chunk) {
        auto it = per_lang.find(sent.lang);
        if (it == per_lang.end() || taken[sent.lang] >= it->second) continue;
        taken[sent.lang]++;
        Rng rng(mix_seed(ctx.seed, std::string(task_kind_name(kind)) + "/chunk/" +
                                       std::to_string(sent.id)));
        auto fields = fields_for(ctx, kind, sent.lang, sent, rng);
        ds.samples.push_back(make_chat_sample(ctx.vocab, kind, sent.lang, fields, sent.id, max_len));
    }
    for (const auto& [lang, n] : per_lang)
        require(taken[lang] >= n, std::string("not enough chunk sentences for ") +
                                      task_kind_name(kind) + "/" + lang);
}

}  // namespace detail

inline StageDataset build_stage2(const CorpusContext& ctx, const QuotaMap& quotas,
                                 const std::vector<ParallelSentence>& t2tt_stage2_chunk,
                                 size_t max_len) {
    StageDataset ds;
    ds.stage = 2;
    for (const auto& [kind, per_lang] : quotas) {
        require(stage2_kinds().count(kind) == 1,
                std::string("task kind not available in stage 2: ") + task_kind_name(kind));
        if (kind == TaskKind::T2TT) {
            detail::build_chunk_kind(ctx, ds, kind, t2tt_stage2_chunk, per_lang, max_len);
        } else {
            for (const auto& [lang, n] : per_lang)
                detail::build_generated_kind(ctx, ds, kind, lang, n, max_len);
        }
    }
    canonicalize_order(ds);
    recount_provenance(ds, ctx.world);
    return ds;
}

// Builds the raw stage-3 dataset for a variant. PDA and DPS post-processing
// live in the augment module; the pipeline applies them to the CotPhPda and
// CotPhDps variants after this call.
inline StageDataset build_stage3(const CorpusContext& ctx, Stage3Variant variant,
                                 const QuotaMap& quotas,
                                 const std::vector<ParallelSentence>& t2tt_stage3_chunk,
                                 size_t max_len) {
    StageDataset ds;
    ds.stage = 3;
    const auto& allowed = stage3_kinds(variant);
    for (const auto& [kind, per_lang] : quotas) {
        require(allowed.count(kind) == 1, std::string("task kind not available in stage-3 variant ") +
                                              variant_name(variant) + ": " + task_kind_name(kind));
        if (kind == TaskKind::T2TT || kind == TaskKind::P2TT_COT) {
            detail::build_chunk_kind(ctx, ds, kind, t2tt_stage3_chunk, per_lang, max_len);
        } else {
            for (const auto& [lang, n] : per_lang)
                detail::build_generated_kind(ctx, ds, kind, lang, n, max_len);
        }
    }
    canonicalize_order(ds);
    recount_provenance(ds, ctx.world);
    return ds;
}

// ---------------------------------------------------------------------------
// T2TT subsampling: highest alignment scores go to stage 3, the next block
// to stage 2, stratified per language so the chunks stay balanced.
// ---------------------------------------------------------------------------

inline std::pair<std::vector<ParallelSentence>, std::vector<ParallelSentence>> subsample_t2tt(
    std::vector<ParallelSentence> pairs, int64_t n3, int64_t n2) {
    require(n3 >= 0 && n2 >= 0, "subsample_t2tt: negative counts");
    require(int64_t(pairs.size()) >= n3 + n2, "subsample_t2tt: not enough pairs");
    std::map<std::string, std::vector<ParallelSentence>> by_lang;
    for (auto& p : pairs) by_lang[p.lang].push_back(std::move(p));
    const int64_t langs = int64_t(by_lang.size());
    require(n3 % langs == 0 && n2 % langs == 0,
            "subsample_t2tt: counts must split evenly across languages");
    const int64_t per3 = n3 / langs, per2 = n2 / langs;

    std::vector<ParallelSentence> stage3, stage2;
    for (auto& [lang, list] : by_lang) {
        require(int64_t(list.size()) >= per3 + per2,
                "subsample_t2tt: not enough pairs for language " + lang);
        std::sort(list.begin(), list.end(), [](const ParallelSentence& a, const ParallelSentence& b) {
            if (a.alignment_score != b.alignment_score) return a.alignment_score > b.alignment_score;
            return a.id < b.id;
        });
        for (int64_t i = 0; i < per3; ++i) stage3.push_back(list[size_t(i)]);
        for (int64_t i = per3; i < per3 + per2; ++i) stage2.push_back(list[size_t(i)]);
    }
    return {std::move(stage3), std::move(stage2)};
}

// ---------------------------------------------------------------------------
// Vocabulary assembly helpers
// ---------------------------------------------------------------------------

// Reserved phoneme-segment token used by augmentation masking.
inline constexpr const char* kPhonemeMask = "<pmask>";

// Text corpus that closes the base character vocabulary: every template
// rendered for every language, plus every grapheme word. Phoneme symbols are
// deliberately excluded; they live in their own vocabulary segment.
inline std::vector<std::string> vocabulary_corpus(const WorldSpec& world) {
    std::vector<std::string> corpus;
    std::vector<std::string> langs;
    for (const auto* l : world.source_languages()) langs.push_back(l->code);
    langs.push_back(world.english.code);
    for (const auto& lang : langs) {
        const FieldMap dummy{{"language", lang}, {"audio", ""}, {"phonemes", ""},
                             {"text", ""},      {"translation", ""}};
        for (TaskKind kind : all_task_kinds()) {
            const auto r = render_prompt(kind, dummy);
            corpus.push_back(r.prompt);
            corpus.push_back(r.output);
        }
    }
    for (const auto* l : world.source_languages())
        for (const auto& e : l->lexicon) corpus.push_back(e.grapheme);
    for (const auto& e : world.english.lexicon) corpus.push_back(e.grapheme);
    return corpus;
}

// Phoneme-segment token list: the inventory plus the augmentation mask.
inline std::vector<std::string> phoneme_segment_tokens(const WorldSpec& world) {
    auto tokens = world.inventory.symbols;
    tokens.push_back(kPhonemeMask);
    return tokens;
}

// Builds the full expanded vocabulary for a world and codebook size.
inline Vocabulary build_world_vocabulary(const WorldSpec& world, size_t n_units) {
    auto base = Vocabulary::build_base(vocabulary_corpus(world));
    return base.expanded(n_units, phoneme_segment_tokens(world));
}

// Draws the scored T2TT candidate pool, one stream per language.
inline std::vector<ParallelSentence> sample_t2tt_pool(const CorpusContext& ctx,
                                                      const std::vector<std::string>& langs,
                                                      int per_lang) {
    std::vector<ParallelSentence> pool;
    int64_t next_id = 0;
    for (const auto& lang : langs) {
        Rng rng(mix_seed(ctx.seed, "t2tt-pool/" + lang));
        for (int i = 0; i < per_lang; ++i) {
            auto s = detail::sample_train_sentence(ctx, lang, rng);
            s.id = next_id++;
            pool.push_back(std::move(s));
        }
    }
    return pool;
}

}  // namespace phonecot
