// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "phonecot/corpus.hpp"

namespace phonecot {

// ---------------------------------------------------------------------------
// Phoneme Data Augmentation: span deletion, masking, substitution, random
// insertion, and space shifting over phoneme strings, with a keep fraction
// that leaves samples untouched.
// ---------------------------------------------------------------------------

struct PdaPolicy {
    double p_delete = 0.5;
    double p_mask = 0.5;
    double p_substitute = 0.5;
    double p_insert = 0.5;
    double p_space_shift = 0.5;
    int span_min = 1;
    int span_max = 3;
    int max_ops = 3;
    std::string mask_symbol = "<pmask>";
    double keep_fraction = 0.25;
    std::vector<std::string> inventory;  // phoneme symbols eligible for substitute/insert
    std::string separator = " ";

    void validate() const {
        for (double p : {p_delete, p_mask, p_substitute, p_insert, p_space_shift, keep_fraction})
            require(p >= 0.0 && p <= 1.0, "PdaPolicy: probabilities must be in [0,1]");
        require(span_min >= 1 && span_max >= span_min, "PdaPolicy: bad span length range");
        require(max_ops >= 1, "PdaPolicy: max_ops must be >= 1");
        require(!mask_symbol.empty(), "PdaPolicy: empty mask symbol");
    }
};

struct PdaOp {
    std::string kind;     // delete | mask | substitute | insert | space_shift
    int pos = 0;          // symbol index the op applies at
    int len = 0;          // span length for span ops
    std::string payload;  // inserted/substituted symbols, or "L"/"R" for shifts
};

inline nlohmann::json ops_to_json(const std::vector<PdaOp>& ops) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& op : ops)
        j.push_back({{"kind", op.kind}, {"pos", op.pos}, {"len", op.len}, {"payload", op.payload}});
    return j;
}

inline std::vector<PdaOp> ops_from_json(const nlohmann::json& j) {
    std::vector<PdaOp> ops;
    for (const auto& e : j)
        ops.push_back({e.at("kind").get<std::string>(), e.at("pos").get<int>(),
                       e.at("len").get<int>(), e.at("payload").get<std::string>()});
    return ops;
}

struct PdaResult {
    std::string augmented;
    bool modified = false;
    std::vector<PdaOp> ops;
};

inline PdaPolicy default_pda_policy(const WorldSpec& world) {
    PdaPolicy p;
    p.inventory = world.inventory.symbols;
    p.mask_symbol = kPhonemeMask;
    p.separator = world.inventory.separator;
    return p;
}

namespace detail {

// Symbol-level edit primitives shared by the sampler and the replay path.
inline void apply_op(std::vector<std::string>& sym, const PdaOp& op) {
    const size_t pos = size_t(op.pos);
    if (op.kind == "delete") {
        sym.erase(sym.begin() + long(pos), sym.begin() + long(pos + size_t(op.len)));
    } else if (op.kind == "mask") {
        // The mask payload is one (possibly multi-byte) symbol per position.
        for (int i = 0; i < op.len; ++i) sym[pos + size_t(i)] = op.payload;
    } else if (op.kind == "substitute") {
        const auto repl = utf8_codepoints(op.payload);
        require(repl.size() == size_t(op.len), "pda replay: bad substitute payload");
        for (int i = 0; i < op.len; ++i) sym[pos + size_t(i)] = repl[size_t(i)];
    } else if (op.kind == "insert") {
        const auto ins = utf8_codepoints(op.payload);
        sym.insert(sym.begin() + long(pos), ins.begin(), ins.end());
    } else if (op.kind == "space_shift") {
        const size_t to = op.payload == "L" ? pos - 1 : pos + 1;
        std::swap(sym[pos], sym[to]);
    } else {
        fail("pda replay: unknown op kind: " + op.kind);
    }
}

inline std::vector<size_t> phoneme_positions(const std::vector<std::string>& sym,
                                             const std::string& separator) {
    std::vector<size_t> out;
    for (size_t i = 0; i < sym.size(); ++i)
        if (sym[i] != separator) out.push_back(i);
    return out;
}

}  // namespace detail

// Re-applies a logged op sequence to the original string; used by audits to
// confirm the log fully describes the augmentation.
inline std::string pda_replay(const std::string& original, const std::vector<PdaOp>& ops) {
    auto sym = utf8_codepoints(original);
    std::string joined;
    for (const auto& op : ops) detail::apply_op(sym, op);
    for (const auto& s : sym) joined += s;
    return joined;
}

inline PdaResult pda_augment(const std::string& phonemes, const PdaPolicy& policy, Rng& rng) {
    policy.validate();
    PdaResult res;
    res.augmented = phonemes;
    if (phonemes.empty()) return res;
    if (rng.uniform() < policy.keep_fraction) return res;

    auto sym = utf8_codepoints(phonemes);

    std::vector<std::pair<std::string, double>> menu = {{"delete", policy.p_delete},
                                                        {"mask", policy.p_mask},
                                                        {"substitute", policy.p_substitute},
                                                        {"insert", policy.p_insert},
                                                        {"space_shift", policy.p_space_shift}};
    std::vector<std::string> selected;
    for (const auto& [name, p] : menu)
        if (p > 0.0 && rng.uniform() < p) selected.push_back(name);
    if (selected.empty()) {
        std::vector<std::string> eligible;
        for (const auto& [name, p] : menu)
            if (p > 0.0) eligible.push_back(name);
        if (eligible.empty()) return res;
        selected.push_back(rng.pick(eligible));
    }
    rng.shuffle(selected);
    if (int(selected.size()) > policy.max_ops) selected.resize(size_t(policy.max_ops));

    auto span_at = [&](Rng& r, std::vector<std::string>& cur) -> std::pair<int, int> {
        const auto positions = detail::phoneme_positions(cur, policy.separator);
        if (positions.empty()) return {-1, 0};
        const size_t start = positions[size_t(r.below(positions.size()))];
        int len = 1;
        const int want = int(r.range(policy.span_min, policy.span_max));
        while (len < want && start + size_t(len) < cur.size() &&
               cur[start + size_t(len)] != policy.separator)
            ++len;
        return {int(start), len};
    };

    auto try_op = [&](const std::string& name) -> bool {
        PdaOp op;
        op.kind = name;
        if (name == "delete" || name == "mask" || name == "substitute") {
            auto [pos, len] = span_at(rng, sym);
            if (pos < 0) return false;
            op.pos = pos;
            op.len = len;
            if (name == "mask") {
                op.payload = policy.mask_symbol;
            } else if (name == "substitute") {
                require(policy.inventory.size() >= 2, "PdaPolicy: substitute needs an inventory");
                for (int i = 0; i < len; ++i) {
                    std::string pick = sym[size_t(pos) + size_t(i)];
                    while (pick == sym[size_t(pos) + size_t(i)]) pick = rng.pick(policy.inventory);
                    op.payload += pick;
                }
            }
        } else if (name == "insert") {
            require(!policy.inventory.empty(), "PdaPolicy: insert needs an inventory");
            op.pos = int(rng.below(sym.size() + 1));
            const int len = int(rng.range(policy.span_min, policy.span_max));
            op.len = len;
            for (int i = 0; i < len; ++i) op.payload += rng.pick(policy.inventory);
        } else {  // space_shift
            std::vector<size_t> seps;
            for (size_t i = 0; i < sym.size(); ++i)
                if (sym[i] == policy.separator) seps.push_back(i);
            if (seps.empty()) return false;
            const size_t at = seps[size_t(rng.below(seps.size()))];
            std::vector<std::string> dirs;
            // Keep the separator strictly interior and isolated after the move.
            if (at >= 2 && sym[at - 1] != policy.separator &&
                (at < 2 || sym[at - 2] != policy.separator))
                dirs.push_back("L");
            if (at + 2 < sym.size() && sym[at + 1] != policy.separator &&
                sym[at + 2] != policy.separator)
                dirs.push_back("R");
            if (dirs.empty()) return false;
            op.pos = int(at);
            op.payload = rng.pick(dirs);
        }
        detail::apply_op(sym, op);
        res.ops.push_back(std::move(op));
        return true;
    };

    for (const auto& name : selected) try_op(name);

    std::string joined;
    for (const auto& s : sym) joined += s;
    if (joined == phonemes) {
        // The corruption path must corrupt: fall back to a single forced
        // substitution when every sampled op degenerated to a no-op.
        res.ops.clear();
        sym = utf8_codepoints(phonemes);
        if (!try_op("substitute")) return res;
        joined.clear();
        for (const auto& s : sym) joined += s;
    }
    res.augmented = joined;
    res.modified = true;
    return res;
}

// ---------------------------------------------------------------------------
// Applying PDA to task samples: the assistant's phoneme section is replaced
// by the corrupted string and, when modified, excluded from the loss.
// ---------------------------------------------------------------------------

namespace detail {

inline std::pair<size_t, size_t> section_token_span(const Vocabulary& vocab, TaskKind kind,
                                                    const FieldMap& fields,
                                                    const std::string& section) {
    const auto rendered = render_prompt(kind, fields);
    auto it = rendered.sections.find(section);
    require(it != rendered.sections.end(),
            std::string("sample has no section '") + section + "'");
    const std::string prefix =
        prompt::chat_user_prefix() + rendered.prompt + prompt::chat_assistant_prefix();
    const size_t begin =
        vocab.encode(prefix + rendered.output.substr(0, it->second.first)).size();
    const size_t end = vocab.encode(prefix + rendered.output.substr(0, it->second.second)).size();
    return {begin, end};
}

}  // namespace detail

inline TaskSample apply_pda(const TaskSample& sample, const PdaPolicy& policy, Rng& rng,
                            const Vocabulary& vocab, size_t max_len) {
    require(sample.kind == TaskKind::ASR_COT || sample.kind == TaskKind::S2TT_COT_PH,
            std::string("apply_pda: unsupported task kind: ") + task_kind_name(sample.kind));
    const auto it = sample.meta.fields.find("phonemes");
    require(it != sample.meta.fields.end(), "apply_pda: sample carries no phoneme field");

    auto res = pda_augment(it->second, policy, rng);
    if (!res.modified) return sample;

    FieldMap fields = sample.meta.fields;
    fields["phonemes"] = res.augmented;
    TaskSample out =
        make_chat_sample(vocab, sample.kind, sample.lang, fields, sample.meta.sentence_id, max_len);
    out.meta.phase = sample.meta.phase;
    out.meta.augmented = true;
    out.meta.fields["phonemes_original"] = it->second;
    out.meta.ops_log = ops_to_json(res.ops).dump();

    const auto [begin, end] = detail::section_token_span(vocab, out.kind, fields, "phonemes");
    require(end <= out.loss_mask.size(), "apply_pda: section span out of range");
    for (size_t i = begin; i < end; ++i) out.loss_mask[i] = 0;
    return out;
}

// ---------------------------------------------------------------------------
// Dual prompting: a fraction of chained samples is re-rendered without the
// phoneme step, most of the rest goes through PDA, and a small remainder
// stays untouched.
// ---------------------------------------------------------------------------

struct DpsMix {
    double frac_no_phoneme = 0.20;
    double frac_pda = 0.75;
    double frac_original = 0.05;

    void validate() const {
        const double sum = frac_no_phoneme + frac_pda + frac_original;
        require(std::abs(sum - 1.0) <= 1e-9, "DpsMix: fractions must sum to 1");
        for (double f : {frac_no_phoneme, frac_pda, frac_original})
            require(f >= 0.0 && f <= 1.0, "DpsMix: fractions must be in [0,1]");
    }
};

inline TaskKind dps_no_phoneme_kind(TaskKind kind) {
    switch (kind) {
        case TaskKind::S2TT_COT_PH: return TaskKind::S2TT_COT;
        case TaskKind::ASR_COT: return TaskKind::ASR;
        default: fail("dps: no phoneme-free form for this kind");
    }
}

inline StageDataset dps_mix(const StageDataset& dataset, const DpsMix& mix,
                            const PdaPolicy& policy, const CorpusContext& ctx, size_t max_len,
                            uint64_t seed) {
    mix.validate();
    StageDataset out;
    out.stage = dataset.stage;
    out.notes = dataset.notes;
    for (const auto& sample : dataset.samples) {
        if (sample.kind != TaskKind::S2TT_COT_PH && sample.kind != TaskKind::ASR_COT) {
            out.samples.push_back(sample);
            continue;
        }
        // Assignment is keyed by the sample identity, not its position, so
        // any iteration order produces the same mix.
        Rng rng(mix_seed(seed, std::string("dps/") + task_kind_name(sample.kind) + "/" +
                                   sample.lang + "/" + std::to_string(sample.meta.sentence_id)));
        const double u = rng.uniform();
        if (u < mix.frac_no_phoneme) {
            TaskSample rewritten =
                make_chat_sample(ctx.vocab, dps_no_phoneme_kind(sample.kind), sample.lang,
                                 sample.meta.fields, sample.meta.sentence_id, max_len);
            rewritten.meta.phase = sample.meta.phase;
            rewritten.meta.no_phoneme = true;
            rewritten.meta.fields["dps_path"] = "no_phoneme";
            out.samples.push_back(std::move(rewritten));
        } else if (u < mix.frac_no_phoneme + mix.frac_pda) {
            auto augmented = apply_pda(sample, policy, rng, ctx.vocab, max_len);
            augmented.meta.fields["dps_path"] = "pda";
            out.samples.push_back(std::move(augmented));
        } else {
            auto kept = sample;
            kept.meta.fields["dps_path"] = "original";
            out.samples.push_back(std::move(kept));
        }
    }
    canonicalize_order(out);
    recount_provenance(out, ctx.world);
    return out;
}

}  // namespace phonecot
