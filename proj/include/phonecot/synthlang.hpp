// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "phonecot/common.hpp"

namespace phonecot {

inline std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        size_t j = text.find(' ', i);
        if (j == std::string_view::npos) j = text.size();
        if (j > i) out.emplace_back(text.substr(i, j - i));
        i = j + 1;
    }
    return out;
}

inline std::string join_words(const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// World model
// ---------------------------------------------------------------------------

struct PhonemeInventory {
    std::vector<std::string> symbols;  // single-codepoint phoneme symbols
    std::string separator = " ";

    bool contains(const std::string& s) const {
        return std::find(symbols.begin(), symbols.end(), s) != symbols.end();
    }
};

enum class Tier { High, Low, Zero };

inline const char* tier_name(Tier t) {
    switch (t) {
        case Tier::High: return "high";
        case Tier::Low: return "low";
        case Tier::Zero: return "zero";
    }
    return "?";
}

enum class Role { Noun, Verb, Adj };

struct LexEntry {
    std::string grapheme;
    std::string phoneme;
    int concept_id = -1;
};

struct ToyLanguageSpec {
    std::string code;
    std::string family;
    Tier tier = Tier::High;
    std::string alphabet;                         // grapheme letters, ascii
    std::vector<LexEntry> lexicon;                // indexed by concept id
    std::map<std::string, std::string> shift_table;

    const LexEntry& entry(int concept_id) const {
        require(concept_id >= 0 && size_t(concept_id) < lexicon.size(),
                "concept id out of range for " + code);
        return lexicon[size_t(concept_id)];
    }
};

// Order of the three sentence constituents (subject group, verb, object
// group) in a family's surface form.
enum class Constituent { Subject, Verb, Object };

struct FamilySpec {
    std::string name;
    std::vector<std::string> roots;               // phoneme root per concept
    std::array<Constituent, 3> order{Constituent::Subject, Constituent::Verb, Constituent::Object};
    std::vector<ToyLanguageSpec> languages;
};

struct WorldConfig {
    uint64_t seed = 7;
    int n_families = 3;
    int langs_per_family = 3;
    int n_concepts = 48;
    int n_phonemes = 30;
    int root_len_min = 3;
    int root_len_max = 5;
    int word_len_min = 3;
    int word_len_max = 6;
    int alphabet_size = 18;
    int exotic_symbols = 6;   // inventory tail reserved for the distant zero language
    int exotic_swaps = 4;     // shift size of the distant family's zero language
};

struct ParallelSentence {
    std::string lang;
    int64_t id = -1;
    std::string source_text;
    std::string source_phonemes;
    std::string target_text;
    double alignment_score = 0.0;
};

class WorldSpec {
public:
    PhonemeInventory inventory;
    std::vector<FamilySpec> families;
    ToyLanguageSpec english;                      // ASR-only target language
    std::vector<Role> concept_roles;
    WorldConfig config;

    static constexpr int kWorldVersion = 1;

    const ToyLanguageSpec& language(const std::string& code) const {
        if (code == english.code) return english;
        for (const auto& f : families)
            for (const auto& l : f.languages)
                if (l.code == code) return l;
        fail("unknown language code: " + code);
    }

    std::vector<const ToyLanguageSpec*> source_languages() const {
        std::vector<const ToyLanguageSpec*> out;
        for (const auto& f : families)
            for (const auto& l : f.languages) out.push_back(&l);
        return out;
    }

    const FamilySpec& family_of(const std::string& lang_code) const {
        if (lang_code == english.code) fail("english has no source family");
        for (const auto& f : families)
            for (const auto& l : f.languages)
                if (l.code == lang_code) return f;
        fail("unknown language code: " + lang_code);
    }

    std::vector<int> concepts_with_role(Role r) const {
        std::vector<int> out;
        for (size_t i = 0; i < concept_roles.size(); ++i)
            if (concept_roles[i] == r) out.push_back(int(i));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string apply_shift(const std::map<std::string, std::string>& table,
                               const std::string& phonemes) {
    std::string out;
    for (const auto& cp : utf8_codepoints(phonemes)) {
        auto it = table.find(cp);
        out += (it == table.end()) ? cp : it->second;
    }
    return out;
}

inline std::string random_word_from(const std::vector<std::string>& pool, int len_min, int len_max,
                                    Rng& rng) {
    const int len = int(rng.range(len_min, len_max));
    std::string w;
    for (int i = 0; i < len; ++i) w += rng.pick(pool);
    return w;
}

inline std::vector<std::string> distinct_words(const std::vector<std::string>& pool, int count,
                                               int len_min, int len_max, Rng& rng) {
    std::set<std::string> seen;
    std::vector<std::string> out;
    int guard = 0;
    while (int(out.size()) < count) {
        std::string w = random_word_from(pool, len_min, len_max, rng);
        if (seen.insert(w).second) {
            out.push_back(std::move(w));
        } else {
            require(++guard < 100000, "cannot generate enough distinct words; enlarge alphabet");
        }
    }
    return out;
}

}  // namespace detail

inline WorldSpec generate_world(uint64_t seed, const WorldConfig& cfg_in) {
    WorldConfig cfg = cfg_in;
    cfg.seed = seed;
    require(cfg.n_concepts >= 20, "world config: need at least 20 concepts");
    require(cfg.n_families >= 3, "world config: need at least 3 families");
    require(cfg.langs_per_family >= 3, "world config: need at least 3 languages per family");
    require(cfg.n_phonemes >= 12 + cfg.exotic_symbols,
            "world config: phoneme inventory too small");
    require(cfg.root_len_min >= 1 && cfg.root_len_max >= cfg.root_len_min,
            "world config: bad root length range");
    require(cfg.alphabet_size >= 8 && cfg.alphabet_size <= 26,
            "world config: alphabet size out of range");
    {
        double space = 1.0;
        for (int i = 0; i < cfg.word_len_min; ++i) space *= cfg.alphabet_size;
        require(space >= 4.0 * cfg.n_concepts, "world config: alphabet too small for lexicon");
    }

    Rng rng(mix_seed(seed, "world"));
    WorldSpec world;
    world.config = cfg;

    // Phoneme inventory: consecutive codepoints from the IPA block; they never
    // collide with the ascii text alphabet.
    for (int i = 0; i < cfg.n_phonemes; ++i)
        world.inventory.symbols.push_back(codepoint_to_utf8(0x250 + uint32_t(i)));

    // Concept roles: nouns, verbs, adjectives.
    const int n_nouns = std::max(4, (cfg.n_concepts * 2) / 5);
    const int n_verbs = std::max(2, (cfg.n_concepts - n_nouns) / 2);
    for (int c = 0; c < cfg.n_concepts; ++c) {
        if (c < n_nouns) world.concept_roles.push_back(Role::Noun);
        else if (c < n_nouns + n_verbs) world.concept_roles.push_back(Role::Verb);
        else world.concept_roles.push_back(Role::Adj);
    }

    const int usable = cfg.n_phonemes - cfg.exotic_symbols;
    auto pool_slice = [&](int lo, int hi) {
        std::vector<std::string> pool;
        for (int i = lo; i < hi; ++i) pool.push_back(world.inventory.symbols[size_t(i)]);
        return pool;
    };

    auto make_alphabet = [&](Rng& r) {
        std::string letters = "abcdefghijklmnopqrstuvwxyz";
        std::vector<char> v(letters.begin(), letters.end());
        r.shuffle(v);
        std::string a(v.begin(), v.begin() + cfg.alphabet_size);
        std::sort(a.begin(), a.end());
        return a;
    };

    auto make_language = [&](const std::string& code, const std::string& family, Tier tier,
                             const std::vector<std::string>& roots,
                             std::map<std::string, std::string> shift, Rng& r) {
        ToyLanguageSpec lang;
        lang.code = code;
        lang.family = family;
        lang.tier = tier;
        lang.shift_table = std::move(shift);
        lang.alphabet = make_alphabet(r);
        std::vector<std::string> letter_pool;
        for (char ch : lang.alphabet) letter_pool.emplace_back(1, ch);
        auto words =
            detail::distinct_words(letter_pool, cfg.n_concepts, cfg.word_len_min, cfg.word_len_max, r);
        std::set<std::string> phoneme_forms;
        for (int c = 0; c < cfg.n_concepts; ++c) {
            LexEntry e;
            e.concept_id = c;
            e.grapheme = words[size_t(c)];
            e.phoneme = detail::apply_shift(lang.shift_table, roots[size_t(c)]);
            require(phoneme_forms.insert(e.phoneme).second,
                    "phoneme form collision in " + code + ": " + e.phoneme);
            lang.lexicon.push_back(std::move(e));
        }
        return lang;
    };

    // A swap-based shift table is a permutation restricted to the moved
    // symbols, so distinct roots stay distinct.
    auto make_swaps = [&](const std::vector<std::string>& from_pool,
                          const std::vector<std::string>& to_pool, int n_swaps, Rng& r) {
        std::map<std::string, std::string> table;
        std::set<std::string> used;
        int guard = 0;
        while (int(table.size()) < 2 * n_swaps) {
            require(++guard < 10000, "cannot build shift table");
            const std::string& a = r.pick(from_pool);
            const std::string& b = r.pick(to_pool);
            if (a == b || used.count(a) || used.count(b)) continue;
            used.insert(a);
            used.insert(b);
            table[a] = b;
            table[b] = a;
        }
        return table;
    };

    static const std::array<std::array<Constituent, 3>, 3> kOrders = {{
        {Constituent::Subject, Constituent::Verb, Constituent::Object},
        {Constituent::Subject, Constituent::Object, Constituent::Verb},
        {Constituent::Verb, Constituent::Subject, Constituent::Object},
    }};
    static const std::array<std::array<const char*, 3>, 3> kLangNames = {{
        {"ava", "avi", "avo"},
        {"kel", "kil", "kol"},
        {"zar", "zir", "zor"},
    }};
    static const std::array<const char*, 3> kFamilyNames = {"avelic", "kelvic", "zoric"};

    const std::vector<std::string> exotic_pool = pool_slice(usable, cfg.n_phonemes);

    for (int f = 0; f < cfg.n_families; ++f) {
        FamilySpec fam;
        fam.name = f < 3 ? kFamilyNames[size_t(f)] : "family" + std::to_string(f);
        fam.order = kOrders[size_t(f % 3)];
        // Family pools overlap so speech coverage is shared across families.
        const int stride = std::max(1, (usable - 12) / std::max(1, cfg.n_families - 1));
        const int lo = std::min(f * stride, usable - 12);
        const auto pool = pool_slice(lo, lo + 12);
        Rng fam_rng = rng.fork("family-" + std::to_string(f));
        fam.roots = detail::distinct_words(pool, cfg.n_concepts, cfg.root_len_min, cfg.root_len_max,
                                           fam_rng);
        const bool distant = (f == cfg.n_families - 1);
        for (int m = 0; m < cfg.langs_per_family; ++m) {
            const Tier tier = (m == 0) ? Tier::High : (m == 1 ? Tier::Low : Tier::Zero);
            std::string code = (f < 3 && m < 3) ? kLangNames[size_t(f)][size_t(m)]
                                                : "x" + std::to_string(f) + std::to_string(m);
            Rng lang_rng = fam_rng.fork("lang-" + std::to_string(m));
            std::map<std::string, std::string> shift;
            if (tier == Tier::Low) {
                shift = make_swaps(pool, pool, 2, lang_rng);
            } else if (tier == Tier::Zero) {
                if (distant) {
                    // The distant family's held-out language swaps pool symbols
                    // with symbols no other language uses, so its speech never
                    // shares acoustic units with the training languages.
                    shift = make_swaps(pool, exotic_pool, cfg.exotic_swaps, lang_rng);
                } else {
                    shift = make_swaps(pool, pool, f == 0 ? 1 : 2, lang_rng);
                }
            }
            fam.languages.push_back(
                make_language(code, fam.name, tier, fam.roots, std::move(shift), lang_rng));
        }
        world.families.push_back(std::move(fam));
    }

    // English: target of every translation and an ASR-only source. Its
    // phoneme forms live in the mid-inventory region shared by the families.
    {
        Rng en_rng = rng.fork("english");
        const auto pool = pool_slice(std::min(4, usable - 12), std::min(4, usable - 12) + 12);
        auto roots = detail::distinct_words(pool, cfg.n_concepts, cfg.root_len_min,
                                            cfg.root_len_max, en_rng);
        world.english =
            make_language("eng", "target", Tier::High, roots, {}, en_rng);
    }

    return world;
}

// ---------------------------------------------------------------------------
// Reference operations
// ---------------------------------------------------------------------------

inline std::string g2p(const WorldSpec& world, std::string_view text, const std::string& lang) {
    const auto& spec = world.language(lang);
    std::map<std::string, const LexEntry*> by_grapheme;
    for (const auto& e : spec.lexicon) by_grapheme[e.grapheme] = &e;
    std::vector<std::string> out;
    for (const auto& w : split_words(text)) {
        auto it = by_grapheme.find(w);
        require(it != by_grapheme.end(), "g2p: word not in " + lang + " lexicon: " + w);
        out.push_back(it->second->phoneme);
    }
    return join_words(out);
}

inline std::string p2g(const WorldSpec& world, std::string_view phonemes, const std::string& lang) {
    const auto& spec = world.language(lang);
    std::map<std::string, const LexEntry*> by_phoneme;
    for (const auto& e : spec.lexicon) by_phoneme[e.phoneme] = &e;
    std::vector<std::string> out;
    for (const auto& w : split_words(phonemes)) {
        auto it = by_phoneme.find(w);
        require(it != by_phoneme.end(), "p2g: phoneme form not in " + lang + " lexicon: " + w);
        out.push_back(it->second->grapheme);
    }
    return join_words(out);
}

// Splits a source sentence into constituents using concept roles: adjectives
// attach to the following noun, the verb stands alone.
namespace detail {

struct ParsedSentence {
    std::vector<int> subject_group;  // concept ids, adjectives first
    std::vector<int> verb_group;
    std::vector<int> object_group;
};

inline ParsedSentence parse_constituents(const WorldSpec& world, const ToyLanguageSpec& lang,
                                         const FamilySpec& fam, std::string_view text) {
    std::map<std::string, int> by_grapheme;
    for (const auto& e : lang.lexicon) by_grapheme[e.grapheme] = e.concept_id;
    std::vector<int> concepts;
    for (const auto& w : split_words(text)) {
        auto it = by_grapheme.find(w);
        require(it != by_grapheme.end(),
                "translate_ref: word not in " + lang.code + " lexicon: " + w);
        concepts.push_back(it->second);
    }

    // Group: [adj* noun] | verb, in surface order.
    std::vector<std::vector<int>> groups;
    std::vector<int> pending;
    for (int c : concepts) {
        const Role r = world.concept_roles[size_t(c)];
        if (r == Role::Adj) {
            pending.push_back(c);
        } else {
            pending.push_back(c);
            groups.push_back(pending);
            pending.clear();
        }
    }
    require(pending.empty(), "translate_ref: dangling adjective in: " + std::string(text));
    require(groups.size() == 3, "translate_ref: expected three constituents in: " + std::string(text));

    ParsedSentence ps;
    for (size_t i = 0; i < 3; ++i) {
        const Role head = world.concept_roles[size_t(groups[i].back())];
        switch (fam.order[i]) {
            case Constituent::Subject:
                require(head == Role::Noun, "translate_ref: subject slot is not a noun group");
                ps.subject_group = groups[i];
                break;
            case Constituent::Verb:
                require(head == Role::Verb, "translate_ref: verb slot is not a verb");
                ps.verb_group = groups[i];
                break;
            case Constituent::Object:
                require(head == Role::Noun, "translate_ref: object slot is not a noun group");
                ps.object_group = groups[i];
                break;
        }
    }
    return ps;
}

}  // namespace detail

inline std::string translate_ref(const WorldSpec& world, std::string_view text,
                                 const std::string& lang) {
    if (text.empty()) return "";
    if (lang == world.english.code) return std::string(text);
    const auto& spec = world.language(lang);
    const auto& fam = world.family_of(lang);
    const auto ps = detail::parse_constituents(world, spec, fam, text);
    std::vector<std::string> words;
    auto emit = [&](const std::vector<int>& group) {
        for (int c : group) words.push_back(world.english.entry(c).grapheme);
    };
    emit(ps.subject_group);
    emit(ps.verb_group);
    emit(ps.object_group);
    return join_words(words);
}

inline ParallelSentence sample_sentence(const WorldSpec& world, const std::string& lang, Rng& rng) {
    const auto& spec = world.language(lang);
    const auto nouns = world.concepts_with_role(Role::Noun);
    const auto verbs = world.concepts_with_role(Role::Verb);
    const auto adjs = world.concepts_with_role(Role::Adj);

    const int subj = rng.pick(nouns);
    int obj = rng.pick(nouns);
    int guard = 0;
    while (obj == subj && ++guard < 64) obj = rng.pick(nouns);
    const int verb = rng.pick(verbs);

    auto pick_adjs = [&](int count) {
        std::vector<int> out;
        while (int(out.size()) < count) {
            const int a = rng.pick(adjs);
            if (std::find(out.begin(), out.end(), a) == out.end()) out.push_back(a);
        }
        return out;
    };
    const auto adj_s = pick_adjs(int(rng.range(0, 2)));
    const auto adj_o = pick_adjs(int(rng.range(0, 2)));

    std::vector<int> subject_group = adj_s;
    subject_group.push_back(subj);
    std::vector<int> object_group = adj_o;
    object_group.push_back(obj);
    const std::vector<int> verb_group = {verb};

    const auto order = (lang == world.english.code)
                           ? std::array<Constituent, 3>{Constituent::Subject, Constituent::Verb,
                                                        Constituent::Object}
                           : world.family_of(lang).order;
    std::vector<int> surface;
    for (const Constituent c : order) {
        const auto& g = (c == Constituent::Subject) ? subject_group
                        : (c == Constituent::Verb)  ? verb_group
                                                    : object_group;
        surface.insert(surface.end(), g.begin(), g.end());
    }

    ParallelSentence s;
    s.lang = lang;
    std::vector<std::string> src_words, ph_words;
    for (int c : surface) {
        src_words.push_back(spec.entry(c).grapheme);
        ph_words.push_back(spec.entry(c).phoneme);
    }
    s.source_text = join_words(src_words);
    s.source_phonemes = join_words(ph_words);
    s.target_text = translate_ref(world, s.source_text, lang);
    s.alignment_score = rng.beta_int(5, 2);
    return s;
}

}  // namespace phonecot
