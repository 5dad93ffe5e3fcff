// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "phonecot/synthlang.hpp"

namespace phonecot {

namespace detail {

inline nlohmann::json lang_to_json(const ToyLanguageSpec& l) {
    nlohmann::json j;
    j["code"] = l.code;
    j["family"] = l.family;
    j["tier"] = tier_name(l.tier);
    j["alphabet"] = l.alphabet;
    j["shift_table"] = l.shift_table;
    nlohmann::json lex = nlohmann::json::array();
    for (const auto& e : l.lexicon)
        lex.push_back({{"concept", e.concept_id}, {"grapheme", e.grapheme}, {"phoneme", e.phoneme}});
    j["lexicon"] = std::move(lex);
    return j;
}

inline ToyLanguageSpec lang_from_json(const nlohmann::json& j) {
    ToyLanguageSpec l;
    l.code = j.at("code").get<std::string>();
    l.family = j.at("family").get<std::string>();
    const std::string tier = j.at("tier").get<std::string>();
    l.tier = tier == "high" ? Tier::High : tier == "low" ? Tier::Low : Tier::Zero;
    l.alphabet = j.at("alphabet").get<std::string>();
    l.shift_table = j.at("shift_table").get<std::map<std::string, std::string>>();
    for (const auto& e : j.at("lexicon")) {
        LexEntry le;
        le.concept_id = e.at("concept").get<int>();
        le.grapheme = e.at("grapheme").get<std::string>();
        le.phoneme = e.at("phoneme").get<std::string>();
        l.lexicon.push_back(std::move(le));
    }
    return l;
}

inline char constituent_char(Constituent c) {
    switch (c) {
        case Constituent::Subject: return 'S';
        case Constituent::Verb: return 'V';
        case Constituent::Object: return 'O';
    }
    return '?';
}

inline Constituent constituent_from(char c) {
    switch (c) {
        case 'S': return Constituent::Subject;
        case 'V': return Constituent::Verb;
        case 'O': return Constituent::Object;
    }
    fail("bad constituent tag");
}

}  // namespace detail

inline nlohmann::json world_to_json(const WorldSpec& w) {
    nlohmann::json j;
    j["world_version"] = WorldSpec::kWorldVersion;
    j["seed"] = w.config.seed;
    j["config"] = {
        {"n_families", w.config.n_families},
        {"langs_per_family", w.config.langs_per_family},
        {"n_concepts", w.config.n_concepts},
        {"n_phonemes", w.config.n_phonemes},
        {"root_len_min", w.config.root_len_min},
        {"root_len_max", w.config.root_len_max},
        {"word_len_min", w.config.word_len_min},
        {"word_len_max", w.config.word_len_max},
        {"alphabet_size", w.config.alphabet_size},
        {"exotic_symbols", w.config.exotic_symbols},
        {"exotic_swaps", w.config.exotic_swaps},
    };
    j["inventory"] = {{"symbols", w.inventory.symbols}, {"separator", w.inventory.separator}};
    nlohmann::json roles = nlohmann::json::array();
    for (Role r : w.concept_roles)
        roles.push_back(r == Role::Noun ? "noun" : r == Role::Verb ? "verb" : "adj");
    j["concept_roles"] = std::move(roles);
    nlohmann::json fams = nlohmann::json::array();
    for (const auto& f : w.families) {
        nlohmann::json jf;
        jf["name"] = f.name;
        jf["roots"] = f.roots;
        std::string order;
        for (Constituent c : f.order) order += detail::constituent_char(c);
        jf["order"] = order;
        nlohmann::json langs = nlohmann::json::array();
        for (const auto& l : f.languages) langs.push_back(detail::lang_to_json(l));
        jf["languages"] = std::move(langs);
        fams.push_back(std::move(jf));
    }
    j["families"] = std::move(fams);
    j["english"] = detail::lang_to_json(w.english);
    return j;
}

inline WorldSpec world_from_json(const nlohmann::json& j) {
    require(j.at("world_version").get<int>() == WorldSpec::kWorldVersion,
            "unsupported world_version");
    WorldSpec w;
    const auto& c = j.at("config");
    w.config.seed = j.at("seed").get<uint64_t>();
    w.config.n_families = c.at("n_families").get<int>();
    w.config.langs_per_family = c.at("langs_per_family").get<int>();
    w.config.n_concepts = c.at("n_concepts").get<int>();
    w.config.n_phonemes = c.at("n_phonemes").get<int>();
    w.config.root_len_min = c.at("root_len_min").get<int>();
    w.config.root_len_max = c.at("root_len_max").get<int>();
    w.config.word_len_min = c.at("word_len_min").get<int>();
    w.config.word_len_max = c.at("word_len_max").get<int>();
    w.config.alphabet_size = c.at("alphabet_size").get<int>();
    w.config.exotic_symbols = c.at("exotic_symbols").get<int>();
    w.config.exotic_swaps = c.at("exotic_swaps").get<int>();
    w.inventory.symbols = j.at("inventory").at("symbols").get<std::vector<std::string>>();
    w.inventory.separator = j.at("inventory").at("separator").get<std::string>();
    for (const auto& r : j.at("concept_roles")) {
        const std::string s = r.get<std::string>();
        w.concept_roles.push_back(s == "noun" ? Role::Noun : s == "verb" ? Role::Verb : Role::Adj);
    }
    for (const auto& jf : j.at("families")) {
        FamilySpec f;
        f.name = jf.at("name").get<std::string>();
        f.roots = jf.at("roots").get<std::vector<std::string>>();
        const std::string order = jf.at("order").get<std::string>();
        require(order.size() == 3, "bad family order");
        for (size_t i = 0; i < 3; ++i) f.order[i] = detail::constituent_from(order[i]);
        for (const auto& jl : jf.at("languages")) f.languages.push_back(detail::lang_from_json(jl));
        w.families.push_back(std::move(f));
    }
    w.english = detail::lang_from_json(j.at("english"));
    return w;
}

inline std::string world_serialize(const WorldSpec& w) { return world_to_json(w).dump(2) + "\n"; }

inline void save_world(const WorldSpec& w, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open world file for writing: " + path);
    f << world_serialize(w);
    require(f.good(), "failed writing world file: " + path);
}

inline WorldSpec load_world(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open world file: " + path);
    nlohmann::json j;
    f >> j;
    return world_from_json(j);
}

}  // namespace phonecot
