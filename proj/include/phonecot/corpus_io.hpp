// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "phonecot/corpus.hpp"

namespace phonecot {

// Loss masks are stored run-length encoded: run lengths of alternating
// values starting with a disabled run (a leading enabled run is encoded by
// a zero-length first run).
inline nlohmann::json rle_encode(const std::vector<uint8_t>& mask) {
    nlohmann::json runs = nlohmann::json::array();
    uint8_t value = 0;
    int64_t run = 0;
    for (uint8_t m : mask) {
        if ((m != 0) == (value != 0)) {
            ++run;
        } else {
            runs.push_back(run);
            value = m;
            run = 1;
        }
    }
    runs.push_back(run);
    return runs;
}

inline std::vector<uint8_t> rle_decode(const nlohmann::json& runs) {
    std::vector<uint8_t> mask;
    uint8_t value = 0;
    for (const auto& r : runs) {
        mask.insert(mask.end(), size_t(r.get<int64_t>()), value);
        value = value ? 0 : 1;
    }
    return mask;
}

inline nlohmann::json sample_to_json(const TaskSample& s) {
    nlohmann::json j;
    j["tokens"] = s.tokens;
    j["loss_mask_rle"] = rle_encode(s.loss_mask);
    j["kind"] = task_kind_name(s.kind);
    j["lang"] = s.lang;
    nlohmann::json meta;
    meta["sentence_id"] = s.meta.sentence_id;
    if (s.meta.phase) meta["phase"] = s.meta.phase;
    if (s.meta.augmented) meta["augmented"] = true;
    if (s.meta.no_phoneme) meta["no_phoneme"] = true;
    if (!s.meta.fields.empty()) meta["fields"] = s.meta.fields;
    if (!s.meta.ops_log.empty()) meta["ops_log"] = s.meta.ops_log;
    j["meta"] = std::move(meta);
    return j;
}

inline TaskSample sample_from_json(const nlohmann::json& j) {
    TaskSample s;
    s.tokens = j.at("tokens").get<std::vector<TokenId>>();
    s.loss_mask = rle_decode(j.at("loss_mask_rle"));
    require(s.loss_mask.size() == s.tokens.size(), "dataset: mask/token length mismatch");
    s.kind = task_kind_from(j.at("kind").get<std::string>());
    s.lang = j.at("lang").get<std::string>();
    const auto& meta = j.at("meta");
    s.meta.sentence_id = meta.at("sentence_id").get<int64_t>();
    s.meta.phase = meta.value("phase", 0);
    s.meta.augmented = meta.value("augmented", false);
    s.meta.no_phoneme = meta.value("no_phoneme", false);
    if (meta.contains("fields")) s.meta.fields = meta.at("fields").get<FieldMap>();
    s.meta.ops_log = meta.value("ops_log", "");
    return s;
}

inline void save_dataset(const StageDataset& ds, const std::string& jsonl_path,
                         const std::string& manifest_path, const std::string& config_digest) {
    std::ofstream f(jsonl_path, std::ios::binary);
    require(f.good(), "cannot open dataset file for writing: " + jsonl_path);
    for (const auto& s : ds.samples) f << sample_to_json(s).dump() << "\n";
    require(f.good(), "failed writing dataset: " + jsonl_path);

    nlohmann::json m;
    m["stage"] = ds.stage;
    m["n_samples"] = ds.samples.size();
    m["counts_by_kind"] = ds.counts_by_kind;
    m["counts_by_lang"] = ds.counts_by_lang;
    m["counts_by_kind_lang"] = ds.counts_by_kind_lang;
    m["counts_by_tier"] = ds.counts_by_tier;
    m["notes"] = ds.notes;
    m["config_digest"] = config_digest;
    std::ofstream mf(manifest_path, std::ios::binary);
    require(mf.good(), "cannot open manifest for writing: " + manifest_path);
    mf << m.dump(2) << "\n";
}

inline StageDataset load_dataset(const std::string& jsonl_path, const std::string& manifest_path,
                                 std::string* config_digest = nullptr) {
    std::ifstream f(jsonl_path, std::ios::binary);
    require(f.good(), "cannot open dataset file: " + jsonl_path);
    StageDataset ds;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ds.samples.push_back(sample_from_json(nlohmann::json::parse(line)));
    }
    std::ifstream mf(manifest_path, std::ios::binary);
    require(mf.good(), "cannot open manifest: " + manifest_path);
    nlohmann::json m;
    mf >> m;
    ds.stage = m.at("stage").get<int>();
    ds.counts_by_kind = m.at("counts_by_kind").get<std::map<std::string, int64_t>>();
    ds.counts_by_lang = m.at("counts_by_lang").get<std::map<std::string, int64_t>>();
    ds.counts_by_kind_lang = m.at("counts_by_kind_lang").get<std::map<std::string, int64_t>>();
    ds.counts_by_tier = m.at("counts_by_tier").get<std::map<std::string, int64_t>>();
    ds.notes = m.at("notes").get<std::map<std::string, int64_t>>();
    require(size_t(m.at("n_samples").get<int64_t>()) == ds.samples.size(),
            "dataset manifest count mismatch: " + jsonl_path);
    if (config_digest) *config_digest = m.at("config_digest").get<std::string>();
    return ds;
}

}  // namespace phonecot
