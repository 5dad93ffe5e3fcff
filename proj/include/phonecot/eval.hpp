// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonecot/decode.hpp"

namespace phonecot {

// ---------------------------------------------------------------------------
// Corpus BLEU-4: whitespace tokens, modified n-gram precision, geometric
// mean, exponential brevity penalty. Zero counts are floor-smoothed with
// 1 / (2 * candidate_count).
// ---------------------------------------------------------------------------

struct BleuStats {
    std::array<int64_t, 4> matched{0, 0, 0, 0};
    std::array<int64_t, 4> total{0, 0, 0, 0};
    int64_t hyp_len = 0;
    int64_t ref_len = 0;

    BleuStats& operator+=(const BleuStats& o) {
        for (int n = 0; n < 4; ++n) {
            matched[size_t(n)] += o.matched[size_t(n)];
            total[size_t(n)] += o.total[size_t(n)];
        }
        hyp_len += o.hyp_len;
        ref_len += o.ref_len;
        return *this;
    }
};

inline BleuStats bleu_sentence_stats(const std::string& hyp, const std::string& ref) {
    const auto h = split_words(hyp);
    const auto r = split_words(ref);
    BleuStats s;
    s.hyp_len = int64_t(h.size());
    s.ref_len = int64_t(r.size());
    for (int n = 1; n <= 4; ++n) {
        if (int64_t(h.size()) < n) continue;
        std::map<std::vector<std::string>, int64_t> hyp_counts, ref_counts;
        for (size_t i = 0; i + size_t(n) <= h.size(); ++i)
            hyp_counts[std::vector<std::string>(h.begin() + long(i), h.begin() + long(i) + n)]++;
        for (size_t i = 0; i + size_t(n) <= r.size(); ++i)
            ref_counts[std::vector<std::string>(r.begin() + long(i), r.begin() + long(i) + n)]++;
        for (const auto& [gram, count] : hyp_counts) {
            s.total[size_t(n - 1)] += count;
            auto it = ref_counts.find(gram);
            if (it != ref_counts.end())
                s.matched[size_t(n - 1)] += std::min(count, it->second);
        }
    }
    return s;
}

inline double bleu_from_stats(const BleuStats& s) {
    if (s.hyp_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        const int64_t total = std::max<int64_t>(s.total[size_t(n)], 1);
        const double p = s.matched[size_t(n)] > 0 ? double(s.matched[size_t(n)]) / double(total)
                                                  : 1.0 / (2.0 * double(total));
        log_sum += std::log(p);
    }
    const double bp =
        s.hyp_len >= s.ref_len ? 1.0 : std::exp(1.0 - double(s.ref_len) / double(s.hyp_len));
    return 100.0 * bp * std::exp(log_sum / 4.0);
}

inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
    require(hypotheses.size() == references.size(), "bleu: hypothesis/reference length mismatch");
    require(!hypotheses.empty(), "bleu: empty corpus");
    BleuStats acc;
    for (size_t i = 0; i < hypotheses.size(); ++i)
        acc += bleu_sentence_stats(hypotheses[i], references[i]);
    return bleu_from_stats(acc);
}

// ---------------------------------------------------------------------------
// Paired bootstrap resampling (one-sided): the system that is worse on the
// full set must win or tie a resample for it to count toward the p-value.
// ---------------------------------------------------------------------------

struct BootstrapResult {
    int n_resamples = 1000;
    int wins_a = 0;
    int wins_b = 0;
    int ties = 0;
    double p_value = 1.0;
    uint64_t seed = 0;
};

inline BootstrapResult paired_bootstrap(const std::vector<std::string>& hyps_a,
                                        const std::vector<std::string>& hyps_b,
                                        const std::vector<std::string>& refs, int n = 1000,
                                        uint64_t seed = 0) {
    require(n >= 1, "paired_bootstrap: need at least one resample");
    require(hyps_a.size() == refs.size() && hyps_b.size() == refs.size(),
            "paired_bootstrap: length mismatch");
    require(refs.size() >= 2, "paired_bootstrap: need at least two sentences");

    const size_t N = refs.size();
    std::vector<BleuStats> stats_a(N), stats_b(N);
    BleuStats full_a, full_b;
    for (size_t i = 0; i < N; ++i) {
        stats_a[i] = bleu_sentence_stats(hyps_a[i], refs[i]);
        stats_b[i] = bleu_sentence_stats(hyps_b[i], refs[i]);
        full_a += stats_a[i];
        full_b += stats_b[i];
    }
    const bool a_is_worse = bleu_from_stats(full_a) <= bleu_from_stats(full_b);

    BootstrapResult res;
    res.n_resamples = n;
    res.seed = seed;
    Rng rng(mix_seed(seed, "paired-bootstrap"));
    int worse_wins_or_ties = 0;
    for (int r = 0; r < n; ++r) {
        BleuStats acc_a, acc_b;
        for (size_t i = 0; i < N; ++i) {
            const size_t pick = size_t(rng.below(N));
            acc_a += stats_a[pick];
            acc_b += stats_b[pick];
        }
        const double score_a = bleu_from_stats(acc_a);
        const double score_b = bleu_from_stats(acc_b);
        if (score_a > score_b) res.wins_a++;
        else if (score_b > score_a) res.wins_b++;
        else res.ties++;
        const bool worse_won_or_tied = a_is_worse ? score_a >= score_b : score_b >= score_a;
        if (worse_won_or_tied) ++worse_wins_or_ties;
    }
    res.p_value = double(worse_wins_or_ties) / double(n);
    return res;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

struct TestSentence {
    ParallelSentence sent;
    std::string audio;  // rendered speech tokens
};

using TestSet = std::map<std::string, std::vector<TestSentence>>;  // lang -> sentences

// Builds the per-language evaluation set from a dedicated seed stream,
// disjoint from every training stream.
inline TestSet build_test_set(const WorldSpec& world, const SpeechSynthesizer& synth,
                              const Codebook& codebook, uint64_t eval_seed, int per_lang) {
    TestSet out;
    for (const auto* lang : world.source_languages()) {
        Rng rng(mix_seed(eval_seed, "eval/" + lang->code));
        std::set<std::string> seen;
        auto& list = out[lang->code];
        int guard = 0;
        while (int(list.size()) < per_lang) {
            require(++guard < per_lang * 200, "build_test_set: sentence space exhausted");
            auto s = sample_sentence(world, lang->code, rng);
            if (!seen.insert(s.source_text).second) continue;
            s.id = int64_t(list.size());
            TestSentence ts;
            ts.audio = quantize(synth.synthesize(s.source_phonemes, rng.u64(), rng), codebook)
                           .rendered();
            ts.sent = std::move(s);
            list.push_back(std::move(ts));
        }
    }
    return out;
}

inline std::set<std::string> holdout_keys(const TestSet& test_set) {
    std::set<std::string> keys;
    for (const auto& [lang, list] : test_set)
        for (const auto& ts : list) keys.insert(lang + "|" + ts.sent.source_text);
    return keys;
}

struct SystemRow {
    std::string system;          // trained variant name
    GenMode mode = GenMode::CotPh;
    std::string checkpoint_path;
};

struct ExperimentRecipe {
    std::vector<SystemRow> rows;
    std::string baseline_system = "cot";
    GenMode baseline_mode = GenMode::Cot;
    StepSamplingConfig sampling;  // shared base; the phoneme step lowers top_k
    int phoneme_top_k = 10;
    int max_new_phonemes = 256;
    int max_new_transcription = 128;
    int max_new_translation = 128;
    int n_resamples = 1000;
    uint64_t decode_seed = 0;
    uint64_t bootstrap_seed = 0;
};

struct LangResult {
    double bleu = 0.0;
    double p_value = 1.0;  // vs the baseline row; 1.0 for the baseline itself
};

struct ReportRow {
    std::string system;
    std::string mode;
    std::map<std::string, LangResult> languages;
    std::map<std::string, double> tier_avg;  // high / low / zero
    int64_t parse_failures = 0;
    int64_t truncated_traces = 0;
    int phoneme_step_top_k = -1;  // instrumentation; -1 when the plan has no phoneme step
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::string baseline_system;
    std::string baseline_mode;
    std::string config_digest;
    std::vector<uint64_t> seeds;
    std::string smoothing = "floor:1/(2*count)";
};

using TraceSink = std::function<void(const std::string& system, GenMode mode,
                                     const std::string& lang, const CoTTrace& trace)>;

// Decodes every test sentence for every system row, scores BLEU per
// language, aggregates per tier, and runs paired bootstrap against the
// designated baseline row.
template <class Scalar = float>
EvalReport run_experiment(const WorldSpec& world, const Vocabulary& vocab,
                          const TestSet& test_set, const ExperimentRecipe& recipe,
                          const TraceSink& sink = nullptr) {
    require(!recipe.rows.empty(), "run_experiment: no systems in recipe");

    struct Decoded {
        std::map<std::string, std::vector<std::string>> hyps;  // lang -> translations
        ReportRow row;
    };
    std::vector<Decoded> decoded(recipe.rows.size());

    std::map<std::string, std::vector<std::string>> refs;
    for (const auto& [lang, list] : test_set)
        for (const auto& ts : list) refs[lang].push_back(ts.sent.target_text);

    for (size_t r = 0; r < recipe.rows.size(); ++r) {
        const auto& row = recipe.rows[r];
        ModelState<Scalar> model;
        try {
            model = load_checkpoint<Scalar>(row.checkpoint_path);
        } catch (const std::exception& e) {
            fail("run_experiment: missing checkpoint for system '" + row.system + "' (" +
                 gen_mode_name(row.mode) + "): " + e.what());
        }
        auto plan = GenerationPlan::standard(row.mode, recipe.sampling, recipe.phoneme_top_k);
        plan.phoneme_step.max_new_tokens = recipe.max_new_phonemes;
        plan.transcription_step.max_new_tokens = recipe.max_new_transcription;
        plan.translation_step.max_new_tokens = recipe.max_new_translation;
        decoded[r].row.system = row.system;
        decoded[r].row.mode = gen_mode_name(row.mode);
        decoded[r].row.phoneme_step_top_k =
            row.mode == GenMode::CotPh ? plan.phoneme_step.top_k : -1;

        for (const auto& [lang, list] : test_set) {
            auto& hyps = decoded[r].hyps[lang];
            hyps.resize(list.size());
            std::vector<CoTTrace> traces(list.size());
            parallel_chunks(list.size(), [&](size_t lo, size_t hi, unsigned) {
                for (size_t i = lo; i < hi; ++i) {
                    Rng rng(mix_seed(recipe.decode_seed,
                                     row.system + "/" + gen_mode_name(row.mode) + "/" + lang +
                                         "/" + std::to_string(i)));
                    traces[i] =
                        controlled_generate(model, vocab, list[i].audio, lang, plan, rng);
                }
            });
            for (size_t i = 0; i < list.size(); ++i) {
                auto& trace = traces[i];
                const auto parsed = parse_trace(trace.raw_output, row.mode, lang);
                if (!parsed.parse_ok) {
                    decoded[r].row.parse_failures++;
                    trace.parse_ok = false;
                    trace.parse_error = parsed.parse_error;
                }
                if (trace.truncated) decoded[r].row.truncated_traces++;
                hyps[i] = trace.translation;
                if (sink) sink(row.system, row.mode, lang, trace);
            }
        }
    }

    // Locate the baseline row for significance testing.
    int baseline_idx = -1;
    for (size_t r = 0; r < recipe.rows.size(); ++r)
        if (recipe.rows[r].system == recipe.baseline_system &&
            recipe.rows[r].mode == recipe.baseline_mode)
            baseline_idx = int(r);

    EvalReport report;
    report.baseline_system = recipe.baseline_system;
    report.baseline_mode = gen_mode_name(recipe.baseline_mode);

    for (size_t r = 0; r < recipe.rows.size(); ++r) {
        auto& row = decoded[r].row;
        std::map<std::string, std::vector<double>> tier_scores;
        for (const auto& [lang, hyps] : decoded[r].hyps) {
            LangResult lr;
            lr.bleu = bleu(hyps, refs.at(lang));
            if (baseline_idx >= 0 && int(r) != baseline_idx) {
                auto bs = paired_bootstrap(hyps, decoded[size_t(baseline_idx)].hyps.at(lang),
                                           refs.at(lang), recipe.n_resamples,
                                           mix_seed(recipe.bootstrap_seed, row.system + "/" + lang));
                lr.p_value = bs.p_value;
            }
            row.languages[lang] = lr;
            tier_scores[tier_of_lang(world, lang)].push_back(lr.bleu);
        }
        for (const auto& [tier, scores] : tier_scores) {
            double sum = 0;
            for (double s : scores) sum += s;
            row.tier_avg[tier] = sum / double(scores.size());
        }
        report.rows.push_back(std::move(row));
    }
    return report;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["baseline_system"] = report.baseline_system;
    j["baseline_mode"] = report.baseline_mode;
    j["config_digest"] = report.config_digest;
    j["seeds"] = report.seeds;
    j["smoothing"] = report.smoothing;
    j["metrics"] = {"bleu"};  // schema keeps room for additional metrics
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : report.rows) {
        nlohmann::json jr;
        jr["system"] = row.system;
        jr["mode"] = row.mode;
        jr["parse_failures"] = row.parse_failures;
        jr["truncated_traces"] = row.truncated_traces;
        jr["phoneme_step_top_k"] = row.phoneme_step_top_k;
        nlohmann::json langs;
        for (const auto& [lang, lr] : row.languages)
            langs[lang] = {{"bleu", lr.bleu}, {"p_value", lr.p_value}};
        jr["languages"] = std::move(langs);
        jr["tier_avg"] = row.tier_avg;
        rows.push_back(std::move(jr));
    }
    j["rows"] = std::move(rows);
    return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport report;
    report.baseline_system = j.at("baseline_system").get<std::string>();
    report.baseline_mode = j.at("baseline_mode").get<std::string>();
    report.config_digest = j.value("config_digest", "");
    report.seeds = j.value("seeds", std::vector<uint64_t>{});
    report.smoothing = j.value("smoothing", "");
    for (const auto& jr : j.at("rows")) {
        ReportRow row;
        row.system = jr.at("system").get<std::string>();
        row.mode = jr.at("mode").get<std::string>();
        row.parse_failures = jr.at("parse_failures").get<int64_t>();
        row.truncated_traces = jr.value("truncated_traces", int64_t(0));
        row.phoneme_step_top_k = jr.at("phoneme_step_top_k").get<int>();
        for (const auto& [lang, lr] : jr.at("languages").items())
            row.languages[lang] = {lr.at("bleu").get<double>(), lr.at("p_value").get<double>()};
        row.tier_avg = jr.at("tier_avg").get<std::map<std::string, double>>();
        report.rows.push_back(std::move(row));
    }
    return report;
}

// Plain-text table grouped by resource tier, one line per system row.
inline std::string report_table(const EvalReport& report, const WorldSpec& world) {
    std::vector<std::pair<std::string, std::vector<std::string>>> groups = {
        {"high", {}}, {"low", {}}, {"zero", {}}};
    for (const auto& f : world.families)
        for (const auto& l : f.languages)
            for (auto& [tier, langs] : groups)
                if (tier == tier_name(l.tier)) langs.push_back(l.code);
    for (auto& [tier, langs] : groups) std::sort(langs.begin(), langs.end());

    std::ostringstream os;
    os << "BLEU (xx->eng), p<0.05 vs " << report.baseline_system << " marked *\n";
    os << std::left << std::setw(22) << "system";
    for (const auto& [tier, langs] : groups) {
        for (const auto& lang : langs) os << std::right << std::setw(9) << lang;
        os << std::right << std::setw(9) << (tier + ".avg");
    }
    os << "\n";
    for (const auto& row : report.rows) {
        os << std::left << std::setw(22) << (row.system + " [" + row.mode + "]");
        for (const auto& [tier, langs] : groups) {
            for (const auto& lang : langs) {
                const auto it = row.languages.find(lang);
                if (it == row.languages.end()) {
                    os << std::right << std::setw(9) << "-";
                    continue;
                }
                std::ostringstream cell;
                cell << std::fixed << std::setprecision(1) << it->second.bleu
                     << (it->second.p_value < 0.05 ? "*" : " ");
                os << std::right << std::setw(9) << cell.str();
            }
            const auto ta = row.tier_avg.find(tier);
            std::ostringstream cell;
            if (ta != row.tier_avg.end())
                cell << std::fixed << std::setprecision(1) << ta->second;
            else
                cell << "-";
            os << std::right << std::setw(9) << cell.str();
        }
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Trace export
// ---------------------------------------------------------------------------

inline nlohmann::json trace_to_json(int64_t id, const std::string& lang, GenMode mode,
                                    const CoTTrace& trace) {
    nlohmann::json j;
    j["id"] = id;
    j["lang"] = lang;
    j["mode"] = gen_mode_name(mode);
    j["phonemes"] = trace.phonemes ? nlohmann::json(*trace.phonemes) : nlohmann::json();
    j["transcription"] =
        trace.transcription ? nlohmann::json(*trace.transcription) : nlohmann::json();
    j["translation"] = trace.translation;
    j["truncated"] = trace.truncated;
    j["parse_ok"] = trace.parse_ok;
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& s : trace.steps)
        steps.push_back({{"name", s.name},
                         {"tokens", s.token_count},
                         {"top_k", s.top_k_used},
                         {"truncated", s.truncated}});
    j["steps"] = std::move(steps);
    return j;
}

}  // namespace phonecot
