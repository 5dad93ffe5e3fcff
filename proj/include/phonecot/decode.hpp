// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "phonecot/corpus.hpp"
#include "phonecot/model.hpp"

namespace phonecot {

// ---------------------------------------------------------------------------
// Sampling configuration
// ---------------------------------------------------------------------------

struct StepSamplingConfig {
    double temperature = 0.2;
    double top_p = 0.95;
    int top_k = 50;
    int n_beams = 4;
    int max_new_tokens = 128;
    bool early_stopping = true;
    bool greedy = false;  // argmax expansion, the temperature -> 0 limit

    void validate() const {
        require(temperature > 0.0, "sampling: temperature must be positive");
        require(top_p > 0.0 && top_p <= 1.0, "sampling: top_p must be in (0,1]");
        require(top_k >= 1, "sampling: top_k must be >= 1");
        require(n_beams >= 1, "sampling: n_beams must be >= 1");
        require(max_new_tokens >= 1, "sampling: max_new_tokens must be >= 1");
    }
};

enum class GenMode { Direct, Cot, CotPh, CotDpsNoPh };

inline const char* gen_mode_name(GenMode m) {
    switch (m) {
        case GenMode::Direct: return "direct";
        case GenMode::Cot: return "cot";
        case GenMode::CotPh: return "cot_ph";
        case GenMode::CotDpsNoPh: return "no_ph";
    }
    fail("unknown generation mode");
}

inline GenMode gen_mode_from(const std::string& s) {
    for (auto m : {GenMode::Direct, GenMode::Cot, GenMode::CotPh, GenMode::CotDpsNoPh})
        if (s == gen_mode_name(m)) return m;
    fail("unknown generation mode: " + s);
}

struct GenerationPlan {
    GenMode mode = GenMode::CotPh;
    StepSamplingConfig phoneme_step;        // top_k reduced for the small vocabulary
    StepSamplingConfig transcription_step;
    StepSamplingConfig translation_step;

    static GenerationPlan standard(GenMode mode, const StepSamplingConfig& base,
                                   int phoneme_top_k = 10) {
        GenerationPlan p;
        p.mode = mode;
        p.phoneme_step = base;
        p.phoneme_step.top_k = phoneme_top_k;
        p.phoneme_step.max_new_tokens = 256;
        p.transcription_step = base;
        p.translation_step = base;
        return p;
    }
};

struct StepRecord {
    std::string name;
    std::string text;        // committed step text, terminators stripped
    int token_count = 0;
    int top_k_used = 0;
    bool truncated = false;
    bool ended_by_im_end = false;
};

struct CoTTrace {
    std::optional<std::string> phonemes;
    std::optional<std::string> transcription;
    std::string translation;
    std::vector<StepRecord> steps;
    std::string raw_output;  // full assistant text across all steps
    bool truncated = false;
    bool parse_ok = true;
    std::string parse_error;
};

// ---------------------------------------------------------------------------
// Truncated sampling distribution and the single-draw primitive
// ---------------------------------------------------------------------------

struct TruncatedDist {
    std::vector<TokenId> ids;
    std::vector<double> probs;       // renormalized over ids
    std::vector<double> log_probs;   // full-softmax log-probs of ids (post temperature)
};

template <class Vec>
TruncatedDist truncated_distribution(const Vec& logits, const StepSamplingConfig& cfg) {
    cfg.validate();
    const Eigen::Index V = logits.size();
    std::vector<std::pair<double, TokenId>> scored;
    scored.reserve(size_t(V));
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < V; ++i) {
        const double z = double(logits(i)) / cfg.temperature;
        require(!std::isnan(z), "sample_step: NaN logit");
        scored.emplace_back(z, TokenId(i));
        mx = std::max(mx, z);
    }
    require(std::isfinite(mx), "sample_step: degenerate distribution (all -inf)");
    double denom = 0.0;
    for (const auto& [z, id] : scored) denom += std::exp(z - mx);
    const double log_z = std::log(denom) + mx;

    // top-k, ties resolved toward lower token ids.
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    const size_t k = std::min<size_t>(size_t(cfg.top_k), scored.size());
    scored.resize(k);

    // nucleus: smallest prefix of the sorted candidates reaching top_p.
    TruncatedDist dist;
    double cum = 0.0;
    for (const auto& [z, id] : scored) {
        const double p = std::exp(z - log_z);
        dist.ids.push_back(id);
        dist.log_probs.push_back(z - log_z);
        dist.probs.push_back(p);
        cum += p;
        if (cum >= cfg.top_p) break;
    }
    double norm = 0.0;
    for (double p : dist.probs) norm += p;
    require(norm > 0.0, "sample_step: empty truncated distribution");
    for (double& p : dist.probs) p /= norm;
    return dist;
}

// Temperature, then top-k, then nucleus renormalization, then one
// multinomial draw.
template <class Vec>
TokenId sample_step(const Vec& logits, const StepSamplingConfig& cfg, Rng& rng) {
    const auto dist = truncated_distribution(logits, cfg);
    if (cfg.greedy) return dist.ids[0];
    double u = rng.uniform();
    for (size_t i = 0; i < dist.ids.size(); ++i) {
        u -= dist.probs[i];
        if (u <= 0.0) return dist.ids[i];
    }
    return dist.ids.back();
}

// ---------------------------------------------------------------------------
// Incremental decoding session with per-layer KV caches
// ---------------------------------------------------------------------------

template <class Scalar = float>
class DecoderSession {
public:
    using RowVec = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

    explicit DecoderSession(const ModelState<Scalar>& st) : st_(&st) {
        caches_.resize(size_t(st.cfg.n_layers));
    }

    DecoderSession clone() const {
        DecoderSession out(*st_);
        out.len_ = len_;
        for (size_t l = 0; l < caches_.size(); ++l) {
            out.caches_[l].k = caches_[l].k.topRows(len_);
            out.caches_[l].v = caches_[l].v.topRows(len_);
        }
        out.last_logits_ = last_logits_;
        return out;
    }

    int length() const { return len_; }
    const RowVec& last_logits() const { return last_logits_; }

    void feed(std::span<const TokenId> ids) {
        for (TokenId id : ids) feed_one(id);
    }

    void feed_one(TokenId id) {
        const auto& st = *st_;
        require(len_ < st.cfg.max_len, "decode: context exceeds max_len");
        require(id >= 0 && size_t(id) < st.cfg.vocab_size, "decode: token id out of range");
        const int d = st.cfg.dim, H = st.cfg.n_heads, dh = d / H;
        const Scalar scale = Scalar(1.0 / std::sqrt(double(dh)));
        const int t = len_;

        RowVec x = st.t("tok_emb").row(id) + st.t("pos_emb").row(t);
        for (int l = 0; l < st.cfg.n_layers; ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            auto& cache = caches_[size_t(l)];
            if (cache.k.rows() <= t) {
                const Eigen::Index grow = std::min<Eigen::Index>(
                    st.cfg.max_len, std::max<Eigen::Index>(t + 64, cache.k.rows() * 2));
                cache.k.conservativeResize(grow, d);
                cache.v.conservativeResize(grow, d);
            }
            RowVec n1 = ln_row(x, st.t(p + "ln1.g"), st.t(p + "ln1.b"));
            RowVec q = n1 * st.t(p + "wq") + st.t(p + "bq").row(0);
            cache.k.row(t) = n1 * st.t(p + "wk") + st.t(p + "bk").row(0);
            cache.v.row(t) = n1 * st.t(p + "wv") + st.t(p + "bv").row(0);

            RowVec att(d);
            for (int h = 0; h < H; ++h) {
                auto kh = cache.k.topRows(t + 1).middleCols(h * dh, dh);
                auto vh = cache.v.topRows(t + 1).middleCols(h * dh, dh);
                Eigen::Matrix<Scalar, Eigen::Dynamic, 1> s = kh * q.middleCols(h * dh, dh).transpose();
                s *= scale;
                const Scalar mx = s.maxCoeff();
                Scalar sum = 0;
                for (Eigen::Index j = 0; j <= t; ++j) {
                    s(j) = std::exp(s(j) - mx);
                    sum += s(j);
                }
                s /= sum;
                att.middleCols(h * dh, dh).noalias() = s.transpose() * vh;
            }
            x += att * st.t(p + "wo") + st.t(p + "bo").row(0);
            RowVec n2 = ln_row(x, st.t(p + "ln2.g"), st.t(p + "ln2.b"));
            RowVec f1 = n2 * st.t(p + "w1") + st.t(p + "b1").row(0);
            RowVec act = f1.unaryExpr([](Scalar v) { return nn::gelu(v); });
            x += act * st.t(p + "w2") + st.t(p + "b2").row(0);
        }
        RowVec nf = ln_row(x, st.t("final_norm.g"), st.t("final_norm.b"));
        last_logits_ = nf * st.t("out_proj.w") + st.t("out_proj.b").row(0);
        ++len_;
    }

private:
    struct LayerKV {
        MatrixX<Scalar> k, v;
    };

    static RowVec ln_row(const RowVec& x, const MatrixX<Scalar>& g, const MatrixX<Scalar>& b) {
        const Eigen::Index d = x.size();
        const Scalar mean = x.mean();
        Scalar var = 0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const Scalar c = x(j) - mean;
            var += c * c;
        }
        var /= Scalar(d);
        const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(nn::kLnEps));
        RowVec y(d);
        for (Eigen::Index j = 0; j < d; ++j) y(j) = (x(j) - mean) * inv * g(0, j) + b(0, j);
        return y;
    }

    const ModelState<Scalar>* st_;
    std::vector<LayerKV> caches_;
    RowVec last_logits_;
    int len_ = 0;
};

// ---------------------------------------------------------------------------
// One controlled-generation step: stochastic beam expansion from the
// truncated distribution, best beams kept by cumulative log-probability.
// ---------------------------------------------------------------------------

namespace detail {

struct StepStop {
    TokenId step_terminator = -1;  // e.g. the phoneme end marker
    TokenId newline = -1;          // double newline ends text sections
    TokenId im_end = -1;

    // Decides completion from the generated suffix.
    bool done(const std::vector<TokenId>& gen) const {
        if (gen.empty()) return false;
        const TokenId last = gen.back();
        if (last == im_end) return true;
        if (step_terminator >= 0 && last == step_terminator) return true;
        if (newline >= 0 && gen.size() >= 2 && last == newline && gen[gen.size() - 2] == newline)
            return true;
        return false;
    }
};

template <class Scalar>
struct Beam {
    DecoderSession<Scalar> sess;
    std::vector<TokenId> generated;
    double score = 0.0;
    bool done = false;
};

template <class Scalar>
struct StepOutcome {
    std::vector<TokenId> generated;
    DecoderSession<Scalar> sess;
    bool truncated = false;
    bool ended_by_im_end = false;

    StepOutcome(std::vector<TokenId> g, DecoderSession<Scalar> s, bool trunc)
        : generated(std::move(g)), sess(std::move(s)), truncated(trunc) {}
};

template <class Scalar>
StepOutcome<Scalar> generate_step(DecoderSession<Scalar>&& start, const StepSamplingConfig& cfg,
                                  const StepStop& stop, Rng& rng) {
    cfg.validate();
    std::vector<Beam<Scalar>> active;
    active.push_back({std::move(start), {}, 0.0, false});
    std::vector<Beam<Scalar>> finished;

    for (int produced = 0; produced < cfg.max_new_tokens; ++produced) {
        // Expand every active beam with up to n_beams sampled continuations.
        struct Cand {
            size_t parent;
            TokenId token;
            double score;
        };
        std::vector<Cand> cands;
        for (size_t b = 0; b < active.size(); ++b) {
            const auto dist = truncated_distribution(active[b].sess.last_logits(), cfg);
            std::set<TokenId> seen;
            if (cfg.greedy) {
                seen.insert(dist.ids[0]);
                cands.push_back({b, dist.ids[0], active[b].score + dist.log_probs[0]});
            } else {
                for (int s = 0; s < cfg.n_beams; ++s) {
                    double u = rng.uniform();
                    size_t pick = dist.ids.size() - 1;
                    for (size_t i = 0; i < dist.ids.size(); ++i) {
                        u -= dist.probs[i];
                        if (u <= 0.0) {
                            pick = i;
                            break;
                        }
                    }
                    if (seen.insert(dist.ids[pick]).second)
                        cands.push_back({b, dist.ids[pick], active[b].score + dist.log_probs[pick]});
                }
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.token < b.token;
        });
        if (cands.size() > size_t(cfg.n_beams)) cands.resize(size_t(cfg.n_beams));

        // Children adopt their parent's session; the first child of each
        // parent moves it, later children copy.
        std::vector<Beam<Scalar>> next;
        std::vector<bool> parent_used(active.size(), false);
        for (const auto& c : cands) {
            Beam<Scalar> nb{parent_used[c.parent] ? active[c.parent].sess.clone()
                                                  : std::move(active[c.parent].sess),
                            active[c.parent].generated, c.score, false};
            parent_used[c.parent] = true;
            nb.sess.feed_one(c.token);
            nb.generated.push_back(c.token);
            if (stop.done(nb.generated)) {
                nb.done = true;
                finished.push_back(std::move(nb));
            } else {
                next.push_back(std::move(nb));
            }
        }
        active = std::move(next);
        if (active.empty()) break;
        if (int(finished.size()) >= cfg.n_beams) break;
        if (cfg.early_stopping && !finished.empty()) {
            double best_f = -std::numeric_limits<double>::infinity();
            for (const auto& f : finished) best_f = std::max(best_f, f.score);
            double best_a = -std::numeric_limits<double>::infinity();
            for (const auto& a : active) best_a = std::max(best_a, a.score);
            if (best_f >= best_a) break;
        }
    }

    auto best_of = [](std::vector<Beam<Scalar>>& v) -> Beam<Scalar>& {
        size_t arg = 0;
        for (size_t i = 1; i < v.size(); ++i)
            if (v[i].score > v[arg].score) arg = i;
        return v[arg];
    };

    const bool have_finished = !finished.empty();
    require(have_finished || !active.empty(), "generate_step: no beams survived");
    auto& b = have_finished ? best_of(finished) : best_of(active);
    StepOutcome<Scalar> out(std::move(b.generated), std::move(b.sess), !have_finished);
    out.ended_by_im_end = !out.generated.empty() && out.generated.back() == stop.im_end;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Controlled three-step generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string instruction_for(GenMode mode, const std::string& lang,
                                   const std::string& audio) {
    FieldMap f{{"language", lang}, {"audio", audio}, {"phonemes", ""}, {"text", ""},
               {"translation", ""}};
    switch (mode) {
        case GenMode::Direct: return render_prompt(TaskKind::S2TT_DIRECT, f).prompt;
        case GenMode::Cot:
        case GenMode::CotDpsNoPh: return render_prompt(TaskKind::S2TT_COT, f).prompt;
        case GenMode::CotPh: return render_prompt(TaskKind::S2TT_COT_PH, f).prompt;
    }
    fail("unknown generation mode");
}

struct PlannedStep {
    std::string name;       // phonemes | transcription | translation
    std::string header;     // section header text
    StepSamplingConfig cfg;
    bool phoneme_terminated = false;  // stops at the phoneme end marker
};

inline std::vector<PlannedStep> plan_steps(const GenerationPlan& plan, const std::string& lang) {
    std::vector<PlannedStep> steps;
    switch (plan.mode) {
        case GenMode::CotPh:
            steps.push_back({"phonemes", prompt::phoneme_header(lang), plan.phoneme_step, true});
            steps.push_back({"transcription", prompt::transcription_of_phonemes_header(lang),
                             plan.transcription_step, false});
            steps.push_back(
                {"translation", prompt::translation_header(lang), plan.translation_step, false});
            break;
        case GenMode::Cot:
        case GenMode::CotDpsNoPh:
            steps.push_back({"transcription", prompt::transcription_of_audio_header(lang),
                             plan.transcription_step, false});
            steps.push_back(
                {"translation", prompt::translation_header(lang), plan.translation_step, false});
            break;
        case GenMode::Direct:
            steps.push_back(
                {"translation", prompt::translation_header(lang), plan.translation_step, false});
            break;
    }
    return steps;
}

inline std::string strip_ws(std::string s) {
    while (!s.empty() && (s.back() == '\n' || s.back() == ' ' || s.back() == '\r')) s.pop_back();
    size_t b = 0;
    while (b < s.size() && (s[b] == '\n' || s[b] == ' ' || s[b] == '\r')) ++b;
    return s.substr(b);
}

inline std::string strip_phoneme_markers(std::string s) {
    const std::string so = tok::kSoph, eo = tok::kEoph;
    if (s.rfind(so, 0) == 0) s = s.substr(so.size());
    if (s.size() >= eo.size() && s.compare(s.size() - eo.size(), eo.size(), eo) == 0)
        s = s.substr(0, s.size() - eo.size());
    return s;
}

}  // namespace detail

template <class Scalar = float>
CoTTrace controlled_generate(const ModelState<Scalar>& state, const Vocabulary& vocab,
                             const std::string& audio, const std::string& lang,
                             const GenerationPlan& plan, Rng& rng) {
    CoTTrace trace;
    DecoderSession<Scalar> sess(state);
    const std::string context = prompt::chat_user_prefix() +
                                detail::instruction_for(plan.mode, lang, audio) +
                                prompt::chat_assistant_prefix();
    auto ctx_ids = vocab.encode(context);
    sess.feed(std::span<const TokenId>(ctx_ids));

    const TokenId newline = vocab.lookup("\n");
    const TokenId im_end = vocab.im_end_id();
    const TokenId eoph = vocab.eoph_id();

    const auto steps = detail::plan_steps(plan, lang);
    // Text sections terminate by emitting the blank line themselves, so the
    // separator is only prepended when the previous step did not produce it.
    bool needs_separator = false;
    for (size_t i = 0; i < steps.size(); ++i) {
        const auto& step = steps[i];
        // The step header comes verbatim from the template; the model only
        // generates the section body.
        const std::string header = (needs_separator ? "\n\n" : "") + step.header + "\n";
        auto header_ids = vocab.encode(header);
        sess.feed(std::span<const TokenId>(header_ids));
        trace.raw_output += header;

        detail::StepStop stop;
        stop.newline = newline;
        stop.im_end = im_end;
        if (step.phoneme_terminated) stop.step_terminator = eoph;

        auto outcome = detail::generate_step(std::move(sess), step.cfg, stop, rng);
        sess = std::move(outcome.sess);

        std::string text = vocab.decode(outcome.generated);
        // The end marker stays in the decoding context but not in the trace.
        const std::string im_end_str = tok::kImEnd;
        if (text.size() >= im_end_str.size() &&
            text.compare(text.size() - im_end_str.size(), im_end_str.size(), im_end_str) == 0)
            text = text.substr(0, text.size() - im_end_str.size());
        trace.raw_output += text;
        text = detail::strip_ws(text);

        StepRecord rec;
        rec.name = step.name;
        rec.token_count = int(outcome.generated.size());
        rec.top_k_used = step.cfg.top_k;
        rec.truncated = outcome.truncated;
        rec.ended_by_im_end = outcome.ended_by_im_end;
        rec.text = text;
        trace.truncated = trace.truncated || outcome.truncated;

        if (step.name == "phonemes") {
            trace.phonemes = detail::strip_phoneme_markers(text);
        } else if (step.name == "transcription") {
            trace.transcription = text;
        } else {
            trace.translation = text;
        }
        trace.steps.push_back(std::move(rec));

        const bool emitted_separator =
            !outcome.truncated && !outcome.ended_by_im_end && !step.phoneme_terminated;
        needs_separator = !emitted_separator;
        // Keep the context on the training format when the step ran out of
        // budget before emitting its terminator.
        if (outcome.truncated && i + 1 < steps.size()) {
            std::vector<TokenId> fix = {newline, newline};
            sess.feed(std::span<const TokenId>(fix));
            trace.raw_output += "\n\n";
            needs_separator = false;
        }
    }
    return trace;
}

// ---------------------------------------------------------------------------
// Trace parsing: exact section labels, tolerant of surrounding whitespace.
// ---------------------------------------------------------------------------

inline CoTTrace parse_trace(const std::string& raw, GenMode mode, const std::string& lang) {
    struct Expected {
        std::string name;
        std::string header;
    };
    std::vector<Expected> expected;
    switch (mode) {
        case GenMode::CotPh:
            expected = {{"phonemes", prompt::phoneme_header(lang)},
                        {"transcription", prompt::transcription_of_phonemes_header(lang)},
                        {"translation", prompt::translation_header(lang)}};
            break;
        case GenMode::Cot:
        case GenMode::CotDpsNoPh:
            expected = {{"transcription", prompt::transcription_of_audio_header(lang)},
                        {"translation", prompt::translation_header(lang)}};
            break;
        case GenMode::Direct:
            expected = {{"translation", prompt::translation_header(lang)}};
            break;
    }

    CoTTrace trace;
    trace.raw_output = raw;
    size_t pos = 0;
    while (pos < raw.size() && (raw[pos] == '\n' || raw[pos] == ' ')) ++pos;
    for (size_t i = 0; i < expected.size(); ++i) {
        const auto& e = expected[i];
        if (raw.compare(pos, e.header.size(), e.header) != 0) {
            trace.parse_ok = false;
            trace.parse_error = "missing section header: " + e.name;
            return trace;
        }
        pos += e.header.size();
        if (pos < raw.size() && raw[pos] == '\n') ++pos;
        size_t end;
        if (i + 1 < expected.size()) {
            const std::string needle = "\n\n" + expected[i + 1].header;
            end = raw.find(needle, pos);
            if (end == std::string::npos) {
                trace.parse_ok = false;
                trace.parse_error = "missing section header: " + expected[i + 1].name;
                return trace;
            }
        } else {
            end = raw.size();
        }
        std::string body = raw.substr(pos, end - pos);
        const std::string im_end_str = tok::kImEnd;
        const size_t at = body.find(im_end_str);
        if (at != std::string::npos) body = body.substr(0, at);
        body = detail::strip_ws(body);
        if (e.name == "phonemes") trace.phonemes = detail::strip_phoneme_markers(body);
        else if (e.name == "transcription") trace.transcription = body;
        else trace.translation = body;
        pos = (i + 1 < expected.size()) ? end + 2 : end;
    }
    return trace;
}

}  // namespace phonecot
