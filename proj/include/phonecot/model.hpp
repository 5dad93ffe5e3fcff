// Copyright (C) 2026 The phonecot Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "phonecot/corpus.hpp"
#include "phonecot/vocab.hpp"

namespace phonecot {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int dim = 128;
    int ffn_mult = 4;
    int max_len = 2048;
    double dropout = 0.0;
    double init_std = 0.02;
    uint64_t seed = 0;
    size_t vocab_size = 0;

    void validate() const {
        require(n_layers >= 1 && n_heads >= 1 && dim >= n_heads, "model config: bad dimensions");
        require(dim % n_heads == 0, "model config: dim must be divisible by n_heads");
        require(ffn_mult >= 1 && max_len >= 2, "model config: bad ffn/max_len");
        require(vocab_size >= 2, "model config: vocabulary not set");
        require(dropout >= 0.0 && dropout < 1.0, "model config: bad dropout");
    }
};

template <class Scalar>
struct NamedTensor {
    std::string name;
    MatrixX<Scalar> value;
};

template <class Scalar>
class ModelState {
public:
    ModelConfig cfg;
    std::vector<NamedTensor<Scalar>> tensors;
    int64_t trained_steps = 0;

    MatrixX<Scalar>& t(const std::string& name) { return tensors[idx(name)].value; }
    const MatrixX<Scalar>& t(const std::string& name) const { return tensors[idx(name)].value; }

    size_t idx(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "unknown tensor: " + name);
        return it->second;
    }

    void rebuild_index() {
        index_.clear();
        for (size_t i = 0; i < tensors.size(); ++i) index_[tensors[i].name] = i;
    }

    // Embedding and output-projection tensors are the stage-1 trainable set;
    // everything else is the backbone.
    static bool is_embedding_or_output(const std::string& name) {
        return name == "tok_emb" || name == "pos_emb" || name == "out_proj.w" ||
               name == "out_proj.b";
    }

    std::vector<size_t> trainable_indices(bool embeddings_only) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < tensors.size(); ++i)
            if (!embeddings_only || is_embedding_or_output(tensors[i].name)) out.push_back(i);
        return out;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += t.value.size();
        return n;
    }

    uint64_t checksum_of(const std::vector<std::string>& names) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& name : names) {
            const auto& m = t(name);
            h = fnv1a64(std::string_view(reinterpret_cast<const char*>(m.data()),
                                         size_t(m.size()) * sizeof(Scalar)),
                        h);
        }
        return h;
    }

    std::vector<std::string> backbone_names() const {
        std::vector<std::string> out;
        for (const auto& t : tensors)
            if (!is_embedding_or_output(t.name)) out.push_back(t.name);
        return out;
    }

    bool all_finite() const {
        for (const auto& t : tensors)
            if (!t.value.allFinite()) return false;
        return true;
    }

private:
    std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <class Scalar>
MatrixX<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng rng) {
    MatrixX<Scalar> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = Scalar(rng.normal() * stddev);
    return m;
}

}  // namespace detail

template <class Scalar = float>
ModelState<Scalar> init_model(const ModelConfig& cfg_in, const EmbeddingLayout& layout) {
    ModelConfig cfg = cfg_in;
    cfg.vocab_size = layout.total();
    cfg.validate();
    require(layout.dim == size_t(cfg.dim), "init_model: layout dim mismatch");

    ModelState<Scalar> st;
    st.cfg = cfg;
    Rng root(mix_seed(cfg.seed, "model-init"));
    auto gauss = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
        return detail::gaussian_matrix<Scalar>(r, c, cfg.init_std, root.fork(name));
    };
    auto add = [&](const std::string& name, MatrixX<Scalar> m) {
        st.tensors.push_back({name, std::move(m)});
    };

    // The token embedding is built the way a vocabulary expansion would be:
    // base rows first, then the speech/phoneme rows appended on top of them.
    {
        MatrixX<Scalar> base = gauss("tok_emb.base", Eigen::Index(layout.base_count), cfg.dim);
        add("tok_emb", expand_embeddings(base, layout, cfg.seed, cfg.init_std));
    }
    add("pos_emb", gauss("pos_emb", cfg.max_len, cfg.dim));
    const int fd = cfg.dim * cfg.ffn_mult;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1.g", MatrixX<Scalar>::Ones(1, cfg.dim));
        add(p + "ln1.b", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "wq", gauss(p + "wq", cfg.dim, cfg.dim));
        add(p + "bq", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "wk", gauss(p + "wk", cfg.dim, cfg.dim));
        add(p + "bk", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "wv", gauss(p + "wv", cfg.dim, cfg.dim));
        add(p + "bv", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "wo", gauss(p + "wo", cfg.dim, cfg.dim));
        add(p + "bo", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "ln2.g", MatrixX<Scalar>::Ones(1, cfg.dim));
        add(p + "ln2.b", MatrixX<Scalar>::Zero(1, cfg.dim));
        add(p + "w1", gauss(p + "w1", cfg.dim, fd));
        add(p + "b1", MatrixX<Scalar>::Zero(1, fd));
        add(p + "w2", gauss(p + "w2", fd, cfg.dim));
        add(p + "b2", MatrixX<Scalar>::Zero(1, cfg.dim));
    }
    add("final_norm.g", MatrixX<Scalar>::Ones(1, cfg.dim));
    add("final_norm.b", MatrixX<Scalar>::Zero(1, cfg.dim));
    add("out_proj.w", gauss("out_proj.w", cfg.dim, Eigen::Index(cfg.vocab_size)));
    add("out_proj.b", MatrixX<Scalar>::Zero(1, Eigen::Index(cfg.vocab_size)));
    st.rebuild_index();
    return st;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace nn {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

template <class Scalar>
Scalar gelu(Scalar x) {
    const Scalar inner = Scalar(kGeluC) * (x + Scalar(kGeluK) * x * x * x);
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(inner));
}

template <class Scalar>
Scalar gelu_grad(Scalar x) {
    const Scalar inner = Scalar(kGeluC) * (x + Scalar(kGeluK) * x * x * x);
    const Scalar t = std::tanh(inner);
    const Scalar sech2 = Scalar(1) - t * t;
    return Scalar(0.5) * (Scalar(1) + t) +
           Scalar(0.5) * x * sech2 * Scalar(kGeluC) * (Scalar(1) + Scalar(3 * kGeluK) * x * x);
}

template <class Scalar>
struct LnCache {
    MatrixX<Scalar> n;                    // normalized rows, pre gain/bias
    std::vector<Scalar> inv_sigma;        // per row
};

template <class Scalar>
MatrixX<Scalar> layernorm(const MatrixX<Scalar>& x, const MatrixX<Scalar>& g,
                          const MatrixX<Scalar>& b, LnCache<Scalar>& cache) {
    const Eigen::Index L = x.rows(), d = x.cols();
    cache.n.resize(L, d);
    cache.inv_sigma.assign(size_t(L), Scalar(0));
    MatrixX<Scalar> y(L, d);
    for (Eigen::Index i = 0; i < L; ++i) {
        const Scalar mean = x.row(i).mean();
        Scalar var = 0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const Scalar c = x(i, j) - mean;
            var += c * c;
        }
        var /= Scalar(d);
        const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLnEps));
        cache.inv_sigma[size_t(i)] = inv;
        for (Eigen::Index j = 0; j < d; ++j) {
            cache.n(i, j) = (x(i, j) - mean) * inv;
            y(i, j) = cache.n(i, j) * g(0, j) + b(0, j);
        }
    }
    return y;
}

template <class Scalar>
MatrixX<Scalar> layernorm_backward(const MatrixX<Scalar>& dy, const LnCache<Scalar>& cache,
                                   const MatrixX<Scalar>& g, MatrixX<Scalar>& dg,
                                   MatrixX<Scalar>& db) {
    const Eigen::Index L = dy.rows(), d = dy.cols();
    MatrixX<Scalar> dx(L, d);
    for (Eigen::Index i = 0; i < L; ++i) {
        Scalar mean_dn = 0, mean_dn_n = 0;
        for (Eigen::Index j = 0; j < d; ++j) {
            const Scalar dn = dy(i, j) * g(0, j);
            mean_dn += dn;
            mean_dn_n += dn * cache.n(i, j);
            dg(0, j) += dy(i, j) * cache.n(i, j);
            db(0, j) += dy(i, j);
        }
        mean_dn /= Scalar(d);
        mean_dn_n /= Scalar(d);
        const Scalar inv = cache.inv_sigma[size_t(i)];
        for (Eigen::Index j = 0; j < d; ++j) {
            const Scalar dn = dy(i, j) * g(0, j);
            dx(i, j) = inv * (dn - mean_dn - cache.n(i, j) * mean_dn_n);
        }
    }
    return dx;
}

}  // namespace nn

template <class Scalar>
struct LayerCache {
    MatrixX<Scalar> x_in;          // residual stream entering the layer
    nn::LnCache<Scalar> ln1;
    MatrixX<Scalar> q, k, v;
    std::vector<MatrixX<Scalar>> probs;  // per-head causal attention rows
    MatrixX<Scalar> att_concat;
    MatrixX<Scalar> x_mid;         // after the attention residual
    nn::LnCache<Scalar> ln2;
    MatrixX<Scalar> f1, act;
    MatrixX<Scalar> drop_att, drop_ffn;  // inverted dropout masks, empty when off
};

template <class Scalar>
struct ForwardCache {
    std::vector<LayerCache<Scalar>> layers;
    MatrixX<Scalar> x_last;
    nn::LnCache<Scalar> ln_f;
    MatrixX<Scalar> n_f;  // final normalized activations (post gain/bias)
};

namespace detail {

template <class Scalar>
MatrixX<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    MatrixX<Scalar> m(rows, cols);
    const Scalar keep = Scalar(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i)
        m.data()[i] = rng.uniform() < p ? Scalar(0) : keep;
    return m;
}

}  // namespace detail

// Full-sequence causal forward pass. Position t attends to positions <= t.
// Residual-branch dropout is active only when a dropout rng is supplied.
template <class Scalar>
MatrixX<Scalar> forward(const ModelState<Scalar>& st, std::span<const TokenId> ids,
                        ForwardCache<Scalar>* cache = nullptr, Rng* dropout_rng = nullptr) {
    const Eigen::Index L = Eigen::Index(ids.size());
    require(L >= 1, "forward: empty input");
    require(L <= st.cfg.max_len, "forward: input longer than max_len");
    const int d = st.cfg.dim, H = st.cfg.n_heads, dh = d / st.cfg.n_heads;
    const Scalar scale = Scalar(1.0 / std::sqrt(double(dh)));

    const auto& tok = st.t("tok_emb");
    const auto& pos = st.t("pos_emb");
    MatrixX<Scalar> x(L, d);
    for (Eigen::Index i = 0; i < L; ++i) {
        require(ids[size_t(i)] >= 0 && size_t(ids[size_t(i)]) < st.cfg.vocab_size,
                "forward: token id out of range");
        x.row(i) = tok.row(ids[size_t(i)]) + pos.row(i);
    }

    ForwardCache<Scalar> local;
    ForwardCache<Scalar>& fc = cache ? *cache : local;
    fc.layers.assign(size_t(st.cfg.n_layers), {});

    for (int l = 0; l < st.cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        auto& lc = fc.layers[size_t(l)];
        lc.x_in = x;
        MatrixX<Scalar> n1 = nn::layernorm(x, st.t(p + "ln1.g"), st.t(p + "ln1.b"), lc.ln1);
        lc.q.noalias() = n1 * st.t(p + "wq");
        lc.q.rowwise() += st.t(p + "bq").row(0);
        lc.k.noalias() = n1 * st.t(p + "wk");
        lc.k.rowwise() += st.t(p + "bk").row(0);
        lc.v.noalias() = n1 * st.t(p + "wv");
        lc.v.rowwise() += st.t(p + "bv").row(0);

        lc.probs.assign(size_t(H), MatrixX<Scalar>());
        lc.att_concat.resize(L, d);
        for (int h = 0; h < H; ++h) {
            auto qh = lc.q.middleCols(h * dh, dh);
            auto kh = lc.k.middleCols(h * dh, dh);
            auto vh = lc.v.middleCols(h * dh, dh);
            MatrixX<Scalar> s(L, L);
            s.noalias() = qh * kh.transpose();
            s *= scale;
            MatrixX<Scalar>& prob = lc.probs[size_t(h)];
            prob = MatrixX<Scalar>::Zero(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                Scalar mx = s(i, 0);
                for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, s(i, j));
                Scalar sum = 0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    const Scalar e = std::exp(s(i, j) - mx);
                    prob(i, j) = e;
                    sum += e;
                }
                const Scalar inv = Scalar(1) / sum;
                for (Eigen::Index j = 0; j <= i; ++j) prob(i, j) *= inv;
            }
            lc.att_concat.middleCols(h * dh, dh).noalias() = prob * vh;
        }
        MatrixX<Scalar> att_out;
        att_out.noalias() = lc.att_concat * st.t(p + "wo");
        att_out.rowwise() += st.t(p + "bo").row(0);
        if (st.cfg.dropout > 0.0 && dropout_rng) {
            lc.drop_att = detail::dropout_mask<Scalar>(L, d, st.cfg.dropout, *dropout_rng);
            att_out.array() *= lc.drop_att.array();
        }
        lc.x_mid = x + att_out;

        MatrixX<Scalar> n2 =
            nn::layernorm(lc.x_mid, st.t(p + "ln2.g"), st.t(p + "ln2.b"), lc.ln2);
        lc.f1.noalias() = n2 * st.t(p + "w1");
        lc.f1.rowwise() += st.t(p + "b1").row(0);
        lc.act = lc.f1.unaryExpr([](Scalar v) { return nn::gelu(v); });
        MatrixX<Scalar> f2;
        f2.noalias() = lc.act * st.t(p + "w2");
        f2.rowwise() += st.t(p + "b2").row(0);
        if (st.cfg.dropout > 0.0 && dropout_rng) {
            lc.drop_ffn = detail::dropout_mask<Scalar>(L, d, st.cfg.dropout, *dropout_rng);
            f2.array() *= lc.drop_ffn.array();
        }
        x = lc.x_mid + f2;
    }

    fc.x_last = x;
    fc.n_f = nn::layernorm(x, st.t("final_norm.g"), st.t("final_norm.b"), fc.ln_f);
    MatrixX<Scalar> logits;
    logits.noalias() = fc.n_f * st.t("out_proj.w");
    logits.rowwise() += st.t("out_proj.b").row(0);
    return logits;
}

// Gradient accumulator aligned with the model's tensor list.
template <class Scalar>
struct GradStore {
    std::vector<MatrixX<Scalar>> grads;

    explicit GradStore(const ModelState<Scalar>& st) {
        grads.reserve(st.tensors.size());
        for (const auto& t : st.tensors)
            grads.push_back(MatrixX<Scalar>::Zero(t.value.rows(), t.value.cols()));
    }

    void zero() {
        for (auto& g : grads) g.setZero();
    }

    void add(const GradStore& other) {
        for (size_t i = 0; i < grads.size(); ++i) grads[i] += other.grads[i];
    }
};

// Cross-entropy between next-token logits and targets over loss-enabled
// positions. Returns (loss_sum, enabled_count); fills dlogits when given.
template <class Scalar>
std::pair<double, int64_t> next_token_loss(const MatrixX<Scalar>& logits,
                                           std::span<const TokenId> ids,
                                           std::span<const uint8_t> mask,
                                           MatrixX<Scalar>* dlogits = nullptr) {
    require(ids.size() == mask.size(), "loss: mask/token length mismatch");
    const Eigen::Index L = Eigen::Index(ids.size());
    double loss_sum = 0.0;
    int64_t enabled = 0;
    if (dlogits) *dlogits = MatrixX<Scalar>::Zero(logits.rows(), logits.cols());
    for (Eigen::Index i = 1; i < L; ++i) {
        if (!mask[size_t(i)]) continue;
        ++enabled;
        const auto row = logits.row(i - 1);
        Scalar mx = row(0);
        for (Eigen::Index j = 1; j < row.size(); ++j) mx = std::max(mx, row(j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(double(row(j) - mx));
        const double log_z = std::log(sum) + double(mx);
        loss_sum += log_z - double(row(ids[size_t(i)]));
        if (dlogits) {
            for (Eigen::Index j = 0; j < row.size(); ++j)
                (*dlogits)(i - 1, j) += Scalar(std::exp(double(row(j) - mx)) / sum);
            (*dlogits)(i - 1, ids[size_t(i)]) -= Scalar(1);
        }
    }
    return {loss_sum, enabled};
}

// Backpropagates dlogits through the network, accumulating parameter
// gradients (unscaled sums) into `gs`.
template <class Scalar>
void backward(const ModelState<Scalar>& st, std::span<const TokenId> ids,
              const ForwardCache<Scalar>& fc, const MatrixX<Scalar>& dlogits, GradStore<Scalar>& gs) {
    const Eigen::Index L = Eigen::Index(ids.size());
    const int d = st.cfg.dim, H = st.cfg.n_heads, dh = d / H;
    const Scalar scale = Scalar(1.0 / std::sqrt(double(dh)));
    auto g = [&](const std::string& name) -> MatrixX<Scalar>& { return gs.grads[st.idx(name)]; };

    // Output projection and final norm.
    g("out_proj.w").noalias() += fc.n_f.transpose() * dlogits;
    g("out_proj.b").row(0) += dlogits.colwise().sum();
    MatrixX<Scalar> dnf;
    dnf.noalias() = dlogits * st.t("out_proj.w").transpose();
    MatrixX<Scalar> dx = nn::layernorm_backward(dnf, fc.ln_f, st.t("final_norm.g"),
                                                g("final_norm.g"), g("final_norm.b"));

    for (int l = st.cfg.n_layers - 1; l >= 0; --l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        const auto& lc = fc.layers[size_t(l)];

        // FFN branch.
        MatrixX<Scalar> df2 = dx;  // residual: dx flows to both branch and skip
        if (lc.drop_ffn.size() > 0) df2.array() *= lc.drop_ffn.array();
        g(p + "w2").noalias() += lc.act.transpose() * df2;
        g(p + "b2").row(0) += df2.colwise().sum();
        MatrixX<Scalar> da;
        da.noalias() = df2 * st.t(p + "w2").transpose();
        MatrixX<Scalar> df1 =
            da.binaryExpr(lc.f1, [](Scalar dv, Scalar x) { return dv * nn::gelu_grad(x); });
        // n2 is recomputed from its cache to avoid storing it.
        MatrixX<Scalar> n2(L, d);
        for (Eigen::Index i = 0; i < L; ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                n2(i, j) = lc.ln2.n(i, j) * st.t(p + "ln2.g")(0, j) + st.t(p + "ln2.b")(0, j);
        g(p + "w1").noalias() += n2.transpose() * df1;
        g(p + "b1").row(0) += df1.colwise().sum();
        MatrixX<Scalar> dn2;
        dn2.noalias() = df1 * st.t(p + "w1").transpose();
        MatrixX<Scalar> dx_mid =
            nn::layernorm_backward(dn2, lc.ln2, st.t(p + "ln2.g"), g(p + "ln2.g"), g(p + "ln2.b"));
        dx_mid += dx;

        // Attention branch.
        MatrixX<Scalar> datt = dx_mid;  // gradient wrt attention output
        if (lc.drop_att.size() > 0) datt.array() *= lc.drop_att.array();
        g(p + "wo").noalias() += lc.att_concat.transpose() * datt;
        g(p + "bo").row(0) += datt.colwise().sum();
        MatrixX<Scalar> dconcat;
        dconcat.noalias() = datt * st.t(p + "wo").transpose();

        MatrixX<Scalar> dq = MatrixX<Scalar>::Zero(L, d);
        MatrixX<Scalar> dk = MatrixX<Scalar>::Zero(L, d);
        MatrixX<Scalar> dv = MatrixX<Scalar>::Zero(L, d);
        for (int h = 0; h < H; ++h) {
            const auto& prob = lc.probs[size_t(h)];
            auto qh = lc.q.middleCols(h * dh, dh);
            auto kh = lc.k.middleCols(h * dh, dh);
            auto vh = lc.v.middleCols(h * dh, dh);
            auto dch = dconcat.middleCols(h * dh, dh);

            MatrixX<Scalar> dp;
            dp.noalias() = dch * vh.transpose();
            dv.middleCols(h * dh, dh).noalias() += prob.transpose() * dch;

            MatrixX<Scalar> ds(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                Scalar dot = 0;
                for (Eigen::Index j = 0; j <= i; ++j) dot += dp(i, j) * prob(i, j);
                for (Eigen::Index j = 0; j <= i; ++j)
                    ds(i, j) = prob(i, j) * (dp(i, j) - dot);
                for (Eigen::Index j = i + 1; j < L; ++j) ds(i, j) = 0;
            }
            dq.middleCols(h * dh, dh).noalias() += ds * kh * scale;
            dk.middleCols(h * dh, dh).noalias() += ds.transpose() * qh * scale;
        }

        // Project q/k/v gradients back to the normed input.
        MatrixX<Scalar> n1(L, d);
        for (Eigen::Index i = 0; i < L; ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                n1(i, j) = lc.ln1.n(i, j) * st.t(p + "ln1.g")(0, j) + st.t(p + "ln1.b")(0, j);
        g(p + "wq").noalias() += n1.transpose() * dq;
        g(p + "bq").row(0) += dq.colwise().sum();
        g(p + "wk").noalias() += n1.transpose() * dk;
        g(p + "bk").row(0) += dk.colwise().sum();
        g(p + "wv").noalias() += n1.transpose() * dv;
        g(p + "bv").row(0) += dv.colwise().sum();
        MatrixX<Scalar> dn1;
        dn1.noalias() = dq * st.t(p + "wq").transpose();
        dn1.noalias() += dk * st.t(p + "wk").transpose();
        dn1.noalias() += dv * st.t(p + "wv").transpose();
        MatrixX<Scalar> dx_in =
            nn::layernorm_backward(dn1, lc.ln1, st.t(p + "ln1.g"), g(p + "ln1.g"), g(p + "ln1.b"));
        dx = dx_mid + dx_in;
    }

    auto& dtok = g("tok_emb");
    auto& dpos = g("pos_emb");
    for (Eigen::Index i = 0; i < L; ++i) {
        dtok.row(ids[size_t(i)]) += dx.row(i);
        dpos.row(i) += dx.row(i);
    }
}

// Mean cross-entropy over the loss-enabled next-token positions of a batch.
template <class Scalar>
double batch_loss(const ModelState<Scalar>& st, const std::vector<const TaskSample*>& batch) {
    require(!batch.empty(), "loss: empty batch");
    double loss_sum = 0.0;
    int64_t enabled = 0;
    for (const auto* s : batch) {
        auto logits = forward(st, std::span<const TokenId>(s->tokens));
        auto [ls, en] = next_token_loss(logits, std::span<const TokenId>(s->tokens),
                                        std::span<const uint8_t>(s->loss_mask));
        loss_sum += ls;
        enabled += en;
    }
    require(enabled > 0, "loss: batch has no loss-enabled positions");
    return loss_sum / double(enabled);
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct StageTrainConfig {
    int stage = 1;
    double lr_peak = 7e-5;
    double warmup_frac = 0.03;
    int epochs = 1;
    int batch_effective = 256;
    int micro_batch = 8;
    size_t max_len = 1024;
    double clip_norm = 1.0;
    bool train_embeddings_only = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.01;
    double cosine_floor_ratio = 0.1;
    bool shuffle = true;

    static StageTrainConfig defaults_for_stage(int stage) {
        StageTrainConfig c;
        c.stage = stage;
        switch (stage) {
            case 1:
                c.lr_peak = 7e-5;
                c.warmup_frac = 0.03;
                c.epochs = 1;
                c.batch_effective = 256;
                c.max_len = 1024;
                c.train_embeddings_only = true;
                break;
            case 2:
                c.lr_peak = 4e-5;
                c.warmup_frac = 0.10;
                c.epochs = 2;
                c.batch_effective = 512;
                c.max_len = 1024;
                break;
            case 3:
                c.lr_peak = 1e-5;
                c.warmup_frac = 0.10;
                c.epochs = 1;
                c.batch_effective = 512;
                c.max_len = 2048;
                break;
            default:
                fail("unknown curriculum stage");
        }
        return c;
    }
};

// Linear warmup to the peak, then cosine decay to a floor at 10% of peak.
inline double lr_at(int64_t step, int64_t total_steps, const StageTrainConfig& cfg) {
    require(step >= 0 && step <= total_steps, "lr_at: step out of range");
    require(total_steps >= 1, "lr_at: empty schedule");
    const int64_t warmup = int64_t(std::llround(cfg.warmup_frac * double(total_steps)));
    if (warmup > 0 && step < warmup) return cfg.lr_peak * double(step) / double(warmup);
    const double floor = cfg.cosine_floor_ratio * cfg.lr_peak;
    if (total_steps == warmup) return cfg.lr_peak;
    const double t = double(step - warmup) / double(total_steps - warmup);
    const double pi = 3.14159265358979323846;
    return floor + (cfg.lr_peak - floor) * 0.5 * (1.0 + std::cos(pi * t));
}

// Scales all gradients so their global L2 norm does not exceed max_norm.
// Returns the pre-clip norm.
template <class Scalar>
double clip_gradients(std::vector<MatrixX<Scalar>*> grads, double max_norm = 1.0) {
    double sq = 0.0;
    for (const auto* gm : grads) {
        for (Eigen::Index i = 0; i < gm->size(); ++i) {
            const double v = double(gm->data()[i]);
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    require(std::isfinite(norm), "clip_gradients: non-finite gradients");
    if (norm > max_norm && norm > 0.0) {
        const Scalar s = Scalar(max_norm / norm);
        for (auto* gm : grads) (*gm) *= s;
    }
    return norm;
}

template <class Scalar>
class AdamW {
public:
    AdamW(const ModelState<Scalar>& st, const StageTrainConfig& cfg) : cfg_(cfg) {
        for (const auto& t : st.tensors) {
            m_.push_back(MatrixX<Scalar>::Zero(t.value.rows(), t.value.cols()));
            v_.push_back(MatrixX<Scalar>::Zero(t.value.rows(), t.value.cols()));
        }
    }

    void step(ModelState<Scalar>& st, const GradStore<Scalar>& gs,
              const std::vector<size_t>& trainable, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (size_t i : trainable) {
            auto& p = st.tensors[i].value;
            const auto& grad = gs.grads[i];
            auto& m = m_[i];
            auto& v = v_[i];
            // Decoupled weight decay on matrix parameters; vectors (biases,
            // norm gains) are left undecayed.
            const bool decay = p.rows() > 1 && p.cols() > 1;
            for (Eigen::Index e = 0; e < p.size(); ++e) {
                const double gd = double(grad.data()[e]);
                const double md = cfg_.beta1 * double(m.data()[e]) + (1.0 - cfg_.beta1) * gd;
                const double vd = cfg_.beta2 * double(v.data()[e]) + (1.0 - cfg_.beta2) * gd * gd;
                m.data()[e] = Scalar(md);
                v.data()[e] = Scalar(vd);
                double upd = (md / bc1) / (std::sqrt(vd / bc2) + cfg_.adam_eps);
                if (decay) upd += cfg_.weight_decay * double(p.data()[e]);
                p.data()[e] = Scalar(double(p.data()[e]) - lr * upd);
            }
        }
    }

private:
    StageTrainConfig cfg_;
    std::vector<MatrixX<Scalar>> m_, v_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Stage trainer
// ---------------------------------------------------------------------------

struct StepMetric {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct TrainMetrics {
    std::vector<StepMetric> steps;
    double final_loss = 0.0;

    void save_csv(const std::string& path) const {
        std::ofstream f(path);
        require(f.good(), "cannot open metrics file: " + path);
        f << "step,loss,lr,grad_norm\n";
        for (const auto& s : steps)
            f << s.step << "," << s.loss << "," << s.lr << "," << s.grad_norm << "\n";
    }
};

template <class Scalar>
TrainMetrics train_stage(ModelState<Scalar>& st, const StageDataset& dataset,
                         const StageTrainConfig& cfg, Rng& rng) {
    require(dataset.stage == cfg.stage, "train_stage: dataset/config stage mismatch");
    require(!dataset.samples.empty(), "train_stage: empty dataset");
    for (const auto& s : dataset.samples)
        require(s.tokens.size() <= cfg.max_len, "train_stage: sample exceeds stage max length");

    const auto trainable = st.trainable_indices(cfg.train_embeddings_only);
    AdamW<Scalar> opt(st, cfg);
    TrainMetrics metrics;

    // Samples are grouped by sub-phase; shuffling happens within a phase so
    // the stage-1 speech-then-phonemes schedule is preserved.
    std::map<int, std::vector<size_t>> phases;
    for (size_t i = 0; i < dataset.samples.size(); ++i)
        phases[dataset.samples[i].meta.phase].push_back(i);

    const int64_t n = int64_t(dataset.samples.size());
    const int64_t total_steps =
        std::max<int64_t>(1, (n * cfg.epochs + cfg.batch_effective - 1) / cfg.batch_effective);

    GradStore<Scalar> accum(st);
    std::vector<const TaskSample*> pending;  // samples in the current effective batch
    double loss_sum = 0.0;
    int64_t enabled_sum = 0;
    int64_t step_idx = 0;

    auto flush_step = [&]() {
        if (pending.empty()) return;
        require(enabled_sum > 0, "train_stage: batch has no loss-enabled positions");
        const Scalar inv = Scalar(1.0 / double(enabled_sum));
        std::vector<MatrixX<Scalar>*> gptrs;
        for (size_t i : trainable) {
            accum.grads[i] *= inv;
            gptrs.push_back(&accum.grads[i]);
        }
        const double gnorm = clip_gradients(gptrs, cfg.clip_norm);
        const double lr = lr_at(step_idx, total_steps, cfg);
        opt.step(st, accum, trainable, lr);
        const double mean_loss = loss_sum / double(enabled_sum);
        if (!std::isfinite(mean_loss)) {
            std::string ids;
            for (const auto* s : pending) ids += std::to_string(s->meta.sentence_id) + " ";
            fail("train_stage: non-finite loss at step " + std::to_string(step_idx) +
                 " (sentence ids: " + ids + ")");
        }
        metrics.steps.push_back({step_idx, mean_loss, lr, gnorm});
        metrics.final_loss = mean_loss;
        ++step_idx;
        st.trained_steps++;
        accum.zero();
        pending.clear();
        loss_sum = 0.0;
        enabled_sum = 0;
    };

    const unsigned workers = worker_count();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<size_t> order;
        for (auto& [phase, idxs] : phases) {
            auto copy = idxs;
            if (cfg.shuffle) rng.shuffle(copy);
            order.insert(order.end(), copy.begin(), copy.end());
        }
        for (size_t at = 0; at < order.size();) {
            const size_t micro_base = at;
            const size_t take = std::min<size_t>(cfg.micro_batch, order.size() - at);
            std::vector<const TaskSample*> micro;
            for (size_t i = 0; i < take; ++i) micro.push_back(&dataset.samples[order[at + i]]);
            at += take;

            std::vector<GradStore<Scalar>> partials(std::min<size_t>(workers, take),
                                                    GradStore<Scalar>(st));
            std::vector<double> losses(partials.size(), 0.0);
            std::vector<int64_t> counts(partials.size(), 0);
            const uint64_t dropout_base = mix_seed(rng.seed(), "dropout");
            parallel_chunks(take, [&](size_t lo, size_t hi, unsigned w) {
                for (size_t i = lo; i < hi; ++i) {
                    const auto* s = micro[i];
                    ForwardCache<Scalar> fc;
                    Rng drop(
                        mix_seed(dropout_base, (uint64_t(epoch) << 40) ^ uint64_t(micro_base + i)));
                    Rng* drop_ptr = st.cfg.dropout > 0.0 ? &drop : nullptr;
                    auto logits = forward(st, std::span<const TokenId>(s->tokens), &fc, drop_ptr);
                    MatrixX<Scalar> dlogits;
                    auto [ls, en] =
                        next_token_loss(logits, std::span<const TokenId>(s->tokens),
                                        std::span<const uint8_t>(s->loss_mask), &dlogits);
                    if (en > 0) backward(st, std::span<const TokenId>(s->tokens), fc, dlogits,
                                         partials[w]);
                    losses[w] += ls;
                    counts[w] += en;
                }
            });
            for (size_t w = 0; w < partials.size(); ++w) {
                accum.add(partials[w]);
                loss_sum += losses[w];
                enabled_sum += counts[w];
            }
            pending.insert(pending.end(), micro.begin(), micro.end());
            if (int(pending.size()) >= cfg.batch_effective) flush_step();
        }
    }
    flush_step();
    require(st.all_finite(), "train_stage: non-finite parameters after training");
    return metrics;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "PCMS", u32 version, u64 config digest, config fields,
// then named tensor records (u32 name length, name, u32 rank, dims,
// little-endian f32 data).
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_u64(std::ostream& os, uint64_t v) {
    write_u32(os, uint32_t(v));
    write_u32(os, uint32_t(v >> 32));
}

inline uint64_t read_u64(std::istream& is) {
    const uint64_t lo = read_u32(is);
    const uint64_t hi = read_u32(is);
    return lo | (hi << 32);
}

}  // namespace detail

template <class Scalar>
void save_checkpoint(const ModelState<Scalar>& st, const std::string& path,
                     uint64_t config_digest) {
    std::ofstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint for writing: " + path);
    f.write("PCMS", 4);
    detail::write_u32(f, kCheckpointVersion);
    detail::write_u64(f, config_digest);
    detail::write_u32(f, uint32_t(st.cfg.n_layers));
    detail::write_u32(f, uint32_t(st.cfg.n_heads));
    detail::write_u32(f, uint32_t(st.cfg.dim));
    detail::write_u32(f, uint32_t(st.cfg.ffn_mult));
    detail::write_u32(f, uint32_t(st.cfg.max_len));
    detail::write_u64(f, st.cfg.seed);
    detail::write_u64(f, uint64_t(st.cfg.vocab_size));
    detail::write_u64(f, uint64_t(st.trained_steps));
    detail::write_u32(f, uint32_t(st.tensors.size()));
    for (const auto& t : st.tensors) {
        detail::write_u32(f, uint32_t(t.name.size()));
        f.write(t.name.data(), long(t.name.size()));
        detail::write_u32(f, 2);
        detail::write_u32(f, uint32_t(t.value.rows()));
        detail::write_u32(f, uint32_t(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.size(); ++i)
            detail::write_f32(f, float(t.value.data()[i]));
    }
    require(f.good(), "failed writing checkpoint: " + path);
}

struct CheckpointInfo {
    uint64_t config_digest = 0;
};

template <class Scalar = float>
ModelState<Scalar> load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), "cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    require(bool(f) && std::string_view(magic, 4) == "PCMS", "bad checkpoint magic: " + path);
    require(detail::read_u32(f) == kCheckpointVersion, "unsupported checkpoint version");
    const uint64_t digest = detail::read_u64(f);
    if (info) info->config_digest = digest;
    ModelState<Scalar> st;
    st.cfg.n_layers = int(detail::read_u32(f));
    st.cfg.n_heads = int(detail::read_u32(f));
    st.cfg.dim = int(detail::read_u32(f));
    st.cfg.ffn_mult = int(detail::read_u32(f));
    st.cfg.max_len = int(detail::read_u32(f));
    st.cfg.seed = detail::read_u64(f);
    st.cfg.vocab_size = size_t(detail::read_u64(f));
    st.trained_steps = int64_t(detail::read_u64(f));
    const uint32_t count = detail::read_u32(f);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = detail::read_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), long(name_len));
        require(detail::read_u32(f) == 2, "checkpoint: unsupported tensor rank");
        const uint32_t rows = detail::read_u32(f);
        const uint32_t cols = detail::read_u32(f);
        MatrixX<Scalar> m{Eigen::Index(rows), Eigen::Index(cols)};
        for (Eigen::Index e = 0; e < m.size(); ++e) m.data()[e] = Scalar(detail::read_f32(f));
        st.tensors.push_back({std::move(name), std::move(m)});
    }
    st.rebuild_index();
    return st;
}

}  // namespace phonecot
