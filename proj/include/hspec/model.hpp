#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hspec/checkpoint.hpp"
#include "hspec/config.hpp"
#include "hspec/nn.hpp"
#include "hspec/optim.hpp"
#include "hspec/topology.hpp"

namespace hspec {

// Raw-float row helpers for the inference path. The math mirrors the
// autodiff ops exactly (same eps, same summation order) so incremental
// logits line up with forward_train.
namespace raw {

template <typename T>
void layer_norm_rows(const T* x, T* y, int rows, int d, const T* g, const T* b,
                     T eps = T(1e-5)) {
    for (int r = 0; r < rows; ++r) {
        const T* xr = x + size_t(r) * d;
        T mu = 0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        T* yr = y + size_t(r) * d;
        for (int j = 0; j < d; ++j) yr[j] = g[j] * (xr[j] - mu) * rs + b[j];
    }
}

template <typename T>
void silu_inplace(T* x, size_t n) {
    for (size_t i = 0; i < n; ++i) x[i] = x[i] / (T(1) + std::exp(-x[i]));
}

// In-place temperature softmax, max-subtracted.
template <typename T>
void softmax_row(T* x, int d, T temperature = T(1)) {
    T mx = x[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    if (!std::isfinite(double(mx))) throw NumericError("softmax_row: non-finite input");
    double sum = 0;  // wide accumulation keeps rows summing to 1 tightly
    for (int j = 0; j < d; ++j) {
        x[j] = std::exp((x[j] - mx) / temperature);
        sum += double(x[j]);
    }
    const T inv = T(1.0 / sum);
    for (int j = 0; j < d; ++j) x[j] *= inv;
}

// Ties broken by ascending token id (strict > keeps the first maximum).
template <typename T>
int argmax_row(const T* x, int d) {
    int best = 0;
    for (int j = 1; j < d; ++j)
        if (x[j] > x[best]) best = j;
    return best;
}

}  // namespace raw

// Per-sequence packed-tree attention mask. Column space equals the KV slot
// space of the packed forward: committed slots [0, prefix_len) followed by
// the n_nodes tree slots. positions[] are absolute position-embedding
// indices (siblings share one).
struct TreeMask {
    int n_nodes = 0;
    int prefix_len = 0;
    std::vector<uint8_t> allow;  // [n_nodes x (prefix_len + n_nodes)]
    std::vector<int> positions;  // [n_nodes]

    int width() const { return prefix_len + n_nodes; }
};

inline std::vector<TreeMask> build_tree_mask(const TreeTopology& topo, int prefix_len,
                                             int batch = 1) {
    topo.validate();
    if (prefix_len < 1) throw InputError("build_tree_mask: prefix_len must be >= 1");
    TreeMask m;
    m.n_nodes = topo.size();
    m.prefix_len = prefix_len;
    const int w = m.width();
    m.allow.assign(size_t(m.n_nodes) * w, 0);
    m.positions.resize(size_t(m.n_nodes));
    for (int i = 0; i < m.n_nodes; ++i) {
        uint8_t* row = m.allow.data() + size_t(i) * w;
        for (int c = 0; c < prefix_len; ++c) row[c] = 1;
        for (int cur = i; cur != -1; cur = topo.nodes[size_t(cur)].parent)
            row[prefix_len + cur] = 1;  // ancestors + self
        m.positions[size_t(i)] = prefix_len + topo.depth_of(i) - 1;
    }
    return std::vector<TreeMask>(size_t(batch), m);
}

// Per-layer key/value buffers plus per-sequence committed length. Rows for
// a forward_cached call land in the scratch slots [len, len + T_new); commit
// compacts the kept rows and advances len — nothing speculative survives.
template <typename T>
struct KVCache {
    int batch = 0, max_len = 0, d = 0, n_layers = 0;
    std::vector<std::vector<T>> k, v;  // per layer: [batch * max_len * d]
    std::vector<int> len;              // per sequence

    KVCache() = default;
    KVCache(int batch_, int max_len_, int d_, int n_layers_)
        : batch(batch_), max_len(max_len_), d(d_), n_layers(n_layers_) {
        k.assign(size_t(n_layers), std::vector<T>(size_t(batch) * max_len * d, T(0)));
        v.assign(size_t(n_layers), std::vector<T>(size_t(batch) * max_len * d, T(0)));
        len.assign(size_t(batch), 0);
    }

    // kept_rows: ascending row indices within the new block to keep, in
    // commit order. Ascending guarantees src >= dst so in-place copy is safe.
    void commit(int s, const std::vector<int>& kept_rows) {
        for (size_t i = 1; i < kept_rows.size(); ++i)
            if (kept_rows[i] <= kept_rows[i - 1])
                throw StateError("kv commit: kept rows must be ascending");
        for (size_t i = 0; i < kept_rows.size(); ++i) {
            const int src = len[size_t(s)] + kept_rows[i];
            const int dst = len[size_t(s)] + int(i);
            if (src == dst) continue;
            for (int l = 0; l < n_layers; ++l) {
                T* kb = k[size_t(l)].data() + (size_t(s) * max_len) * d;
                T* vb = v[size_t(l)].data() + (size_t(s) * max_len) * d;
                std::copy(kb + size_t(src) * d, kb + size_t(src) * d + d, kb + size_t(dst) * d);
                std::copy(vb + size_t(src) * d, vb + size_t(src) * d + d, vb + size_t(dst) * d);
            }
        }
        len[size_t(s)] += int(kept_rows.size());
        if (len[size_t(s)] > max_len) throw StateError("kv commit: overflow");
    }
};

template <typename T>
struct TransformerLayer {
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> wq, wk, wv, wo;  // [d x d], y = x W^T
    Tensor<T> ln2_g, ln2_b;
    Tensor<T> w1, w2;  // [d_ff x d], [d x d_ff]
};

// Byte-level decoder-only transformer: pre-norm blocks, learned absolute
// positions, weight-tied LM head. hidden() is post-final-LN so a
// zero-residual draft head on top of it reproduces the base logits.
template <typename T>
class Model {
  public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(cfg_.rng_seed);
        const int d = cfg_.d_model;
        const T sd = T(0.02);
        const T sd_out = T(0.02) / std::sqrt(T(2 * cfg_.n_layers));
        tok_emb_ = Tensor<T>::randn({cfg_.vocab_size, d}, rng, sd);
        pos_emb_ = Tensor<T>::randn({cfg_.max_seq_len, d}, rng, sd);
        for (int l = 0; l < cfg_.n_layers; ++l) {
            TransformerLayer<T> layer;
            layer.ln1_g = Tensor<T>::full({d}, T(1));
            layer.ln1_b = Tensor<T>::full({d}, T(0));
            layer.wq = Tensor<T>::randn({d, d}, rng, sd);
            layer.wk = Tensor<T>::randn({d, d}, rng, sd);
            layer.wv = Tensor<T>::randn({d, d}, rng, sd);
            layer.wo = Tensor<T>::randn({d, d}, rng, sd_out);
            layer.ln2_g = Tensor<T>::full({d}, T(1));
            layer.ln2_b = Tensor<T>::full({d}, T(0));
            layer.w1 = Tensor<T>::randn({cfg_.d_ff, d}, rng, sd);
            layer.w2 = Tensor<T>::randn({d, cfg_.d_ff}, rng, sd_out);
            layers_.push_back(std::move(layer));
        }
        lnf_g_ = Tensor<T>::full({d}, T(1));
        lnf_b_ = Tensor<T>::full({d}, T(0));
    }

    const ModelConfig& config() const { return cfg_; }
    const Tensor<T>& tok_emb() const { return tok_emb_; }
    Tensor<T>& tok_emb() { return tok_emb_; }
    long forward_cached_calls() const { return forward_cached_calls_; }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("tok_emb", &tok_emb_);
        out.emplace_back("pos_emb", &pos_emb_);
        for (size_t l = 0; l < layers_.size(); ++l) {
            auto& L = layers_[l];
            const std::string p = "layers." + std::to_string(l) + ".";
            out.emplace_back(p + "ln1.g", &L.ln1_g);
            out.emplace_back(p + "ln1.b", &L.ln1_b);
            out.emplace_back(p + "attn.wq", &L.wq);
            out.emplace_back(p + "attn.wk", &L.wk);
            out.emplace_back(p + "attn.wv", &L.wv);
            out.emplace_back(p + "attn.wo", &L.wo);
            out.emplace_back(p + "ln2.g", &L.ln2_g);
            out.emplace_back(p + "ln2.b", &L.ln2_b);
            out.emplace_back(p + "ffn.w1", &L.w1);
            out.emplace_back(p + "ffn.w2", &L.w2);
        }
        out.emplace_back("final_ln.g", &lnf_g_);
        out.emplace_back("final_ln.b", &lnf_b_);
        return out;
    }

    // ---- training path (autodiff graph) ------------------------------

    struct TrainOut {
        Tensor<T> logits;  // [B*L x V]
        Tensor<T> hidden;  // [B*L x d], post final layer norm
    };

    // tokens: B*L ids, row-major.
    TrainOut forward_train(const std::vector<int>& tokens, int B, int L) {
        if (int(tokens.size()) != B * L) throw ShapeError("forward_train: token count mismatch");
        if (L > cfg_.max_seq_len) throw InputError("forward_train: sequence too long");
        std::vector<int> pos(size_t(B) * L);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < L; ++t) pos[size_t(b) * L + t] = t;
        for (int id : tokens)
            if (id < 0 || id >= cfg_.vocab_size) throw InputError("forward_train: token out of range");
        Tensor<T> x = add(gather_rows(tok_emb_, tokens), gather_rows(pos_emb_, pos));
        for (auto& L_ : layers_) {
            Tensor<T> a = layer_norm(x, L_.ln1_g, L_.ln1_b);
            Tensor<T> att = causal_attention(linear(a, L_.wq), linear(a, L_.wk),
                                             linear(a, L_.wv), B, cfg_.n_heads);
            x = add(x, linear(att, L_.wo));
            Tensor<T> f = layer_norm(x, L_.ln2_g, L_.ln2_b);
            x = add(x, linear(silu(linear(f, L_.w1)), L_.w2));
        }
        Tensor<T> hid = layer_norm(x, lnf_g_, lnf_b_);
        Tensor<T> logits = linear(hid, tok_emb_);
        return {logits, hid};
    }

    // ---- inference path (raw floats, KV cache, optional tree mask) ----

    struct CachedOut {
        std::vector<T> logits;  // [B*T_new x V]
        std::vector<T> hidden;  // [B*T_new x d]
    };

    KVCache<T> make_cache(int batch) const {
        return KVCache<T>(batch, cfg_.max_seq_len, cfg_.d_model, cfg_.n_layers);
    }

    // With no mask: ordinary incremental causal decoding, positions
    // len..len+T_new-1 per sequence. With masks (one per sequence): the
    // trailing masks[s].n_nodes rows are packed tree tokens attending per
    // the mask; leading rows (T_new - n_nodes) are plain causal rows. KV
    // rows land in scratch slots [len, len+T_new); caller commits/discards.
    CachedOut forward_cached(const std::vector<int>& tokens, int B, int T_new, KVCache<T>& cache,
                             const std::vector<TreeMask>* masks = nullptr) {
        ++forward_cached_calls_;
        const int d = cfg_.d_model, H = cfg_.n_heads, hd = d / H, V = cfg_.vocab_size;
        if (B != cache.batch) throw ShapeError("forward_cached: batch mismatch with cache");
        if (int(tokens.size()) != B * T_new) throw ShapeError("forward_cached: token count mismatch");
        if (masks) {
            if (int(masks->size()) != B) throw ShapeError("forward_cached: one mask per sequence");
            for (int s = 0; s < B; ++s) {
                const auto& m = (*masks)[size_t(s)];
                const int lead = T_new - m.n_nodes;
                if (lead < 0 || m.prefix_len != cache.len[size_t(s)] + lead)
                    throw ShapeError("forward_cached: mask shape inconsistent with T_new");
                if (int(m.allow.size()) != m.n_nodes * m.width())
                    throw ShapeError("forward_cached: malformed mask");
            }
        }
        for (int s = 0; s < B; ++s)
            if (cache.len[size_t(s)] + T_new > cfg_.max_seq_len)
                throw InputError("forward_cached: context overflow");
        for (int id : tokens)
            if (id < 0 || id >= V) throw InputError("forward_cached: token out of range");

        const int rows = B * T_new;
        // Position index per row.
        std::vector<int> pos(static_cast<size_t>(rows));
        for (int s = 0; s < B; ++s) {
            const int lead = masks ? T_new - (*masks)[size_t(s)].n_nodes : T_new;
            for (int r = 0; r < T_new; ++r)
                pos[size_t(s) * T_new + r] = r < lead
                                                 ? cache.len[size_t(s)] + r
                                                 : (*masks)[size_t(s)].positions[size_t(r - lead)];
        }

        std::vector<T> x(size_t(rows) * d);
        for (int i = 0; i < rows; ++i) {
            const T* te = tok_emb_.ptr() + size_t(tokens[size_t(i)]) * d;
            const T* pe = pos_emb_.ptr() + size_t(pos[size_t(i)]) * d;
            T* xr = x.data() + size_t(i) * d;
            for (int j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
        }

        std::vector<T> a(size_t(rows) * d), q(size_t(rows) * d), att(size_t(rows) * d);
        std::vector<T> ff(size_t(rows) * cfg_.d_ff);
        std::vector<T> scores(static_cast<size_t>(cfg_.max_seq_len));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            auto& L_ = layers_[size_t(l)];
            raw::layer_norm_rows(x.data(), a.data(), rows, d, L_.ln1_g.ptr(), L_.ln1_b.ptr());
            kern::gemm_nt(a.data(), L_.wq.ptr(), q.data(), rows, d, d);
            // K/V go straight into scratch slots.
            for (int s = 0; s < B; ++s) {
                T* kb = cache.k[size_t(l)].data() + (size_t(s) * cache.max_len) * d;
                T* vb = cache.v[size_t(l)].data() + (size_t(s) * cache.max_len) * d;
                kern::gemm_nt(a.data() + size_t(s) * T_new * d, L_.wk.ptr(),
                              kb + size_t(cache.len[size_t(s)]) * d, T_new, d, d);
                kern::gemm_nt(a.data() + size_t(s) * T_new * d, L_.wv.ptr(),
                              vb + size_t(cache.len[size_t(s)]) * d, T_new, d, d);
            }
            // Attention per sequence row over allowed KV slots, ascending.
            // Every row sees a contiguous allowed span first — [0, len+r] for
            // lead rows, the whole committed prefix for tree rows — so that
            // part runs four slots per call; only the tree tail of masked
            // rows consults the bitmap.
            const T scl = T(1) / std::sqrt(T(hd));
            for (int s = 0; s < B; ++s) {
                const int len = cache.len[size_t(s)];
                const TreeMask* m = masks ? &(*masks)[size_t(s)] : nullptr;
                const int lead = m ? T_new - m->n_nodes : T_new;
                const int total = len + T_new;
                const T* kb = cache.k[size_t(l)].data() + (size_t(s) * cache.max_len) * d;
                const T* vb = cache.v[size_t(l)].data() + (size_t(s) * cache.max_len) * d;
                for (int r = 0; r < T_new; ++r) {
                    const int row = s * T_new + r;
                    T* orow = att.data() + size_t(row) * d;
                    std::fill(orow, orow + d, T(0));
                    const int contig = r < lead ? len + r + 1 : m->prefix_len;
                    const uint8_t* arow =
                        r < lead ? nullptr : m->allow.data() + size_t(r - lead) * m->width();
                    for (int h = 0; h < H; ++h) {
                        const T* qh = q.data() + size_t(row) * d + size_t(h) * hd;
                        const size_t off = size_t(h) * hd;
                        int nctx = 0, c = 0;
                        for (; c + 4 <= contig; c += 4, nctx += 4)
                            kern::dot4(qh, kb + size_t(c) * d + off, kb + size_t(c + 1) * d + off,
                                       kb + size_t(c + 2) * d + off, kb + size_t(c + 3) * d + off,
                                       hd, scores.data() + nctx);
                        for (; c < contig; ++c)
                            scores[size_t(nctx++)] = kern::dot(qh, kb + size_t(c) * d + off, hd);
                        if (arow)
                            for (c = contig; c < total; ++c)
                                if (arow[c])
                                    scores[size_t(nctx++)] =
                                        kern::dot(qh, kb + size_t(c) * d + off, hd);
                        T mx = -std::numeric_limits<T>::infinity();
                        for (int i = 0; i < nctx; ++i) {
                            scores[size_t(i)] *= scl;
                            mx = std::max(mx, scores[size_t(i)]);
                        }
                        T sum = 0;
                        for (int i = 0; i < nctx; ++i) {
                            scores[size_t(i)] = std::exp(scores[size_t(i)] - mx);
                            sum += scores[size_t(i)];
                        }
                        const T inv = T(1) / sum;
                        T* oh = orow + off;
                        int ci = 0;
                        c = 0;
                        for (; c + 4 <= contig; c += 4, ci += 4)
                            kern::axpy4(scores[size_t(ci)] * inv, vb + size_t(c) * d + off,
                                        scores[size_t(ci + 1)] * inv, vb + size_t(c + 1) * d + off,
                                        scores[size_t(ci + 2)] * inv, vb + size_t(c + 2) * d + off,
                                        scores[size_t(ci + 3)] * inv, vb + size_t(c + 3) * d + off,
                                        oh, hd);
                        for (; c < contig; ++c)
                            kern::axpy(scores[size_t(ci++)] * inv, vb + size_t(c) * d + off, oh, hd);
                        if (arow)
                            for (c = contig; c < total; ++c)
                                if (arow[c])
                                    kern::axpy(scores[size_t(ci++)] * inv, vb + size_t(c) * d + off,
                                               oh, hd);
                    }
                }
            }
            kern::gemm_nt(att.data(), L_.wo.ptr(), x.data(), rows, d, d, /*accumulate=*/true);
            raw::layer_norm_rows(x.data(), a.data(), rows, d, L_.ln2_g.ptr(), L_.ln2_b.ptr());
            kern::gemm_nt(a.data(), L_.w1.ptr(), ff.data(), rows, cfg_.d_ff, d);
            raw::silu_inplace(ff.data(), size_t(rows) * cfg_.d_ff);
            kern::gemm_nt(ff.data(), L_.w2.ptr(), x.data(), rows, d, cfg_.d_ff, /*accumulate=*/true);
        }
        CachedOut out;
        out.hidden.resize(size_t(rows) * d);
        raw::layer_norm_rows(x.data(), out.hidden.data(), rows, d, lnf_g_.ptr(), lnf_b_.ptr());
        out.logits.resize(size_t(rows) * V);
        kern::gemm_nt(out.hidden.data(), tok_emb_.ptr(), out.logits.data(), rows, V, d);
        return out;
    }

    // ---- checkpoint I/O ------------------------------------------------

    void save(const std::string& path) {
        nlohmann::json meta;
        to_json(meta, cfg_);
        std::vector<ckpt::NamedTensor> ts;
        for (auto& [name, t] : named_parameters()) {
            ckpt::NamedTensor nt;
            nt.name = name;
            nt.shape = t->shape();
            nt.data.assign(t->ptr(), t->ptr() + t->numel());
            ts.push_back(std::move(nt));
        }
        save_checkpoint_file(path, meta, ts);
    }

    static Model load(const std::string& path) {
        Checkpoint cp = load_checkpoint_file(path);
        ModelConfig cfg;
        from_json(cp.meta, cfg);
        Model m(cfg);
        for (auto& [name, t] : m.named_parameters()) {
            const auto& rec = cp.find(name);
            if (rec.shape != t->shape())
                throw IoError("checkpoint: shape mismatch for " + name);
            std::copy(rec.data.begin(), rec.data.end(), t->ptr());
        }
        return m;
    }

  private:
    ModelConfig cfg_;
    Tensor<T> tok_emb_, pos_emb_;
    std::vector<TransformerLayer<T>> layers_;
    Tensor<T> lnf_g_, lnf_b_;
    long forward_cached_calls_ = 0;
};

}  // namespace hspec
