#pragma once

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

#include "hspec/model.hpp"

namespace hspec {

// Per-sequence draft state between decode steps: the (possibly refined)
// hidden of the second-to-last committed token, the last committed token
// itself (not yet processed by the base), and tokens speculated so far on
// the current tree path.
template <typename T>
struct SpeculationState {
    std::vector<T> refined_hidden;  // [d_model]
    int last_committed_token = 0;
    std::vector<int> path_tokens;
};

// Extra decoder layer atop the frozen base (hydra_pp): consumes base
// hidden states of committed positions, returns a refined state. Residual
// branches start at zero so the layer is the identity before training.
template <typename T>
class PrefixAttentionLayer {
  public:
    PrefixAttentionLayer() = default;
    PrefixAttentionLayer(int d, int n_heads, int d_ff, int max_len, Rng& rng)
        : d_(d), heads_(n_heads), d_ff_(d_ff), max_len_(max_len) {
        const T sd = T(0.02);
        L_.ln1_g = Tensor<T>::full({d}, T(1));
        L_.ln1_b = Tensor<T>::full({d}, T(0));
        L_.wq = Tensor<T>::randn({d, d}, rng, sd);
        L_.wk = Tensor<T>::randn({d, d}, rng, sd);
        L_.wv = Tensor<T>::randn({d, d}, rng, sd);
        L_.wo = Tensor<T>::full({d, d}, T(0));
        L_.ln2_g = Tensor<T>::full({d}, T(1));
        L_.ln2_b = Tensor<T>::full({d}, T(0));
        L_.w1 = Tensor<T>::randn({d_ff, d}, rng, sd);
        L_.w2 = Tensor<T>::full({d, d_ff}, T(0));
    }

    // Teacher-forced full-sequence application (training).
    Tensor<T> forward_train(const Tensor<T>& h, int B, int L) {
        Tensor<T> x = h;
        Tensor<T> a = layer_norm(x, L_.ln1_g, L_.ln1_b);
        Tensor<T> att =
            causal_attention(linear(a, L_.wq), linear(a, L_.wk), linear(a, L_.wv), B, heads_);
        x = add(x, linear(att, L_.wo));
        Tensor<T> f = layer_norm(x, L_.ln2_g, L_.ln2_b);
        x = add(x, linear(silu(linear(f, L_.w1)), L_.w2));
        return x;
    }

    void reset_cache(int batch) {
        cache_ = KVCache<T>(batch, max_len_, d_, 1);
        calls_ = 0;
    }
    int cache_len(int s) const { return cache_.len[size_t(s)]; }
    long call_count() const { return calls_; }

    // Append n_rows committed base hiddens for sequence s; returns refined
    // rows. One call per sequence per decode step.
    std::vector<T> forward_cached_seq(int s, const T* h_rows, int n_rows) {
        ++calls_;
        const int d = d_, H = heads_, hd = d / H;
        const int len = cache_.len[size_t(s)];
        if (len + n_rows > max_len_) throw InputError("prefix attention: cache overflow");
        std::vector<T> x(h_rows, h_rows + size_t(n_rows) * d);
        std::vector<T> a(size_t(n_rows) * d), q(size_t(n_rows) * d), att(size_t(n_rows) * d, T(0));
        raw::layer_norm_rows(x.data(), a.data(), n_rows, d, L_.ln1_g.ptr(), L_.ln1_b.ptr());
        kern::gemm_nt(a.data(), L_.wq.ptr(), q.data(), n_rows, d, d);
        T* kb = cache_.k[0].data() + (size_t(s) * max_len_) * d;
        T* vb = cache_.v[0].data() + (size_t(s) * max_len_) * d;
        kern::gemm_nt(a.data(), L_.wk.ptr(), kb + size_t(len) * d, n_rows, d, d);
        kern::gemm_nt(a.data(), L_.wv.ptr(), vb + size_t(len) * d, n_rows, d, d);
        const T scl = T(1) / std::sqrt(T(hd));
        std::vector<T> scores(static_cast<size_t>(len + n_rows));
        for (int r = 0; r < n_rows; ++r) {
            const int span = len + r + 1;  // causal bound, self inclusive
            for (int h = 0; h < H; ++h) {
                const T* qh = q.data() + size_t(r) * d + size_t(h) * hd;
                const size_t off = size_t(h) * hd;
                int c = 0;
                for (; c + 4 <= span; c += 4)
                    kern::dot4(qh, kb + size_t(c) * d + off, kb + size_t(c + 1) * d + off,
                               kb + size_t(c + 2) * d + off, kb + size_t(c + 3) * d + off, hd,
                               scores.data() + c);
                for (; c < span; ++c)
                    scores[size_t(c)] = kern::dot(qh, kb + size_t(c) * d + off, hd);
                T mx = -std::numeric_limits<T>::infinity();
                for (int i = 0; i < span; ++i) {
                    scores[size_t(i)] *= scl;
                    mx = std::max(mx, scores[size_t(i)]);
                }
                T sum = 0;
                for (int i = 0; i < span; ++i) {
                    scores[size_t(i)] = std::exp(scores[size_t(i)] - mx);
                    sum += scores[size_t(i)];
                }
                const T inv = T(1) / sum;
                T* oh = att.data() + size_t(r) * d + size_t(h) * hd;
                c = 0;
                for (; c + 4 <= span; c += 4)
                    kern::axpy4(scores[size_t(c)] * inv, vb + size_t(c) * d + off,
                                scores[size_t(c + 1)] * inv, vb + size_t(c + 1) * d + off,
                                scores[size_t(c + 2)] * inv, vb + size_t(c + 2) * d + off,
                                scores[size_t(c + 3)] * inv, vb + size_t(c + 3) * d + off, oh, hd);
                for (; c < span; ++c)
                    kern::axpy(scores[size_t(c)] * inv, vb + size_t(c) * d + off, oh, hd);
            }
        }
        kern::gemm_nt(att.data(), L_.wo.ptr(), x.data(), n_rows, d, d, true);
        raw::layer_norm_rows(x.data(), a.data(), n_rows, d, L_.ln2_g.ptr(), L_.ln2_b.ptr());
        std::vector<T> ff(size_t(n_rows) * d_ff_);
        kern::gemm_nt(a.data(), L_.w1.ptr(), ff.data(), n_rows, d_ff_, d);
        raw::silu_inplace(ff.data(), ff.size());
        kern::gemm_nt(ff.data(), L_.w2.ptr(), x.data(), n_rows, d, d_ff_, true);
        cache_.len[size_t(s)] += n_rows;
        return x;
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters(const std::string& prefix) {
        return {{prefix + "ln1.g", &L_.ln1_g}, {prefix + "ln1.b", &L_.ln1_b},
                {prefix + "attn.wq", &L_.wq},  {prefix + "attn.wk", &L_.wk},
                {prefix + "attn.wv", &L_.wv},  {prefix + "attn.wo", &L_.wo},
                {prefix + "ln2.g", &L_.ln2_g}, {prefix + "ln2.b", &L_.ln2_b},
                {prefix + "ffn.w1", &L_.w1},   {prefix + "ffn.w2", &L_.w2}};
    }

  private:
    TransformerLayer<T> L_;
    int d_ = 0, heads_ = 0, d_ff_ = 0, max_len_ = 0;
    KVCache<T> cache_;
    long calls_ = 0;
};

// The K draft heads of one mode. Head i (1-based) predicts token t+i.
//   medusa:   logits = OutProj_i(h + silu(W_i h))                  — h only
//   hydra:    logits = OutProj_i(silu(W_i concat(h, embs)) + h)    — 1 layer, residual from h
//   hydra_pp: logits = OutProj_i(silu(W_i4 ... silu(W_i1 concat))) — 4 layers, no residual
template <typename T>
class DraftHeads {
  public:
    DraftHeads(const ModelConfig& mc, const HeadsConfig& hc,
               const Tensor<T>* lm_head_init = nullptr, uint64_t seed = 7)
        : mcfg_(mc), cfg_(hc) {
        cfg_.validate();
        if (cfg_.mode != HeadMode::hydra_pp && cfg_.hidden_width != mc.d_model)
            throw ConfigError("heads: residual modes require hidden_width == d_model");
        Rng rng(seed);
        const int d = mc.d_model, V = mc.vocab_size, w = cfg_.hidden_width;
        for (int i = 1; i <= cfg_.k; ++i) {
            Head head;
            const int in_w = cfg_.head_input_width(i, d);
            if (cfg_.mode == HeadMode::hydra_pp) {
                for (int l = 0; l < cfg_.mlp_layers; ++l) {
                    const int fan_in = l == 0 ? in_w : w;
                    head.w.push_back(
                        Tensor<T>::randn({w, fan_in}, rng, std::sqrt(T(2) / T(fan_in))));
                }
            } else {
                head.w.push_back(Tensor<T>::full({w, in_w}, T(0)));
            }
            head.out_proj = (lm_head_init && lm_head_init->shape() == std::vector<int>{V, w})
                                ? Tensor<T>(lm_head_init->shape(), lm_head_init->data())
                                : Tensor<T>::full({V, w}, T(0));
            heads_.push_back(std::move(head));
        }
        if (cfg_.mode == HeadMode::hydra_pp)
            prefix_ = PrefixAttentionLayer<T>(d, mc.n_heads, mc.d_ff, mc.max_seq_len, rng);
    }

    const HeadsConfig& config() const { return cfg_; }
    const ModelConfig& model_config() const { return mcfg_; }
    bool has_prefix_layer() const { return cfg_.mode == HeadMode::hydra_pp; }
    PrefixAttentionLayer<T>& prefix_layer() {
        if (!has_prefix_layer()) throw StateError("prefix layer only exists in hydra_pp mode");
        return prefix_;
    }

    // Training rows. embs: for hydra modes, i tensors [N x d] in order
    // E[x_t], E[x_{t+1}], ..., E[x_{t+i-1}]; ignored for medusa.
    Tensor<T> forward_train(int i, const Tensor<T>& h_rows, const std::vector<Tensor<T>>& embs) {
        Head& head = head_at(i);
        if (cfg_.mode == HeadMode::medusa) {
            Tensor<T> z = add(h_rows, silu(linear(h_rows, head.w[0])));
            return linear(z, head.out_proj);
        }
        if (int(embs.size()) != i) throw StateError("head forward: expected i path embeddings");
        std::vector<Tensor<T>> parts = {h_rows};
        for (const auto& e : embs) parts.push_back(e);
        Tensor<T> z = concat_cols(parts);
        if (cfg_.mode == HeadMode::hydra) {
            return linear(add(silu(linear(z, head.w[0])), h_rows), head.out_proj);
        }
        for (auto& wl : head.w) z = silu(linear(z, wl));
        return linear(z, head.out_proj);
    }

    // Raw logits for one state. ctx_tokens = [x_t, path...] (i tokens for
    // hydra modes); medusa uses h only.
    void logits_raw(int i, const T* h, const std::vector<int>& ctx_tokens, std::vector<T>& out) const {
        const Head& head = head_at(i);
        const int d = mcfg_.d_model, V = mcfg_.vocab_size, w = cfg_.hidden_width;
        std::vector<T> z;
        if (cfg_.mode == HeadMode::medusa) {
            z.resize(size_t(w));
            for (int r = 0; r < w; ++r)
                z[size_t(r)] = kern::dot(head.w[0].ptr() + size_t(r) * d, h, d);
            raw::silu_inplace(z.data(), z.size());
            for (int j = 0; j < d; ++j) z[size_t(j)] += h[j];
        } else {
            if (int(ctx_tokens.size()) != i)
                throw StateError("head logits: wrong path length for head");
            const int in_w = cfg_.head_input_width(i, d);
            std::vector<T> input(static_cast<size_t>(in_w));
            std::copy(h, h + d, input.data());
            const T* E = emb_table_->ptr();
            for (int t = 0; t < i; ++t) {
                const int tok = ctx_tokens[size_t(t)];
                if (tok < 0 || tok >= V) throw InputError("head logits: token out of range");
                std::copy(E + size_t(tok) * d, E + size_t(tok) * d + d,
                          input.data() + size_t(t + 1) * d);
            }
            z.resize(size_t(w));
            for (int r = 0; r < w; ++r)
                z[size_t(r)] = kern::dot(head.w[0].ptr() + size_t(r) * in_w, input.data(), in_w);
            raw::silu_inplace(z.data(), z.size());
            if (cfg_.mode == HeadMode::hydra) {
                for (int j = 0; j < d; ++j) z[size_t(j)] += h[j];
            } else {
                std::vector<T> z2(static_cast<size_t>(w));
                for (size_t l = 1; l < head.w.size(); ++l) {
                    for (int r = 0; r < w; ++r)
                        z2[size_t(r)] = kern::dot(head.w[l].ptr() + size_t(r) * w, z.data(), w);
                    raw::silu_inplace(z2.data(), z2.size());
                    std::swap(z, z2);
                }
            }
        }
        out.resize(size_t(V));
        for (int r = 0; r < V; ++r)
            out[size_t(r)] = kern::dot(head.out_proj.ptr() + size_t(r) * w, z.data(), w);
    }

    // The heads read the base input-embedding table for path tokens
    // (frozen; not part of the heads checkpoint).
    void bind_embedding(const Tensor<T>* emb) { emb_table_ = emb; }
    const Tensor<T>* embedding() const { return emb_table_; }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        for (size_t i = 0; i < heads_.size(); ++i) {
            const std::string p = "heads." + std::to_string(i + 1) + ".";
            for (size_t l = 0; l < heads_[i].w.size(); ++l)
                out.emplace_back(p + "w." + std::to_string(l), &heads_[i].w[l]);
            out.emplace_back(p + "out_proj", &heads_[i].out_proj);
        }
        if (has_prefix_layer())
            for (auto& nt : prefix_.named_parameters("prefix."))
                out.push_back(nt);
        return out;
    }

    void save(const std::string& path) {
        nlohmann::json meta;
        nlohmann::json mj, hj;
        to_json(mj, mcfg_);
        to_json(hj, cfg_);
        meta["model"] = mj;
        meta["heads"] = hj;
        meta["mode"] = to_string(cfg_.mode);
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

    static DraftHeads load(const std::string& path) {
        Checkpoint cp = load_checkpoint_file(path);
        ModelConfig mc;
        HeadsConfig hc;
        from_json(cp.meta.at("model"), mc);
        from_json(cp.meta.at("heads"), hc);
        DraftHeads heads(mc, hc);
        for (auto& [name, t] : heads.named_parameters()) {
            const auto& rec = cp.find(name);
            if (rec.shape != t->shape()) throw IoError("checkpoint: shape mismatch for " + name);
            std::copy(rec.data.begin(), rec.data.end(), t->ptr());
        }
        return heads;
    }

  private:
    struct Head {
        std::vector<Tensor<T>> w;
        Tensor<T> out_proj;
    };
    Head& head_at(int i) {
        if (i < 1 || i > cfg_.k) throw InputError("head index out of range");
        return heads_[size_t(i - 1)];
    }
    const Head& head_at(int i) const {
        if (i < 1 || i > cfg_.k) throw InputError("head index out of range");
        return heads_[size_t(i - 1)];
    }

    ModelConfig mcfg_;
    HeadsConfig cfg_;
    std::vector<Head> heads_;
    PrefixAttentionLayer<T> prefix_;
    const Tensor<T>* emb_table_ = nullptr;
};

// Ranked head proposal: tokens by descending probability, ties by
// ascending token id.
template <typename T>
struct Proposal {
    std::vector<int> tokens;
    std::vector<T> probs;
};

template <typename T>
Proposal<T> propose_topk(const DraftHeads<T>& heads, int i, const SpeculationState<T>& state,
                         int m) {
    const int V = heads.model_config().vocab_size;
    if (m < 1 || m > V) throw InputError("propose_topk: m out of range");
    if (int(state.path_tokens.size()) != i - 1)
        throw StateError("propose_topk: path length must be i-1");
    std::vector<int> ctx;
    ctx.push_back(state.last_committed_token);
    for (int t : state.path_tokens) ctx.push_back(t);
    std::vector<T> logits;
    heads.logits_raw(i, state.refined_hidden.data(), ctx, logits);
    raw::softmax_row(logits.data(), V);
    std::vector<int> idx(static_cast<size_t>(V));
    for (int j = 0; j < V; ++j) idx[size_t(j)] = j;
    std::partial_sort(idx.begin(), idx.begin() + m, idx.end(), [&](int a, int b) {
        if (logits[size_t(a)] != logits[size_t(b)]) return logits[size_t(a)] > logits[size_t(b)];
        return a < b;
    });
    Proposal<T> out;
    for (int j = 0; j < m; ++j) {
        out.tokens.push_back(idx[size_t(j)]);
        out.probs.push_back(logits[size_t(idx[size_t(j)])]);
    }
    return out;
}

// Candidate tree for one decode step: topology plus per-sequence tokens
// and draft probabilities per node.
template <typename T>
struct CandidateTree {
    const TreeTopology* topo = nullptr;
    std::vector<std::vector<int>> tokens;  // [B][n_nodes]
    std::vector<std::vector<T>> probs;     // [B][n_nodes]
};

// Fill the tree in topological order: each node takes the rank-th proposal
// of the head at its depth, conditioned on its path (hydra modes) or not
// (medusa). Proposals are evaluated once per parent and shared by siblings.
// head_seconds, if given, accumulates proposal wall time per head index.
template <typename T>
CandidateTree<T> populate_tree(const DraftHeads<T>& heads, const TreeTopology& topo,
                               const std::vector<SpeculationState<T>>& states,
                               std::vector<double>* head_seconds = nullptr) {
    topo.validate();
    if (topo.max_depth() > heads.config().k)
        throw TopologyError("populate_tree: node depth exceeds head count");
    const int n = topo.size();
    const int B = int(states.size());
    // Children per parent determine how many ranked proposals are needed.
    std::vector<int> need(size_t(n) + 1, 0);
    for (int i = 0; i < n; ++i)
        need[size_t(topo.nodes[size_t(i)].parent + 1)] =
            std::max(need[size_t(topo.nodes[size_t(i)].parent + 1)],
                     topo.nodes[size_t(i)].rank + 1);
    CandidateTree<T> tree;
    tree.topo = &topo;
    tree.tokens.assign(size_t(B), std::vector<int>(size_t(n)));
    tree.probs.assign(size_t(B), std::vector<T>(size_t(n)));
    const bool sequential = heads.config().mode != HeadMode::medusa;
    for (int s = 0; s < B; ++s) {
        std::vector<Proposal<T>> by_parent(size_t(n) + 1);
        std::vector<Proposal<T>> by_depth(size_t(heads.config().k) + 1);  // medusa sharing
        for (int i = 0; i < n; ++i) {
            const int parent = topo.nodes[size_t(i)].parent;
            const int depth = topo.depth_of(i);
            Proposal<T>* props;
            if (sequential) {
                if (by_parent[size_t(parent + 1)].tokens.empty()) {
                    SpeculationState<T> st = states[size_t(s)];
                    st.path_tokens.clear();
                    if (parent != -1)
                        for (int a : topo.path_to(parent))
                            st.path_tokens.push_back(tree.tokens[size_t(s)][size_t(a)]);
                    const double t0 = head_seconds ? now_sec() : 0.0;
                    by_parent[size_t(parent + 1)] =
                        propose_topk(heads, depth, st, need[size_t(parent + 1)]);
                    if (head_seconds) (*head_seconds)[size_t(depth - 1)] += now_sec() - t0;
                }
                props = &by_parent[size_t(parent + 1)];
            } else {
                if (by_depth[size_t(depth)].tokens.empty()) {
                    int depth_need = 0;
                    for (int j = 0; j < n; ++j)
                        if (topo.depth_of(j) == depth)
                            depth_need = std::max(depth_need, topo.nodes[size_t(j)].rank + 1);
                    SpeculationState<T> st = states[size_t(s)];
                    st.path_tokens.assign(size_t(depth - 1), 0);  // unused by medusa
                    const double t0 = head_seconds ? now_sec() : 0.0;
                    by_depth[size_t(depth)] = propose_topk(heads, depth, st, depth_need);
                    if (head_seconds) (*head_seconds)[size_t(depth - 1)] += now_sec() - t0;
                }
                props = &by_depth[size_t(depth)];
            }
            const int rank = topo.nodes[size_t(i)].rank;
            if (rank >= int(props->tokens.size()))
                throw TopologyError("populate_tree: rank exceeds available proposals");
            tree.tokens[size_t(s)][size_t(i)] = props->tokens[size_t(rank)];
            tree.probs[size_t(s)][size_t(i)] = props->probs[size_t(rank)];
        }
    }
    return tree;
}

}  // namespace hspec
