#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>
#include <tuple>
#include <vector>

#include "hspec/heads.hpp"
#include "hspec/optim.hpp"

namespace hspec {

// Byte corpus cut into non-overlapping windows of seq_len+1 bytes
// (seq_len inputs, shifted targets). Held-out split = final 5% of windows.
struct Corpus {
    std::vector<uint8_t> bytes;
    int seq_len = 0;
    std::vector<long> train_offsets;
    std::vector<long> heldout_offsets;
};

inline Corpus load_corpus(const std::string& path, int seq_len, long min_bytes = 100 * 1024) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("corpus unreadable: " + path);
    Corpus c;
    c.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    if (long(c.bytes.size()) < min_bytes)
        throw InputError("corpus too small: " + std::to_string(c.bytes.size()) + " bytes, need " +
                         std::to_string(min_bytes));
    c.seq_len = seq_len;
    const long stride = seq_len + 1;
    const long n_win = long(c.bytes.size()) / stride;
    if (n_win < 2) throw InputError("corpus too small for sequence length");
    const long held = std::max<long>(1, n_win * 5 / 100);
    for (long w = 0; w < n_win; ++w)
        (w < n_win - held ? c.train_offsets : c.heldout_offsets).push_back(w * stride);
    return c;
}

inline double unigram_bits_per_byte(const std::vector<uint8_t>& bytes) {
    if (bytes.empty()) throw InputError("unigram baseline of empty corpus");
    std::array<long, 256> cnt{};
    for (uint8_t b : bytes) ++cnt[b];
    const double n = double(bytes.size());
    double H = 0;
    for (long c : cnt)
        if (c) H -= (double(c) / n) * std::log2(double(c) / n);
    return H;
}

// Training-only hidden-state perturbation: h += (alpha/sqrt(L*d)) * U(-1,1).
// The call counter lets decode tests assert inference never lands here.
inline long& hidden_noise_calls() {
    static long calls = 0;
    return calls;
}

template <typename T>
void apply_hidden_noise(Tensor<T>& h, double noise_alpha, int L, int d, Rng& rng) {
    ++hidden_noise_calls();
    if (noise_alpha == 0) return;
    const T s = T(noise_alpha / std::sqrt(double(L) * double(d)));
    T* p = h.ptr();
    for (size_t i = 0; i < h.numel(); ++i) p[i] += s * T(2 * rng.uniform() - 1);
}

template <typename T>
void set_requires_grad(std::vector<std::pair<std::string, Tensor<T>*>> params, bool v) {
    for (auto& [name, t] : params) t->set_requires_grad(v);
}

namespace detail {

inline std::vector<long> shuffled(std::vector<long> xs, Rng& rng) {
    for (size_t i = xs.size(); i > 1; --i)
        std::swap(xs[i - 1], xs[size_t(rng.uniform_u64(uint64_t(i)))]);
    return xs;
}

// (step, lr, loss) triples; written out as CSV by the CLI.
using LossCurve = std::vector<std::tuple<long, double, double>>;

inline void write_loss_csv(const std::string& path, const LossCurve& curve) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write loss curve: " + path);
    out << "step,lr,loss\n";
    for (const auto& [step, lr, loss] : curve) out << step << "," << lr << "," << loss << "\n";
}

}  // namespace detail

// Mean next-byte cross entropy (nats) over the held-out windows, in bits
// per byte. Gradient tracking is switched off for the duration.
template <typename T>
double heldout_bits_per_byte(Model<T>& model, const Corpus& corpus, int batch_size) {
    if (corpus.heldout_offsets.empty()) throw InputError("no held-out windows");
    auto params = model.named_parameters();
    std::vector<bool> saved;
    for (auto& [n, t] : params) saved.push_back(t->requires_grad());
    set_requires_grad(params, false);
    const int L = corpus.seq_len;
    double nats = 0;
    long rows = 0;
    for (size_t w0 = 0; w0 < corpus.heldout_offsets.size(); w0 += size_t(batch_size)) {
        const int B = int(std::min<size_t>(size_t(batch_size), corpus.heldout_offsets.size() - w0));
        std::vector<int> toks(size_t(B) * L);
        std::vector<int> tgts(size_t(B) * L);
        for (int s = 0; s < B; ++s) {
            const long o = corpus.heldout_offsets[w0 + size_t(s)];
            for (int j = 0; j < L; ++j) {
                toks[size_t(s) * L + j] = corpus.bytes[size_t(o + j)];
                tgts[size_t(s) * L + j] = corpus.bytes[size_t(o + j + 1)];
            }
        }
        auto out = model.forward_train(toks, B, L);
        Tensor<T> ce = cross_entropy(out.logits, tgts);
        nats += double(ce.item()) * double(B) * L;
        rows += long(B) * L;
    }
    for (size_t i = 0; i < params.size(); ++i) params[i].second->set_requires_grad(saved[i]);
    return nats / double(rows) / std::log(2.0);
}

template <typename T>
struct TrainBaseStats {
    detail::LossCurve curve;
    double heldout_bpb = 0;
    double unigram_bpb = 0;
};

// Next-byte pretraining with AdamW and warmup+cosine LR over non-overlapping
// corpus windows, shuffled per epoch at a seed-forked RNG.
template <typename T>
TrainBaseStats<T> train_base(Model<T>& model, const TrainConfig& tc) {
    tc.validate();
    Corpus corpus = load_corpus(tc.corpus_path, tc.seq_len);
    auto named = model.named_parameters();
    std::vector<Tensor<T>*> ps;
    for (auto& [n, t] : named) ps.push_back(t);
    ParamGroup<T> group;
    group.init(ps, T(0));
    const int B = tc.batch_size, L = tc.seq_len;
    const long steps_per_epoch = long(corpus.train_offsets.size()) / B;
    if (steps_per_epoch < 1) throw InputError("corpus too small for one training batch");
    const long total_steps = steps_per_epoch * tc.epochs;
    Rng rng(tc.rng_seed);
    TrainBaseStats<T> stats;
    long step = 0;
    std::vector<int> toks(size_t(B) * L), tgts(size_t(B) * L);
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng erng = rng.fork(uint64_t(epoch));
        std::vector<long> order = detail::shuffled(corpus.train_offsets, erng);
        for (long b = 0; b < steps_per_epoch; ++b) {
            for (int s = 0; s < B; ++s) {
                const long o = order[size_t(b * B + s)];
                for (int j = 0; j < L; ++j) {
                    toks[size_t(s) * L + j] = corpus.bytes[size_t(o + j)];
                    tgts[size_t(s) * L + j] = corpus.bytes[size_t(o + j + 1)];
                }
            }
            auto out = model.forward_train(toks, B, L);
            Tensor<T> loss = cross_entropy(out.logits, tgts);
            const double lv = double(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("non-finite loss at step " + std::to_string(step));
            const double lr =
                cosine_lr(step, std::min<long>(tc.warmup_steps, total_steps), total_steps,
                          tc.peak_lr);
            group.zero_grad();
            backward(loss);
            group.step(T(lr));
            stats.curve.emplace_back(step, lr, lv);
            ++step;
        }
    }
    stats.heldout_bpb = heldout_bits_per_byte(model, corpus, B);
    stats.unigram_bpb = unigram_bits_per_byte(corpus.bytes);
    return stats;
}

// Captured head inputs from one probed batch, for teacher-forcing audits:
// per head, the path token ids actually embedded (anchor-major).
struct HeadBatchProbe {
    std::vector<std::vector<int>> path_ids_per_head;
};

// One head-training step on a token batch. A single frozen-base forward
// yields hidden states and (for the teacher objective) target rows; every
// head trains on all its anchors at once; the prefix-attention layer
// (hydra_pp) refines hiddens teacher-forced over the full sequence and
// trains jointly through the heads' loss.
//
// Anchor a in [0, L-2-i] for head i: the pending token is x_{a+1} with
// h_prev = hidden[a]; teacher-forced path x_{a+2..a+i}; the prediction
// target is x_{a+1+i} (one-hot) or the base's softmax row at a+i (teacher).
template <typename T>
Tensor<T> head_training_batch(Model<T>& base, DraftHeads<T>& heads, const std::vector<int>& tokens,
                              int B, int L, const TrainConfig& tc, Rng& rng,
                              HeadBatchProbe* probe = nullptr) {
    const ModelConfig& mc = base.config();
    const int K = heads.config().k;
    const int d = mc.d_model, V = mc.vocab_size;
    if (L <= K + 1) throw InputError("head training: sequence shorter than head count allows");
    if (int(tokens.size()) != B * L) throw ShapeError("head training: token buffer mismatch");
    auto out = base.forward_train(tokens, B, L);
    if (out.hidden.requires_grad())
        throw StateError("head training requires a frozen base model");

    std::vector<T> teacher;  // softmax rows of the base logits, [B*L, V]
    if (tc.objective == TrainObjective::teacher) {
        teacher.assign(out.logits.ptr(), out.logits.ptr() + size_t(B) * L * V);
        for (long r = 0; r < long(B) * L; ++r) raw::softmax_row(teacher.data() + r * V, V);
    }

    Tensor<T> hidden = out.hidden;
    apply_hidden_noise(hidden, tc.noise_alpha, L, d, rng);
    if (heads.has_prefix_layer()) hidden = heads.prefix_layer().forward_train(hidden, B, L);

    const Tensor<T>& emb = base.tok_emb();
    long total_rows = 0;
    for (int i = 1; i <= K; ++i) total_rows += long(B) * (L - 1 - i);
    if (probe) probe->path_ids_per_head.assign(size_t(K), {});
    Tensor<T> loss = Tensor<T>::scalar(T(0));
    const bool medusa = heads.config().mode == HeadMode::medusa;
    for (int i = 1; i <= K; ++i) {
        const int n_anchor = L - 1 - i;
        const long rows = long(B) * n_anchor;
        std::vector<int> h_idx(static_cast<size_t>(rows));
        std::vector<int> tgt_ids(static_cast<size_t>(rows));
        for (int s = 0; s < B; ++s)
            for (int a = 0; a < n_anchor; ++a) {
                h_idx[size_t(s) * n_anchor + a] = s * L + a;
                tgt_ids[size_t(s) * n_anchor + a] = tokens[size_t(s) * L + a + 1 + i];
            }
        Tensor<T> h_rows = gather_rows(hidden, h_idx);
        std::vector<Tensor<T>> embs;
        if (!medusa) {
            for (int t = 0; t < i; ++t) {  // E[x_{a+1}] .. E[x_{a+i}]
                std::vector<int> ids(static_cast<size_t>(rows));
                for (int s = 0; s < B; ++s)
                    for (int a = 0; a < n_anchor; ++a)
                        ids[size_t(s) * n_anchor + a] = tokens[size_t(s) * L + a + 1 + t];
                if (probe)
                    probe->path_ids_per_head[size_t(i - 1)].insert(
                        probe->path_ids_per_head[size_t(i - 1)].end(), ids.begin(), ids.end());
                embs.push_back(gather_rows(emb, ids));
            }
        }
        Tensor<T> logits = heads.forward_train(i, h_rows, embs);
        Tensor<T> ce;
        if (tc.objective == TrainObjective::next_token) {
            ce = cross_entropy(logits, tgt_ids);
        } else {
            Tensor<T> target({int(rows), V});
            for (int s = 0; s < B; ++s)
                for (int a = 0; a < n_anchor; ++a)
                    std::copy(teacher.data() + (size_t(s) * L + size_t(a) + i) * V,
                              teacher.data() + (size_t(s) * L + size_t(a) + i + 1) * V,
                              target.ptr() + (size_t(s) * n_anchor + size_t(a)) * V);
            ce = cross_entropy_soft(logits, target);
        }
        loss = add(loss, scale(ce, T(double(rows) / double(total_rows))));
    }
    return loss;
}

template <typename T>
struct TrainHeadsStats {
    detail::LossCurve curve;
};

// Heads (and the prefix layer, when present) train against the frozen base
// over the corpus; base parameters are excluded from the optimizer and
// gradient tracking, so they are bit-identical before and after.
template <typename T>
TrainHeadsStats<T> train_heads(Model<T>& base, DraftHeads<T>& heads, const TrainConfig& tc) {
    tc.validate();
    if (base.config().d_model != heads.model_config().d_model ||
        base.config().vocab_size != heads.model_config().vocab_size)
        throw ConfigError("train heads: base and heads dimensions disagree");
    Corpus corpus = load_corpus(tc.corpus_path, tc.seq_len);
    heads.bind_embedding(&base.tok_emb());
    set_requires_grad(base.named_parameters(), false);
    std::vector<Tensor<T>*> ps;
    for (auto& [n, t] : heads.named_parameters()) ps.push_back(t);
    ParamGroup<T> group;
    group.init(ps, T(0));
    const int B = tc.batch_size, L = tc.seq_len;
    const long steps_per_epoch = long(corpus.train_offsets.size()) / B;
    if (steps_per_epoch < 1) throw InputError("corpus too small for one training batch");
    const long total_steps = steps_per_epoch * tc.epochs;
    Rng rng(tc.rng_seed);
    Rng noise_rng = rng.fork(0x6e6f6973);
    TrainHeadsStats<T> stats;
    long step = 0;
    std::vector<int> toks(size_t(B) * L);
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng erng = rng.fork(uint64_t(epoch) + 1);
        std::vector<long> order = detail::shuffled(corpus.train_offsets, erng);
        for (long b = 0; b < steps_per_epoch; ++b) {
            for (int s = 0; s < B; ++s) {
                const long o = order[size_t(b * B + s)];
                for (int j = 0; j < L; ++j) toks[size_t(s) * L + j] = corpus.bytes[size_t(o + j)];
            }
            Tensor<T> loss = head_training_batch(base, heads, toks, B, L, tc, noise_rng);
            const double lv = double(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("non-finite loss at step " + std::to_string(step));
            const double lr =
                cosine_lr(step, std::min<long>(tc.warmup_steps, total_steps), total_steps,
                          tc.peak_lr);
            group.zero_grad();
            backward(loss);
            group.step(T(lr));
            stats.curve.emplace_back(step, lr, lv);
            ++step;
        }
    }
    return stats;
}

// KL(base || head i) averaged over anchors of a probe batch; used to show
// training moved head distributions toward the teacher.
template <typename T>
double head_kl_vs_base(Model<T>& base, DraftHeads<T>& heads, int head_i,
                       const std::vector<int>& tokens, int B, int L) {
    const int V = base.config().vocab_size;
    const int d = base.config().d_model;
    heads.bind_embedding(&base.tok_emb());
    auto saved = base.named_parameters();
    std::vector<bool> flags;
    for (auto& [n, t] : saved) flags.push_back(t->requires_grad());
    set_requires_grad(base.named_parameters(), false);
    auto out = base.forward_train(tokens, B, L);
    std::vector<T> hidden(out.hidden.ptr(), out.hidden.ptr() + size_t(B) * L * d);
    if (heads.has_prefix_layer()) {
        Tensor<T> h({B * L, d}, hidden);
        Tensor<T> refined = heads.prefix_layer().forward_train(h, B, L);
        hidden.assign(refined.ptr(), refined.ptr() + size_t(B) * L * d);
    }
    const int n_anchor = L - 1 - head_i;
    if (n_anchor < 1) throw InputError("probe batch too short for head");
    double kl = 0;
    long count = 0;
    std::vector<T> p(static_cast<size_t>(V)), q(static_cast<size_t>(V));
    for (int s = 0; s < B; ++s)
        for (int a = 0; a < n_anchor; ++a) {
            std::copy(out.logits.ptr() + (size_t(s) * L + size_t(a) + head_i) * V,
                      out.logits.ptr() + (size_t(s) * L + size_t(a) + head_i + 1) * V, p.data());
            raw::softmax_row(p.data(), V);
            std::vector<int> ctx;
            for (int t = 0; t < head_i; ++t) ctx.push_back(tokens[size_t(s) * L + a + 1 + t]);
            heads.logits_raw(head_i, hidden.data() + (size_t(s) * L + size_t(a)) * d, ctx, q);
            raw::softmax_row(q.data(), V);
            for (int v = 0; v < V; ++v)
                if (p[size_t(v)] > 0) kl += double(p[size_t(v)]) *
                                            (std::log(double(p[size_t(v)])) -
                                             std::log(std::max(double(q[size_t(v)]), 1e-12)));
            ++count;
        }
    for (size_t i = 0; i < saved.size(); ++i) saved[i].second->set_requires_grad(flags[i]);
    return kl / double(count);
}

}  // namespace hspec
