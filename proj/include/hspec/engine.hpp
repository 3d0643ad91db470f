#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hspec/heads.hpp"
#include "hspec/model.hpp"
#include "hspec/verify.hpp"

namespace hspec {

struct DecodeMetrics {
    long tokens = 0;  // generated tokens, all sequences
    long steps = 0;   // per-sequence decode steps
    double seconds = 0;
    double t_base_forward = 0, t_prefix_attention = 0, t_verify = 0, t_commit = 0;
    std::vector<double> t_per_head;  // proposal seconds, [i-1] for head i
    long truncated_sequences = 0;

    double accept_len_mean() const { return steps ? double(tokens) / double(steps) : 0.0; }
    double tokens_per_sec() const { return seconds > 0 ? double(tokens) / seconds : 0.0; }
};

inline void to_json(nlohmann::json& j, const DecodeMetrics& m) {
    nlohmann::json heads = nlohmann::json::object();
    for (size_t i = 0; i < m.t_per_head.size(); ++i)
        heads["head_" + std::to_string(i + 1)] = m.t_per_head[i] * 1e3;
    j = nlohmann::json{{"tokens", m.tokens},
                       {"steps", m.steps},
                       {"seconds", m.seconds},
                       {"accept_len_mean", m.accept_len_mean()},
                       {"tokens_per_sec", m.tokens_per_sec()},
                       {"truncated_sequences", m.truncated_sequences},
                       {"overhead_ms",
                        {{"base_forward", m.t_base_forward * 1e3},
                         {"prefix_attention", m.t_prefix_attention * 1e3},
                         {"heads", heads},
                         {"verify", m.t_verify * 1e3},
                         {"commit", m.t_commit * 1e3}}}};
}

// Drives speculative decoding: per step the heads populate the candidate
// tree from the current draft state, one packed base forward verifies all
// nodes through the tree mask, the acceptance criterion picks a path, and
// accepted tokens plus the bonus token are committed into the KV cache.
//
// The last committed token of each sequence is always "pending": the base
// has not yet processed it. Draft state pairs the hidden of the token
// before it with the pending token itself, and the packed forward carries
// the pending token as its leading row — one base forward per step.
template <typename T>
class DecodeEngine {
  public:
    DecodeEngine(Model<T>& model, DraftHeads<T>& heads) : model_(model), heads_(heads) {
        if (heads.model_config().d_model != model.config().d_model ||
            heads.model_config().vocab_size != model.config().vocab_size)
            throw ConfigError("engine: heads and base model disagree on dimensions");
        heads_.bind_embedding(&model_.tok_emb());
    }

    // Optional per-step probe for tests: (sequence, committed tokens
    // including pending, root-row logits).
    std::function<void(int, const std::vector<int>&, const T*)> step_probe;

    std::pair<std::vector<std::string>, DecodeMetrics> decode(
        const std::vector<std::string>& prompts, const TreeTopology& topo,
        const DecodeParams& params) {
        params.validate();
        topo.validate();
        if (topo.size() < 1) throw InputError("decode: empty topology");
        if (topo.max_depth() > heads_.config().k)
            throw ConfigError("decode: tree depth exceeds head count");
        const int B = int(prompts.size());
        const int n_nodes = topo.size();
        const int t_new = 1 + n_nodes;
        validate_prompts(prompts, t_new);
        const int V = model_.config().vocab_size;
        const int d = model_.config().d_model;
        const bool pp = heads_.has_prefix_layer();
        const bool typical = params.criterion == AcceptCriterion::typical;

        DecodeMetrics met;
        met.t_per_head.assign(size_t(heads_.config().k), 0.0);
        const double t_start = now_sec();

        KVCache<T> cache = model_.make_cache(B);
        if (pp) heads_.prefix_layer().reset_cache(B);
        std::vector<std::vector<int>> committed(static_cast<size_t>(B));  // prompt + generated, incl pending
        std::vector<std::vector<T>> h_prev(size_t(B), std::vector<T>(size_t(d), T(0)));
        std::vector<int> generated(size_t(B), 0);
        std::vector<uint8_t> done(size_t(B), 0);
        std::vector<Rng> rngs = fork_rngs(params.rng_seed, B);

        prefill(prompts, cache, committed, h_prev, met);

        std::vector<int> step_tokens(size_t(B) * t_new);
        std::vector<T> soft_root(static_cast<size_t>(V)), soft_nodes(size_t(n_nodes) * V);
        while (!all_done(done)) {
            // Sequences that can no longer fit a packed step are truncated;
            // finished sequences park their cache at zero so their dummy
            // rows always fit.
            for (int s = 0; s < B; ++s) {
                if (done[size_t(s)]) continue;
                if (cache.len[size_t(s)] + t_new > model_.config().max_seq_len) {
                    done[size_t(s)] = 1;
                    ++met.truncated_sequences;
                    cache.len[size_t(s)] = 0;
                }
            }
            if (all_done(done)) break;

            // 1. populate candidate trees
            std::vector<SpeculationState<T>> states(static_cast<size_t>(B));
            for (int s = 0; s < B; ++s) {
                states[size_t(s)].refined_hidden = h_prev[size_t(s)];
                states[size_t(s)].last_committed_token = committed[size_t(s)].back();
            }
            CandidateTree<T> tree = populate_tree(heads_, topo, states, &met.t_per_head);

            // 2. one packed base forward: [pending] ++ tree tokens
            std::vector<TreeMask> masks(static_cast<size_t>(B));
            for (int s = 0; s < B; ++s)
                masks[size_t(s)] = build_tree_mask(topo, cache.len[size_t(s)] + 1)[0];
            for (int s = 0; s < B; ++s) {
                step_tokens[size_t(s) * t_new] = committed[size_t(s)].back();
                for (int i = 0; i < n_nodes; ++i)
                    step_tokens[size_t(s) * t_new + 1 + i] = tree.tokens[size_t(s)][size_t(i)];
            }
            double t = now_sec();
            auto out = model_.forward_cached(step_tokens, B, t_new, cache, &masks);
            met.t_base_forward += now_sec() - t;

            // 3. verify; 4. commit accepted path + bonus
            for (int s = 0; s < B; ++s) {
                if (done[size_t(s)]) continue;
                const T* root = out.logits.data() + size_t(s) * t_new * V;
                const T* nodes = root + V;
                if (step_probe) step_probe(s, committed[size_t(s)], root);
                t = now_sec();
                VerificationOutcome vo;
                if (!typical) {
                    vo = greedy_accept(topo, tree.tokens[size_t(s)], root, nodes, V);
                } else {
                    std::copy(root, root + V, soft_root.data());
                    raw::softmax_row(soft_root.data(), V, T(params.tau));
                    std::copy(nodes, nodes + size_t(n_nodes) * V, soft_nodes.data());
                    for (int i = 0; i < n_nodes; ++i)
                        raw::softmax_row(soft_nodes.data() + size_t(i) * V, V, T(params.tau));
                    vo = typical_accept(topo, tree.tokens[size_t(s)], soft_root, soft_nodes, V,
                                        params.epsilon, params.effective_alpha(), rngs[size_t(s)]);
                }
                met.t_verify += now_sec() - t;

                std::vector<int> new_tokens;
                for (int ni : vo.accepted_nodes)
                    new_tokens.push_back(tree.tokens[size_t(s)][size_t(ni)]);
                new_tokens.push_back(vo.bonus_token);
                const int remaining = params.max_new_tokens - generated[size_t(s)];
                const bool budget_hit = int(new_tokens.size()) >= remaining;
                if (budget_hit) new_tokens.resize(size_t(remaining));
                for (int tok : new_tokens) committed[size_t(s)].push_back(tok);
                generated[size_t(s)] += int(new_tokens.size());
                // Throughput counts committed tokens; the stop-sequence trim
                // below only shortens the emitted text.
                met.tokens += int(new_tokens.size());
                met.steps += 1;
                const bool stopped =
                    hit_stop(committed[size_t(s)], generated[size_t(s)], params.stop);
                if (budget_hit || stopped) {
                    done[size_t(s)] = 1;
                    cache.len[size_t(s)] = 0;
                    continue;
                }

                // Commit KV: pending row + accepted node rows (ascending).
                t = now_sec();
                std::vector<int> kept = {0};
                for (int ni : vo.accepted_nodes) kept.push_back(1 + ni);
                cache.commit(s, kept);
                met.t_commit += now_sec() - t;

                // Draft state for the next step: hidden of the token before
                // the new pending (deepest accepted node, or the old pending).
                if (pp) {
                    t = now_sec();
                    std::vector<T> rows(kept.size() * size_t(d));
                    for (size_t r = 0; r < kept.size(); ++r)
                        std::copy(
                            out.hidden.data() + (size_t(s) * t_new + size_t(kept[r])) * d,
                            out.hidden.data() + (size_t(s) * t_new + size_t(kept[r])) * d + d,
                            rows.data() + r * size_t(d));
                    auto refined =
                        heads_.prefix_layer().forward_cached_seq(s, rows.data(), int(kept.size()));
                    std::copy(refined.end() - d, refined.end(), h_prev[size_t(s)].begin());
                    met.t_prefix_attention += now_sec() - t;
                } else {
                    const int h_row = vo.accepted_nodes.empty() ? 0 : 1 + vo.accepted_nodes.back();
                    const T* hid = out.hidden.data() + (size_t(s) * t_new + size_t(h_row)) * d;
                    std::copy(hid, hid + d, h_prev[size_t(s)].begin());
                }
            }
        }
        met.seconds = now_sec() - t_start;
        return {collect_texts(prompts, committed), met};
    }

    // One token per base forward; baseline and greedy oracle.
    std::pair<std::vector<std::string>, DecodeMetrics> autoregressive(
        const std::vector<std::string>& prompts, const DecodeParams& params) {
        params.validate();
        const int B = int(prompts.size());
        validate_prompts(prompts, 1);
        const int V = model_.config().vocab_size;
        const int d = model_.config().d_model;
        const bool typical = params.criterion == AcceptCriterion::typical;
        DecodeMetrics met;
        const double t_start = now_sec();
        KVCache<T> cache = model_.make_cache(B);
        std::vector<std::vector<int>> committed(static_cast<size_t>(B));
        std::vector<std::vector<T>> h_prev(size_t(B), std::vector<T>(size_t(d), T(0)));
        std::vector<int> generated(size_t(B), 0);
        std::vector<uint8_t> done(size_t(B), 0);
        std::vector<Rng> rngs = fork_rngs(params.rng_seed, B);
        if (heads_.has_prefix_layer()) heads_.prefix_layer().reset_cache(B);
        prefill(prompts, cache, committed, h_prev, met);
        std::vector<int> toks(static_cast<size_t>(B));
        std::vector<T> soft(static_cast<size_t>(V));
        while (!all_done(done)) {
            for (int s = 0; s < B; ++s) {
                if (done[size_t(s)]) continue;
                if (cache.len[size_t(s)] + 1 > model_.config().max_seq_len) {
                    done[size_t(s)] = 1;
                    ++met.truncated_sequences;
                    cache.len[size_t(s)] = 0;
                }
            }
            if (all_done(done)) break;
            for (int s = 0; s < B; ++s) toks[size_t(s)] = committed[size_t(s)].back();
            double t = now_sec();
            auto out = model_.forward_cached(toks, B, 1, cache);
            met.t_base_forward += now_sec() - t;
            for (int s = 0; s < B; ++s) {
                if (done[size_t(s)]) continue;
                cache.commit(s, {0});
                const T* logits = out.logits.data() + size_t(s) * V;
                int next;
                if (!typical) {
                    next = raw::argmax_row(logits, V);
                } else {
                    std::copy(logits, logits + V, soft.data());
                    raw::softmax_row(soft.data(), V, T(params.tau));
                    next = detail::sample_from(soft.data(), V, rngs[size_t(s)]);
                }
                committed[size_t(s)].push_back(next);
                generated[size_t(s)] += 1;
                met.tokens += 1;
                met.steps += 1;
                const bool stopped =
                    hit_stop(committed[size_t(s)], generated[size_t(s)], params.stop);
                std::copy(out.hidden.data() + size_t(s) * d, out.hidden.data() + size_t(s) * d + d,
                          h_prev[size_t(s)].begin());
                if (stopped || generated[size_t(s)] >= params.max_new_tokens) {
                    done[size_t(s)] = 1;
                    cache.len[size_t(s)] = 0;
                }
            }
        }
        met.seconds = now_sec() - t_start;
        return {collect_texts(prompts, committed), met};
    }

  private:
    static bool all_done(const std::vector<uint8_t>& done) {
        for (uint8_t f : done)
            if (!f) return false;
        return true;
    }

    static std::vector<Rng> fork_rngs(uint64_t seed, int B) {
        Rng master(seed);
        std::vector<Rng> out;
        for (int s = 0; s < B; ++s) out.push_back(master.fork(uint64_t(s)));
        return out;
    }

    void validate_prompts(const std::vector<std::string>& prompts, int t_new) const {
        if (prompts.empty()) throw InputError("decode: no prompts");
        for (const auto& p : prompts) {
            if (p.empty()) throw InputError("decode: empty prompt");
            if (int(p.size()) + t_new > model_.config().max_seq_len)
                throw ConfigError("decode: prompt leaves no room for a decode step");
        }
    }

    // Process every prompt byte except the last (which becomes pending).
    // Batched with per-sequence ragged commit; rows past a sequence's
    // prompt are dummies and never committed.
    void prefill(const std::vector<std::string>& prompts, KVCache<T>& cache,
                 std::vector<std::vector<int>>& committed, std::vector<std::vector<T>>& h_prev,
                 DecodeMetrics& met) {
        const int B = int(prompts.size());
        const int d = model_.config().d_model;
        const bool pp = heads_.has_prefix_layer();
        int t_pre = 0;
        for (int s = 0; s < B; ++s) {
            for (unsigned char c : prompts[size_t(s)]) committed[size_t(s)].push_back(int(c));
            t_pre = std::max(t_pre, int(prompts[size_t(s)].size()) - 1);
        }
        if (t_pre == 0) return;
        std::vector<int> toks(size_t(B) * t_pre, 0);
        for (int s = 0; s < B; ++s)
            for (int r = 0; r + 1 < int(prompts[size_t(s)].size()); ++r)
                toks[size_t(s) * t_pre + r] = committed[size_t(s)][size_t(r)];
        double t = now_sec();
        auto out = model_.forward_cached(toks, B, t_pre, cache);
        met.t_base_forward += now_sec() - t;
        for (int s = 0; s < B; ++s) {
            const int rows = int(prompts[size_t(s)].size()) - 1;
            if (rows <= 0) continue;
            std::vector<int> kept(static_cast<size_t>(rows));
            for (int r = 0; r < rows; ++r) kept[size_t(r)] = r;
            cache.commit(s, kept);
            if (pp) {
                t = now_sec();
                auto refined = heads_.prefix_layer().forward_cached_seq(
                    s, out.hidden.data() + size_t(s) * t_pre * d, rows);
                std::copy(refined.end() - d, refined.end(), h_prev[size_t(s)].begin());
                met.t_prefix_attention += now_sec() - t;
            } else {
                const T* hid = out.hidden.data() + (size_t(s) * t_pre + size_t(rows - 1)) * d;
                std::copy(hid, hid + d, h_prev[size_t(s)].begin());
            }
        }
    }

    // Truncate at the first occurrence of the stop byte sequence within the
    // generated region; the stop bytes themselves are not emitted.
    static bool hit_stop(std::vector<int>& seq, int& gen_count, const std::string& stop) {
        if (stop.empty()) return false;
        const size_t prompt_len = seq.size() - size_t(gen_count);
        const size_t m = stop.size();
        if (seq.size() < m) return false;
        for (size_t i = prompt_len; i + m <= seq.size(); ++i) {
            bool match = true;
            for (size_t j = 0; j < m; ++j)
                if (seq[i + j] != int(static_cast<unsigned char>(stop[j]))) {
                    match = false;
                    break;
                }
            if (match) {
                seq.resize(i);
                gen_count = int(i - prompt_len);
                return true;
            }
        }
        return false;
    }

    std::vector<std::string> collect_texts(const std::vector<std::string>& prompts,
                                           const std::vector<std::vector<int>>& committed) const {
        std::vector<std::string> out;
        for (size_t s = 0; s < prompts.size(); ++s) {
            std::string text;
            for (size_t i = prompts[s].size(); i < committed[s].size(); ++i)
                text.push_back(char(static_cast<unsigned char>(committed[s][i])));
            out.push_back(std::move(text));
        }
        return out;
    }

    Model<T>& model_;
    DraftHeads<T>& heads_;
};

}  // namespace hspec
