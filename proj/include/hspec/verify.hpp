#pragma once

#include <cmath>
#include <vector>

#include "hspec/common.hpp"
#include "hspec/model.hpp"
#include "hspec/topology.hpp"

namespace hspec {

// Result of verifying one sequence's candidate tree: the accepted
// root-to-leafward node path plus the bonus token drawn from the base
// model at the stopping context. acceptance_length counts the bonus.
struct VerificationOutcome {
    std::vector<int> accepted_nodes;
    int bonus_token = 0;
    bool truncated = false;

    int acceptance_length() const { return int(accepted_nodes.size()) + 1; }
};

template <typename T>
T entropy(const std::vector<T>& p) {
    T sum = 0;
    for (T v : p) {
        if (v < 0) throw InputError("entropy: negative mass");
        sum += v;
    }
    if (std::abs(double(sum) - 1.0) > 1e-5) throw InputError("entropy: mass does not sum to 1");
    T h = 0;
    for (T v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

// Walk from the root: accept a child iff its token is the base argmax of
// the current context; the bonus token is the argmax where the walk stops.
// dists: per-node rows [n_nodes x V] (any monotone score works; argmax
// ties break toward the smaller token id).
template <typename T>
VerificationOutcome greedy_accept(const TreeTopology& topo, const std::vector<int>& node_tokens,
                                  const T* root_dist, const T* node_dists, int V) {
    const int n = topo.size();
    for (int p = -1; p < n; ++p) {
        auto kids = topo.children_of(p);
        for (size_t a = 0; a < kids.size(); ++a)
            for (size_t b = a + 1; b < kids.size(); ++b)
                if (node_tokens[size_t(kids[a])] == node_tokens[size_t(kids[b])])
                    throw TopologyError("greedy_accept: duplicate sibling tokens");
    }
    VerificationOutcome out;
    const T* ctx = root_dist;
    int parent = -1;
    for (;;) {
        const int g = raw::argmax_row(ctx, V);
        int next = -1;
        for (int c : topo.children_of(parent))
            if (node_tokens[size_t(c)] == g) {
                next = c;
                break;
            }
        if (next == -1) {
            out.bonus_token = g;
            return out;
        }
        out.accepted_nodes.push_back(next);
        parent = next;
        ctx = node_dists + size_t(next) * V;
    }
}

namespace detail {

template <typename T>
int sample_from(const T* dist, int V, Rng& rng) {
    const double u = rng.uniform();
    double acc = 0;
    for (int j = 0; j < V; ++j) {
        acc += double(dist[size_t(j)]);
        if (u < acc) return j;
    }
    return V - 1;  // guard against rounding shortfall
}

}  // namespace detail

// Typical acceptance: a node passes iff its token's probability under the
// temperature-adjusted conditional of its context strictly exceeds
// min(eps, alpha * exp(-H)). The accepted path is the deepest all-passing
// root path (ties by higher cumulative probability); the bonus token is
// sampled from the conditional at the stopping context — at least one
// token is emitted every step.
// dists: temperature-tau softmax rows; root_dist is the current-context row.
template <typename T>
VerificationOutcome typical_accept(const TreeTopology& topo, const std::vector<int>& node_tokens,
                                   const std::vector<T>& root_dist, const std::vector<T>& node_dists,
                                   int V, double eps, double alpha, Rng& rng) {
    if (!(eps > 0 && eps < 1) || !(alpha > 0))
        throw ConfigError("typical_accept: eps must be in (0,1), alpha positive");
    const int n = topo.size();
    // Per node: pass flag and token probability under its context.
    std::vector<uint8_t> pass(size_t(n), 0);
    std::vector<double> prob(size_t(n), 0);
    std::vector<double> thresh_cache(size_t(n) + 1, -1);
    auto context_dist = [&](int parent) -> const T* {
        return parent == -1 ? root_dist.data() : node_dists.data() + size_t(parent) * V;
    };
    for (int i = 0; i < n; ++i) {
        const int parent = topo.nodes[size_t(i)].parent;
        const T* ctx = context_dist(parent);
        double& th = thresh_cache[size_t(parent + 1)];
        if (th < 0) {
            std::vector<T> tmp(ctx, ctx + V);
            th = std::min(eps, alpha * std::exp(-double(entropy(tmp))));
        }
        prob[size_t(i)] = double(ctx[size_t(node_tokens[size_t(i)])]);
        pass[size_t(i)] = prob[size_t(i)] > th ? 1 : 0;
    }
    // Deepest all-passing root path; ties by cumulative probability.
    int best_node = -1, best_depth = 0;
    double best_cum = 1.0;
    std::vector<double> cum(size_t(n), 0);
    std::vector<uint8_t> path_ok(size_t(n), 0);
    for (int i = 0; i < n; ++i) {
        const int parent = topo.nodes[size_t(i)].parent;
        const bool parent_ok = parent == -1 || path_ok[size_t(parent)];
        path_ok[size_t(i)] = parent_ok && pass[size_t(i)];
        if (!path_ok[size_t(i)]) continue;
        cum[size_t(i)] = (parent == -1 ? 1.0 : cum[size_t(parent)]) * prob[size_t(i)];
        const int depth = topo.depth_of(i);
        if (depth > best_depth || (depth == best_depth && cum[size_t(i)] > best_cum)) {
            best_node = i;
            best_depth = depth;
            best_cum = cum[size_t(i)];
        }
    }
    VerificationOutcome out;
    if (best_node != -1) out.accepted_nodes = topo.path_to(best_node);
    const T* stop_ctx = context_dist(best_node);
    out.bonus_token = detail::sample_from(stop_ctx, V, rng);
    return out;
}

// Chain speculative sampling: accept proposal i with probability
// min(1, p_i(x)/q_i(x)); on first rejection draw from normalize(max(0, p-q));
// if everything is accepted draw the bonus from p_{K+1}. Preserves the base
// distribution exactly.
template <typename T>
std::pair<int, int> rejection_resample_chain(const std::vector<std::vector<T>>& q,
                                             const std::vector<std::vector<T>>& p,
                                             const std::vector<int>& proposed, Rng& rng) {
    const int K = int(q.size());
    if (int(p.size()) != K + 1) throw InputError("rejection_resample: need K+1 base distributions");
    if (int(proposed.size()) != K) throw InputError("rejection_resample: need K proposed tokens");
    for (int i = 0; i < K; ++i) {
        const int tok = proposed[size_t(i)];
        const int V = int(q[size_t(i)].size());
        if (tok < 0 || tok >= V) throw InputError("rejection_resample: token out of range");
        const double qi = double(q[size_t(i)][size_t(tok)]);
        const double pi = double(p[size_t(i)][size_t(tok)]);
        if (qi <= 0) throw InputError("rejection_resample: draft assigned zero to its own sample");
        if (rng.uniform() < std::min(1.0, pi / qi)) continue;
        // Rejected: resample from the residual.
        std::vector<double> resid(static_cast<size_t>(V));
        double total = 0;
        for (int j = 0; j < V; ++j) {
            resid[size_t(j)] = std::max(0.0, double(p[size_t(i)][size_t(j)]) - double(q[size_t(i)][size_t(j)]));
            total += resid[size_t(j)];
        }
        if (total <= 0) {
            // p == q: rejection has probability zero; guard rounding.
            return {i, detail::sample_from(p[size_t(i)].data(), V, rng)};
        }
        const double u = rng.uniform() * total;
        double acc = 0;
        for (int j = 0; j < V; ++j) {
            acc += resid[size_t(j)];
            if (u < acc) return {i, j};
        }
        return {i, V - 1};
    }
    const int V = int(p[size_t(K)].size());
    return {K, detail::sample_from(p[size_t(K)].data(), V, rng)};
}

}  // namespace hspec
