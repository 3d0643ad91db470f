#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "hspec/verify.hpp"

using namespace hspec;

namespace {

std::vector<double> softmax_of(std::vector<double> logits) {
    raw::softmax_row(logits.data(), int(logits.size()));
    return logits;
}

std::vector<double> random_dist(int V, Rng& rng, double spread = 2.0) {
    std::vector<double> l(static_cast<size_t>(V));
    for (auto& x : l) x = rng.gaussian(0.0, spread);
    return softmax_of(std::move(l));
}

TreeTopology random_topology(int n_nodes, int max_depth, Rng& rng) {
    TreeTopology t;
    std::vector<int> child_count(static_cast<size_t>(n_nodes) + 1, 0);
    for (int i = 0; i < n_nodes; ++i) {
        std::vector<int> cands = {-1};
        for (int j = 0; j < i; ++j)
            if (t.depth_of(j) < max_depth) cands.push_back(j);
        const int parent = cands[size_t(rng.uniform_u64(uint64_t(cands.size())))];
        t.nodes.push_back({parent, child_count[size_t(parent + 1)]++});
    }
    return t;
}

// Distinct tokens within each sibling group (greedy acceptance requires it).
std::vector<int> sibling_distinct_tokens(const TreeTopology& topo, int V, Rng& rng) {
    std::vector<int> tok(static_cast<size_t>(topo.size()));
    for (int p = -1; p < topo.size(); ++p) {
        auto kids = topo.children_of(p);
        std::vector<int> pool(static_cast<size_t>(V));
        std::iota(pool.begin(), pool.end(), 0);
        for (size_t i = 0; i < kids.size(); ++i) {
            const size_t j = i + size_t(rng.uniform_u64(uint64_t(pool.size() - i)));
            std::swap(pool[i], pool[j]);
            tok[size_t(kids[i])] = pool[i];
        }
    }
    return tok;
}

// Longest root path where every node's token is the argmax of its parent
// context; with sibling-distinct tokens it is unique.
std::vector<int> greedy_oracle(const TreeTopology& topo, const std::vector<int>& tok,
                               const std::vector<double>& root, const std::vector<double>& dists,
                               int V) {
    std::vector<int> best;
    std::function<void(int, std::vector<int>&)> walk = [&](int parent, std::vector<int>& path) {
        if (path.size() > best.size()) best = path;
        const double* ctx = parent == -1 ? root.data() : dists.data() + size_t(parent) * V;
        const int g = raw::argmax_row(ctx, V);
        for (int c : topo.children_of(parent))
            if (tok[size_t(c)] == g) {
                path.push_back(c);
                walk(c, path);
                path.pop_back();
            }
    };
    std::vector<int> path;
    walk(-1, path);
    return best;
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
    double tv = 0;
    for (size_t i = 0; i < a.size(); ++i) tv += std::abs(a[i] - b[i]);
    return tv / 2;
}

}  // namespace

TEST(Entropy, KnownValuesAndValidation) {
    EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-12);
    EXPECT_EQ(entropy(std::vector<double>{0.0, 1.0, 0.0}), 0.0);
    EXPECT_NEAR(entropy(std::vector<double>{0.75, 0.25}), 0.5623, 1e-4);
    EXPECT_THROW(entropy(std::vector<double>{0.6, 0.5, -0.1}), InputError);
    EXPECT_THROW(entropy(std::vector<double>{0.5, 0.4}), InputError);
}

TEST(GreedyAccept, FloorCeilingAndHandCase) {
    const int V = 6;
    // Floor: nothing in the tree matches the argmax chain.
    TreeTopology chain = TreeTopology::chain(2);
    std::vector<int> tok = {1, 2};
    std::vector<double> root = softmax_of({5, 0, 0, 0, 0, 0});           // argmax 0
    std::vector<double> dists = {0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 1};   // rows argmax 5
    auto floor_out = greedy_accept(chain, tok, root.data(), dists.data(), V);
    EXPECT_TRUE(floor_out.accepted_nodes.empty());
    EXPECT_EQ(floor_out.bonus_token, 0);
    EXPECT_EQ(floor_out.acceptance_length(), 1);

    // Ceiling: every link matches; bonus comes from the deepest node's row.
    tok = {0, 5};
    auto ceil_out = greedy_accept(chain, tok, root.data(), dists.data(), V);
    EXPECT_EQ(ceil_out.accepted_nodes, (std::vector<int>{0, 1}));
    EXPECT_EQ(ceil_out.bonus_token, 5);
    EXPECT_EQ(ceil_out.acceptance_length(), 3);

    // Branching: the second root child carries the argmax.
    TreeTopology topo;
    topo.nodes = {{-1, 0}, {-1, 1}, {0, 0}};
    std::vector<int> toks = {2, 0, 4};
    std::vector<double> nd(3 * size_t(V), 0.0);
    nd[0 * V + 3] = 1.0;  // node0 ctx argmax 3
    nd[1 * V + 2] = 1.0;  // node1 ctx argmax 2 - no child of node1, stop
    nd[2 * V + 1] = 1.0;
    auto out = greedy_accept(topo, toks, root.data(), nd.data(), V);
    EXPECT_EQ(out.accepted_nodes, (std::vector<int>{1}));
    EXPECT_EQ(out.bonus_token, 2);

    std::vector<int> dup = {2, 2, 4};
    EXPECT_THROW(greedy_accept(topo, dup, root.data(), nd.data(), V), TopologyError);
}

TEST(GreedyAccept, MatchesLongestConsistentPathOracle) {
    const int V = 9;
    Rng rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const int n = 1 + int(rng.uniform_u64(10));
        TreeTopology topo = random_topology(n, 4, rng);
        std::vector<int> tok = sibling_distinct_tokens(topo, V, rng);
        // Low-spread logits make argmax chains hit the tree often enough to
        // exercise deep acceptance paths.
        std::vector<double> root = random_dist(V, rng, 0.8);
        std::vector<double> dists;
        for (int i = 0; i < n; ++i) {
            auto d = random_dist(V, rng, 0.8);
            dists.insert(dists.end(), d.begin(), d.end());
        }
        auto out = greedy_accept(topo, tok, root.data(), dists.data(), V);
        auto want = greedy_oracle(topo, tok, root, dists, V);
        EXPECT_EQ(out.accepted_nodes, want) << "trial " << trial;
        const double* stop_ctx =
            want.empty() ? root.data() : dists.data() + size_t(want.back()) * V;
        EXPECT_EQ(out.bonus_token, raw::argmax_row(stop_ctx, V)) << "trial " << trial;
    }
}

TEST(TypicalAccept, UniformExampleThresholdAndPass) {
    // Uniform over 4 tokens: H = ln 4, exp(-H) = 0.25, so the threshold is
    // min(0.25, 0.5 * 0.25) = 0.125 and a proposed probability of 0.25 passes.
    const int V = 4;
    TreeTopology chain = TreeTopology::chain(1);
    std::vector<double> root(4, 0.25), node(4, 0.25);
    Rng rng(40);
    auto out = typical_accept(chain, {2}, root, node, V, 0.25, 0.5, rng);
    EXPECT_EQ(out.accepted_nodes, (std::vector<int>{0}));
    EXPECT_EQ(out.acceptance_length(), 2);
}

TEST(TypicalAccept, OneHotContextAcceptsOnlyArgmax) {
    const int V = 5;
    TreeTopology topo;
    topo.nodes = {{-1, 0}, {-1, 1}};
    std::vector<double> root = {0, 0, 0, 1.0, 0};
    std::vector<double> dists(2 * size_t(V), 0.2);
    Rng rng(41);
    auto hit = typical_accept(topo, {3, 1}, root, dists, V, 0.5, 0.7, rng);
    EXPECT_EQ(hit.accepted_nodes, (std::vector<int>{0}));
    auto miss = typical_accept(topo, {1, 2}, root, dists, V, 0.5, 0.7, rng);
    EXPECT_TRUE(miss.accepted_nodes.empty());
    EXPECT_EQ(miss.acceptance_length(), 1);
}

TEST(TypicalAccept, MatchesBruteForcePathSearch) {
    const int V = 7;
    Rng rng(42);
    TreeTopology topo;
    topo.nodes = {{-1, 0}, {-1, 1}, {0, 0}, {0, 1}, {1, 0}, {2, 0}, {2, 1}};
    for (int trial = 0; trial < 60; ++trial) {
        std::vector<double> root = random_dist(V, rng);
        std::vector<double> dists;
        for (int i = 0; i < topo.size(); ++i) {
            auto d = random_dist(V, rng);
            dists.insert(dists.end(), d.begin(), d.end());
        }
        std::vector<int> tok(static_cast<size_t>(topo.size()));
        for (auto& t : tok) t = int(rng.uniform_u64(uint64_t(V)));
        const double eps = 0.05 + 0.4 * rng.uniform();
        const double alpha = std::sqrt(eps);

        // Independent search: recompute pass flags, then enumerate all
        // root paths for the deepest all-passing one (ties by cumulative
        // probability).
        auto ctx_of = [&](int parent) {
            return parent == -1 ? root.data() : dists.data() + size_t(parent) * V;
        };
        std::vector<int> best;
        double best_cum = -1;
        std::function<void(int, double, std::vector<int>&)> dfs = [&](int parent, double cum,
                                                                      std::vector<int>& path) {
            if (path.size() > best.size() || (path.size() == best.size() && cum > best_cum)) {
                best = path;
                best_cum = cum;
            }
            const double* ctx = ctx_of(parent);
            std::vector<double> tmp(ctx, ctx + V);
            const double th = std::min(eps, alpha * std::exp(-entropy(tmp)));
            for (int c : topo.children_of(parent)) {
                const double pr = ctx[size_t(tok[size_t(c)])];
                if (pr > th) {
                    path.push_back(c);
                    dfs(c, cum * pr, path);
                    path.pop_back();
                }
            }
        };
        std::vector<int> path;
        dfs(-1, 1.0, path);

        Rng vr(100 + uint64_t(trial));
        auto out = typical_accept(topo, tok, root, dists, V, eps, alpha, vr);
        EXPECT_EQ(out.accepted_nodes, best) << "trial " << trial;
        const double* stop = ctx_of(best.empty() ? -1 : best.back());
        EXPECT_GT(stop[size_t(out.bonus_token)], 0.0) << "trial " << trial;
    }
}

TEST(TypicalAccept, SharpDistributionsReduceToGreedy) {
    const int V = 6;
    Rng rng(43);
    TreeTopology topo;
    topo.nodes = {{-1, 0}, {-1, 1}, {0, 0}, {2, 0}};
    for (int trial = 0; trial < 20; ++trial) {
        auto sharp = [&](int peak) {
            std::vector<double> d(static_cast<size_t>(V), 0.001 / (V - 1));
            d[size_t(peak)] = 0.999;
            return d;
        };
        std::vector<int> peaks(static_cast<size_t>(topo.size()) + 1);
        for (auto& p : peaks) p = int(rng.uniform_u64(uint64_t(V)));
        std::vector<double> root = sharp(peaks[0]);
        std::vector<double> dists;
        for (int i = 0; i < topo.size(); ++i) {
            auto d = sharp(peaks[size_t(i) + 1]);
            dists.insert(dists.end(), d.begin(), d.end());
        }
        std::vector<int> tok = sibling_distinct_tokens(topo, V, rng);
        Rng vr(200 + uint64_t(trial));
        auto typ = typical_accept(topo, tok, root, dists, V, 0.999, std::sqrt(0.999), vr);
        auto gre = greedy_accept(topo, tok, root.data(), dists.data(), V);
        EXPECT_EQ(typ.accepted_nodes, gre.accepted_nodes) << "trial " << trial;
    }
}

TEST(TypicalAccept, ParameterValidation) {
    TreeTopology chain = TreeTopology::chain(1);
    std::vector<double> root(4, 0.25), dists(4, 0.25);
    Rng rng(44);
    EXPECT_THROW(typical_accept(chain, {0}, root, dists, 4, 0.0, 0.5, rng), ConfigError);
    EXPECT_THROW(typical_accept(chain, {0}, root, dists, 4, 1.0, 0.5, rng), ConfigError);
    EXPECT_THROW(typical_accept(chain, {0}, root, dists, 4, 0.25, 0.0, rng), ConfigError);
}

TEST(RejectionResample, IdenticalDistributionsAcceptEverything) {
    const int V = 8, K = 3;
    Rng rng(50);
    std::vector<std::vector<double>> q, p;
    for (int i = 0; i < K; ++i) q.push_back(random_dist(V, rng));
    p = q;
    p.push_back(random_dist(V, rng));
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> proposed = {1, 5, 2};
        auto [n_accept, next] = rejection_resample_chain(q, p, proposed, rng);
        EXPECT_EQ(n_accept, K);
        EXPECT_GE(next, 0);
        EXPECT_LT(next, V);
    }
}

TEST(RejectionResample, DisjointSupportRejectsAndResamplesFromBase) {
    const int V = 8;
    std::vector<double> qd(static_cast<size_t>(V), 0.0), pd(static_cast<size_t>(V), 0.0);
    for (int j = 0; j < 4; ++j) qd[size_t(j)] = 0.25;        // draft: first half
    pd[4] = 0.4; pd[5] = 0.3; pd[6] = 0.2; pd[7] = 0.1;       // base: second half
    std::vector<std::vector<double>> q = {qd};
    std::vector<std::vector<double>> p = {pd, pd};
    Rng rng(51);
    std::vector<double> counts(static_cast<size_t>(V), 0.0);
    const int trials = 20000;
    for (int t = 0; t < trials; ++t) {
        const int proposed = int(rng.uniform_u64(4));
        auto [n_accept, next] = rejection_resample_chain(q, p, {proposed}, rng);
        EXPECT_EQ(n_accept, 0);
        counts[size_t(next)] += 1.0 / trials;
    }
    EXPECT_LE(total_variation(counts, pd), 0.02);
}

TEST(RejectionResample, PositionalMarginalsMatchBase) {
    // Committed token at position i (when it exists) is distributed as p_i;
    // the bonus after K acceptances follows p_{K+1}.
    const int V = 8, K = 3;
    Rng gen(52);
    std::vector<std::vector<double>> q, p;
    for (int i = 0; i < K; ++i) q.push_back(random_dist(V, gen, 1.2));
    for (int i = 0; i < K + 1; ++i) p.push_back(random_dist(V, gen, 1.2));

    const int trials = 200000;
    std::vector<std::vector<double>> counts(size_t(K) + 1,
                                            std::vector<double>(static_cast<size_t>(V), 0.0));
    std::vector<long> exists(size_t(K) + 1, 0);
    Rng rng(53);
    for (int t = 0; t < trials; ++t) {
        std::vector<int> proposed(static_cast<size_t>(K));
        for (int i = 0; i < K; ++i)
            proposed[size_t(i)] = hspec::detail::sample_from(q[size_t(i)].data(), V, rng);
        auto [n_accept, next] = rejection_resample_chain(q, p, proposed, rng);
        for (int pos = 0; pos <= n_accept && pos <= K; ++pos) {
            const int committed = pos < n_accept ? proposed[size_t(pos)] : next;
            counts[size_t(pos)][size_t(committed)] += 1;
            ++exists[size_t(pos)];
        }
    }
    for (int pos = 0; pos <= K; ++pos) {
        ASSERT_GT(exists[size_t(pos)], 1000) << "position " << pos;
        std::vector<double> emp(static_cast<size_t>(V));
        for (int v = 0; v < V; ++v) emp[size_t(v)] = counts[size_t(pos)][size_t(v)] / double(exists[size_t(pos)]);
        EXPECT_LE(total_variation(emp, p[size_t(pos)]), 0.01) << "position " << pos;
    }
}

TEST(RejectionResample, InputValidation) {
    std::vector<std::vector<double>> q = {{0.5, 0.5, 0.0}};
    std::vector<std::vector<double>> p = {{0.2, 0.3, 0.5}, {0.1, 0.1, 0.8}};
    Rng rng(54);
    EXPECT_THROW(rejection_resample_chain(q, p, {2}, rng), InputError);   // q == 0 at proposal
    EXPECT_THROW(rejection_resample_chain(q, p, {3}, rng), InputError);   // token range
    EXPECT_THROW(rejection_resample_chain(q, p, (std::vector<int>{0, 1}), rng), InputError);
    std::vector<std::vector<double>> short_p = {{0.2, 0.3, 0.5}};
    EXPECT_THROW(rejection_resample_chain(q, short_p, {0}, rng), InputError);
}
