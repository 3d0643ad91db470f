#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "hspec/engine.hpp"

namespace hspec {

constexpr int kMiss = -1;

// Per corpus position, for each head depth i in [1,K]: the rank of the base
// model's greedy continuation token within head i's ranked proposals
// (conditioned on the greedy path for sequential heads), or kMiss when it
// falls outside the top_m proposals. A sufficient statistic for greedy
// verification: a node (depth i, rank r) matches at a position iff the
// recorded rank equals r.
struct MatchTable {
    int k = 0;
    int top_m = 0;
    std::vector<int> ranks;  // [n_positions * k]

    long positions() const { return k ? long(ranks.size()) / k : 0; }
    int rank_at(long pos, int depth) const { return ranks[size_t(pos) * k + (depth - 1)]; }
    void validate() const {
        if (k < 1 || top_m < 1) throw ConfigError("match table: bad dimensions");
        if (ranks.size() % size_t(k) != 0) throw ShapeError("match table: ragged rank data");
        for (int r : ranks)
            if (r != kMiss && (r < 0 || r >= top_m))
                throw InputError("match table: rank outside [0, top_m)");
    }
};

// For each corpus byte position t (pending token x_t, context left-clipped
// to a window): generate the base greedy continuation g_1..g_K, then record
// where each g_i ranks among head i's proposals given path g_1..g_{i-1}.
// Positions without a processed predecessor (t < 1) or past the corpus end
// are skipped.
template <typename T>
MatchTable build_match_table(Model<T>& base, DraftHeads<T>& heads,
                             const std::vector<uint8_t>& corpus,
                             const std::vector<long>& positions, int K, int top_m,
                             int context_window = 64) {
    if (K < 1 || K > heads.config().k)
        throw ConfigError("match table: depth exceeds trained head count");
    if (top_m < 1 || top_m > base.config().vocab_size)
        throw ConfigError("match table: top_m out of range");
    heads.bind_embedding(&base.tok_emb());
    const int d = base.config().d_model;
    const bool pp = heads.has_prefix_layer();
    const int w_cap = std::min(context_window, base.config().max_seq_len - K);
    if (w_cap < 2) throw ConfigError("match table: context window too small");

    std::vector<long> kept;
    for (long t : positions)
        if (t >= 1 && t < long(corpus.size())) kept.push_back(t);

    MatchTable table;
    table.k = K;
    table.top_m = top_m;
    table.ranks.assign(kept.size() * size_t(K), kMiss);

    const int P = 32;  // positions per batch
    for (size_t lo = 0; lo < kept.size(); lo += P) {
        const int B = int(std::min<size_t>(P, kept.size() - lo));
        std::vector<int> w(static_cast<size_t>(B));  // context length incl pending
        int t_pre = 0;
        for (int s = 0; s < B; ++s) {
            w[size_t(s)] = int(std::min<long>(w_cap, kept[lo + size_t(s)] + 1));
            t_pre = std::max(t_pre, w[size_t(s)] - 1);
        }
        KVCache<T> cache = base.make_cache(B);
        if (pp) heads.prefix_layer().reset_cache(B);
        std::vector<int> toks(size_t(B) * t_pre, 0);
        for (int s = 0; s < B; ++s) {
            const long t = kept[lo + size_t(s)];
            for (int j = 0; j < w[size_t(s)] - 1; ++j)
                toks[size_t(s) * t_pre + j] = corpus[size_t(t - w[size_t(s)] + 1 + j)];
        }
        auto out = base.forward_cached(toks, B, t_pre, cache);
        std::vector<std::vector<T>> h_prev(static_cast<size_t>(B), std::vector<T>(static_cast<size_t>(d)));
        for (int s = 0; s < B; ++s) {
            const int rows = w[size_t(s)] - 1;
            std::vector<int> keep(static_cast<size_t>(rows));
            for (int r = 0; r < rows; ++r) keep[size_t(r)] = r;
            cache.commit(s, keep);
            if (pp) {
                auto refined = heads.prefix_layer().forward_cached_seq(
                    s, out.hidden.data() + size_t(s) * t_pre * d, rows);
                std::copy(refined.end() - d, refined.end(), h_prev[size_t(s)].begin());
            } else {
                const T* hid = out.hidden.data() + (size_t(s) * t_pre + size_t(rows - 1)) * d;
                std::copy(hid, hid + d, h_prev[size_t(s)].begin());
            }
        }

        // Greedy continuation g_1..g_K, one packed single-token step each.
        std::vector<std::vector<int>> g(static_cast<size_t>(B));
        std::vector<int> pending(static_cast<size_t>(B));
        for (int s = 0; s < B; ++s) pending[size_t(s)] = corpus[size_t(kept[lo + size_t(s)])];
        std::vector<int> one(static_cast<size_t>(B));
        for (int j = 0; j < K; ++j) {
            for (int s = 0; s < B; ++s) one[size_t(s)] = pending[size_t(s)];
            auto step = base.forward_cached(one, B, 1, cache);
            for (int s = 0; s < B; ++s) {
                cache.commit(s, {0});
                const int gi =
                    raw::argmax_row(step.logits.data() + size_t(s) * base.config().vocab_size,
                                    base.config().vocab_size);
                g[size_t(s)].push_back(gi);
                pending[size_t(s)] = gi;
            }
        }

        for (int s = 0; s < B; ++s) {
            SpeculationState<T> st;
            st.refined_hidden = h_prev[size_t(s)];
            st.last_committed_token = corpus[size_t(kept[lo + size_t(s)])];
            for (int i = 1; i <= K; ++i) {
                st.path_tokens.assign(g[size_t(s)].begin(), g[size_t(s)].begin() + (i - 1));
                Proposal<T> prop = propose_topk(heads, i, st, top_m);
                int rank = kMiss;
                for (int r = 0; r < top_m; ++r)
                    if (prop.tokens[size_t(r)] == g[size_t(s)][size_t(i - 1)]) {
                        rank = r;
                        break;
                    }
                table.ranks[(lo + size_t(s)) * size_t(K) + size_t(i - 1)] = rank;
            }
        }
    }
    return table;
}

// Mean over positions of 1 + depth of the deepest root path every node of
// which matches its recorded rank; the 1 is the bonus token.
inline double expected_accept_len(const TreeTopology& topo, const MatchTable& table) {
    topo.validate();
    if (topo.max_depth() > table.k) throw TopologyError("tree deeper than match table");
    const long P = table.positions();
    if (P == 0) throw InputError("empty match table");
    const int n = topo.size();
    std::vector<uint8_t> match(static_cast<size_t>(n));
    long total_depth = 0;
    for (long pos = 0; pos < P; ++pos) {
        int best = 0;
        for (int i = 0; i < n; ++i) {
            const auto& nd = topo.nodes[size_t(i)];
            const int depth = topo.depth_of(i);
            const bool parent_ok = nd.parent == -1 || match[size_t(nd.parent)];
            match[size_t(i)] = parent_ok && table.rank_at(pos, depth) == nd.rank;
            if (match[size_t(i)]) best = std::max(best, depth);
        }
        total_depth += best;
    }
    return 1.0 + double(total_depth) / double(P);
}

struct GrowthStep {
    int parent = -1;  // index within the previous tree; -1 = root
    int rank = 0;
    int depth = 1;
    double gain = 0;  // expected-acceptance-length increment
};

// Nested proposal trees T_1..T_N; trees[i] has i+1 nodes and extends
// trees[i-1] by exactly the node described in steps[i].
struct ProposalTrees {
    std::vector<TreeTopology> trees;
    std::vector<GrowthStep> steps;
};

// Greedy growth: at each step every (parent, next-unused-rank) frontier
// candidate with depth <= K is scored by the fraction of positions whose
// whole root path matches; the best is appended (ties: smaller depth, then
// smaller rank, then earlier parent). Zero-gain candidates still pad the
// sequence up to N.
inline ProposalTrees greedy_grow(const MatchTable& table, int N) {
    table.validate();
    if (N < 1) throw InputError("greedy_grow: N must be at least 1");
    const long P = table.positions();
    if (P == 0) throw InputError("greedy_grow: empty match table");
    ProposalTrees out;
    TreeTopology topo;
    std::vector<std::vector<uint8_t>> match;  // per node, per position
    std::vector<int> child_count{0};          // index 0 = root, node i at i+1

    while (int(topo.nodes.size()) < N) {
        int best_parent = -2, best_rank = 0, best_depth = 0;
        long best_hits = -1;
        for (int parent = -1; parent < int(topo.nodes.size()); ++parent) {
            const int depth = parent == -1 ? 1 : topo.depth_of(parent) + 1;
            if (depth > table.k) continue;
            const int rank = child_count[size_t(parent + 1)];
            if (rank >= table.top_m) continue;
            long hits = 0;
            const uint8_t* pm = parent == -1 ? nullptr : match[size_t(parent)].data();
            for (long pos = 0; pos < P; ++pos)
                if ((!pm || pm[pos]) && table.rank_at(pos, depth) == rank) ++hits;
            const bool better =
                hits > best_hits ||
                (hits == best_hits &&
                 (depth < best_depth || (depth == best_depth && (rank < best_rank ||
                                                                 (rank == best_rank &&
                                                                  parent < best_parent)))));
            if (better) {
                best_hits = hits;
                best_parent = parent;
                best_rank = rank;
                best_depth = depth;
            }
        }
        if (best_parent == -2) break;  // every frontier slot exhausted
        TreeTopology::Node node;
        node.parent = best_parent;
        node.rank = best_rank;
        topo.nodes.push_back(node);
        ++child_count[size_t(best_parent + 1)];
        child_count.push_back(0);
        std::vector<uint8_t> m(static_cast<size_t>(P));
        const uint8_t* pm = best_parent == -1 ? nullptr : match[size_t(best_parent)].data();
        for (long pos = 0; pos < P; ++pos)
            m[size_t(pos)] = (!pm || pm[size_t(pos)]) &&
                             table.rank_at(pos, best_depth) == best_rank;
        match.push_back(std::move(m));
        topo.validate();
        out.trees.push_back(topo);
        out.steps.push_back({best_parent, best_rank, best_depth, double(best_hits) / double(P)});
    }
    if (out.trees.empty()) throw TopologyError("greedy_grow: no feasible tree");
    return out;
}

struct TreeReportRow {
    int size = 0;
    double expected_len = 0;
    double tokens_per_sec = 0;
};

struct TreeSelection {
    TreeTopology chosen;
    int chosen_size = 0;
    std::vector<TreeReportRow> report;
};

inline void write_tree_report_csv(const std::string& path,
                                  const std::vector<TreeReportRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write tree report: " + path);
    out.precision(17);
    out << "size,expected_len,tokens_per_sec\n";
    for (const auto& r : rows)
        out << r.size << "," << r.expected_len << "," << r.tokens_per_sec << "\n";
}

inline std::vector<TreeReportRow> read_tree_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read tree report: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "size,expected_len,tokens_per_sec")
        throw IoError("tree report: bad header");
    std::vector<TreeReportRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        TreeReportRow r;
        char c1, c2;
        if (!(ss >> r.size >> c1 >> r.expected_len >> c2 >> r.tokens_per_sec) || c1 != ',' ||
            c2 != ',')
            throw IoError("tree report: bad row: " + line);
        rows.push_back(r);
    }
    return rows;
}

// Decode-throughput measurement over a strided subset of the proposal
// trees: median of `repeats` timed runs after one discarded warmup, with
// extra repeats when the spread exceeds 20% of the median. `measure`
// replaces the timed decode in tests.
template <typename T>
TreeSelection select_tree_by_throughput(
    const ProposalTrees& trees, const MatchTable& table, DecodeEngine<T>& engine,
    const std::vector<std::string>& prompts, const DecodeParams& params,
    const std::vector<int>& sizes, int repeats = 3,
    std::function<double(const TreeTopology&)> measure = nullptr) {
    if (trees.trees.empty()) throw InputError("tree selection: no candidate trees");
    if (!measure)
        measure = [&](const TreeTopology& topo) {
            auto [texts, met] = engine.decode(prompts, topo, params);
            return met.tokens_per_sec();
        };
    auto median = [](std::vector<double> xs) {
        std::sort(xs.begin(), xs.end());
        return xs[xs.size() / 2];
    };
    TreeSelection sel;
    double best = -1;
    for (int size : sizes) {
        if (size < 1 || size > int(trees.trees.size()))
            throw InputError("tree selection: size outside grown range");
        const TreeTopology& topo = trees.trees[size_t(size - 1)];
        measure(topo);  // warmup, discarded
        std::vector<double> runs;
        for (int r = 0; r < repeats; ++r) runs.push_back(measure(topo));
        double med = median(runs);
        const double spread =
            (*std::max_element(runs.begin(), runs.end()) -
             *std::min_element(runs.begin(), runs.end()));
        if (med > 0 && spread / med > 0.2) {  // noisy timing: widen the sample
            for (int r = 0; r < 2; ++r) runs.push_back(measure(topo));
            med = median(runs);
        }
        TreeReportRow row{size, expected_accept_len(topo, table), med};
        sel.report.push_back(row);
        if (med > best) {
            best = med;
            sel.chosen = topo;
            sel.chosen_size = size;
        }
    }
    return sel;
}

}  // namespace hspec
