#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "hspec/engine.hpp"
#include "hspec/tree_search.hpp"

namespace hspec {

// One benchmark configuration's measurements. latency_sec is mean wall
// time per sequence (a sequence's latency is its batch's wall time).
struct BenchRow {
    std::string mode;       // baseline | medusa | hydra | hydra_pp
    std::string criterion;  // greedy | typical
    int batch = 1;
    int tree_size = 0;  // 0 for the autoregressive baseline
    DecodeMetrics metrics;
    double latency_sec = 0;
    double relative_throughput = 1.0;

    void validate(int k) const {
        if (!(metrics.tokens_per_sec() > 0)) throw InputError("bench row: no throughput");
        const double al = metrics.accept_len_mean();
        if (al < 1.0 || al > double(k + 1)) throw InputError("bench row: acceptance length range");
    }
};

namespace detail {

inline void merge_metrics(DecodeMetrics& acc, const DecodeMetrics& m) {
    acc.tokens += m.tokens;
    acc.steps += m.steps;
    acc.seconds += m.seconds;
    acc.t_base_forward += m.t_base_forward;
    acc.t_prefix_attention += m.t_prefix_attention;
    acc.t_verify += m.t_verify;
    acc.t_commit += m.t_commit;
    acc.truncated_sequences += m.truncated_sequences;
    if (acc.t_per_head.size() < m.t_per_head.size()) acc.t_per_head.resize(m.t_per_head.size());
    for (size_t i = 0; i < m.t_per_head.size(); ++i) acc.t_per_head[i] += m.t_per_head[i];
}

}  // namespace detail

// Decode all prompts in groups of params.batch; metrics are summed across
// groups. Returns texts in prompt order plus mean per-sequence latency.
template <typename T>
std::tuple<std::vector<std::string>, DecodeMetrics, double> decode_chunked(
    DecodeEngine<T>& engine, const std::vector<std::string>& prompts, const TreeTopology* topo,
    const DecodeParams& params) {
    std::vector<std::string> texts;
    DecodeMetrics total;
    double latency_weighted = 0;
    for (size_t lo = 0; lo < prompts.size(); lo += size_t(params.batch)) {
        const size_t hi = std::min(prompts.size(), lo + size_t(params.batch));
        std::vector<std::string> group(prompts.begin() + long(lo), prompts.begin() + long(hi));
        auto [t, m] = topo ? engine.decode(group, *topo, params)
                           : engine.autoregressive(group, params);
        for (auto& s : t) texts.push_back(std::move(s));
        latency_weighted += m.seconds * double(hi - lo);
        detail::merge_metrics(total, m);
    }
    return {std::move(texts), total, latency_weighted / double(prompts.size())};
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write bench report: " + path);
    out.precision(17);
    out << "mode,criterion,batch,tree_size,accept_len_mean,tokens_per_sec,relative_throughput,"
           "latency_sec,base_forward_ms,prefix_attention_ms,heads_ms,verify_ms,commit_ms\n";
    for (const auto& r : rows) {
        double heads_ms = 0;
        for (double h : r.metrics.t_per_head) heads_ms += h * 1e3;
        out << r.mode << "," << r.criterion << "," << r.batch << "," << r.tree_size << ","
            << r.metrics.accept_len_mean() << "," << r.metrics.tokens_per_sec() << ","
            << r.relative_throughput << "," << r.latency_sec << ","
            << r.metrics.t_base_forward * 1e3 << "," << r.metrics.t_prefix_attention * 1e3 << ","
            << heads_ms << "," << r.metrics.t_verify * 1e3 << "," << r.metrics.t_commit * 1e3
            << "\n";
    }
}

inline void write_bench_json(const std::string& path, const std::vector<BenchRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json jm;
        to_json(jm, r.metrics);
        arr.push_back({{"mode", r.mode},
                       {"criterion", r.criterion},
                       {"batch", r.batch},
                       {"tree_size", r.tree_size},
                       {"latency_sec", r.latency_sec},
                       {"relative_throughput", r.relative_throughput},
                       {"metrics", jm}});
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot write bench report: " + path);
    out << arr.dump(2) << "\n";
}

}  // namespace hspec
