// Command-line surface: train-base, train-heads, find-tree, decode, bench.
// Exit codes: 0 ok, 2 config/validation, 3 I/O, 4 numeric failure.

#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hspec/hspec.hpp"

namespace {

using hspec::json;
using f32 = float;

int run_mapped(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const hspec::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const hspec::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const hspec::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const hspec::InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const hspec::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return 2;
    } catch (const hspec::TopologyError& e) {
        std::cerr << "topology error: " << e.what() << "\n";
        return 2;
    } catch (const hspec::StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 2;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

std::vector<std::string> read_prompt_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw hspec::IoError("cannot read prompt file: " + path);
    std::vector<std::string> prompts;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) prompts.push_back(line);
    if (prompts.empty()) throw hspec::InputError("prompt file has no prompts: " + path);
    return prompts;
}

std::map<std::string, std::string> parse_kv_pairs(const std::vector<std::string>& pairs,
                                                  const std::string& what) {
    std::map<std::string, std::string> out;
    for (const auto& p : pairs) {
        const size_t eq = p.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == p.size())
            throw hspec::ConfigError(what + " expects mode=path, got: " + p);
        out[p.substr(0, eq)] = p.substr(eq + 1);
    }
    return out;
}

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream out(path);
    if (!out) throw hspec::IoError("cannot write: " + path);
    out << body;
}

struct GlobalArgs {
    uint64_t seed = 0;
    bool seed_set = false;
    hspec::ModelConfig mc;
    hspec::TrainConfig tc;
    hspec::DecodeParams dp;
};

// --config JSON may carry {"model":…, "train":…, "decode":…} sections used
// as defaults; explicit flags still win where a flag exists.
void load_config_file(const std::string& path, GlobalArgs& g) {
    std::ifstream in(path);
    if (!in) throw hspec::IoError("cannot read config: " + path);
    json j = json::parse(in);
    if (j.contains("model")) from_json(j.at("model"), g.mc);
    if (j.contains("train")) from_json(j.at("train"), g.tc);
    if (j.contains("decode")) from_json(j.at("decode"), g.dp);
}

}  // namespace

int main(int argc, char** argv) {
    GlobalArgs g;
    // Pre-scan --config so its values become the defaults the flags override.
    const int prescan = run_mapped([&] {
        for (int i = 1; i + 1 < argc; ++i)
            if (std::string(argv[i]) == "--config") load_config_file(argv[i + 1], g);
    });
    if (prescan != 0) return prescan;

    CLI::App app{"speculative decoding workbench (byte-level transformer + draft heads)"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config with model/train/decode sections");
    app.add_option("--seed", g.seed, "override all RNG seeds")->each([&](const std::string&) {
        g.seed_set = true;
    });

    // ---- train-base ----
    auto* tb = app.add_subcommand("train-base", "pretrain the byte-level base model");
    std::string tb_corpus, tb_out = "base.ckpt", tb_loss_csv;
    int tb_epochs = 2;
    tb->add_option("--corpus", tb_corpus, "training text file")->required();
    tb->add_option("--out", tb_out, "checkpoint path");
    tb->add_option("--loss-csv", tb_loss_csv, "write loss curve CSV");
    tb->add_option("--epochs", tb_epochs);
    tb->add_option("--batch", g.tc.batch_size);
    tb->add_option("--seq-len", g.tc.seq_len);
    tb->add_option("--lr", g.tc.peak_lr);
    tb->add_option("--warmup", g.tc.warmup_steps);
    tb->add_option("--d-model", g.mc.d_model);
    tb->add_option("--layers", g.mc.n_layers);
    tb->add_option("--attn-heads", g.mc.n_heads);
    tb->add_option("--d-ff", g.mc.d_ff);
    tb->add_option("--max-seq-len", g.mc.max_seq_len);

    // ---- train-heads ----
    auto* th = app.add_subcommand("train-heads", "train draft heads against a frozen base");
    std::string th_base, th_corpus, th_out = "heads.ckpt", th_loss_csv;
    std::string th_mode = "hydra", th_objective = "teacher";
    int th_epochs = -1, th_k = 4, th_top_m = 10;
    double th_noise = 0.0;
    th->add_option("--base", th_base, "base checkpoint")->required();
    th->add_option("--corpus", th_corpus)->required();
    th->add_option("--mode", th_mode)->check(CLI::IsMember({"medusa", "hydra", "hydra_pp"}));
    th->add_option("--objective", th_objective)
        ->check(CLI::IsMember({"next_token", "teacher"}));
    th->add_option("--out", th_out);
    th->add_option("--loss-csv", th_loss_csv);
    th->add_option("--epochs", th_epochs, "default: 1 (medusa/hydra), 4 (hydra_pp)");
    th->add_option("--batch", g.tc.batch_size);
    th->add_option("--seq-len", g.tc.seq_len);
    th->add_option("--lr", g.tc.peak_lr);
    th->add_option("--warmup", g.tc.warmup_steps);
    th->add_option("--k", th_k, "number of heads / speculation depth");
    th->add_option("--top-m", th_top_m);
    th->add_option("--noise-alpha", th_noise);

    // ---- find-tree ----
    auto* ft = app.add_subcommand("find-tree", "discover a decoding tree from corpus statistics");
    std::string ft_base, ft_heads, ft_corpus, ft_out = "tree.json", ft_report;
    int ft_max_nodes = 100, ft_depth = 0, ft_positions = 512, ft_window = 64;
    int ft_bench_prompts = 16, ft_bench_max_new = 64, ft_batch = 1;
    std::string ft_sizes;
    ft->add_option("--base", ft_base)->required();
    ft->add_option("--heads", ft_heads)->required();
    ft->add_option("--corpus", ft_corpus)->required();
    ft->add_option("--max-nodes", ft_max_nodes);
    ft->add_option("--depth", ft_depth, "tree depth cap; default: the heads' K");
    ft->add_option("--batch", ft_batch, "batch size for throughput measurement");
    ft->add_option("--out", ft_out, "tree JSON path");
    ft->add_option("--report", ft_report, "size/expected-length/throughput CSV");
    ft->add_option("--positions", ft_positions, "corpus positions sampled for the match table");
    ft->add_option("--context-window", ft_window);
    ft->add_option("--bench-prompts", ft_bench_prompts);
    ft->add_option("--bench-max-new", ft_bench_max_new);
    ft->add_option("--sizes", ft_sizes, "comma-separated tree sizes to time (default ladder)");

    // ---- decode ----
    auto* dc = app.add_subcommand("decode", "speculative decoding over a prompt file");
    std::string dc_base, dc_heads, dc_tree, dc_criterion = "greedy", dc_prompt_file;
    std::string dc_metrics_json;
    std::vector<std::string> dc_prompts_inline;
    dc->add_option("--base", dc_base)->required();
    dc->add_option("--heads", dc_heads)->required();
    dc->add_option("--tree", dc_tree)->required();
    dc->add_option("--criterion", dc_criterion)->check(CLI::IsMember({"greedy", "typical"}));
    dc->add_option("--epsilon", g.dp.epsilon);
    dc->add_option("--temp", g.dp.tau);
    dc->add_option("--alpha", g.dp.alpha);
    dc->add_option("--prompt-file", dc_prompt_file, "one prompt per line");
    dc->add_option("--prompt", dc_prompts_inline, "inline prompt (repeatable)");
    dc->add_option("--batch", g.dp.batch);
    dc->add_option("--max-new", g.dp.max_new_tokens);
    dc->add_option("--stop", g.dp.stop);
    dc->add_option("--metrics-json", dc_metrics_json);

    // ---- bench ----
    auto* bn = app.add_subcommand("bench", "sweep modes x batches x criteria vs baseline");
    std::string bn_base, bn_modes = "", bn_batches = "1,4", bn_criteria = "greedy";
    std::string bn_tree_shared, bn_prompt_file, bn_out = "bench";
    std::vector<std::string> bn_heads_kv, bn_tree_kv;
    int bn_repeat = 1, bn_max_new = 64;
    bn->add_option("--base", bn_base)->required();
    bn->add_option("--heads", bn_heads_kv, "mode=checkpoint (repeatable)")->required();
    bn->add_option("--tree", bn_tree_kv, "mode=tree.json (repeatable)");
    bn->add_option("--tree-shared", bn_tree_shared, "fallback tree for modes without their own");
    bn->add_option("--modes", bn_modes, "subset of the provided heads (default: all)");
    bn->add_option("--batches", bn_batches);
    bn->add_option("--criteria", bn_criteria);
    bn->add_option("--repeat", bn_repeat, "timed repeats per cell; median kept");
    bn->add_option("--prompt-file", bn_prompt_file)->required();
    bn->add_option("--max-new", bn_max_new);
    bn->add_option("--epsilon", g.dp.epsilon);
    bn->add_option("--temp", g.dp.tau);
    bn->add_option("--out", bn_out, "report path prefix (.csv/.json appended)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    auto split_csv = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!item.empty()) out.push_back(item);
        return out;
    };

    if (tb->parsed())
        return run_mapped([&] {
            g.tc.corpus_path = tb_corpus;
            g.tc.epochs = tb_epochs;
            if (g.seed_set) {
                g.mc.rng_seed = g.seed;
                g.tc.rng_seed = g.seed;
            }
            g.mc.validate();
            g.tc.validate();
            hspec::Model<f32> model(g.mc);
            auto stats = hspec::train_base(model, g.tc);
            if (!tb_loss_csv.empty()) hspec::detail::write_loss_csv(tb_loss_csv, stats.curve);
            model.save(tb_out);
            std::cout << "held-out bits/byte: " << stats.heldout_bpb
                      << "  (unigram baseline: " << stats.unigram_bpb << ")\n";
            std::cout << "checkpoint: " << tb_out << "\n";
        });

    if (th->parsed())
        return run_mapped([&] {
            const hspec::HeadMode mode = hspec::head_mode_from_string(th_mode);
            g.tc.corpus_path = th_corpus;
            g.tc.objective = hspec::objective_from_string(th_objective);
            g.tc.noise_alpha = th_noise;
            g.tc.epochs = th_epochs > 0 ? th_epochs : (mode == hspec::HeadMode::hydra_pp ? 4 : 1);
            if (g.seed_set) g.tc.rng_seed = g.seed;
            if (mode == hspec::HeadMode::hydra_pp &&
                g.tc.objective == hspec::TrainObjective::next_token)
                std::cerr << "warning: teacher objective is the recommended recipe for hydra_pp\n";
            g.tc.validate();
            hspec::load_corpus(g.tc.corpus_path, g.tc.seq_len);  // validate before any I/O out
            auto base = hspec::Model<f32>::load(th_base);
            hspec::HeadsConfig hc = hspec::HeadsConfig::defaults_for(mode, base.config().d_model);
            hc.k = th_k;
            hc.top_m = th_top_m;
            hc.validate();
            hspec::DraftHeads<f32> heads(base.config(), hc, &base.tok_emb(),
                                         g.seed_set ? g.seed + 7 : 7);
            auto stats = hspec::train_heads(base, heads, g.tc);
            if (!th_loss_csv.empty()) hspec::detail::write_loss_csv(th_loss_csv, stats.curve);
            heads.save(th_out);
            std::cout << "final loss: " << std::get<2>(stats.curve.back()) << "\n";
            std::cout << "checkpoint: " << th_out << "\n";
        });

    if (ft->parsed())
        return run_mapped([&] {
            auto base = hspec::Model<f32>::load(ft_base);
            auto heads = hspec::DraftHeads<f32>::load(ft_heads);
            heads.bind_embedding(&base.tok_emb());
            const int K = ft_depth > 0 ? ft_depth : heads.config().k;
            if (K > heads.config().k)
                throw hspec::ConfigError("requested depth exceeds the heads' K");
            if (ft_max_nodes < 1) throw hspec::ConfigError("--max-nodes must be >= 1");
            hspec::Corpus corpus = hspec::load_corpus(ft_corpus, 256, 1024);
            hspec::Rng rng(g.seed_set ? g.seed : 1);
            std::vector<long> positions;
            for (int i = 0; i < ft_positions; ++i)
                positions.push_back(1 + long(rng.uniform_u64(uint64_t(corpus.bytes.size() - 1))));
            auto table = hspec::build_match_table(base, heads, corpus.bytes, positions, K,
                                                  heads.config().top_m, ft_window);
            auto grown = hspec::greedy_grow(table, ft_max_nodes);
            const int n_grown = int(grown.trees.size());
            std::vector<int> sizes;
            if (!ft_sizes.empty()) {
                for (const auto& s : split_csv(ft_sizes)) sizes.push_back(std::stoi(s));
            } else {
                for (int s : {1, 2, 4, 6, 9, 13, 18, 25, 36, 50, 70, 100})
                    if (s <= n_grown) sizes.push_back(s);
                if (sizes.empty() || sizes.back() != n_grown) sizes.push_back(n_grown);
            }
            std::vector<std::string> prompts;
            const int n_prompts = std::min<int>(ft_bench_prompts,
                                                int(corpus.heldout_offsets.size()));
            if (n_prompts < 1) throw hspec::InputError("corpus too small for bench prompts");
            for (int i = 0; i < n_prompts; ++i) {
                const long o = corpus.heldout_offsets[size_t(i)];
                prompts.emplace_back(reinterpret_cast<const char*>(corpus.bytes.data()) + o, 64);
            }
            hspec::DecodeParams dp;
            dp.criterion = hspec::AcceptCriterion::greedy;
            dp.max_new_tokens = ft_bench_max_new;
            dp.batch = ft_batch;
            hspec::DecodeEngine<f32> engine(base, heads);
            auto measure = [&](const hspec::TreeTopology& topo) {
                auto [texts, met, lat] = hspec::decode_chunked(engine, prompts, &topo, dp);
                (void)texts;
                (void)lat;
                return met.tokens_per_sec();
            };
            auto sel = hspec::select_tree_by_throughput(grown, table, engine, prompts, dp, sizes,
                                                        3, measure);
            hspec::save_topology_file(ft_out, sel.chosen);
            if (!ft_report.empty()) hspec::write_tree_report_csv(ft_report, sel.report);
            std::cout << "chosen tree size: " << sel.chosen_size
                      << " (expected acceptance length "
                      << hspec::expected_accept_len(sel.chosen, table) << ")\n";
            std::cout << "tree: " << ft_out << "\n";
        });

    if (dc->parsed())
        return run_mapped([&] {
            g.dp.criterion = hspec::criterion_from_string(dc_criterion);
            if (g.seed_set) g.dp.rng_seed = g.seed;
            g.dp.validate();
            auto base = hspec::Model<f32>::load(dc_base);
            auto heads = hspec::DraftHeads<f32>::load(dc_heads);
            heads.bind_embedding(&base.tok_emb());
            hspec::TreeTopology topo = hspec::load_topology_file(dc_tree);
            topo.validate();
            if (topo.max_depth() > heads.config().k)
                throw hspec::ConfigError("tree depth exceeds the heads' K");
            std::vector<std::string> prompts = dc_prompts_inline;
            if (!dc_prompt_file.empty())
                for (auto& p : read_prompt_file(dc_prompt_file)) prompts.push_back(std::move(p));
            if (prompts.empty()) throw hspec::InputError("no prompts given");
            hspec::DecodeEngine<f32> engine(base, heads);
            auto [texts, met, latency] = hspec::decode_chunked(engine, prompts, &topo, g.dp);
            for (const auto& t : texts) std::cout << t << "\n";
            json jm;
            to_json(jm, met);
            jm["criterion"] = dc_criterion;
            if (g.dp.criterion == hspec::AcceptCriterion::typical) {
                jm["tau"] = g.dp.tau;
                jm["epsilon"] = g.dp.epsilon;
                jm["alpha"] = g.dp.effective_alpha();
            }
            jm["batch"] = g.dp.batch;
            jm["tree_size"] = topo.size();
            jm["latency_sec"] = latency;
            if (!dc_metrics_json.empty()) write_text_file(dc_metrics_json, jm.dump(2) + "\n");
            std::cerr << "tokens/sec " << met.tokens_per_sec() << ", acceptance length "
                      << met.accept_len_mean() << "\n";
        });

    if (bn->parsed())
        return run_mapped([&] {
            auto heads_paths = parse_kv_pairs(bn_heads_kv, "--heads");
            auto tree_paths = parse_kv_pairs(bn_tree_kv, "--tree");
            std::vector<std::string> modes = split_csv(bn_modes);
            if (modes.empty())
                for (const auto& [m, p] : heads_paths) modes.push_back(m);
            auto base = hspec::Model<f32>::load(bn_base);
            std::vector<std::string> prompts = read_prompt_file(bn_prompt_file);
            if (g.seed_set) g.dp.rng_seed = g.seed;
            g.dp.max_new_tokens = bn_max_new;

            struct Cell {
                std::string mode;
                hspec::DraftHeads<f32> heads;
                hspec::TreeTopology topo;
            };
            std::vector<Cell> cells;
            int max_k = 1;
            for (const auto& m : modes) {
                if (!heads_paths.count(m))
                    throw hspec::ConfigError("no heads checkpoint given for mode " + m);
                auto h = hspec::DraftHeads<f32>::load(heads_paths.at(m));
                std::string tree_path;
                if (tree_paths.count(m)) {
                    tree_path = tree_paths.at(m);
                } else if (!bn_tree_shared.empty()) {
                    std::cerr << "warning: no tree for mode " << m << "; using shared tree\n";
                    tree_path = bn_tree_shared;
                } else {
                    throw hspec::ConfigError("no tree for mode " + m + " and no --tree-shared");
                }
                hspec::TreeTopology topo = hspec::load_topology_file(tree_path);
                topo.validate();
                if (topo.max_depth() > h.config().k)
                    throw hspec::ConfigError("tree depth exceeds K for mode " + m);
                max_k = std::max(max_k, h.config().k);
                cells.push_back({m, std::move(h), std::move(topo)});
            }

            std::vector<hspec::BenchRow> rows;
            for (const auto& bs : split_csv(bn_batches)) {
                const int batch = std::stoi(bs);
                for (const auto& cr : split_csv(bn_criteria)) {
                    hspec::DecodeParams dp = g.dp;
                    dp.criterion = hspec::criterion_from_string(cr);
                    dp.batch = batch;
                    dp.validate();

                    auto timed = [&](auto&& run) {
                        std::vector<std::pair<double, hspec::BenchRow>> reps;
                        for (int r = 0; r < std::max(1, bn_repeat); ++r) {
                            hspec::BenchRow row = run();
                            reps.emplace_back(row.metrics.tokens_per_sec(), row);
                        }
                        std::sort(reps.begin(), reps.end(),
                                  [](const auto& a, const auto& b) { return a.first < b.first; });
                        return reps[reps.size() / 2].second;
                    };

                    hspec::BenchRow base_row = timed([&] {
                        hspec::BenchRow row;
                        row.mode = "baseline";
                        row.criterion = cr;
                        row.batch = batch;
                        // Any heads work for the autoregressive path; reuse the first.
                        hspec::DecodeEngine<f32> engine(base, cells.front().heads);
                        auto [texts, met, lat] =
                            hspec::decode_chunked<f32>(engine, prompts, nullptr, dp);
                        (void)texts;
                        row.metrics = met;
                        row.latency_sec = lat;
                        return row;
                    });
                    base_row.validate(max_k);
                    rows.push_back(base_row);
                    const double base_tps = base_row.metrics.tokens_per_sec();

                    for (auto& cell : cells) {
                        hspec::BenchRow row = timed([&] {
                            hspec::BenchRow r;
                            r.mode = cell.mode;
                            r.criterion = cr;
                            r.batch = batch;
                            r.tree_size = cell.topo.size();
                            hspec::DecodeEngine<f32> engine(base, cell.heads);
                            auto [texts, met, lat] =
                                hspec::decode_chunked<f32>(engine, prompts, &cell.topo, dp);
                            (void)texts;
                            r.metrics = met;
                            r.latency_sec = lat;
                            return r;
                        });
                        row.relative_throughput = row.metrics.tokens_per_sec() / base_tps;
                        row.validate(max_k);
                        rows.push_back(row);
                    }
                }
            }
            hspec::write_bench_csv(bn_out + ".csv", rows);
            hspec::write_bench_json(bn_out + ".json", rows);
            for (const auto& r : rows)
                std::cout << r.mode << " criterion=" << r.criterion << " batch=" << r.batch
                          << " accept_len=" << r.metrics.accept_len_mean()
                          << " tokens/sec=" << r.metrics.tokens_per_sec()
                          << " rel=" << r.relative_throughput << "\n";
            std::cout << "reports: " << bn_out << ".csv, " << bn_out << ".json\n";
        });

    return 2;  // no subcommand matched (require_subcommand should prevent this)
}
