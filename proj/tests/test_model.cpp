#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "hspec/model.hpp"

using namespace hspec;

namespace {

ModelConfig tiny_config(int d = 16, int layers = 2, int heads = 2) {
    ModelConfig mc;
    mc.vocab_size = 61;
    mc.d_model = d;
    mc.n_layers = layers;
    mc.n_heads = heads;
    mc.d_ff = 2 * d;
    mc.max_seq_len = 48;
    return mc;
}

std::vector<int> random_tokens(int n, int vocab, Rng& rng) {
    std::vector<int> t(static_cast<size_t>(n));
    for (auto& v : t) v = int(rng.uniform_u64(uint64_t(vocab)));
    return t;
}

// Prefill all of `prompt` committed; cache.len == prompt.size() afterwards.
template <typename T>
void prefill_all(Model<T>& m, KVCache<T>& cache, const std::vector<int>& prompt) {
    m.forward_cached(prompt, 1, int(prompt.size()), cache);
    std::vector<int> keep(prompt.size());
    for (size_t i = 0; i < keep.size(); ++i) keep[i] = int(i);
    cache.commit(0, keep);
}

// Random tree with bounded depth; node i's parent is -1 or an earlier node,
// rank assigned contiguously per parent.
TreeTopology random_topology(int n_nodes, int max_depth, Rng& rng) {
    TreeTopology t;
    std::vector<int> child_count(static_cast<size_t>(n_nodes) + 1, 0);  // slot 0 = root
    for (int i = 0; i < n_nodes; ++i) {
        std::vector<int> cands = {-1};
        for (int j = 0; j < i; ++j)
            if (t.depth_of(j) < max_depth) cands.push_back(j);
        const int parent = cands[size_t(rng.uniform_u64(uint64_t(cands.size())))];
        t.nodes.push_back({parent, child_count[size_t(parent + 1)]++});
    }
    t.validate();
    return t;
}

}  // namespace

TEST(Topology, ValidationAndPaths) {
    TreeTopology bad1;
    bad1.nodes = {{0, 0}};  // parent not before child
    EXPECT_THROW(bad1.validate(), TopologyError);
    TreeTopology bad2;
    bad2.nodes = {{-1, 0}, {-1, 2}};  // rank gap
    EXPECT_THROW(bad2.validate(), TopologyError);
    TreeTopology bad3;
    bad3.nodes = {{-3, 0}};
    EXPECT_THROW(bad3.validate(), TopologyError);

    TreeTopology t = TreeTopology::chain(4);
    t.validate();
    EXPECT_EQ(t.max_depth(), 4);
    EXPECT_EQ(t.depth_of(3), 4);
    EXPECT_EQ(t.path_to(3), (std::vector<int>{0, 1, 2, 3}));

    TreeTopology y;  // root -> {0,1}, 0 -> {2,3}
    y.nodes = {{-1, 0}, {-1, 1}, {0, 0}, {0, 1}};
    y.validate();
    EXPECT_EQ(y.children_of(-1), (std::vector<int>{0, 1}));
    EXPECT_EQ(y.children_of(0), (std::vector<int>{2, 3}));
    EXPECT_EQ(y.path_to(3), (std::vector<int>{0, 3}));

    const std::string path =
        (std::filesystem::temp_directory_path() / "hspec_topo_test.json").string();
    save_topology_file(path, y);
    TreeTopology back = load_topology_file(path);
    ASSERT_EQ(back.size(), y.size());
    for (int i = 0; i < y.size(); ++i) {
        EXPECT_EQ(back.nodes[size_t(i)].parent, y.nodes[size_t(i)].parent);
        EXPECT_EQ(back.nodes[size_t(i)].rank, y.nodes[size_t(i)].rank);
    }
    std::remove(path.c_str());
    EXPECT_THROW(load_topology_file("/nonexistent/topo.json"), IoError);
}

TEST(TreeMask, HandCaseAndErrors) {
    TreeTopology t;  // A, B root children; C under A
    t.nodes = {{-1, 0}, {-1, 1}, {0, 0}};
    auto masks = build_tree_mask(t, 3, 2);
    ASSERT_EQ(masks.size(), 2u);
    const TreeMask& m = masks[0];
    EXPECT_EQ(m.n_nodes, 3);
    EXPECT_EQ(m.width(), 6);
    // Siblings share the position; the child sits one deeper.
    EXPECT_EQ(m.positions, (std::vector<int>{3, 3, 4}));
    // C attends the prefix, A, and itself - never its uncle B.
    const std::vector<uint8_t> c_row(m.allow.begin() + 2 * m.width(), m.allow.end());
    EXPECT_EQ(c_row, (std::vector<uint8_t>{1, 1, 1, 1, 0, 1}));
    // A attends prefix + self only.
    const std::vector<uint8_t> a_row(m.allow.begin(), m.allow.begin() + m.width());
    EXPECT_EQ(a_row, (std::vector<uint8_t>{1, 1, 1, 1, 0, 0}));

    EXPECT_THROW(build_tree_mask(t, 0), InputError);
    TreeTopology bad;
    bad.nodes = {{1, 0}, {-1, 0}};
    EXPECT_THROW(build_tree_mask(bad, 3), TopologyError);
}

TEST(RawOps, ArgmaxTiesAndSoftmaxRow) {
    std::vector<float> v = {1.0f, 3.0f, 3.0f, 0.5f};
    EXPECT_EQ(raw::argmax_row(v.data(), 4), 1);  // tie -> smaller id
    std::vector<float> r = {0.3f, -2.0f, 1.7f, 0.0f, 4.2f};
    raw::softmax_row(r.data(), 5);
    double s = 0;
    for (float x : r) {
        EXPECT_GT(x, 0.0f);
        s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(ModelForward, ShapesAndValidation) {
    Model<float> m(tiny_config());
    auto out = m.forward_train({5, 9}, 2, 1);
    EXPECT_EQ(out.logits.shape(), (std::vector<int>{2, 61}));
    EXPECT_EQ(out.hidden.shape(), (std::vector<int>{2, 16}));
    EXPECT_THROW(m.forward_train({1, 2, 3}, 2, 2), ShapeError);
    EXPECT_THROW(m.forward_train({61}, 1, 1), InputError);
    EXPECT_THROW(m.forward_train(std::vector<int>(64, 0), 1, 64), InputError);
}

TEST(ModelForward, BatchRowsMatchSingleSequenceRuns) {
    Model<float> m(tiny_config());
    Rng rng(3);
    auto s1 = random_tokens(7, 61, rng);
    auto s2 = random_tokens(7, 61, rng);
    std::vector<int> both = s1;
    both.insert(both.end(), s2.begin(), s2.end());
    auto joint = m.forward_train(both, 2, 7);
    auto a = m.forward_train(s1, 1, 7);
    auto b = m.forward_train(s2, 1, 7);
    for (long i = 0; i < 7 * 61; ++i) {
        EXPECT_NEAR(joint.logits.ptr()[i], a.logits.ptr()[i], 1e-5);
        EXPECT_NEAR(joint.logits.ptr()[7 * 61 + i], b.logits.ptr()[i], 1e-5);
    }
}

TEST(ModelForward, CausalityExactUnderSuffixEdits) {
    Model<float> m(tiny_config());
    Rng rng(4);
    auto toks = random_tokens(9, 61, rng);
    auto base = m.forward_train(toks, 1, 9);
    auto edited = toks;
    for (int p = 5; p < 9; ++p) edited[size_t(p)] = (edited[size_t(p)] + 11) % 61;
    auto out = m.forward_train(edited, 1, 9);
    for (long i = 0; i < 5 * 16; ++i)
        EXPECT_EQ(base.hidden.ptr()[i], out.hidden.ptr()[i]) << "row " << i / 16;
    // And the edited tail does change.
    double diff = 0;
    for (long i = 5 * 16; i < 9 * 16; ++i)
        diff += std::abs(double(base.hidden.ptr()[i]) - double(out.hidden.ptr()[i]));
    EXPECT_GT(diff, 1e-3);
}

TEST(ModelForward, IncrementalMatchesTrainPath) {
    Model<float> m(tiny_config());
    Rng rng(5);
    auto toks = random_tokens(8, 61, rng);
    auto train = m.forward_train(toks, 1, 8);

    KVCache<float> cache = m.make_cache(1);
    std::vector<float> last;
    for (int t = 0; t < 8; ++t) {
        auto step = m.forward_cached({toks[size_t(t)]}, 1, 1, cache);
        cache.commit(0, {0});
        last = step.logits;
    }
    for (int v = 0; v < 61; ++v)
        EXPECT_NEAR(last[size_t(v)], train.logits.ptr()[size_t(7) * 61 + v], 1e-4);
}

TEST(ModelForward, ChainMaskBitwiseEqualsIncremental) {
    Model<float> m(tiny_config());
    Rng rng(6);
    auto prompt = random_tokens(5, 61, rng);
    auto block = random_tokens(4, 61, rng);

    KVCache<float> inc = m.make_cache(1);
    prefill_all(m, inc, prompt);
    std::vector<std::vector<float>> inc_logits;
    for (int t = 0; t < 4; ++t) {
        auto step = m.forward_cached({block[size_t(t)]}, 1, 1, inc);
        inc_logits.push_back(step.logits);
        inc.commit(0, {0});
    }

    KVCache<float> packed = m.make_cache(1);
    prefill_all(m, packed, prompt);
    // Row 0 is a plain causal lead row; rows 1..3 are a depth-3 chain.
    auto masks = build_tree_mask(TreeTopology::chain(3), int(prompt.size()) + 1);
    auto out = m.forward_cached(block, 1, 4, packed, &masks);
    for (int r = 0; r < 4; ++r)
        for (int v = 0; v < 61; ++v)
            EXPECT_EQ(out.logits[size_t(r) * 61 + v], inc_logits[size_t(r)][size_t(v)])
                << "row " << r << " vocab " << v;
}

TEST(ModelForward, PackedTreeMatchesPerPathOracle) {
    Model<float> m(tiny_config());
    Rng rng(7);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 1 + int(rng.uniform_u64(12));
        TreeTopology topo = random_topology(n, 4, rng);
        auto prompt = random_tokens(3 + int(rng.uniform_u64(4)), 61, rng);
        auto node_tok = random_tokens(n, 61, rng);

        KVCache<float> cache = m.make_cache(1);
        prefill_all(m, cache, prompt);
        auto masks = build_tree_mask(topo, int(prompt.size()));
        auto packed = m.forward_cached(node_tok, 1, n, cache, &masks);

        for (int i = 0; i < n; ++i) {
            std::vector<int> seq = prompt;
            for (int nd : topo.path_to(i)) seq.push_back(node_tok[size_t(nd)]);
            auto ref = m.forward_train(seq, 1, int(seq.size()));
            const float* want = ref.logits.ptr() + (seq.size() - 1) * 61;
            for (int v = 0; v < 61; ++v)
                EXPECT_NEAR(packed.logits[size_t(i) * 61 + v], want[v], 1e-4)
                    << "trial " << trial << " node " << i << " vocab " << v;
        }
    }
}

TEST(ModelForward, TreeCommitThenContinueIsCoherent) {
    Model<float> m(tiny_config());
    Rng rng(8);
    auto prompt = random_tokens(4, 61, rng);
    TreeTopology topo;  // two root children, one grandchild under node 1
    topo.nodes = {{-1, 0}, {-1, 1}, {1, 0}};
    auto node_tok = random_tokens(3, 61, rng);

    KVCache<float> cache = m.make_cache(1);
    prefill_all(m, cache, prompt);
    auto masks = build_tree_mask(topo, int(prompt.size()));
    m.forward_cached(node_tok, 1, 3, cache, &masks);
    cache.commit(0, {1, 2});  // keep the path node1 -> node2
    EXPECT_EQ(cache.len[0], 6);

    const int y = 17;
    auto step = m.forward_cached({y}, 1, 1, cache);

    std::vector<int> seq = prompt;
    seq.push_back(node_tok[1]);
    seq.push_back(node_tok[2]);
    seq.push_back(y);
    auto ref = m.forward_train(seq, 1, int(seq.size()));
    const float* want = ref.logits.ptr() + (seq.size() - 1) * 61;
    for (int v = 0; v < 61; ++v) EXPECT_NEAR(step.logits[size_t(v)], want[v], 1e-4);
}

TEST(KVCacheOps, CommitValidation) {
    ModelConfig mc = tiny_config();
    mc.max_seq_len = 8;
    Model<float> m(mc);
    KVCache<float> cache = m.make_cache(1);
    m.forward_cached({1, 2, 3}, 1, 3, cache);
    EXPECT_THROW(cache.commit(0, {2, 1}), StateError);
    EXPECT_THROW(cache.commit(0, {1, 1}), StateError);
    cache.commit(0, {0, 1, 2});
    EXPECT_EQ(cache.len[0], 3);
    m.forward_cached({4, 5, 6, 7, 8}, 1, 5, cache);
    EXPECT_THROW(cache.commit(0, std::vector<int>{0, 1, 2, 3, 4, 5}), StateError);  // past max_len
}

TEST(ModelForward, CachedPathValidation) {
    ModelConfig mc = tiny_config();
    mc.max_seq_len = 6;
    Model<float> m(mc);
    KVCache<float> cache = m.make_cache(1);
    EXPECT_THROW(m.forward_cached(std::vector<int>(7, 1), 1, 7, cache), InputError);  // overflow
    EXPECT_THROW(m.forward_cached({1}, 2, 1, cache), ShapeError);                     // batch
    EXPECT_THROW(m.forward_cached({61}, 1, 1, cache), InputError);                    // token range

    prefill_all(m, cache, {1, 2});
    auto masks = build_tree_mask(TreeTopology::chain(2), 5);  // prefix_len != len
    EXPECT_THROW(m.forward_cached({3, 4}, 1, 2, cache, &masks), ShapeError);
    auto bad = build_tree_mask(TreeTopology::chain(2), 2);
    bad[0].allow.pop_back();
    EXPECT_THROW(m.forward_cached({3, 4}, 1, 2, cache, &bad), ShapeError);
}

TEST(ModelCheckpoint, RoundTripAndCorruption) {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "hspec_model_ckpt";
    fs::create_directories(dir);
    const std::string p1 = (dir / "a.ckpt").string();
    const std::string p2 = (dir / "b.ckpt").string();

    Model<float> m(tiny_config(16, 1, 2));
    m.save(p1);
    Model<float> back = Model<float>::load(p1);
    back.save(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    EXPECT_EQ(s1, s2);
    EXPECT_FALSE(s1.empty());

    // Flip the final payload byte: crc32 must catch it.
    std::string corrupted = s1;
    corrupted.back() = char(corrupted.back() ^ 0x5a);
    const std::string p3 = (dir / "c.ckpt").string();
    std::ofstream(p3, std::ios::binary).write(corrupted.data(), std::streamsize(corrupted.size()));
    EXPECT_THROW(Model<float>::load(p3), IoError);

    EXPECT_THROW(Model<float>::load((dir / "missing.ckpt").string()), IoError);

    // Header advertises a wider model than the stored tensors.
    Checkpoint cp = load_checkpoint_file(p1);
    nlohmann::json meta = cp.meta;
    meta["d_model"] = 32;
    const std::string p4 = (dir / "d.ckpt").string();
    save_checkpoint_file(p4, meta, cp.tensors);
    try {
        Model<float>::load(p4);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("shape mismatch"), std::string::npos);
    }
    fs::remove_all(dir);
}
