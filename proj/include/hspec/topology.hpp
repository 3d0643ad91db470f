#pragma once

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hspec/common.hpp"

namespace hspec {

// Static candidate-tree shape. Nodes are stored in topological order
// (parents precede children); parent -1 marks a root child. rank is the
// child's index among its siblings, which maps to the rank-th proposal
// of the draft head at the node's depth.
struct TreeTopology {
    struct Node {
        int parent = -1;
        int rank = 0;
    };
    std::vector<Node> nodes;

    int size() const { return int(nodes.size()); }
    int depth_of(int i) const {
        int d = 0;
        for (int cur = i; cur != -1; cur = nodes[size_t(cur)].parent) ++d;
        return d;
    }
    int max_depth() const {
        int d = 0;
        for (int i = 0; i < size(); ++i) d = std::max(d, depth_of(i));
        return d;
    }
    std::vector<int> children_of(int parent) const {
        std::vector<int> out;
        for (int i = 0; i < size(); ++i)
            if (nodes[size_t(i)].parent == parent) out.push_back(i);
        return out;
    }
    std::vector<int> path_to(int i) const {  // root-child .. i
        std::vector<int> p;
        for (int cur = i; cur != -1; cur = nodes[size_t(cur)].parent) p.push_back(cur);
        std::reverse(p.begin(), p.end());
        return p;
    }

    void validate() const {
        for (int i = 0; i < size(); ++i) {
            const auto& n = nodes[size_t(i)];
            if (n.parent >= i) throw TopologyError("topology: parent must precede child");
            if (n.parent < -1) throw TopologyError("topology: bad parent index");
            if (n.rank < 0) throw TopologyError("topology: negative rank");
        }
        // Sibling ranks distinct and contiguous from 0.
        for (int p = -1; p < size(); ++p) {
            auto kids = children_of(p);
            std::vector<int> ranks;
            for (int c : kids) ranks.push_back(nodes[size_t(c)].rank);
            std::sort(ranks.begin(), ranks.end());
            for (size_t r = 0; r < ranks.size(); ++r)
                if (ranks[r] != int(r))
                    throw TopologyError("topology: sibling ranks must be contiguous from 0");
        }
    }

    static TreeTopology chain(int k) {
        TreeTopology t;
        for (int i = 0; i < k; ++i) t.nodes.push_back({i - 1, 0});
        return t;
    }
};

inline void to_json(nlohmann::json& j, const TreeTopology& t) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& n : t.nodes) nodes.push_back({{"parent", n.parent}, {"rank", n.rank}});
    j = nlohmann::json{{"k", t.max_depth()}, {"nodes", nodes}};
}
inline void from_json(const nlohmann::json& j, TreeTopology& t) {
    t.nodes.clear();
    for (const auto& n : j.at("nodes"))
        t.nodes.push_back({n.at("parent").get<int>(), n.at("rank").get<int>()});
    t.validate();
}

inline TreeTopology load_topology_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("topology: cannot open: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError(std::string("topology: parse failure: ") + e.what());
    }
    return j.get<TreeTopology>();
}

inline void save_topology_file(const std::string& path, const TreeTopology& t) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("topology: cannot open for write: " + path);
    nlohmann::json j = t;
    f << j.dump(2) << "\n";
    if (!f) throw IoError("topology: write failed: " + path);
}

}  // namespace hspec
