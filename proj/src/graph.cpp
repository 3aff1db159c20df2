#include "cohort/graph.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

namespace cohort {

void InteractionGraph::build_adjacency() {
    adjacency.assign(num_nodes, {});
    for (size_t e = 0; e < edges.size(); ++e)
        adjacency[edges[e].src].push_back(static_cast<int>(e));
}

InteractionGraph build_graph(const std::vector<Post>& posts,
                             const std::unordered_map<std::string, int>& user_index) {
    InteractionGraph graph;
    graph.num_nodes = static_cast<int>(user_index.size());
    std::map<std::pair<int, int>, std::vector<std::string>> pairs;
    for (const auto& p : posts) {
        if (!p.reply_to_author_id) continue;
        auto src_it = user_index.find(p.author_id);
        auto dst_it = user_index.find(*p.reply_to_author_id);
        if (src_it == user_index.end() || dst_it == user_index.end()) {
            graph.dropped_replies++;
            continue;
        }
        if (src_it->second == dst_it->second) graph.self_loops++;
        pairs[{src_it->second, dst_it->second}].push_back(p.post_id);
    }
    for (auto& [key, ids] : pairs) {
        InteractionGraph::Edge e;
        e.src = key.first;
        e.dst = key.second;
        e.weight = static_cast<int>(ids.size());
        e.post_ids = std::move(ids);
        graph.edges.push_back(std::move(e));
    }
    graph.build_adjacency();
    return graph;
}

void save_graph(const InteractionGraph& graph, const std::filesystem::path& file) {
    std::ofstream out(file);
    out << "# nodes\t" << graph.num_nodes << '\n';
    for (const auto& e : graph.edges)
        out << e.src << '\t' << e.dst << '\t' << e.weight << '\n';
}

InteractionGraph load_graph(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("missing " + file.string());
    InteractionGraph graph;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            size_t tab = line.find('\t');
            if (tab != std::string::npos) graph.num_nodes = std::stoi(line.substr(tab + 1));
            continue;
        }
        InteractionGraph::Edge e;
        if (std::sscanf(line.c_str(), "%d\t%d\t%d", &e.src, &e.dst, &e.weight) != 3)
            throw std::runtime_error("graph file: bad line: " + line);
        graph.num_nodes = std::max({graph.num_nodes, e.src + 1, e.dst + 1});
        graph.edges.push_back(std::move(e));
    }
    graph.build_adjacency();
    return graph;
}

}  // namespace cohort
