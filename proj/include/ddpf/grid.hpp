#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace ddpf {

using NodeId = int;

/// Unordered node pair stored with first < second.
struct NodePair {
    NodeId first = 0;
    NodeId second = 0;

    friend bool operator==(const NodePair&, const NodePair&) = default;
    friend auto operator<=>(const NodePair&, const NodePair&) = default;
};

inline NodePair make_pair_sorted(NodeId a, NodeId b)
{
    return a < b ? NodePair{a, b} : NodePair{b, a};
}

/// pi-equivalent line: series admittance g + jb and one shunt admittance per line end.
struct LineParams {
    double g = 0.0;
    double b = 0.0;
    double g_shunt_from = 0.0;
    double b_shunt_from = 0.0;
    double g_shunt_to = 0.0;
    double b_shunt_to = 0.0;

    LineParams swapped_ends() const
    {
        return LineParams{g, b, g_shunt_to, b_shunt_to, g_shunt_from, b_shunt_from};
    }
};

/// Radial network of buses and pi-parameterized lines.
///
/// Nodes are kept sorted; `index_of` maps a node id onto its dense position
/// 0..N_b-1. Lines are kept in the order they were supplied so that
/// `validate_radial` can report ordering problems; `Grid::canonical` builds a
/// grid whose edges already follow the lexicographic convention.
class Grid {
public:
    Grid() = default;

    Grid(std::vector<NodeId> nodes, std::vector<NodePair> edges, std::vector<LineParams> lines,
         std::vector<double> voltages = {})
        : nodes_(std::move(nodes)), edges_(std::move(edges)), lines_(std::move(lines)), voltages_(std::move(voltages))
    {
        std::sort(nodes_.begin(), nodes_.end());
        if (std::adjacent_find(nodes_.begin(), nodes_.end()) != nodes_.end())
            throw Error(ErrorKind::InvalidParameter, "duplicate node id");
        for (NodeId id : nodes_)
            if (id < 0) throw Error(ErrorKind::InvalidParameter, "node ids must be nonnegative");
        if (voltages_.empty()) voltages_.assign(nodes_.size(), 1.0);
        if (voltages_.size() != nodes_.size())
            throw Error(ErrorKind::DimensionMismatch, "voltage vector length differs from node count");
        if (lines_.size() != edges_.size())
            throw Error(ErrorKind::DimensionMismatch, "one LineParams entry is required per edge");
        for (double v : voltages_)
            if (!(v > 0.0)) throw Error(ErrorKind::NonpositiveVoltage, "voltage magnitudes must be positive");
        for (std::size_t l = 0; l < edges_.size(); ++l) {
            const auto& e = edges_[l];
            if (!(e.first < e.second))
                throw Error(ErrorKind::InvalidParameter, "edge " + std::to_string(l) + " must satisfy i < j");
            index_of(e.first);
            index_of(e.second);
            const auto& p = lines_[l];
            if (p.g * p.g + p.b * p.b <= 0.0)
                throw Error(ErrorKind::InvalidParameter, "edge " + std::to_string(l) + " has zero series admittance");
            if (p.g_shunt_from < 0.0 || p.g_shunt_to < 0.0)
                throw Error(ErrorKind::InvalidParameter, "edge " + std::to_string(l) + " has negative shunt conductance");
        }
    }

    /// Builds a grid with edges sorted into the lexicographic order convention.
    static Grid canonical(std::vector<NodeId> nodes, std::vector<std::pair<NodePair, LineParams>> lines,
                          std::vector<double> voltages = {})
    {
        std::sort(lines.begin(), lines.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<NodePair> edges;
        std::vector<LineParams> params;
        for (auto& [e, p] : lines) {
            edges.push_back(e);
            params.push_back(p);
        }
        return Grid(std::move(nodes), std::move(edges), std::move(params), std::move(voltages));
    }

    std::size_t node_count() const { return nodes_.size(); }
    std::size_t edge_count() const { return edges_.size(); }
    const std::vector<NodeId>& nodes() const { return nodes_; }
    const std::vector<NodePair>& edges() const { return edges_; }
    const std::vector<LineParams>& lines() const { return lines_; }
    const std::vector<double>& voltages() const { return voltages_; }

    bool has_node(NodeId id) const { return std::binary_search(nodes_.begin(), nodes_.end(), id); }

    std::size_t index_of(NodeId id) const
    {
        auto it = std::lower_bound(nodes_.begin(), nodes_.end(), id);
        if (it == nodes_.end() || *it != id) throw Error(ErrorKind::UnknownNode, "node " + std::to_string(id));
        return static_cast<std::size_t>(it - nodes_.begin());
    }

    double voltage(NodeId id) const { return voltages_[index_of(id)]; }

    /// Position of {a,b} in the edge list, if it is a line of the grid.
    std::optional<std::size_t> edge_index(NodeId a, NodeId b) const
    {
        const NodePair key = make_pair_sorted(a, b);
        for (std::size_t l = 0; l < edges_.size(); ++l)
            if (edges_[l] == key) return l;
        return std::nullopt;
    }

private:
    std::vector<NodeId> nodes_;
    std::vector<NodePair> edges_;
    std::vector<LineParams> lines_;
    std::vector<double> voltages_;
};

inline std::string describe_pairs(const std::vector<NodePair>& pairs)
{
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < pairs.size(); ++i)
        os << (i ? "," : "") << "{" << pairs[i].first << "," << pairs[i].second << "}";
    os << "}";
    return os.str();
}

/// Throws unless the grid is a tree whose edges follow the lexicographic order.
inline void validate_radial(const Grid& grid)
{
    const std::size_t n = grid.node_count();
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t v) {
        while (parent[v] != v) v = parent[v] = parent[parent[v]];
        return v;
    };

    std::vector<NodePair> closing;
    for (const auto& e : grid.edges()) {
        auto a = find(grid.index_of(e.first));
        auto b = find(grid.index_of(e.second));
        if (a == b)
            closing.push_back(e);
        else
            parent[a] = b;
    }
    if (!closing.empty()) throw Error(ErrorKind::CycleDetected, "edges closing a cycle: " + describe_pairs(closing));

    std::vector<std::vector<NodeId>> components;
    std::vector<int> slot(n, -1);
    for (std::size_t v = 0; v < n; ++v) {
        auto r = find(v);
        if (slot[r] < 0) {
            slot[r] = static_cast<int>(components.size());
            components.emplace_back();
        }
        components[static_cast<std::size_t>(slot[r])].push_back(grid.nodes()[v]);
    }
    if (components.size() > 1) {
        std::ostringstream os;
        os << components.size() << " components:";
        for (const auto& c : components) {
            os << " [";
            for (std::size_t i = 0; i < c.size(); ++i) os << (i ? "," : "") << c[i];
            os << "]";
        }
        throw Error(ErrorKind::Disconnected, os.str());
    }

    const auto& edges = grid.edges();
    for (std::size_t l = 1; l < edges.size(); ++l)
        if (!(edges[l - 1] < edges[l])) throw Error(ErrorKind::EdgeOrderViolation, "edge index " + std::to_string(l));
}

/// Neighbours of node i, ascending.
inline std::vector<NodeId> adjacent_nodes(const Grid& grid, NodeId i)
{
    grid.index_of(i);
    std::vector<NodeId> out;
    for (const auto& e : grid.edges()) {
        if (e.first == i) out.push_back(e.second);
        if (e.second == i) out.push_back(e.first);
    }
    std::sort(out.begin(), out.end());
    return out;
}

/// Every unordered node pair in lexicographic order, N_b(N_b-1)/2 entries.
inline std::vector<NodePair> all_node_pairs(const Grid& grid)
{
    std::vector<NodePair> out;
    const auto& v = grid.nodes();
    out.reserve(v.size() * (v.size() ? v.size() - 1 : 0) / 2);
    for (std::size_t a = 0; a < v.size(); ++a)
        for (std::size_t b = a + 1; b < v.size(); ++b) out.push_back({v[a], v[b]});
    return out;
}

/// Five-bus microgrid used throughout the case study: edges {1,2},{2,4},{2,5},{3,5},
/// every line g = 2 pu, b = -20 pu, no shunts, flat 1 pu voltages.
inline Grid case_study_grid()
{
    const LineParams line{2.0, -20.0, 0.0, 0.0, 0.0, 0.0};
    return Grid({1, 2, 3, 4, 5}, {{1, 2}, {2, 4}, {2, 5}, {3, 5}}, {line, line, line, line});
}

// ---------------------------------------------------------------------------
// JSON grid description
//
//   {
//     "nodes":    [1, 2, 3, 4, 5],
//     "voltages": [1.0, 1.0, 1.0, 1.0, 1.0],          optional, default 1.0
//     "lines": [
//       {"from": 1, "to": 2, "g": 2.0, "b": -20.0,
//        "g_shunt_from": 0.0, "b_shunt_from": 0.0,     optional, default 0.0
//        "g_shunt_to": 0.0,   "b_shunt_to": 0.0}       optional, default 0.0
//     ]
//   }
//
// Lines may be listed in any order or orientation; they are canonicalized on load.
// ---------------------------------------------------------------------------

namespace detail {

inline const nlohmann::json& require_key(const nlohmann::json& j, const std::string& key, const std::string& where)
{
    if (!j.is_object() || !j.contains(key))
        throw Error(ErrorKind::SchemaError, "missing key '" + key + "'" + (where.empty() ? "" : " in " + where));
    return j.at(key);
}

inline double number_or(const nlohmann::json& j, const std::string& key, double fallback)
{
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_number()) throw Error(ErrorKind::SchemaError, "key '" + key + "' must be a number");
    return j.at(key).get<double>();
}

inline nlohmann::json read_json_file(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::IoError, "cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::SchemaError, path + ": " + ex.what());
    }
}

}  // namespace detail

inline Grid grid_from_json(const nlohmann::json& j)
{
    try {
        std::vector<NodeId> nodes = detail::require_key(j, "nodes", "grid").get<std::vector<NodeId>>();
        std::vector<double> voltages;
        if (j.contains("voltages")) voltages = j.at("voltages").get<std::vector<double>>();
        std::vector<std::pair<NodePair, LineParams>> lines;
        for (const auto& lj : detail::require_key(j, "lines", "grid")) {
            NodeId from = detail::require_key(lj, "from", "line").get<NodeId>();
            NodeId to = detail::require_key(lj, "to", "line").get<NodeId>();
            LineParams p;
            p.g = detail::require_key(lj, "g", "line").get<double>();
            p.b = detail::require_key(lj, "b", "line").get<double>();
            p.g_shunt_from = detail::number_or(lj, "g_shunt_from", 0.0);
            p.b_shunt_from = detail::number_or(lj, "b_shunt_from", 0.0);
            p.g_shunt_to = detail::number_or(lj, "g_shunt_to", 0.0);
            p.b_shunt_to = detail::number_or(lj, "b_shunt_to", 0.0);
            if (from == to) throw Error(ErrorKind::SchemaError, "line with identical endpoints");
            if (from > to) p = p.swapped_ends();
            lines.emplace_back(make_pair_sorted(from, to), p);
        }
        if (!voltages.empty()) {
            // voltages are listed in the file's node order; Grid keeps nodes sorted
            std::vector<std::size_t> order(nodes.size());
            std::iota(order.begin(), order.end(), 0);
            std::sort(order.begin(), order.end(), [&](auto a, auto b) { return nodes[a] < nodes[b]; });
            if (voltages.size() != nodes.size())
                throw Error(ErrorKind::SchemaError, "'voltages' must have one entry per node");
            std::vector<double> sorted(voltages.size());
            for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = voltages[order[i]];
            voltages = std::move(sorted);
        }
        return Grid::canonical(std::move(nodes), std::move(lines), std::move(voltages));
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorKind::SchemaError, std::string("grid: ") + ex.what());
    }
}

inline nlohmann::json grid_to_json(const Grid& grid)
{
    nlohmann::json j;
    j["nodes"] = grid.nodes();
    j["voltages"] = grid.voltages();
    j["lines"] = nlohmann::json::array();
    for (std::size_t l = 0; l < grid.edge_count(); ++l) {
        const auto& e = grid.edges()[l];
        const auto& p = grid.lines()[l];
        j["lines"].push_back({{"from", e.first},
                              {"to", e.second},
                              {"g", p.g},
                              {"b", p.b},
                              {"g_shunt_from", p.g_shunt_from},
                              {"b_shunt_from", p.b_shunt_from},
                              {"g_shunt_to", p.g_shunt_to},
                              {"b_shunt_to", p.b_shunt_to}});
    }
    return j;
}

inline Grid load_grid(const std::string& path) { return grid_from_json(detail::read_json_file(path)); }

}  // namespace ddpf
