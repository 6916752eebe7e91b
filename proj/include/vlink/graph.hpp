#pragma once

// Investigation graphs around one query ad: the query, its retrieved
// documents, query-to-document edges weighted by cosine similarity, and
// document-to-document edges whose cosine reaches a threshold.

#include <algorithm>
#include <cstdio>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlink/error.hpp"
#include "vlink/index.hpp"
#include "vlink/matrix.hpp"

namespace vlink {

enum class GraphMode { r_precision, mrr_k };

inline std::string_view to_string(GraphMode m) { return m == GraphMode::r_precision ? "r_precision" : "mrr_k"; }

inline std::optional<GraphMode> graph_mode_from_string(std::string_view s) {
  if (s == "r_precision" || s == "rprec") return GraphMode::r_precision;
  if (s == "mrr_k" || s == "mrr") return GraphMode::mrr_k;
  return std::nullopt;
}

enum class NodeRole { query, retrieved };

struct GraphNode {
  std::string id;
  NodeRole role = NodeRole::retrieved;
  friend bool operator==(const GraphNode&, const GraphNode&) = default;
};

struct GraphEdge {
  std::string a, b;
  double w = 0.0;
  friend bool operator==(const GraphEdge&, const GraphEdge&) = default;
};

/// Nodes: query first, then retrieved ids ascending. Edges: query edges
/// ordered by document id, then document pairs ordered by (a, b) with a < b.
struct KnowledgeGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  GraphMode mode = GraphMode::mrr_k;
  std::size_t cutoff = 0;
  double theta = 0.5;

  const std::string& query() const { return nodes.front().id; }

  void validate() const {
    if (nodes.empty() || nodes.front().role != NodeRole::query) throw DataError("graph: first node must be the query");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (i > 0 && nodes[i].role == NodeRole::query) throw DataError("graph: more than one query node");
      if (!ids.insert(nodes[i].id).second) throw DataError("graph: duplicate node '" + nodes[i].id + "'");
    }
    std::set<std::pair<std::string, std::string>> seen;
    std::set<std::string> linked;
    for (const auto& e : edges) {
      if (e.a == e.b) throw DataError("graph: self-loop on '" + e.a + "'");
      if (!ids.contains(e.a) || !ids.contains(e.b)) throw DataError("graph: edge references an unknown node");
      if (!(e.w >= -1.0 - 1e-12 && e.w <= 1.0 + 1e-12)) throw DataError("graph: edge weight outside [-1, 1]");
      auto key = std::minmax(e.a, e.b);
      if (!seen.insert({key.first, key.second}).second) throw DataError("graph: duplicate edge");
      if (e.a == query()) linked.insert(e.b);
    }
    for (std::size_t i = 1; i < nodes.size(); ++i)
      if (!linked.contains(nodes[i].id)) throw DataError("graph: '" + nodes[i].id + "' is not linked to the query");
  }

  friend bool operator==(const KnowledgeGraph&, const KnowledgeGraph&) = default;
};

/// Retrieves the top `cutoff` documents for the query. A document carrying
/// the query's own id is skipped so the graph has no self-loops.
inline KnowledgeGraph build_graph(const FlatIndex& idx, const std::string& query_id, std::span<const double> query,
                                  GraphMode mode, std::size_t cutoff, double theta = 0.5) {
  if (cutoff > idx.size())
    throw DataError("graph: cutoff " + std::to_string(cutoff) + " exceeds index size " + std::to_string(idx.size()));
  if (query.size() != idx.dim()) throw DataError("graph: query dim does not match the index");
  const bool self_indexed = std::find(idx.ids.begin(), idx.ids.end(), query_id) != idx.ids.end();
  const std::size_t k = std::min(idx.size(), cutoff + (self_indexed ? 1 : 0));
  Matrix q(1, query.size());
  std::copy(query.begin(), query.end(), q.row(0).begin());
  auto hits = search(idx, q, k).front();
  std::erase_if(hits, [&](const Hit& h) { return idx.ids[h.doc] == query_id; });
  if (hits.size() > cutoff) hits.resize(cutoff);

  KnowledgeGraph g;
  g.mode = mode;
  g.cutoff = cutoff;
  g.theta = theta;
  g.nodes.push_back({query_id, NodeRole::query});
  std::sort(hits.begin(), hits.end(), [&](const Hit& a, const Hit& b) { return idx.ids[a.doc] < idx.ids[b.doc]; });
  for (const auto& h : hits) {
    g.nodes.push_back({idx.ids[h.doc], NodeRole::retrieved});
    g.edges.push_back({query_id, idx.ids[h.doc], h.score});
  }
  for (std::size_t i = 0; i < hits.size(); ++i)
    for (std::size_t j = i + 1; j < hits.size(); ++j) {
      const double w = dot(idx.rows.row(hits[i].doc), idx.rows.row(hits[j].doc));
      if (w >= theta) g.edges.push_back({idx.ids[hits[i].doc], idx.ids[hits[j].doc], w});
    }
  return g;
}

namespace detail {

inline std::string dot_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

inline std::string fixed4(double w) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", w);
  return buf;
}

}  // namespace detail

/// Graphviz DOT; the query node is filled red.
inline std::string to_dot(const KnowledgeGraph& g) {
  std::string out = "graph knowledge {\n";
  out += "  // mode=" + std::string(to_string(g.mode)) + " cutoff=" + std::to_string(g.cutoff) +
         " theta=" + detail::fixed4(g.theta) + "\n";
  out += "  node [shape=ellipse];\n";
  for (const auto& n : g.nodes) {
    out += "  " + detail::dot_quote(n.id);
    if (n.role == NodeRole::query) out += " [shape=doublecircle, style=filled, fillcolor=red, fontcolor=white]";
    out += ";\n";
  }
  for (const auto& e : g.edges) {
    const auto w = detail::fixed4(e.w);
    out += "  " + detail::dot_quote(e.a) + " -- " + detail::dot_quote(e.b) + " [label=\"" + w + "\", weight=" + w + "];\n";
  }
  out += "}\n";
  return out;
}

inline nlohmann::ordered_json to_json(const KnowledgeGraph& g) {
  nlohmann::ordered_json j;
  auto nodes = nlohmann::ordered_json::array();
  for (const auto& n : g.nodes) nodes.push_back({{"id", n.id}, {"role", n.role == NodeRole::query ? "query" : "retrieved"}});
  auto edges = nlohmann::ordered_json::array();
  for (const auto& e : g.edges) edges.push_back({{"a", e.a}, {"b", e.b}, {"w", e.w}});
  j["nodes"] = std::move(nodes);
  j["edges"] = std::move(edges);
  j["metadata"] = {{"mode", to_string(g.mode)}, {"cutoff", g.cutoff}, {"theta", g.theta}};
  return j;
}

inline std::string to_json_text(const KnowledgeGraph& g) { return to_json(g).dump(2) + "\n"; }

inline KnowledgeGraph parse_graph_json(std::string_view text) {
  KnowledgeGraph g;
  try {
    const auto j = nlohmann::json::parse(text);
    for (const auto& n : j.at("nodes")) {
      const auto role = n.at("role").get<std::string>();
      if (role != "query" && role != "retrieved") throw DataError("graph: unknown node role '" + role + "'");
      g.nodes.push_back({n.at("id").get<std::string>(), role == "query" ? NodeRole::query : NodeRole::retrieved});
    }
    for (const auto& e : j.at("edges"))
      g.edges.push_back({e.at("a").get<std::string>(), e.at("b").get<std::string>(), e.at("w").get<double>()});
    const auto& m = j.at("metadata");
    auto mode = graph_mode_from_string(m.at("mode").get<std::string>());
    if (!mode) throw DataError("graph: unknown mode");
    g.mode = *mode;
    g.cutoff = m.at("cutoff").get<std::size_t>();
    g.theta = m.at("theta").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("graph JSON: ") + e.what());
  }
  g.validate();
  return g;
}

}  // namespace vlink
