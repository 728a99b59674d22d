#pragma once

// TUDataset-format benchmark loading and node feature construction.
//
// Directory layout for a dataset named DS (all files 1-indexed, one record
// per line):
//   DS_A.txt               "i, j" edge pairs over global node ids
//   DS_graph_indicator.txt graph id of node i on line i
//   DS_graph_labels.txt    class label of graph g on line g
//   DS_node_labels.txt     optional; discrete label of node i on line i
// Edge label/attribute files are ignored.

#include <algorithm>
#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/error.hpp"
#include "sopool/matrix.hpp"

namespace sopool {

enum class FeatureMode { none, node_label_onehot, degree_onehot, constant };

inline std::string_view feature_mode_name(FeatureMode m) {
  switch (m) {
    case FeatureMode::node_label_onehot: return "node-label-onehot";
    case FeatureMode::degree_onehot: return "degree-onehot";
    case FeatureMode::constant: return "constant";
    case FeatureMode::none: break;
  }
  return "none";
}

inline FeatureMode parse_feature_mode(std::string_view s) {
  if (s == "node-label-onehot") return FeatureMode::node_label_onehot;
  if (s == "degree-onehot") return FeatureMode::degree_onehot;
  if (s == "constant") return FeatureMode::constant;
  throw ConfigError("unknown feature mode '" + std::string(s) + "'");
}

/// One undirected graph. Edges are stored once each as (u, v) with u < v,
/// sorted and free of duplicates and self loops.
struct Graph {
  std::size_t num_nodes = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  Matrix features;              // num_nodes × feature_dim
  int label = 0;                // in [0, num_classes)
  std::vector<int> node_labels;  // raw node labels, empty when unavailable

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> d(num_nodes, 0);
    for (auto [u, v] : edges) {
      ++d[u];
      ++d[v];
    }
    return d;
  }

  ag::Adjacency adjacency() const {
    ag::Adjacency adj;
    adj.num_nodes = num_nodes;
    std::vector<std::size_t> deg = degrees();
    adj.offsets.assign(num_nodes + 1, 0);
    for (std::size_t v = 0; v < num_nodes; ++v) adj.offsets[v + 1] = adj.offsets[v] + deg[v];
    adj.neighbors.resize(adj.offsets.back());
    std::vector<std::size_t> fill(adj.offsets.begin(), adj.offsets.end() - 1);
    for (auto [u, v] : edges) {
      adj.neighbors[fill[u]++] = v;
      adj.neighbors[fill[v]++] = u;
    }
    for (std::size_t v = 0; v < num_nodes; ++v) {
      std::sort(adj.neighbors.begin() + static_cast<std::ptrdiff_t>(adj.offsets[v]),
                adj.neighbors.begin() + static_cast<std::ptrdiff_t>(adj.offsets[v + 1]));
    }
    return adj;
  }

  Matrix dense_adjacency() const {
    Matrix a(num_nodes, num_nodes);
    for (auto [u, v] : edges) {
      a(u, v) = 1.0;
      a(v, u) = 1.0;
    }
    return a;
  }
};

/// Canonical (u < v, sorted, deduplicated, self loops dropped) edge list.
inline std::vector<std::pair<std::size_t, std::size_t>> normalize_edges(
    std::vector<std::pair<std::size_t, std::size_t>> edges) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(edges.size());
  for (auto [u, v] : edges) {
    if (u == v) continue;
    out.emplace_back(std::min(u, v), std::max(u, v));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Graph relabelled by `perm`: new node i is old node perm[i].
inline Graph permute_graph(const Graph& g, std::span<const std::size_t> perm) {
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  Graph out;
  out.num_nodes = g.num_nodes;
  out.label = g.label;
  for (auto [u, v] : g.edges) out.edges.emplace_back(inverse[u], inverse[v]);
  out.edges = normalize_edges(std::move(out.edges));
  if (!g.features.empty()) out.features = permute_rows(g.features, perm);
  if (!g.node_labels.empty()) {
    out.node_labels.resize(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out.node_labels[i] = g.node_labels[perm[i]];
  }
  return out;
}

struct Dataset {
  std::string name;
  std::vector<Graph> graphs;
  int num_classes = 0;
  std::size_t feature_dim = 0;
  FeatureMode feature_mode = FeatureMode::none;
  std::vector<long> class_values;  // original label of class index i
  bool has_node_labels = false;

  double average_nodes() const {
    if (graphs.empty()) return 0.0;
    std::size_t total = 0;
    for (const Graph& g : graphs) total += g.num_nodes;
    return static_cast<double>(total) / static_cast<double>(graphs.size());
  }
};

namespace detail {

inline std::filesystem::path dataset_file(const std::filesystem::path& dir,
                                          const std::string& name, const char* suffix) {
  return dir / (name + "_" + suffix + ".txt");
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline long parse_long(std::string_view s, const std::filesystem::path& file, std::size_t line) {
  s = trim(s);
  long v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(file.filename().string() + ":" + std::to_string(line) +
                     ": expected an integer, got '" + std::string(s) + "'");
  }
  return v;
}

/// Non-empty lines of a file as integers.
inline std::vector<long> read_int_column(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError("missing dataset file " + file.string());
  std::vector<long> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (trim(line).empty()) continue;
    out.push_back(parse_long(line, file, no));
  }
  return out;
}

}  // namespace detail

/// Reads DS_A / DS_graph_indicator / DS_graph_labels (and DS_node_labels
/// when present). The returned dataset carries no features yet; see
/// build_features.
inline Dataset parse_tu_dataset(const std::filesystem::path& dir, const std::string& name) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw NotFoundError("dataset directory not found: " + dir.string());
  const fs::path a_file = detail::dataset_file(dir, name, "A");
  const fs::path ind_file = detail::dataset_file(dir, name, "graph_indicator");
  const fs::path lab_file = detail::dataset_file(dir, name, "graph_labels");
  const fs::path node_file = detail::dataset_file(dir, name, "node_labels");
  for (const fs::path& p : {a_file, ind_file, lab_file}) {
    if (!fs::exists(p)) throw ParseError("missing dataset file " + p.filename().string());
  }

  const std::vector<long> indicator = detail::read_int_column(ind_file);
  const std::vector<long> graph_labels = detail::read_int_column(lab_file);
  const std::size_t total_nodes = indicator.size();
  const std::size_t num_graphs = graph_labels.size();

  Dataset ds;
  ds.name = name;
  ds.graphs.resize(num_graphs);
  std::vector<std::size_t> local(total_nodes);
  for (std::size_t i = 0; i < total_nodes; ++i) {
    const long gid = indicator[i];
    if (gid < 1 || static_cast<std::size_t>(gid) > num_graphs) {
      throw IntegrityError("node " + std::to_string(i + 1) + " references graph id " +
                           std::to_string(gid) + " but only " + std::to_string(num_graphs) +
                           " graphs are labelled");
    }
    Graph& g = ds.graphs[static_cast<std::size_t>(gid - 1)];
    local[i] = g.num_nodes++;
  }

  if (fs::exists(node_file)) {
    const std::vector<long> node_labels = detail::read_int_column(node_file);
    if (node_labels.size() != total_nodes) {
      throw IntegrityError(node_file.filename().string() + " has " +
                           std::to_string(node_labels.size()) + " lines for " +
                           std::to_string(total_nodes) + " nodes");
    }
    for (std::size_t i = 0; i < total_nodes; ++i) {
      ds.graphs[static_cast<std::size_t>(indicator[i] - 1)].node_labels.push_back(
          static_cast<int>(node_labels[i]));
    }
    ds.has_node_labels = true;
  }

  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> raw_edges(num_graphs);
  {
    std::ifstream in(a_file);
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      std::string_view sv = detail::trim(line);
      if (sv.empty()) continue;
      const auto comma = sv.find(',');
      if (comma == std::string_view::npos) {
        throw ParseError(a_file.filename().string() + ":" + std::to_string(no) +
                         ": expected 'i, j'");
      }
      const long u = detail::parse_long(sv.substr(0, comma), a_file, no);
      const long v = detail::parse_long(sv.substr(comma + 1), a_file, no);
      for (long x : {u, v}) {
        if (x < 1 || static_cast<std::size_t>(x) > total_nodes) {
          throw IntegrityError(a_file.filename().string() + ":" + std::to_string(no) +
                               ": edge endpoint " + std::to_string(x) + " is not a node");
        }
      }
      const long gu = indicator[static_cast<std::size_t>(u - 1)];
      const long gv = indicator[static_cast<std::size_t>(v - 1)];
      if (gu != gv) {
        throw IntegrityError(a_file.filename().string() + ":" + std::to_string(no) +
                             ": edge joins graphs " + std::to_string(gu) + " and " +
                             std::to_string(gv));
      }
      raw_edges[static_cast<std::size_t>(gu - 1)].emplace_back(
          local[static_cast<std::size_t>(u - 1)], local[static_cast<std::size_t>(v - 1)]);
    }
  }
  for (std::size_t g = 0; g < num_graphs; ++g) {
    ds.graphs[g].edges = normalize_edges(std::move(raw_edges[g]));
  }

  std::set<long> distinct(graph_labels.begin(), graph_labels.end());
  ds.class_values.assign(distinct.begin(), distinct.end());
  ds.num_classes = static_cast<int>(ds.class_values.size());
  for (std::size_t g = 0; g < num_graphs; ++g) {
    const auto it =
        std::lower_bound(ds.class_values.begin(), ds.class_values.end(), graph_labels[g]);
    ds.graphs[g].label = static_cast<int>(it - ds.class_values.begin());
  }
  return ds;
}

/// Writes a dataset back out in TUDataset format (each undirected edge in
/// both directions, original class values).
inline void write_tu_dataset(const Dataset& ds, const std::filesystem::path& dir,
                             const std::string& name) {
  std::filesystem::create_directories(dir);
  std::ofstream a(detail::dataset_file(dir, name, "A"));
  std::ofstream ind(detail::dataset_file(dir, name, "graph_indicator"));
  std::ofstream lab(detail::dataset_file(dir, name, "graph_labels"));
  std::optional<std::ofstream> nl;
  if (ds.has_node_labels) nl.emplace(detail::dataset_file(dir, name, "node_labels"));
  std::size_t base = 1;
  for (std::size_t g = 0; g < ds.graphs.size(); ++g) {
    const Graph& gr = ds.graphs[g];
    for (std::size_t v = 0; v < gr.num_nodes; ++v) {
      ind << (g + 1) << '\n';
      if (nl) *nl << gr.node_labels.at(v) << '\n';
    }
    for (auto [u, v] : gr.edges) {
      a << (base + u) << ", " << (base + v) << '\n';
      a << (base + v) << ", " << (base + u) << '\n';
    }
    lab << ds.class_values.at(static_cast<std::size_t>(gr.label)) << '\n';
    base += gr.num_nodes;
  }
}

/// Attaches node features.
///  node-label-onehot: d = number of distinct node labels in the dataset
///  degree-onehot:     d = max degree in the dataset + 1, row i = onehot(deg i)
///  constant:          d = 1, all ones
inline Dataset build_features(Dataset ds, FeatureMode mode) {
  switch (mode) {
    case FeatureMode::node_label_onehot: {
      if (!ds.has_node_labels) {
        throw ConfigError("feature mode node-label-onehot needs " + ds.name +
                          "_node_labels.txt, which is absent");
      }
      std::set<int> labels;
      for (const Graph& g : ds.graphs) labels.insert(g.node_labels.begin(), g.node_labels.end());
      std::vector<int> sorted(labels.begin(), labels.end());
      ds.feature_dim = sorted.size();
      for (Graph& g : ds.graphs) {
        g.features = Matrix(g.num_nodes, ds.feature_dim);
        for (std::size_t v = 0; v < g.num_nodes; ++v) {
          const auto idx = std::lower_bound(sorted.begin(), sorted.end(), g.node_labels[v]) -
                           sorted.begin();
          g.features(v, static_cast<std::size_t>(idx)) = 1.0;
        }
      }
      break;
    }
    case FeatureMode::degree_onehot: {
      std::size_t max_degree = 0;
      for (const Graph& g : ds.graphs)
        for (std::size_t d : g.degrees()) max_degree = std::max(max_degree, d);
      ds.feature_dim = max_degree + 1;
      for (Graph& g : ds.graphs) {
        g.features = Matrix(g.num_nodes, ds.feature_dim);
        const auto deg = g.degrees();
        for (std::size_t v = 0; v < g.num_nodes; ++v) g.features(v, deg[v]) = 1.0;
      }
      break;
    }
    case FeatureMode::constant: {
      ds.feature_dim = 1;
      for (Graph& g : ds.graphs) g.features = Matrix::ones(g.num_nodes, 1);
      break;
    }
    case FeatureMode::none:
      throw ConfigError("build_features: a feature mode is required");
  }
  ds.feature_mode = mode;
  return ds;
}

/// node-label-onehot when node labels exist, constant for REDDIT-style
/// datasets, degree-onehot otherwise.
inline FeatureMode default_feature_mode(const Dataset& ds) {
  if (ds.has_node_labels) return FeatureMode::node_label_onehot;
  if (ds.name.rfind("REDDIT", 0) == 0) return FeatureMode::constant;
  return FeatureMode::degree_onehot;
}

}  // namespace sopool
