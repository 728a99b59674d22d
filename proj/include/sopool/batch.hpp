#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/error.hpp"
#include "sopool/graph.hpp"

namespace sopool {

/// Disjoint union of graphs: stacked features, block-diagonal adjacency and
/// the node range of every member graph.
struct GraphBatch {
  std::vector<const Graph*> graphs;
  std::vector<std::size_t> offsets;  // first node of each graph
  std::vector<std::size_t> counts;   // node count of each graph
  std::vector<int> labels;
  ag::Adjacency adjacency;
  Matrix features;

  std::size_t size() const noexcept { return graphs.size(); }
  std::size_t num_nodes() const noexcept { return adjacency.num_nodes; }
};

inline GraphBatch batch_graphs(std::span<const Graph* const> graphs) {
  if (graphs.empty()) throw EmptyInputError("batch_graphs: no graphs");
  const std::size_t d = graphs[0]->features.cols();
  GraphBatch b;
  std::size_t total = 0, total_adj = 0;
  for (const Graph* g : graphs) {
    if (g->features.cols() != d || g->features.rows() != g->num_nodes) {
      throw ShapeError("batch_graphs: feature matrix " + g->features.shape() +
                       " does not match " + std::to_string(g->num_nodes) + "x" +
                       std::to_string(d));
    }
    b.graphs.push_back(g);
    b.offsets.push_back(total);
    b.counts.push_back(g->num_nodes);
    b.labels.push_back(g->label);
    total += g->num_nodes;
    total_adj += 2 * g->edges.size();
  }
  b.features = Matrix(total, d);
  b.adjacency.num_nodes = total;
  b.adjacency.offsets.reserve(total + 1);
  b.adjacency.neighbors.reserve(total_adj);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const Graph& g = *graphs[i];
    const std::size_t base = b.offsets[i];
    std::copy(g.features.data().begin(), g.features.data().end(),
              b.features.data().begin() + static_cast<std::ptrdiff_t>(base * d));
    const ag::Adjacency local = g.adjacency();
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
      for (std::size_t u : local.of(v)) b.adjacency.neighbors.push_back(base + u);
      b.adjacency.offsets.push_back(b.adjacency.neighbors.size());
    }
  }
  return b;
}

inline GraphBatch batch_graphs(const Dataset& ds, std::span<const std::size_t> ids) {
  std::vector<const Graph*> ptrs;
  ptrs.reserve(ids.size());
  for (std::size_t id : ids) ptrs.push_back(&ds.graphs.at(id));
  return batch_graphs(ptrs);
}

}  // namespace sopool
