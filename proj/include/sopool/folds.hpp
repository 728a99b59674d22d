#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sopool/error.hpp"
#include "sopool/graph.hpp"
#include "sopool/rng.hpp"

namespace sopool {

struct FoldSplit {
  std::size_t fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Stratified k-fold split over per-item class labels. Each class is
/// shuffled with the seeded stream and dealt round-robin onto the folds; the
/// dealing position carries over between classes so fold sizes stay within
/// one of each other. Every class needs at least k members.
inline std::vector<FoldSplit> stratified_kfold(std::span<const int> labels, std::size_t k,
                                               std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  for (const auto& [cls, ids] : by_class) {
    if (ids.size() < k) {
      throw StratificationError("class " + std::to_string(cls) + " has " +
                                std::to_string(ids.size()) + " members, fewer than k=" +
                                std::to_string(k));
    }
  }
  Rng rng(seed);
  std::vector<std::size_t> fold_of(labels.size());
  std::size_t next = 0;
  for (auto& [cls, ids] : by_class) {
    rng.shuffle(std::span<std::size_t>(ids));
    for (std::size_t id : ids) {
      fold_of[id] = next;
      next = (next + 1) % k;
    }
  }
  std::vector<FoldSplit> folds(k);
  for (std::size_t f = 0; f < k; ++f) folds[f].fold = f;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t f = 0; f < k; ++f) {
      (fold_of[i] == f ? folds[f].validation : folds[f].train).push_back(i);
    }
  }
  return folds;
}

inline std::vector<FoldSplit> stratified_kfold(const Dataset& ds, std::size_t k,
                                               std::uint64_t seed) {
  std::vector<int> labels;
  labels.reserve(ds.graphs.size());
  for (const Graph& g : ds.graphs) labels.push_back(g.label);
  return stratified_kfold(labels, k, seed);
}

}  // namespace sopool
