#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "sopool/batch.hpp"
#include "sopool/folds.hpp"
#include "sopool/graph.hpp"

using namespace sopool;
namespace fs = std::filesystem;

namespace {

const fs::path kToy = fs::path(SOPOOL_FIXTURE_DIR) / "TOY";
const fs::path kMutag = fs::path(SOPOOL_DATA_DIR_DEFAULT) / "MUTAG";

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sopool_graphdata_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

/// A valid two-graph dataset (triangle + edge) that individual tests corrupt.
fs::path small_dataset(const std::string& tag) {
  const fs::path d = scratch(tag);
  write(d / "X_A.txt", "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n");
  write(d / "X_graph_indicator.txt", "1\n1\n1\n2\n2\n");
  write(d / "X_graph_labels.txt", "-1\n1\n");
  return d;
}

}  // namespace

TEST(TuParser, ReadsToyFixture) {
  const Dataset ds = parse_tu_dataset(kToy, "TOY");
  ASSERT_EQ(ds.graphs.size(), 8u);
  EXPECT_EQ(ds.num_classes, 2);
  EXPECT_EQ(ds.class_values, (std::vector<long>{1, 2}));
  EXPECT_TRUE(ds.has_node_labels);
  EXPECT_EQ(ds.graphs[0].num_nodes, 3u);
  EXPECT_EQ(ds.graphs[0].edges.size(), 3u);
  EXPECT_EQ(ds.graphs[1].edges, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}}));
  EXPECT_EQ(ds.graphs[0].label, 0);
  EXPECT_EQ(ds.graphs[1].label, 1);
  std::size_t nodes = 0;
  for (const Graph& g : ds.graphs) nodes += g.num_nodes;
  EXPECT_EQ(nodes, 29u);
}

TEST(TuParser, RemapsSignedLabels) {
  const Dataset ds = parse_tu_dataset(small_dataset("signed"), "X");
  EXPECT_EQ(ds.class_values, (std::vector<long>{-1, 1}));
  EXPECT_EQ(ds.graphs[0].label, 0);
  EXPECT_EQ(ds.graphs[1].label, 1);
  EXPECT_FALSE(ds.has_node_labels);
}

TEST(TuParser, Errors) {
  EXPECT_THROW(parse_tu_dataset("/nonexistent/sopool", "X"), NotFoundError);
  try {
    parse_tu_dataset("/nonexistent/sopool", "X");
  } catch (const Error& e) {
    EXPECT_EQ(e.exit_code(), 3);
  }

  fs::path d = small_dataset("missing");
  fs::remove(d / "X_graph_labels.txt");
  try {
    parse_tu_dataset(d, "X");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("X_graph_labels.txt"), std::string::npos);
  }

  d = small_dataset("badgid");
  write(d / "X_graph_indicator.txt", "1\n1\n1\n2\n7\n");
  EXPECT_THROW(parse_tu_dataset(d, "X"), IntegrityError);

  d = small_dataset("dangling");
  write(d / "X_A.txt", "1, 2\n2, 9\n");
  EXPECT_THROW(parse_tu_dataset(d, "X"), IntegrityError);

  d = small_dataset("cross");
  write(d / "X_A.txt", "1, 2\n3, 4\n");
  EXPECT_THROW(parse_tu_dataset(d, "X"), IntegrityError);

  d = small_dataset("garbage");
  write(d / "X_graph_labels.txt", "-1\nfoo\n");
  EXPECT_THROW(parse_tu_dataset(d, "X"), ParseError);
}

TEST(TuParser, DropsSelfLoopsAndDuplicates) {
  const fs::path d = small_dataset("loops");
  write(d / "X_A.txt", "1, 1\n1, 2\n2, 1\n1, 2\n4, 5\n");
  const Dataset ds = parse_tu_dataset(d, "X");
  EXPECT_EQ(ds.graphs[0].edges, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}}));
}

TEST(TuParser, RoundTrip) {
  const Dataset ds = parse_tu_dataset(kToy, "TOY");
  const fs::path out = scratch("roundtrip");
  write_tu_dataset(ds, out, "TOY");
  const Dataset back = parse_tu_dataset(out, "TOY");
  ASSERT_EQ(back.graphs.size(), ds.graphs.size());
  for (std::size_t i = 0; i < ds.graphs.size(); ++i) {
    EXPECT_EQ(back.graphs[i].num_nodes, ds.graphs[i].num_nodes);
    EXPECT_EQ(back.graphs[i].edges, ds.graphs[i].edges);
    EXPECT_EQ(back.graphs[i].label, ds.graphs[i].label);
    EXPECT_EQ(back.graphs[i].node_labels, ds.graphs[i].node_labels);
  }
  EXPECT_EQ(back.class_values, ds.class_values);
}

TEST(Features, Modes) {
  const Dataset raw = parse_tu_dataset(kToy, "TOY");
  EXPECT_EQ(default_feature_mode(raw), FeatureMode::node_label_onehot);
  const Dataset a = build_features(raw, FeatureMode::node_label_onehot);
  EXPECT_EQ(a.feature_dim, 3u);
  for (const Graph& g : a.graphs)
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
      double s = 0.0;
      for (double x : g.features.row_span(v)) s += x;
      EXPECT_EQ(s, 1.0);
    }
  const Dataset b = build_features(raw, FeatureMode::degree_onehot);
  EXPECT_EQ(b.feature_dim, 4u);  // star centre has degree 3
  EXPECT_EQ(b.graphs[3].features(0, 3), 1.0);
  const Dataset c = build_features(raw, FeatureMode::constant);
  EXPECT_EQ(c.feature_dim, 1u);

  Dataset unlabeled = parse_tu_dataset(small_dataset("nolabels"), "X");
  EXPECT_THROW(build_features(unlabeled, FeatureMode::node_label_onehot), ConfigError);
  EXPECT_EQ(default_feature_mode(unlabeled), FeatureMode::degree_onehot);
  unlabeled.name = "REDDIT-BINARY";
  EXPECT_EQ(default_feature_mode(unlabeled), FeatureMode::constant);
  EXPECT_THROW(parse_feature_mode("bogus"), ConfigError);
}

TEST(Mutag, Statistics) {
  if (!fs::exists(kMutag)) GTEST_SKIP() << "MUTAG not available at " << kMutag;
  const Dataset raw = parse_tu_dataset(kMutag, "MUTAG");
  EXPECT_EQ(raw.graphs.size(), 188u);
  EXPECT_EQ(raw.num_classes, 2);
  std::size_t nodes = 0, positives = 0;
  for (const Graph& g : raw.graphs) {
    nodes += g.num_nodes;
    positives += g.label == 1;
  }
  EXPECT_EQ(nodes, 3371u);
  EXPECT_EQ(positives, 125u);
  EXPECT_DOUBLE_EQ(raw.average_nodes(), 3371.0 / 188.0);
  EXPECT_EQ(std::round(raw.average_nodes()), 18.0);
  const Dataset ds = build_features(raw, default_feature_mode(raw));
  EXPECT_EQ(ds.feature_dim, 7u);
}

TEST(Folds, PartitionAndStratification) {
  std::vector<int> labels;
  for (int i = 0; i < 125; ++i) labels.push_back(1);
  for (int i = 0; i < 63; ++i) labels.push_back(0);
  const auto folds = stratified_kfold(labels, 10, 3);
  ASSERT_EQ(folds.size(), 10u);
  std::vector<int> seen(labels.size(), 0);
  for (const FoldSplit& f : folds) {
    EXPECT_EQ(f.train.size() + f.validation.size(), labels.size());
    std::set<std::size_t> val(f.validation.begin(), f.validation.end());
    for (std::size_t t : f.train) EXPECT_FALSE(val.count(t));
    for (std::size_t v : f.validation) ++seen[v];
    EXPECT_GE(f.validation.size(), 18u);
    EXPECT_LE(f.validation.size(), 19u);
    std::size_t pos = 0;
    for (std::size_t v : f.validation) pos += labels[v] == 1;
    EXPECT_GE(pos, 12u);
    EXPECT_LE(pos, 13u);
  }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(Folds, SeededAndGuarded) {
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
  const auto a = stratified_kfold(labels, 5, 11);
  const auto b = stratified_kfold(labels, 5, 11);
  const auto c = stratified_kfold(labels, 5, 12);
  for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(a[f].validation, b[f].validation);
  bool differ = false;
  for (std::size_t f = 0; f < 5; ++f) differ = differ || a[f].validation != c[f].validation;
  EXPECT_TRUE(differ);
  EXPECT_THROW(stratified_kfold(std::vector<int>{0, 0, 0, 1}, 2, 0), StratificationError);
  EXPECT_THROW(stratified_kfold(labels, 1, 0), ConfigError);
}

TEST(Batch, BlockDiagonal) {
  const Dataset ds = build_features(parse_tu_dataset(kToy, "TOY"), FeatureMode::node_label_onehot);
  const std::vector<std::size_t> ids{1, 0, 3};
  const GraphBatch b = batch_graphs(ds, ids);
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(b.num_nodes(), 2u + 3u + 4u);
  EXPECT_EQ(b.offsets, (std::vector<std::size_t>{0, 2, 5}));
  EXPECT_EQ(b.labels, (std::vector<int>{1, 0, 1}));
  for (std::size_t g = 0; g < b.size(); ++g) {
    const Graph& gr = ds.graphs[ids[g]];
    for (std::size_t v = 0; v < gr.num_nodes; ++v) {
      const std::size_t bv = b.offsets[g] + v;
      for (std::size_t j = 0; j < ds.feature_dim; ++j) EXPECT_EQ(b.features(bv, j), gr.features(v, j));
      for (std::size_t u : b.adjacency.of(bv)) {
        EXPECT_GE(u, b.offsets[g]);
        EXPECT_LT(u, b.offsets[g] + b.counts[g]);
      }
      EXPECT_EQ(b.adjacency.degree(bv), gr.degrees()[v]);
    }
  }
  Graph odd = ds.graphs[0];
  odd.features = Matrix(odd.num_nodes, 5);
  const std::vector<const Graph*> mixed{&ds.graphs[0], &odd};
  EXPECT_THROW(batch_graphs(mixed), ShapeError);
}

TEST(Graph, PermutationRelabelsConsistently) {
  const Dataset ds = build_features(parse_tu_dataset(kToy, "TOY"), FeatureMode::node_label_onehot);
  const Graph& g = ds.graphs[5];
  const std::vector<std::size_t> perm{2, 0, 3, 1};
  const Graph p = permute_graph(g, perm);
  const Matrix a = g.dense_adjacency(), pa = p.dense_adjacency();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(pa(i, j), a(perm[i], perm[j]));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p.node_labels[i], g.node_labels[perm[i]]);
}
