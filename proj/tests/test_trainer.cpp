#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include <json.hpp>

#include "sopool/results.hpp"
#include "sopool/trainer.hpp"

using namespace sopool;
namespace fs = std::filesystem;

namespace {

Dataset toy() {
  static const Dataset ds = build_features(
      parse_tu_dataset(fs::path(SOPOOL_FIXTURE_DIR) / "TOY", "TOY"), FeatureMode::node_label_onehot);
  return ds;
}

ExperimentConfig quick(PoolKind pool = PoolKind::sopool_bimap) {
  ExperimentConfig c;
  c.dataset = "TOY";
  c.pool = pool;
  c.hidden = 4;
  c.fprime = 3;
  c.batch_size = 3;
  c.max_epochs = 4;
  c.folds = 2;
  c.seed = 5;
  c.off_grid = true;
  return c;
}

}  // namespace

TEST(Trainer, MeanStdIsPopulation) {
  const std::vector<double> xs{0.5, 1.0};
  const auto [m, s] = mean_std(xs);
  EXPECT_DOUBLE_EQ(m, 0.75);
  EXPECT_DOUBLE_EQ(s, 0.25);
}

TEST(Trainer, EpochSelection) {
  const std::vector<std::vector<double>> acc{{0.5, 0.9, 0.7}, {0.6, 0.5, 0.8}};
  const EpochSummary mean = summarize_epochs(acc, EpochSelect::mean);
  EXPECT_EQ(mean.selected_epoch, 3);  // means 0.55, 0.70, 0.75
  EXPECT_DOUBLE_EQ(mean.mean, 0.75);
  EXPECT_NEAR(mean.std, 0.05, 1e-15);
  const EpochSummary per = summarize_epochs(acc, EpochSelect::per_fold);
  EXPECT_EQ(per.selected_epoch, 0);
  EXPECT_EQ(per.fold_selected_epochs, (std::vector<int>{2, 3}));
  EXPECT_DOUBLE_EQ(per.mean, 0.85);
  // ties keep the earliest epoch
  EXPECT_EQ(summarize_epochs({{0.5, 0.5}}, EpochSelect::mean).selected_epoch, 1);
  EXPECT_THROW(parse_epoch_select("best"), ConfigError);
}

TEST(Trainer, Minibatches) {
  std::vector<std::size_t> ids(7);
  for (std::size_t i = 0; i < 7; ++i) ids[i] = i;
  auto b = make_minibatches(ids, 3);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1], (std::vector<std::size_t>{3, 4, 5, 6}));
  b = make_minibatches(ids, 4);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 3u);
  b = make_minibatches(std::span<const std::size_t>(ids).first(1), 4);
  ASSERT_EQ(b.size(), 1u);
}

TEST(Trainer, ConfigValidation) {
  ExperimentConfig c;
  c.fprime = 32;
  EXPECT_NO_THROW(c.validate());
  c.fprime = 0;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("--fprime"), std::string::npos);
  }
  c.fprime = 32;
  c.hidden = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  c.off_grid = true;
  EXPECT_NO_THROW(c.validate());
  c.blocks = 2;
  EXPECT_THROW(c.validate(), ConfigError);  // blocks need sopool-mattn
  c.pool = PoolKind::sopool_mattn;
  EXPECT_NO_THROW(c.validate());
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Trainer, ResolveDefaults) {
  const Dataset ds = toy();  // 29 nodes over 8 graphs, n̄ = 3.625
  ExperimentConfig c = quick(PoolKind::sum_avg);
  ExperimentConfig r = resolve_config(c, ds);
  EXPECT_EQ(r.pool, PoolKind::sum);
  EXPECT_EQ(r.features, FeatureMode::node_label_onehot);
  c.pool = PoolKind::sopool_mattn;
  c.blocks = 3;
  r = resolve_config(c, ds);
  EXPECT_EQ(r.k, (std::vector<std::size_t>{2, 1, 1}));
  c.k = {4};
  EXPECT_EQ(resolve_config(c, ds).k, (std::vector<std::size_t>{4, 2, 1}));
  Dataset unlabeled = ds;
  unlabeled.has_node_labels = false;
  EXPECT_EQ(resolve_config(quick(PoolKind::sum_avg), unlabeled).pool, PoolKind::avg);
}

TEST(Trainer, DeterministicAndThreadIndependent) {
  const Dataset ds = toy();
  const CVResult a = train_cv(quick(), ds, 1);
  const CVResult b = train_cv(quick(), ds, 1);
  const CVResult c = train_cv(quick(), ds, 2);
  EXPECT_TRUE(a.same_outcome(b));
  EXPECT_TRUE(a.same_outcome(c));
  ASSERT_EQ(a.fold_accuracy.size(), 2u);
  EXPECT_EQ(a.fold_accuracy[0].size(), 4u);
  EXPECT_GE(a.selected_epoch, 1);
  ExperimentConfig other = quick();
  other.seed = 6;
  EXPECT_FALSE(a.same_outcome(train_cv(other, ds, 1)));
}

TEST(Trainer, ValidationGraphsNeverTrainedOn) {
  const Dataset ds = toy();
  const ExperimentConfig cfg = quick();
  const auto splits = stratified_kfold(ds, cfg.folds, cfg.seed);
  std::vector<std::set<std::size_t>> seen(cfg.folds);
  TrainHooks hooks;
  hooks.on_train_batch = [&](std::size_t fold, std::span<const std::size_t> ids) {
    seen[fold].insert(ids.begin(), ids.end());
  };
  train_cv(cfg, ds, 2, hooks);
  for (std::size_t f = 0; f < cfg.folds; ++f) {
    for (std::size_t v : splits[f].validation) EXPECT_FALSE(seen[f].count(v));
    EXPECT_EQ(seen[f].size(), splits[f].train.size());
  }
}

TEST(Trainer, EveryPoolingTrains) {
  const Dataset ds = toy();
  for (PoolKind k : all_pool_kinds) {
    ExperimentConfig c = quick(k);
    c.max_epochs = 2;
    const CVResult r = train_cv(c, ds, 1);
    EXPECT_GE(r.mean_accuracy, 0.0) << pool_kind_name(k);
  }
  ExperimentConfig h = quick(PoolKind::sopool_mattn);
  h.blocks = 2;
  h.max_epochs = 2;
  EXPECT_EQ(train_cv(h, ds, 1).config.k.size(), 2u);
}

TEST(Trainer, DivergenceIsReported) {
  Dataset ds = toy();
  ds.graphs[2].features(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_cv(quick(), ds, 1);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.exit_code(), 4);
  }
}

TEST(Trainer, BatchedAndSingleScoringAgree) {
  const Dataset ds = toy();
  for (std::size_t blocks : {0u, 2u}) {
    ExperimentConfig c = quick(blocks ? PoolKind::sopool_mattn : PoolKind::sopool_bimap);
    c.blocks = blocks;
    c = resolve_config(c, ds);
    Rng rng(3);
    auto model = build_model(model_config(c, ds), rng);
    std::vector<std::size_t> all(ds.graphs.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    ag::Tape t(false);
    const Matrix batched =
        model->forward(t, batch_graphs(ds, all), ag::Mode::eval, rng).value();
    for (std::size_t i = 0; i < all.size(); ++i) {
      ag::Tape ti(false);
      const std::vector<std::size_t> one{i};
      const Matrix single = model->forward(ti, batch_graphs(ds, one), ag::Mode::eval, rng).value();
      for (std::size_t j = 0; j < single.cols(); ++j) EXPECT_NEAR(single[j], batched(i, j), 1e-9);
    }
  }
}

TEST(Results, JsonRoundTripAndValidation) {
  const CVResult r = train_cv(quick(), toy(), 1);
  const fs::path p = fs::temp_directory_path() / "sopool_result.json";
  persist_result(r, p);
  const CVResult back = load_result(p);
  EXPECT_TRUE(back.same_outcome(r));

  nlohmann::json j = result_to_json(r);
  j["mean_accuracy"] = r.mean_accuracy + 0.01;
  EXPECT_THROW(result_from_json(j), SchemaError);
  j = result_to_json(r);
  j["schema_version"] = 99;
  EXPECT_THROW(result_from_json(j), SchemaError);
  j = result_to_json(r);
  j["selected_epoch"] = r.selected_epoch + 1;
  EXPECT_THROW(result_from_json(j), SchemaError);
  j = result_to_json(r);
  j["fold_accuracy"].erase(0);
  EXPECT_THROW(result_from_json(j), SchemaError);
  j = result_to_json(r);
  j.erase("config");
  EXPECT_THROW(result_from_json(j), SchemaError);
  EXPECT_THROW(load_result("/nonexistent/r.json"), NotFoundError);
}

TEST(Results, CsvAndTableRow) {
  CVResult r;
  r.config.dataset = "MUTAG";
  r.mean_accuracy = 0.953;
  r.std_accuracy = 0.044;
  EXPECT_EQ(csv_header(), "dataset,model,mean,std");
  EXPECT_EQ(csv_row(r), "MUTAG,gin0+sopool_bimap,0.953000,0.044000");
  EXPECT_EQ(table_row(r), "MUTAG gin0+sopool_bimap: 95.3±4.4");
  r.config.pool = PoolKind::sopool_mattn;
  r.config.blocks = 2;
  EXPECT_EQ(r.config.model_name(), "gin0+sopool_mattnx2");
}
