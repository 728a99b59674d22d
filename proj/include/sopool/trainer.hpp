#pragma once

// Cross-validated training of graph classifiers.
//
// One run = one ExperimentConfig over all folds. Each fold trains a fresh
// model with Adam under a step-decayed learning rate and records validation
// accuracy after every epoch. The reported number of epochs is the one that
// maximises the fold-averaged validation accuracy (or, with
// EpochSelect::per_fold, each fold contributes its own best epoch).

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/batch.hpp"
#include "sopool/error.hpp"
#include "sopool/folds.hpp"
#include "sopool/graph.hpp"
#include "sopool/layers.hpp"
#include "sopool/model.hpp"
#include "sopool/optim.hpp"
#include "sopool/rng.hpp"

namespace sopool {

enum class EpochSelect { mean, per_fold };

inline std::string_view epoch_select_name(EpochSelect e) {
  return e == EpochSelect::mean ? "mean" : "per-fold";
}

inline EpochSelect parse_epoch_select(std::string_view s) {
  if (s == "mean") return EpochSelect::mean;
  if (s == "per-fold") return EpochSelect::per_fold;
  throw ConfigError("unknown epoch selection '" + std::string(s) + "' (expected mean, per-fold)");
}

inline constexpr std::size_t kHiddenGrid[] = {16, 32, 64};
inline constexpr std::size_t kBatchGrid[] = {32, 128};

struct ExperimentConfig {
  std::string dataset;
  GnnVariant gnn = GnnVariant::gin0;
  PoolKind pool = PoolKind::sopool_bimap;
  FeatureMode features = FeatureMode::none;  // none = dataset default
  std::size_t hidden = 32;
  std::size_t batch_size = 32;
  std::size_t fprime = 0;
  std::vector<std::size_t> k;  // empty = derived from the dataset
  std::size_t blocks = 0;      // 0 = flat model
  double lr = 0.01;
  double lr_decay = 0.5;
  int decay_every = 50;
  int max_epochs = 300;
  double dropout = 0.5;
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  EpochSelect epoch_select = EpochSelect::mean;
  bool off_grid = false;  // allow hidden/batch/blocks outside the tuning grid

  std::string model_name() const {
    std::string s = std::string(gnn_variant_name(gnn)) + "+" + pool_kind_name(pool);
    if (blocks > 0) s += "x" + std::to_string(blocks);
    return s;
  }

  bool operator==(const ExperimentConfig&) const = default;

  void validate() const {
    if (hidden == 0) throw ConfigError("--hidden must be positive");
    if (batch_size == 0) throw ConfigError("--batch must be positive");
    if (max_epochs <= 0) throw ConfigError("--epochs must be positive");
    if (folds < 2) throw ConfigError("at least 2 folds are required");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must be in [0, 1)");
    if (decay_every <= 0) throw ConfigError("learning-rate decay period must be positive");
    if ((pool == PoolKind::sopool_bimap || pool == PoolKind::covpool) && fprime == 0) {
      throw ConfigError("pooling " + pool_kind_name(pool) + " requires --fprime");
    }
    if (blocks > 0 && pool != PoolKind::sopool_mattn) {
      throw ConfigError("--blocks requires --pool sopool-mattn");
    }
    if (!k.empty() && blocks > 0 && k.size() != 1 && k.size() != blocks) {
      throw ConfigError("--k needs one value or one per block");
    }
    for (std::size_t v : k)
      if (v == 0) throw ConfigError("--k values must be positive");
    if (!off_grid) {
      if (std::find(std::begin(kHiddenGrid), std::end(kHiddenGrid), hidden) == std::end(kHiddenGrid)) {
        throw ConfigError("--hidden " + std::to_string(hidden) +
                          " is outside the tuning grid {16, 32, 64} (pass --off-grid to allow)");
      }
      if (std::find(std::begin(kBatchGrid), std::end(kBatchGrid), batch_size) == std::end(kBatchGrid)) {
        throw ConfigError("--batch " + std::to_string(batch_size) +
                          " is outside the tuning grid {32, 128} (pass --off-grid to allow)");
      }
      if (blocks > 3) {
        throw ConfigError("--blocks must be 1, 2 or 3 (pass --off-grid to allow more)");
      }
    }
  }
};

/// Fills dataset-dependent defaults: feature mode, sum-vs-avg baseline
/// pooling, and the pooled node counts k (⌈n̄/2⌉, halved per block).
inline ExperimentConfig resolve_config(ExperimentConfig cfg, const Dataset& ds) {
  if (cfg.features == FeatureMode::none) {
    cfg.features = ds.feature_mode != FeatureMode::none ? ds.feature_mode : default_feature_mode(ds);
  }
  if (cfg.pool == PoolKind::sum_avg) {
    cfg.pool = ds.has_node_labels ? PoolKind::sum : PoolKind::avg;
  }
  const bool needs_k = cfg.blocks > 0 || cfg.pool == PoolKind::sopool_mattn;
  if (needs_k) {
    const std::size_t count = std::max<std::size_t>(cfg.blocks, 1);
    if (cfg.k.empty()) {
      cfg.k.push_back(std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(ds.average_nodes() / 2.0))));
    }
    while (cfg.k.size() < count) cfg.k.push_back(std::max<std::size_t>(1, (cfg.k.back() + 1) / 2));
    cfg.k.resize(count);
  }
  return cfg;
}

inline ModelConfig model_config(const ExperimentConfig& cfg, const Dataset& ds) {
  ModelConfig m;
  m.gnn = cfg.gnn;
  m.pool = cfg.pool;
  m.in_dim = ds.feature_dim;
  m.num_classes = static_cast<std::size_t>(ds.num_classes);
  m.hidden = cfg.hidden;
  m.fprime = cfg.fprime;
  m.k = cfg.k;
  m.blocks = cfg.blocks;
  m.dropout = cfg.dropout;
  return m;
}

struct CVResult {
  static constexpr int kSchemaVersion = 1;

  ExperimentConfig config;
  std::vector<std::vector<double>> fold_accuracy;  // [fold][epoch]
  std::vector<std::vector<double>> fold_loss;      // [fold][epoch] mean training loss
  int selected_epoch = 0;                          // 1-based; 0 in per-fold mode
  std::vector<int> fold_selected_epochs;           // 1-based, per-fold mode only
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  double wall_seconds = 0.0;

  /// Equality of everything except wall time.
  bool same_outcome(const CVResult& o) const {
    return config == o.config && fold_accuracy == o.fold_accuracy && fold_loss == o.fold_loss &&
           selected_epoch == o.selected_epoch && fold_selected_epochs == o.fold_selected_epochs &&
           mean_accuracy == o.mean_accuracy && std_accuracy == o.std_accuracy;
  }
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= static_cast<double>(xs.size());
  return {m, std::sqrt(v)};
}

struct EpochSummary {
  int selected_epoch = 0;
  std::vector<int> fold_selected_epochs;
  double mean = 0.0;
  double std = 0.0;
};

/// Applies the epoch-selection rule to per-fold accuracy curves.
inline EpochSummary summarize_epochs(const std::vector<std::vector<double>>& acc, EpochSelect mode) {
  EpochSummary s;
  if (acc.empty() || acc[0].empty()) return s;
  const std::size_t epochs = acc[0].size();
  for (const auto& f : acc)
    if (f.size() != epochs) throw SchemaError("fold accuracy curves differ in length");
  std::vector<double> picked(acc.size());
  if (mode == EpochSelect::mean) {
    std::size_t best = 0;
    double best_mean = -1.0;
    for (std::size_t e = 0; e < epochs; ++e) {
      double m = 0.0;
      for (const auto& f : acc) m += f[e];
      m /= static_cast<double>(acc.size());
      if (m > best_mean) {
        best_mean = m;
        best = e;
      }
    }
    s.selected_epoch = static_cast<int>(best) + 1;
    for (std::size_t f = 0; f < acc.size(); ++f) picked[f] = acc[f][best];
  } else {
    for (std::size_t f = 0; f < acc.size(); ++f) {
      const auto it = std::max_element(acc[f].begin(), acc[f].end());
      s.fold_selected_epochs.push_back(static_cast<int>(it - acc[f].begin()) + 1);
      picked[f] = *it;
    }
  }
  std::tie(s.mean, s.std) = mean_std(picked);
  return s;
}

struct TrainHooks {
  /// Called with the dataset indices of every minibatch that is back-propagated.
  std::function<void(std::size_t fold, std::span<const std::size_t> ids)> on_train_batch;
};

struct FoldOutcome {
  std::vector<double> accuracy;
  std::vector<double> loss;
};

/// Predicted class per graph, scored in eval mode.
inline std::vector<int> predict(Model& model, const Dataset& ds, std::span<const std::size_t> ids,
                                std::size_t chunk = 128) {
  std::vector<int> out;
  out.reserve(ids.size());
  Rng unused(0);
  for (std::size_t start = 0; start < ids.size(); start += chunk) {
    const auto part = ids.subspan(start, std::min(chunk, ids.size() - start));
    GraphBatch batch = batch_graphs(ds, part);
    ag::Tape tape(false);
    const Matrix& logits = model.forward(tape, batch, ag::Mode::eval, unused).value();
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      auto row = logits.row_span(i);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

inline double accuracy(Model& model, const Dataset& ds, std::span<const std::size_t> ids) {
  if (ids.empty()) return 0.0;
  const std::vector<int> pred = predict(model, ds, ids);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) correct += pred[i] == ds.graphs[ids[i]].label;
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

/// Splits shuffled training ids into minibatches; a trailing batch of one
/// graph is merged into its predecessor so batch norm always sees ≥2 graphs.
inline std::vector<std::vector<std::size_t>> make_minibatches(std::span<const std::size_t> ids,
                                                              std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < ids.size(); s += batch_size) {
    const std::size_t e = std::min(ids.size(), s + batch_size);
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(s),
                     ids.begin() + static_cast<std::ptrdiff_t>(e));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

/// Trains one fold. `cfg` must already be resolved against `ds`.
inline FoldOutcome train_fold(const ExperimentConfig& cfg, const Dataset& ds, const FoldSplit& split,
                              Rng rng, const TrainHooks& hooks = {}) {
  std::unique_ptr<Model> model = build_model(model_config(cfg, ds), rng);
  std::vector<ag::Parameter*> params = model->parameters();
  const StepDecay schedule{cfg.lr, cfg.lr_decay, cfg.decay_every};
  Adam adam;
  FoldOutcome out;
  std::vector<std::size_t> order = split.train;
  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    adam.lr = schedule.at(epoch);
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& ids : make_minibatches(order, cfg.batch_size)) {
      GraphBatch batch = batch_graphs(ds, ids);
      ag::Tape tape;
      ag::Var logits = model->forward(tape, batch, ag::Mode::train, rng);
      ag::Var loss = ag::cross_entropy(logits, batch.labels);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw DivergenceError("fold " + std::to_string(split.fold) + " epoch " +
                              std::to_string(epoch + 1) + ": training loss is " +
                              std::to_string(lv));
      }
      if (hooks.on_train_batch) hooks.on_train_batch(split.fold, ids);
      tape.backward(loss);
      for (const ag::Parameter* p : params)
        for (double g : p->grad.data())
          if (!std::isfinite(g)) {
            throw DivergenceError("fold " + std::to_string(split.fold) + " epoch " +
                                  std::to_string(epoch + 1) + ": non-finite gradient in " + p->name);
          }
      adam.step(params);
      loss_sum += lv * static_cast<double>(ids.size());
      seen += ids.size();
    }
    out.loss.push_back(seen ? loss_sum / static_cast<double>(seen) : 0.0);
    out.accuracy.push_back(accuracy(*model, ds, split.validation));
  }
  return out;
}

/// k-fold cross-validated training. `ds` must carry features. Folds run on
/// up to `jobs` threads; results are identical for any thread count.
inline CVResult train_cv(ExperimentConfig cfg, const Dataset& ds, std::size_t jobs = 1,
                         const TrainHooks& hooks = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (ds.feature_dim == 0) throw ConfigError("train_cv: dataset has no node features");
  cfg = resolve_config(std::move(cfg), ds);
  cfg.validate();
  const std::vector<FoldSplit> splits = stratified_kfold(ds, cfg.folds, cfg.seed);
  const Rng root(cfg.seed);

  std::vector<FoldOutcome> outcomes(splits.size());
  std::vector<std::exception_ptr> errors(splits.size());
  std::atomic<std::size_t> next{0};
  std::mutex hook_mutex;
  TrainHooks guarded;
  if (hooks.on_train_batch) {
    guarded.on_train_batch = [&](std::size_t fold, std::span<const std::size_t> ids) {
      std::lock_guard lock(hook_mutex);
      hooks.on_train_batch(fold, ids);
    };
  }
  auto worker = [&] {
    for (std::size_t f; (f = next.fetch_add(1)) < splits.size();) {
      try {
        outcomes[f] = train_fold(cfg, ds, splits[f], root.split(f), guarded);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  jobs = std::clamp<std::size_t>(jobs, 1, splits.size());
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  CVResult r;
  r.config = cfg;
  for (FoldOutcome& o : outcomes) {
    r.fold_accuracy.push_back(std::move(o.accuracy));
    r.fold_loss.push_back(std::move(o.loss));
  }
  const EpochSummary s = summarize_epochs(r.fold_accuracy, cfg.epoch_select);
  r.selected_epoch = s.selected_epoch;
  r.fold_selected_epochs = s.fold_selected_epochs;
  r.mean_accuracy = s.mean;
  r.std_accuracy = s.std;
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

struct GridResult {
  std::vector<CVResult> runs;  // hidden-major, then batch size
  std::size_t best = 0;
};

/// Grid search over hidden units × batch size, one configuration for all
/// folds; the best run has the highest selected mean accuracy (first wins).
inline GridResult train_grid(const ExperimentConfig& base, const Dataset& ds, std::size_t jobs = 1,
                             std::span<const std::size_t> hidden = kHiddenGrid,
                             std::span<const std::size_t> batch = kBatchGrid) {
  GridResult g;
  for (std::size_t h : hidden) {
    for (std::size_t b : batch) {
      ExperimentConfig c = base;
      c.hidden = h;
      c.batch_size = b;
      g.runs.push_back(train_cv(c, ds, jobs));
      if (g.runs.back().mean_accuracy > g.runs[g.best].mean_accuracy) g.best = g.runs.size() - 1;
    }
  }
  return g;
}

}  // namespace sopool
