// One PASS/FAIL line per acceptance criterion; nonzero exit if any fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sopool/cli.hpp"
#include "sopool/sopool.hpp"

using namespace sopool;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Graph random_graph(std::size_t n, std::size_t d, Rng& rng) {
  Graph g;
  g.num_nodes = n;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (rng.uniform() < 0.25) g.edges.emplace_back(u, v);
  g.features = Matrix(n, d);
  for (double& x : g.features.data()) x = rng.uniform(-1.0, 1.0);
  g.label = static_cast<int>(rng.below(2));
  return g;
}

Dataset toy() {
  return build_features(parse_tu_dataset(fs::path(SOPOOL_FIXTURE_DIR) / "TOY", "TOY"),
                        FeatureMode::node_label_onehot);
}

Outcome gradients() {
  const auto t0 = Clock::now();
  const gradcheck::Report rep = gradcheck::run({});
  const double secs = seconds_since(t0);
  bool flat = false, hier = false;
  for (const auto& c : rep.cases) {
    flat = flat || c.name.starts_with("flat_model:");
    hier = hier || c.name.starts_with("hierarchical_model:");
  }
  const bool ok = rep.passed() && rep.seeds == 50 && flat && hier && secs < 120.0;
  return {ok, std::to_string(rep.cases.size()) + " cases x " + std::to_string(rep.seeds) +
                  " seeds, worst " + fmt("%.2e", rep.worst.rel_err) + " (" + rep.worst.case_name +
                  "), " + fmt("%.1f", secs) + " s"};
}

Outcome permutation_invariance() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  const std::size_t d = 3, hidden = 4;
  GnnStack stack(GnnVariant::gin0, d, hidden, rng);
  const std::size_t f = stack.output_dim();
  const PoolingParams params = PoolingParams::seeded(f, 17, 3, 3);
  std::vector<std::size_t> dims(std::size(distinguishable_kinds), 0);
  double worst = 0.0;
  bool dims_ok = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Graph g = random_graph(1 + rng.below(20), d, rng);
    std::vector<std::size_t> perm(g.num_nodes);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    const Graph p = permute_graph(g, perm);
    ag::Tape t(false);
    const Matrix h = stack.forward(t, t.constant(g.features), g.adjacency(), ag::Mode::eval).value();
    const Matrix hp = stack.forward(t, t.constant(p.features), p.adjacency(), ag::Mode::eval).value();
    for (std::size_t i = 0; i < std::size(distinguishable_kinds); ++i) {
      const Matrix a = pooled_output(distinguishable_kinds[i], h, params);
      const Matrix b = pooled_output(distinguishable_kinds[i], hp, params);
      worst = std::max(worst, max_abs_diff(a, b));
      if (dims[i] == 0) dims[i] = a.size();
      dims_ok = dims_ok && a.size() == dims[i];
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && dims_ok && secs < 60.0,
          "max |diff| " + fmt("%.2e", worst) + ", dims fixed: " + (dims_ok ? "yes" : "no") + ", " +
              fmt("%.2f", secs) + " s"};
}

Outcome parameter_counts() {
  bool ok = true;
  std::ostringstream os;
  for (std::uint64_t c : {2u, 3u, 5u}) {
    const auto fl = count_classifier_params(ParamCountKind::flatten, 160, 32, c);
    const auto bi = count_classifier_params(ParamCountKind::bimap, 160, 32, c);
    const auto at = count_classifier_params(ParamCountKind::attn, 160, 32, c);
    ok = ok && fl == 25600 * c && bi == 5120 + 1024 * c && at == 160 + 160 * c;
    os << "c=" << c << ": " << fl << '/' << bi << '/' << at << "  ";
  }
  return {ok, os.str()};
}

Outcome figure2() {
  std::ostringstream out, err;
  const int code = cli::run(std::vector<std::string>{"distinguish", "--figure2"}, out, err);
  return {code == 0, "exit " + std::to_string(code)};
}

Outcome multi_head_equivalence() {
  Rng rng(55);
  bool exact = true;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(20), f = 1 + rng.below(16), k = 1 + rng.below(8);
    Matrix h(n, f), u(k, f);
    for (double& x : h.data()) x = rng.uniform(-2.0, 2.0);
    for (double& x : u.data()) x = rng.uniform(-2.0, 2.0);
    const Matrix multi = pool::sopool_mattn(h, u);
    for (std::size_t i = 0; i < k; ++i) {
      Matrix mu(f, 1);
      for (std::size_t j = 0; j < f; ++j) mu[j] = u(i, j);
      const Matrix single = pool::sopool_attn(h, mu);
      for (std::size_t j = 0; j < f; ++j) exact = exact && multi(i, j) == single[j];
    }
  }
  return {exact, "200 random (n, f, k) instances, bitwise equal: " + std::string(exact ? "yes" : "no")};
}

Outcome mutag() {
  const char* env = std::getenv("SOPOOL_DATA_DIR");
  const fs::path root = env && *env ? fs::path(env) : fs::path(SOPOOL_DATA_DIR_DEFAULT);
  if (!fs::exists(root / "MUTAG")) return {false, "MUTAG not found under " + root.string()};
  const auto t0 = Clock::now();
  const Dataset raw = parse_tu_dataset(root / "MUTAG", "MUTAG");
  const Dataset ds = build_features(raw, default_feature_mode(raw));
  ExperimentConfig cfg;
  cfg.dataset = "MUTAG";
  cfg.gnn = GnnVariant::gin0;
  cfg.pool = PoolKind::sopool_bimap;
  cfg.hidden = 32;
  cfg.fprime = 32;
  cfg.batch_size = 32;
  cfg.max_epochs = 300;
  cfg.seed = 7;
  const CVResult r = train_cv(cfg, ds, std::max(1u, std::thread::hardware_concurrency()));
  const double secs = seconds_since(t0);
  return {r.mean_accuracy >= 0.85 && secs < 1200.0,
          table_row(r) + " at epoch " + std::to_string(r.selected_epoch) + ", " +
              fmt("%.0f", secs) + " s"};
}

Outcome batch_consistency() {
  const Dataset ds = toy();
  double worst = 0.0;
  bool same_pred = true;
  for (PoolKind kind : {PoolKind::sopool_bimap, PoolKind::sopool_attn, PoolKind::covpool,
                        PoolKind::attnpool, PoolKind::max, PoolKind::sopool_mattn}) {
    for (std::size_t blocks : {0u, 2u}) {
      if (blocks && kind != PoolKind::sopool_mattn) continue;
      ExperimentConfig c;
      c.dataset = "TOY";
      c.pool = kind;
      c.hidden = 4;
      c.fprime = 3;
      c.blocks = blocks;
      c = resolve_config(c, ds);
      Rng rng(11);
      auto model = build_model(model_config(c, ds), rng);
      // a few training steps so batch-norm running statistics are non-trivial
      std::vector<std::size_t> all(ds.graphs.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      Adam adam;
      for (int step = 0; step < 3; ++step) {
        ag::Tape t;
        const GraphBatch b = batch_graphs(ds, all);
        t.backward(ag::cross_entropy(model->forward(t, b, ag::Mode::train, rng), b.labels));
        auto ps = model->parameters();
        adam.step(ps);
      }
      ag::Tape t(false);
      const Matrix batched = model->forward(t, batch_graphs(ds, all), ag::Mode::eval, rng).value();
      const std::vector<int> pred = predict(*model, ds, all);
      for (std::size_t i = 0; i < all.size(); ++i) {
        const std::vector<std::size_t> one{i};
        ag::Tape ti(false);
        const Matrix single = model->forward(ti, batch_graphs(ds, one), ag::Mode::eval, rng).value();
        for (std::size_t j = 0; j < single.cols(); ++j)
          worst = std::max(worst, std::abs(single[j] - batched(i, j)));
        same_pred = same_pred && predict(*model, ds, one)[0] == pred[i];
      }
    }
  }
  return {worst < 1e-9 && same_pred, "max |logit diff| " + fmt("%.2e", worst) +
                                         ", predictions equal: " + (same_pred ? "yes" : "no")};
}

Outcome hierarchical() {
  const Dataset ds = toy();
  std::vector<std::size_t> all(ds.graphs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const GraphBatch batch = batch_graphs(ds, all);
  bool finite = true, deterministic = true;
  double asym = 0.0;
  int configs = 0;
  for (std::size_t blocks : {1u, 2u, 3u}) {
    for (std::size_t k : {1u, 2u, 4u}) {
      ExperimentConfig c;
      c.dataset = "TOY";
      c.pool = PoolKind::sopool_mattn;
      c.hidden = 4;
      c.blocks = blocks;
      c.k = {k};
      c = resolve_config(c, ds);
      std::vector<Matrix> runs;
      for (int rep = 0; rep < 2; ++rep) {
        Rng rng(blocks * 10 + k);
        auto model = build_model(model_config(c, ds), rng);
        auto& hm = dynamic_cast<HierarchicalModel&>(*model);
        ag::Tape t;
        auto tr = hm.trace(t, batch, ag::Mode::train, rng);
        runs.push_back(tr.logits.value());
        for (double x : tr.logits.value().data()) finite = finite && std::isfinite(x);
        for (const auto& per_block : tr.adjacency)
          for (const ag::Var& a : per_block)
            asym = std::max(asym, max_abs_diff(a.value(), transpose(a.value())));
      }
      deterministic = deterministic && runs[0] == runs[1];
      ++configs;
    }
  }
  return {finite && deterministic && asym < 1e-10,
          std::to_string(configs) + " configs, finite: " + (finite ? "yes" : "no") +
              ", max A' asymmetry " + fmt("%.1e", asym) +
              ", deterministic: " + (deterministic ? "yes" : "no")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},
      {"permutation invariance", permutation_invariance},
      {"parameter counts", parameter_counts},
      {"figure2 verdicts", figure2},
      {"multi-head equivalence", multi_head_equivalence},
      {"MUTAG 10-fold accuracy", mutag},
      {"batch consistency", batch_consistency},
      {"hierarchical smoke", hierarchical},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << ' ' << (i + 1) << ' ' << criteria[i].first << ": "
              << o.detail << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
