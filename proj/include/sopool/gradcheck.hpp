#pragma once

// Finite-difference gradient checker covering every differentiable tape op,
// every pooling operator and both model builders.
//
// Each case owns a set of Parameters (the tensors under test) and a loss
// closure. The analytic gradient comes from one backward sweep; the numeric
// one from central differences with step h on every entry. The error of a
// tensor is ‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor), so gradients far below the
// floor are compared absolutely.
//
// Finite differences are meaningless across a relu or max kink, so an
// instance whose tape passes within `kink_guard` of one is redrawn from the
// next stream of the same seed.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/batch.hpp"
#include "sopool/error.hpp"
#include "sopool/graph.hpp"
#include "sopool/layers.hpp"
#include "sopool/matrix.hpp"
#include "sopool/model.hpp"
#include "sopool/pooling.hpp"
#include "sopool/rng.hpp"

namespace sopool::gradcheck {

struct Instance {
  std::vector<ag::Parameter*> params;
  std::function<ag::Var(ag::Tape&)> loss;
  std::shared_ptr<void> storage;
};

struct Case {
  std::string name;
  std::function<Instance(Rng&)> make;
};

struct Options {
  std::size_t seeds = 50;
  std::uint64_t first_seed = 0;
  double step = 1e-5;
  double tolerance = 1e-5;
  double floor = 1e-3;
  double kink_guard = 1e-3;
  std::size_t max_redraws = 50;
  std::vector<std::string> only;  // case-name filter, empty = all
};

struct TensorError {
  std::string case_name;
  std::uint64_t seed = 0;
  std::string tensor;
  double rel_err = 0.0;
  std::size_t redraws = 0;
};

struct CaseResult {
  std::string name;
  TensorError worst;
  bool passed = true;
};

struct Report {
  std::vector<CaseResult> cases;
  TensorError worst;
  std::size_t redraws = 0;
  double tolerance = 0.0;
  std::size_t seeds = 0;
  bool passed() const {
    return std::all_of(cases.begin(), cases.end(), [](const CaseResult& c) { return c.passed; });
  }
  std::vector<std::string> failed() const {
    std::vector<std::string> out;
    for (const CaseResult& c : cases)
      if (!c.passed) out.push_back(c.name);
    return out;
  }
};

namespace detail {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& x : m.data()) x = rng.uniform(lo, hi);
  return m;
}

/// Entries bounded away from zero (for relu inputs).
inline Matrix away_from_zero(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.data()) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return m;
}

/// Entries with pairwise gaps of at least 0.05 (for max).
inline Matrix distinct_entries(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = -1.0 + 0.1 * static_cast<double>(i);
  rng.shuffle(std::span<double>(v));
  for (double& x : v) x += rng.uniform(-0.02, 0.02);
  return Matrix(r, c, std::move(v));
}

inline Matrix symmetric(std::size_t n, Rng& rng) {
  Matrix a = random_matrix(n, n, rng, 0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j) a(i, j) = a(j, i);
  return a;
}

inline ag::Adjacency random_adjacency(std::size_t n, Rng& rng) {
  Graph g;
  g.num_nodes = n;
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = u + 1; v < n; ++v)
      if (rng.uniform() < 0.5) g.edges.emplace_back(u, v);
  return g.adjacency();
}

/// An op case: the Parameters are the op inputs, the loss is Σ out ⊙ R with
/// a fixed random R.
using OpBody = std::function<ag::Var(ag::Tape&, std::vector<ag::Var>&)>;

inline Instance op_instance(std::vector<Matrix> inputs, OpBody body, Rng& rng,
                            std::shared_ptr<void> extra = nullptr) {
  struct Store {
    std::vector<ag::Parameter> params;
    std::shared_ptr<void> extra;
    Matrix weights;
    bool has_weights = false;
  };
  auto s = std::make_shared<Store>();
  s->extra = std::move(extra);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    s->params.emplace_back("x" + std::to_string(i), std::move(inputs[i]));
  }
  const std::uint64_t wseed = rng.next();
  Instance inst;
  for (auto& p : s->params) inst.params.push_back(&p);
  inst.loss = [s, body = std::move(body), wseed](ag::Tape& t) {
    std::vector<ag::Var> vars;
    for (auto& p : s->params) vars.push_back(t.param(p));
    ag::Var out = body(t, vars);
    if (!s->has_weights) {
      Rng wr(wseed);
      s->weights = random_matrix(out.rows(), out.cols(), wr);
      s->has_weights = true;
    }
    return ag::sum(ag::mul(out, t.constant(s->weights)));
  };
  inst.storage = s;
  return inst;
}

inline Case op_case(std::string name, std::function<Instance(Rng&)> make) {
  return Case{std::move(name), std::move(make)};
}

/// A few small labelled graphs with continuous features.
inline Dataset tiny_dataset(Rng& rng, std::size_t in_dim, std::size_t graphs = 3) {
  Dataset ds;
  ds.name = "gradcheck";
  ds.num_classes = 2;
  ds.feature_dim = in_dim;
  for (std::size_t g = 0; g < graphs; ++g) {
    Graph gr;
    gr.num_nodes = 3 + rng.below(3);
    for (std::size_t v = 1; v < gr.num_nodes; ++v) gr.edges.emplace_back(rng.below(v), v);
    for (std::size_t u = 0; u < gr.num_nodes; ++u)
      for (std::size_t v = u + 1; v < gr.num_nodes; ++v)
        if (rng.uniform() < 0.2) gr.edges.emplace_back(u, v);
    gr.edges = normalize_edges(std::move(gr.edges));
    gr.features = random_matrix(gr.num_nodes, in_dim, rng);
    gr.label = static_cast<int>(g % 2);
    ds.graphs.push_back(std::move(gr));
  }
  return ds;
}

inline Instance model_instance(ModelConfig cfg, Rng& rng) {
  struct Store {
    Dataset ds;
    GraphBatch batch;
    std::unique_ptr<Model> model;
  };
  auto s = std::make_shared<Store>();
  s->ds = tiny_dataset(rng, cfg.in_dim);
  std::vector<std::size_t> ids(s->ds.graphs.size());
  for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
  s->batch = batch_graphs(s->ds, ids);
  s->model = build_model(cfg, rng);
  // Biases, ε and batch-norm shifts start at exactly zero, which puts every
  // relu fed by a zero row right on its kink; draw them at random instead.
  Instance inst;
  inst.params = s->model->parameters();
  for (ag::Parameter* p : inst.params) {
    if (p->name.ends_with(".bias") || p->name.ends_with(".beta") || p->name.ends_with(".eps")) {
      for (double& x : p->value.data()) x = rng.uniform(-0.5, 0.5);
    } else if (p->name.ends_with(".gamma")) {
      for (double& x : p->value.data()) x = rng.uniform(0.5, 1.5);
    }
  }
  const std::uint64_t dseed = rng.next();
  inst.loss = [s, dseed](ag::Tape& t) {
    Rng drop(dseed);
    ag::Var logits = s->model->forward(t, s->batch, ag::Mode::train, drop);
    return ag::cross_entropy(logits, s->batch.labels);
  };
  inst.storage = s;
  return inst;
}

inline double norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.data()) s += x * x;
  return std::sqrt(s);
}

}  // namespace detail

/// All gradient-check cases.
inline std::vector<Case> all_cases() {
  using namespace detail;
  using ag::Var;
  using V = std::vector<Var>;
  std::vector<Case> cs;

  cs.push_back(op_case("matmul", [](Rng& r) {
    return op_instance({random_matrix(3, 4, r), random_matrix(4, 2, r)},
                       [](ag::Tape&, V& v) { return ag::matmul(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("matmul_tn", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(4, 2, r)},
                       [](ag::Tape&, V& v) { return ag::matmul_tn(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("matmul_nt", [](Rng& r) {
    return op_instance({random_matrix(3, 4, r), random_matrix(2, 4, r)},
                       [](ag::Tape&, V& v) { return ag::matmul_nt(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("transpose", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r)}, [](ag::Tape&, V& v) { return ag::transpose(v[0]); }, r);
  }));
  cs.push_back(op_case("add", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r), random_matrix(3, 2, r)},
                       [](ag::Tape&, V& v) { return ag::add(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("sub", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r), random_matrix(3, 2, r)},
                       [](ag::Tape&, V& v) { return ag::sub(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("mul", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r), random_matrix(3, 2, r)},
                       [](ag::Tape&, V& v) { return ag::mul(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("relu", [](Rng& r) {
    return op_instance({away_from_zero(4, 3, r)}, [](ag::Tape&, V& v) { return ag::relu(v[0]); }, r);
  }));
  cs.push_back(op_case("scale", [](Rng& r) {
    const double k = r.uniform(-2.0, 2.0);
    return op_instance({random_matrix(3, 3, r)}, [k](ag::Tape&, V& v) { return ag::scale(v[0], k); }, r);
  }));
  cs.push_back(op_case("scale_by", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r), random_matrix(1, 1, r)},
                       [](ag::Tape&, V& v) { return ag::scale_by(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("add_row", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(1, 3, r)},
                       [](ag::Tape&, V& v) { return ag::add_row(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("sum", [](Rng& r) {
    return op_instance({random_matrix(3, 4, r)}, [](ag::Tape&, V& v) { return ag::sum(v[0]); }, r);
  }));
  cs.push_back(op_case("softmax_columns", [](Rng& r) {
    return op_instance({random_matrix(5, 1, r, -2.0, 2.0)},
                       [](ag::Tape&, V& v) { return ag::softmax_columns(v[0]); }, r);
  }));
  cs.push_back(op_case("batch_norm", [](Rng& r) {
    auto stats = std::make_shared<ag::RunningStats>(3);
    return op_instance({random_matrix(5, 3, r), random_matrix(1, 3, r, 0.5, 1.5), random_matrix(1, 3, r)},
                       [stats](ag::Tape&, V& v) {
                         ag::RunningStats local = *stats;
                         return ag::batch_norm(v[0], v[1], v[2], local, ag::Mode::train);
                       },
                       r, stats);
  }));
  cs.push_back(op_case("batch_norm_eval", [](Rng& r) {
    auto stats = std::make_shared<ag::RunningStats>(3);
    stats->mean = random_matrix(1, 3, r);
    stats->var = random_matrix(1, 3, r, 0.5, 2.0);
    return op_instance({random_matrix(5, 3, r), random_matrix(1, 3, r, 0.5, 1.5), random_matrix(1, 3, r)},
                       [stats](ag::Tape&, V& v) {
                         return ag::batch_norm(v[0], v[1], v[2], *stats, ag::Mode::eval);
                       },
                       r, stats);
  }));
  cs.push_back(op_case("dropout", [](Rng& r) {
    const std::uint64_t mseed = r.next();
    return op_instance({random_matrix(4, 3, r)},
                       [mseed](ag::Tape&, V& v) {
                         Rng mr(mseed);
                         return ag::dropout(v[0], 0.5, ag::Mode::train, mr);
                       },
                       r);
  }));
  cs.push_back(op_case("cross_entropy", [](Rng& r) {
    std::vector<int> labels(4);
    for (int& l : labels) l = static_cast<int>(r.below(3));
    return op_instance({random_matrix(4, 3, r, -2.0, 2.0)},
                       [labels](ag::Tape&, V& v) { return ag::cross_entropy(v[0], labels); }, r);
  }));
  cs.push_back(op_case("slice_rows", [](Rng& r) {
    return op_instance({random_matrix(5, 2, r)}, [](ag::Tape&, V& v) { return ag::slice_rows(v[0], 1, 3); }, r);
  }));
  cs.push_back(op_case("vstack", [](Rng& r) {
    return op_instance({random_matrix(2, 3, r), random_matrix(1, 3, r), random_matrix(3, 3, r)},
                       [](ag::Tape&, V& v) { return ag::vstack(v); }, r);
  }));
  cs.push_back(op_case("hstack", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r), random_matrix(3, 1, r), random_matrix(3, 3, r)},
                       [](ag::Tape&, V& v) { return ag::hstack(v); }, r);
  }));
  cs.push_back(op_case("flatten", [](Rng& r) {
    return op_instance({random_matrix(3, 2, r)}, [](ag::Tape&, V& v) { return ag::flatten(v[0]); }, r);
  }));
  cs.push_back(op_case("column_sum", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r)}, [](ag::Tape&, V& v) { return ag::column_sum(v[0]); }, r);
  }));
  cs.push_back(op_case("column_mean", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r)}, [](ag::Tape&, V& v) { return ag::column_mean(v[0]); }, r);
  }));
  cs.push_back(op_case("column_max", [](Rng& r) {
    return op_instance({distinct_entries(4, 3, r)}, [](ag::Tape&, V& v) { return ag::column_max(v[0]); }, r);
  }));
  cs.push_back(op_case("center_columns", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r)}, [](ag::Tape&, V& v) { return ag::center_columns(v[0]); }, r);
  }));
  cs.push_back(op_case("aggregate_sum", [](Rng& r) {
    auto adj = std::make_shared<ag::Adjacency>(random_adjacency(5, r));
    return op_instance({random_matrix(5, 3, r), random_matrix(1, 1, r, -0.5, 0.5)},
                       [adj](ag::Tape&, V& v) { return ag::aggregate(v[0], *adj, ag::Aggregate::sum, &v[1]); },
                       r, adj);
  }));
  cs.push_back(op_case("aggregate_mean", [](Rng& r) {
    auto adj = std::make_shared<ag::Adjacency>(random_adjacency(5, r));
    return op_instance({random_matrix(5, 3, r)},
                       [adj](ag::Tape&, V& v) { return ag::aggregate(v[0], *adj, ag::Aggregate::mean); },
                       r, adj);
  }));
  cs.push_back(op_case("aggregate_max", [](Rng& r) {
    auto adj = std::make_shared<ag::Adjacency>(random_adjacency(5, r));
    return op_instance({distinct_entries(5, 3, r)},
                       [adj](ag::Tape&, V& v) { return ag::aggregate(v[0], *adj, ag::Aggregate::max); },
                       r, adj);
  }));

  // pooling operators
  cs.push_back(op_case("pool_sopool", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r)}, [](ag::Tape&, V& v) { return ag::sopool(v[0]); }, r);
  }));
  cs.push_back(op_case("pool_sopool_bimap", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(3, 2, r)},
                       [](ag::Tape&, V& v) { return ag::sopool_bimap(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("pool_sopool_attn", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(3, 1, r)},
                       [](ag::Tape&, V& v) { return ag::sopool_attn(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("pool_covpool", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r)}, [](ag::Tape&, V& v) { return ag::covpool(v[0]); }, r);
  }));
  cs.push_back(op_case("pool_covpool_bimap", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(3, 2, r)},
                       [](ag::Tape&, V& v) { return ag::covpool_bimap(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("pool_attnpool", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(3, 1, r)},
                       [](ag::Tape&, V& v) { return ag::attnpool(v[0], v[1]); }, r);
  }));
  cs.push_back(op_case("pool_sopool_mattn", [](Rng& r) {
    return op_instance({random_matrix(4, 3, r), random_matrix(2, 3, r)},
                       [](ag::Tape&, V& v) { return ag::sopool_mattn(v[0], v[1]).nodes; }, r);
  }));
  cs.push_back(op_case("pool_update_adjacency", [](Rng& r) {
    auto a = std::make_shared<Matrix>(symmetric(4, r));
    return op_instance({random_matrix(4, 3, r), random_matrix(2, 3, r)},
                       [a](ag::Tape& t, V& v) {
                         ag::PooledVars p = ag::update_adjacency(t.constant(*a), v[0], v[1]);
                         return ag::hstack(std::vector<Var>{p.adjacency, p.nodes});
                       },
                       r, a);
  }));

  // model builders: every GNN variant appears at least once
  struct ModelSpec {
    GnnVariant gnn;
    PoolKind pool;
    std::size_t blocks;
  };
  const ModelSpec specs[] = {
      {GnnVariant::gin0, PoolKind::sopool_bimap, 0},  {GnnVariant::gin_eps, PoolKind::sopool_attn, 0},
      {GnnVariant::sum_1layer, PoolKind::sopool, 0},  {GnnVariant::mean_mlp, PoolKind::covpool, 0},
      {GnnVariant::mean_1layer, PoolKind::attnpool, 0}, {GnnVariant::max_mlp, PoolKind::sopool_mattn, 0},
      {GnnVariant::max_1layer, PoolKind::sum, 0},     {GnnVariant::gin0, PoolKind::avg, 0},
      {GnnVariant::gin0, PoolKind::max, 0},           {GnnVariant::gin0, PoolKind::sopool_mattn, 2},
      {GnnVariant::gin_eps, PoolKind::sopool_mattn, 1},
  };
  for (const ModelSpec& m : specs) {
    ModelConfig cfg;
    cfg.gnn = m.gnn;
    cfg.pool = m.pool;
    cfg.in_dim = 3;
    cfg.num_classes = 2;
    cfg.hidden = 3;
    cfg.fprime = 2;
    cfg.blocks = m.blocks;
    cfg.k = m.blocks == 0 ? std::vector<std::size_t>{2} : std::vector<std::size_t>(m.blocks, 2);
    cfg.gnn_layers = 2;
    const std::string name = std::string(m.blocks ? "hierarchical_model:" : "flat_model:") +
                             std::string(gnn_variant_name(m.gnn)) + "+" + pool_kind_name(m.pool) +
                             (m.blocks ? "x" + std::to_string(m.blocks) : "");
    cs.push_back(op_case(name, [cfg](Rng& r) { return model_instance(cfg, r); }));
  }
  return cs;
}

/// Kink margin of an instance's forward pass.
inline double kink_margin(const Instance& inst) {
  ag::Tape t(false);
  inst.loss(t);
  return t.kink_margin();
}

/// Largest per-tensor relative error of one case instance.
inline TensorError check_instance(const Instance& inst, double h, double floor) {
  for (ag::Parameter* p : inst.params) p->zero_grad();
  {
    ag::Tape t;
    ag::Var loss = inst.loss(t);
    t.backward(loss);
  }
  auto eval = [&] {
    ag::Tape t(false);
    return inst.loss(t).value()[0];
  };
  TensorError worst;
  worst.rel_err = 0.0;
  for (ag::Parameter* p : inst.params) {
    Matrix numeric(p->value.rows(), p->value.cols());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double x = p->value[i];
      p->value[i] = x + h;
      const double up = eval();
      p->value[i] = x - h;
      const double down = eval();
      p->value[i] = x;
      numeric[i] = (up - down) / (2.0 * h);
    }
    Matrix diff = p->grad;
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] -= numeric[i];
    const double scale = std::max({detail::norm(p->grad), detail::norm(numeric), floor});
    const double rel = detail::norm(diff) / scale;
    if (!(rel <= worst.rel_err)) {
      worst.rel_err = rel;
      worst.tensor = p->name;
    }
  }
  return worst;
}

inline Report run(const Options& opt = {}) {
  Report rep;
  rep.tolerance = opt.tolerance;
  rep.seeds = opt.seeds;
  rep.worst.rel_err = -1.0;
  const std::vector<Case> cases = all_cases();
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), c.name) == opt.only.end()) continue;
    CaseResult cr;
    cr.name = c.name;
    cr.worst.rel_err = -1.0;
    for (std::size_t s = 0; s < opt.seeds; ++s) {
      const std::uint64_t seed = opt.first_seed + s;
      const Rng base = Rng(seed).split(ci);
      std::size_t attempt = 0;
      Rng rng = base;
      Instance inst = c.make(rng);
      while (kink_margin(inst) < opt.kink_guard) {
        if (++attempt > opt.max_redraws) {
          throw ContractError("gradcheck: case " + c.name + " seed " + std::to_string(seed) +
                              " stays within " + std::to_string(opt.kink_guard) +
                              " of a kink after " + std::to_string(opt.max_redraws) + " redraws");
        }
        rng = base.split(attempt);
        inst = c.make(rng);
      }
      TensorError e = check_instance(inst, opt.step, opt.floor);
      e.case_name = c.name;
      e.seed = seed;
      e.redraws = attempt;
      rep.redraws += attempt;
      if (!(e.rel_err <= cr.worst.rel_err)) cr.worst = e;
    }
    cr.passed = cr.worst.rel_err < opt.tolerance;
    if (!(cr.worst.rel_err <= rep.worst.rel_err)) rep.worst = cr.worst;
    rep.cases.push_back(std::move(cr));
  }
  return rep;
}

}  // namespace sopool::gradcheck
