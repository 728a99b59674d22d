#pragma once

// Command-line front end: train, gradcheck, distinguish, params, inspect-data.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 data error, 4 numeric divergence.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "sopool/distinguish.hpp"
#include "sopool/error.hpp"
#include "sopool/gradcheck.hpp"
#include "sopool/graph.hpp"
#include "sopool/pooling.hpp"
#include "sopool/results.hpp"
#include "sopool/trainer.hpp"

namespace sopool::cli {

inline std::string with_thousands(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

/// `root/NAME` when it holds the dataset files, else `root` itself.
inline std::filesystem::path locate_dataset(const std::filesystem::path& root, const std::string& name) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw NotFoundError("dataset directory not found: " + root.string());
  const fs::path nested = root / name;
  if (fs::is_directory(nested)) return nested;
  return root;
}

inline std::string resolve_data_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("SOPOOL_DATA_DIR"); env != nullptr && *env != '\0') return env;
  throw ConfigError("--dataset-dir not given and SOPOOL_DATA_DIR is unset");
}

inline Dataset load_dataset(const std::string& dir_flag, const std::string& name, FeatureMode mode) {
  if (name.empty()) throw ConfigError("--dataset is required");
  const auto dir = locate_dataset(resolve_data_root(dir_flag), name);
  Dataset ds = parse_tu_dataset(dir, name);
  if (mode == FeatureMode::none) mode = default_feature_mode(ds);
  return build_features(std::move(ds), mode);
}

inline std::string result_stem(const CVResult& r) {
  return r.config.dataset + "_" + r.config.model_name() + "_h" + std::to_string(r.config.hidden) +
         "_b" + std::to_string(r.config.batch_size) + "_seed" + std::to_string(r.config.seed);
}

inline void save(const CVResult& r, const std::filesystem::path& out_dir, std::ostream& err) {
  const auto stem = out_dir / result_stem(r);
  persist_result(r, stem.string() + ".json");
  write_csv(r, stem.string() + ".csv");
  err << "wrote " << stem.string() << ".{json,csv}\n";
}

struct TrainFlags {
  std::string dataset_dir;
  std::string dataset;
  std::string gnn = "gin0";
  std::string pool = "sopool-bimap";
  std::string features;
  std::size_t hidden = 32;
  std::size_t batch = 32;
  std::size_t fprime = 0;
  std::size_t blocks = 0;
  std::vector<std::size_t> k;
  int epochs = 300;
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  std::string epoch_select = "mean";
  std::string out = "results";
  std::size_t jobs = 0;
  bool off_grid = false;
  bool grid = false;
};

inline int cmd_train(const TrainFlags& f, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg;
  cfg.dataset = f.dataset;
  cfg.gnn = parse_gnn_variant(f.gnn);
  cfg.pool = parse_pool_kind(f.pool);
  cfg.features = f.features.empty() ? FeatureMode::none : parse_feature_mode(f.features);
  cfg.hidden = f.hidden;
  cfg.batch_size = f.batch;
  cfg.fprime = f.fprime;
  cfg.blocks = f.blocks;
  cfg.k = f.k;
  cfg.max_epochs = f.epochs;
  cfg.seed = f.seed;
  cfg.folds = f.folds;
  cfg.epoch_select = parse_epoch_select(f.epoch_select);
  cfg.off_grid = f.off_grid || f.grid;
  // Reject bad flags before touching the data.
  {
    ExperimentConfig probe = cfg;
    if (probe.pool == PoolKind::sum_avg) probe.pool = PoolKind::sum;
    if (f.grid) probe.hidden = kHiddenGrid[0], probe.batch_size = kBatchGrid[0];
    probe.validate();
  }
  const Dataset ds = load_dataset(f.dataset_dir, f.dataset, cfg.features);
  const std::size_t jobs = f.jobs > 0 ? f.jobs : std::max(1u, std::thread::hardware_concurrency());
  if (f.grid) {
    cfg.off_grid = f.off_grid;
    const GridResult g = train_grid(cfg, ds, jobs);
    for (const CVResult& r : g.runs) {
      out << table_row(r) << "  (hidden " << r.config.hidden << ", batch " << r.config.batch_size
          << ", epoch " << r.selected_epoch << ")\n";
      save(r, f.out, err);
    }
    out << "best: " << table_row(g.runs[g.best]) << '\n';
    return 0;
  }
  const CVResult r = train_cv(cfg, ds, jobs);
  out << table_row(r) << '\n';
  save(r, f.out, err);
  return 0;
}

inline int cmd_gradcheck(std::size_t seeds, const std::string& fault, const std::vector<std::string>& only,
                         std::ostream& out, std::ostream& err) {
  gradcheck::Options opt;
  opt.seeds = seeds;
  opt.only = only;
  if (seeds == 0) throw ConfigError("--seeds must be positive");
  std::optional<ag::testing::ScopedFault> guard;
  if (!fault.empty()) {
    int found = -1;
    for (int i = 0; i < static_cast<int>(ag::Op::count_); ++i)
      if (ag::op_name(static_cast<ag::Op>(i)) == fault) found = i;
    if (found < 0 || found == static_cast<int>(ag::Op::constant) ||
        found == static_cast<int>(ag::Op::parameter)) {
      throw ConfigError("--inject-fault: '" + fault + "' is not an op with a backward rule");
    }
    guard.emplace(static_cast<ag::Op>(found));
    err << "injecting a faulty backward into op " << fault << '\n';
  }
  const gradcheck::Report rep = gradcheck::run(opt);
  if (rep.cases.empty()) throw ConfigError("--case matched no gradient-check case");
  out << std::left;
  for (const auto& c : rep.cases) {
    out << std::setw(40) << c.name << ' ' << std::scientific << std::setprecision(3) << c.worst.rel_err
        << "  " << (c.passed ? "ok" : "FAIL") << '\n';
  }
  out << "worst offender: " << rep.worst.case_name << " (seed " << rep.worst.seed << ", tensor "
      << rep.worst.tensor << ") rel-err " << std::scientific << std::setprecision(3)
      << rep.worst.rel_err << ", tolerance " << rep.tolerance << ", seeds " << rep.seeds
      << ", kink redraws " << rep.redraws << '\n';
  if (rep.passed()) {
    out << "gradcheck passed\n";
    return 0;
  }
  out << "gradcheck FAILED:";
  for (const auto& n : rep.failed()) out << ' ' << n;
  out << '\n';
  if (!fault.empty()) out << "faulty op: " << fault << '\n';
  return 1;
}

inline std::vector<std::vector<double>> parse_alphabet(const std::string& s) {
  std::vector<std::vector<double>> out;
  std::stringstream vecs(s);
  std::string item;
  while (std::getline(vecs, item, ';')) {
    std::vector<double> v;
    std::stringstream comps(item);
    std::string x;
    while (std::getline(comps, x, ',')) {
      try {
        std::size_t used = 0;
        v.push_back(std::stod(x, &used));
        if (used != x.size()) throw std::invalid_argument(x);
      } catch (const std::exception&) {
        throw ConfigError("--alphabet: cannot parse '" + x + "'");
      }
    }
    out.push_back(std::move(v));
  }
  if (out.empty()) throw ConfigError("--alphabet is empty");
  return out;
}

struct DistinguishFlags {
  bool figure2 = false;
  bool sweep = false;
  std::size_t max_n = 3;
  std::uint64_t seed = 0;
  double tol = 1e-9;
  std::string alphabet = "1,0;0,1";
  std::vector<std::string> poolings;
  std::uint64_t budget = SweepOptions{}.budget;
};

inline int cmd_distinguish(const DistinguishFlags& f, std::ostream& out) {
  if (!f.figure2 && !f.sweep) throw ConfigError("distinguish needs --figure2 or --sweep");
  if (f.sweep && (f.max_n < 1 || f.max_n > 6)) {
    throw ConfigError("--max-n must be in [1, 6], got " + std::to_string(f.max_n));
  }
  int code = 0;
  if (f.figure2) {
    out << "fixture,pooling,first,second,distance,verdict,expected,status\n";
    for (const Figure2Row& row : run_figure2(f.seed, f.tol)) {
      out << row.expected.fixture << ',' << pool_kind_name(row.report.pooling) << ",\""
          << row.report.first << "\",\"" << row.report.second << "\"," << std::setprecision(6)
          << row.report.distance << ',' << verdict_name(row.report.verdict) << ','
          << verdict_name(row.expected.expected) << ',' << (row.matches() ? "ok" : "MISMATCH") << '\n';
      if (!row.matches()) code = 1;
    }
    out << (code == 0 ? "figure2: all verdicts reproduced\n" : "figure2: verdict mismatch\n");
  }
  if (f.sweep) {
    std::vector<PoolKind> kinds;
    if (f.poolings.empty()) {
      kinds.assign(std::begin(distinguishable_kinds), std::end(distinguishable_kinds));
    } else {
      for (const auto& p : f.poolings) kinds.push_back(parse_pool_kind(p));
    }
    SweepOptions opt;
    opt.max_n = f.max_n;
    opt.tolerance = f.tol;
    opt.seed = f.seed;
    opt.budget = f.budget;
    write_collision_csv(out, sweep_multisets(parse_alphabet(f.alphabet), kinds, opt));
  }
  return code;
}

inline int cmd_params(long long f, long long fprime, std::optional<long long> c, std::ostream& out,
                      std::ostream& err) {
  if (!c) err << "note: --c not given, using c = 2\n";
  const long long classes = c.value_or(2);
  if (f <= 0 || fprime <= 0 || classes <= 0) {
    throw ConfigError("--f, --fprime and --c must be positive");
  }
  const auto F = static_cast<std::uint64_t>(f), P = static_cast<std::uint64_t>(fprime),
             C = static_cast<std::uint64_t>(classes);
  out << "f=" << f << " f'=" << fprime << " c=" << classes << '\n';
  out << "flatten " << with_thousands(count_classifier_params(ParamCountKind::flatten, F, P, C)) << '\n';
  out << "bimap " << with_thousands(count_classifier_params(ParamCountKind::bimap, F, P, C)) << '\n';
  out << "attn " << with_thousands(count_classifier_params(ParamCountKind::attn, F, P, C)) << '\n';
  return 0;
}

inline int cmd_inspect(const std::string& dir, const std::string& name, const std::string& features,
                       std::ostream& out) {
  const Dataset ds =
      load_dataset(dir, name, features.empty() ? FeatureMode::none : parse_feature_mode(features));
  std::size_t edges = 0;
  std::vector<std::size_t> per_class(static_cast<std::size_t>(ds.num_classes));
  for (const Graph& g : ds.graphs) {
    edges += g.edges.size();
    ++per_class[static_cast<std::size_t>(g.label)];
  }
  out << "dataset " << ds.name << '\n'
      << "graphs " << ds.graphs.size() << '\n'
      << "classes " << ds.num_classes << '\n';
  for (std::size_t c = 0; c < per_class.size(); ++c)
    out << "  class " << c << " (label " << ds.class_values[c] << "): " << per_class[c] << '\n';
  out << std::fixed << std::setprecision(2) << "avg nodes " << ds.average_nodes() << '\n'
      << "avg edges "
      << (ds.graphs.empty() ? 0.0 : static_cast<double>(edges) / static_cast<double>(ds.graphs.size()))
      << '\n'
      << "node labels " << (ds.has_node_labels ? "yes" : "no") << '\n'
      << "features " << feature_mode_name(ds.feature_mode) << " (d=" << ds.feature_dim << ")\n";
  return 0;
}

/// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Second-order graph pooling: training, verification and inspection"};
  app.require_subcommand(1);

  TrainFlags tf;
  auto* train = app.add_subcommand("train", "10-fold cross-validated training on a TU dataset");
  train->add_option("--dataset-dir", tf.dataset_dir, "root holding DATASET/ (env SOPOOL_DATA_DIR)");
  train->add_option("--dataset", tf.dataset, "dataset name, e.g. MUTAG")->required();
  train->add_option("--gnn", tf.gnn, "gin0, gin-eps, sum-1layer, mean-mlp, mean-1layer, max-mlp, max-1layer");
  train->add_option("--pool", tf.pool, "pooling kind");
  train->add_option("--features", tf.features, "node-label-onehot, degree-onehot, constant");
  train->add_option("--hidden", tf.hidden);
  train->add_option("--batch", tf.batch);
  train->add_option("--fprime", tf.fprime, "bilinear projection width");
  train->add_option("--blocks", tf.blocks, "hierarchical blocks (sopool-mattn)");
  train->add_option("--k", tf.k, "pooled node counts, comma separated")->delimiter(',');
  train->add_option("--epochs", tf.epochs);
  train->add_option("--seed", tf.seed);
  train->add_option("--folds", tf.folds);
  train->add_option("--epoch-select", tf.epoch_select, "mean or per-fold");
  train->add_option("--out", tf.out, "directory for JSON/CSV results");
  train->add_option("--jobs", tf.jobs, "fold workers (default: available cores)");
  train->add_flag("--off-grid", tf.off_grid, "allow hidden/batch/blocks outside the tuning grid");
  train->add_flag("--grid", tf.grid, "search hidden x batch over the tuning grid");

  std::size_t seeds = 50;
  std::string fault;
  std::vector<std::string> only;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  grad->add_option("--seeds", seeds);
  grad->add_option("--inject-fault", fault, "corrupt the backward rule of an op (negative control)");
  grad->add_option("--case", only, "restrict to named cases");

  DistinguishFlags df;
  auto* dist = app.add_subcommand("distinguish", "pooling collision checks");
  dist->add_flag("--figure2", df.figure2, "run the shipped counterexample fixtures");
  dist->add_flag("--sweep", df.sweep, "exhaustive multiset collision sweep");
  dist->add_option("--max-n", df.max_n);
  dist->add_option("--seed", df.seed);
  dist->add_option("--tol", df.tol);
  dist->add_option("--alphabet", df.alphabet, "vectors as 'x,y;x,y'");
  dist->add_option("--pool", df.poolings, "poolings to sweep (default: all)");
  dist->add_option("--budget", df.budget, "maximum pair evaluations");

  long long pf = 160, pfp = 32;
  std::optional<long long> pc;
  auto* params = app.add_subcommand("params", "classifier parameter counts per pooling kind");
  params->add_option("--f", pf);
  params->add_option("--fprime", pfp);
  params->add_option("--c", pc);

  std::string idir, iname, ifeat;
  auto* inspect = app.add_subcommand("inspect-data", "summary statistics of a TU dataset");
  inspect->add_option("--dataset-dir", idir);
  inspect->add_option("--dataset", iname)->required();
  inspect->add_option("--features", ifeat);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return cmd_train(tf, out, err);
    if (*grad) return cmd_gradcheck(seeds, fault, only, out, err);
    if (*dist) return cmd_distinguish(df, out);
    if (*params) return cmd_params(pf, pfp, pc, out, err);
    if (*inspect) return cmd_inspect(idir, iname, ifeat, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"sopool"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace sopool::cli
