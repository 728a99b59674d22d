#pragma once

// Discriminative-power checks for pooling operators: does a pooling map two
// different multisets of node representations to the same graph vector?

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/error.hpp"
#include "sopool/matrix.hpp"
#include "sopool/model.hpp"
#include "sopool/pooling.hpp"
#include "sopool/rng.hpp"

namespace sopool {

/// Pooling parameters shared by both sides of a comparison.
struct PoolingParams {
  Matrix mu;  // f×1, attention vector
  Matrix w;   // f×f', bilinear map
  Matrix u;   // k×f, attention heads
  std::uint64_t seed = 0;

  static PoolingParams seeded(std::size_t f, std::uint64_t seed, std::size_t fprime = 0,
                              std::size_t k = 2) {
    Rng rng(seed);
    PoolingParams p;
    p.seed = seed;
    p.mu = ag::glorot_uniform(f, 1, rng);
    p.w = ag::glorot_uniform(f, fprime == 0 ? f : fprime, rng);
    p.u = ag::glorot_uniform(k, f, rng);
    return p;
  }
};

inline constexpr PoolKind distinguishable_kinds[] = {
    PoolKind::sum,    PoolKind::avg,         PoolKind::max,
    PoolKind::sopool, PoolKind::sopool_bimap, PoolKind::sopool_attn,
    PoolKind::covpool, PoolKind::attnpool,   PoolKind::sopool_mattn};

/// Graph-level output of one pooling, flattened to a row. covpool here is
/// the plain centred Gram matrix.
inline Matrix pooled_output(PoolKind kind, const Matrix& h, const PoolingParams& p) {
  ag::Tape t(false);
  ag::Var hv = t.constant(h);
  switch (kind) {
    case PoolKind::sum: return ag::pool_first_order(hv, FirstOrder::sum).value();
    case PoolKind::avg: return ag::pool_first_order(hv, FirstOrder::avg).value();
    case PoolKind::max: return ag::pool_first_order(hv, FirstOrder::max).value();
    case PoolKind::sopool: return ag::flatten(ag::sopool(hv)).value();
    case PoolKind::sopool_bimap: return ag::sopool_bimap(hv, t.constant(p.w)).value();
    case PoolKind::sopool_attn: return ag::sopool_attn(hv, t.constant(p.mu)).value();
    case PoolKind::covpool: return ag::flatten(ag::covpool(hv)).value();
    case PoolKind::attnpool: return ag::attnpool(hv, t.constant(p.mu)).value();
    case PoolKind::sopool_mattn:
      return ag::flatten(ag::sopool_mattn(hv, t.constant(p.u)).nodes).value();
    case PoolKind::sum_avg: break;
  }
  throw ConfigError("pooling " + pool_kind_name(kind) + " cannot be compared directly");
}

enum class Verdict { collision, distinguished };

inline std::string_view verdict_name(Verdict v) {
  return v == Verdict::collision ? "collision" : "distinguished";
}

struct CollisionReport {
  PoolKind pooling = PoolKind::sum;
  std::string first;
  std::string second;
  double distance = 0.0;
  Verdict verdict = Verdict::distinguished;
  double tolerance = 0.0;
  std::uint64_t seed = 0;
};

/// Compares pooled outputs of two node-representation matrices by max-abs
/// difference; a distance below `tol` is a collision.
inline CollisionReport check_pair(const Matrix& h1, const Matrix& h2, PoolKind kind,
                                  const PoolingParams& params, double tol = 1e-9,
                                  std::string first = "G1", std::string second = "G2") {
  if (h1.cols() != h2.cols()) {
    throw ShapeError("check_pair: feature widths differ (" + h1.shape() + " vs " + h2.shape() + ")");
  }
  CollisionReport r;
  r.pooling = kind;
  r.first = std::move(first);
  r.second = std::move(second);
  r.distance = max_abs_diff(pooled_output(kind, h1, params), pooled_output(kind, h2, params));
  r.verdict = r.distance < tol ? Verdict::collision : Verdict::distinguished;
  r.tolerance = tol;
  r.seed = params.seed;
  return r;
}

/// Rows stacked into an n×f matrix.
inline Matrix stack_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return Matrix();
  Matrix m(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols()) throw ShapeError("stack_rows: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), m.row_span(i).begin());
  }
  return m;
}

struct Figure2Case {
  std::string fixture;
  std::string first;
  std::string second;
  Matrix h1;
  Matrix h2;
  PoolKind pooling;
  Verdict expected;
};

/// Shipped counterexample fixtures.
///  (a) G1 = {v}, G2 = {v, v} with v = [3, 1]: mean subtraction zeroes
///      covpool on both, softmax and averaging see only the mean.
///  (b) G1 = {a, b}, G2 = {a, a, b, b}: softmax weights are invariant to
///      uniformly repeating every node, so attnpool collides again.
inline std::vector<Figure2Case> figure2_cases() {
  const std::vector<double> v{3.0, 1.0}, a{3.0, 1.0}, b{1.0, 2.0};
  const Matrix g1a = stack_rows({v}), g2a = stack_rows({v, v});
  const Matrix g1b = stack_rows({a, b}), g2b = stack_rows({a, a, b, b});
  return {
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::covpool, Verdict::collision},
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::attnpool, Verdict::collision},
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::avg, Verdict::collision},
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::sopool, Verdict::distinguished},
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::sopool_attn, Verdict::distinguished},
      {"a", "{v}", "{v,v}", g1a, g2a, PoolKind::sum, Verdict::distinguished},
      {"b", "{a,b}", "{a,a,b,b}", g1b, g2b, PoolKind::attnpool, Verdict::collision},
      {"b", "{a,b}", "{a,a,b,b}", g1b, g2b, PoolKind::sopool_attn, Verdict::distinguished},
  };
}

struct Figure2Row {
  Figure2Case expected;
  CollisionReport report;
  bool matches() const { return report.verdict == expected.expected; }
};

inline std::vector<Figure2Row> run_figure2(std::uint64_t seed, double tol = 1e-9) {
  std::vector<Figure2Row> rows;
  for (Figure2Case& c : figure2_cases()) {
    const PoolingParams p = PoolingParams::seeded(c.h1.cols(), seed);
    CollisionReport r = check_pair(c.h1, c.h2, c.pooling, p, tol, c.first, c.second);
    rows.push_back({std::move(c), std::move(r)});
  }
  return rows;
}

struct SweepOptions {
  std::size_t max_n = 3;
  double tolerance = 1e-9;
  std::uint64_t seed = 0;
  std::uint64_t budget = 5'000'000;  // pair evaluations across all poolings
  std::size_t heads = 2;
};

/// Number of multisets of size 1..max_n over an alphabet of `a` symbols.
inline std::uint64_t count_multisets(std::uint64_t a, std::size_t max_n) {
  // C(a + n - 1, n) summed over n, computed incrementally.
  std::uint64_t total = 0, c = 1;
  for (std::size_t n = 1; n <= max_n; ++n) {
    c = c * (a + n - 1) / n;
    total += c;
  }
  return total;
}

/// Exhaustive search over all unordered pairs of distinct multisets of
/// alphabet vectors (sizes 1..max_n). Returns every collision, ordered by
/// pooling, then by multiset enumeration order.
inline std::vector<CollisionReport> sweep_multisets(const std::vector<std::vector<double>>& alphabet,
                                                    std::span<const PoolKind> poolings,
                                                    const SweepOptions& opt = {}) {
  if (opt.max_n < 1 || opt.max_n > 6) {
    throw ConfigError("sweep: max-n must be in [1, 6], got " + std::to_string(opt.max_n));
  }
  if (alphabet.empty()) throw ConfigError("sweep: alphabet is empty");
  const std::size_t f = alphabet[0].size();
  if (f == 0) throw ConfigError("sweep: alphabet vectors are empty");
  for (const auto& v : alphabet)
    if (v.size() != f) throw ShapeError("sweep: alphabet vectors differ in length");

  const std::uint64_t m = count_multisets(alphabet.size(), opt.max_n);
  const std::uint64_t evaluations = m * (m - 1) / 2 * poolings.size();
  if (evaluations > opt.budget) {
    throw BudgetError("sweep: " + std::to_string(m) + " multisets give " +
                      std::to_string(evaluations) + " pair evaluations, over the budget of " +
                      std::to_string(opt.budget));
  }

  struct Multiset {
    std::string label;
    Matrix h;
  };
  std::vector<Multiset> sets;
  std::vector<std::size_t> idx;
  auto name_of = [](std::size_t i) {
    return i < 26 ? std::string(1, static_cast<char>('a' + i)) : "s" + std::to_string(i);
  };
  for (std::size_t n = 1; n <= opt.max_n; ++n) {
    idx.assign(n, 0);
    while (true) {
      std::vector<std::vector<double>> rows;
      std::string label = "{";
      for (std::size_t i = 0; i < n; ++i) {
        rows.push_back(alphabet[idx[i]]);
        label += (i ? "," : "") + name_of(idx[i]);
      }
      sets.push_back({label + "}", stack_rows(rows)});
      // next non-decreasing index sequence
      std::size_t pos = n;
      while (pos > 0 && idx[pos - 1] == alphabet.size() - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t i = pos; i < n; ++i) idx[i] = idx[pos - 1];
    }
  }

  const PoolingParams params = PoolingParams::seeded(f, opt.seed, 0, opt.heads);
  std::vector<CollisionReport> out;
  for (PoolKind kind : poolings) {
    std::vector<Matrix> pooled;
    pooled.reserve(sets.size());
    for (const Multiset& s : sets) pooled.push_back(pooled_output(kind, s.h, params));
    for (std::size_t i = 0; i < sets.size(); ++i) {
      for (std::size_t j = i + 1; j < sets.size(); ++j) {
        const double d = max_abs_diff(pooled[i], pooled[j]);
        if (d < opt.tolerance) {
          out.push_back({kind, sets[i].label, sets[j].label, d, Verdict::collision, opt.tolerance,
                         opt.seed});
        }
      }
    }
  }
  return out;
}

inline void write_collision_csv(std::ostream& os, const std::vector<CollisionReport>& reports) {
  os << "pooling,first,second,distance,verdict,tolerance,seed\n";
  for (const CollisionReport& r : reports) {
    os << pool_kind_name(r.pooling) << ",\"" << r.first << "\",\"" << r.second << "\","
       << r.distance << ',' << verdict_name(r.verdict) << ',' << r.tolerance << ',' << r.seed
       << '\n';
  }
}

}  // namespace sopool
