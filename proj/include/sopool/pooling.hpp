#pragma once

// Graph pooling operators on a per-graph node representation matrix H (n×f).
//
// Every operator exists twice: a tape version used inside models, and a
// plain-matrix version (namespace sopool::pool) that evaluates the same tape
// code on a gradient-free tape. Graph-level vectors are returned as 1×D rows.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "sopool/autograd.hpp"
#include "sopool/error.hpp"
#include "sopool/matrix.hpp"

namespace sopool {

enum class FirstOrder { sum, avg, max };

namespace ag {

inline Var pool_first_order(Var h, FirstOrder mode) {
  if (h.rows() == 0) throw EmptyInputError("pool_first_order: graph has no nodes");
  switch (mode) {
    case FirstOrder::sum: return column_sum(h);
    case FirstOrder::avg: return column_mean(h);
    case FirstOrder::max: return column_max(h);
  }
  return column_sum(h);
}

/// HᵀH (f×f).
inline Var sopool(Var h) { return matmul_tn(h, h); }

/// flatten(WᵀHᵀHW), row-major, evaluated as (HW)ᵀ(HW).
inline Var sopool_bimap(Var h, Var w) {
  if (w.rows() != h.cols()) {
    throw ShapeError("sopool_bimap: W is " + w.value().shape() + " but H has " +
                     std::to_string(h.cols()) + " columns");
  }
  Var hw = matmul(h, w);
  return flatten(matmul_tn(hw, hw));
}

inline void require_attention_vector(Var h, Var mu, const char* op) {
  if (mu.rows() != h.cols() || mu.cols() != 1) {
    throw ShapeError(std::string(op) + ": mu is " + mu.value().shape() + " but H has " +
                     std::to_string(h.cols()) + " columns");
  }
}

/// HᵀHμ evaluated as Hᵀ(Hμ), returned as a 1×f row.
inline Var sopool_attn(Var h, Var mu) {
  require_attention_vector(h, mu, "sopool_attn");
  return transpose(matmul_tn(h, matmul(h, mu)));
}

/// (H − 1H̄)ᵀ(H − 1H̄).
inline Var covpool(Var h) {
  if (h.rows() == 0) throw EmptyInputError("covpool: graph has no nodes");
  Var c = center_columns(h);
  return matmul_tn(c, c);
}

/// Bilinear-mapped covariance: flatten(Wᵀ(H − 1H̄)ᵀ(H − 1H̄)W).
inline Var covpool_bimap(Var h, Var w) {
  if (h.rows() == 0) throw EmptyInputError("covpool: graph has no nodes");
  return sopool_bimap(center_columns(h), w);
}

/// Hᵀ·softmax(Hμ), returned as a 1×f row.
inline Var attnpool(Var h, Var mu) {
  require_attention_vector(h, mu, "attnpool");
  return transpose(matmul_tn(h, softmax_columns(matmul(h, mu))));
}

struct PooledVars {
  Var adjacency;     // A' (k×k)
  Var nodes;         // H' (k×f)
  Var contribution;  // C  (k×n)
};

/// H' = U·HᵀH, evaluated as C·H with C = U·Hᵀ. Row i equals
/// sopool_attn(H, U[i]ᵀ) term for term.
inline PooledVars sopool_mattn(Var h, Var u) {
  if (u.cols() != h.cols()) {
    throw ShapeError("sopool_mattn: U is " + u.value().shape() + " but H has " +
                     std::to_string(h.cols()) + " columns");
  }
  Var c = matmul_nt(u, h);
  return PooledVars{Var{}, matmul(c, h), c};
}

inline void require_symmetric(const Matrix& a, const char* op) {
  if (a.rows() != a.cols()) throw ShapeError(std::string(op) + ": adjacency " + a.shape() + " is not square");
  double scale = 0.0;
  for (double x : a.data()) scale = std::max(scale, std::abs(x));
  const double tol = 1e-12 * std::max(1.0, scale);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i + 1; j < a.cols(); ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol) {
        throw IntegrityError(std::string(op) + ": adjacency is not symmetric at (" +
                             std::to_string(i) + ", " + std::to_string(j) + ")");
      }
}

/// Hierarchical pooling step: C = UHᵀ, H' = CH, A' = CACᵀ. A' is returned
/// as ½(M + Mᵀ) of the computed product M, which is exactly symmetric and
/// equal to CACᵀ whenever A is symmetric.
inline PooledVars update_adjacency(Var a, Var h, Var u) {
  require_symmetric(a.value(), "update_adjacency");
  if (a.rows() != h.rows()) {
    throw ShapeError("update_adjacency: A is " + a.value().shape() + " but H has " +
                     std::to_string(h.rows()) + " rows");
  }
  PooledVars p = sopool_mattn(h, u);
  Var m = matmul_nt(matmul(p.contribution, a), p.contribution);
  p.adjacency = scale(add(m, transpose(m)), 0.5);
  return p;
}

}  // namespace ag

/// Plain-matrix evaluation of the pooling operators.
namespace pool {

inline Matrix first_order(const Matrix& h, FirstOrder mode) {
  ag::Tape t(false);
  return ag::pool_first_order(t.constant(h), mode).value();
}
inline Matrix sopool(const Matrix& h) {
  ag::Tape t(false);
  return ag::sopool(t.constant(h)).value();
}
inline Matrix sopool_bimap(const Matrix& h, const Matrix& w) {
  ag::Tape t(false);
  return ag::sopool_bimap(t.constant(h), t.constant(w)).value();
}
inline Matrix sopool_attn(const Matrix& h, const Matrix& mu) {
  ag::Tape t(false);
  return ag::sopool_attn(t.constant(h), t.constant(mu)).value();
}
inline Matrix covpool(const Matrix& h) {
  ag::Tape t(false);
  return ag::covpool(t.constant(h)).value();
}
inline Matrix attnpool(const Matrix& h, const Matrix& mu) {
  ag::Tape t(false);
  return ag::attnpool(t.constant(h), t.constant(mu)).value();
}
inline Matrix sopool_mattn(const Matrix& h, const Matrix& u) {
  ag::Tape t(false);
  return ag::sopool_mattn(t.constant(h), t.constant(u)).nodes.value();
}

struct Pooled {
  Matrix adjacency;
  Matrix nodes;
  Matrix contribution;
};

inline Pooled update_adjacency(const Matrix& a, const Matrix& h, const Matrix& u) {
  ag::Tape t(false);
  ag::PooledVars p = ag::update_adjacency(t.constant(a), t.constant(h), t.constant(u));
  return Pooled{p.adjacency.value(), p.nodes.value(), p.contribution.value()};
}

}  // namespace pool

enum class ParamCountKind { flatten, bimap, attn };

/// Bias-free parameter count of a pooling layer plus a one-layer classifier
/// onto c classes:
///   flatten  f²·c
///   bimap    f·f' + f'²·c
///   attn     f + f·c
inline std::uint64_t count_classifier_params(ParamCountKind kind, std::uint64_t f,
                                             std::uint64_t f_prime, std::uint64_t c) {
  if (f == 0 || c == 0 || (kind == ParamCountKind::bimap && f_prime == 0)) {
    throw ConfigError("count_classifier_params: dimensions must be positive");
  }
  switch (kind) {
    case ParamCountKind::flatten: return f * f * c;
    case ParamCountKind::bimap: return f * f_prime + f_prime * f_prime * c;
    case ParamCountKind::attn: return f + f * c;
  }
  return 0;
}

}  // namespace sopool
