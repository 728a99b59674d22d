#pragma once

// GIN-family message-passing layers.
//
//  gin0         h' = MLP(h_v + Σ_{u∈N(v)} h_u)
//  gin-eps      h' = MLP((1+ε)·h_v + Σ_{u∈N(v)} h_u), ε trainable, starts at 0
//  sum-1layer   h' = ReLU(W·(h_v + Σ_{u∈N(v)} h_u))
//  mean-mlp     h' = MLP(mean{h_u : u ∈ {v} ∪ N(v)})
//  mean-1layer  h' = ReLU(W·mean{h_u : u ∈ {v} ∪ N(v)})
//  max-mlp      h' = MLP(max{h_u : u ∈ {v} ∪ N(v)})
//  max-1layer   h' = ReLU(W·max{h_u : u ∈ {v} ∪ N(v)})
//
// MLP = linear → batch-norm → ReLU → linear → batch-norm → ReLU.

#include <array>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/batch.hpp"
#include "sopool/error.hpp"
#include "sopool/rng.hpp"

namespace sopool {

enum class GnnVariant { gin0, gin_eps, sum_1layer, mean_mlp, mean_1layer, max_mlp, max_1layer };

inline constexpr std::array<GnnVariant, 7> all_gnn_variants = {
    GnnVariant::gin0,      GnnVariant::gin_eps,     GnnVariant::sum_1layer, GnnVariant::mean_mlp,
    GnnVariant::mean_1layer, GnnVariant::max_mlp, GnnVariant::max_1layer};

inline std::string_view gnn_variant_name(GnnVariant v) {
  switch (v) {
    case GnnVariant::gin0: return "gin0";
    case GnnVariant::gin_eps: return "gin-eps";
    case GnnVariant::sum_1layer: return "sum-1layer";
    case GnnVariant::mean_mlp: return "mean-mlp";
    case GnnVariant::mean_1layer: return "mean-1layer";
    case GnnVariant::max_mlp: return "max-mlp";
    case GnnVariant::max_1layer: return "max-1layer";
  }
  return "?";
}

inline GnnVariant parse_gnn_variant(std::string_view s) {
  for (GnnVariant v : all_gnn_variants)
    if (gnn_variant_name(v) == s) return v;
  throw ConfigError("unknown GNN variant '" + std::string(s) +
                    "' (expected gin0, gin-eps, sum-1layer, mean-mlp, mean-1layer, max-mlp, "
                    "max-1layer)");
}

inline bool uses_mlp(GnnVariant v) {
  return v == GnnVariant::gin0 || v == GnnVariant::gin_eps || v == GnnVariant::mean_mlp ||
         v == GnnVariant::max_mlp;
}

inline ag::Aggregate aggregation_of(GnnVariant v) {
  switch (v) {
    case GnnVariant::mean_mlp:
    case GnnVariant::mean_1layer: return ag::Aggregate::mean;
    case GnnVariant::max_mlp:
    case GnnVariant::max_1layer: return ag::Aggregate::max;
    default: return ag::Aggregate::sum;
  }
}

struct Linear {
  ag::Parameter weight;  // in × out
  ag::Parameter bias;    // 1 × out

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : weight(name + ".weight", ag::glorot_uniform(in, out, rng)),
        bias(name + ".bias", Matrix(1, out)) {}

  ag::Var forward(ag::Tape& t, ag::Var x) {
    return ag::add_row(ag::matmul(x, t.param(weight)), t.param(bias));
  }
  void collect(std::vector<ag::Parameter*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

struct BatchNorm {
  ag::Parameter gamma;
  ag::Parameter beta;
  ag::RunningStats stats;

  BatchNorm() = default;
  BatchNorm(const std::string& name, std::size_t width)
      : gamma(name + ".gamma", Matrix::ones(1, width)),
        beta(name + ".beta", Matrix(1, width)),
        stats(width) {}

  ag::Var forward(ag::Tape& t, ag::Var x, ag::Mode mode) {
    return ag::batch_norm(x, t.param(gamma), t.param(beta), stats, mode);
  }
  void collect(std::vector<ag::Parameter*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

struct GnnLayerConfig {
  GnnVariant variant = GnnVariant::gin0;
  std::size_t in_dim = 0;
  std::size_t hidden_dim = 0;
};

class GinLayer {
 public:
  GinLayer(const GnnLayerConfig& cfg, const std::string& name, Rng& rng) : cfg_(cfg) {
    if (cfg.hidden_dim == 0) throw ConfigError("GNN layer hidden dim must be positive");
    if (cfg.in_dim == 0) throw ConfigError("GNN layer input dim must be positive");
    lin1_ = Linear(name + ".lin1", cfg.in_dim, cfg.hidden_dim, rng);
    if (uses_mlp(cfg.variant)) {
      bn1_ = BatchNorm(name + ".bn1", cfg.hidden_dim);
      lin2_ = Linear(name + ".lin2", cfg.hidden_dim, cfg.hidden_dim, rng);
      bn2_ = BatchNorm(name + ".bn2", cfg.hidden_dim);
    }
    if (cfg.variant == GnnVariant::gin_eps) eps_ = ag::Parameter(name + ".eps", Matrix(1, 1));
  }

  const GnnLayerConfig& config() const { return cfg_; }

  /// Neighbourhood aggregation over the sparse graph structure.
  ag::Var aggregate(ag::Tape& t, ag::Var h, const ag::Adjacency& adj) {
    if (cfg_.variant == GnnVariant::gin_eps) {
      ag::Var e = t.param(eps_);
      return ag::aggregate(h, adj, ag::Aggregate::sum, &e);
    }
    return ag::aggregate(h, adj, aggregation_of(cfg_.variant));
  }

  /// Weighted sum aggregation (1+ε)·h + A·h over a dense adjacency, used on
  /// pooled graphs whose edges carry real weights.
  ag::Var aggregate_dense(ag::Tape& t, ag::Var h, ag::Var a) {
    ag::Var self = h;
    if (cfg_.variant == GnnVariant::gin_eps) {
      self = ag::add(h, ag::scale_by(h, t.param(eps_)));
    }
    return ag::add(self, ag::matmul(a, h));
  }

  /// Update applied to aggregated representations.
  ag::Var transform(ag::Tape& t, ag::Var agg, ag::Mode mode) {
    if (agg.cols() != cfg_.in_dim) {
      throw ShapeError("GNN layer expects " + std::to_string(cfg_.in_dim) +
                       " input features, got " + agg.value().shape());
    }
    ag::Var z = lin1_.forward(t, agg);
    if (!uses_mlp(cfg_.variant)) return ag::relu(z);
    z = ag::relu(bn1_.forward(t, z, mode));
    z = lin2_.forward(t, z);
    return ag::relu(bn2_.forward(t, z, mode));
  }

  ag::Var forward(ag::Tape& t, ag::Var h, const ag::Adjacency& adj, ag::Mode mode) {
    if (h.cols() != cfg_.in_dim) {
      throw ShapeError("GNN layer expects " + std::to_string(cfg_.in_dim) +
                       " input features, got " + h.value().shape());
    }
    return transform(t, aggregate(t, h, adj), mode);
  }

  void collect(std::vector<ag::Parameter*>& out) {
    lin1_.collect(out);
    if (uses_mlp(cfg_.variant)) {
      bn1_.collect(out);
      lin2_.collect(out);
      bn2_.collect(out);
    }
    if (cfg_.variant == GnnVariant::gin_eps) out.push_back(&eps_);
  }

  Linear& lin1() { return lin1_; }
  Linear& lin2() { return lin2_; }
  ag::Parameter& epsilon() { return eps_; }

 private:
  GnnLayerConfig cfg_;
  Linear lin1_, lin2_;
  BatchNorm bn1_, bn2_;
  ag::Parameter eps_;
};

/// Five stacked GNN layers; the node representation is the column
/// concatenation of all layer outputs (input features excluded), so
/// f = 5 × hidden.
class GnnStack {
 public:
  static constexpr std::size_t kLayers = 5;

  GnnStack(GnnVariant variant, std::size_t in_dim, std::size_t hidden, Rng& rng,
           std::size_t layers = kLayers) {
    if (layers == 0) throw ConfigError("GNN stack needs at least one layer");
    std::size_t d = in_dim;
    for (std::size_t i = 0; i < layers; ++i) {
      layers_.emplace_back(GnnLayerConfig{variant, d, hidden}, "gnn" + std::to_string(i), rng);
      d = hidden;
    }
  }

  std::size_t in_dim() const { return layers_.front().config().in_dim; }
  std::size_t output_dim() const { return layers_.size() * layers_.front().config().hidden_dim; }
  std::vector<GinLayer>& layers() { return layers_; }

  ag::Var forward(ag::Tape& t, ag::Var x, const ag::Adjacency& adj, ag::Mode mode) {
    if (x.cols() != in_dim()) {
      throw ShapeError("GNN stack expects " + std::to_string(in_dim()) +
                       " input features, got " + x.value().shape());
    }
    std::vector<ag::Var> outs;
    ag::Var h = x;
    for (GinLayer& layer : layers_) {
      h = layer.forward(t, h, adj, mode);
      outs.push_back(h);
    }
    return ag::hstack(outs);
  }

  ag::Var forward(ag::Tape& t, const GraphBatch& batch, ag::Mode mode) {
    return forward(t, t.constant(batch.features), batch.adjacency, mode);
  }

  void collect(std::vector<ag::Parameter*>& out) {
    for (GinLayer& l : layers_) l.collect(out);
  }

 private:
  std::vector<GinLayer> layers_;
};

}  // namespace sopool
