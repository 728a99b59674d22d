#pragma once

// Graph classifiers.
//
// Flat:          GnnStack → per-graph pooling → dropout → linear → logits
// Hierarchical:  repeated blocks of (GNN layer → multi-head second-order
//                pooling with adjacency update); after every block a sum
//                readout feeds its own dropout+linear classifier, and the
//                logits of all blocks are averaged.

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "sopool/autograd.hpp"
#include "sopool/batch.hpp"
#include "sopool/error.hpp"
#include "sopool/layers.hpp"
#include "sopool/pooling.hpp"
#include "sopool/rng.hpp"

namespace sopool {

enum class PoolKind {
  sum,
  avg,
  max,
  sum_avg,  // sum on datasets with node labels, avg otherwise
  sopool,   // flatten(HᵀH)
  sopool_bimap,
  sopool_attn,
  covpool,  // bilinear-mapped covariance pooling
  attnpool,
  sopool_mattn,
};

inline constexpr PoolKind all_pool_kinds[] = {
    PoolKind::sum,          PoolKind::avg,         PoolKind::max,     PoolKind::sum_avg,
    PoolKind::sopool,       PoolKind::sopool_bimap, PoolKind::sopool_attn, PoolKind::covpool,
    PoolKind::attnpool,     PoolKind::sopool_mattn};

/// CLI spelling (hyphenated).
inline std::string_view pool_kind_flag(PoolKind k) {
  switch (k) {
    case PoolKind::sum: return "sum";
    case PoolKind::avg: return "avg";
    case PoolKind::max: return "max";
    case PoolKind::sum_avg: return "sum-avg";
    case PoolKind::sopool: return "sopool";
    case PoolKind::sopool_bimap: return "sopool-bimap";
    case PoolKind::sopool_attn: return "sopool-attn";
    case PoolKind::covpool: return "covpool";
    case PoolKind::attnpool: return "attnpool";
    case PoolKind::sopool_mattn: return "sopool-mattn";
  }
  return "?";
}

/// Report spelling (underscored).
inline std::string pool_kind_name(PoolKind k) {
  std::string s(pool_kind_flag(k));
  for (char& ch : s)
    if (ch == '-') ch = '_';
  return s;
}

inline PoolKind parse_pool_kind(std::string_view s) {
  for (PoolKind k : all_pool_kinds)
    if (pool_kind_flag(k) == s || pool_kind_name(k) == s) return k;
  throw ConfigError("unknown pooling '" + std::string(s) +
                    "' (expected sum, avg, max, sum-avg, sopool, sopool-bimap, sopool-attn, "
                    "covpool, attnpool, sopool-mattn)");
}

struct ModelConfig {
  GnnVariant gnn = GnnVariant::gin0;
  PoolKind pool = PoolKind::sopool_bimap;
  std::size_t in_dim = 0;
  std::size_t num_classes = 0;
  std::size_t hidden = 32;
  std::size_t fprime = 0;      // bimap / covpool projection width
  std::vector<std::size_t> k;  // pooled node count (per block when hierarchical)
  std::size_t blocks = 0;      // 0 = flat model
  double dropout = 0.5;
  std::size_t gnn_layers = GnnStack::kLayers;
};

class Model {
 public:
  virtual ~Model() = default;
  /// Logits, one row per graph of the batch.
  virtual ag::Var forward(ag::Tape& t, const GraphBatch& batch, ag::Mode mode, Rng& rng) = 0;
  virtual std::vector<ag::Parameter*> parameters() = 0;
  virtual std::size_t classifier_input_dim() const = 0;
};

class FlatModel : public Model {
 public:
  FlatModel(const ModelConfig& cfg, Rng& rng)
      : cfg_(cfg), stack_(cfg.gnn, cfg.in_dim, cfg.hidden, rng, cfg.gnn_layers) {
    const std::size_t f = stack_.output_dim();
    switch (cfg.pool) {
      case PoolKind::sum:
      case PoolKind::avg:
      case PoolKind::max: pooled_dim_ = f; break;
      case PoolKind::sum_avg:
        throw ConfigError("pooling sum-avg must be resolved against a dataset before building");
      case PoolKind::sopool: pooled_dim_ = f * f; break;
      case PoolKind::sopool_bimap:
      case PoolKind::covpool:
        if (cfg.fprime == 0) {
          throw ConfigError("pooling " + pool_kind_name(cfg.pool) + " requires --fprime");
        }
        projection_ = ag::Parameter("pool.W", ag::glorot_uniform(f, cfg.fprime, rng));
        pooled_dim_ = cfg.fprime * cfg.fprime;
        break;
      case PoolKind::sopool_attn:
      case PoolKind::attnpool:
        projection_ = ag::Parameter("pool.mu", ag::glorot_uniform(f, 1, rng));
        pooled_dim_ = f;
        break;
      case PoolKind::sopool_mattn:
        if (cfg.k.empty() || cfg.k[0] == 0) {
          throw ConfigError("pooling sopool-mattn requires a positive --k");
        }
        projection_ = ag::Parameter("pool.U", ag::glorot_uniform(cfg.k[0], f, rng));
        pooled_dim_ = cfg.k[0] * f;
        break;
    }
    if (cfg.num_classes < 2) throw ConfigError("model needs at least 2 classes");
    classifier_ = Linear("classifier", pooled_dim_, cfg.num_classes, rng);
  }

  std::size_t classifier_input_dim() const override { return pooled_dim_; }
  GnnStack& stack() { return stack_; }

  /// Per-graph pooled representations (B × classifier_input_dim).
  ag::Var pooled(ag::Tape& t, const GraphBatch& batch, ag::Mode mode) {
    ag::Var h = stack_.forward(t, batch, mode);
    std::optional<ag::Var> proj;
    if (!projection_.value.empty()) proj = t.param(projection_);
    std::vector<ag::Var> rows;
    rows.reserve(batch.size());
    for (std::size_t g = 0; g < batch.size(); ++g) {
      ag::Var hg = ag::slice_rows(h, batch.offsets[g], batch.counts[g]);
      rows.push_back(pool_one(hg, proj));
    }
    return ag::vstack(rows);
  }

  ag::Var forward(ag::Tape& t, const GraphBatch& batch, ag::Mode mode, Rng& rng) override {
    ag::Var z = ag::dropout(pooled(t, batch, mode), cfg_.dropout, mode, rng);
    return classifier_.forward(t, z);
  }

  std::vector<ag::Parameter*> parameters() override {
    std::vector<ag::Parameter*> out;
    stack_.collect(out);
    if (!projection_.value.empty()) out.push_back(&projection_);
    classifier_.collect(out);
    return out;
  }

 private:
  ag::Var pool_one(ag::Var hg, const std::optional<ag::Var>& proj) const {
    switch (cfg_.pool) {
      case PoolKind::sum: return ag::pool_first_order(hg, FirstOrder::sum);
      case PoolKind::avg: return ag::pool_first_order(hg, FirstOrder::avg);
      case PoolKind::max: return ag::pool_first_order(hg, FirstOrder::max);
      case PoolKind::sopool: return ag::flatten(ag::sopool(hg));
      case PoolKind::sopool_bimap: return ag::sopool_bimap(hg, *proj);
      case PoolKind::covpool: return ag::covpool_bimap(hg, *proj);
      case PoolKind::sopool_attn: return ag::sopool_attn(hg, *proj);
      case PoolKind::attnpool: return ag::attnpool(hg, *proj);
      case PoolKind::sopool_mattn: return ag::flatten(ag::sopool_mattn(hg, *proj).nodes);
      case PoolKind::sum_avg: break;
    }
    throw ConfigError("unresolved pooling kind");
  }

  ModelConfig cfg_;
  GnnStack stack_;
  ag::Parameter projection_;
  std::size_t pooled_dim_ = 0;
  Linear classifier_;
};

class HierarchicalModel : public Model {
 public:
  HierarchicalModel(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.blocks == 0) throw ConfigError("hierarchical model needs at least one block");
    if (cfg.pool != PoolKind::sopool_mattn) {
      throw ConfigError("hierarchical model requires pooling sopool-mattn, got " +
                        pool_kind_name(cfg.pool));
    }
    if (cfg.num_classes < 2) throw ConfigError("model needs at least 2 classes");
    if (cfg.k.size() != cfg.blocks) {
      throw ConfigError("hierarchical model needs one k per block (" +
                        std::to_string(cfg.blocks) + " blocks, " + std::to_string(cfg.k.size()) +
                        " values)");
    }
    std::size_t d = cfg.in_dim;
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      if (cfg.k[b] == 0) throw ConfigError("hierarchical k must be positive");
      const std::string name = "block" + std::to_string(b);
      Block blk{GinLayer(GnnLayerConfig{cfg.gnn, d, cfg.hidden}, name + ".gnn", rng),
                ag::Parameter(name + ".U", ag::glorot_uniform(cfg.k[b], cfg.hidden, rng)),
                Linear(name + ".classifier", cfg.hidden, cfg.num_classes, rng)};
      blocks_.push_back(std::move(blk));
      d = cfg.hidden;
    }
  }

  std::size_t classifier_input_dim() const override { return cfg_.hidden; }
  std::size_t num_blocks() const { return blocks_.size(); }

  struct Trace {
    std::vector<ag::Var> block_logits;
    std::vector<std::vector<ag::Var>> adjacency;  // [block][graph] A'
    std::vector<std::vector<ag::Var>> nodes;      // [block][graph] H'
    ag::Var logits;
  };

  /// Forward pass that also exposes every block's pooled graphs and logits.
  Trace trace(ag::Tape& t, const GraphBatch& batch, ag::Mode mode, Rng& rng) {
    Trace tr;
    const std::size_t B = batch.size();
    std::vector<ag::Var> adj(B), nodes(B);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Block& blk = blocks_[b];
      ag::Var h;
      std::vector<std::size_t> offsets(B), counts(B);
      if (b == 0) {
        h = blk.layer.forward(t, t.constant(batch.features), batch.adjacency, mode);
        offsets = batch.offsets;
        counts = batch.counts;
        for (std::size_t g = 0; g < B; ++g) adj[g] = t.constant(batch.graphs[g]->dense_adjacency());
      } else {
        std::vector<ag::Var> aggs;
        std::size_t off = 0;
        for (std::size_t g = 0; g < B; ++g) {
          aggs.push_back(blk.layer.aggregate_dense(t, nodes[g], adj[g]));
          offsets[g] = off;
          counts[g] = nodes[g].rows();
          off += counts[g];
        }
        h = blk.layer.transform(t, ag::vstack(aggs), mode);
      }
      ag::Var u = t.param(blk.projection);
      std::vector<ag::Var> readouts;
      for (std::size_t g = 0; g < B; ++g) {
        ag::Var hg = ag::slice_rows(h, offsets[g], counts[g]);
        ag::PooledVars p = ag::update_adjacency(adj[g], hg, u);
        adj[g] = p.adjacency;
        nodes[g] = p.nodes;
        readouts.push_back(ag::column_sum(p.nodes));
      }
      tr.adjacency.push_back(adj);
      tr.nodes.push_back(nodes);
      ag::Var z = ag::dropout(ag::vstack(readouts), cfg_.dropout, mode, rng);
      tr.block_logits.push_back(blk.classifier.forward(t, z));
    }
    ag::Var total = tr.block_logits[0];
    for (std::size_t b = 1; b < tr.block_logits.size(); ++b) total = ag::add(total, tr.block_logits[b]);
    tr.logits = ag::scale(total, 1.0 / static_cast<double>(tr.block_logits.size()));
    return tr;
  }

  ag::Var forward(ag::Tape& t, const GraphBatch& batch, ag::Mode mode, Rng& rng) override {
    return trace(t, batch, mode, rng).logits;
  }

  std::vector<ag::Parameter*> parameters() override {
    std::vector<ag::Parameter*> out;
    for (Block& b : blocks_) {
      b.layer.collect(out);
      out.push_back(&b.projection);
      b.classifier.collect(out);
    }
    return out;
  }

 private:
  struct Block {
    GinLayer layer;
    ag::Parameter projection;
    Linear classifier;
  };

  ModelConfig cfg_;
  std::vector<Block> blocks_;
};

inline std::unique_ptr<Model> build_flat_model(const ModelConfig& cfg, Rng& rng) {
  return std::make_unique<FlatModel>(cfg, rng);
}

inline std::unique_ptr<Model> build_hierarchical_model(const ModelConfig& cfg, Rng& rng) {
  return std::make_unique<HierarchicalModel>(cfg, rng);
}

inline std::unique_ptr<Model> build_model(const ModelConfig& cfg, Rng& rng) {
  if (cfg.blocks > 0) return build_hierarchical_model(cfg, rng);
  return build_flat_model(cfg, rng);
}

}  // namespace sopool
