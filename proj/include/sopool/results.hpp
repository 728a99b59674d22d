#pragma once

// JSON persistence of cross-validation results and the one-row CSV summary.
//
// CSV schema v1 (header included):  dataset,model,mean,std
// with mean/std as accuracy fractions.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sopool/error.hpp"
#include "sopool/trainer.hpp"

namespace sopool {

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {
      {"dataset", c.dataset},
      {"gnn", std::string(gnn_variant_name(c.gnn))},
      {"pool", std::string(pool_kind_flag(c.pool))},
      {"features", std::string(feature_mode_name(c.features))},
      {"hidden", c.hidden},
      {"batch_size", c.batch_size},
      {"fprime", c.fprime},
      {"k", c.k},
      {"blocks", c.blocks},
      {"lr", c.lr},
      {"lr_decay", c.lr_decay},
      {"decay_every", c.decay_every},
      {"max_epochs", c.max_epochs},
      {"dropout", c.dropout},
      {"seed", c.seed},
      {"folds", c.folds},
      {"epoch_select", std::string(epoch_select_name(c.epoch_select))},
      {"off_grid", c.off_grid},
      {"batch_norm_eps", ag::RunningStats().eps},
      {"batch_norm_momentum", ag::RunningStats().momentum},
      {"adam", {{"beta1", Adam{}.beta1}, {"beta2", Adam{}.beta2}, {"eps", Adam{}.eps}}},
  };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.dataset = j.at("dataset").get<std::string>();
  c.gnn = parse_gnn_variant(j.at("gnn").get<std::string>());
  c.pool = parse_pool_kind(j.at("pool").get<std::string>());
  const auto feat = j.at("features").get<std::string>();
  c.features = feat == "none" ? FeatureMode::none : parse_feature_mode(feat);
  c.hidden = j.at("hidden").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.fprime = j.at("fprime").get<std::size_t>();
  c.k = j.at("k").get<std::vector<std::size_t>>();
  c.blocks = j.at("blocks").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.decay_every = j.at("decay_every").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.folds = j.at("folds").get<std::size_t>();
  c.epoch_select = parse_epoch_select(j.at("epoch_select").get<std::string>());
  c.off_grid = j.at("off_grid").get<bool>();
  return c;
}

inline nlohmann::json result_to_json(const CVResult& r) {
  return {
      {"schema_version", CVResult::kSchemaVersion},
      {"config", config_to_json(r.config)},
      {"fold_accuracy", r.fold_accuracy},
      {"fold_loss", r.fold_loss},
      {"selected_epoch", r.selected_epoch},
      {"fold_selected_epochs", r.fold_selected_epochs},
      {"mean_accuracy", r.mean_accuracy},
      {"std_accuracy", r.std_accuracy},
      {"wall_seconds", r.wall_seconds},
  };
}

/// Parses and validates a result document: schema version, curve shapes and
/// that the stored selection and mean/std match a recomputation.
inline CVResult result_from_json(const nlohmann::json& j) {
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
    throw SchemaError("result file has no integer schema_version");
  }
  const int version = j["schema_version"].get<int>();
  if (version != CVResult::kSchemaVersion) {
    throw SchemaError("result schema version " + std::to_string(version) +
                      " is not supported (expected " +
                      std::to_string(CVResult::kSchemaVersion) + ")");
  }
  CVResult r;
  try {
    r.config = config_from_json(j.at("config"));
    r.fold_accuracy = j.at("fold_accuracy").get<std::vector<std::vector<double>>>();
    r.fold_loss = j.at("fold_loss").get<std::vector<std::vector<double>>>();
    r.selected_epoch = j.at("selected_epoch").get<int>();
    r.fold_selected_epochs = j.at("fold_selected_epochs").get<std::vector<int>>();
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.std_accuracy = j.at("std_accuracy").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed result file: ") + e.what());
  } catch (const ConfigError& e) {
    throw SchemaError(std::string("malformed result config: ") + e.what());
  }
  if (r.fold_accuracy.size() != r.config.folds || r.fold_loss.size() != r.config.folds) {
    throw SchemaError("result holds " + std::to_string(r.fold_accuracy.size()) +
                      " fold curves but config says " + std::to_string(r.config.folds));
  }
  const EpochSummary s = summarize_epochs(r.fold_accuracy, r.config.epoch_select);
  if (s.selected_epoch != r.selected_epoch || s.fold_selected_epochs != r.fold_selected_epochs) {
    throw SchemaError("stored selected epoch does not match the accuracy curves");
  }
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  if (!close(s.mean, r.mean_accuracy)) {
    throw SchemaError("mean_accuracy " + std::to_string(r.mean_accuracy) +
                      " does not match recomputed " + std::to_string(s.mean));
  }
  if (!close(s.std, r.std_accuracy)) {
    throw SchemaError("std_accuracy " + std::to_string(r.std_accuracy) +
                      " does not match recomputed " + std::to_string(s.std));
  }
  return r;
}

inline void persist_result(const CVResult& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write result file " + path.string());
  out << result_to_json(r).dump(2) << '\n';
}

inline CVResult load_result(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("result file not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("result file " + path.string() + " is not valid JSON: " + e.what());
  }
  return result_from_json(j);
}

inline std::string csv_header() { return "dataset,model,mean,std"; }

inline std::string csv_row(const CVResult& r) {
  std::ostringstream os;
  os << r.config.dataset << ',' << r.config.model_name() << ',' << std::fixed
     << std::setprecision(6) << r.mean_accuracy << ',' << r.std_accuracy;
  return os.str();
}

inline void write_csv(const CVResult& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write CSV file " + path.string());
  out << csv_header() << '\n' << csv_row(r) << '\n';
}

/// "MUTAG gin0+sopool_bimap: 95.3±4.4" (percent, one decimal).
inline std::string table_row(const CVResult& r) {
  std::ostringstream os;
  os << r.config.dataset << ' ' << r.config.model_name() << ": " << std::fixed
     << std::setprecision(1) << 100.0 * r.mean_accuracy << "±" << 100.0 * r.std_accuracy;
  return os.str();
}

}  // namespace sopool
