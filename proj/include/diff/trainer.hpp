#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diff/data_pipeline.hpp"
#include "diff/eval_harness.hpp"
#include "diff/model.hpp"

namespace diff {

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;
  std::uint64_t seed = 42;
  int eval_threads = 1;

  void validate() const;
};

struct AdamState {
  std::vector<Matrix> m, v;
  std::int64_t step = 0;
};

/// Adam with bias correction over a fixed parameter list. Frozen parameters are
/// skipped; padding rows are pinned back to zero after every step.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps);

  void step();
  void zero_grad();
  const AdamState& state() const { return state_; }
  void set_state(AdamState s);
  void set_learning_rate(double lr) { lr_ = lr; }

 private:
  std::vector<Parameter*> params_;
  double lr_, beta1_, beta2_, eps_;
  AdamState state_;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// FNV-1a 64 of a JSON document's compact dump, as 16 hex digits.
std::string fingerprint(const nlohmann::json& j);

struct TrainResult {
  int epochs_run = 0;
  int best_epoch = 0;
  double best_val_ndcg20 = -1.0;
  /// One JSON object per epoch, as written to the log stream.
  std::vector<nlohmann::json> log;
  AdamState best_optimizer;
};

/// Trains `model` in place and leaves it holding the best-validation parameters.
/// Throws DivergenceError on a non-finite loss.
TrainResult train(Model& model, const SplitDataset& data, const TrainConfig& cfg, std::ostream* log = nullptr);

struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ItemCatalog catalog;
  int epoch = 0;
  double best_val_ndcg20 = 0.0;
  std::string fingerprint;
  AdamState optimizer;
  /// Parameter values keyed by name, in model order.
  std::vector<std::pair<std::string, Matrix>> values;
};

Checkpoint make_checkpoint(Model& model, const TrainConfig& train, const TrainResult& result);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Rebuilds the model and copies the stored parameter values into it.
std::unique_ptr<Model> restore_model(const Checkpoint& ckpt);

enum class Variant { kFull, kNoFnf, kNoIf, kNoAf, kNoRa };

Variant parse_variant(const std::string& name);
std::string to_string(Variant v);
ModelConfig apply_variant(Variant v, ModelConfig base);
/// Builds the variant; NO_FNF additionally pins every β to 1 and freezes it.
std::unique_ptr<Model> build_variant(Variant v, const ModelConfig& base, const ItemCatalog& catalog);

/// Retunes glibc malloc so the many short-lived large matrices reuse heap pages.
void tune_allocator();

}  // namespace diff
