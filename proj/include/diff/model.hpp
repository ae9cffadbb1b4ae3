#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "diff/dual_attention_encoder.hpp"
#include "diff/objectives.hpp"

namespace diff {

struct ModelConfig {
  EncoderConfig encoder;
  double lambda = 10.0;
  bool align_normalize = false;
  std::uint64_t init_seed = 42;
};

/// Encoder plus alignment head, built deterministically from init_seed.
class Model {
 public:
  Model(const ModelConfig& cfg, const ItemCatalog& catalog);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const ItemCatalog& catalog() const { return catalog_; }
  Encoder& encoder() { return encoder_; }
  AlignmentHead& head() { return head_; }

  /// Every trainable parameter, in a stable order.
  std::vector<Parameter*> parameters();
  void zero_grad();
  void set_lambda(double lambda) { cfg_.lambda = lambda; head_.lambda = lambda; }

 private:
  ModelConfig cfg_;
  ItemCatalog catalog_;
  std::mt19937_64 rng_;
  Encoder encoder_;
  AlignmentHead head_;
};

struct ForwardOutput {
  EncodeResult encoded;
  Var logits;
  Var rec_loss;
  /// Unset when λ = 0 (the alignment term is never built).
  std::optional<Var> align_loss;
  Var total;
};

/// Full forward pass with both losses. The batch must carry target items.
ForwardOutput forward(Tape& tape, Model& model, const SequenceBatch& batch);

/// Scores only (no losses), [b×n_items].
Matrix score_batch(Model& model, const SequenceBatch& batch);

}  // namespace diff
