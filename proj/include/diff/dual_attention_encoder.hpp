#pragma once

#include <memory>
#include <random>
#include <vector>

#include "diff/embedding_fusion.hpp"
#include "diff/spectral_filter.hpp"

namespace diff {

struct EncoderConfig {
  int d = 256;
  int heads = 2;
  int layers = 2;
  int max_len = 50;
  double alpha = 0.5;
  int cutoff = 3;
  FusionKind fusion = FusionKind::kGate;
  double dropout = 0.0;
  bool causal = true;
  /// 0 means 4·d.
  int ffn_inner = 0;
  double ln_eps = 1e-12;
  /// Ablation switches.
  bool filter_enabled = true;
  bool use_id_block = true;
  bool use_attr_block = true;

  int head_dim() const { return d / heads; }
  int inner_width() const { return ffn_inner > 0 ? ffn_inner : 4 * d; }
  /// Throws ConfigError on broken invariants.
  void validate() const;
};

struct QueryKey {
  Parameter query;
  Parameter key;
};

struct FeedForward {
  Parameter w1, b1, w2, b2;
};

struct Norm {
  Parameter gain, bias;
};

/// Weights of one self-attention sub-block plus its FFN and norms. Per-head
/// projections d→d_h are stored side by side as the column blocks of d×d matrices.
struct AttentionBlockParams {
  /// ID-centric block: one entry per score stream (ID first, then side streams).
  /// Attribute-enriched block: a single entry.
  std::vector<QueryKey> qk;
  Parameter value;
  Parameter mixer;
  FeedForward ffn;
  Norm norm1, norm2;

  std::vector<Parameter*> parameters();
};

struct LayerParams {
  AttentionBlockParams id_block;
  AttentionBlockParams attr_block;
  /// β order: ID, each catalog attribute, position, fused stream.
  FilterParams filter;

  std::vector<Parameter*> parameters();
};

/// Embedding tables, early-fusion function and the L encoder layers.
class Encoder {
 public:
  Encoder(const EncoderConfig& cfg, const ItemCatalog& catalog, std::mt19937_64& rng);
  Encoder(const Encoder&) = delete;
  Encoder& operator=(const Encoder&) = delete;

  const EncoderConfig& config() const { return cfg_; }
  EncoderConfig& mutable_config() { return cfg_; }
  EmbeddingTables& tables() { return tables_; }
  Fusion& fusion() { return fusion_; }
  std::vector<LayerParams>& layers() { return layers_; }
  /// Number of side streams (catalog attributes + position).
  int side_streams() const { return side_streams_; }

  std::vector<Parameter*> parameters();

 private:
  EncoderConfig cfg_;
  int side_streams_;
  EmbeddingTables tables_;
  Fusion fusion_;
  std::vector<LayerParams> layers_;
};

/// Attention weights recorded during one forward pass. weights[layer] is the
/// head-major stack [H·b·N×N] produced by the softmax.
struct AttentionDump {
  int heads = 0;
  int batch = 0;
  int max_len = 0;
  std::vector<Matrix> id_weights;
  std::vector<Matrix> attr_weights;

  /// [N×N] weights of one head for one sequence of the batch.
  Matrix id_head(int layer, int head, int row) const;
  Matrix attr_head(int layer, int head, int row) const;
};

struct BlockOutput {
  Var output;
  /// Softmax weights, head-major [H·b·N×N].
  Var weights;
  /// Fused pre-softmax scores before the 1/√d_h scaling.
  Var scores;
};

struct EncodeResult {
  EmbeddedStreams embedded;
  /// R_v, R_va after the last layer (invalid when the block is disabled).
  Var id_repr;
  Var attr_repr;
  /// R_u = α·R_v + (1 − α)·R_va, [b·N×d].
  Var user_repr;
  /// Rows of R_u at each sequence's last valid position, [b×d].
  Var user_vec;
  AttentionDump dump;
  /// Per-layer fused ID-centric pre-softmax scores (for inspection).
  std::vector<Var> id_scores;
};

/// Head-major attention mask [H·b·N×N]. Valid queries see valid keys (and only
/// past/current ones when causal); padding queries see only themselves.
std::shared_ptr<const BoolMatrix> attention_mask(const SequenceBatch& batch, int heads, bool causal);

BlockOutput id_centric_block(std::span<const Var> filtered_streams, AttentionBlockParams& params,
                             const EncoderConfig& cfg, std::shared_ptr<const BoolMatrix> mask);

BlockOutput attribute_enriched_block(Var fused_stream, AttentionBlockParams& params, const EncoderConfig& cfg,
                                     std::shared_ptr<const BoolMatrix> mask);

EncodeResult encode(Tape& tape, const SequenceBatch& batch, Encoder& encoder);

}  // namespace diff
