#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "diff/catalog.hpp"
#include "diff/numerics.hpp"

namespace diff {

/// Item, attribute and position tables. Row 0 of every table is padding and stays zero.
struct EmbeddingTables {
  Parameter item_table;
  std::vector<Parameter> attr_tables;
  /// (max_len + 1) rows: slot p of a padded sequence uses row p + 1.
  Parameter pos_table;

  int dim() const { return static_cast<int>(item_table.value.cols()); }
};

/// uniform(−1/√d, 1/√d) init with zeroed padding rows.
EmbeddingTables make_tables(const ItemCatalog& catalog, int d, int max_len, std::mt19937_64& rng);

enum class FusionKind { kSum, kConcatProject, kGate };

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& name);

/// Fusion(·) over a fixed number of [N×d] streams; always returns [N×d].
struct Fusion {
  FusionKind kind = FusionKind::kSum;
  int streams = 1;
  /// CONCAT_PROJECT: [(k·d)×d].
  Parameter projection;
  /// GATE: [(k·d)×(k·d)] and [1×(k·d)].
  Parameter gate_weight;
  Parameter gate_bias;

  std::vector<Parameter*> parameters();
};

Fusion make_fusion(FusionKind kind, int streams, int d, std::mt19937_64& rng);

/// Per-stream embedding matrices, each [b·N×d].
struct EmbeddedStreams {
  Var item;
  /// One per catalog attribute.
  std::vector<Var> attrs;
  Var position;

  /// Catalog attributes followed by the position stream.
  std::vector<Var> side_streams() const;
};

EmbeddedStreams embed_streams(Tape& tape, const SequenceBatch& batch, EmbeddingTables& tables);

Var fuse(std::span<const Var> streams, Fusion& fusion);

/// Summation over catalog attribute streams only.
Var fuse_attributes_only(std::span<const Var> attr_streams);

}  // namespace diff
