#pragma once

#include <cmath>
#include <memory>
#include <span>
#include <vector>

#include "diff/catalog.hpp"
#include "diff/numerics.hpp"

namespace diff {

/// Learnable temperature τ = exp(log_tau) and the alignment loss weight λ.
struct AlignmentHead {
  AlignmentHead();

  Parameter log_tau;
  double lambda = 10.0;
  /// Divide each target row by its positive count (off by default).
  bool normalize_targets = false;

  double tau() const { return std::exp(log_tau.value(0, 0)); }
};

/// Y per sequence, [N×N] over the padded layout: Y(j,k) is true iff positions j and k
/// both hold items and those items have identical attribute tuples.
struct AlignmentTargets {
  int max_len = 0;
  std::vector<BoolMatrix> per_sequence;

  /// Stacked [b·N×N] 0/1 weights, optionally row-normalized.
  Matrix stacked(bool normalize_rows) const;
};

AlignmentTargets alignment_targets(const SequenceBatch& batch, const ItemCatalog& catalog);

/// Mask for the alignment softmax: valid rows see valid columns; padding rows see themselves.
std::shared_ptr<const BoolMatrix> alignment_mask(const SequenceBatch& batch);

/// −(1/2b)·Σ_i Σ (Y ∘ log Ŷ_va + Y ∘ log Ŷ_av) on L2-normalized rows of the raw
/// ID embeddings and summed attribute embeddings ([b·N×d] each).
Var alignment_loss(Var item_rows, Var attr_rows, const AlignmentTargets& targets, AlignmentHead& head,
                   const SequenceBatch& batch);

/// user_vec [b×d] against item rows 1..n → logits [b×n]; column j scores item j + 1.
Var recommendation_scores(Var user_vec, Var item_table);

/// Cross-entropy against 1-based target item ids.
Var recommendation_loss(Var logits, std::span<const int> target_items);

/// L = L_rec + λ·L_align. λ == 0 returns L_rec itself.
Var total_loss(Var rec, Var align, double lambda);

}  // namespace diff
