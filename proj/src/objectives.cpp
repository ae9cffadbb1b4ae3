#include "diff/objectives.hpp"

#include <cmath>

namespace diff {

AlignmentHead::AlignmentHead() : log_tau("align.log_tau", Matrix::Zero(1, 1)) {}

Matrix AlignmentTargets::stacked(bool normalize_rows) const {
  const Eigen::Index n = max_len;
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(per_sequence.size()) * n, n);
  for (std::size_t i = 0; i < per_sequence.size(); ++i) {
    out.middleRows(static_cast<Eigen::Index>(i) * n, n) = per_sequence[i].cast<double>();
  }
  if (normalize_rows) {
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      const double total = out.row(r).sum();
      if (total > 0.0) out.row(r) /= total;
    }
  }
  return out;
}

AlignmentTargets alignment_targets(const SequenceBatch& batch, const ItemCatalog& catalog) {
  AlignmentTargets t;
  t.max_len = batch.max_len;
  t.per_sequence.reserve(static_cast<std::size_t>(batch.batch));
  for (int r = 0; r < batch.batch; ++r) {
    BoolMatrix y = BoolMatrix::Constant(batch.max_len, batch.max_len, false);
    for (int j = 0; j < batch.max_len; ++j) {
      if (!batch.is_valid(r, j)) continue;
      const auto& tuple_j = catalog.attrs[static_cast<std::size_t>(batch.item_ids[batch.at(r, j)])];
      y(j, j) = true;
      for (int k = j + 1; k < batch.max_len; ++k) {
        if (!batch.is_valid(r, k)) continue;
        if (tuple_j == catalog.attrs[static_cast<std::size_t>(batch.item_ids[batch.at(r, k)])]) {
          y(j, k) = true;
          y(k, j) = true;
        }
      }
    }
    t.per_sequence.push_back(std::move(y));
  }
  return t;
}

std::shared_ptr<const BoolMatrix> alignment_mask(const SequenceBatch& batch) {
  const Eigen::Index n = batch.max_len;
  auto mask = std::make_shared<BoolMatrix>(BoolMatrix::Constant(batch.batch * n, n, false));
  for (int r = 0; r < batch.batch; ++r) {
    for (int j = 0; j < batch.max_len; ++j) {
      if (!batch.is_valid(r, j)) {
        (*mask)(r * n + j, j) = true;
        continue;
      }
      for (int k = 0; k < batch.max_len; ++k) (*mask)(r * n + j, k) = batch.is_valid(r, k);
    }
  }
  return mask;
}

Var alignment_loss(Var item_rows, Var attr_rows, const AlignmentTargets& targets, AlignmentHead& head,
                   const SequenceBatch& batch) {
  Tape& t = *item_rows.tape;
  const Eigen::Index n = batch.max_len;
  const Var ev = l2_normalize_rows(item_rows);
  const Var ea = l2_normalize_rows(attr_rows);
  const Var inv_tau = exp(scale(t.param(head.log_tau), -1.0));
  const auto mask = alignment_mask(batch);
  const Var log_va = log_softmax_rows(scale(head_scores(ev, ea, 1, n), inv_tau), mask);
  const Var log_av = log_softmax_rows(scale(head_scores(ea, ev, 1, n), inv_tau), mask);
  const Matrix y = targets.stacked(head.normalize_targets);
  const Var total = add(weighted_sum(log_va, y), weighted_sum(log_av, y));
  return scale(total, -1.0 / (2.0 * batch.batch));
}

Var recommendation_scores(Var user_vec, Var item_table) {
  return matmul_nt(user_vec, slice_rows(item_table, 1, item_table.rows() - 1));
}

Var recommendation_loss(Var logits, std::span<const int> target_items) {
  std::vector<int> cols(target_items.begin(), target_items.end());
  for (int& c : cols) c -= 1;
  return cross_entropy_rows(logits, cols);
}

Var total_loss(Var rec, Var align, double lambda) {
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (lambda == 0.0) return rec;
  return add(rec, scale(align, lambda));
}

}  // namespace diff
