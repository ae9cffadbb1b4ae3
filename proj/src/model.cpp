#include "diff/model.hpp"

namespace diff {

Model::Model(const ModelConfig& cfg, const ItemCatalog& catalog)
    : cfg_(cfg), catalog_(catalog), rng_(cfg.init_seed), encoder_(cfg.encoder, catalog_, rng_) {
  if (cfg.lambda < 0.0) throw ConfigError("lambda must be >= 0");
  head_.lambda = cfg.lambda;
  head_.normalize_targets = cfg.align_normalize;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out = encoder_.parameters();
  out.push_back(&head_.log_tau);
  return out;
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

ForwardOutput forward(Tape& tape, Model& model, const SequenceBatch& batch) {
  ForwardOutput out;
  out.encoded = encode(tape, batch, model.encoder());
  out.logits = recommendation_scores(out.encoded.user_vec, tape.param(model.encoder().tables().item_table));
  out.rec_loss = recommendation_loss(out.logits, batch.target);
  if (model.head().lambda == 0.0 || model.catalog().m == 0) {
    out.total = out.rec_loss;
    return out;
  }
  const AlignmentTargets targets = alignment_targets(batch, model.catalog());
  const Var attrs = fuse_attributes_only(out.encoded.embedded.attrs);
  out.align_loss = alignment_loss(out.encoded.embedded.item, attrs, targets, model.head(), batch);
  out.total = total_loss(out.rec_loss, *out.align_loss, model.head().lambda);
  return out;
}

Matrix score_batch(Model& model, const SequenceBatch& batch) {
  Tape tape;
  EncodeResult enc = encode(tape, batch, model.encoder());
  return recommendation_scores(enc.user_vec, tape.param(model.encoder().tables().item_table)).value();
}

}  // namespace diff
