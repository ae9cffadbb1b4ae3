#include "diff/dual_attention_encoder.hpp"

#include <cmath>

namespace diff {

namespace {

Matrix xavier(int rows, int cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const double bound = std::sqrt(6.0 / (rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * dist(rng);
  return m;
}

AttentionBlockParams make_block(const std::string& prefix, int score_streams, const EncoderConfig& cfg,
                                std::mt19937_64& rng) {
  AttentionBlockParams b;
  const int d = cfg.d, inner = cfg.inner_width();
  for (int s = 0; s < score_streams; ++s) {
    b.qk.push_back(QueryKey{Parameter(prefix + ".q" + std::to_string(s), xavier(d, d, rng)),
                            Parameter(prefix + ".k" + std::to_string(s), xavier(d, d, rng))});
  }
  b.value = Parameter(prefix + ".v", xavier(d, d, rng));
  b.mixer = Parameter(prefix + ".mix", xavier(d, d, rng));
  b.ffn.w1 = Parameter(prefix + ".ffn.w1", xavier(d, inner, rng));
  b.ffn.b1 = Parameter(prefix + ".ffn.b1", Matrix::Zero(1, inner));
  b.ffn.w2 = Parameter(prefix + ".ffn.w2", xavier(inner, d, rng));
  b.ffn.b2 = Parameter(prefix + ".ffn.b2", Matrix::Zero(1, d));
  b.norm1 = Norm{Parameter(prefix + ".ln1.gain", Matrix::Ones(1, d)), Parameter(prefix + ".ln1.bias", Matrix::Zero(1, d))};
  b.norm2 = Norm{Parameter(prefix + ".ln2.gain", Matrix::Ones(1, d)), Parameter(prefix + ".ln2.bias", Matrix::Zero(1, d))};
  return b;
}

// Mixer, residual + norm, FFN, residual + norm.
Var finish_block(Var residual, Var heads_out, AttentionBlockParams& p, const EncoderConfig& cfg) {
  Tape& t = *residual.tape;
  Var attn = dropout(matmul(heads_out, t.param(p.mixer)), cfg.dropout);
  Var h1 = layer_norm(add(residual, attn), t.param(p.norm1.gain), t.param(p.norm1.bias), cfg.ln_eps);
  Var inner = gelu(add_row(matmul(h1, t.param(p.ffn.w1)), t.param(p.ffn.b1)));
  Var ffn = dropout(add_row(matmul(inner, t.param(p.ffn.w2)), t.param(p.ffn.b2)), cfg.dropout);
  return layer_norm(add(h1, ffn), t.param(p.norm2.gain), t.param(p.norm2.bias), cfg.ln_eps);
}

Var combine(Var id_repr, Var attr_repr, double alpha) {
  if (alpha == 1.0) return id_repr;
  if (alpha == 0.0) return attr_repr;
  return add(scale(id_repr, alpha), scale(attr_repr, 1.0 - alpha));
}

Matrix head_slice(const Matrix& stacked, int heads, int batch, int max_len, int head, int row) {
  (void)heads;
  const Eigen::Index rows_per_head = static_cast<Eigen::Index>(batch) * max_len;
  return stacked.block(head * rows_per_head + static_cast<Eigen::Index>(row) * max_len, 0, max_len, max_len);
}

}  // namespace

void EncoderConfig::validate() const {
  if (d < 1 || heads < 1 || d % heads != 0) {
    throw ConfigError("d = " + std::to_string(d) + " must be a positive multiple of heads = " + std::to_string(heads));
  }
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (cutoff < 1 || cutoff >= max_len) {
    throw ConfigError("cutoff " + std::to_string(cutoff) + " must satisfy 1 <= c < max_len = " + std::to_string(max_len));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!use_id_block && !use_attr_block) throw ConfigError("at least one fusion block must be enabled");
  if (!use_id_block && alpha != 0.0) throw ConfigError("ID-centric block disabled requires alpha = 0");
  if (!use_attr_block && alpha != 1.0) throw ConfigError("attribute-enriched block disabled requires alpha = 1");
}

std::vector<Parameter*> AttentionBlockParams::parameters() {
  std::vector<Parameter*> out;
  for (QueryKey& qk_pair : qk) {
    out.push_back(&qk_pair.query);
    out.push_back(&qk_pair.key);
  }
  for (Parameter* p : {&value, &mixer, &ffn.w1, &ffn.b1, &ffn.w2, &ffn.b2, &norm1.gain, &norm1.bias, &norm2.gain,
                       &norm2.bias}) {
    out.push_back(p);
  }
  return out;
}

std::vector<Parameter*> LayerParams::parameters() {
  std::vector<Parameter*> out = id_block.parameters();
  for (Parameter* p : attr_block.parameters()) out.push_back(p);
  for (Parameter& b : filter.betas) out.push_back(&b);
  return out;
}

Encoder::Encoder(const EncoderConfig& cfg, const ItemCatalog& catalog, std::mt19937_64& rng)
    : cfg_(cfg), side_streams_(catalog.m + 1) {
  cfg_.validate();
  catalog.validate();
  tables_ = make_tables(catalog, cfg.d, cfg.max_len, rng);
  fusion_ = make_fusion(cfg.fusion, 1 + side_streams_, cfg.d, rng);
  layers_.reserve(static_cast<std::size_t>(cfg.layers));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string prefix = "layer" + std::to_string(l);
    LayerParams lp;
    lp.id_block = make_block(prefix + ".id", 1 + side_streams_, cfg_, rng);
    lp.attr_block = make_block(prefix + ".attr", 1, cfg_, rng);
    lp.filter = FilterParams(cfg.cutoff, static_cast<std::size_t>(side_streams_ + 2), prefix + ".filter");
    layers_.push_back(std::move(lp));
  }
}

std::vector<Parameter*> Encoder::parameters() {
  std::vector<Parameter*> out{&tables_.item_table};
  for (Parameter& t : tables_.attr_tables) out.push_back(&t);
  out.push_back(&tables_.pos_table);
  for (Parameter* p : fusion_.parameters()) out.push_back(p);
  for (LayerParams& l : layers_) {
    for (Parameter* p : l.parameters()) out.push_back(p);
  }
  return out;
}

Matrix AttentionDump::id_head(int layer, int head, int row) const {
  return head_slice(id_weights.at(static_cast<std::size_t>(layer)), heads, batch, max_len, head, row);
}

Matrix AttentionDump::attr_head(int layer, int head, int row) const {
  return head_slice(attr_weights.at(static_cast<std::size_t>(layer)), heads, batch, max_len, head, row);
}

std::shared_ptr<const BoolMatrix> attention_mask(const SequenceBatch& batch, int heads, bool causal) {
  const Eigen::Index n = batch.max_len;
  const Eigen::Index rows = static_cast<Eigen::Index>(batch.batch) * n;
  auto mask = std::make_shared<BoolMatrix>(BoolMatrix::Constant(heads * rows, n, false));
  for (int r = 0; r < batch.batch; ++r) {
    for (int q = 0; q < batch.max_len; ++q) {
      const bool q_valid = batch.is_valid(r, q);
      for (int k = 0; k < batch.max_len; ++k) {
        bool allowed;
        if (!q_valid) {
          allowed = k == q;
        } else {
          allowed = batch.is_valid(r, k) && (!causal || k <= q);
        }
        if (!allowed) continue;
        for (int h = 0; h < heads; ++h) (*mask)(h * rows + r * n + q, k) = true;
      }
    }
  }
  return mask;
}

BlockOutput id_centric_block(std::span<const Var> filtered_streams, AttentionBlockParams& params,
                             const EncoderConfig& cfg, std::shared_ptr<const BoolMatrix> mask) {
  if (filtered_streams.size() != params.qk.size()) {
    throw ShapeError("id_centric_block: " + std::to_string(filtered_streams.size()) + " streams for " +
                     std::to_string(params.qk.size()) + " projections");
  }
  Tape& t = *filtered_streams.front().tape;
  const Eigen::Index n = cfg.max_len;
  std::vector<Var> per_stream;
  for (std::size_t s = 0; s < filtered_streams.size(); ++s) {
    const Var x = filtered_streams[s];
    per_stream.push_back(
        head_scores(matmul(x, t.param(params.qk[s].query)), matmul(x, t.param(params.qk[s].key)), cfg.heads, n));
  }
  Var scores = add_n(per_stream);
  const Var ids = filtered_streams.front();
  Var weights = softmax_rows(scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()))), std::move(mask));
  Var heads_out = head_apply(weights, matmul(ids, t.param(params.value)), cfg.heads, n);
  return BlockOutput{finish_block(ids, heads_out, params, cfg), weights, scores};
}

BlockOutput attribute_enriched_block(Var fused_stream, AttentionBlockParams& params, const EncoderConfig& cfg,
                                     std::shared_ptr<const BoolMatrix> mask) {
  Tape& t = *fused_stream.tape;
  const Eigen::Index n = cfg.max_len;
  Var scores = head_scores(matmul(fused_stream, t.param(params.qk.front().query)),
                           matmul(fused_stream, t.param(params.qk.front().key)), cfg.heads, n);
  Var weights = softmax_rows(scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()))), std::move(mask));
  Var heads_out = head_apply(weights, matmul(fused_stream, t.param(params.value)), cfg.heads, n);
  return BlockOutput{finish_block(fused_stream, heads_out, params, cfg), weights, scores};
}

EncodeResult encode(Tape& tape, const SequenceBatch& batch, Encoder& encoder) {
  const EncoderConfig& cfg = encoder.config();
  if (batch.batch < 1) throw EmptySequenceError("encode: empty batch");
  if (batch.max_len != cfg.max_len) {
    throw ShapeError("encode: batch length " + std::to_string(batch.max_len) + " vs configured " +
                     std::to_string(cfg.max_len));
  }
  for (int r = 0; r < batch.batch; ++r) {
    if (!batch.is_valid(r, batch.last_index[static_cast<std::size_t>(r)])) {
      throw EmptySequenceError("encode: sequence " + std::to_string(r) + " has no items");
    }
  }

  EncodeResult res;
  res.embedded = embed_streams(tape, batch, encoder.tables());
  const std::vector<Var> sides = res.embedded.side_streams();
  std::vector<Var> all{res.embedded.item};
  all.insert(all.end(), sides.begin(), sides.end());

  Var id_state = dropout(res.embedded.item, cfg.dropout);
  Var fused_state = dropout(fuse(all, encoder.fusion()), cfg.dropout);

  const auto mask = attention_mask(batch, cfg.heads, cfg.causal);
  const BandOperators ops = cfg.filter_enabled ? band_operators(cfg.max_len, cfg.cutoff) : BandOperators{};
  res.dump.heads = cfg.heads;
  res.dump.batch = batch.batch;
  res.dump.max_len = batch.max_len;

  // Block outputs are re-zeroed on padding rows: the filter assumes zero padding in
  // every layer, and LayerNorm of an all-but-zero padding row only amplifies roundoff.
  Matrix keep(static_cast<Eigen::Index>(batch.batch) * batch.max_len, cfg.d);
  for (int r = 0; r < batch.batch; ++r) {
    for (int t = 0; t < batch.max_len; ++t) keep.row(r * batch.max_len + t).setConstant(batch.is_valid(r, t) ? 1.0 : 0.0);
  }
  const Var padding_keep = tape.constant(std::move(keep));

  for (LayerParams& layer : encoder.layers()) {
    std::vector<Parameter>& betas = layer.filter.betas;
    auto filt = [&](Var x, std::size_t stream) {
      return cfg.filter_enabled ? filter_sequence(x, tape.param(betas[stream]), ops) : x;
    };
    if (cfg.use_id_block) {
      std::vector<Var> streams{filt(id_state, 0)};
      for (std::size_t s = 0; s < sides.size(); ++s) streams.push_back(filt(sides[s], s + 1));
      BlockOutput out = id_centric_block(streams, layer.id_block, cfg, mask);
      id_state = hadamard(out.output, padding_keep);
      res.dump.id_weights.push_back(out.weights.value());
      res.id_scores.push_back(out.scores);
    }
    if (cfg.use_attr_block) {
      BlockOutput out = attribute_enriched_block(filt(fused_state, sides.size() + 1), layer.attr_block, cfg, mask);
      fused_state = hadamard(out.output, padding_keep);
      res.dump.attr_weights.push_back(out.weights.value());
    }
  }

  if (cfg.use_id_block) res.id_repr = id_state;
  if (cfg.use_attr_block) res.attr_repr = fused_state;
  res.user_repr = combine(id_state, fused_state, cfg.alpha);

  std::vector<int> last_rows;
  last_rows.reserve(static_cast<std::size_t>(batch.batch));
  for (int r = 0; r < batch.batch; ++r) last_rows.push_back(r * batch.max_len + batch.last_index[static_cast<std::size_t>(r)]);
  res.user_vec = gather_rows(res.user_repr, last_rows);
  return res;
}

}  // namespace diff
