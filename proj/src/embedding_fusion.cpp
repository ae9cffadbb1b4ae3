#include "diff/embedding_fusion.hpp"

#include <cmath>

namespace diff {

namespace {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Parameter padded_table(const std::string& name, int rows, int d, std::mt19937_64& rng) {
  Parameter p(name, uniform_matrix(rows, d, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  p.value.row(0).setZero();
  p.padding_row = true;
  return p;
}

}  // namespace

EmbeddingTables make_tables(const ItemCatalog& catalog, int d, int max_len, std::mt19937_64& rng) {
  EmbeddingTables t;
  t.item_table = padded_table("emb.item", catalog.n_items + 1, d, rng);
  for (int k = 0; k < catalog.m; ++k) {
    t.attr_tables.push_back(
        padded_table("emb.attr" + std::to_string(k), catalog.attr_vocab_sizes[static_cast<std::size_t>(k)] + 1, d, rng));
  }
  t.pos_table = padded_table("emb.pos", max_len + 1, d, rng);
  return t;
}

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::kSum:
      return "sum";
    case FusionKind::kConcatProject:
      return "concat";
    case FusionKind::kGate:
      return "gate";
  }
  return "sum";
}

FusionKind parse_fusion_kind(const std::string& name) {
  if (name == "sum") return FusionKind::kSum;
  if (name == "concat") return FusionKind::kConcatProject;
  if (name == "gate") return FusionKind::kGate;
  throw ConfigError("unknown fusion kind '" + name + "' (expected sum|concat|gate)");
}

std::vector<Parameter*> Fusion::parameters() {
  switch (kind) {
    case FusionKind::kSum:
      return {};
    case FusionKind::kConcatProject:
      return {&projection};
    case FusionKind::kGate:
      return {&gate_weight, &gate_bias};
  }
  return {};
}

Fusion make_fusion(FusionKind kind, int streams, int d, std::mt19937_64& rng) {
  Fusion f;
  f.kind = kind;
  f.streams = streams;
  const int wide = streams * d;
  if (kind == FusionKind::kConcatProject) {
    f.projection = Parameter("fusion.projection", uniform_matrix(wide, d, std::sqrt(6.0 / (wide + d)), rng));
  } else if (kind == FusionKind::kGate) {
    f.gate_weight = Parameter("fusion.gate_weight", uniform_matrix(wide, wide, std::sqrt(3.0 / wide), rng));
    f.gate_bias = Parameter("fusion.gate_bias", Matrix::Zero(1, wide));
  }
  return f;
}

std::vector<Var> EmbeddedStreams::side_streams() const {
  std::vector<Var> out = attrs;
  out.push_back(position);
  return out;
}

EmbeddedStreams embed_streams(Tape& tape, const SequenceBatch& batch, EmbeddingTables& tables) {
  if (static_cast<int>(batch.attr_ids.size()) != static_cast<int>(tables.attr_tables.size())) {
    throw CatalogError("batch carries " + std::to_string(batch.attr_ids.size()) + " attribute streams, tables " +
                       std::to_string(tables.attr_tables.size()));
  }
  if (batch.max_len + 1 != tables.pos_table.value.rows()) {
    throw CatalogError("batch length " + std::to_string(batch.max_len) + " does not match position table " +
                       shape_of(tables.pos_table.value));
  }
  auto lookup = [&](Parameter& table, const std::vector<int>& ids) {
    try {
      return embedding_lookup(tape.param(table), ids, 0);
    } catch (const IndexError& e) {
      throw CatalogError(table.name + ": " + e.what());
    }
  };
  EmbeddedStreams s;
  s.item = lookup(tables.item_table, batch.item_ids);
  for (std::size_t k = 0; k < tables.attr_tables.size(); ++k) s.attrs.push_back(lookup(tables.attr_tables[k], batch.attr_ids[k]));
  std::vector<int> pos_ids(batch.item_ids.size(), 0);
  for (int r = 0; r < batch.batch; ++r) {
    for (int p = 0; p < batch.max_len; ++p) {
      if (batch.is_valid(r, p)) pos_ids[batch.at(r, p)] = p + 1;
    }
  }
  s.position = lookup(tables.pos_table, pos_ids);
  return s;
}

Var fuse(std::span<const Var> streams, Fusion& fusion) {
  if (streams.empty()) throw ShapeError("fuse: no streams");
  for (const Var& s : streams) {
    if (s.rows() != streams.front().rows() || s.cols() != streams.front().cols()) {
      throw ShapeError("fuse: stream " + shape_of(s.value()) + " vs " + shape_of(streams.front().value()));
    }
  }
  if (fusion.kind != FusionKind::kSum && static_cast<int>(streams.size()) != fusion.streams) {
    throw ShapeError("fuse: " + std::to_string(streams.size()) + " streams for a fusion built over " +
                     std::to_string(fusion.streams));
  }
  Tape& tape = *streams.front().tape;
  switch (fusion.kind) {
    case FusionKind::kSum:
      return add_n(streams);
    case FusionKind::kConcatProject:
      return matmul(concat_cols(streams), tape.param(fusion.projection));
    case FusionKind::kGate: {
      const Eigen::Index d = streams.front().cols();
      const Var gates = sigmoid(add_row(matmul(concat_cols(streams), tape.param(fusion.gate_weight)),
                                        tape.param(fusion.gate_bias)));
      std::vector<Var> gated;
      for (std::size_t k = 0; k < streams.size(); ++k) {
        gated.push_back(hadamard(slice_cols(gates, static_cast<Eigen::Index>(k) * d, d), streams[k]));
      }
      return add_n(gated);
    }
  }
  throw std::logic_error("fuse: unhandled kind");
}

Var fuse_attributes_only(std::span<const Var> attr_streams) {
  if (attr_streams.empty()) throw ShapeError("fuse_attributes_only: needs at least one attribute stream");
  return add_n(attr_streams);
}

}  // namespace diff
