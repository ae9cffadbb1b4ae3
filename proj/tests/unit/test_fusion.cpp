#include <random>
#include <vector>

#include "diff/embedding_fusion.hpp"
#include "doctest.h"

using diff::FusionKind;
using diff::Matrix;
using diff::Tape;
using diff::Var;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

diff::ItemCatalog small_catalog() {
  diff::ItemCatalog cat;
  cat.n_items = 6;
  cat.m = 2;
  cat.attr_vocab_sizes = {3, 2};
  cat.attrs = {{0, 0}, {1, 1}, {2, 1}, {3, 2}, {1, 2}, {2, 2}, {3, 1}};
  return cat;
}

}  // namespace

TEST_SUITE("embedding_fusion") {
  TEST_CASE("padding rows embed to zero on every stream") {
    const diff::ItemCatalog cat = small_catalog();
    std::mt19937_64 rng(1);
    diff::EmbeddingTables tables = diff::make_tables(cat, 4, 5, rng);
    const std::vector<diff::SequenceExample> ex{{0, {3}, 1, 2}};
    const diff::SequenceBatch batch = diff::make_batch(ex, cat, 5);
    Tape tape;
    const diff::EmbeddedStreams s = diff::embed_streams(tape, batch, tables);
    for (int t = 0; t < 4; ++t) {
      CHECK(s.item.value().row(t).isZero());
      CHECK(s.position.value().row(t).isZero());
      for (const Var& a : s.attrs) CHECK(a.value().row(t).isZero());
    }
    CHECK(s.item.value().row(4) == tables.item_table.value.row(3));
    CHECK(s.attrs[0].value().row(4) == tables.attr_tables[0].value.row(3));
    CHECK(s.attrs[1].value().row(4) == tables.attr_tables[1].value.row(2));
    CHECK(s.position.value().row(4) == tables.pos_table.value.row(5));
  }

  TEST_CASE("repeated item embeds to identical rows") {
    const diff::ItemCatalog cat = small_catalog();
    std::mt19937_64 rng(2);
    diff::EmbeddingTables tables = diff::make_tables(cat, 4, 2, rng);
    const std::vector<diff::SequenceExample> ex{{0, {5, 5}, 1, 3}};
    Tape tape;
    const diff::EmbeddedStreams s = diff::embed_streams(tape, diff::make_batch(ex, cat, 2), tables);
    CHECK(s.item.value().row(0) == tables.item_table.value.row(5));
    CHECK(s.item.value().row(1) == tables.item_table.value.row(5));
  }

  TEST_CASE("padding rows of the tables start at zero") {
    std::mt19937_64 rng(3);
    const diff::EmbeddingTables tables = diff::make_tables(small_catalog(), 4, 3, rng);
    CHECK(tables.item_table.value.row(0).isZero());
    CHECK(tables.pos_table.value.rows() == 4);
    for (const auto& t : tables.attr_tables) CHECK(t.value.row(0).isZero());
  }

  TEST_CASE("sum fusion") {
    std::mt19937_64 rng(4);
    Tape tape;
    const Matrix m = random_matrix(5, 3, rng);
    diff::Fusion f = diff::make_fusion(FusionKind::kSum, 2, 3, rng);
    const std::vector<Var> streams{tape.constant(m), tape.constant(Matrix::Zero(5, 3))};
    CHECK(diff::fuse(streams, f).value() == m);
  }

  TEST_CASE("concat projection with a selecting projection recovers the first stream") {
    std::mt19937_64 rng(5);
    Tape tape;
    diff::Fusion f = diff::make_fusion(FusionKind::kConcatProject, 3, 4, rng);
    REQUIRE(f.projection.value.rows() == 12);
    f.projection.value.setZero();
    f.projection.value.topRows(4).setIdentity();
    const Matrix a = random_matrix(6, 4, rng);
    const std::vector<Var> streams{tape.constant(a), tape.constant(random_matrix(6, 4, rng)),
                                   tape.constant(random_matrix(6, 4, rng))};
    CHECK((diff::fuse(streams, f).value() - a).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("zero gate halves the stream sum") {
    std::mt19937_64 rng(6);
    Tape tape;
    diff::Fusion f = diff::make_fusion(FusionKind::kGate, 2, 3, rng);
    f.gate_weight.value.setZero();
    f.gate_bias.value.setZero();
    const Matrix a = random_matrix(4, 3, rng), b = random_matrix(4, 3, rng);
    const std::vector<Var> streams{tape.constant(a), tape.constant(b)};
    CHECK((diff::fuse(streams, f).value() - 0.5 * (a + b)).cwiseAbs().maxCoeff() < 1e-15);
  }

  TEST_CASE("fusion rejects mismatched shapes") {
    std::mt19937_64 rng(7);
    Tape tape;
    diff::Fusion f = diff::make_fusion(FusionKind::kSum, 2, 3, rng);
    const std::vector<Var> streams{tape.constant(Matrix::Zero(4, 3)), tape.constant(Matrix::Zero(5, 3))};
    CHECK_THROWS_AS(diff::fuse(streams, f), diff::ShapeError);
  }

  TEST_CASE("attribute-only fusion") {
    std::mt19937_64 rng(8);
    Tape tape;
    const Matrix a = random_matrix(4, 3, rng);
    const std::vector<Var> one{tape.constant(a)};
    CHECK(diff::fuse_attributes_only(one).value() == a);
    const std::vector<Var> cancel{tape.constant(a), tape.constant(Matrix(-a))};
    CHECK(diff::fuse_attributes_only(cancel).value().isZero());
    const Matrix b = random_matrix(4, 3, rng), c = random_matrix(4, 3, rng);
    const std::vector<Var> three{tape.constant(a), tape.constant(b), tape.constant(c)};
    const Matrix got = diff::fuse_attributes_only(three).value();
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 3; ++j) CHECK(got(i, j) == doctest::Approx(a(i, j) + b(i, j) + c(i, j)).epsilon(1e-15));
  }

  TEST_CASE("gate and projection gradients") {
    std::mt19937_64 rng(9);
    for (FusionKind kind : {FusionKind::kGate, FusionKind::kConcatProject}) {
      diff::Fusion f = diff::make_fusion(kind, 3, 3, rng);
      diff::Parameter a("a", random_matrix(4, 3, rng)), b("b", random_matrix(4, 3, rng)), c("c", random_matrix(4, 3, rng));
      const Matrix w = random_matrix(4, 3, rng);
      const diff::LossFn loss = [&](Tape& t) {
        const std::vector<Var> streams{t.param(a), t.param(b), t.param(c)};
        return diff::weighted_sum(diff::fuse(streams, f), w);
      };
      std::vector<diff::Parameter*> params{&a, &b, &c};
      for (diff::Parameter* p : f.parameters()) params.push_back(p);
      CHECK(diff::grad_check(loss, params) < 1e-6);
    }
  }

  TEST_CASE("fusion kind names round trip") {
    for (FusionKind k : {FusionKind::kSum, FusionKind::kConcatProject, FusionKind::kGate})
      CHECK(diff::parse_fusion_kind(diff::to_string(k)) == k);
    CHECK_THROWS_AS(diff::parse_fusion_kind("blend"), diff::ConfigError);
  }
}
