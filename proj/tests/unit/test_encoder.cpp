#include <random>
#include <vector>

#include "diff/fixtures.hpp"
#include "diff/model.hpp"
#include "doctest.h"

using diff::Matrix;
using diff::Tape;
using diff::Var;

namespace {

diff::EncodeResult run(diff::Model& model, const diff::SequenceBatch& batch, Tape& tape) {
  return diff::encode(tape, batch, model.encoder());
}

}  // namespace

TEST_SUITE("dual_attention_encoder") {
  TEST_CASE("attention rows are distributions that respect the mask") {
    for (bool causal : {true, false}) {
      diff::TinyFixture fx = diff::tiny_fixture(2);
      fx.config.encoder.causal = causal;
      fx.config.encoder.layers = 2;
      diff::Model model(fx.config, fx.catalog);
      Tape tape;
      const diff::EncodeResult r = run(model, fx.batch, tape);
      const int n = fx.batch.max_len;
      for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 2; ++h)
          for (int row = 0; row < fx.batch.batch; ++row)
            for (const Matrix& w : {r.dump.id_head(l, h, row), r.dump.attr_head(l, h, row)}) {
              for (int q = 0; q < n; ++q) {
                CHECK(std::abs(w.row(q).sum() - 1.0) < 1e-12);
                if (!fx.batch.is_valid(row, q)) continue;
                for (int k = 0; k < n; ++k) {
                  if (!fx.batch.is_valid(row, k)) CHECK(w(q, k) == 0.0);
                  if (causal && k > q) CHECK(w(q, k) == 0.0);
                }
              }
            }
    }
  }

  TEST_CASE("alpha endpoints return one branch exactly") {
    for (double alpha : {0.0, 1.0}) {
      diff::TinyFixture fx = diff::tiny_fixture(3);
      fx.config.encoder.alpha = alpha;
      diff::Model model(fx.config, fx.catalog);
      Tape tape;
      const diff::EncodeResult r = run(model, fx.batch, tape);
      CHECK(r.user_repr.value() == (alpha == 1.0 ? r.id_repr.value() : r.attr_repr.value()));
    }
  }

  TEST_CASE("unit betas behave like a filter-free encoder") {
    diff::TinyFixture fx = diff::tiny_fixture(4);
    diff::Model filtered(fx.config, fx.catalog);
    for (auto& layer : filtered.encoder().layers())
      for (auto& b : layer.filter.betas) b.value(0, 0) = 1.0;
    diff::ModelConfig plain_cfg = fx.config;
    plain_cfg.encoder.filter_enabled = false;
    diff::Model plain(plain_cfg, fx.catalog);
    Tape t1, t2;
    const Matrix a = run(filtered, fx.batch, t1).user_repr.value();
    const Matrix b = run(plain, fx.batch, t2).user_repr.value();
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-10);
  }

  TEST_CASE("zero input through a block with zero biases gives zero attention output") {
    diff::TinyFixture fx = diff::tiny_fixture(5);
    diff::Model model(fx.config, fx.catalog);
    diff::AttentionBlockParams& p = model.encoder().layers()[0].attr_block;
    Tape tape;
    const Var zero = tape.constant(Matrix::Zero(fx.batch.batch * fx.batch.max_len, fx.config.encoder.d));
    const diff::BlockOutput out =
        diff::attribute_enriched_block(zero, p, fx.config.encoder, diff::attention_mask(fx.batch, 2, true));
    CHECK(out.scores.value().isZero());
    // LayerNorm of zero rows lands exactly on the (zero) bias.
    CHECK(out.output.value().isZero());
  }

  TEST_CASE("padding rows of the representation are exactly zero") {
    diff::TinyFixture fx = diff::tiny_fixture(6);
    fx.config.encoder.layers = 2;
    diff::Model model(fx.config, fx.catalog);
    Tape tape;
    const Matrix r = run(model, fx.batch, tape).user_repr.value();
    for (int row = 0; row < fx.batch.batch; ++row)
      for (int t = 0; t < fx.batch.max_len; ++t)
        if (!fx.batch.is_valid(row, t)) CHECK(r.row(row * fx.batch.max_len + t).isZero());
  }

  TEST_CASE("user vector is the last valid row") {
    diff::TinyFixture fx = diff::tiny_fixture(7);
    diff::Model model(fx.config, fx.catalog);
    Tape tape;
    const diff::EncodeResult r = run(model, fx.batch, tape);
    for (int row = 0; row < fx.batch.batch; ++row)
      CHECK(r.user_vec.value().row(row) ==
            r.user_repr.value().row(row * fx.batch.max_len + fx.batch.last_index[static_cast<std::size_t>(row)]));
  }

  TEST_CASE("empty sequences and wrong lengths are rejected") {
    diff::TinyFixture fx = diff::tiny_fixture(8);
    diff::Model model(fx.config, fx.catalog);
    diff::SequenceBatch empty = fx.batch;
    for (int t = 0; t < empty.max_len; ++t) empty.valid[empty.at(2, t)] = 0;
    Tape tape;
    CHECK_THROWS_AS(run(model, empty, tape), diff::EmptySequenceError);
    const diff::SequenceBatch longer = diff::make_batch(fx.examples, fx.catalog, 9);
    CHECK_THROWS_AS(run(model, longer, tape), diff::ShapeError);
  }

  TEST_CASE("gradients of the full model on the tiny fixture") {
    diff::TinyFixture fx = diff::tiny_fixture(9);
    diff::Model model(fx.config, fx.catalog);
    const diff::LossFn loss = [&](Tape& t) { return diff::forward(t, model, fx.batch).total; };
    const std::vector<diff::Parameter*> params = model.parameters();
    CHECK(diff::grad_check(loss, params) < 1e-4);
  }

  TEST_CASE("layer weights are independent across layers") {
    diff::TinyFixture fx = diff::tiny_fixture(10);
    fx.config.encoder.layers = 2;
    diff::Model model(fx.config, fx.catalog);
    CHECK(model.encoder().layers()[0].id_block.value.value != model.encoder().layers()[1].id_block.value.value);
    CHECK(model.encoder().layers()[0].filter.betas.size() == static_cast<std::size_t>(fx.catalog.m + 3));
  }
}
