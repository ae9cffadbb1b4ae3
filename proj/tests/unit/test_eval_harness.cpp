#include <cmath>
#include <random>

#include "diff/eval_harness.hpp"
#include "diff/fixtures.hpp"
#include "doctest.h"
#include "protocol_fixture.hpp"

TEST_SUITE("eval_harness") {
  TEST_CASE("target rank with ties") {
    Eigen::RowVectorXd s(5);
    s << 0.2, 0.9, 0.5, 0.5, 0.1;
    CHECK(diff::target_rank(s, 2) == 1);
    CHECK(diff::target_rank(s, 3) == 2);
    CHECK(diff::target_rank(s, 4) == 3);
    CHECK(diff::target_rank(s, 5) == 5);
  }

  TEST_CASE("metrics from ranks") {
    const diff::CohortMetrics top = diff::metrics_from_ranks({1}, {10});
    CHECK(top.recall.at(10) == 1.0);
    CHECK(top.ndcg.at(10) == 1.0);
    const diff::CohortMetrics m = diff::metrics_from_ranks({1, 3, 11}, {10});
    CHECK(m.recall.at(10) == doctest::Approx(2.0 / 3.0));
    CHECK(m.ndcg.at(10) == doctest::Approx((1.0 + 0.5) / 3.0));
  }

  TEST_CASE("hand-set ranking table") {
    diff::EvalOptions opts;
    opts.ks = {1, 2, 3, 5};
    opts.batch_size = 3;
    const auto split = oracle::ranking_split();
    const diff::ItemCatalog cat = oracle::ranking_catalog();
    const std::vector<int> ranks = diff::rank_targets(oracle::ranking_scorer(), split, cat, 2, opts);
    for (int u = 0; u < 4; ++u) CHECK(ranks[static_cast<std::size_t>(u)] == oracle::kRankingExpected[u]);
    const diff::MetricsReport r = diff::full_rank_eval(oracle::ranking_scorer(), split, cat, 2, opts);
    CHECK(r.n_users == 4);
    for (const auto& row : oracle::kRankingTable) {
      CHECK(r.recall.at(row.k) == doctest::Approx(row.recall).epsilon(1e-15));
      CHECK(r.ndcg.at(row.k) == doctest::Approx(row.ndcg).epsilon(1e-15));
    }
  }

  TEST_CASE("threaded evaluation matches inline evaluation") {
    diff::EvalOptions one, many;
    one.batch_size = many.batch_size = 1;
    many.threads = 3;
    const auto split = oracle::ranking_split();
    const diff::ItemCatalog cat = oracle::ranking_catalog();
    CHECK(diff::rank_targets(oracle::ranking_scorer(), split, cat, 2, one) ==
          diff::rank_targets(oracle::ranking_scorer(), split, cat, 2, many));
  }

  TEST_CASE("cutoff at or above the catalog size recalls everyone") {
    diff::TinyFixture fx = diff::tiny_fixture(41);
    diff::Model model(fx.config, fx.catalog);
    diff::EvalOptions opts;
    opts.ks = {20, 25};
    const diff::MetricsReport r = diff::full_rank_eval(model, fx.examples, opts);
    CHECK(r.recall.at(20) == 1.0);
    CHECK(r.recall.at(25) == 1.0);
  }

  TEST_CASE("empty split is an error") {
    diff::TinyFixture fx = diff::tiny_fixture(42);
    diff::Model model(fx.config, fx.catalog);
    CHECK_THROWS_AS(diff::full_rank_eval(model, {}), diff::EmptySplitError);
  }

  TEST_CASE("metrics report json round trip") {
    diff::MetricsReport r = diff::full_rank_eval(oracle::ranking_scorer(), oracle::ranking_split(), oracle::ranking_catalog(), 2);
    r.seed = 9;
    r.config_hash = "abc";
    r.cohorts["short"] = diff::metrics_from_ranks({1, 2}, r.ks);
    const nlohmann::json j = r.to_json();
    CHECK(j.contains("recall@10"));
    CHECK(j.contains("ndcg@20"));
    CHECK(diff::MetricsReport::from_json(j).to_json() == j);
  }

  TEST_CASE("cohort memberships on the three-user fixture") {
    const diff::SplitDataset d = oracle::three_users_expected();
    // Full lengths 5, 9, 7: only carol is short.
    const diff::CohortSplit len = diff::cohort_split(d, d.test, diff::CohortKind::kLength);
    CHECK(len.first == std::vector<int>{0});
    CHECK(len.second == std::vector<int>{1, 2});
    // Train frequencies 4, 4, 4, 3: head is the single top item, ties to the smaller id, so item 1.
    // Test targets 3, 4, 4: nobody is in the head.
    const diff::CohortSplit pop = diff::cohort_split(d, d.test, diff::CohortKind::kPopularity);
    CHECK(pop.first.empty());
    CHECK(pop.second.size() == 3);
    // Validation targets 2, 3, 1: bob's target is the head item.
    const diff::CohortSplit pop_val = diff::cohort_split(d, d.validation, diff::CohortKind::kPopularity);
    CHECK(pop_val.first == std::vector<int>{2});
  }

  TEST_CASE("length cohort of all-five sequences has an empty long group") {
    diff::SplitDataset d = oracle::three_users_expected();
    for (auto& ex : d.test) ex.full_length = 5;
    const diff::CohortSplit len = diff::cohort_split(d, d.test, diff::CohortKind::kLength);
    CHECK(len.second.empty());
    diff::MetricsReport r;
    r.ks = {10};
    diff::add_cohorts(r, {1, 2, 3}, d, d.test, {diff::CohortKind::kLength});
    CHECK(r.cohorts.at("long").n_users == 0);
    CHECK(r.cohorts.at("short").n_users == 3);
  }

  TEST_CASE("robustness curve: zero ratio equals plain evaluation, noise that kills the signal hurts") {
    // Scores favour the item that follows the last input item, so any substitution
    // at the last position destroys the prediction.
    diff::ItemCatalog cat = oracle::ranking_catalog();
    cat.n_items = 40;
    cat.attrs.assign(41, {});
    const diff::Scorer follow = [](const diff::SequenceBatch& b) {
      diff::Matrix s = diff::Matrix::Zero(b.batch, 40);
      for (int r = 0; r < b.batch; ++r) {
        const int last = b.item_ids[b.at(r, b.last_index[static_cast<std::size_t>(r)])];
        s(r, last % 40) = 1.0;
      }
      return s;
    };
    std::vector<diff::SequenceExample> split;
    std::mt19937_64 rng(43);
    for (int u = 0; u < 200; ++u) {
      diff::SequenceExample ex;
      for (int t = 0; t < 8; ++t) ex.items.push_back(1 + int(rng() % 40));
      ex.target = ex.items.back() % 40 + 1;
      ex.user = u;
      ex.full_length = 9;
      split.push_back(ex);
    }
    diff::EvalOptions opts;
    opts.ks = {1};
    const auto curve = diff::robustness_curve(follow, split, cat, 8, {0.0, 0.125, 0.25, 0.5}, {1, 2, 3}, opts);
    const diff::MetricsReport plain = diff::full_rank_eval(follow, split, cat, 8, opts);
    CHECK(curve[0].recall_mean.at(1) == plain.recall.at(1));
    CHECK(curve[0].recall_std.at(1) == 0.0);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].recall_mean.at(1) < curve[i - 1].recall_mean.at(1));
    const nlohmann::json j = diff::robustness_json(curve);
    CHECK(j.size() == 4);
  }

  TEST_CASE("case-study export for a single item") {
    diff::TinyFixture fx = diff::tiny_fixture(44);
    diff::Model model(fx.config, fx.catalog);
    diff::SplitDataset labels;
    labels.catalog = fx.catalog;
    labels.item_tokens.push_back("");
    for (int i = 1; i <= fx.catalog.n_items; ++i) labels.item_tokens.push_back("item" + std::to_string(i));
    labels.attr_tokens.assign(2, {"", "a", "b", "c", "d", "e"});
    const nlohmann::json j = diff::export_attention(model, {7}, labels);
    CHECK(j["positions"].size() == 1);
    CHECK(j["item_fusion"][0].get<double>() == 1.0);
    CHECK(j["attribute_fusion"][0].get<double>() == 1.0);
    CHECK_THROWS_AS(diff::export_attention(model, {99}, labels), diff::CatalogError);
  }
}
