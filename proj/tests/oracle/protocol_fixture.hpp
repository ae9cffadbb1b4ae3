#pragma once

// Hand-enumerated expectations for tests/data/three_users and for a 5-item
// ranking toy. Everything here was worked out by hand, not computed.

#include <cmath>
#include <string>
#include <vector>

#include "diff/data_pipeline.hpp"
#include "diff/eval_harness.hpp"

namespace oracle {

inline std::string three_users_dir() { return std::string(DIFF_TEST_DATA_DIR) + "/three_users"; }

// File order of first appearance gives y, x, w, z, v; w falls to the 5-core filter
// (dave drops first, taking w below five), leaving y=1, x=2, z=3, v=4.
// Users in id order: carol, alice, dave (filtered out entirely), bob.
//   carol  y x z x z          (w removed)
//   alice  x v y z v x y z v
//   bob    z z v y x y v
inline diff::SplitDataset three_users_expected() {
  diff::SplitDataset d;
  d.max_len = 50;
  d.catalog.n_items = 4;
  d.catalog.m = 2;
  d.catalog.attr_vocab_sizes = {3, 3};
  // brand ids: bolt=1 acme=2 core=3; category ids: toys=1 tools=2 garden=3
  d.catalog.attrs = {{0, 0}, {1, 1}, {2, 2}, {2, 1}, {3, 2}};
  d.user_tokens = {"carol", "alice", "bob"};
  d.item_tokens = {"", "y", "x", "z", "v"};
  d.attr_tokens = {{"", "bolt", "acme", "core"}, {"", "toys", "tools", "garden"}};
  d.test = {{0, {1, 2, 3, 2}, 3, 5}, {1, {2, 4, 1, 3, 4, 2, 1, 3}, 4, 9}, {2, {3, 3, 4, 1, 2, 1}, 4, 7}};
  d.validation = {{0, {1, 2, 3}, 2, 5}, {1, {2, 4, 1, 3, 4, 2, 1}, 3, 9}, {2, {3, 3, 4, 1, 2}, 1, 7}};
  d.train = {{0, {1}, 2, 5},
             {0, {1, 2}, 3, 5},
             {1, {2}, 4, 9},
             {1, {2, 4}, 1, 9},
             {1, {2, 4, 1}, 3, 9},
             {1, {2, 4, 1, 3}, 4, 9},
             {1, {2, 4, 1, 3, 4}, 2, 9},
             {1, {2, 4, 1, 3, 4, 2}, 1, 9},
             {2, {3}, 3, 7},
             {2, {3, 3}, 4, 7},
             {2, {3, 3, 4}, 1, 7},
             {2, {3, 3, 4, 1}, 2, 7}};
  // prefixes without the last two items: carol y x z, alice x v y z v x y, bob z z v y x
  d.train_frequency = {0, 4, 4, 4, 3};
  d.stats.users = 3;
  d.stats.items = 4;
  d.stats.interactions = 21;
  d.stats.avg_length = 7.0;
  d.stats.sparsity = 1.0 - 11.0 / 12.0;  // carol never touches v
  d.stats.excluded_users = 0;
  return d;
}

inline const char* three_users_table() {
  return "# Users  # Items  # Interactions  Avg. Length  Sparsity\n"
         "-------------------------------------------------------\n"
         "3              4              21         7.00     8.33%\n";
}

// Five items embedded in the plane; items 3 and 4 tie everywhere.
//   e1 = (1, 0)  e2 = (0, 1)  e3 = e4 = (0.5, 0.5)  e5 = (-1, 0)
// Four users, identified by their single input item:
//   u1 (0.6, 0.4) target 3: scores .6 .4 .5 .5 -.6 -> rank 2
//   u2 (0.6, 0.4) target 4: e1 above, e3 ties with smaller id -> rank 3
//   u3 (0, 0)     target 5: all tie, four smaller ids -> rank 5
//   u4 (0, 1)     target 2: rank 1
inline const double kRankingUsers[4][2] = {{0.6, 0.4}, {0.6, 0.4}, {0.0, 0.0}, {0.0, 1.0}};
inline const double kRankingItems[5][2] = {{1.0, 0.0}, {0.0, 1.0}, {0.5, 0.5}, {0.5, 0.5}, {-1.0, 0.0}};
inline const int kRankingTargets[4] = {3, 4, 5, 2};
inline const int kRankingExpected[4] = {2, 3, 5, 1};

inline diff::ItemCatalog ranking_catalog() {
  diff::ItemCatalog cat;
  cat.n_items = 5;
  cat.m = 0;
  cat.attrs.assign(6, {});
  return cat;
}

inline std::vector<diff::SequenceExample> ranking_split() {
  std::vector<diff::SequenceExample> split;
  for (int u = 0; u < 4; ++u) split.push_back({u, {u + 1}, kRankingTargets[u], 3});
  return split;
}

inline diff::Scorer ranking_scorer() {
  return [](const diff::SequenceBatch& b) {
    diff::Matrix s(b.batch, 5);
    for (int r = 0; r < b.batch; ++r) {
      const int user = b.item_ids[b.at(r, b.last_index[static_cast<std::size_t>(r)])] - 1;
      for (int j = 0; j < 5; ++j) s(r, j) = kRankingUsers[user][0] * kRankingItems[j][0] + kRankingUsers[user][1] * kRankingItems[j][1];
    }
    return s;
  };
}

struct RankingRow {
  int k;
  double recall, ndcg;
};

// Ranks 2, 3, 5, 1.  NDCG gains 1/log2(3), 1/log2(4) = 0.5, 0, 1.
inline const RankingRow kRankingTable[] = {
    {1, 0.25, 0.25},
    {2, 0.50, (0.6309297535714575 + 1.0) / 4.0},
    {3, 0.75, (0.6309297535714575 + 0.5 + 1.0) / 4.0},
    {5, 1.00, (0.6309297535714575 + 0.5 + 1.0 / std::log2(6.0) + 1.0) / 4.0},
};

}  // namespace oracle
