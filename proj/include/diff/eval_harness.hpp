#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "diff/data_pipeline.hpp"
#include "diff/model.hpp"

namespace diff {

/// Maps a batch to scores over every catalog item, [b×n_items].
using Scorer = std::function<Matrix(const SequenceBatch&)>;

Scorer model_scorer(Model& model);

/// 1 + #(strictly greater) + #(equal score, smaller id). `target` is 1-based.
int target_rank(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int target);

struct CohortMetrics {
  int n_users = 0;
  std::map<int, double> recall;
  std::map<int, double> ndcg;
};

struct MetricsReport {
  std::vector<int> ks;
  std::map<int, double> recall;
  std::map<int, double> ndcg;
  int n_users = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  /// Keyed "head", "tail", "short", "long" when requested.
  std::map<std::string, CohortMetrics> cohorts;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Aggregates per-user ranks into Recall@k and NDCG@k.
CohortMetrics metrics_from_ranks(const std::vector<int>& ranks, const std::vector<int>& ks);

struct EvalOptions {
  std::vector<int> ks{10, 20};
  int batch_size = 256;
  /// Worker threads over batches; 1 evaluates inline.
  int threads = 1;
};

/// Ranks of each example's target among all items, in example order.
std::vector<int> rank_targets(const Scorer& scorer, const std::vector<SequenceExample>& split, const ItemCatalog& catalog,
                              int max_len, const EvalOptions& opts = {});

MetricsReport full_rank_eval(const Scorer& scorer, const std::vector<SequenceExample>& split, const ItemCatalog& catalog,
                             int max_len, const EvalOptions& opts = {});
MetricsReport full_rank_eval(Model& model, const std::vector<SequenceExample>& split, const EvalOptions& opts = {});

enum class CohortKind { kPopularity, kLength };

CohortKind parse_cohort_kind(const std::string& name);

struct CohortSplit {
  std::string first_name, second_name;
  /// Example indices belonging to each group.
  std::vector<int> first, second;
};

/// Popularity: head holds examples whose target is among the top ⌈10%⌉ items by
/// train frequency (ties to the smaller id). Length: short means a full sequence
/// of at most five items.
CohortSplit cohort_split(const SplitDataset& data, const std::vector<SequenceExample>& split, CohortKind kind);

/// Adds the requested cohort breakdowns to `report` from precomputed ranks.
void add_cohorts(MetricsReport& report, const std::vector<int>& ranks, const SplitDataset& data,
                 const std::vector<SequenceExample>& split, const std::vector<CohortKind>& kinds);

struct RobustnessPoint {
  double ratio = 0.0;
  std::map<int, double> recall_mean, recall_std, ndcg_mean, ndcg_std;
  std::vector<CohortMetrics> per_seed;
};

/// Sample standard deviation (n − 1); zero for a single seed.
std::vector<RobustnessPoint> robustness_curve(const Scorer& scorer, const std::vector<SequenceExample>& split,
                                              const ItemCatalog& catalog, int max_len, const std::vector<double>& ratios,
                                              const std::vector<std::uint64_t>& seeds, const EvalOptions& opts = {});

nlohmann::json robustness_json(const std::vector<RobustnessPoint>& curve);

/// Last-layer, head-averaged attention of the final position over the valid
/// positions, for each enabled block, labelled with item and attribute tokens.
nlohmann::json export_attention(Model& model, const std::vector<int>& sequence, const SplitDataset& labels);

}  // namespace diff
