#include "diff/eval_harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "diff/errors.hpp"

namespace diff {

Scorer model_scorer(Model& model) {
  return [&model](const SequenceBatch& batch) { return score_batch(model, batch); };
}

int target_rank(const Eigen::Ref<const Eigen::RowVectorXd>& scores, int target) {
  if (target < 1 || target > scores.size()) {
    throw IndexError("target " + std::to_string(target) + " outside " + std::to_string(scores.size()) + " scores");
  }
  const double t = scores(target - 1);
  if (!std::isfinite(t)) throw NumericError("non-finite score for target " + std::to_string(target));
  int rank = 1;
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    const double s = scores(j);
    if (s > t || (s == t && j < target - 1)) ++rank;
  }
  return rank;
}

CohortMetrics metrics_from_ranks(const std::vector<int>& ranks, const std::vector<int>& ks) {
  CohortMetrics m;
  m.n_users = static_cast<int>(ranks.size());
  for (int k : ks) {
    double hits = 0.0, gain = 0.0;
    for (int r : ranks) {
      if (r <= k) {
        hits += 1.0;
        gain += 1.0 / std::log2(r + 1.0);
      }
    }
    m.recall[k] = ranks.empty() ? 0.0 : hits / static_cast<double>(ranks.size());
    m.ndcg[k] = ranks.empty() ? 0.0 : gain / static_cast<double>(ranks.size());
  }
  return m;
}

namespace {

void check_ks(const std::vector<int>& ks) {
  if (ks.empty()) throw ConfigError("at least one cutoff k is required");
  for (int k : ks) {
    if (k < 1) throw ConfigError("cutoff k must be >= 1");
  }
}

nlohmann::json metric_map(const std::map<int, double>& m, const std::string& name) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[name + "@" + std::to_string(k)] = v;
  return j;
}

}  // namespace

std::vector<int> rank_targets(const Scorer& scorer, const std::vector<SequenceExample>& split, const ItemCatalog& catalog,
                              int max_len, const EvalOptions& opts) {
  if (split.empty()) throw EmptySplitError("evaluation split is empty");
  if (opts.batch_size < 1) throw ConfigError("evaluation batch_size must be >= 1");
  const int n = static_cast<int>(split.size());
  const int n_batches = (n + opts.batch_size - 1) / opts.batch_size;
  std::vector<int> ranks(split.size(), 0);
  auto run_batch = [&](int bi) {
    const int begin = bi * opts.batch_size;
    const int end = std::min(n, begin + opts.batch_size);
    const std::span<const SequenceExample> xs(split.data() + begin, static_cast<std::size_t>(end - begin));
    const SequenceBatch batch = make_batch(xs, catalog, max_len);
    const Matrix scores = scorer(batch);
    if (scores.rows() != batch.batch || scores.cols() != catalog.n_items) {
      throw ShapeError("scorer returned " + shape_of(scores) + " for " + std::to_string(batch.batch) + " rows and " +
                       std::to_string(catalog.n_items) + " items");
    }
    for (int r = 0; r < batch.batch; ++r) {
      ranks[static_cast<std::size_t>(begin + r)] = target_rank(scores.row(r), batch.target[static_cast<std::size_t>(r)]);
    }
  };

  const int workers = std::max(1, std::min(opts.threads, n_batches));
  if (workers == 1) {
    for (int bi = 0; bi < n_batches; ++bi) run_batch(bi);
    return ranks;
  }
  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (int bi = next++; bi < n_batches; bi = next++) run_batch(bi);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return ranks;
}

MetricsReport full_rank_eval(const Scorer& scorer, const std::vector<SequenceExample>& split, const ItemCatalog& catalog,
                             int max_len, const EvalOptions& opts) {
  check_ks(opts.ks);
  const std::vector<int> ranks = rank_targets(scorer, split, catalog, max_len, opts);
  const CohortMetrics all = metrics_from_ranks(ranks, opts.ks);
  MetricsReport r;
  r.ks = opts.ks;
  r.recall = all.recall;
  r.ndcg = all.ndcg;
  r.n_users = all.n_users;
  return r;
}

MetricsReport full_rank_eval(Model& model, const std::vector<SequenceExample>& split, const EvalOptions& opts) {
  return full_rank_eval(model_scorer(model), split, model.catalog(), model.config().encoder.max_len, opts);
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j = metric_map(recall, "recall");
  j.update(metric_map(ndcg, "ndcg"));
  j["ks"] = ks;
  j["n_users"] = n_users;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  nlohmann::json c = nlohmann::json::object();
  for (const auto& [name, m] : cohorts) {
    nlohmann::json cj = metric_map(m.recall, "recall");
    cj.update(metric_map(m.ndcg, "ndcg"));
    cj["n_users"] = m.n_users;
    c[name] = cj;
  }
  j["cohorts"] = c;
  return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.ks = j.at("ks").get<std::vector<int>>();
  r.n_users = j.at("n_users").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.config_hash = j.at("config_hash").get<std::string>();
  auto read = [&r](const nlohmann::json& src, std::map<int, double>& recall, std::map<int, double>& ndcg) {
    for (int k : r.ks) {
      recall[k] = src.at("recall@" + std::to_string(k)).get<double>();
      ndcg[k] = src.at("ndcg@" + std::to_string(k)).get<double>();
    }
  };
  read(j, r.recall, r.ndcg);
  for (const auto& [name, cj] : j.at("cohorts").items()) {
    CohortMetrics m;
    m.n_users = cj.at("n_users").get<int>();
    read(cj, m.recall, m.ndcg);
    r.cohorts[name] = m;
  }
  return r;
}

CohortKind parse_cohort_kind(const std::string& name) {
  if (name == "popularity") return CohortKind::kPopularity;
  if (name == "length") return CohortKind::kLength;
  throw ConfigError("unknown cohort kind '" + name + "' (expected popularity|length)");
}

CohortSplit cohort_split(const SplitDataset& data, const std::vector<SequenceExample>& split, CohortKind kind) {
  CohortSplit out;
  if (kind == CohortKind::kLength) {
    out.first_name = "short";
    out.second_name = "long";
    for (std::size_t i = 0; i < split.size(); ++i) {
      (split[i].full_length <= 5 ? out.first : out.second).push_back(static_cast<int>(i));
    }
    return out;
  }
  out.first_name = "head";
  out.second_name = "tail";
  const int n = data.catalog.n_items;
  if (static_cast<int>(data.train_frequency.size()) != n + 1) {
    throw CatalogError("train frequency table does not match the catalog");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i + 1;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return data.train_frequency[static_cast<std::size_t>(a)] > data.train_frequency[static_cast<std::size_t>(b)];
  });
  const int head_size = (n + 9) / 10;
  std::vector<bool> head(static_cast<std::size_t>(n) + 1, false);
  for (int i = 0; i < head_size; ++i) head[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const int t = split[i].target;
    const bool is_head = t >= 1 && t <= n && head[static_cast<std::size_t>(t)];
    (is_head ? out.first : out.second).push_back(static_cast<int>(i));
  }
  return out;
}

void add_cohorts(MetricsReport& report, const std::vector<int>& ranks, const SplitDataset& data,
                 const std::vector<SequenceExample>& split, const std::vector<CohortKind>& kinds) {
  for (CohortKind kind : kinds) {
    const CohortSplit s = cohort_split(data, split, kind);
    auto pick = [&ranks](const std::vector<int>& idx) {
      std::vector<int> out;
      for (int i : idx) out.push_back(ranks[static_cast<std::size_t>(i)]);
      return out;
    };
    report.cohorts[s.first_name] = metrics_from_ranks(pick(s.first), report.ks);
    report.cohorts[s.second_name] = metrics_from_ranks(pick(s.second), report.ks);
  }
}

std::vector<RobustnessPoint> robustness_curve(const Scorer& scorer, const std::vector<SequenceExample>& split,
                                              const ItemCatalog& catalog, int max_len, const std::vector<double>& ratios,
                                              const std::vector<std::uint64_t>& seeds, const EvalOptions& opts) {
  check_ks(opts.ks);
  if (seeds.empty()) throw ConfigError("robustness needs at least one seed");
  std::vector<RobustnessPoint> curve;
  for (double ratio : ratios) {
    RobustnessPoint p;
    p.ratio = ratio;
    for (std::uint64_t seed : seeds) {
      const std::vector<SequenceExample> noisy = inject_noise(split, catalog, ratio, seed);
      p.per_seed.push_back(metrics_from_ranks(rank_targets(scorer, noisy, catalog, max_len, opts), opts.ks));
    }
    const double n = static_cast<double>(seeds.size());
    auto aggregate = [&](auto field, std::map<int, double>& mean, std::map<int, double>& sd) {
      for (int k : opts.ks) {
        double s = 0.0;
        for (const CohortMetrics& m : p.per_seed) s += (m.*field).at(k);
        const double mu = s / n;
        double sq = 0.0;
        for (const CohortMetrics& m : p.per_seed) sq += ((m.*field).at(k) - mu) * ((m.*field).at(k) - mu);
        mean[k] = mu;
        sd[k] = seeds.size() > 1 ? std::sqrt(sq / (n - 1.0)) : 0.0;
      }
    };
    aggregate(&CohortMetrics::recall, p.recall_mean, p.recall_std);
    aggregate(&CohortMetrics::ndcg, p.ndcg_mean, p.ndcg_std);
    curve.push_back(std::move(p));
  }
  return curve;
}

nlohmann::json robustness_json(const std::vector<RobustnessPoint>& curve) {
  nlohmann::json arr = nlohmann::json::array();
  for (const RobustnessPoint& p : curve) {
    nlohmann::json j;
    j["ratio"] = p.ratio;
    j["mean"] = metric_map(p.recall_mean, "recall");
    j["mean"].update(metric_map(p.ndcg_mean, "ndcg"));
    j["std"] = metric_map(p.recall_std, "recall");
    j["std"].update(metric_map(p.ndcg_std, "ndcg"));
    nlohmann::json seeds = nlohmann::json::array();
    for (const CohortMetrics& m : p.per_seed) {
      nlohmann::json s = metric_map(m.recall, "recall");
      s.update(metric_map(m.ndcg, "ndcg"));
      seeds.push_back(s);
    }
    j["per_seed"] = seeds;
    arr.push_back(j);
  }
  return arr;
}

nlohmann::json export_attention(Model& model, const std::vector<int>& sequence, const SplitDataset& labels) {
  if (sequence.empty()) throw EmptySequenceError("case study sequence is empty");
  const int n = model.config().encoder.max_len;
  const SequenceExample ex{0, sequence, 0, static_cast<int>(sequence.size())};
  const SequenceBatch batch = make_batch(std::span<const SequenceExample>(&ex, 1), model.catalog(), n);
  Tape tape;
  const EncodeResult enc = encode(tape, batch, model.encoder());
  const AttentionDump& dump = enc.dump;
  const int last = n - 1;
  const int len = std::min(n, static_cast<int>(sequence.size()));

  auto head_average = [&](bool id_block) {
    const std::vector<Matrix>& stack = id_block ? dump.id_weights : dump.attr_weights;
    const int layer = static_cast<int>(stack.size()) - 1;
    Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n);
    for (int h = 0; h < dump.heads; ++h) {
      row += (id_block ? dump.id_head(layer, h, 0) : dump.attr_head(layer, h, 0)).row(last);
    }
    row /= dump.heads;
    std::vector<double> out(static_cast<std::size_t>(len));
    for (int p = 0; p < len; ++p) out[static_cast<std::size_t>(p)] = row(n - len + p);
    return out;
  };

  nlohmann::json j;
  nlohmann::json items = nlohmann::json::array();
  for (int p = 0; p < len; ++p) {
    const int item = batch.item_ids[batch.at(0, n - len + p)];
    nlohmann::json entry;
    entry["id"] = item;
    if (static_cast<std::size_t>(item) < labels.item_tokens.size()) entry["token"] = labels.item_tokens[static_cast<std::size_t>(item)];
    nlohmann::json attrs = nlohmann::json::array();
    for (int k = 0; k < model.catalog().m; ++k) {
      const int v = model.catalog().attr(item, k);
      const auto& names = k < static_cast<int>(labels.attr_tokens.size()) ? labels.attr_tokens[static_cast<std::size_t>(k)]
                                                                           : std::vector<std::string>{};
      attrs.push_back(static_cast<std::size_t>(v) < names.size() ? nlohmann::json(names[static_cast<std::size_t>(v)])
                                                                 : nlohmann::json(v));
    }
    entry["attributes"] = attrs;
    items.push_back(entry);
  }
  j["positions"] = items;
  j["layer"] = model.config().encoder.layers - 1;
  j["heads"] = dump.heads;
  if (!dump.id_weights.empty()) j["item_fusion"] = head_average(true);
  if (!dump.attr_weights.empty()) j["attribute_fusion"] = head_average(false);
  return j;
}

}  // namespace diff
