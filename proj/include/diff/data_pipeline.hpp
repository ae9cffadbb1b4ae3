#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "diff/catalog.hpp"

namespace diff {

struct Interaction {
  int user = 0;
  int item = 0;
  std::int64_t timestamp = 0;

  bool operator==(const Interaction&) const = default;
};

/// Interactions over dense ids. Users are 0-based; items are 1-based with
/// item_tokens[0] reserved for padding.
struct InteractionLog {
  std::vector<Interaction> records;
  std::vector<std::string> user_tokens;
  std::vector<std::string> item_tokens;

  bool operator==(const InteractionLog&) const = default;
};

struct IngestResult {
  InteractionLog log;
  ItemCatalog catalog;
  /// attr_tokens[k][v] names value v of attribute k; index 0 is padding.
  std::vector<std::vector<std::string>> attr_tokens;
};

/// Reads the interaction TSV (user, item, timestamp) and attribute TSV
/// (item, attr_1..attr_m). Multi-valued attributes `a|b` keep `a`.
IngestResult ingest(const std::filesystem::path& interactions, const std::filesystem::path& attributes);

/// Drops users and items with fewer than `min_core` interactions until nothing changes.
InteractionLog five_core_filter(const InteractionLog& log, int min_core = 5);

struct SplitStats {
  int users = 0;
  int items = 0;
  std::int64_t interactions = 0;
  double avg_length = 0.0;
  /// 1 − distinct (user, item) pairs / (users · items).
  double sparsity = 0.0;
  /// Users dropped for having fewer than 3 interactions.
  int excluded_users = 0;

  bool operator==(const SplitStats&) const = default;
};

/// Leave-one-out split over a compacted catalog. Example inputs hold at most max_len items.
struct SplitDataset {
  ItemCatalog catalog;
  int max_len = 50;
  std::vector<std::string> user_tokens;
  std::vector<std::string> item_tokens;
  std::vector<std::vector<std::string>> attr_tokens;
  std::vector<SequenceExample> train;
  std::vector<SequenceExample> validation;
  std::vector<SequenceExample> test;
  /// Occurrences of each item in the training subsequences, indexed by item id.
  std::vector<int> train_frequency;
  SplitStats stats;

  bool operator==(const SplitDataset&) const = default;
};

/// Items absent from `log` are dropped from the catalog and ids re-densified.
/// Train pairs are every prefix of the sequence without its last two items.
SplitDataset build_sequences(const InteractionLog& log, const ItemCatalog& catalog,
                             const std::vector<std::vector<std::string>>& attr_tokens, int max_len = 50);

struct SynthConfig {
  int n_items = 200;
  int n_users = 2000;
  int m = 2;
  std::vector<int> vocab_sizes{20, 10};
  double rule_strength = 0.9;
  int min_length = 5;
  int max_length = 12;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Attribute 0 partitions items into equal-sized classes and each user holds one
/// class. Every position is drawn from that class with probability rule_strength,
/// otherwise uniformly, so rule-drawn neighbours always share attribute 0 and under
/// rule_strength = 1 a whole sequence stays in one class.
IngestResult synthesize(const SynthConfig& cfg);

/// Replaces ⌈ratio·len⌉ distinct input positions per example with a different
/// uniformly drawn item. Targets and lengths are untouched.
std::vector<SequenceExample> inject_noise(const std::vector<SequenceExample>& examples, const ItemCatalog& catalog,
                                          double ratio, std::uint64_t seed);

void write_interactions_tsv(const IngestResult& data, const std::filesystem::path& path);
void write_attributes_tsv(const IngestResult& data, const std::filesystem::path& path);

void save_split(const SplitDataset& data, const std::filesystem::path& path);
SplitDataset load_split(const std::filesystem::path& path);

}  // namespace diff
