#include "diff/data_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "diff/errors.hpp"

namespace diff {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

bool parse_int64(const std::string& s, std::int64_t& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return in;
}

std::string where(const std::filesystem::path& path, int line) { return path.string() + ":" + std::to_string(line); }

// Assigns dense ids in order of first appearance; `base` is the first id.
class TokenMap {
 public:
  explicit TokenMap(int base) : base_(base) {}
  int intern(const std::string& token) {
    auto [it, inserted] = ids_.try_emplace(token, base_ + static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }
  const std::string* find_token(const std::string& token, int& id) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) return nullptr;
    id = it->second;
    return &it->first;
  }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  int base_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

struct TripleHash {
  std::size_t operator()(const Interaction& r) const {
    std::size_t h = std::hash<long long>()(r.timestamp);
    h ^= std::hash<int>()(r.user) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= std::hash<int>()(r.item) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  }
};

}  // namespace

IngestResult ingest(const std::filesystem::path& interactions, const std::filesystem::path& attributes) {
  IngestResult out;
  TokenMap users(0), items(1);
  std::unordered_set<Interaction, TripleHash> seen;
  {
    std::ifstream in = open_input(interactions);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const std::vector<std::string> f = split_tabs(line);
      if (f.size() != 3) {
        throw ParseError(where(interactions, line_no) + ": expected 3 tab-separated fields, got " +
                         std::to_string(f.size()));
      }
      std::int64_t ts = 0;
      if (!parse_int64(f[2], ts)) {
        if (line_no == 1) continue;  // header
        throw ParseError(where(interactions, line_no) + ": timestamp '" + f[2] + "' is not an integer");
      }
      if (f[0].empty() || f[1].empty()) throw ParseError(where(interactions, line_no) + ": empty user or item token");
      Interaction r{users.intern(f[0]), items.intern(f[1]), ts};
      if (!seen.insert(r).second) {
        throw ParseError(where(interactions, line_no) + ": duplicate interaction (" + f[0] + ", " + f[1] + ", " +
                         f[2] + ")");
      }
      out.log.records.push_back(r);
    }
  }
  out.log.user_tokens = users.tokens();
  out.log.item_tokens = items.tokens();
  out.log.item_tokens.insert(out.log.item_tokens.begin(), std::string());

  const int n_items = static_cast<int>(items.tokens().size());
  std::vector<std::vector<std::string>> raw(static_cast<std::size_t>(n_items) + 1);
  std::vector<bool> has_row(static_cast<std::size_t>(n_items) + 1, false);
  int m = -1;
  {
    std::ifstream in = open_input(attributes);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      std::vector<std::string> f = split_tabs(line);
      if (line_no == 1 && (f[0] == "item_id" || f[0] == "item")) continue;
      if (f.size() < 2) throw ParseError(where(attributes, line_no) + ": expected item and at least one attribute");
      const int width = static_cast<int>(f.size()) - 1;
      if (m < 0) m = width;
      if (width != m) {
        throw ParseError(where(attributes, line_no) + ": " + std::to_string(width) + " attributes, earlier rows have " +
                         std::to_string(m));
      }
      int id = 0;
      if (!items.find_token(f[0], id)) continue;  // never interacted with
      if (has_row[static_cast<std::size_t>(id)]) {
        throw ParseError(where(attributes, line_no) + ": second attribute row for item '" + f[0] + "'");
      }
      has_row[static_cast<std::size_t>(id)] = true;
      std::vector<std::string> values;
      for (int k = 0; k < m; ++k) {
        std::string v = f[static_cast<std::size_t>(k) + 1];
        v = v.substr(0, v.find('|'));
        if (v.empty()) throw ParseError(where(attributes, line_no) + ": empty value for attribute " + std::to_string(k + 1));
        values.push_back(std::move(v));
      }
      raw[static_cast<std::size_t>(id)] = std::move(values);
    }
  }
  for (int item = 1; item <= n_items; ++item) {
    if (!has_row[static_cast<std::size_t>(item)]) {
      throw CatalogError("item '" + out.log.item_tokens[static_cast<std::size_t>(item)] + "' has no attribute row in " +
                         attributes.string());
    }
  }
  if (m < 0) m = 0;

  ItemCatalog& cat = out.catalog;
  cat.n_items = n_items;
  cat.m = m;
  cat.attrs.assign(static_cast<std::size_t>(n_items) + 1, std::vector<int>(static_cast<std::size_t>(m), 0));
  for (int k = 0; k < m; ++k) {
    TokenMap values(1);
    for (int item = 1; item <= n_items; ++item) {
      cat.attrs[static_cast<std::size_t>(item)][static_cast<std::size_t>(k)] =
          values.intern(raw[static_cast<std::size_t>(item)][static_cast<std::size_t>(k)]);
    }
    cat.attr_vocab_sizes.push_back(static_cast<int>(values.tokens().size()));
    std::vector<std::string> names = values.tokens();
    names.insert(names.begin(), std::string());
    out.attr_tokens.push_back(std::move(names));
  }
  return out;
}

InteractionLog five_core_filter(const InteractionLog& log, int min_core) {
  if (min_core < 1) throw ConfigError("min_core must be >= 1");
  InteractionLog out = log;
  while (true) {
    std::vector<int> per_user(log.user_tokens.size(), 0), per_item(log.item_tokens.size(), 0);
    for (const Interaction& r : out.records) {
      ++per_user[static_cast<std::size_t>(r.user)];
      ++per_item[static_cast<std::size_t>(r.item)];
    }
    const std::size_t before = out.records.size();
    std::erase_if(out.records, [&](const Interaction& r) {
      return per_user[static_cast<std::size_t>(r.user)] < min_core || per_item[static_cast<std::size_t>(r.item)] < min_core;
    });
    if (out.records.size() == before) break;
  }
  if (out.records.empty()) {
    throw EmptyDatasetError("no interactions survive the " + std::to_string(min_core) + "-core filter");
  }
  return out;
}

SplitDataset build_sequences(const InteractionLog& log, const ItemCatalog& catalog,
                             const std::vector<std::vector<std::string>>& attr_tokens, int max_len) {
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::vector<std::vector<Interaction>> per_user(log.user_tokens.size());
  for (const Interaction& r : log.records) {
    if (r.item < 1 || r.item > catalog.n_items) {
      throw CatalogError("interaction item id " + std::to_string(r.item) + " outside catalog");
    }
    per_user[static_cast<std::size_t>(r.user)].push_back(r);
  }

  SplitDataset out;
  out.max_len = max_len;
  out.attr_tokens = attr_tokens;
  std::vector<std::vector<int>> sequences;
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    std::vector<Interaction>& rs = per_user[u];
    if (rs.empty()) continue;
    if (rs.size() < 3) {
      ++out.stats.excluded_users;
      continue;
    }
    std::stable_sort(rs.begin(), rs.end(), [](const Interaction& a, const Interaction& b) { return a.timestamp < b.timestamp; });
    std::vector<int> seq;
    for (const Interaction& r : rs) seq.push_back(r.item);
    out.user_tokens.push_back(log.user_tokens[u]);
    sequences.push_back(std::move(seq));
  }
  if (sequences.empty()) throw EmptyDatasetError("no user has the 3 interactions a leave-one-out split needs");

  // Compact item ids, keeping relative order.
  std::vector<int> remap(static_cast<std::size_t>(catalog.n_items) + 1, 0);
  for (const auto& seq : sequences) {
    for (int item : seq) remap[static_cast<std::size_t>(item)] = 1;
  }
  ItemCatalog& cat = out.catalog;
  cat.m = catalog.m;
  cat.attr_vocab_sizes = catalog.attr_vocab_sizes;
  cat.attrs.push_back(std::vector<int>(static_cast<std::size_t>(catalog.m), 0));
  out.item_tokens.push_back(std::string());
  for (int item = 1; item <= catalog.n_items; ++item) {
    if (!remap[static_cast<std::size_t>(item)]) continue;
    remap[static_cast<std::size_t>(item)] = ++cat.n_items;
    cat.attrs.push_back(catalog.attrs[static_cast<std::size_t>(item)]);
    const std::size_t tok = static_cast<std::size_t>(item);
    out.item_tokens.push_back(tok < log.item_tokens.size() ? log.item_tokens[tok] : std::to_string(item));
  }

  out.train_frequency.assign(static_cast<std::size_t>(cat.n_items) + 1, 0);
  std::set<std::pair<int, int>> distinct;
  auto window = [max_len](const std::vector<int>& seq, std::size_t end) {
    const std::size_t begin = end > static_cast<std::size_t>(max_len) ? end - static_cast<std::size_t>(max_len) : 0;
    return std::vector<int>(seq.begin() + static_cast<std::ptrdiff_t>(begin), seq.begin() + static_cast<std::ptrdiff_t>(end));
  };
  for (std::size_t u = 0; u < sequences.size(); ++u) {
    std::vector<int>& seq = sequences[u];
    for (int& item : seq) {
      item = remap[static_cast<std::size_t>(item)];
      distinct.emplace(static_cast<int>(u), item);
    }
    const int user = static_cast<int>(u);
    const int len = static_cast<int>(seq.size());
    const std::size_t n = seq.size();
    out.test.push_back(SequenceExample{user, window(seq, n - 1), seq[n - 1], len});
    out.validation.push_back(SequenceExample{user, window(seq, n - 2), seq[n - 2], len});
    for (std::size_t t = 1; t + 2 < n; ++t) out.train.push_back(SequenceExample{user, window(seq, t), seq[t], len});
    for (std::size_t t = 0; t + 2 < n; ++t) ++out.train_frequency[static_cast<std::size_t>(seq[t])];
    out.stats.interactions += len;
  }
  out.stats.users = static_cast<int>(sequences.size());
  out.stats.items = cat.n_items;
  out.stats.avg_length = static_cast<double>(out.stats.interactions) / out.stats.users;
  out.stats.sparsity = 1.0 - static_cast<double>(distinct.size()) /
                                 (static_cast<double>(out.stats.users) * static_cast<double>(out.stats.items));
  return out;
}

void SynthConfig::validate() const {
  if (n_items < 1 || n_users < 1) throw ConfigError("synthetic n_items and n_users must be >= 1");
  if (m < 1 || static_cast<int>(vocab_sizes.size()) != m) {
    throw ConfigError("synthetic data needs m >= 1 and one vocabulary size per attribute");
  }
  for (int v : vocab_sizes) {
    if (v < 1) throw ConfigError("vocabulary sizes must be >= 1");
  }
  if (vocab_sizes[0] > n_items) throw ConfigError("attribute 1 has more classes than there are items");
  if (!(rule_strength >= 0.0 && rule_strength <= 1.0)) throw ConfigError("rule_strength must lie in [0, 1]");
  if (min_length < 3 || max_length < min_length) throw ConfigError("need 3 <= min_length <= max_length");
}

IngestResult synthesize(const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  IngestResult out;
  ItemCatalog& cat = out.catalog;
  cat.n_items = cfg.n_items;
  cat.m = cfg.m;
  cat.attr_vocab_sizes = cfg.vocab_sizes;
  cat.attrs.assign(static_cast<std::size_t>(cfg.n_items) + 1, std::vector<int>(static_cast<std::size_t>(cfg.m), 0));

  std::vector<int> classes(static_cast<std::size_t>(cfg.n_items));
  for (int i = 0; i < cfg.n_items; ++i) classes[static_cast<std::size_t>(i)] = i % cfg.vocab_sizes[0] + 1;
  std::shuffle(classes.begin(), classes.end(), rng);
  std::vector<std::vector<int>> members(static_cast<std::size_t>(cfg.vocab_sizes[0]) + 1);
  for (int item = 1; item <= cfg.n_items; ++item) {
    const int c = classes[static_cast<std::size_t>(item) - 1];
    cat.attrs[static_cast<std::size_t>(item)][0] = c;
    members[static_cast<std::size_t>(c)].push_back(item);
    for (int k = 1; k < cfg.m; ++k) {
      std::uniform_int_distribution<int> value(1, cfg.vocab_sizes[static_cast<std::size_t>(k)]);
      cat.attrs[static_cast<std::size_t>(item)][static_cast<std::size_t>(k)] = value(rng);
    }
  }

  out.log.item_tokens.push_back(std::string());
  for (int item = 1; item <= cfg.n_items; ++item) out.log.item_tokens.push_back("i" + std::to_string(item));
  for (int k = 0; k < cfg.m; ++k) {
    std::vector<std::string> names{std::string()};
    for (int v = 1; v <= cfg.vocab_sizes[static_cast<std::size_t>(k)]; ++v) {
      names.push_back("a" + std::to_string(k + 1) + "_" + std::to_string(v));
    }
    out.attr_tokens.push_back(std::move(names));
  }

  std::uniform_int_distribution<int> any_item(1, cfg.n_items);
  std::uniform_int_distribution<int> any_class(1, cfg.vocab_sizes[0]);
  std::uniform_int_distribution<int> length(cfg.min_length, cfg.max_length);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (int u = 0; u < cfg.n_users; ++u) {
    out.log.user_tokens.push_back("u" + std::to_string(u + 1));
    const std::vector<int>& pool = members[static_cast<std::size_t>(any_class(rng))];
    const int len = length(rng);
    for (int t = 0; t < len; ++t) {
      const int item = coin(rng) < cfg.rule_strength
                           ? pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]
                           : any_item(rng);
      out.log.records.push_back(Interaction{u, item, static_cast<std::int64_t>(t + 1)});
    }
  }
  return out;
}

std::vector<SequenceExample> inject_noise(const std::vector<SequenceExample>& examples, const ItemCatalog& catalog,
                                          double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 0.5)) throw ConfigError("noise ratio must lie in [0, 0.5]");
  std::vector<SequenceExample> out = examples;
  if (ratio == 0.0) return out;
  if (catalog.n_items < 2) throw ConfigError("noise injection needs at least two items");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> other(1, catalog.n_items - 1);
  for (SequenceExample& ex : out) {
    const int len = static_cast<int>(ex.items.size());
    // The epsilon keeps exact products such as 0.25·8 from rounding up.
    const int count = std::min(len, static_cast<int>(std::ceil(ratio * len - 1e-9)));
    std::vector<int> positions(static_cast<std::size_t>(len));
    std::iota(positions.begin(), positions.end(), 0);
    for (int j = 0; j < count; ++j) {
      std::uniform_int_distribution<int> pick(j, len - 1);
      std::swap(positions[static_cast<std::size_t>(j)], positions[static_cast<std::size_t>(pick(rng))]);
      int& slot = ex.items[static_cast<std::size_t>(positions[static_cast<std::size_t>(j)])];
      const int drawn = other(rng);
      slot = drawn >= slot ? drawn + 1 : drawn;
    }
  }
  return out;
}

void write_interactions_tsv(const IngestResult& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "user_id\titem_id\ttimestamp\n";
  for (const Interaction& r : data.log.records) {
    out << data.log.user_tokens[static_cast<std::size_t>(r.user)] << '\t'
        << data.log.item_tokens[static_cast<std::size_t>(r.item)] << '\t' << r.timestamp << '\n';
  }
}

void write_attributes_tsv(const IngestResult& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << "item_id";
  for (int k = 0; k < data.catalog.m; ++k) out << "\tattr_" << k + 1;
  out << '\n';
  for (int item = 1; item <= data.catalog.n_items; ++item) {
    out << data.log.item_tokens[static_cast<std::size_t>(item)];
    for (int k = 0; k < data.catalog.m; ++k) {
      out << '\t' << data.attr_tokens[static_cast<std::size_t>(k)][static_cast<std::size_t>(data.catalog.attr(item, k))];
    }
    out << '\n';
  }
}

namespace {

nlohmann::json examples_json(const std::vector<SequenceExample>& xs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const SequenceExample& x : xs) {
    arr.push_back({{"user", x.user}, {"items", x.items}, {"target", x.target}, {"full_length", x.full_length}});
  }
  return arr;
}

std::vector<SequenceExample> examples_from(const nlohmann::json& arr) {
  std::vector<SequenceExample> out;
  for (const auto& x : arr) {
    out.push_back(SequenceExample{x.at("user").get<int>(), x.at("items").get<std::vector<int>>(), x.at("target").get<int>(),
                                  x.at("full_length").get<int>()});
  }
  return out;
}

}  // namespace

void save_split(const SplitDataset& data, const std::filesystem::path& path) {
  nlohmann::json j;
  j["format"] = "diff-split";
  j["version"] = 1;
  j["max_len"] = data.max_len;
  j["catalog"] = {{"n_items", data.catalog.n_items},
                  {"m", data.catalog.m},
                  {"attr_vocab_sizes", data.catalog.attr_vocab_sizes},
                  {"attrs", data.catalog.attrs}};
  j["user_tokens"] = data.user_tokens;
  j["item_tokens"] = data.item_tokens;
  j["attr_tokens"] = data.attr_tokens;
  j["train"] = examples_json(data.train);
  j["validation"] = examples_json(data.validation);
  j["test"] = examples_json(data.test);
  j["train_frequency"] = data.train_frequency;
  const SplitStats& s = data.stats;
  j["stats"] = {{"users", s.users},           {"items", s.items},       {"interactions", s.interactions},
                {"avg_length", s.avg_length}, {"sparsity", s.sparsity}, {"excluded_users", s.excluded_users}};
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << j.dump() << '\n';
}

SplitDataset load_split(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  nlohmann::json j;
  try {
    in >> j;
    if (j.at("format") != "diff-split" || j.at("version") != 1) throw ParseError(path.string() + ": not a split manifest");
    SplitDataset d;
    d.max_len = j.at("max_len").get<int>();
    const auto& c = j.at("catalog");
    d.catalog.n_items = c.at("n_items").get<int>();
    d.catalog.m = c.at("m").get<int>();
    d.catalog.attr_vocab_sizes = c.at("attr_vocab_sizes").get<std::vector<int>>();
    d.catalog.attrs = c.at("attrs").get<std::vector<std::vector<int>>>();
    d.catalog.validate();
    d.user_tokens = j.at("user_tokens").get<std::vector<std::string>>();
    d.item_tokens = j.at("item_tokens").get<std::vector<std::string>>();
    d.attr_tokens = j.at("attr_tokens").get<std::vector<std::vector<std::string>>>();
    d.train = examples_from(j.at("train"));
    d.validation = examples_from(j.at("validation"));
    d.test = examples_from(j.at("test"));
    d.train_frequency = j.at("train_frequency").get<std::vector<int>>();
    const auto& s = j.at("stats");
    d.stats.users = s.at("users").get<int>();
    d.stats.items = s.at("items").get<int>();
    d.stats.interactions = s.at("interactions").get<std::int64_t>();
    d.stats.avg_length = s.at("avg_length").get<double>();
    d.stats.sparsity = s.at("sparsity").get<double>();
    d.stats.excluded_users = s.at("excluded_users").get<int>();
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace diff
