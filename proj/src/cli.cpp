#include "diff/cli.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "diff/errors.hpp"
#include "diff/eval_harness.hpp"
#include "diff/fixtures.hpp"

namespace diff {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

long long parse_integer(const std::string& key, const std::string& v) {
  long long out = 0;
  const char* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key + ": '" + v + "' is not an integer");
  return out;
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ParseError("cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

// ---- RunConfig ---------------------------------------------------------------

const std::vector<RunConfig::Key>& RunConfig::keys() {
  static const std::vector<Key> k = {
      {"interactions", "", "interaction TSV (user, item, timestamp)"},
      {"attributes", "", "attribute TSV (item, attr_1..attr_m)"},
      {"data", "", "prepared data directory"},
      {"min_core", "5", "k-core threshold"},
      {"max_len", "50", "maximum sequence length N"},
      {"d", "256", "embedding width"},
      {"heads", "2", "attention heads"},
      {"layers", "2", "encoder layers"},
      {"alpha", "0.5", "weight of the ID-centric representation"},
      {"c", "3", "spectral cutoff"},
      {"fusion", "gate", "early fusion: sum|concat|gate"},
      {"dropout", "0", "dropout rate"},
      {"causal", "true", "causal attention"},
      {"ffn_inner", "0", "FFN inner width (0 = 4d)"},
      {"lambda", "10", "alignment loss weight"},
      {"align_normalize", "false", "row-normalize alignment targets"},
      {"init_seed", "42", "parameter initialization seed"},
      {"lr", "0.001", "Adam learning rate"},
      {"batch_size", "256", "training batch size"},
      {"max_epochs", "200", "epoch limit"},
      {"patience", "10", "epochs without a new best validation NDCG@20 before stopping"},
      {"adam_beta1", "0.9", "Adam first-moment decay"},
      {"adam_beta2", "0.999", "Adam second-moment decay"},
      {"adam_eps", "1e-08", "Adam epsilon"},
      {"grad_clip", "0", "global gradient-norm clip (0 = off)"},
      {"seed", "42", "shuffle, synthesis and noise seed"},
      {"eval_threads", "1", "evaluation worker threads"},
      {"train_noise", "0", "substitution ratio applied to training inputs"},
      {"n_users", "2000", "synthetic users"},
      {"n_items", "200", "synthetic items"},
      {"m", "2", "synthetic attribute count"},
      {"vocab_sizes", "20,10", "synthetic attribute vocabulary sizes"},
      {"rule_strength", "0.9", "probability of a same-class transition"},
      {"min_length", "5", "shortest synthetic sequence"},
      {"max_length", "12", "longest synthetic sequence"},
  };
  return k;
}

bool RunConfig::known(const std::string& key) {
  const auto& k = keys();
  return std::any_of(k.begin(), k.end(), [&](const Key& x) { return x.name == key; });
}

RunConfig::RunConfig() {
  for (const Key& k : keys()) {
    values_[k.name] = k.default_value;
    sources_[k.name] = Source::kDefault;
  }
}

void RunConfig::load_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(body.substr(0, eq));
    if (!known(key)) throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    set(key, trim(body.substr(eq + 1)), Source::kFile);
  }
}

void RunConfig::set(const std::string& key, const std::string& value, Source source) {
  if (!known(key)) throw ConfigError("unknown config key '" + key + "'");
  if (source < sources_[key]) return;
  values_[key] = value;
  sources_[key] = source;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

RunConfig::Source RunConfig::source(const std::string& key) const { return sources_.at(key); }

double RunConfig::get_double(const std::string& key) const { return parse_double(key, get(key)); }

int RunConfig::get_int(const std::string& key) const { return static_cast<int>(parse_integer(key, get(key))); }

std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const long long v = parse_integer(key, get(key));
  if (v < 0) throw ConfigError(key + " must be non-negative");
  return static_cast<std::uint64_t>(v);
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": '" + v + "' is not a boolean");
}

std::vector<int> RunConfig::get_int_list(const std::string& key) const {
  std::vector<int> out;
  for (const std::string& part : split_commas(get(key))) out.push_back(static_cast<int>(parse_integer(key, part)));
  return out;
}

ModelConfig RunConfig::model_config(ModelConfig base, bool only_explicit) const {
  auto use = [&](const char* key) { return !only_explicit || explicitly_set(key); };
  EncoderConfig& e = base.encoder;
  if (use("d")) e.d = get_int("d");
  if (use("heads")) e.heads = get_int("heads");
  if (use("layers")) e.layers = get_int("layers");
  if (use("max_len")) e.max_len = get_int("max_len");
  if (use("alpha")) e.alpha = get_double("alpha");
  if (use("c")) e.cutoff = get_int("c");
  if (use("fusion")) e.fusion = parse_fusion_kind(get("fusion"));
  if (use("dropout")) e.dropout = get_double("dropout");
  if (use("causal")) e.causal = get_bool("causal");
  if (use("ffn_inner")) e.ffn_inner = get_int("ffn_inner");
  if (use("lambda")) base.lambda = get_double("lambda");
  if (use("align_normalize")) base.align_normalize = get_bool("align_normalize");
  if (use("init_seed")) base.init_seed = get_u64("init_seed");
  return base;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.learning_rate = get_double("lr");
  t.batch_size = get_int("batch_size");
  t.max_epochs = get_int("max_epochs");
  t.patience = get_int("patience");
  t.adam_beta1 = get_double("adam_beta1");
  t.adam_beta2 = get_double("adam_beta2");
  t.adam_eps = get_double("adam_eps");
  t.grad_clip = get_double("grad_clip");
  t.seed = get_u64("seed");
  t.eval_threads = get_int("eval_threads");
  t.validate();
  return t;
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig s;
  s.n_users = get_int("n_users");
  s.n_items = get_int("n_items");
  s.m = get_int("m");
  s.vocab_sizes = get_int_list("vocab_sizes");
  s.rule_strength = get_double("rule_strength");
  s.min_length = get_int("min_length");
  s.max_length = get_int("max_length");
  s.seed = get_u64("seed");
  s.validate();
  return s;
}

std::string RunConfig::snapshot(const std::string& command) const {
  std::ostringstream s;
  s << "# resolved configuration for `" << command << "`\n";
  for (const Key& k : keys()) s << k.name << " = " << get(k.name) << '\n';
  return s.str();
}

void RunConfig::write_snapshot(const fs::path& path, const std::string& command) const {
  write_text(path, snapshot(command));
}

std::string RunConfig::hash() const {
  nlohmann::json j = nlohmann::json::object();
  for (const Key& k : keys()) j[k.name] = get(k.name);
  return fingerprint(j);
}

std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size(), 0);
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size() && c < width.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::ostringstream s;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < width.size(); ++c) {
      const std::string cell = c < cells.size() ? cells[c] : "";
      s << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << cell;
      s << (c + 1 < width.size() ? "  " : "\n");
    }
  };
  line(header);
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  s << std::string(total + 2 * (width.size() - 1), '-') << '\n';
  for (const auto& r : rows) line(r);
  return s.str();
}

// ---- commands ------------------------------------------------------------------

namespace {

struct Context {
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

SplitDataset load_data(const RunConfig& cfg) {
  const std::string dir = cfg.get("data");
  if (dir.empty()) throw ConfigError("--data is required");
  return load_split(fs::path(dir) / "split.json");
}

ModelConfig resolved_model_config(const RunConfig& cfg, const SplitDataset& data) {
  ModelConfig mc = cfg.model_config();
  if (!cfg.explicitly_set("max_len")) mc.encoder.max_len = data.max_len;
  return mc;
}

std::vector<std::string> metric_cells(const MetricsReport& r) {
  std::vector<std::string> cells;
  for (int k : r.ks) cells.push_back(fmt(r.recall.at(k)));
  for (int k : r.ks) cells.push_back(fmt(r.ndcg.at(k)));
  return cells;
}

std::vector<std::string> metric_header(const std::vector<int>& ks) {
  std::vector<std::string> h;
  for (int k : ks) h.push_back("R@" + std::to_string(k));
  for (int k : ks) h.push_back("N@" + std::to_string(k));
  return h;
}

std::string stats_table(const SplitStats& s) {
  return format_table({"# Users", "# Items", "# Interactions", "Avg. Length", "Sparsity"},
                      {{std::to_string(s.users), std::to_string(s.items), std::to_string(s.interactions),
                        fmt(s.avg_length, 2), fmt(100.0 * s.sparsity, 2) + "%"}});
}

nlohmann::json stats_json(const SplitDataset& d) {
  const SplitStats& s = d.stats;
  return {{"users", s.users},
          {"items", s.items},
          {"interactions", s.interactions},
          {"avg_length", s.avg_length},
          {"sparsity", s.sparsity},
          {"excluded_users", s.excluded_users},
          {"train_pairs", d.train.size()},
          {"validation", d.validation.size()},
          {"test", d.test.size()}};
}

void prepare_into(Context& ctx, const IngestResult& raw, const fs::path& out_dir, const std::string& command) {
  const InteractionLog filtered = five_core_filter(raw.log, ctx.cfg.get_int("min_core"));
  const SplitDataset data = build_sequences(filtered, raw.catalog, raw.attr_tokens, ctx.cfg.get_int("max_len"));
  ensure_dir(out_dir);
  save_split(data, out_dir / "split.json");
  const std::string table = stats_table(data.stats);
  write_text(out_dir / "stats.txt", table);
  write_json(out_dir / "stats.json", stats_json(data));
  ctx.cfg.write_snapshot(out_dir / "config.resolved", command);
  ctx.out << table;
  if (data.stats.excluded_users > 0) {
    ctx.err << "warning: " << data.stats.excluded_users << " users with fewer than 3 interactions excluded\n";
  }
}

int cmd_prepare(Context& ctx, const std::string& out) {
  if (ctx.cfg.get("interactions").empty() || ctx.cfg.get("attributes").empty()) {
    throw ConfigError("--interactions and --attributes are required");
  }
  const IngestResult raw = ingest(ctx.cfg.get("interactions"), ctx.cfg.get("attributes"));
  prepare_into(ctx, raw, out, "prepare");
  return 0;
}

int cmd_synth(Context& ctx, const std::string& preset, const std::string& out) {
  if (preset != "rule") throw ConfigError("unknown synth preset '" + preset + "' (expected rule)");
  const IngestResult raw = synthesize(ctx.cfg.synth_config());
  const fs::path dir(out);
  ensure_dir(dir);
  write_interactions_tsv(raw, dir / "interactions.tsv");
  write_attributes_tsv(raw, dir / "attributes.tsv");
  ctx.cfg.set("interactions", (dir / "interactions.tsv").string(), RunConfig::Source::kFlag);
  ctx.cfg.set("attributes", (dir / "attributes.tsv").string(), RunConfig::Source::kFlag);
  // Reading the files back keeps synth and prepare on a single code path.
  prepare_into(ctx, ingest(dir / "interactions.tsv", dir / "attributes.tsv"), dir, "synth");
  return 0;
}

struct TrainedRun {
  std::unique_ptr<Model> model;
  TrainResult result;
  TrainConfig train;
};

TrainedRun train_run(Context& ctx, const SplitDataset& data, Variant variant, const fs::path& out_dir) {
  TrainedRun run;
  run.train = ctx.cfg.train_config();
  run.model = build_variant(variant, resolved_model_config(ctx.cfg, data), data.catalog);
  SplitDataset noisy;
  const SplitDataset* used = &data;
  const double noise = ctx.cfg.get_double("train_noise");
  if (noise > 0.0) {
    noisy = data;
    noisy.train = inject_noise(data.train, data.catalog, noise, run.train.seed);
    used = &noisy;
  }
  ensure_dir(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl");
  if (!log) throw ParseError("cannot write " + (out_dir / "train_log.jsonl").string());
  run.result = train(*run.model, *used, run.train, &log);
  save_checkpoint(make_checkpoint(*run.model, run.train, run.result), out_dir / "model.ckpt");
  return run;
}

MetricsReport evaluate(Model& model, const SplitDataset& data, const std::vector<SequenceExample>& split,
                       const std::vector<int>& ks, const std::vector<CohortKind>& cohorts, int threads) {
  EvalOptions opts;
  opts.ks = ks;
  opts.threads = threads;
  const std::vector<int> ranks =
      rank_targets(model_scorer(model), split, data.catalog, model.config().encoder.max_len, opts);
  const CohortMetrics all = metrics_from_ranks(ranks, ks);
  MetricsReport r;
  r.ks = ks;
  r.recall = all.recall;
  r.ndcg = all.ndcg;
  r.n_users = all.n_users;
  add_cohorts(r, ranks, data, split, cohorts);
  return r;
}

int cmd_train(Context& ctx, const std::string& out) {
  const SplitDataset data = load_data(ctx.cfg);
  const fs::path dir(out);
  TrainedRun run = train_run(ctx, data, Variant::kFull, dir);
  ctx.cfg.write_snapshot(dir / "config.resolved", "train");
  MetricsReport val = evaluate(*run.model, data, data.validation, {10, 20}, {}, run.train.eval_threads);
  val.seed = run.train.seed;
  val.config_hash = ctx.cfg.hash();
  nlohmann::json summary = {{"epochs_run", run.result.epochs_run},
                            {"best_epoch", run.result.best_epoch},
                            {"best_val_ndcg@20", run.result.best_val_ndcg20},
                            {"validation", val.to_json()}};
  write_json(dir / "summary.json", summary);
  std::vector<std::string> header{"split", "epochs", "best"};
  for (const std::string& h : metric_header(val.ks)) header.push_back(h);
  std::vector<std::string> row{"validation", std::to_string(run.result.epochs_run), std::to_string(run.result.best_epoch)};
  for (const std::string& c : metric_cells(val)) row.push_back(c);
  const std::string table = format_table(header, {row});
  write_text(dir / "summary.txt", table);
  ctx.out << table;
  return 0;
}

std::vector<int> parse_ks(const std::string& s) {
  std::vector<int> ks;
  for (const std::string& part : split_commas(s)) ks.push_back(static_cast<int>(parse_integer("--k", part)));
  if (ks.empty()) throw ConfigError("--k needs at least one cutoff");
  return ks;
}

std::vector<CohortKind> parse_cohorts(const std::string& s) {
  std::vector<CohortKind> out;
  for (const std::string& part : split_commas(s)) out.push_back(parse_cohort_kind(part));
  return out;
}

const std::vector<SequenceExample>& pick_split(const SplitDataset& data, const std::string& name) {
  if (name == "test") return data.test;
  if (name == "val" || name == "validation") return data.validation;
  throw ConfigError("--split must be test or val");
}

std::unique_ptr<Model> load_model_for(const std::string& path, const SplitDataset& data, Checkpoint* keep = nullptr) {
  if (path.empty()) throw ConfigError("--model is required");
  Checkpoint ckpt = load_checkpoint(path);
  if (!(ckpt.catalog == data.catalog)) throw CatalogError("checkpoint catalog does not match the data directory");
  auto model = restore_model(ckpt);
  if (keep) *keep = std::move(ckpt);
  return model;
}

int cmd_eval(Context& ctx, const std::string& model_path, const std::string& ks, const std::string& cohorts,
             const std::string& split, const std::string& out) {
  const SplitDataset data = load_data(ctx.cfg);
  Checkpoint ckpt;
  auto model = load_model_for(model_path, data, &ckpt);
  MetricsReport r = evaluate(*model, data, pick_split(data, split), parse_ks(ks), parse_cohorts(cohorts),
                             ctx.cfg.get_int("eval_threads"));
  r.seed = ckpt.train.seed;
  r.config_hash = ckpt.fingerprint;

  std::vector<std::string> header{"group", "users"};
  for (const std::string& h : metric_header(r.ks)) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> all{"all", std::to_string(r.n_users)};
  for (const std::string& c : metric_cells(r)) all.push_back(c);
  rows.push_back(all);
  for (const auto& [name, m] : r.cohorts) {
    std::vector<std::string> row{name, std::to_string(m.n_users)};
    for (int k : r.ks) row.push_back(fmt(m.recall.at(k)));
    for (int k : r.ks) row.push_back(fmt(m.ndcg.at(k)));
    rows.push_back(row);
  }
  const std::string table = format_table(header, rows);
  ctx.out << table;
  if (!out.empty()) {
    const fs::path dir(out);
    ensure_dir(dir);
    write_json(dir / "metrics.json", r.to_json());
    write_text(dir / "metrics.txt", table);
    ctx.cfg.write_snapshot(dir / "config.resolved", "eval");
  } else {
    ctx.out << r.to_json().dump(2) << '\n';
  }
  return 0;
}

nlohmann::json report_row(const std::string& label_key, const std::string& label, const MetricsReport& r) {
  nlohmann::json j = r.to_json();
  j.erase("cohorts");
  j[label_key] = label;
  return j;
}

int cmd_ablate(Context& ctx, const std::string& variant_name, const std::string& out) {
  const Variant variant = parse_variant(variant_name);
  const SplitDataset data = load_data(ctx.cfg);
  const fs::path dir(out);
  TrainedRun run = train_run(ctx, data, variant, dir);
  ctx.cfg.write_snapshot(dir / "config.resolved", "ablate --variant " + variant_name);
  MetricsReport r = evaluate(*run.model, data, data.test, {10, 20}, {}, run.train.eval_threads);
  r.seed = run.train.seed;
  r.config_hash = ctx.cfg.hash();
  std::vector<std::string> header{"variant"};
  for (const std::string& h : metric_header(r.ks)) header.push_back(h);
  std::vector<std::string> row{to_string(variant)};
  for (const std::string& c : metric_cells(r)) row.push_back(c);
  const std::string table = format_table(header, {row});
  write_text(dir / "ablation.txt", table);
  write_json(dir / "ablation.json", report_row("variant", to_string(variant), r));
  ctx.out << table;
  return 0;
}

int cmd_sweep(Context& ctx, const std::string& param, const std::string& values, const std::string& out) {
  static const std::map<std::string, std::string> key_of{{"alpha", "alpha"}, {"lambda", "lambda"}, {"c", "c"}, {"lr", "lr"}};
  auto it = key_of.find(param);
  if (it == key_of.end()) throw ConfigError("--param must be one of alpha|lambda|c|lr");
  const std::vector<std::string> grid = split_commas(values);
  if (grid.empty()) throw ConfigError("--values needs at least one value");
  for (const std::string& v : grid) parse_double(param, v);
  const SplitDataset data = load_data(ctx.cfg);
  const fs::path dir(out);
  ensure_dir(dir);
  ctx.cfg.write_snapshot(dir / "config.resolved", "sweep --param " + param + " --values " + values);

  std::vector<std::string> header{param};
  for (const std::string& h : metric_header({10, 20})) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  nlohmann::json arr = nlohmann::json::array();
  for (const std::string& v : grid) {
    Context run_ctx{ctx.cfg, ctx.out, ctx.err};
    run_ctx.cfg.set(it->second, v, RunConfig::Source::kFlag);
    const fs::path run_dir = dir / (param + "=" + v);
    TrainedRun run = train_run(run_ctx, data, Variant::kFull, run_dir);
    run_ctx.cfg.write_snapshot(run_dir / "config.resolved", "train");
    MetricsReport r = evaluate(*run.model, data, data.test, {10, 20}, {}, run.train.eval_threads);
    r.seed = run.train.seed;
    r.config_hash = run_ctx.cfg.hash();
    std::vector<std::string> row{v};
    for (const std::string& c : metric_cells(r)) row.push_back(c);
    rows.push_back(row);
    arr.push_back(report_row(param, v, r));
  }
  const std::string table = format_table(header, rows);
  write_text(dir / "sweep.txt", table);
  write_json(dir / "sweep.json", arr);
  ctx.out << table;
  return 0;
}

int cmd_robustness(Context& ctx, const std::string& model_path, const std::string& ratios, int n_seeds,
                   const std::string& out) {
  const SplitDataset data = load_data(ctx.cfg);
  auto model = load_model_for(model_path, data);
  std::vector<double> rs;
  for (const std::string& part : split_commas(ratios)) rs.push_back(parse_double("--ratios", part));
  if (rs.empty()) throw ConfigError("--ratios needs at least one value");
  if (n_seeds < 1) throw ConfigError("--seeds must be >= 1");
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < n_seeds; ++s) seeds.push_back(ctx.cfg.get_u64("seed") + static_cast<std::uint64_t>(s));
  EvalOptions opts;
  opts.threads = ctx.cfg.get_int("eval_threads");
  const auto curve =
      robustness_curve(model_scorer(*model), data.test, data.catalog, model->config().encoder.max_len, rs, seeds, opts);
  std::vector<std::vector<std::string>> rows;
  for (const RobustnessPoint& p : curve) {
    rows.push_back({fmt(p.ratio, 2), fmt(p.recall_mean.at(10)), fmt(p.recall_std.at(10)), fmt(p.recall_mean.at(20)),
                    fmt(p.recall_std.at(20)), fmt(p.ndcg_mean.at(10)), fmt(p.ndcg_std.at(10)), fmt(p.ndcg_mean.at(20)),
                    fmt(p.ndcg_std.at(20))});
  }
  const std::string table =
      format_table({"ratio", "R@10", "±", "R@20", "±", "N@10", "±", "N@20", "±"}, rows);
  const fs::path dir(out);
  ensure_dir(dir);
  write_text(dir / "robustness.txt", table);
  write_json(dir / "robustness.json", {{"seeds", seeds}, {"curve", robustness_json(curve)}});
  ctx.cfg.write_snapshot(dir / "config.resolved", "robustness");
  ctx.out << table;
  return 0;
}

int cmd_gradcheck(Context& ctx, double tolerance) {
  TinyFixture f = tiny_fixture(ctx.cfg.explicitly_set("init_seed") ? ctx.cfg.get_u64("init_seed") : 1);
  const ModelConfig mc = ctx.cfg.model_config(f.config, true);
  Model model(mc, f.catalog);
  const SequenceBatch batch = make_batch(f.examples, f.catalog, mc.encoder.max_len);
  std::vector<Parameter*> params = model.parameters();
  const double worst = grad_check([&](Tape& t) { return forward(t, model, batch).total; }, params, 1e-5);
  std::size_t entries = 0;
  for (const Parameter* p : params) entries += static_cast<std::size_t>(p->size());
  ctx.out << "parameters " << params.size() << " (" << entries << " entries), max relative error " << std::scientific
          << std::setprecision(3) << worst << ", tolerance " << tolerance << '\n'
          << std::defaultfloat;
  if (!(worst < tolerance)) throw NumericError("gradient check failed: " + std::to_string(worst));
  return 0;
}

int cmd_case_study(Context& ctx, const std::string& model_path, const std::string& user, const std::string& out) {
  const SplitDataset data = load_data(ctx.cfg);
  auto model = load_model_for(model_path, data);
  auto it = std::find(data.user_tokens.begin(), data.user_tokens.end(), user);
  if (it == data.user_tokens.end()) throw CatalogError("unknown user '" + user + "'");
  const int uid = static_cast<int>(it - data.user_tokens.begin());
  const auto ex = std::find_if(data.test.begin(), data.test.end(), [uid](const SequenceExample& e) { return e.user == uid; });
  if (ex == data.test.end()) throw CatalogError("user '" + user + "' has no test sequence");
  nlohmann::json j = export_attention(*model, ex->items, data);
  j["user"] = user;
  j["target"] = data.item_tokens[static_cast<std::size_t>(ex->target)];
  if (out.empty()) throw ConfigError("--out is required");
  const fs::path path(out);
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  write_json(path, j);
  fs::path snap = path;
  snap.replace_extension(".config.resolved");
  ctx.cfg.write_snapshot(snap, "case-study --user " + user);
  ctx.out << j.dump(2) << '\n';
  return 0;
}

int exit_code(ErrorClass c) {
  switch (c) {
    case ErrorClass::kUsage:
      return 1;
    case ErrorClass::kData:
      return 2;
    case ErrorClass::kNumeric:
      return 3;
  }
  return 1;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  tune_allocator();
  CLI::App app{"Frequency-filtered dual-fusion sequential recommender"};
  app.require_subcommand(1);

  std::string config_path;
  std::map<std::string, std::optional<std::string>> flags;
  for (const RunConfig::Key& k : RunConfig::keys()) flags[k.name];

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "flat key = value config file");
    for (const RunConfig::Key& k : RunConfig::keys()) {
      std::string names = "--" + k.name;
      std::string dashed = k.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != k.name) names += ",--" + dashed;
      sub->add_option(names, flags[k.name], k.help + " (default " + (k.default_value.empty() ? "none" : k.default_value) + ")");
    }
  };

  std::string out_path, model_path, ks = "10,20", cohorts, split = "test", variant, param, values, ratios = "0,0.05,0.1,0.15,0.2,0.25",
                                   preset = "rule", user;
  int seeds = 5;
  double tolerance = 1e-4;

  CLI::App* prepare = app.add_subcommand("prepare", "ingest, k-core filter and split interaction logs");
  add_common(prepare);
  prepare->add_option("--out", out_path, "output directory")->required();

  CLI::App* synth = app.add_subcommand("synth", "generate and prepare a synthetic dataset");
  add_common(synth);
  synth->add_option("--preset", preset, "generator preset (rule)");
  synth->add_option("--out", out_path, "output directory")->required();

  CLI::App* trainc = app.add_subcommand("train", "train a model");
  add_common(trainc);
  trainc->add_option("--out", out_path, "output directory")->required();

  CLI::App* eval = app.add_subcommand("eval", "full-ranking evaluation of a checkpoint");
  add_common(eval);
  eval->add_option("--model", model_path, "checkpoint path")->required();
  eval->add_option("--k", ks, "comma-separated cutoffs");
  eval->add_option("--cohorts", cohorts, "popularity,length");
  eval->add_option("--split", split, "test|val");
  eval->add_option("--out", out_path, "output directory (JSON to stdout if omitted)");

  CLI::App* ablate = app.add_subcommand("ablate", "train and test one ablation variant");
  add_common(ablate);
  ablate->add_option("--variant", variant, "full|no-fnf|no-if|no-af|no-ra")->required();
  ablate->add_option("--out", out_path, "output directory")->required();

  CLI::App* sweep = app.add_subcommand("sweep", "grid over one hyperparameter");
  add_common(sweep);
  sweep->add_option("--param", param, "alpha|lambda|c|lr")->required();
  sweep->add_option("--values", values, "comma-separated grid")->required();
  sweep->add_option("--out", out_path, "output directory")->required();

  CLI::App* robust = app.add_subcommand("robustness", "metrics under test-time item substitution");
  add_common(robust);
  robust->add_option("--model", model_path, "checkpoint path")->required();
  robust->add_option("--ratios", ratios, "comma-separated substitution ratios");
  robust->add_option("--seeds", seeds, "noise seeds per ratio (seed, seed+1, ...)");
  robust->add_option("--out", out_path, "output directory")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on the tiny fixture");
  add_common(gradcheck);
  gradcheck->add_option("--tolerance", tolerance, "maximum relative error");

  CLI::App* case_study = app.add_subcommand("case-study", "export attention weights for one user");
  add_common(case_study);
  case_study->add_option("--model", model_path, "checkpoint path")->required();
  case_study->add_option("--user", user, "user token")->required();
  case_study->add_option("--out", out_path, "output JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    Context ctx{RunConfig(), out, err};
    if (!config_path.empty()) ctx.cfg.load_file(config_path);
    for (const auto& [key, value] : flags) {
      if (value) ctx.cfg.set(key, *value, RunConfig::Source::kFlag);
    }
    if (*prepare) return cmd_prepare(ctx, out_path);
    if (*synth) return cmd_synth(ctx, preset, out_path);
    if (*trainc) return cmd_train(ctx, out_path);
    if (*eval) return cmd_eval(ctx, model_path, ks, cohorts, split, out_path);
    if (*ablate) return cmd_ablate(ctx, variant, out_path);
    if (*sweep) return cmd_sweep(ctx, param, values, out_path);
    if (*robust) return cmd_robustness(ctx, model_path, ratios, seeds, out_path);
    if (*gradcheck) return cmd_gradcheck(ctx, tolerance);
    if (*case_study) return cmd_case_study(ctx, model_path, user, out_path);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code(e.error_class());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}

}  // namespace diff
