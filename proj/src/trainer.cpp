#include "diff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "diff/errors.hpp"

namespace diff {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be >= 0");
  if (eval_threads < 1) throw ConfigError("eval_threads must be >= 1");
}

Adam::Adam(std::vector<Parameter*> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (Parameter* p : params_) {
    state_.m.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    state_.v.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++state_.step;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(state_.step));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(state_.step));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.frozen) continue;
    Matrix& m = state_.m[i];
    Matrix& v = state_.v[i];
    m = beta1_ * m + (1.0 - beta1_) * p.grad;
    v = beta2_ * v + (1.0 - beta2_) * p.grad.cwiseAbs2();
    p.value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    if (p.padding_row) p.value.row(0).setZero();
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->grad.setZero();
}

void Adam::set_state(AdamState s) {
  if (s.m.size() != params_.size() || s.v.size() != params_.size()) {
    throw ShapeError("optimizer state holds " + std::to_string(s.m.size()) + " moments for " +
                     std::to_string(params_.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (s.m[i].rows() != params_[i]->value.rows() || s.m[i].cols() != params_[i]->value.cols()) {
      throw ShapeError("optimizer moment for " + params_[i]->name + " is " + shape_of(s.m[i]));
    }
  }
  state_ = std::move(s);
}

nlohmann::json to_json(const ModelConfig& cfg) {
  const EncoderConfig& e = cfg.encoder;
  return {{"d", e.d},
          {"heads", e.heads},
          {"layers", e.layers},
          {"max_len", e.max_len},
          {"alpha", e.alpha},
          {"cutoff", e.cutoff},
          {"fusion", to_string(e.fusion)},
          {"dropout", e.dropout},
          {"causal", e.causal},
          {"ffn_inner", e.ffn_inner},
          {"ln_eps", e.ln_eps},
          {"filter_enabled", e.filter_enabled},
          {"use_id_block", e.use_id_block},
          {"use_attr_block", e.use_attr_block},
          {"lambda", cfg.lambda},
          {"align_normalize", cfg.align_normalize},
          {"init_seed", cfg.init_seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  EncoderConfig& e = cfg.encoder;
  e.d = j.at("d").get<int>();
  e.heads = j.at("heads").get<int>();
  e.layers = j.at("layers").get<int>();
  e.max_len = j.at("max_len").get<int>();
  e.alpha = j.at("alpha").get<double>();
  e.cutoff = j.at("cutoff").get<int>();
  e.fusion = parse_fusion_kind(j.at("fusion").get<std::string>());
  e.dropout = j.at("dropout").get<double>();
  e.causal = j.at("causal").get<bool>();
  e.ffn_inner = j.at("ffn_inner").get<int>();
  e.ln_eps = j.at("ln_eps").get<double>();
  e.filter_enabled = j.at("filter_enabled").get<bool>();
  e.use_id_block = j.at("use_id_block").get<bool>();
  e.use_attr_block = j.at("use_attr_block").get<bool>();
  cfg.lambda = j.at("lambda").get<double>();
  cfg.align_normalize = j.at("align_normalize").get<bool>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"learning_rate", cfg.learning_rate}, {"batch_size", cfg.batch_size}, {"max_epochs", cfg.max_epochs},
          {"patience", cfg.patience},           {"adam_beta1", cfg.adam_beta1}, {"adam_beta2", cfg.adam_beta2},
          {"adam_eps", cfg.adam_eps},           {"grad_clip", cfg.grad_clip},   {"seed", cfg.seed},
          {"eval_threads", cfg.eval_threads}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.patience = j.at("patience").get<int>();
  c.adam_beta1 = j.at("adam_beta1").get<double>();
  c.adam_beta2 = j.at("adam_beta2").get<double>();
  c.adam_eps = j.at("adam_eps").get<double>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.eval_threads = j.at("eval_threads").get<int>();
  return c;
}

std::string fingerprint(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace {

nlohmann::json beta_values(Model& model) {
  nlohmann::json j = nlohmann::json::object();
  for (LayerParams& l : model.encoder().layers()) {
    for (const Parameter& b : l.filter.betas) j[b.name] = b.value(0, 0);
  }
  return j;
}

void clip_gradients(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const double s = max_norm / norm;
  for (Parameter* p : params) p->grad *= s;
}

// Dropout stream for one (seed, epoch, batch).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

TrainResult train(Model& model, const SplitDataset& data, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (data.train.empty()) throw EmptySplitError("training split is empty");
  if (data.validation.empty()) throw EmptySplitError("validation split is empty");
  if (!(model.catalog() == data.catalog)) throw CatalogError("model catalog differs from the dataset catalog");

  const int n_len = model.config().encoder.max_len;
  std::vector<Parameter*> params = model.parameters();
  Adam adam(params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  adam.zero_grad();

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  std::vector<Matrix> best_values;
  int since_best = 0;
  EvalOptions eval_opts;
  eval_opts.threads = cfg.eval_threads;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double rec_sum = 0.0, align_sum = 0.0, total_sum = 0.0;
    int batches = 0;
    std::vector<SequenceExample> chunk;
    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      chunk.clear();
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(data.train[order[i]]);
      const SequenceBatch batch = make_batch(chunk, data.catalog, n_len);

      Tape tape(true, mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(batches)));
      const ForwardOutput out = forward(tape, model, batch);
      const double total = out.total.scalar();
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      }
      tape.backward(out.total);
      if (cfg.grad_clip > 0.0) clip_gradients(params, cfg.grad_clip);
      adam.step();
      adam.zero_grad();

      rec_sum += out.rec_loss.scalar();
      if (out.align_loss) align_sum += out.align_loss->scalar();
      total_sum += total;
      ++batches;
    }

    const MetricsReport val = full_rank_eval(model, data.validation, eval_opts);
    const double ndcg20 = val.ndcg.at(20);
    const bool improved = ndcg20 > result.best_val_ndcg20;
    if (improved) {
      result.best_val_ndcg20 = ndcg20;
      result.best_epoch = epoch;
      result.best_optimizer = adam.state();
      best_values.clear();
      for (const Parameter* p : params) best_values.push_back(p->value);
      since_best = 0;
    } else {
      ++since_best;
    }
    result.epochs_run = epoch;

    nlohmann::json line;
    line["epoch"] = epoch;
    line["rec_loss"] = rec_sum / batches;
    line["align_loss"] = align_sum / batches;
    line["total_loss"] = total_sum / batches;
    line["val"] = val.to_json();
    line["val"].erase("cohorts");
    line["val"].erase("seed");
    line["val"].erase("config_hash");
    line["betas"] = beta_values(model);
    line["tau"] = model.head().tau();
    line["best_epoch"] = result.best_epoch;
    result.log.push_back(line);
    if (log) *log << line.dump() << '\n' << std::flush;

    if (since_best >= cfg.patience) break;
  }

  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_values[i];
  return result;
}

namespace {

constexpr char kMagic[8] = {'D', 'I', 'F', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ParseError("checkpoint truncated while reading " + what);
  return v;
}

void put_matrix(std::ostream& out, const Matrix& m) {
  put<std::int64_t>(out, m.rows());
  put<std::int64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Matrix get_matrix(std::istream& in, const std::string& what) {
  const auto rows = get<std::int64_t>(in, what);
  const auto cols = get<std::int64_t>(in, what);
  if (rows < 0 || cols < 0 || rows * cols > (std::int64_t{1} << 32)) throw ParseError("checkpoint: bad shape for " + what);
  Matrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ParseError("checkpoint truncated while reading " + what);
  return m;
}

nlohmann::json catalog_json(const ItemCatalog& c) {
  return {{"n_items", c.n_items}, {"m", c.m}, {"attr_vocab_sizes", c.attr_vocab_sizes}, {"attrs", c.attrs}};
}

}  // namespace

Checkpoint make_checkpoint(Model& model, const TrainConfig& train, const TrainResult& result) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.catalog = model.catalog();
  c.epoch = result.best_epoch;
  c.best_val_ndcg20 = result.best_val_ndcg20;
  c.fingerprint = fingerprint({{"model", to_json(c.model)}, {"train", to_json(train)}});
  c.optimizer = result.best_optimizer;
  for (const Parameter* p : model.parameters()) c.values.emplace_back(p->name, p->value);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json header;
  header["model"] = to_json(ckpt.model);
  header["train"] = to_json(ckpt.train);
  header["catalog"] = catalog_json(ckpt.catalog);
  header["epoch"] = ckpt.epoch;
  header["best_val_ndcg20"] = ckpt.best_val_ndcg20;
  header["fingerprint"] = ckpt.fingerprint;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& [name, value] : ckpt.values) names.push_back(name);
  header["parameters"] = names;
  header["optimizer_step"] = ckpt.optimizer.step;
  header["has_optimizer"] = !ckpt.optimizer.m.empty();
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, value] : ckpt.values) put_matrix(out, value);
  for (std::size_t i = 0; i < ckpt.optimizer.m.size(); ++i) {
    put_matrix(out, ckpt.optimizer.m[i]);
    put_matrix(out, ckpt.optimizer.v[i]);
  }
  if (!out) throw ParseError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw ParseError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version));
  const auto len = get<std::uint64_t>(in, "header length");
  if (len > (std::uint64_t{1} << 30)) throw ParseError("checkpoint header too large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ParseError("checkpoint truncated in header");

  Checkpoint c;
  try {
    const nlohmann::json h = nlohmann::json::parse(text);
    c.model = model_config_from_json(h.at("model"));
    c.train = train_config_from_json(h.at("train"));
    const auto& cat = h.at("catalog");
    c.catalog.n_items = cat.at("n_items").get<int>();
    c.catalog.m = cat.at("m").get<int>();
    c.catalog.attr_vocab_sizes = cat.at("attr_vocab_sizes").get<std::vector<int>>();
    c.catalog.attrs = cat.at("attrs").get<std::vector<std::vector<int>>>();
    c.epoch = h.at("epoch").get<int>();
    c.best_val_ndcg20 = h.at("best_val_ndcg20").get<double>();
    c.fingerprint = h.at("fingerprint").get<std::string>();
    c.optimizer.step = h.at("optimizer_step").get<std::int64_t>();
    const auto names = h.at("parameters").get<std::vector<std::string>>();
    for (const std::string& name : names) c.values.emplace_back(name, get_matrix(in, name));
    if (h.at("has_optimizer").get<bool>()) {
      for (const std::string& name : names) {
        c.optimizer.m.push_back(get_matrix(in, name + " (first moment)"));
        c.optimizer.v.push_back(get_matrix(in, name + " (second moment)"));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint header: " + std::string(e.what()));
  }
  return c;
}

std::unique_ptr<Model> restore_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<Model>(ckpt.model, ckpt.catalog);
  std::vector<Parameter*> params = model->parameters();
  if (params.size() != ckpt.values.size()) {
    throw ParseError("checkpoint holds " + std::to_string(ckpt.values.size()) + " parameters, model has " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = ckpt.values[i];
    if (name != params[i]->name || value.rows() != params[i]->value.rows() || value.cols() != params[i]->value.cols()) {
      throw ParseError("checkpoint parameter " + name + " " + shape_of(value) + " does not match " + params[i]->name +
                       " " + shape_of(params[i]->value));
    }
    params[i]->value = value;
  }
  if (!ckpt.model.encoder.filter_enabled) {
    for (LayerParams& l : model->encoder().layers()) {
      for (Parameter& b : l.filter.betas) b.frozen = true;
    }
  }
  return model;
}

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "no-fnf") return Variant::kNoFnf;
  if (name == "no-if") return Variant::kNoIf;
  if (name == "no-af") return Variant::kNoAf;
  if (name == "no-ra") return Variant::kNoRa;
  throw ConfigError("unknown variant '" + name + "' (expected full|no-fnf|no-if|no-af|no-ra)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kNoFnf:
      return "no-fnf";
    case Variant::kNoIf:
      return "no-if";
    case Variant::kNoAf:
      return "no-af";
    case Variant::kNoRa:
      return "no-ra";
  }
  return "full";
}

ModelConfig apply_variant(Variant v, ModelConfig base) {
  switch (v) {
    case Variant::kFull:
      break;
    case Variant::kNoFnf:
      base.encoder.filter_enabled = false;
      break;
    case Variant::kNoIf:
      base.encoder.alpha = 0.0;
      base.encoder.use_id_block = false;
      break;
    case Variant::kNoAf:
      base.encoder.alpha = 1.0;
      base.encoder.use_attr_block = false;
      break;
    case Variant::kNoRa:
      base.lambda = 0.0;
      break;
  }
  return base;
}

std::unique_ptr<Model> build_variant(Variant v, const ModelConfig& base, const ItemCatalog& catalog) {
  auto model = std::make_unique<Model>(apply_variant(v, base), catalog);
  if (v == Variant::kNoFnf) {
    for (LayerParams& l : model->encoder().layers()) {
      for (Parameter& b : l.filter.betas) {
        b.value.setOnes();
        b.frozen = true;
      }
    }
  }
  return model;
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

}  // namespace diff
