#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "diff/data_pipeline.hpp"
#include "diff/model.hpp"
#include "diff/trainer.hpp"

namespace diff {

/// Flat key = value configuration. Precedence: CLI flag > file > built-in default.
class RunConfig {
 public:
  enum class Source { kDefault, kFile, kFlag };

  struct Key {
    std::string name;
    std::string default_value;
    std::string help;
  };

  RunConfig();

  static const std::vector<Key>& keys();
  static bool known(const std::string& key);

  /// `#` starts a comment; blank lines are ignored. Unknown keys are rejected.
  void load_file(const std::filesystem::path& path);
  void set(const std::string& key, const std::string& value, Source source);

  const std::string& get(const std::string& key) const;
  Source source(const std::string& key) const;
  bool explicitly_set(const std::string& key) const { return source(key) != Source::kDefault; }
  double get_double(const std::string& key) const;
  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  /// Starts from `base` and overwrites every field (or only explicitly set ones).
  ModelConfig model_config(ModelConfig base = {}, bool only_explicit = false) const;
  TrainConfig train_config() const;
  SynthConfig synth_config() const;

  /// Loadable snapshot of every resolved value.
  std::string snapshot(const std::string& command) const;
  void write_snapshot(const std::filesystem::path& path, const std::string& command) const;
  /// Fingerprint of the resolved values.
  std::string hash() const;

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, Source> sources_;
};

/// Aligned plain-text table.
std::string format_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows);

/// Entry point of the command-line tool; returns the process exit code
/// (0 success, 1 usage or config error, 2 data error, 3 numeric error).
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace diff
