#pragma once

// Command layer: run configuration, evaluation reports and the subcommands of
// the `debias` tool. Everything here is usable in-process; the executable only
// parses arguments.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "debias/align.hpp"
#include "debias/cot.hpp"
#include "debias/corpus.hpp"
#include "debias/decode.hpp"
#include "debias/lmclient.hpp"
#include "debias/metrics.hpp"
#include "debias/prefgen.hpp"

namespace debias::app {

/// Bad configuration; reported with exit status 2 before any output is written.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sectioned key/value settings, e.g.
///
///   seed = 7
///   [dpo]
///   beta = 0.1
///
/// Keys are addressed as "section.key"; top-level keys live in section "run".
/// Unknown keys are rejected. Relative paths in [paths] resolve against the
/// directory of the file that set them (the working directory for overrides).
class RunConfig {
 public:
  RunConfig();

  static RunConfig load(const std::filesystem::path& file);
  /// Parses INI-style text; `base_dir` anchors relative paths.
  static RunConfig parse(const std::string& text, const std::filesystem::path& base_dir);

  /// "section.key=value"; throws ConfigError on unknown key or malformed input.
  void apply_override(const std::string& assignment);
  void set(const std::string& key, const std::string& value);

  const std::string& get(const std::string& key) const;
  std::string get_string(const std::string& key) const { return get(key); }
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  /// Empty value -> nullopt.
  std::optional<std::filesystem::path> get_path(const std::string& key) const;
  std::filesystem::path require_path(const std::string& key) const;
  std::filesystem::path require_existing(const std::string& key) const;

  std::uint64_t seed() const;
  corpus::Task task() const;

  /// Every key except paths.out with its resolved value, keys sorted, no whitespace.
  std::string canonical_json() const;
  /// First 16 hex digits of the SHA-256 of canonical_json().
  std::string fingerprint() const;

  align::DpoConfig dpo_config() const;
  align::SftConfig sft_config() const;
  align::RmConfig rm_config() const;
  decode::GuidedDecodeConfig decode_config() const;
  cot::PipelineOptions pipeline_options() const;
  prefgen::BuildOptions build_options() const;
  metrics::BleuConfig bleu_config() const;
  client::LiveConfig live_config() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  void set_from(const std::string& key, const std::string& value,
                const std::filesystem::path& base_dir);

  std::map<std::string, std::string> values_;
};

/// Keys accepted by RunConfig with their defaults.
const std::map<std::string, std::string>& default_settings();

struct ClassErrors {
  std::string code;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
};

using MetricBlock = std::variant<metrics::BinaryScore, metrics::MacroScore, metrics::BleuScore>;

struct EvalReport {
  corpus::Task task = corpus::Task::detect;
  MetricBlock metric;
  /// Same metric with flagged predictions left out; absent when nothing remains.
  std::optional<MetricBlock> metric_excluding_flagged;
  std::vector<ClassErrors> class_errors;
  std::size_t records = 0;
  std::size_t flagged = 0;
  std::string fingerprint;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  /// Canonical JSON text (sorted keys, trailing newline).
  std::string canonical() const;
  std::string to_text() const;
};

EvalReport eval_detect(const std::filesystem::path& predictions, const std::filesystem::path& gold);
EvalReport eval_classify(const std::filesystem::path& predictions,
                         const std::filesystem::path& gold);
/// Corpus BLEU over character tokens of (rewrite, edited_text).
EvalReport eval_mitigate(const std::filesystem::path& predictions,
                         const std::filesystem::path& gold, const metrics::BleuConfig& config);

/// Merges report JSON documents into one summary keyed by task.
nlohmann::json merge_reports(const std::vector<nlohmann::json>& reports,
                             const std::string& fingerprint, std::uint64_t seed);
std::string summary_text(const nlohmann::json& summary);

/// Subcommand names, in help order.
const std::vector<std::string>& command_names();

/// Runs one subcommand. Log lines go to `log`. Throws ConfigError for
/// configuration problems and other exceptions for domain failures.
void run_command(const std::string& name, const RunConfig& config, std::ostream& log);

/// Maps an exception escaping run_command to an exit status (1 or 2) and prints it.
int exit_status_for(const std::exception& e, std::ostream& err);

}  // namespace debias::app
