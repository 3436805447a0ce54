#pragma once

// Preference-pair construction: a generator model writes dispreferred
// counterfactual rewrites of each biased sentence; the human edit is the
// preferred side.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "debias/corpus.hpp"
#include "debias/lmclient.hpp"
#include "debias/preference.hpp"
#include "debias/templates.hpp"

namespace debias::prefgen {

std::string render_counterfactual_prompt(const cot::TemplateSet& templates,
                                         const corpus::MitigationRecord& record,
                                         CounterfactualKind kind);

enum class RejectReason {
  empty_field,
  empty_generation,
  malformed_generation,
  degenerate_equal,
  unmodified_bias,
  length_outlier,
  backend_error,
};

std::string_view to_string(RejectReason reason);

inline constexpr double kDefaultLengthRatioCap = 5.0;

/// Returns nullopt when the pair is acceptable. Length ratio is measured in code
/// points, symmetric: max(len)/max(min(len), 1).
std::optional<RejectReason> validate_pair(const PreferencePair& pair, std::string_view biased_text,
                                          double length_ratio_cap = kDefaultLengthRatioCap);

struct BuildOptions {
  std::vector<CounterfactualKind> kinds{kAllKinds.begin(), kAllKinds.end()};
  int samples_per_kind = 1;
  double length_ratio_cap = kDefaultLengthRatioCap;
  std::string model_name = "gpt-4";
  double temperature = 0.7;
  int max_tokens = 256;
  /// Sent with each request; sample s of a (record, kind) uses seed + s. When
  /// unset and samples_per_kind > 1, s alone is sent so samples stay distinct.
  std::optional<std::uint64_t> seed;
  std::size_t max_inflight = 1;

  void validate() const;
};

struct GenerationEntry {
  std::string source_id;
  CounterfactualKind kind{};
  int sample = 0;
  std::optional<std::string> raw;  // absent on backend failure
  bool accepted = false;
  std::optional<RejectReason> reason;
  std::string error;
};

struct KindCounts {
  std::size_t generated = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
};

struct GenerationManifest {
  std::string generator;
  std::optional<std::uint64_t> seed;
  double temperature = 0.0;
  std::vector<GenerationEntry> entries;  // record order, then kind order, then sample
  std::array<KindCounts, 3> per_kind{};  // indexed like kAllKinds

  const KindCounts& counts(CounterfactualKind kind) const;
  KindCounts totals() const;
};

struct BuildResult {
  std::vector<PreferencePair> pairs;
  GenerationManifest manifest;
};

/// For each record x kind x sample: render, generate, validate. Accepted
/// candidates become pairs (prompt = rewrite instruction over biased_text,
/// chosen = edited_text, rejected = candidate). Backend failures are recorded
/// as rejections; the batch never aborts on them.
BuildResult build_preference_pairs(const corpus::DatasetSplit& split,
                                   const cot::TemplateSet& templates, client::ChatBackend& backend,
                                   const BuildOptions& options);

/// First line is a summary object ({"type":"summary",...}); each further line
/// is one generation ({"type":"generation",...}).
std::string serialize_manifest(const GenerationManifest& manifest);

}  // namespace debias::prefgen
