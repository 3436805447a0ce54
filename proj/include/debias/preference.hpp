#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace debias {

/// How a dispreferred rewrite departs from the original biased sentence.
enum class CounterfactualKind {
  bias_kept_meaning_distorted,     // (i)
  bias_removed_meaning_distorted,  // (ii)
  bias_kept_meaning_preserved,     // (iii)
};

inline constexpr std::array<CounterfactualKind, 3> kAllKinds{
    CounterfactualKind::bias_kept_meaning_distorted,
    CounterfactualKind::bias_removed_meaning_distorted,
    CounterfactualKind::bias_kept_meaning_preserved};

std::string_view to_string(CounterfactualKind kind);
/// Accepts the long names and the roman numerals "i", "ii", "iii".
CounterfactualKind parse_kind(std::string_view name);
std::string_view roman(CounterfactualKind kind);
/// Kinds (i) and (ii) must not return the original sentence unchanged.
bool requires_modification(CounterfactualKind kind);

/// (prompt, chosen, rejected); chosen is preferred over rejected.
struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;
  std::optional<CounterfactualKind> kind;
  std::string source_id;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// JSONL with fields `prompt`, `chosen`, `rejected`, `kind`, `source_id`.
/// `kind` and `source_id` are optional on input. Throws std::runtime_error with
/// the 1-based line number on malformed input or an invalid pair.
std::vector<PreferencePair> parse_preferences(std::string_view content);
std::vector<PreferencePair> load_preferences(const std::filesystem::path& path);
std::string serialize_preferences(const std::vector<PreferencePair>& pairs);
void save_preferences(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path);

}  // namespace debias
