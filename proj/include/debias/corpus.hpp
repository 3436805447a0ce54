#pragma once

// Dataset records for the three subtasks (detection, classification,
// mitigation), their JSONL serialization, split-size validation and
// supplement merging.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace debias::corpus {

enum class Task { detect, classify, mitigate };

std::string_view to_string(Task task);
/// Accepts "detect", "classify", "mitigate".
Task parse_task(std::string_view name);

enum class SplitName { train, valid, test };

std::string_view to_string(SplitName split);
SplitName parse_split(std::string_view name);

inline constexpr std::array<SplitName, 3> kAllSplits{SplitName::train, SplitName::valid,
                                                     SplitName::test};

/// The three bias categories of the classification subtask, in canonical order.
enum class BiasLabel : std::uint8_t { AC = 0, DI = 1, ANB = 2 };

inline constexpr std::size_t kNumLabels = 3;
inline constexpr std::array<BiasLabel, kNumLabels> kAllLabels{BiasLabel::AC, BiasLabel::DI,
                                                              BiasLabel::ANB};

std::string_view label_code(BiasLabel label);
std::string_view label_name(BiasLabel label);
std::optional<BiasLabel> parse_label(std::string_view code);

/// Subset of {AC, DI, ANB}. Iteration and rendering follow canonical order.
class LabelSet {
 public:
  LabelSet() = default;
  LabelSet(std::initializer_list<BiasLabel> labels);

  void insert(BiasLabel label) { bits_ |= bit(label); }
  void erase(BiasLabel label) { bits_ &= static_cast<std::uint8_t>(~bit(label)); }
  bool contains(BiasLabel label) const { return (bits_ & bit(label)) != 0; }
  bool empty() const { return bits_ == 0; }
  std::size_t size() const;
  std::vector<BiasLabel> labels() const;
  std::vector<std::string> codes() const;
  /// "AC, DI" or "None".
  std::string to_string() const;

  friend bool operator==(const LabelSet&, const LabelSet&) = default;

 private:
  static std::uint8_t bit(BiasLabel label) {
    return static_cast<std::uint8_t>(1u << static_cast<unsigned>(label));
  }
  std::uint8_t bits_ = 0;
};

struct DetectionRecord {
  std::string id;
  std::string text;
  bool label = false;
  friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

struct ClassificationRecord {
  std::string id;
  std::string text;
  LabelSet labels;
  friend bool operator==(const ClassificationRecord&, const ClassificationRecord&) = default;
};

struct MitigationRecord {
  std::string id;
  std::string biased_text;
  std::string edited_text;
  friend bool operator==(const MitigationRecord&, const MitigationRecord&) = default;
};

/// Raised on malformed dataset input. `line` is 1-based, 0 when not line-specific.
class DatasetError : public std::runtime_error {
 public:
  DatasetError(std::size_t line, std::string field, const std::string& message);
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

/// An ordered list of records of a single kind.
class DatasetSplit {
 public:
  using Records = std::variant<std::vector<DetectionRecord>, std::vector<ClassificationRecord>,
                               std::vector<MitigationRecord>>;

  DatasetSplit(SplitName name, std::vector<DetectionRecord> records);
  DatasetSplit(SplitName name, std::vector<ClassificationRecord> records);
  DatasetSplit(SplitName name, std::vector<MitigationRecord> records);

  /// Empty split of the record kind matching `task`.
  static DatasetSplit empty(SplitName name, Task task);

  SplitName name() const { return name_; }
  Task task() const;
  std::size_t size() const;
  std::vector<std::string> ids() const;

  const std::vector<DetectionRecord>& detection() const;
  const std::vector<ClassificationRecord>& classification() const;
  const std::vector<MitigationRecord>& mitigation() const;
  const Records& records() const { return records_; }

 private:
  DatasetSplit(SplitName name, Records records);
  void check_unique_ids() const;

  SplitName name_;
  Records records_;
};

/// Parses JSONL content; one record per line, fields fixed per task.
DatasetSplit parse_dataset(std::string_view content, Task task,
                           SplitName split = SplitName::train);
DatasetSplit load_dataset(const std::filesystem::path& path, Task task,
                          SplitName split = SplitName::train);

std::string serialize_dataset(const DatasetSplit& split);
void save_dataset(const DatasetSplit& split, const std::filesystem::path& path);

/// Expected record counts keyed by (task, split).
using SplitManifest = std::map<std::pair<Task, SplitName>, std::size_t>;

/// Published sizes of the shared-task splits.
SplitManifest shared_task_manifest();
/// JSON object of the form {"detect": {"train": 12224, "valid": 1032, "test": 200}, ...}.
SplitManifest load_manifest(const std::filesystem::path& path);

struct SplitSizes {
  std::size_t train = 0;
  std::size_t valid = 0;
  std::size_t test = 0;
  std::size_t get(SplitName split) const;
};

struct SplitCountEntry {
  SplitName split;
  std::size_t actual = 0;
  std::optional<std::size_t> expected;
  bool mismatch = false;
};

struct SplitCountReport {
  Task task;
  std::vector<SplitCountEntry> entries;
  bool all_match() const;
  std::size_t mismatch_count() const;
  std::string to_string() const;
};

SplitCountReport validate_split_counts(const SplitSizes& sizes, Task task,
                                       const std::optional<SplitManifest>& manifest);

inline constexpr std::string_view kSupplementPrefix = "ext:";

/// Appends `supplement` to `base`, renaming supplement ids to prefix + id.
/// Throws DatasetError on kind mismatch or a residual id collision.
DatasetSplit merge_supplement(const DatasetSplit& base, const DatasetSplit& supplement,
                              std::string_view prefix = kSupplementPrefix);

/// Uniform random subset of `count` records (all when count >= size), original order kept.
DatasetSplit sample_records(const DatasetSplit& split, std::size_t count, std::uint64_t seed);

}  // namespace debias::corpus
