#include "debias/corpus.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "debias/util.hpp"

namespace debias::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Task task) {
  switch (task) {
    case Task::detect: return "detect";
    case Task::classify: return "classify";
    case Task::mitigate: return "mitigate";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  if (name == "detect") return Task::detect;
  if (name == "classify") return Task::classify;
  if (name == "mitigate") return Task::mitigate;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(SplitName split) {
  switch (split) {
    case SplitName::train: return "train";
    case SplitName::valid: return "valid";
    case SplitName::test: return "test";
  }
  return "?";
}

SplitName parse_split(std::string_view name) {
  if (name == "train") return SplitName::train;
  if (name == "valid") return SplitName::valid;
  if (name == "test") return SplitName::test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::string_view label_code(BiasLabel label) {
  switch (label) {
    case BiasLabel::AC: return "AC";
    case BiasLabel::DI: return "DI";
    case BiasLabel::ANB: return "ANB";
  }
  return "?";
}

std::string_view label_name(BiasLabel label) {
  switch (label) {
    case BiasLabel::AC: return "Activity and Career Choices";
    case BiasLabel::DI: return "Gender Stereotyped Descriptions and Inductions";
    case BiasLabel::ANB: return "Expressed Gender-stereotyped Attitudes, Norms and Beliefs";
  }
  return "?";
}

std::optional<BiasLabel> parse_label(std::string_view code) {
  for (BiasLabel l : kAllLabels) {
    if (label_code(l) == code) return l;
  }
  return std::nullopt;
}

LabelSet::LabelSet(std::initializer_list<BiasLabel> labels) {
  for (BiasLabel l : labels) insert(l);
}

std::size_t LabelSet::size() const {
  std::size_t n = 0;
  for (BiasLabel l : kAllLabels) n += contains(l) ? 1 : 0;
  return n;
}

std::vector<BiasLabel> LabelSet::labels() const {
  std::vector<BiasLabel> out;
  for (BiasLabel l : kAllLabels) {
    if (contains(l)) out.push_back(l);
  }
  return out;
}

std::vector<std::string> LabelSet::codes() const {
  std::vector<std::string> out;
  for (BiasLabel l : labels()) out.emplace_back(label_code(l));
  return out;
}

std::string LabelSet::to_string() const {
  if (empty()) return "None";
  std::string out;
  for (BiasLabel l : labels()) {
    if (!out.empty()) out += ", ";
    out += label_code(l);
  }
  return out;
}

DatasetError::DatasetError(std::size_t line, std::string field, const std::string& message)
    : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + message : message),
      line_(line),
      field_(std::move(field)) {}

DatasetSplit::DatasetSplit(SplitName name, Records records)
    : name_(name), records_(std::move(records)) {
  check_unique_ids();
}

DatasetSplit::DatasetSplit(SplitName name, std::vector<DetectionRecord> records)
    : DatasetSplit(name, Records(std::move(records))) {}
DatasetSplit::DatasetSplit(SplitName name, std::vector<ClassificationRecord> records)
    : DatasetSplit(name, Records(std::move(records))) {}
DatasetSplit::DatasetSplit(SplitName name, std::vector<MitigationRecord> records)
    : DatasetSplit(name, Records(std::move(records))) {}

DatasetSplit DatasetSplit::empty(SplitName name, Task task) {
  switch (task) {
    case Task::detect: return DatasetSplit(name, std::vector<DetectionRecord>{});
    case Task::classify: return DatasetSplit(name, std::vector<ClassificationRecord>{});
    case Task::mitigate: return DatasetSplit(name, std::vector<MitigationRecord>{});
  }
  throw std::invalid_argument("bad task");
}

Task DatasetSplit::task() const {
  return static_cast<Task>(records_.index());
}

std::size_t DatasetSplit::size() const {
  return std::visit([](const auto& v) { return v.size(); }, records_);
}

std::vector<std::string> DatasetSplit::ids() const {
  return std::visit(
      [](const auto& v) {
        std::vector<std::string> out;
        out.reserve(v.size());
        for (const auto& r : v) out.push_back(r.id);
        return out;
      },
      records_);
}

const std::vector<DetectionRecord>& DatasetSplit::detection() const {
  if (task() != Task::detect) throw std::logic_error("split does not hold detection records");
  return std::get<0>(records_);
}

const std::vector<ClassificationRecord>& DatasetSplit::classification() const {
  if (task() != Task::classify) {
    throw std::logic_error("split does not hold classification records");
  }
  return std::get<1>(records_);
}

const std::vector<MitigationRecord>& DatasetSplit::mitigation() const {
  if (task() != Task::mitigate) throw std::logic_error("split does not hold mitigation records");
  return std::get<2>(records_);
}

void DatasetSplit::check_unique_ids() const {
  std::unordered_map<std::string, std::size_t> seen;
  const auto all = ids();
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto [it, inserted] = seen.emplace(all[i], i + 1);
    if (!inserted) {
      throw DatasetError(i + 1, "id",
                         "duplicate id '" + all[i] + "' (first seen on line " +
                             std::to_string(it->second) + ", again on line " +
                             std::to_string(i + 1) + ")");
    }
  }
}

namespace {

std::string require_string(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw DatasetError(line, field, std::string("missing field '") + field + "'");
  if (!it->is_string()) {
    throw DatasetError(line, field, std::string("field '") + field + "' must be a string");
  }
  std::string value = it->get<std::string>();
  if (value.empty()) {
    throw DatasetError(line, field, std::string("field '") + field + "' must be nonempty");
  }
  return value;
}

bool require_bool(const json& obj, const char* field, std::size_t line) {
  auto it = obj.find(field);
  if (it == obj.end()) throw DatasetError(line, field, std::string("missing field '") + field + "'");
  if (!it->is_boolean()) {
    throw DatasetError(line, field, std::string("field '") + field + "' must be a boolean");
  }
  return it->get<bool>();
}

LabelSet require_labels(const json& obj, std::size_t line) {
  auto it = obj.find("labels");
  if (it == obj.end()) throw DatasetError(line, "labels", "missing field 'labels'");
  if (!it->is_array()) throw DatasetError(line, "labels", "field 'labels' must be an array");
  LabelSet set;
  for (const auto& item : *it) {
    if (!item.is_string()) throw DatasetError(line, "labels", "label codes must be strings");
    const auto code = item.get<std::string>();
    const auto label = parse_label(code);
    if (!label) throw DatasetError(line, "labels", "unknown label code '" + code + "'");
    if (set.contains(*label)) throw DatasetError(line, "labels", "duplicate label '" + code + "'");
    set.insert(*label);
  }
  return set;
}

template <class Record>
Record parse_record(const json& obj, std::size_t line);

template <>
DetectionRecord parse_record<DetectionRecord>(const json& obj, std::size_t line) {
  return {require_string(obj, "id", line), require_string(obj, "text", line),
          require_bool(obj, "label", line)};
}

template <>
ClassificationRecord parse_record<ClassificationRecord>(const json& obj, std::size_t line) {
  return {require_string(obj, "id", line), require_string(obj, "text", line),
          require_labels(obj, line)};
}

template <>
MitigationRecord parse_record<MitigationRecord>(const json& obj, std::size_t line) {
  MitigationRecord r{require_string(obj, "id", line), require_string(obj, "biased_text", line),
                     require_string(obj, "edited_text", line)};
  if (r.biased_text == r.edited_text) {
    throw DatasetError(line, "edited_text", "edited_text must differ from biased_text");
  }
  return r;
}

template <class Record>
std::vector<Record> parse_lines(const std::vector<std::string>& lines) {
  std::vector<Record> records;
  records.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t line = i + 1;
    json obj;
    try {
      obj = json::parse(lines[i]);
    } catch (const json::parse_error& e) {
      throw DatasetError(line, "", std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw DatasetError(line, "", "record must be a JSON object");
    records.push_back(parse_record<Record>(obj, line));
  }
  return records;
}

ordered_json to_json(const DetectionRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["text"] = r.text;
  j["label"] = r.label;
  return j;
}

ordered_json to_json(const ClassificationRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["text"] = r.text;
  j["labels"] = r.labels.codes();
  return j;
}

ordered_json to_json(const MitigationRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["biased_text"] = r.biased_text;
  j["edited_text"] = r.edited_text;
  return j;
}

}  // namespace

DatasetSplit parse_dataset(std::string_view content, Task task, SplitName split) {
  const auto lines = split_lines(content);
  switch (task) {
    case Task::detect: return DatasetSplit(split, parse_lines<DetectionRecord>(lines));
    case Task::classify: return DatasetSplit(split, parse_lines<ClassificationRecord>(lines));
    case Task::mitigate: return DatasetSplit(split, parse_lines<MitigationRecord>(lines));
  }
  throw std::invalid_argument("bad task");
}

DatasetSplit load_dataset(const std::filesystem::path& path, Task task, SplitName split) {
  if (!std::filesystem::exists(path)) {
    throw DatasetError(0, "", "dataset file not found: " + path.string());
  }
  return parse_dataset(read_file(path), task, split);
}

std::string serialize_dataset(const DatasetSplit& split) {
  std::string out;
  std::visit(
      [&](const auto& records) {
        for (const auto& r : records) {
          out += to_json(r).dump();
          out += '\n';
        }
      },
      split.records());
  return out;
}

void save_dataset(const DatasetSplit& split, const std::filesystem::path& path) {
  write_file(path, serialize_dataset(split));
}

SplitManifest shared_task_manifest() {
  return {
      {{Task::detect, SplitName::train}, 12224},  {{Task::detect, SplitName::valid}, 1032},
      {{Task::detect, SplitName::test}, 200},     {{Task::classify, SplitName::train}, 4872},
      {{Task::classify, SplitName::valid}, 516},  {{Task::classify, SplitName::test}, 200},
      {{Task::mitigate, SplitName::train}, 3672}, {{Task::mitigate, SplitName::valid}, 516},
      {{Task::mitigate, SplitName::test}, 200},
  };
}

SplitManifest load_manifest(const std::filesystem::path& path) {
  const json doc = json::parse(read_file(path));
  if (!doc.is_object()) throw DatasetError(0, "", "manifest must be a JSON object");
  SplitManifest manifest;
  for (const auto& [task_name, splits] : doc.items()) {
    const Task task = parse_task(task_name);
    if (!splits.is_object()) throw DatasetError(0, task_name, "manifest entry must be an object");
    for (const auto& [split_name, count] : splits.items()) {
      if (!count.is_number_unsigned()) {
        throw DatasetError(0, split_name, "manifest count must be a nonnegative integer");
      }
      manifest[{task, parse_split(split_name)}] = count.get<std::size_t>();
    }
  }
  return manifest;
}

std::size_t SplitSizes::get(SplitName split) const {
  switch (split) {
    case SplitName::train: return train;
    case SplitName::valid: return valid;
    case SplitName::test: return test;
  }
  return 0;
}

bool SplitCountReport::all_match() const { return mismatch_count() == 0; }

std::size_t SplitCountReport::mismatch_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.mismatch; }));
}

std::string SplitCountReport::to_string() const {
  std::ostringstream os;
  os << "task " << corpus::to_string(task) << '\n';
  for (const auto& e : entries) {
    os << "  " << corpus::to_string(e.split) << ": actual " << e.actual;
    if (e.expected) os << ", expected " << *e.expected;
    os << (e.mismatch ? "  MISMATCH" : "  ok") << '\n';
  }
  return os.str();
}

SplitCountReport validate_split_counts(const SplitSizes& sizes, Task task,
                                       const std::optional<SplitManifest>& manifest) {
  SplitCountReport report{task, {}};
  for (SplitName split : kAllSplits) {
    SplitCountEntry entry{split, sizes.get(split), std::nullopt, false};
    if (manifest) {
      if (auto it = manifest->find({task, split}); it != manifest->end()) {
        entry.expected = it->second;
        entry.mismatch = it->second != entry.actual;
      }
    }
    report.entries.push_back(entry);
  }
  return report;
}

DatasetSplit merge_supplement(const DatasetSplit& base, const DatasetSplit& supplement,
                              std::string_view prefix) {
  if (base.task() != supplement.task()) {
    throw DatasetError(0, "", "cannot merge " + std::string(to_string(supplement.task())) +
                                  " records into a " + std::string(to_string(base.task())) +
                                  " split");
  }
  return std::visit(
      [&](const auto& base_records) -> DatasetSplit {
        using Vec = std::decay_t<decltype(base_records)>;
        Vec merged = base_records;
        for (auto r : std::get<Vec>(supplement.records())) {
          r.id = std::string(prefix) + r.id;
          merged.push_back(std::move(r));
        }
        return DatasetSplit(base.name(), std::move(merged));
      },
      base.records());
}

DatasetSplit sample_records(const DatasetSplit& split, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(std::min(count, order.size()));
  std::sort(order.begin(), order.end());
  return std::visit(
      [&](const auto& records) -> DatasetSplit {
        std::decay_t<decltype(records)> picked;
        for (std::size_t i : order) picked.push_back(records[i]);
        return DatasetSplit(split.name(), std::move(picked));
      },
      split.records());
}

}  // namespace debias::corpus
