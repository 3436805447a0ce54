#include "debias/preference.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

#include "debias/util.hpp"

namespace debias {

std::string_view to_string(CounterfactualKind kind) {
  switch (kind) {
    case CounterfactualKind::bias_kept_meaning_distorted: return "bias_kept_meaning_distorted";
    case CounterfactualKind::bias_removed_meaning_distorted:
      return "bias_removed_meaning_distorted";
    case CounterfactualKind::bias_kept_meaning_preserved: return "bias_kept_meaning_preserved";
  }
  return "?";
}

std::string_view roman(CounterfactualKind kind) {
  switch (kind) {
    case CounterfactualKind::bias_kept_meaning_distorted: return "i";
    case CounterfactualKind::bias_removed_meaning_distorted: return "ii";
    case CounterfactualKind::bias_kept_meaning_preserved: return "iii";
  }
  return "?";
}

CounterfactualKind parse_kind(std::string_view name) {
  for (auto k : kAllKinds) {
    if (name == to_string(k) || name == roman(k)) return k;
  }
  throw std::invalid_argument("unknown counterfactual kind '" + std::string(name) + "'");
}

bool requires_modification(CounterfactualKind kind) {
  return kind != CounterfactualKind::bias_kept_meaning_preserved;
}

std::vector<PreferencePair> parse_preferences(std::string_view content) {
  std::vector<PreferencePair> pairs;
  const auto lines = split_lines(content);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string where = "preferences line " + std::to_string(i + 1) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(where + "malformed JSON: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(where + "record must be an object");
    auto text = [&](const char* field) {
      auto it = j.find(field);
      if (it == j.end() || !it->is_string() || it->get<std::string>().empty()) {
        throw std::runtime_error(where + "field '" + field + "' must be a nonempty string");
      }
      return it->get<std::string>();
    };
    PreferencePair p;
    p.prompt = text("prompt");
    p.chosen = text("chosen");
    p.rejected = text("rejected");
    if (p.chosen == p.rejected) throw std::runtime_error(where + "chosen equals rejected");
    if (auto it = j.find("kind"); it != j.end() && !it->is_null()) {
      try {
        p.kind = parse_kind(it->get<std::string>());
      } catch (const std::exception& e) {
        throw std::runtime_error(where + e.what());
      }
    }
    if (auto it = j.find("source_id"); it != j.end() && it->is_string()) {
      p.source_id = it->get<std::string>();
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<PreferencePair> load_preferences(const std::filesystem::path& path) {
  return parse_preferences(read_file(path));
}

std::string serialize_preferences(const std::vector<PreferencePair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["prompt"] = p.prompt;
    j["chosen"] = p.chosen;
    j["rejected"] = p.rejected;
    j["kind"] = p.kind ? nlohmann::ordered_json(std::string(to_string(*p.kind))) : nlohmann::ordered_json(nullptr);
    j["source_id"] = p.source_id;
    out += j.dump();
    out += '\n';
  }
  return out;
}

void save_preferences(const std::vector<PreferencePair>& pairs, const std::filesystem::path& path) {
  write_file(path, serialize_preferences(pairs));
}

}  // namespace debias
