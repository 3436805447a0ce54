#include "debias/app.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "debias/preference.hpp"
#include "debias/toylm.hpp"
#include "debias/util.hpp"

namespace debias::app {

namespace fs = std::filesystem;
using nlohmann::json;

const std::map<std::string, std::string>& default_settings() {
  static const std::map<std::string, std::string> defaults{
      {"run.seed", "42"},
      {"run.task", "mitigate"},
      {"paths.data", ""},
      {"paths.gold", ""},
      {"paths.predictions", ""},
      {"paths.preferences", ""},
      {"paths.templates", ""},
      {"paths.replay", ""},
      {"paths.out", ""},
      {"paths.policy", ""},
      {"paths.reward", ""},
      {"paths.manifest", ""},
      {"paths.reports", ""},
      {"paths.train", ""},
      {"paths.valid", ""},
      {"paths.test", ""},
      {"paths.supplement", ""},
      {"dpo.beta", "0.1"},
      {"dpo.lr", "8e-6"},
      {"dpo.epochs", "2"},
      {"dpo.batch_size", "1"},
      {"dpo.max_grad_norm", "0.3"},
      {"dpo.warmup_ratio", "0.03"},
      {"dpo.init", "random"},
      {"dpo.init_scale", "0.5"},
      {"sft.lr", "1e-5"},
      {"sft.epochs", "2"},
      {"sft.batch_size", "1"},
      {"sft.max_grad_norm", "0.3"},
      {"sft.warmup_ratio", "0.03"},
      {"rm.lr", "8e-6"},
      {"rm.epochs", "2"},
      {"rm.batch_size", "1"},
      {"rm.max_grad_norm", "0.3"},
      {"rm.warmup_ratio", "0.03"},
      {"rm.init_scale", "1.0"},
      {"decode.weight", "1.0"},
      {"decode.top_k", "10"},
      {"decode.max_len", "64"},
      {"decode.mode", "greedy"},
      {"decode.base_scale", "log"},
      {"decode.trace", "false"},
      {"client.backend", "replay"},
      {"client.base_url", ""},
      {"client.model_name", "gpt-4"},
      {"client.max_inflight", "1"},
      {"client.api_key_env", "DEBIAS_API_KEY"},
      {"client.temperature", "0"},
      {"client.max_tokens", "1024"},
      {"client.retries", "3"},
      {"client.timeout_s", "120"},
      {"client.force", "false"},
      {"cot.retry_budget", "2"},
      {"prefgen.kinds", "i,ii,iii"},
      {"prefgen.samples_per_kind", "1"},
      {"prefgen.length_ratio_cap", "5"},
      {"prefgen.temperature", "0.7"},
      {"prefgen.max_tokens", "256"},
      {"bleu.max_n", "4"},
      {"bleu.smoothing", "add_one"},
      {"ingest.sample", "0"},
      {"ingest.strict", "false"},
  };
  return defaults;
}

namespace {

std::string strip_quotes(std::string v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) {
    return v.substr(1, v.size() - 2);
  }
  return v;
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    if (comma == std::string_view::npos) comma = text.size();
    const auto item = trim(text.substr(start, comma - start));
    if (!item.empty()) out.emplace_back(item);
    start = comma + 1;
  }
  return out;
}

}  // namespace

RunConfig::RunConfig() : values_(default_settings()) {}

void RunConfig::set_from(const std::string& key, const std::string& value,
                         const fs::path& base_dir) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + key + "'");
  std::string v = strip_quotes(std::string(trim(value)));
  if (starts_with(key, "paths.") && !v.empty()) {
    if (key == "paths.reports") {
      std::string joined;
      for (const auto& item : split_list(v)) {
        fs::path p(item);
        if (p.is_relative()) p = base_dir / p;
        if (!joined.empty()) joined += ",";
        joined += p.lexically_normal().string();
      }
      v = joined;
    } else {
      fs::path p(v);
      if (p.is_relative()) p = base_dir / p;
      v = p.lexically_normal().string();
    }
  }
  it->second = v;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  set_from(key, value, fs::current_path());
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  }
  std::string key(trim(std::string_view(assignment).substr(0, eq)));
  if (key.find('.') == std::string::npos) key = "run." + key;
  set(key, assignment.substr(eq + 1));
}

RunConfig RunConfig::parse(const std::string& text, const fs::path& base_dir) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig config;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      config.set_from("run." + name, node.data(), base_dir);
      continue;
    }
    for (const auto& [key, leaf] : node) {
      if (!leaf.empty()) throw ConfigError("nested section under [" + name + "]");
      config.set_from(name + "." + key, leaf.data(), base_dir);
    }
  }
  return config;
}

RunConfig RunConfig::load(const fs::path& file) {
  if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
  const fs::path dir = fs::absolute(file).parent_path();
  return parse(read_file(file), dir);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown setting '" + key + "'");
  return it->second;
}

double RunConfig::get_double(const std::string& key) const {
  const auto& v = get(key);
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

long long RunConfig::get_int(const std::string& key) const {
  const auto& v = get(key);
  try {
    std::size_t used = 0;
    const long long n = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing text");
    return n;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected an integer, got '" + v + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::optional<fs::path> RunConfig::get_path(const std::string& key) const {
  const auto& v = get(key);
  if (v.empty()) return std::nullopt;
  return fs::path(v);
}

fs::path RunConfig::require_path(const std::string& key) const {
  auto p = get_path(key);
  if (!p) throw ConfigError("setting '" + key + "' is required");
  return *p;
}

fs::path RunConfig::require_existing(const std::string& key) const {
  auto p = require_path(key);
  if (!fs::exists(p)) throw ConfigError(key + ": path does not exist: " + p.string());
  return p;
}

std::uint64_t RunConfig::seed() const {
  const auto s = get_int("run.seed");
  if (s < 0) throw ConfigError("run.seed must be >= 0");
  return static_cast<std::uint64_t>(s);
}

corpus::Task RunConfig::task() const {
  try {
    return corpus::parse_task(get("run.task"));
  } catch (const std::exception& e) {
    throw ConfigError(std::string("run.task: ") + e.what());
  }
}

std::string RunConfig::canonical_json() const {
  auto v = values_;
  v.erase("paths.out");  // where results go does not change what they are
  return json(v).dump();
}

std::string RunConfig::fingerprint() const { return sha256_hex(canonical_json()).substr(0, 16); }

namespace {

std::size_t positive_size(const RunConfig& c, const std::string& key) {
  const auto n = c.get_int(key);
  if (n < 1) throw ConfigError(key + " must be >= 1");
  return static_cast<std::size_t>(n);
}

align::OptimizerConfig optimizer(const RunConfig& c, const std::string& section) {
  align::OptimizerConfig o;
  o.learning_rate = c.get_double(section + ".lr");
  o.epochs = static_cast<int>(c.get_int(section + ".epochs"));
  o.batch_size = positive_size(c, section + ".batch_size");
  o.max_grad_norm = c.get_double(section + ".max_grad_norm");
  o.warmup_ratio = c.get_double(section + ".warmup_ratio");
  o.seed = c.seed();
  try {
    o.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("[" + section + "] " + e.what());
  }
  return o;
}

template <class F>
auto config_guard(const std::string& section, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("[" + section + "] " + e.what());
  }
}

}  // namespace

align::DpoConfig RunConfig::dpo_config() const {
  align::DpoConfig d;
  d.beta = get_double("dpo.beta");
  d.optim = optimizer(*this, "dpo");
  config_guard("dpo", [&] { d.validate(); return 0; });
  return d;
}

align::SftConfig RunConfig::sft_config() const {
  align::SftConfig s;
  s.optim = optimizer(*this, "sft");
  return s;
}

align::RmConfig RunConfig::rm_config() const {
  align::RmConfig r;
  r.optim = optimizer(*this, "rm");
  r.init_scale = get_double("rm.init_scale");
  if (!(r.init_scale > 0)) throw ConfigError("rm.init_scale must be > 0");
  return r;
}

decode::GuidedDecodeConfig RunConfig::decode_config() const {
  decode::GuidedDecodeConfig d;
  d.weight = get_double("decode.weight");
  const auto& k = get("decode.top_k");
  if (k == "all" || k == "none") {
    d.top_k.reset();
  } else {
    d.top_k = positive_size(*this, "decode.top_k");
  }
  d.max_len = positive_size(*this, "decode.max_len");
  const auto& mode = get("decode.mode");
  if (mode == "greedy") d.mode = lm::DecodeMode::greedy;
  else if (mode == "sample") d.mode = lm::DecodeMode::sample;
  else throw ConfigError("decode.mode must be greedy or sample, got '" + mode + "'");
  d.seed = seed();
  d.base_scale = config_guard("decode", [&] { return decode::parse_base_scale(get("decode.base_scale")); });
  config_guard("decode", [&] { d.validate(); return 0; });
  return d;
}

cot::PipelineOptions RunConfig::pipeline_options() const {
  cot::PipelineOptions p;
  p.model_name = get("client.model_name");
  p.temperature = get_double("client.temperature");
  p.max_tokens = static_cast<int>(positive_size(*this, "client.max_tokens"));
  p.retry_budget = static_cast<int>(get_int("cot.retry_budget"));
  if (p.retry_budget < 0) throw ConfigError("cot.retry_budget must be >= 0");
  p.max_inflight = positive_size(*this, "client.max_inflight");
  if (!(p.temperature >= 0)) throw ConfigError("client.temperature must be >= 0");
  return p;
}

prefgen::BuildOptions RunConfig::build_options() const {
  prefgen::BuildOptions b;
  b.kinds.clear();
  for (const auto& name : split_list(get("prefgen.kinds"))) {
    b.kinds.push_back(config_guard("prefgen", [&] { return parse_kind(name); }));
  }
  b.samples_per_kind = static_cast<int>(get_int("prefgen.samples_per_kind"));
  b.length_ratio_cap = get_double("prefgen.length_ratio_cap");
  b.model_name = get("client.model_name");
  b.temperature = get_double("prefgen.temperature");
  b.max_tokens = static_cast<int>(get_int("prefgen.max_tokens"));
  b.seed = seed();
  b.max_inflight = positive_size(*this, "client.max_inflight");
  config_guard("prefgen", [&] { b.validate(); return 0; });
  return b;
}

metrics::BleuConfig RunConfig::bleu_config() const {
  metrics::BleuConfig b;
  b.max_n = static_cast<int>(positive_size(*this, "bleu.max_n"));
  b.smoothing = config_guard("bleu", [&] { return metrics::parse_smoothing(get("bleu.smoothing")); });
  return b;
}

client::LiveConfig RunConfig::live_config() const {
  client::LiveConfig l;
  l.base_url = get("client.base_url");
  if (l.base_url.empty()) throw ConfigError("client.base_url is required for the live backend");
  l.api_key_env = get("client.api_key_env");
  l.max_retries = static_cast<int>(get_int("client.retries"));
  if (l.max_retries < 0) throw ConfigError("client.retries must be >= 0");
  l.timeout = std::chrono::seconds(positive_size(*this, "client.timeout_s"));
  l.max_inflight = positive_size(*this, "client.max_inflight");
  return l;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

json binary_json(const metrics::BinaryScore& s) {
  return {{"precision", s.precision}, {"recall", s.recall},  {"f1", s.f1},
          {"tp", s.counts.tp},        {"fp", s.counts.fp},   {"fn", s.counts.fn},
          {"tn", s.counts.tn}};
}

json metric_json(const MetricBlock& m) {
  return std::visit(
      [](const auto& s) -> json {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, metrics::BinaryScore>) {
          json j = binary_json(s);
          j["type"] = "binary_f1";
          return j;
        } else if constexpr (std::is_same_v<S, metrics::MacroScore>) {
          json per = json::array();
          for (const auto& c : s.per_class) {
            json cj = binary_json(c.score);
            cj["code"] = c.code;
            cj["gold_support"] = c.gold_support;
            cj["pred_support"] = c.pred_support;
            cj["degenerate"] = c.degenerate;
            per.push_back(std::move(cj));
          }
          return {{"type", "macro_f1"}, {"macro_f1", s.macro_f1}, {"per_class", std::move(per)}};
        } else {
          return {{"type", "bleu"},
                  {"score", s.score},
                  {"ngram_precisions", s.ngram_precisions},
                  {"brevity_penalty", s.brevity_penalty},
                  {"hyp_len", s.hyp_len},
                  {"ref_len", s.ref_len}};
        }
      },
      m);
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string headline(const json& metric) {
  const auto type = metric.at("type").get<std::string>();
  if (type == "binary_f1") {
    return "F1 " + fixed(metric.at("f1").get<double>()) + " (P " +
           fixed(metric.at("precision").get<double>()) + ", R " +
           fixed(metric.at("recall").get<double>()) + ")";
  }
  if (type == "macro_f1") return "Macro-F1 " + fixed(metric.at("macro_f1").get<double>());
  return "BLEU " + fixed(metric.at("score").get<double>()) + " (BP " +
         fixed(metric.at("brevity_penalty").get<double>()) + ")";
}

struct PredictionLine {
  json body;
  bool flagged = false;
  std::size_t line = 0;
};

// Reads predictions keyed by id and returns them in gold order.
std::vector<PredictionLine> aligned_predictions(const fs::path& path,
                                                const std::vector<std::string>& gold_ids) {
  std::map<std::string, PredictionLine> by_id;
  const auto lines = split_lines(read_file(path));
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    json j;
    try {
      j = json::parse(lines[i]);
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + " line " + std::to_string(i + 1) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
      throw std::runtime_error(path.string() + " line " + std::to_string(i + 1) +
                               ": prediction needs a string id");
    }
    const auto id = j["id"].get<std::string>();
    PredictionLine p{j, j.value("flagged", false), i + 1};
    if (!by_id.emplace(id, std::move(p)).second) {
      throw std::runtime_error(path.string() + " line " + std::to_string(i + 1) +
                               ": duplicate prediction id '" + id + "'");
    }
  }
  std::vector<std::string> missing;
  std::vector<PredictionLine> out;
  out.reserve(gold_ids.size());
  std::set<std::string> gold_set(gold_ids.begin(), gold_ids.end());
  for (const auto& id : gold_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      missing.push_back(id);
      continue;
    }
    out.push_back(it->second);
  }
  std::vector<std::string> extra;
  for (const auto& [id, p] : by_id) {
    if (!gold_set.contains(id)) extra.push_back(id);
  }
  if (!missing.empty() || !extra.empty()) {
    auto list = [](const std::vector<std::string>& ids) {
      std::string s;
      for (std::size_t i = 0; i < ids.size() && i < 20; ++i) s += (i ? ", " : "") + ids[i];
      if (ids.size() > 20) s += ", ... (" + std::to_string(ids.size()) + " total)";
      return s;
    };
    std::string msg = "prediction ids do not match gold ids";
    if (!missing.empty()) msg += "; missing predictions for: " + list(missing);
    if (!extra.empty()) msg += "; predictions without gold: " + list(extra);
    throw std::runtime_error(msg);
  }
  return out;
}

template <class T>
T field(const PredictionLine& p, const char* name) {
  auto it = p.body.find(name);
  if (it == p.body.end()) {
    throw std::runtime_error("prediction line " + std::to_string(p.line) + " lacks '" + name + "'");
  }
  try {
    return it->template get<T>();
  } catch (const json::exception&) {
    throw std::runtime_error("prediction line " + std::to_string(p.line) + ": bad '" + name + "'");
  }
}

void count_flagged(EvalReport& r, const std::vector<PredictionLine>& preds) {
  r.records = preds.size();
  r.flagged = static_cast<std::size_t>(
      std::count_if(preds.begin(), preds.end(), [](const auto& p) { return p.flagged; }));
}

}  // namespace

json EvalReport::to_json() const {
  json j;
  j["task"] = corpus::to_string(task);
  j["metric"] = metric_json(metric);
  j["metric_excluding_flagged"] =
      metric_excluding_flagged ? metric_json(*metric_excluding_flagged) : json(nullptr);
  json errors = json::array();
  for (const auto& e : class_errors) {
    errors.push_back({{"code", e.code},
                      {"false_positives", e.false_positives},
                      {"false_negatives", e.false_negatives}});
  }
  j["class_errors"] = std::move(errors);
  j["records"] = records;
  j["flagged"] = flagged;
  j["fingerprint"] = fingerprint;
  j["seed"] = seed;
  return j;
}

std::string EvalReport::canonical() const { return to_json().dump() + "\n"; }

std::string EvalReport::to_text() const {
  const json j = to_json();
  std::string out;
  out += "task: " + std::string(corpus::to_string(task)) + "\n";
  out += "records: " + std::to_string(records) + " (flagged " + std::to_string(flagged) + ")\n";
  out += "metric: " + headline(j["metric"]) + "\n";
  out += "metric excluding flagged: " +
         (metric_excluding_flagged ? headline(j["metric_excluding_flagged"]) : std::string("n/a")) +
         "\n";
  if (const auto* macro = std::get_if<metrics::MacroScore>(&metric)) {
    for (const auto& c : macro->per_class) {
      out += "  " + c.code + ": F1 " + fixed(c.score.f1) + (c.degenerate ? " (degenerate)" : "") +
             "\n";
    }
  }
  for (const auto& e : class_errors) {
    out += "errors " + e.code + ": fp " + std::to_string(e.false_positives) + ", fn " +
           std::to_string(e.false_negatives) + "\n";
  }
  out += "fingerprint: " + fingerprint + "\n";
  out += "seed: " + std::to_string(seed) + "\n";
  return out;
}

EvalReport eval_detect(const fs::path& predictions, const fs::path& gold) {
  const auto split = corpus::load_dataset(gold, corpus::Task::detect, corpus::SplitName::test);
  const auto preds = aligned_predictions(predictions, split.ids());
  EvalReport r;
  r.task = corpus::Task::detect;
  count_flagged(r, preds);
  std::vector<bool> p;
  std::vector<bool> g;
  std::vector<bool> p_kept;
  std::vector<bool> g_kept;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool label = field<bool>(preds[i], "label");
    p.push_back(label);
    g.push_back(split.detection()[i].label);
    if (!preds[i].flagged) {
      p_kept.push_back(label);
      g_kept.push_back(split.detection()[i].label);
    }
  }
  if (g.empty()) throw std::runtime_error("gold file has no records");
  const auto score = metrics::binary_f1(p, g);
  r.metric = score;
  if (!g_kept.empty()) r.metric_excluding_flagged = metrics::binary_f1(p_kept, g_kept);
  r.class_errors.push_back({"biased", score.counts.fp, score.counts.fn});
  return r;
}

EvalReport eval_classify(const fs::path& predictions, const fs::path& gold) {
  const auto split = corpus::load_dataset(gold, corpus::Task::classify, corpus::SplitName::test);
  const auto preds = aligned_predictions(predictions, split.ids());
  EvalReport r;
  r.task = corpus::Task::classify;
  count_flagged(r, preds);
  std::vector<std::string> classes;
  for (auto l : corpus::kAllLabels) classes.emplace_back(corpus::label_code(l));
  std::vector<metrics::LabelCodes> p;
  std::vector<metrics::LabelCodes> g;
  std::vector<metrics::LabelCodes> p_kept;
  std::vector<metrics::LabelCodes> g_kept;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto codes = field<std::vector<std::string>>(preds[i], "labels");
    metrics::LabelCodes pred(codes.begin(), codes.end());
    const auto gold_codes = split.classification()[i].labels.codes();
    metrics::LabelCodes gs(gold_codes.begin(), gold_codes.end());
    p.push_back(pred);
    g.push_back(gs);
    if (!preds[i].flagged) {
      p_kept.push_back(pred);
      g_kept.push_back(gs);
    }
  }
  if (g.empty()) throw std::runtime_error("gold file has no records");
  const auto score = metrics::macro_f1(p, g, classes);
  r.metric = score;
  if (!g_kept.empty()) r.metric_excluding_flagged = metrics::macro_f1(p_kept, g_kept, classes);
  for (const auto& c : score.per_class) r.class_errors.push_back({c.code, c.score.counts.fp, c.score.counts.fn});
  return r;
}

EvalReport eval_mitigate(const fs::path& predictions, const fs::path& gold,
                         const metrics::BleuConfig& config) {
  const auto split = corpus::load_dataset(gold, corpus::Task::mitigate, corpus::SplitName::test);
  const auto preds = aligned_predictions(predictions, split.ids());
  EvalReport r;
  r.task = corpus::Task::mitigate;
  count_flagged(r, preds);
  std::vector<std::pair<metrics::Tokens, std::vector<metrics::Tokens>>> all;
  std::vector<std::pair<metrics::Tokens, std::vector<metrics::Tokens>>> kept;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    std::pair<metrics::Tokens, std::vector<metrics::Tokens>> seg{
        metrics::char_tokens(field<std::string>(preds[i], "rewrite")),
        {metrics::char_tokens(split.mitigation()[i].edited_text)}};
    if (!preds[i].flagged) kept.push_back(seg);
    all.push_back(std::move(seg));
  }
  if (all.empty()) throw std::runtime_error("gold file has no records");
  r.metric = metrics::corpus_bleu(all, config);
  if (!kept.empty()) r.metric_excluding_flagged = metrics::corpus_bleu(kept, config);
  return r;
}

json merge_reports(const std::vector<json>& reports, const std::string& fingerprint,
                   std::uint64_t seed) {
  json merged = json::object();
  for (const auto& r : reports) {
    const auto task = r.at("task").get<std::string>();
    if (merged.contains(task)) throw std::runtime_error("two reports for task '" + task + "'");
    merged[task] = r;
  }
  return {{"reports", std::move(merged)}, {"fingerprint", fingerprint}, {"seed", seed}};
}

std::string summary_text(const json& summary) {
  std::string out = "summary\n";
  for (const auto& [task, r] : summary.at("reports").items()) {
    out += "  " + task + ": " + headline(r.at("metric")) + ", records " +
           std::to_string(r.at("records").get<std::size_t>()) + ", flagged " +
           std::to_string(r.at("flagged").get<std::size_t>()) + ", report fingerprint " +
           r.at("fingerprint").get<std::string>() + "\n";
  }
  out += "fingerprint: " + summary.at("fingerprint").get<std::string>() + "\n";
  out += "seed: " + std::to_string(summary.at("seed").get<std::uint64_t>()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

struct Context {
  const std::string& command;
  const RunConfig& config;
  std::ostream& log;

  std::string fingerprint() const { return config.fingerprint(); }

  std::string meta() const {
    return json{{"command", command}, {"fingerprint", fingerprint()}, {"seed", config.seed()}}
        .dump();
  }

  void info(const std::string& line) const { log << "[" << command << "] " << line << "\n"; }

  // JSONL and other formats without comments get a "<file>.meta.json" sidecar.
  void write_with_sidecar(const fs::path& path, const std::string& content) const {
    write_file(path, content);
    json m{{"artifact", path.filename().string()},
           {"command", command},
           {"fingerprint", fingerprint()},
           {"seed", config.seed()}};
    write_file(fs::path(path.string() + ".meta.json"), m.dump() + "\n");
    info("wrote " + path.string());
  }

  void write_plain(const fs::path& path, const std::string& content) const {
    write_file(path, content);
    info("wrote " + path.string());
  }

  std::vector<std::string> comment_lines() const {
    return {"fingerprint=" + fingerprint() + " seed=" + std::to_string(config.seed()) +
            " command=" + command};
  }
};

cot::TemplateSet load_templates(const RunConfig& config) {
  if (auto dir = config.get_path("paths.templates")) {
    if (!fs::is_directory(*dir)) throw ConfigError("paths.templates: not a directory: " + dir->string());
    return cot::TemplateSet::load(*dir);
  }
  return cot::TemplateSet::builtin();
}

struct BackendHandle {
  std::shared_ptr<client::ReplayStore> store;
  std::unique_ptr<client::ChatBackend> live;
  std::unique_ptr<client::ChatBackend> backend;
};

BackendHandle make_backend(const RunConfig& config) {
  BackendHandle h;
  const auto& kind = config.get("client.backend");
  const auto inflight = positive_size(config, "client.max_inflight");
  if (kind == "replay") {
    h.store = std::make_shared<client::ReplayStore>(config.require_existing("paths.replay"));
    h.backend = std::make_unique<client::ReplayBackend>(h.store, inflight);
  } else if (kind == "live") {
    h.backend = std::make_unique<client::LiveBackend>(config.live_config());
  } else if (kind == "record") {
    h.store = std::make_shared<client::ReplayStore>(config.require_path("paths.replay"));
    h.live = std::make_unique<client::LiveBackend>(config.live_config());
    h.backend = std::make_unique<client::RecordingBackend>(*h.live, h.store,
                                                           config.get_bool("client.force"));
  } else {
    throw ConfigError("client.backend must be replay, live or record, got '" + kind + "'");
  }
  return h;
}

fs::path out_dir(const RunConfig& config) {
  const auto out = config.require_path("paths.out");
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw ConfigError("paths.out exists and is not a directory: " + out.string());
  }
  return out;
}

void cmd_ingest(const Context& ctx) {
  const auto& c = ctx.config;
  const auto task = c.task();
  const auto out = out_dir(c);
  std::map<corpus::SplitName, fs::path> inputs;
  for (auto [name, key] : {std::pair{corpus::SplitName::train, "paths.train"},
                           std::pair{corpus::SplitName::valid, "paths.valid"},
                           std::pair{corpus::SplitName::test, "paths.test"}}) {
    if (c.get_path(key)) inputs[name] = c.require_existing(key);
  }
  if (inputs.empty()) throw ConfigError("ingest needs at least one of paths.train/valid/test");
  std::optional<fs::path> supplement;
  if (c.get_path("paths.supplement")) supplement = c.require_existing("paths.supplement");
  corpus::SplitManifest manifest = c.get_path("paths.manifest")
                                       ? corpus::load_manifest(c.require_existing("paths.manifest"))
                                       : corpus::shared_task_manifest();
  const auto sample = c.get_int("ingest.sample");
  if (sample < 0) throw ConfigError("ingest.sample must be >= 0");
  const bool strict = c.get_bool("ingest.strict");

  corpus::SplitSizes sizes;
  for (const auto& [name, path] : inputs) {
    auto split = corpus::load_dataset(path, task, name);
    const std::size_t n = split.size();
    if (name == corpus::SplitName::train) sizes.train = n;
    if (name == corpus::SplitName::valid) sizes.valid = n;
    if (name == corpus::SplitName::test) sizes.test = n;
    if (name == corpus::SplitName::train && supplement) {
      split = corpus::merge_supplement(split, corpus::load_dataset(*supplement, task, name));
      ctx.info("merged supplement, train now " + std::to_string(split.size()) + " records");
    }
    if (name == corpus::SplitName::train && sample > 0) {
      split = corpus::sample_records(split, static_cast<std::size_t>(sample), c.seed());
    }
    ctx.write_with_sidecar(out / (std::string(corpus::to_string(name)) + ".jsonl"),
                           corpus::serialize_dataset(split));
  }
  auto report = corpus::validate_split_counts(sizes, task, manifest);
  // Splits that were not supplied are not compared.
  std::erase_if(report.entries,
                [&](const corpus::SplitCountEntry& e) { return !inputs.contains(e.split); });
  json rj;
  rj["task"] = corpus::to_string(task);
  rj["all_match"] = report.all_match();
  rj["entries"] = json::array();
  for (const auto& e : report.entries) {
    rj["entries"].push_back({{"split", corpus::to_string(e.split)},
                             {"actual", e.actual},
                             {"expected", e.expected ? json(*e.expected) : json(nullptr)},
                             {"mismatch", e.mismatch}});
  }
  rj["fingerprint"] = ctx.fingerprint();
  rj["seed"] = c.seed();
  ctx.write_plain(out / "split_counts.json", rj.dump() + "\n");
  ctx.write_plain(out / "split_counts.txt", report.to_string() + "fingerprint: " +
                                                ctx.fingerprint() + "\n");
  ctx.info(report.all_match() ? "split counts match the manifest"
                              : std::to_string(report.mismatch_count()) + " split count mismatch(es)");
  if (strict && !report.all_match()) throw std::runtime_error("split counts do not match the manifest");
}

void cmd_build_prefs(const Context& ctx) {
  const auto& c = ctx.config;
  const auto data = c.require_existing("paths.data");
  const auto out = out_dir(c);
  const auto options = c.build_options();
  const auto templates = load_templates(c);
  auto backend = make_backend(c);
  const auto split = corpus::load_dataset(data, corpus::Task::mitigate);
  const auto result = prefgen::build_preference_pairs(split, templates, *backend.backend, options);
  const auto t = result.manifest.totals();
  ctx.info("generated " + std::to_string(t.generated) + ", accepted " + std::to_string(t.accepted) +
           ", rejected " + std::to_string(t.rejected));
  ctx.write_with_sidecar(out / "preferences.jsonl", serialize_preferences(result.pairs));
  ctx.write_with_sidecar(out / "generation_manifest.jsonl", prefgen::serialize_manifest(result.manifest));
}

// Vocabulary of all pair texts plus, when a mitigation dataset is configured,
// its sentences and their rendered rewrite prompts (so `decode` can encode them).
lm::Vocab training_vocab(const RunConfig& c, const std::vector<PreferencePair>& pairs) {
  auto texts = align::pair_texts(pairs);
  if (c.get_path("paths.data")) {
    const auto templates = load_templates(c);
    const auto split = corpus::load_dataset(c.require_existing("paths.data"), corpus::Task::mitigate);
    for (const auto& r : split.mitigation()) {
      texts.push_back(r.biased_text);
      texts.push_back(r.edited_text);
      texts.push_back(cot::render_rewrite_prompt(templates, r.biased_text));
    }
  }
  return lm::Vocab::from_texts(texts);
}

void cmd_train_dpo(const Context& ctx) {
  const auto& c = ctx.config;
  const auto prefs_path = c.require_existing("paths.preferences");
  const auto out = out_dir(c);
  const auto config = c.dpo_config();
  const auto& init_kind = c.get("dpo.init");
  const double init_scale = c.get_double("dpo.init_scale");
  std::optional<align::SftConfig> sft;
  std::optional<fs::path> init_ckpt;
  if (init_kind == "sft") sft = c.sft_config();
  if (init_kind == "checkpoint") init_ckpt = c.require_existing("paths.policy");
  if (init_kind != "zero" && init_kind != "random" && init_kind != "sft" && init_kind != "checkpoint") {
    throw ConfigError("dpo.init must be zero, random, sft or checkpoint, got '" + init_kind + "'");
  }
  if (!(init_scale >= 0)) throw ConfigError("dpo.init_scale must be >= 0");

  const auto pairs = load_preferences(prefs_path);
  if (pairs.empty()) throw std::runtime_error("no preference pairs in " + prefs_path.string());
  std::optional<lm::ToyLm> init;
  if (init_ckpt) {
    init = lm::load_checkpoint(*init_ckpt);
  } else {
    const auto vocab = training_vocab(c, pairs);
    init = init_kind == "zero" ? lm::ToyLm(vocab) : lm::ToyLm::random(vocab, init_scale, c.seed());
  }
  const auto encoded = align::encode_pairs(pairs, init->vocab());
  if (sft) {
    const auto curve = align::train_sft(*init, encoded, *sft);
    ctx.info("sft loss " + format_double(curve.initial_loss) + " -> " + format_double(curve.final_loss));
  }
  ctx.info(std::to_string(encoded.size()) + " pairs, vocab " + std::to_string(init->vocab().size()));
  auto result = align::train_dpo(*init, encoded, config);
  ctx.info("dpo loss " + format_double(result.curve.initial_loss) + " -> " +
           format_double(result.curve.final_loss));
  const auto& policy = dynamic_cast<const lm::ToyLm&>(*result.policy);
  const auto& reference = dynamic_cast<const lm::ToyLm&>(*result.reference);
  lm::save_checkpoint(policy, out / "policy.ckpt", ctx.meta());
  ctx.info("wrote " + (out / "policy.ckpt").string());
  lm::save_checkpoint(reference, out / "reference.ckpt", ctx.meta());
  ctx.info("wrote " + (out / "reference.ckpt").string());
  ctx.write_plain(out / "dpo_curve.csv", result.curve.to_csv(ctx.comment_lines()));
}

void cmd_train_rm(const Context& ctx) {
  const auto& c = ctx.config;
  const auto prefs_path = c.require_existing("paths.preferences");
  const auto out = out_dir(c);
  const auto config = c.rm_config();
  std::optional<fs::path> backbone_ckpt;
  if (c.get_path("paths.policy")) backbone_ckpt = c.require_existing("paths.policy");

  const auto pairs = load_preferences(prefs_path);
  if (pairs.empty()) throw std::runtime_error("no preference pairs in " + prefs_path.string());
  const lm::ToyLm backbone = backbone_ckpt ? lm::load_checkpoint(*backbone_ckpt)
                                           : lm::ToyLm::random(training_vocab(c, pairs),
                                                               config.init_scale, c.seed());
  const auto init = align::RewardModel::from_backbone(backbone);
  const auto encoded = align::encode_pairs(pairs, init.vocab());
  const double acc_before = align::ranking_accuracy(init, encoded);
  auto result = align::train_rm(init, encoded, config);
  ctx.info("rm loss " + format_double(result.curve.initial_loss) + " -> " +
           format_double(result.curve.final_loss) + ", ranking accuracy " +
           format_double(acc_before) + " -> " +
           format_double(align::ranking_accuracy(result.model, encoded)));
  align::save_reward_model(result.model, out / "reward.ckpt", ctx.meta());
  ctx.info("wrote " + (out / "reward.ckpt").string());
  ctx.write_plain(out / "rm_curve.csv", result.curve.to_csv(ctx.comment_lines()));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

void cmd_decode(const Context& ctx) {
  const auto& c = ctx.config;
  const auto data = c.require_existing("paths.data");
  const auto policy_path = c.require_existing("paths.policy");
  const auto out = out_dir(c);
  std::optional<fs::path> reward_path;
  if (c.get_path("paths.reward")) reward_path = c.require_existing("paths.reward");
  const auto config = c.decode_config();
  const bool want_trace = c.get_bool("decode.trace");
  const auto templates = load_templates(c);

  const auto policy = lm::load_checkpoint(policy_path);
  std::optional<align::RewardModel> rm;
  if (reward_path) {
    rm = align::load_reward_model(*reward_path);
    if (!(rm->vocab() == policy.vocab())) {
      throw align::VocabMismatch("reward model and policy vocabularies differ");
    }
  }
  const auto split = corpus::load_dataset(data, corpus::Task::mitigate);
  std::string predictions;
  std::string trace_csv;
  for (std::size_t i = 0; i < split.mitigation().size(); ++i) {
    const auto& rec = split.mitigation()[i];
    lm::TokenSeq prompt;
    try {
      prompt = lm::encode(cot::render_rewrite_prompt(templates, rec.biased_text), policy.vocab());
    } catch (const lm::EncodeError& e) {
      throw std::runtime_error("record '" + rec.id + "': " + e.what());
    }
    lm::TokenSeq tokens;
    if (rm) {
      auto cfg = config;
      cfg.seed = config.seed + i;
      std::vector<decode::TraceRow> trace;
      tokens = decode::guided_generate(policy, *rm, prompt, cfg, want_trace ? &trace : nullptr);
      if (want_trace) {
        const auto rows = split_lines(decode::trace_to_csv(trace, policy.vocab()));
        if (trace_csv.empty() && !rows.empty()) trace_csv = "record," + rows[0] + "\n";
        for (std::size_t r = 1; r < rows.size(); ++r) trace_csv += csv_field(rec.id) + "," + rows[r] + "\n";
      }
    } else {
      tokens = lm::generate(policy, prompt, {config.mode, config.seed + i, config.max_len});
    }
    nlohmann::ordered_json j;
    j["id"] = rec.id;
    j["rewrite"] = lm::decode_tokens(tokens, policy.vocab());
    j["flagged"] = false;
    predictions += j.dump() + "\n";
  }
  ctx.info(std::string(rm ? "guided" : "plain") + " decoding of " + std::to_string(split.size()) +
           " records");
  ctx.write_with_sidecar(out / "predictions.jsonl", predictions);
  if (want_trace) {
    if (!rm) {
      ctx.info("decode.trace needs a reward model; no trace written");
    } else {
      std::string text;
      for (const auto& line : ctx.comment_lines()) text += "# " + line + "\n";
      ctx.write_plain(out / "trace.csv", text + trace_csv);
    }
  }
}

void cmd_run_cot(const Context& ctx) {
  const auto& c = ctx.config;
  const auto task = c.task();
  const auto data = c.require_existing("paths.data");
  const auto out = out_dir(c);
  const auto options = c.pipeline_options();
  const auto templates = load_templates(c);
  auto backend = make_backend(c);
  const auto split = corpus::load_dataset(data, task);
  const auto result = cot::run_pipeline(split, task, templates, *backend.backend, options);
  ctx.info(std::to_string(result.size()) + " records, " + std::to_string(result.flagged_count()) +
           " flagged, " + std::to_string(result.failures.size()) + " failure log entries");
  ctx.write_with_sidecar(out / "predictions.jsonl", cot::serialize_predictions(result));
  ctx.write_with_sidecar(out / "failures.jsonl", cot::serialize_failures(result));
}

void write_report(const Context& ctx, EvalReport report) {
  report.fingerprint = ctx.fingerprint();
  report.seed = ctx.config.seed();
  const auto out = out_dir(ctx.config);
  ctx.write_plain(out / "report.json", report.canonical());
  ctx.write_plain(out / "report.txt", report.to_text());
  ctx.log << report.to_text();
}

void cmd_eval(const Context& ctx, corpus::Task task) {
  const auto& c = ctx.config;
  const auto preds = c.require_existing("paths.predictions");
  const auto gold = c.require_existing("paths.gold");
  out_dir(c);
  switch (task) {
    case corpus::Task::detect: write_report(ctx, eval_detect(preds, gold)); break;
    case corpus::Task::classify: write_report(ctx, eval_classify(preds, gold)); break;
    case corpus::Task::mitigate: {
      const auto bleu = c.bleu_config();
      write_report(ctx, eval_mitigate(preds, gold, bleu));
      break;
    }
  }
}

void cmd_report(const Context& ctx) {
  const auto& c = ctx.config;
  const auto out = out_dir(c);
  const auto list = split_list(c.get("paths.reports"));
  if (list.empty()) throw ConfigError("paths.reports must list at least one report.json");
  for (const auto& p : list) {
    if (!fs::exists(p)) throw ConfigError("paths.reports: path does not exist: " + p);
  }
  std::vector<json> reports;
  for (const auto& p : list) {
    try {
      reports.push_back(json::parse(read_file(p)));
    } catch (const json::exception& e) {
      throw std::runtime_error(p + ": " + e.what());
    }
  }
  const auto summary = merge_reports(reports, ctx.fingerprint(), c.seed());
  ctx.write_plain(out / "summary.json", summary.dump() + "\n");
  const auto text = summary_text(summary);
  ctx.write_plain(out / "summary.txt", text);
  ctx.log << text;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names{"ingest",     "build-prefs",   "train-dpo",
                                              "train-rm",   "decode",        "run-cot",
                                              "eval-detect", "eval-classify", "eval-mitigate",
                                              "report"};
  return names;
}

void run_command(const std::string& name, const RunConfig& config, std::ostream& log) {
  const Context ctx{name, config, log};
  ctx.info("fingerprint " + config.fingerprint() + ", seed " + std::to_string(config.seed()));
  if (name == "ingest") cmd_ingest(ctx);
  else if (name == "build-prefs") cmd_build_prefs(ctx);
  else if (name == "train-dpo") cmd_train_dpo(ctx);
  else if (name == "train-rm") cmd_train_rm(ctx);
  else if (name == "decode") cmd_decode(ctx);
  else if (name == "run-cot") cmd_run_cot(ctx);
  else if (name == "eval-detect") cmd_eval(ctx, corpus::Task::detect);
  else if (name == "eval-classify") cmd_eval(ctx, corpus::Task::classify);
  else if (name == "eval-mitigate") cmd_eval(ctx, corpus::Task::mitigate);
  else if (name == "report") cmd_report(ctx);
  else throw ConfigError("unknown command '" + name + "'");
}

int exit_status_for(const std::exception& e, std::ostream& err) {
  if (dynamic_cast<const ConfigError*>(&e)) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }
  err << "error: " << e.what() << "\n";
  return 1;
}

}  // namespace debias::app
