#include "debias/cot.hpp"

#include <algorithm>
#include <cctype>

#include <nlohmann/json.hpp>

#include "debias/util.hpp"

namespace debias::cot {

using corpus::BiasLabel;
using corpus::LabelSet;

corpus::LabelSet ClassificationResult::applies_set() const {
  LabelSet s;
  for (const auto& j : judgments) {
    if (j.applies) s.insert(j.label);
  }
  return s;
}

std::string_view to_string(ParseError::Kind kind) {
  switch (kind) {
    case ParseError::Kind::empty_response: return "empty_response";
    case ParseError::Kind::unexpected_line: return "unexpected_line";
    case ParseError::Kind::missing_step: return "missing_step";
    case ParseError::Kind::missing_field: return "missing_field";
    case ParseError::Kind::bad_value: return "bad_value";
    case ParseError::Kind::inconsistent_label: return "inconsistent_label";
    case ParseError::Kind::synthesis_inconsistent: return "synthesis_inconsistent";
  }
  return "?";
}

namespace {

std::string grammar_text(const TemplateSet& templates, std::string_view name) {
  std::string g = templates.get(name);
  while (!g.empty() && (g.back() == '\n' || g.back() == '\r')) g.pop_back();
  return g;
}

std::string render_with_sentence(const TemplateSet& templates, std::string_view body,
                                 std::string_view grammar, std::string_view sentence) {
  return render_template(templates.get(body), {{"sentence", escape_field(sentence)},
                                               {"grammar", grammar_text(templates, grammar)}});
}

}  // namespace

std::string render_detection_prompt(const TemplateSet& templates,
                                    const corpus::DetectionRecord& record) {
  return render_with_sentence(templates, "detection.v1", "detection_grammar.v1", record.text);
}

std::string render_classification_prompt(const TemplateSet& templates,
                                         const corpus::ClassificationRecord& record) {
  return render_with_sentence(templates, "classification.v1", "classification_grammar.v1",
                              record.text);
}

std::string render_rewrite_prompt(const TemplateSet& templates, std::string_view biased_text) {
  return render_with_sentence(templates, "rewrite.v1", "rewrite_grammar.v1", biased_text);
}

namespace {

struct Line {
  std::size_t number;
  std::string key;    // text before the first ':' (trimmed), empty if none
  std::string value;  // text after the first ':' (trimmed)
  std::string raw;
};

std::vector<Line> tokenize(std::string_view text) {
  std::vector<Line> out;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto t = trim(lines[i]);
    if (t.empty()) continue;
    Line l{i + 1, {}, {}, std::string(t)};
    if (const auto colon = t.find(':'); colon != std::string_view::npos) {
      l.key = std::string(trim(t.substr(0, colon)));
      l.value = std::string(trim(t.substr(colon + 1)));
    }
    out.push_back(std::move(l));
  }
  return out;
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::optional<bool> parse_bool(std::string_view v) {
  const auto l = lower(v);
  if (l == "true") return true;
  if (l == "false") return false;
  return std::nullopt;
}

ParseError make_error(ParseError::Kind kind, std::size_t line, std::string message) {
  ParseError e;
  e.kind = kind;
  e.line = line;
  e.message = std::move(message);
  return e;
}

// Sequential cursor over tokenized lines that skips "Reason:" lines.
class Cursor {
 public:
  explicit Cursor(std::vector<Line> lines) : lines_(std::move(lines)) {}

  const Line* peek() {
    while (pos_ < lines_.size() && lines_[pos_].key == "Reason") ++pos_;
    return pos_ < lines_.size() ? &lines_[pos_] : nullptr;
  }
  void advance() { ++pos_; }
  std::size_t line_or_end() {
    const Line* l = peek();
    return l ? l->number : 0;
  }

 private:
  std::vector<Line> lines_;
  std::size_t pos_ = 0;
};

std::string describe(const Line* l) {
  return l ? "line " + std::to_string(l->number) + " '" + l->raw + "'" : "end of response";
}

// Expects a step marker; returns an error naming the step when it is absent.
std::optional<ParseError> expect_step(Cursor& c, int step, std::string_view step_name) {
  const Line* l = c.peek();
  const std::string marker = "Step" + std::to_string(step);
  if (!l || l->key != marker) {
    return make_error(ParseError::Kind::missing_step, c.line_or_end(),
                      "missing step " + std::to_string(step) + " (" + std::string(step_name) +
                          "): expected '" + marker + ":' at " + describe(l));
  }
  return std::nullopt;
}

// Expects `key: value`; returns the value or sets err.
std::optional<std::string> expect_field(Cursor& c, std::string_view key, ParseError& err) {
  const Line* l = c.peek();
  if (!l) {
    err = make_error(ParseError::Kind::missing_field, 0,
                     "missing '" + std::string(key) + ":' before end of response");
    return std::nullopt;
  }
  if (l->key != key) {
    err = make_error(ParseError::Kind::unexpected_line, l->number,
                     "expected '" + std::string(key) + ":' at " + describe(l));
    return std::nullopt;
  }
  if (l->value.empty()) {
    err = make_error(ParseError::Kind::bad_value, l->number,
                     "empty value for '" + std::string(key) + "'");
    return std::nullopt;
  }
  std::string v = l->value;
  c.advance();
  return v;
}

std::optional<bool> expect_bool(Cursor& c, std::string_view key, ParseError& err) {
  const std::size_t line = c.line_or_end();
  auto v = expect_field(c, key, err);
  if (!v) return std::nullopt;
  auto b = parse_bool(*v);
  if (!b) {
    err = make_error(ParseError::Kind::bad_value, line,
                     "'" + std::string(key) + "' must be true or false, got '" + *v + "'");
  }
  return b;
}

std::optional<ParseError> expect_end(Cursor& c) {
  if (const Line* l = c.peek()) {
    return make_error(ParseError::Kind::unexpected_line, l->number,
                      "unexpected trailing " + describe(l));
  }
  return std::nullopt;
}

}  // namespace

ParseOutcome<DetectionResult> parse_detection_response(std::string_view text) {
  auto lines = tokenize(text);
  if (lines.empty()) return make_error(ParseError::Kind::empty_response, 0, "empty response");
  Cursor c(std::move(lines));
  ParseError err;
  DetectionResult r;

  if (auto e = expect_step(c, 1, kDetectionSteps[0])) return *e;
  c.advance();
  auto group = expect_field(c, "Group", err);
  if (!group) return err;
  auto attribute = expect_field(c, "Attribute", err);
  if (!attribute) return err;
  r.group = unescape_field(*group);
  r.attribute = unescape_field(*attribute);

  if (auto e = expect_step(c, 2, kDetectionSteps[1])) return *e;
  c.advance();
  auto biased = expect_bool(c, "Biased", err);
  if (!biased) return err;
  r.statement_is_biased = *biased;

  if (auto e = expect_step(c, 3, kDetectionSteps[2])) return *e;
  c.advance();
  auto agrees = expect_bool(c, "Agrees", err);
  if (!agrees) return err;
  r.sentence_agrees = *agrees;
  const std::size_t label_line = c.line_or_end();
  auto label = expect_bool(c, "Label", err);
  if (!label) return err;
  r.label = *label;
  if (auto e = expect_end(c)) return *e;

  if (r.label != (r.statement_is_biased && r.sentence_agrees)) {
    return make_error(ParseError::Kind::inconsistent_label, label_line,
                      "Label must be True exactly when Biased and Agrees are both true");
  }
  return r;
}

namespace {

std::optional<LabelSet> parse_final(std::string_view value, std::size_t line, ParseError& err) {
  LabelSet set;
  if (lower(trim(value)) == "none") return set;
  std::size_t start = 0;
  while (start <= value.size()) {
    auto comma = value.find(',', start);
    if (comma == std::string_view::npos) comma = value.size();
    const auto code = trim(value.substr(start, comma - start));
    const auto label = corpus::parse_label(code);
    if (!label) {
      err = make_error(ParseError::Kind::bad_value, line,
                       "unknown label '" + std::string(code) + "' in Final");
      return std::nullopt;
    }
    if (set.contains(*label)) {
      err = make_error(ParseError::Kind::bad_value, line,
                       "duplicate label '" + std::string(code) + "' in Final");
      return std::nullopt;
    }
    set.insert(*label);
    start = comma + 1;
  }
  return set;
}

}  // namespace

ParseOutcome<ClassificationResult> parse_classification_response(std::string_view text) {
  auto lines = tokenize(text);
  if (lines.empty()) return make_error(ParseError::Kind::empty_response, 0, "empty response");
  Cursor c(std::move(lines));
  ParseError err;
  ClassificationResult r;

  for (std::size_t i = 0; i < corpus::kNumLabels; ++i) {
    const BiasLabel label = corpus::kAllLabels[i];
    const int step = static_cast<int>(i) + 1;
    if (auto e = expect_step(c, step, corpus::label_code(label))) return *e;
    const Line* marker = c.peek();
    if (marker->value != corpus::label_code(label)) {
      return make_error(ParseError::Kind::unexpected_line, marker->number,
                        "step " + std::to_string(step) + " must judge " +
                            std::string(corpus::label_code(label)) + ", got " + describe(marker));
    }
    c.advance();
    auto justification = expect_field(c, "Justification", err);
    if (!justification) return err;
    auto applies = expect_bool(c, "Applies", err);
    if (!applies) return err;
    r.judgments[i] = {label, unescape_field(*justification), *applies};
  }

  const std::size_t final_line = c.line_or_end();
  auto final_value = expect_field(c, "Final", err);
  if (!final_value) return err;
  auto final_set = parse_final(*final_value, final_line, err);
  if (!final_set) return err;
  if (auto e = expect_end(c)) return *e;

  r.final = r.applies_set();
  if (*final_set != r.final) {
    auto e = make_error(ParseError::Kind::synthesis_inconsistent, final_line,
                        "Final '" + final_set->to_string() + "' disagrees with judgments '" +
                            r.final.to_string() + "'");
    e.resolved = r;
    e.stated_final = *final_set;
    return e;
  }
  return r;
}

ParseOutcome<std::string> parse_rewrite_response(std::string_view text) {
  auto t = trim(text);
  if (starts_with(t, "Rewrite:")) t = trim(t.substr(8));
  if (t.empty()) return make_error(ParseError::Kind::empty_response, 0, "empty rewrite");
  if (t.find('\n') != std::string_view::npos) {
    const auto lines = split_lines(t);
    return make_error(ParseError::Kind::unexpected_line, 2,
                      "rewrite must be a single line, got " + std::to_string(lines.size()));
  }
  return std::string(t);
}

std::string render_detection_response(const DetectionResult& r) {
  auto b = [](bool v) { return v ? std::string("true") : std::string("false"); };
  std::string out;
  out += "Step1: identify the group and the attribute\n";
  out += "Group: " + escape_field(r.group) + "\n";
  out += "Attribute: " + escape_field(r.attribute) + "\n";
  out += "Step2: judge whether the statement is biased\n";
  out += "Biased: " + b(r.statement_is_biased) + "\n";
  out += "Step3: judge whether the sentence agrees\n";
  out += "Agrees: " + b(r.sentence_agrees) + "\n";
  out += std::string("Label: ") + (r.label ? "True" : "False") + "\n";
  return out;
}

std::string render_classification_response(const ClassificationResult& r) {
  std::string out;
  for (std::size_t i = 0; i < r.judgments.size(); ++i) {
    const auto& j = r.judgments[i];
    out += "Step" + std::to_string(i + 1) + ": " + std::string(corpus::label_code(j.label)) + "\n";
    out += "Justification: " + escape_field(j.justification) + "\n";
    out += std::string("Applies: ") + (j.applies ? "true" : "false") + "\n";
  }
  out += "Final: " + r.final.to_string() + "\n";
  return out;
}

std::size_t PipelineResult::size() const {
  return std::visit([](const auto& v) { return v.size(); }, predictions);
}

std::size_t PipelineResult::flagged_count() const {
  return std::visit(
      [](const auto& v) {
        return static_cast<std::size_t>(
            std::count_if(v.begin(), v.end(), [](const auto& p) { return p.flagged; }));
      },
      predictions);
}

namespace {

std::string_view grammar_for(corpus::Task task) {
  switch (task) {
    case corpus::Task::detect: return "detection_grammar.v1";
    case corpus::Task::classify: return "classification_grammar.v1";
    case corpus::Task::mitigate: return "rewrite_grammar.v1";
  }
  return "";
}

struct AttemptLog {
  int attempts = 0;
  std::string last_error;
};

// Calls the backend until `parse` accepts the content or the budget runs out.
template <class T, class Parse>
std::optional<ParseOutcome<T>> attempt_loop(const TemplateSet& templates, corpus::Task task,
                                            const std::string& prompt,
                                            client::ChatBackend& backend,
                                            const PipelineOptions& options, Parse&& parse,
                                            AttemptLog& log) {
  const int max_attempts = 1 + std::max(0, options.retry_budget);
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    log.attempts = attempt;
    client::ChatResponse response;
    try {
      response = backend.complete(build_request(templates, task, prompt, attempt, options));
    } catch (const client::ReplayMiss&) {
      throw;
    } catch (const std::exception& e) {
      log.last_error = std::string("backend: ") + e.what();
      continue;
    }
    if (!response.content) {
      log.last_error = "backend: " + response.error;
      continue;
    }
    ParseOutcome<T> outcome = parse(*response.content);
    if (outcome.ok() || outcome.error().kind == ParseError::Kind::synthesis_inconsistent) {
      return outcome;
    }
    const auto& e = outcome.error();
    log.last_error = "parse: " + std::string(to_string(e.kind)) +
                     (e.line ? " at line " + std::to_string(e.line) : std::string()) + ": " +
                     e.message;
  }
  return std::nullopt;
}

}  // namespace

client::ChatRequest build_request(const TemplateSet& templates, corpus::Task task,
                                  const std::string& prompt, int attempt,
                                  const PipelineOptions& options) {
  client::ChatRequest req;
  req.model_name = options.model_name;
  req.temperature = options.temperature;
  req.max_tokens = options.max_tokens;
  std::string content = prompt;
  if (attempt > 1) {
    content += render_template(templates.get("retry.v1"),
                               {{"attempt", std::to_string(attempt - 1)},
                                {"grammar", grammar_text(templates, grammar_for(task))}});
  }
  req.messages.push_back({client::Role::user, std::move(content)});
  return req;
}

PipelineResult run_pipeline(const corpus::DatasetSplit& split, corpus::Task task,
                            const TemplateSet& templates, client::ChatBackend& backend,
                            const PipelineOptions& options) {
  if (split.task() != task) {
    throw std::invalid_argument("pipeline task " + std::string(corpus::to_string(task)) +
                                " does not match " + std::string(corpus::to_string(split.task())) +
                                " records");
  }
  const std::size_t inflight = std::max<std::size_t>(1, std::min(options.max_inflight,
                                                                 backend.max_inflight()));
  PipelineResult result;
  result.task = task;

  // Each worker yields its prediction plus an optional failure entry.
  auto run = [&](const auto& records, auto&& one) {
    using Pred = decltype(one(records[0]).first);
    auto outs = client::ordered_parallel_map<std::pair<Pred, std::optional<FailureEntry>>>(
        records.size(), inflight, [&](std::size_t i) { return one(records[i]); });
    std::vector<Pred> preds;
    for (auto& [p, f] : outs) {
      preds.push_back(std::move(p));
      if (f) result.failures.push_back(std::move(*f));
    }
    result.predictions = std::move(preds);
  };

  switch (task) {
    case corpus::Task::detect:
      run(split.detection(), [&](const corpus::DetectionRecord& rec) {
        AttemptLog log;
        auto out = attempt_loop<DetectionResult>(templates, task,
                                                 render_detection_prompt(templates, rec), backend,
                                                 options, parse_detection_response, log);
        DetectionPrediction p{rec.id, false, std::nullopt, false, log.attempts};
        std::optional<FailureEntry> f;
        if (out) {
          p.label = out->value().label;
          p.detail = out->value();
        } else {
          p.flagged = true;
          f = FailureEntry{rec.id, log.attempts, log.last_error, "default_label_false"};
        }
        return std::make_pair(std::move(p), std::move(f));
      });
      break;
    case corpus::Task::classify:
      run(split.classification(), [&](const corpus::ClassificationRecord& rec) {
        AttemptLog log;
        auto out = attempt_loop<ClassificationResult>(
            templates, task, render_classification_prompt(templates, rec), backend, options,
            parse_classification_response, log);
        ClassificationPrediction p{rec.id, {}, std::nullopt, false, log.attempts};
        std::optional<FailureEntry> f;
        if (out && out->ok()) {
          p.labels = out->value().final;
          p.detail = out->value();
        } else if (out) {
          const auto& e = out->error();
          p.labels = e.resolved->final;
          p.detail = e.resolved;
          p.flagged = true;
          f = FailureEntry{rec.id, log.attempts,
                           "parse: synthesis_inconsistent at line " + std::to_string(e.line) +
                               ": " + e.message,
                           "resolved_to_applies_set"};
        } else {
          p.flagged = true;
          f = FailureEntry{rec.id, log.attempts, log.last_error, "default_empty_set"};
        }
        return std::make_pair(std::move(p), std::move(f));
      });
      break;
    case corpus::Task::mitigate:
      run(split.mitigation(), [&](const corpus::MitigationRecord& rec) {
        AttemptLog log;
        auto out = attempt_loop<std::string>(templates, task,
                                             render_rewrite_prompt(templates, rec.biased_text),
                                             backend, options, parse_rewrite_response, log);
        MitigationPrediction p{rec.id, rec.biased_text, false, log.attempts};
        std::optional<FailureEntry> f;
        if (out) {
          p.rewrite = out->value();
        } else {
          p.flagged = true;
          f = FailureEntry{rec.id, log.attempts, log.last_error, "default_echo_input"};
        }
        return std::make_pair(std::move(p), std::move(f));
      });
      break;
  }
  return result;
}

std::string serialize_predictions(const PipelineResult& result) {
  using nlohmann::ordered_json;
  std::string out;
  auto emit = [&](ordered_json& j, bool flagged, int attempts) {
    j["flagged"] = flagged;
    j["attempts"] = attempts;
    out += j.dump() + "\n";
  };
  std::visit(
      [&](const auto& preds) {
        for (const auto& p : preds) {
          ordered_json j;
          j["id"] = p.id;
          using P = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<P, DetectionPrediction>) {
            j["label"] = p.label;
            if (p.detail) {
              j["group"] = p.detail->group;
              j["attribute"] = p.detail->attribute;
              j["statement_is_biased"] = p.detail->statement_is_biased;
              j["sentence_agrees"] = p.detail->sentence_agrees;
              j["audit"] = p.detail->needs_audit();
            } else {
              j["group"] = nullptr;
              j["attribute"] = nullptr;
              j["statement_is_biased"] = nullptr;
              j["sentence_agrees"] = nullptr;
              j["audit"] = false;
            }
          } else if constexpr (std::is_same_v<P, ClassificationPrediction>) {
            j["labels"] = p.labels.codes();
          } else {
            j["rewrite"] = p.rewrite;
          }
          emit(j, p.flagged, p.attempts);
        }
      },
      result.predictions);
  return out;
}

std::string serialize_failures(const PipelineResult& result) {
  std::string out;
  for (const auto& f : result.failures) {
    nlohmann::ordered_json j;
    j["id"] = f.id;
    j["attempts"] = f.attempts;
    j["last_error"] = f.last_error;
    j["resolution"] = f.resolution;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace debias::cot
