#pragma once

// Structured prompting for the three subtasks: prompt rendering, strict
// response parsers, and the render -> complete -> parse pipeline with
// corrective retries and flagged defaults.
//
// Detection response grammar (one item per line, blank lines ignored,
// optional "Reason: ..." lines allowed inside any step):
//   Step1: <text>  Group: <text>  Attribute: <text>
//   Step2: <text>  Biased: true|false
//   Step3: <text>  Agrees: true|false  Label: True|False
// Classification response grammar:
//   Step1: AC   Justification: <text>  Applies: true|false
//   Step2: DI   Justification: <text>  Applies: true|false
//   Step3: ANB  Justification: <text>  Applies: true|false
//   Final: <codes, comma separated> | None

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "debias/corpus.hpp"
#include "debias/lmclient.hpp"
#include "debias/templates.hpp"

namespace debias::cot {

struct DetectionResult {
  std::string group;
  std::string attribute;
  bool statement_is_biased = false;
  bool sentence_agrees = false;
  bool label = false;

  /// Step 2 judged the statement unbiased; the label is forced False and the
  /// record is worth a manual look.
  bool needs_audit() const { return !statement_is_biased; }
  friend bool operator==(const DetectionResult&, const DetectionResult&) = default;
};

struct LabelJudgment {
  corpus::BiasLabel label = corpus::BiasLabel::AC;
  std::string justification;
  bool applies = false;
  friend bool operator==(const LabelJudgment&, const LabelJudgment&) = default;
};

struct ClassificationResult {
  std::array<LabelJudgment, corpus::kNumLabels> judgments;  // AC, DI, ANB
  corpus::LabelSet final;

  corpus::LabelSet applies_set() const;
  friend bool operator==(const ClassificationResult&, const ClassificationResult&) = default;
};

struct ParseError {
  enum class Kind {
    empty_response,
    unexpected_line,
    missing_step,
    missing_field,
    bad_value,
    inconsistent_label,
    synthesis_inconsistent,
  };
  Kind kind = Kind::unexpected_line;
  std::size_t line = 0;  // 1-based; 0 = end of input
  std::string message;
  /// synthesis_inconsistent only: judgments with final = applies set, and the
  /// final set the response stated.
  std::optional<ClassificationResult> resolved;
  std::optional<corpus::LabelSet> stated_final;
};

std::string_view to_string(ParseError::Kind kind);

template <class T>
class ParseOutcome {
 public:
  ParseOutcome(T value) : v_(std::move(value)) {}
  ParseOutcome(ParseError error) : v_(std::move(error)) {}
  bool ok() const { return v_.index() == 0; }
  const T& value() const { return std::get<0>(v_); }
  const ParseError& error() const { return std::get<1>(v_); }

 private:
  std::variant<T, ParseError> v_;
};

inline constexpr std::array<std::string_view, 3> kDetectionSteps{
    "Groups and Attribute Identification", "Bias Judgment",
    "Agreement Analysis and Label Assignment"};

std::string render_detection_prompt(const TemplateSet& templates,
                                    const corpus::DetectionRecord& record);
std::string render_classification_prompt(const TemplateSet& templates,
                                         const corpus::ClassificationRecord& record);
/// Rewrite instruction for a biased sentence.
std::string render_rewrite_prompt(const TemplateSet& templates, std::string_view biased_text);

/// Never throws; every input maps to a result or a ParseError.
ParseOutcome<DetectionResult> parse_detection_response(std::string_view text);
ParseOutcome<ClassificationResult> parse_classification_response(std::string_view text);
/// Trims surrounding whitespace and an optional leading "Rewrite:" marker;
/// rejects empty or multi-line output.
ParseOutcome<std::string> parse_rewrite_response(std::string_view text);

/// Compliant responses, as a model following the grammar would write them.
std::string render_detection_response(const DetectionResult& result);
std::string render_classification_response(const ClassificationResult& result);

struct PipelineOptions {
  std::string model_name = "gpt-4";
  double temperature = 0.0;
  int max_tokens = 1024;
  int retry_budget = 2;
  std::size_t max_inflight = 1;
};

struct DetectionPrediction {
  std::string id;
  bool label = false;
  std::optional<DetectionResult> detail;
  bool flagged = false;
  int attempts = 0;
};

struct ClassificationPrediction {
  std::string id;
  corpus::LabelSet labels;
  std::optional<ClassificationResult> detail;
  bool flagged = false;
  int attempts = 0;
};

struct MitigationPrediction {
  std::string id;
  std::string rewrite;
  bool flagged = false;
  int attempts = 0;
};

struct FailureEntry {
  std::string id;
  int attempts = 0;
  std::string last_error;
  std::string resolution;
};

using Predictions = std::variant<std::vector<DetectionPrediction>,
                                 std::vector<ClassificationPrediction>,
                                 std::vector<MitigationPrediction>>;

struct PipelineResult {
  corpus::Task task = corpus::Task::detect;
  Predictions predictions;
  std::vector<FailureEntry> failures;

  std::size_t size() const;
  std::size_t flagged_count() const;
};

/// Builds the request for attempt `attempt` (1-based). Attempts after the first
/// append the retry template with the task grammar.
client::ChatRequest build_request(const TemplateSet& templates, corpus::Task task,
                                  const std::string& prompt, int attempt,
                                  const PipelineOptions& options);

/// Per record: render, complete, parse; retry parse or backend failures up to
/// retry_budget times; on persistent failure emit the task default (label False,
/// empty set, or the input sentence) flagged, with a failure-log entry.
/// Throws std::invalid_argument when the split kind does not match `task`; a
/// client::ReplayMiss aborts the run.
PipelineResult run_pipeline(const corpus::DatasetSplit& split, corpus::Task task,
                            const TemplateSet& templates, client::ChatBackend& backend,
                            const PipelineOptions& options);

/// Predictions JSONL. Common fields: id, flagged, attempts. Detection adds label,
/// group, attribute, statement_is_biased, sentence_agrees, audit; classification
/// adds labels; mitigation adds rewrite.
std::string serialize_predictions(const PipelineResult& result);
/// JSONL of {id, attempts, last_error, resolution}.
std::string serialize_failures(const PipelineResult& result);

}  // namespace debias::cot
