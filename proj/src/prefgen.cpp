#include "debias/prefgen.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "debias/cot.hpp"
#include "debias/util.hpp"

namespace debias::prefgen {

namespace {

std::size_t kind_index(CounterfactualKind kind) {
  return static_cast<std::size_t>(std::find(kAllKinds.begin(), kAllKinds.end(), kind) -
                                  kAllKinds.begin());
}

std::string strip_trailing_newlines(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

std::string render_counterfactual_prompt(const cot::TemplateSet& templates,
                                         const corpus::MitigationRecord& record,
                                         CounterfactualKind kind) {
  const std::string name = "counterfactual_" + std::string(roman(kind)) + ".v1";
  return cot::render_template(
      templates.get(name),
      {{"sentence", cot::escape_field(record.biased_text)},
       {"grammar", strip_trailing_newlines(templates.get("rewrite_grammar.v1"))}});
}

std::string_view to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::empty_field: return "empty_field";
    case RejectReason::empty_generation: return "empty_generation";
    case RejectReason::malformed_generation: return "malformed_generation";
    case RejectReason::degenerate_equal: return "degenerate_equal";
    case RejectReason::unmodified_bias: return "unmodified_bias";
    case RejectReason::length_outlier: return "length_outlier";
    case RejectReason::backend_error: return "backend_error";
  }
  return "?";
}

std::optional<RejectReason> validate_pair(const PreferencePair& pair, std::string_view biased_text,
                                          double length_ratio_cap) {
  if (trim(pair.rejected).empty()) return RejectReason::empty_generation;
  if (trim(pair.prompt).empty() || trim(pair.chosen).empty()) return RejectReason::empty_field;
  if (pair.chosen == pair.rejected) return RejectReason::degenerate_equal;
  if (pair.kind && requires_modification(*pair.kind) && pair.rejected == biased_text) {
    return RejectReason::unmodified_bias;
  }
  std::size_t a = 0;
  std::size_t b = 0;
  try {
    a = utf8_length(pair.chosen);
    b = utf8_length(pair.rejected);
  } catch (const std::invalid_argument&) {
    return RejectReason::malformed_generation;
  }
  const double ratio = static_cast<double>(std::max(a, b)) /
                       static_cast<double>(std::max<std::size_t>(std::min(a, b), 1));
  if (ratio > length_ratio_cap) return RejectReason::length_outlier;
  return std::nullopt;
}

void BuildOptions::validate() const {
  if (kinds.empty()) throw std::invalid_argument("at least one counterfactual kind is required");
  if (samples_per_kind < 1) throw std::invalid_argument("samples_per_kind must be >= 1");
  if (!(length_ratio_cap >= 1.0)) throw std::invalid_argument("length_ratio_cap must be >= 1");
  if (max_tokens <= 0) throw std::invalid_argument("max_tokens must be > 0");
  if (!(temperature >= 0)) throw std::invalid_argument("temperature must be >= 0");
}

const KindCounts& GenerationManifest::counts(CounterfactualKind kind) const {
  return per_kind[kind_index(kind)];
}

KindCounts GenerationManifest::totals() const {
  KindCounts t;
  for (const auto& c : per_kind) {
    t.generated += c.generated;
    t.accepted += c.accepted;
    t.rejected += c.rejected;
  }
  return t;
}

BuildResult build_preference_pairs(const corpus::DatasetSplit& split,
                                   const cot::TemplateSet& templates, client::ChatBackend& backend,
                                   const BuildOptions& options) {
  options.validate();
  if (split.task() != corpus::Task::mitigate) {
    throw std::invalid_argument("preference pairs need mitigation records");
  }
  const auto& records = split.mitigation();
  if (records.empty()) throw std::invalid_argument("mitigation split is empty");

  struct Job {
    std::size_t record;
    CounterfactualKind kind;
    int sample;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < records.size(); ++r) {
    for (auto kind : options.kinds) {
      for (int s = 0; s < options.samples_per_kind; ++s) jobs.push_back({r, kind, s});
    }
  }

  // Rewrite instruction is the DPO prompt; it is shared by all kinds of a record.
  std::vector<std::string> pair_prompts;
  pair_prompts.reserve(records.size());
  for (const auto& rec : records) {
    pair_prompts.push_back(cot::render_rewrite_prompt(templates, rec.biased_text));
  }

  struct Outcome {
    GenerationEntry entry;
    std::optional<PreferencePair> pair;
  };
  const std::size_t inflight =
      std::max<std::size_t>(1, std::min(options.max_inflight, backend.max_inflight()));
  auto outcomes = client::ordered_parallel_map<Outcome>(jobs.size(), inflight, [&](std::size_t i) {
    const Job& job = jobs[i];
    const auto& rec = records[job.record];
    Outcome out;
    out.entry.source_id = rec.id;
    out.entry.kind = job.kind;
    out.entry.sample = job.sample;

    client::ChatRequest req;
    req.model_name = options.model_name;
    req.temperature = options.temperature;
    req.max_tokens = options.max_tokens;
    if (options.seed) {
      req.seed = *options.seed + static_cast<std::uint64_t>(job.sample);
    } else if (options.samples_per_kind > 1) {
      req.seed = static_cast<std::uint64_t>(job.sample);
    }
    req.messages.push_back(
        {client::Role::user, render_counterfactual_prompt(templates, rec, job.kind)});

    client::ChatResponse response;
    try {
      response = backend.complete(req);
    } catch (const std::exception& e) {
      out.entry.reason = RejectReason::backend_error;
      out.entry.error = e.what();
      return out;
    }
    if (!response.content) {
      out.entry.reason = RejectReason::backend_error;
      out.entry.error = response.error;
      return out;
    }
    out.entry.raw = *response.content;
    auto parsed = cot::parse_rewrite_response(*response.content);
    if (!parsed.ok()) {
      out.entry.reason = parsed.error().kind == cot::ParseError::Kind::empty_response
                             ? RejectReason::empty_generation
                             : RejectReason::malformed_generation;
      out.entry.error = parsed.error().message;
      return out;
    }
    PreferencePair pair{pair_prompts[job.record], rec.edited_text, parsed.value(), job.kind, rec.id};
    if (auto reason = validate_pair(pair, rec.biased_text, options.length_ratio_cap)) {
      out.entry.reason = reason;
      return out;
    }
    out.entry.accepted = true;
    out.pair = std::move(pair);
    return out;
  });

  BuildResult result;
  result.manifest.generator = options.model_name;
  result.manifest.seed = options.seed;
  result.manifest.temperature = options.temperature;
  for (auto& o : outcomes) {
    auto& c = result.manifest.per_kind[kind_index(o.entry.kind)];
    ++c.generated;
    if (o.entry.accepted) {
      ++c.accepted;
      result.pairs.push_back(std::move(*o.pair));
    } else {
      ++c.rejected;
    }
    result.manifest.entries.push_back(std::move(o.entry));
  }
  return result;
}

std::string serialize_manifest(const GenerationManifest& manifest) {
  using nlohmann::ordered_json;
  ordered_json summary;
  summary["type"] = "summary";
  summary["generator"] = manifest.generator;
  summary["seed"] = manifest.seed ? ordered_json(*manifest.seed) : ordered_json(nullptr);
  summary["temperature"] = manifest.temperature;
  ordered_json kinds = ordered_json::object();
  for (auto kind : kAllKinds) {
    const auto& c = manifest.counts(kind);
    kinds[std::string(to_string(kind))] = {
        {"generated", c.generated}, {"accepted", c.accepted}, {"rejected", c.rejected}};
  }
  summary["kinds"] = std::move(kinds);
  const auto t = manifest.totals();
  summary["total"] = {{"generated", t.generated}, {"accepted", t.accepted}, {"rejected", t.rejected}};
  std::string out = summary.dump() + "\n";
  for (const auto& e : manifest.entries) {
    ordered_json j;
    j["type"] = "generation";
    j["source_id"] = e.source_id;
    j["kind"] = to_string(e.kind);
    j["sample"] = e.sample;
    j["raw"] = e.raw ? ordered_json(*e.raw) : ordered_json(nullptr);
    j["accepted"] = e.accepted;
    j["reason"] = e.reason ? ordered_json(std::string(to_string(*e.reason))) : ordered_json(nullptr);
    if (!e.error.empty()) j["error"] = e.error;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace debias::prefgen
