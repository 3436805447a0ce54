#include "debias/decode.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "debias/util.hpp"

namespace debias::decode {

std::string_view to_string(BaseScale scale) {
  return scale == BaseScale::log_prob ? "log" : "prob";
}

BaseScale parse_base_scale(std::string_view name) {
  if (name == "log") return BaseScale::log_prob;
  if (name == "prob") return BaseScale::prob;
  throw std::invalid_argument("unknown base_scale '" + std::string(name) + "' (log|prob)");
}

void GuidedDecodeConfig::validate() const {
  if (!(weight >= 0) || !std::isfinite(weight)) throw std::invalid_argument("weight must be >= 0");
  if (top_k && *top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
}

std::vector<GuidedScore> score_candidates(const lm::DifferentiableLm& lm,
                                          const align::RewardScorer& rm,
                                          std::span<const lm::TokenId> prompt,
                                          std::span<const lm::TokenId> generated,
                                          const GuidedDecodeConfig& config) {
  config.validate();
  if (!(lm.vocab() == rm.vocab())) {
    throw align::VocabMismatch("score_candidates: LM and reward model vocabularies differ");
  }
  lm::TokenSeq context;
  context.reserve(1 + prompt.size() + generated.size());
  context.push_back(lm::Vocab::kBos);
  context.insert(context.end(), prompt.begin(), prompt.end());
  context.insert(context.end(), generated.begin(), generated.end());
  const auto log_probs = lm.next_log_probs(context);

  std::vector<lm::TokenId> candidates;
  for (lm::TokenId v = 0; v < log_probs.size(); ++v) {
    if (v != lm::Vocab::kBos) candidates.push_back(v);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](lm::TokenId a, lm::TokenId b) { return log_probs[a] > log_probs[b]; });
  if (config.top_k && *config.top_k < candidates.size()) candidates.resize(*config.top_k);

  lm::TokenSeq extended(generated.begin(), generated.end());
  extended.push_back(0);
  std::vector<GuidedScore> scores;
  scores.reserve(candidates.size());
  for (lm::TokenId v : candidates) {
    extended.back() = v;
    GuidedScore s;
    s.token = v;
    s.base = config.base_scale == BaseScale::log_prob ? log_probs[v] : std::exp(log_probs[v]);
    s.reward = rm.reward(prompt, extended);
    s.total = s.base + config.weight * s.reward;
    scores.push_back(s);
  }
  return scores;
}

lm::TokenSeq guided_generate(const lm::DifferentiableLm& lm, const align::RewardScorer& rm,
                             std::span<const lm::TokenId> prompt,
                             const GuidedDecodeConfig& config, std::vector<TraceRow>* trace) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  lm::TokenSeq out;
  for (std::size_t step = 0; step < config.max_len; ++step) {
    const auto scores = score_candidates(lm, rm, prompt, out, config);
    std::size_t pick = 0;
    if (config.mode == lm::DecodeMode::greedy) {
      for (std::size_t i = 1; i < scores.size(); ++i) {
        const auto& a = scores[i];
        const auto& b = scores[pick];
        if (a.total > b.total || (a.total == b.total && a.token < b.token)) pick = i;
      }
    } else {
      double mx = scores.front().total;
      for (const auto& s : scores) mx = std::max(mx, s.total);
      std::vector<double> weights;
      double sum = 0.0;
      for (const auto& s : scores) sum += weights.emplace_back(std::exp(s.total - mx));
      double u = unit(rng) * sum;
      pick = scores.size() - 1;
      for (std::size_t i = 0; i < weights.size(); ++i) {
        if (u < weights[i]) {
          pick = i;
          break;
        }
        u -= weights[i];
      }
    }
    if (trace) {
      for (std::size_t i = 0; i < scores.size(); ++i) trace->push_back({step, scores[i], i == pick});
    }
    out.push_back(scores[pick].token);
    if (scores[pick].token == lm::Vocab::kEos) break;
  }
  return out;
}

std::string trace_to_csv(const std::vector<TraceRow>& trace, const lm::Vocab& vocab) {
  std::string out = "step,token,symbol,base,reward,total,chosen\n";
  for (const auto& row : trace) {
    out += std::to_string(row.step) + "," + std::to_string(row.score.token) + "," +
           nlohmann::json(vocab.symbol(row.score.token)).dump() + "," +
           format_double(row.score.base) + "," + format_double(row.score.reward) + "," +
           format_double(row.score.total) + "," + (row.chosen ? "1" : "0") + "\n";
  }
  return out;
}

}  // namespace debias::decode
