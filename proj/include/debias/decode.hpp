#pragma once

// Reward-guided decoding: each candidate next token v is scored as
//   s(v, x_<t) = base(v | x_<t) + w * r([x_<t, v])
// where base is the LM log-probability (or probability, see BaseScale).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias/align.hpp"
#include "debias/toylm.hpp"

namespace debias::decode {

enum class BaseScale { log_prob, prob };

std::string_view to_string(BaseScale scale);
BaseScale parse_base_scale(std::string_view name);

struct GuidedDecodeConfig {
  double weight = 1.0;
  /// Candidates are the top-k tokens by base likelihood; nullopt = whole vocabulary.
  std::optional<std::size_t> top_k = 10;
  std::size_t max_len = 64;
  lm::DecodeMode mode = lm::DecodeMode::greedy;
  std::uint64_t seed = 0;
  BaseScale base_scale = BaseScale::log_prob;

  void validate() const;
};

struct GuidedScore {
  lm::TokenId token = 0;
  double base = 0.0;
  double reward = 0.0;
  double total = 0.0;  // base + weight * reward
};

/// Scores the candidates for the token following BOS + prompt + generated.
/// Candidates exclude BOS and are ordered by descending base (ties: lower index).
/// Throws align::VocabMismatch when the LM and reward vocabularies differ.
std::vector<GuidedScore> score_candidates(const lm::DifferentiableLm& lm,
                                          const align::RewardScorer& rm,
                                          std::span<const lm::TokenId> prompt,
                                          std::span<const lm::TokenId> generated,
                                          const GuidedDecodeConfig& config);

struct TraceRow {
  std::size_t step = 0;
  GuidedScore score;
  bool chosen = false;
};

/// Greedy picks the highest total (ties: lower token index); sample mode draws
/// from softmax over totals. Stops after EOS or max_len tokens.
lm::TokenSeq guided_generate(const lm::DifferentiableLm& lm, const align::RewardScorer& rm,
                             std::span<const lm::TokenId> prompt,
                             const GuidedDecodeConfig& config,
                             std::vector<TraceRow>* trace = nullptr);

/// "step,token,symbol,base,reward,total,chosen" CSV.
std::string trace_to_csv(const std::vector<TraceRow>& trace, const lm::Vocab& vocab);

}  // namespace debias::decode
