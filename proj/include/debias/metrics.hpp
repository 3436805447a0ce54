#pragma once

// Evaluation metrics: binary F1 (detection), class-wise and macro F1
// (classification), and BLEU with brevity penalty (mitigation).

#include <cstddef>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace debias::metrics {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Precision, recall and F1; any zero denominator yields 0 for that quantity.
struct BinaryScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  ConfusionCounts counts;
};

BinaryScore score_counts(const ConfusionCounts& counts);

/// Positive class is `true`. Throws std::invalid_argument on length mismatch or empty input.
BinaryScore binary_f1(const std::vector<bool>& predictions, const std::vector<bool>& golds);

struct ClassScore {
  std::string code;
  BinaryScore score;
  std::size_t gold_support = 0;  // gold sets containing the class
  std::size_t pred_support = 0;  // predicted sets containing the class
  /// Class absent from golds or from predictions; its F1 is 0 by convention.
  bool degenerate = false;
};

struct MacroScore {
  std::vector<ClassScore> per_class;
  double macro_f1 = 0.0;
};

using LabelCodes = std::set<std::string>;

/// One-vs-rest counts per class, then the unweighted mean of per-class F1.
/// Throws std::invalid_argument on length mismatch or a code outside `classes`.
MacroScore macro_f1(const std::vector<LabelCodes>& pred_sets,
                    const std::vector<LabelCodes>& gold_sets,
                    const std::vector<std::string>& classes);

enum class Smoothing {
  none,     // raw modified precisions; any zero order gives score 0
  add_one,  // +1 to matches and totals for orders n >= 2 (Lin & Och)
  exp,      // zero-match orders get 1 / (2^k * total), k counting such orders
};

std::string_view to_string(Smoothing smoothing);
Smoothing parse_smoothing(std::string_view name);

struct BleuConfig {
  int max_n = 4;
  Smoothing smoothing = Smoothing::add_one;
};

using Tokens = std::vector<std::string>;

/// Sufficient statistics; sentence stats add up to corpus stats.
struct BleuStats {
  std::vector<std::size_t> matches;  // clipped n-gram matches per order
  std::vector<std::size_t> totals;   // hypothesis n-grams per order
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;           // closest reference length, ties to the shorter

  BleuStats& operator+=(const BleuStats& other);
};

struct BleuScore {
  double score = 0.0;
  std::vector<double> ngram_precisions;  // after smoothing, n = 1..max_n
  double brevity_penalty = 0.0;          // 0 only for an empty hypothesis
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

BleuStats bleu_stats(const Tokens& hypothesis, const std::vector<Tokens>& references, int max_n);
BleuScore bleu_from_stats(const BleuStats& stats, const BleuConfig& config);

/// Sentence BLEU. Throws std::invalid_argument when max_n < 1 or references is empty.
BleuScore bleu(const Tokens& hypothesis, const std::vector<Tokens>& references,
               const BleuConfig& config = {});

/// Corpus BLEU: statistics summed over segments before combining.
BleuScore corpus_bleu(const std::vector<std::pair<Tokens, std::vector<Tokens>>>& segments,
                      const BleuConfig& config = {});

/// Character-level tokens (one per code point), whitespace dropped.
Tokens char_tokens(std::string_view text);

}  // namespace debias::metrics
