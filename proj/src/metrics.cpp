#include "debias/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>

#include "debias/util.hpp"

namespace debias::metrics {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

using NgramCounts = std::map<std::vector<std::string_view>, std::size_t>;

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<std::string_view> key(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++counts[std::move(key)];
  }
  return counts;
}

}  // namespace

BinaryScore score_counts(const ConfusionCounts& c) {
  BinaryScore s;
  s.counts = c;
  s.precision = ratio(c.tp, c.tp + c.fp);
  s.recall = ratio(c.tp, c.tp + c.fn);
  const double denom = s.precision + s.recall;
  s.f1 = denom > 0.0 ? 2.0 * s.precision * s.recall / denom : 0.0;
  return s;
}

BinaryScore binary_f1(const std::vector<bool>& predictions, const std::vector<bool>& golds) {
  if (predictions.size() != golds.size()) {
    throw std::invalid_argument("binary_f1: " + std::to_string(predictions.size()) +
                                " predictions vs " + std::to_string(golds.size()) + " golds");
  }
  if (golds.empty()) throw std::invalid_argument("binary_f1: empty input");
  ConfusionCounts c;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    const bool p = predictions[i];
    const bool g = golds[i];
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return score_counts(c);
}

MacroScore macro_f1(const std::vector<LabelCodes>& pred_sets,
                    const std::vector<LabelCodes>& gold_sets,
                    const std::vector<std::string>& classes) {
  if (pred_sets.size() != gold_sets.size()) {
    throw std::invalid_argument("macro_f1: " + std::to_string(pred_sets.size()) +
                                " predictions vs " + std::to_string(gold_sets.size()) + " golds");
  }
  if (classes.empty()) throw std::invalid_argument("macro_f1: no classes");
  const LabelCodes known(classes.begin(), classes.end());
  auto check = [&](const std::vector<LabelCodes>& sets) {
    for (const auto& s : sets) {
      for (const auto& code : s) {
        if (!known.count(code)) throw std::invalid_argument("macro_f1: unknown label '" + code + "'");
      }
    }
  };
  check(pred_sets);
  check(gold_sets);

  MacroScore out;
  double sum = 0.0;
  for (const auto& cls : classes) {
    ConfusionCounts c;
    ClassScore cs;
    cs.code = cls;
    for (std::size_t i = 0; i < gold_sets.size(); ++i) {
      const bool p = pred_sets[i].count(cls) > 0;
      const bool g = gold_sets[i].count(cls) > 0;
      cs.pred_support += p ? 1 : 0;
      cs.gold_support += g ? 1 : 0;
      if (p && g) ++c.tp;
      else if (p) ++c.fp;
      else if (g) ++c.fn;
      else ++c.tn;
    }
    cs.score = score_counts(c);
    cs.degenerate = cs.gold_support == 0 || cs.pred_support == 0;
    sum += cs.score.f1;
    out.per_class.push_back(std::move(cs));
  }
  out.macro_f1 = sum / static_cast<double>(classes.size());
  return out;
}

std::string_view to_string(Smoothing smoothing) {
  switch (smoothing) {
    case Smoothing::none: return "none";
    case Smoothing::add_one: return "add_one";
    case Smoothing::exp: return "exp";
  }
  return "?";
}

Smoothing parse_smoothing(std::string_view name) {
  if (name == "none") return Smoothing::none;
  if (name == "add_one") return Smoothing::add_one;
  if (name == "exp") return Smoothing::exp;
  throw std::invalid_argument("unknown BLEU smoothing '" + std::string(name) + "'");
}

BleuStats& BleuStats::operator+=(const BleuStats& other) {
  if (matches.size() < other.matches.size()) {
    matches.resize(other.matches.size(), 0);
    totals.resize(other.totals.size(), 0);
  }
  for (std::size_t n = 0; n < other.matches.size(); ++n) {
    matches[n] += other.matches[n];
    totals[n] += other.totals[n];
  }
  hyp_len += other.hyp_len;
  ref_len += other.ref_len;
  return *this;
}

BleuStats bleu_stats(const Tokens& hypothesis, const std::vector<Tokens>& references, int max_n) {
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  if (references.empty()) throw std::invalid_argument("bleu: at least one reference required");

  BleuStats stats;
  stats.hyp_len = hypothesis.size();
  stats.ref_len = references.front().size();
  for (const auto& ref : references) {
    const auto d = std::llabs(static_cast<long long>(ref.size()) -
                              static_cast<long long>(hypothesis.size()));
    const auto best = std::llabs(static_cast<long long>(stats.ref_len) -
                                 static_cast<long long>(hypothesis.size()));
    if (d < best || (d == best && ref.size() < stats.ref_len)) stats.ref_len = ref.size();
  }

  for (int order = 1; order <= max_n; ++order) {
    const auto n = static_cast<std::size_t>(order);
    const NgramCounts hyp = count_ngrams(hypothesis, n);
    NgramCounts max_ref;
    for (const auto& ref : references) {
      for (const auto& [gram, count] : count_ngrams(ref, n)) {
        auto& slot = max_ref[gram];
        slot = std::max(slot, count);
      }
    }
    std::size_t matched = 0;
    for (const auto& [gram, count] : hyp) {
      auto it = max_ref.find(gram);
      if (it != max_ref.end()) matched += std::min(count, it->second);
    }
    stats.matches.push_back(matched);
    stats.totals.push_back(hypothesis.size() >= n ? hypothesis.size() - n + 1 : 0);
  }
  return stats;
}

BleuScore bleu_from_stats(const BleuStats& stats, const BleuConfig& config) {
  if (config.max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  const auto max_n = static_cast<std::size_t>(config.max_n);
  if (stats.matches.size() < max_n) throw std::invalid_argument("bleu: stats shorter than max_n");

  BleuScore out;
  out.hyp_len = stats.hyp_len;
  out.ref_len = stats.ref_len;

  if (stats.hyp_len == 0) {
    out.ngram_precisions.assign(max_n, 0.0);
    return out;
  }
  out.brevity_penalty =
      stats.hyp_len > stats.ref_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));

  int zero_orders = 0;
  for (std::size_t n = 0; n < max_n; ++n) {
    double m = static_cast<double>(stats.matches[n]);
    double t = static_cast<double>(stats.totals[n]);
    double p = 0.0;
    switch (config.smoothing) {
      case Smoothing::none:
        p = t > 0 ? m / t : 0.0;
        break;
      case Smoothing::add_one:
        if (n > 0) {
          m += 1.0;
          t += 1.0;
        }
        p = t > 0 ? m / t : 0.0;
        break;
      case Smoothing::exp:
        if (m > 0) {
          p = m / t;
        } else {
          ++zero_orders;
          p = t > 0 ? 1.0 / (std::ldexp(1.0, zero_orders) * t) : 0.0;
        }
        break;
    }
    out.ngram_precisions.push_back(p);
  }

  // No unigram overlap means no credit under any smoothing mode.
  if (stats.matches[0] == 0) return out;

  double log_sum = 0.0;
  for (double p : out.ngram_precisions) {
    if (p <= 0.0) return out;
    log_sum += std::log(p);
  }
  out.score = out.brevity_penalty * std::exp(log_sum / static_cast<double>(max_n));
  return out;
}

BleuScore bleu(const Tokens& hypothesis, const std::vector<Tokens>& references,
               const BleuConfig& config) {
  return bleu_from_stats(bleu_stats(hypothesis, references, config.max_n), config);
}

BleuScore corpus_bleu(const std::vector<std::pair<Tokens, std::vector<Tokens>>>& segments,
                      const BleuConfig& config) {
  if (config.max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  BleuStats total;
  total.matches.assign(static_cast<std::size_t>(config.max_n), 0);
  total.totals.assign(static_cast<std::size_t>(config.max_n), 0);
  for (const auto& [hyp, refs] : segments) total += bleu_stats(hyp, refs, config.max_n);
  return bleu_from_stats(total, config);
}

Tokens char_tokens(std::string_view text) {
  Tokens out;
  for (auto& ch : utf8_chars(text)) {
    if (ch.size() == 1 && std::isspace(static_cast<unsigned char>(ch[0]))) continue;
    out.push_back(std::move(ch));
  }
  return out;
}

}  // namespace debias::metrics
