#pragma once

// A small autoregressive categorical language model with exact
// log-probabilities and analytic gradients. Used as the trainable policy,
// its frozen reference, and the reward-model backbone.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace debias::lm {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

/// Ordered symbol table. Index 0 is BOS and index 1 is EOS; the remaining
/// symbols are single code points.
class Vocab {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;
  static constexpr std::string_view kBosSymbol = "<s>";
  static constexpr std::string_view kEosSymbol = "</s>";

  /// `symbols` excludes BOS/EOS. Throws std::invalid_argument on duplicates.
  explicit Vocab(std::vector<std::string> symbols);

  /// Sorted distinct code points harvested from `texts`.
  static Vocab from_texts(std::span<const std::string> texts);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const { return symbols_.at(id); }
  std::optional<TokenId> find(std::string_view symbol) const;
  /// Full table including BOS and EOS.
  const std::vector<std::string>& symbols() const { return symbols_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.symbols_ == b.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

class EncodeError : public std::invalid_argument {
 public:
  EncodeError(std::string symbol, std::size_t char_offset, std::size_t byte_offset);
  const std::string& symbol() const { return symbol_; }
  std::size_t char_offset() const { return char_offset_; }
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::string symbol_;
  std::size_t char_offset_;
  std::size_t byte_offset_;
};

/// One token per code point; out-of-vocabulary characters are an error, never UNK.
TokenSeq encode(std::string_view text, const Vocab& vocab);
/// BOS and EOS render as nothing.
std::string decode_tokens(std::span<const TokenId> tokens, const Vocab& vocab);
/// encode(text) followed by EOS.
TokenSeq encode_completion(std::string_view text, const Vocab& vocab);

/// Contract every model used by training and decoding must satisfy.
/// The conditioning context of a completion is BOS followed by the prompt.
class DifferentiableLm {
 public:
  virtual ~DifferentiableLm() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::span<double> parameters() = 0;
  virtual std::span<const double> parameters() const = 0;

  /// log p(v | context) for every v; `context` is nonempty and starts with BOS.
  virtual std::vector<double> next_log_probs(std::span<const TokenId> context) const = 0;

  /// Sum of log p(completion[t] | BOS, prompt, completion[<t]).
  virtual double seq_logprob(std::span<const TokenId> prompt,
                             std::span<const TokenId> completion) const = 0;

  /// grad += scale * d seq_logprob / d parameters.
  virtual void accumulate_logprob_grad(std::span<const TokenId> prompt,
                                       std::span<const TokenId> completion, double scale,
                                       std::span<double> grad) const = 0;

  virtual std::unique_ptr<DifferentiableLm> clone() const = 0;
};

/// Bigram logit table: row = previous token, column = next token.
class ToyLm final : public DifferentiableLm {
 public:
  /// All-zero logits (uniform conditionals).
  explicit ToyLm(Vocab vocab);
  ToyLm(Vocab vocab, std::vector<double> logits);

  /// Logits drawn i.i.d. from N(0, scale^2).
  static ToyLm random(Vocab vocab, double scale, std::uint64_t seed);

  const Vocab& vocab() const override { return vocab_; }
  std::span<double> parameters() override { return logits_; }
  std::span<const double> parameters() const override { return logits_; }

  double& logit(TokenId prev, TokenId next) { return logits_[index(prev, next)]; }
  double logit(TokenId prev, TokenId next) const { return logits_[index(prev, next)]; }

  std::vector<double> row_log_softmax(TokenId prev) const;

  std::vector<double> next_log_probs(std::span<const TokenId> context) const override;
  double seq_logprob(std::span<const TokenId> prompt,
                     std::span<const TokenId> completion) const override;
  void accumulate_logprob_grad(std::span<const TokenId> prompt,
                               std::span<const TokenId> completion, double scale,
                               std::span<double> grad) const override;
  std::unique_ptr<DifferentiableLm> clone() const override;

 private:
  std::size_t index(TokenId prev, TokenId next) const {
    return static_cast<std::size_t>(prev) * vocab_.size() + next;
  }

  Vocab vocab_;
  std::vector<double> logits_;
};

std::vector<double> log_softmax(std::span<const double> logits);

double seq_logprob(const DifferentiableLm& model, std::span<const TokenId> prompt,
                   std::span<const TokenId> completion);
std::vector<double> seq_logprob_grad(const DifferentiableLm& model,
                                     std::span<const TokenId> prompt,
                                     std::span<const TokenId> completion);

enum class DecodeMode { greedy, sample };

struct GenerateOptions {
  DecodeMode mode = DecodeMode::greedy;
  std::uint64_t seed = 0;
  std::size_t max_len = 64;
};

/// Autoregressive generation from BOS + prompt. BOS is never emitted; the
/// result ends with EOS unless max_len was reached first. Greedy ties go to the
/// lowest token index.
TokenSeq generate(const DifferentiableLm& model, std::span<const TokenId> prompt,
                  const GenerateOptions& options);

/// Index of the largest score; ties -> lowest index.
TokenId argmax_token(std::span<const double> scores);

// Checkpoint file layout (text, UTF-8):
//   debias-toylm 1
//   meta <json object>                 (optional, free-form provenance)
//   vocab <V>
//   <V lines, each a JSON string literal of one symbol>
//   params <V> <V>
//   <V lines of V space-separated hexadecimal floats, row-major>
// Hex floats make save/load bit-exact.
void save_checkpoint(const ToyLm& model, const std::filesystem::path& path,
                     const std::string& meta_json = {});
ToyLm load_checkpoint(const std::filesystem::path& path);

std::string serialize_vocab(const Vocab& vocab);
/// Reads the "vocab" section starting at lines[pos]; advances pos.
Vocab parse_vocab(const std::vector<std::string>& lines, std::size_t& pos);
std::string serialize_matrix(std::string_view tag, std::span<const double> values,
                             std::size_t rows, std::size_t cols);
std::vector<double> parse_matrix(std::string_view tag, const std::vector<std::string>& lines,
                                 std::size_t& pos, std::size_t rows, std::size_t cols);

}  // namespace debias::lm
