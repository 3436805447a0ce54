#include "debias/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "debias/util.hpp"

namespace debias::lm {

Vocab::Vocab(std::vector<std::string> symbols) {
  symbols_.reserve(symbols.size() + 2);
  symbols_.emplace_back(kBosSymbol);
  symbols_.emplace_back(kEosSymbol);
  for (auto& s : symbols) symbols_.push_back(std::move(s));
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].empty()) throw std::invalid_argument("vocab: empty symbol");
    if (!index_.emplace(symbols_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("vocab: duplicate symbol '" + symbols_[i] + "'");
    }
  }
}

Vocab Vocab::from_texts(std::span<const std::string> texts) {
  std::set<std::string> chars;
  for (const auto& t : texts) {
    for (auto& c : utf8_chars(t)) chars.insert(std::move(c));
  }
  return Vocab(std::vector<std::string>(chars.begin(), chars.end()));
}

std::optional<TokenId> Vocab::find(std::string_view symbol) const {
  auto it = index_.find(std::string(symbol));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

EncodeError::EncodeError(std::string symbol, std::size_t char_offset, std::size_t byte_offset)
    : std::invalid_argument("out-of-vocabulary character '" + symbol + "' at offset " +
                            std::to_string(char_offset) + " (byte " +
                            std::to_string(byte_offset) + ")"),
      symbol_(std::move(symbol)),
      char_offset_(char_offset),
      byte_offset_(byte_offset) {}

TokenSeq encode(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  std::size_t bytes = 0;
  const auto chars = utf8_chars(text);
  out.reserve(chars.size());
  for (std::size_t i = 0; i < chars.size(); ++i) {
    const auto id = vocab.find(chars[i]);
    if (!id || *id == Vocab::kBos || *id == Vocab::kEos) throw EncodeError(chars[i], i, bytes);
    out.push_back(*id);
    bytes += chars[i].size();
  }
  return out;
}

std::string decode_tokens(std::span<const TokenId> tokens, const Vocab& vocab) {
  std::string out;
  for (TokenId t : tokens) {
    if (t == Vocab::kBos || t == Vocab::kEos) continue;
    out += vocab.symbol(t);
  }
  return out;
}

TokenSeq encode_completion(std::string_view text, const Vocab& vocab) {
  TokenSeq out = encode(text, vocab);
  out.push_back(Vocab::kEos);
  return out;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

ToyLm::ToyLm(Vocab vocab) : vocab_(std::move(vocab)), logits_(vocab_.size() * vocab_.size(), 0.0) {}

ToyLm::ToyLm(Vocab vocab, std::vector<double> logits)
    : vocab_(std::move(vocab)), logits_(std::move(logits)) {
  if (logits_.size() != vocab_.size() * vocab_.size()) {
    throw std::invalid_argument("ToyLm: logit table must be V x V");
  }
  for (double v : logits_) {
    if (!std::isfinite(v)) throw std::invalid_argument("ToyLm: non-finite logit");
  }
}

ToyLm ToyLm::random(Vocab vocab, double scale, std::uint64_t seed) {
  ToyLm model(std::move(vocab));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : model.logits_) v = scale * dist(rng);
  return model;
}

std::vector<double> ToyLm::row_log_softmax(TokenId prev) const {
  const std::size_t v = vocab_.size();
  if (prev >= v) throw std::out_of_range("token id " + std::to_string(prev) + " outside vocabulary");
  return log_softmax(std::span<const double>(logits_).subspan(prev * v, v));
}

std::vector<double> ToyLm::next_log_probs(std::span<const TokenId> context) const {
  if (context.empty()) throw std::invalid_argument("next_log_probs: empty context");
  return row_log_softmax(context.back());
}

double ToyLm::seq_logprob(std::span<const TokenId> prompt,
                          std::span<const TokenId> completion) const {
  TokenId prev = prompt.empty() ? Vocab::kBos : prompt.back();
  double total = 0.0;
  for (TokenId next : completion) {
    total += row_log_softmax(prev).at(next);
    prev = next;
  }
  return total;
}

void ToyLm::accumulate_logprob_grad(std::span<const TokenId> prompt,
                                    std::span<const TokenId> completion, double scale,
                                    std::span<double> grad) const {
  if (grad.size() != logits_.size()) throw std::invalid_argument("gradient size mismatch");
  const std::size_t v = vocab_.size();
  TokenId prev = prompt.empty() ? Vocab::kBos : prompt.back();
  for (TokenId next : completion) {
    if (next >= v) throw std::out_of_range("token id " + std::to_string(next) + " outside vocabulary");
    const auto lp = row_log_softmax(prev);
    double* row = grad.data() + static_cast<std::size_t>(prev) * v;
    for (std::size_t j = 0; j < v; ++j) row[j] -= scale * std::exp(lp[j]);
    row[next] += scale;
    prev = next;
  }
}

std::unique_ptr<DifferentiableLm> ToyLm::clone() const { return std::make_unique<ToyLm>(*this); }

double seq_logprob(const DifferentiableLm& model, std::span<const TokenId> prompt,
                   std::span<const TokenId> completion) {
  return model.seq_logprob(prompt, completion);
}

std::vector<double> seq_logprob_grad(const DifferentiableLm& model,
                                     std::span<const TokenId> prompt,
                                     std::span<const TokenId> completion) {
  std::vector<double> grad(model.parameters().size(), 0.0);
  model.accumulate_logprob_grad(prompt, completion, 1.0, grad);
  return grad;
}

TokenId argmax_token(std::span<const double> scores) {
  TokenId best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = static_cast<TokenId>(i);
  }
  return best;
}

TokenSeq generate(const DifferentiableLm& model, std::span<const TokenId> prompt,
                  const GenerateOptions& options) {
  if (options.max_len < 1) throw std::invalid_argument("generate: max_len must be >= 1");
  TokenSeq context;
  context.reserve(prompt.size() + options.max_len + 1);
  context.push_back(Vocab::kBos);
  context.insert(context.end(), prompt.begin(), prompt.end());

  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TokenSeq out;
  while (out.size() < options.max_len) {
    auto lp = model.next_log_probs(context);
    lp[Vocab::kBos] = -std::numeric_limits<double>::infinity();
    TokenId next = 0;
    if (options.mode == DecodeMode::greedy) {
      next = argmax_token(lp);
    } else {
      double total = 0.0;
      std::vector<double> p(lp.size());
      for (std::size_t i = 0; i < lp.size(); ++i) total += (p[i] = std::exp(lp[i]));
      double u = unit(rng) * total;
      next = static_cast<TokenId>(lp.size() - 1);
      for (std::size_t i = 1; i < p.size(); ++i) {
        if (u < p[i]) {
          next = static_cast<TokenId>(i);
          break;
        }
        u -= p[i];
      }
    }
    out.push_back(next);
    context.push_back(next);
    if (next == Vocab::kEos) break;
  }
  return out;
}

std::string serialize_vocab(const Vocab& vocab) {
  std::string out = "vocab " + std::to_string(vocab.size()) + "\n";
  for (const auto& s : vocab.symbols()) out += nlohmann::json(s).dump() + "\n";
  return out;
}

Vocab parse_vocab(const std::vector<std::string>& lines, std::size_t& pos) {
  std::istringstream head(pos < lines.size() ? lines[pos] : std::string{});
  std::string tag;
  std::size_t v = 0;
  if (!(head >> tag >> v) || tag != "vocab" || v < 2) {
    throw std::runtime_error("checkpoint: expected 'vocab <V>' on line " + std::to_string(pos + 1));
  }
  ++pos;
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < v; ++i, ++pos) {
    if (pos >= lines.size()) throw std::runtime_error("checkpoint: truncated vocab");
    const auto sym = nlohmann::json::parse(lines[pos]).get<std::string>();
    if (i == 0 && sym != Vocab::kBosSymbol) throw std::runtime_error("checkpoint: BOS missing");
    if (i == 1 && sym != Vocab::kEosSymbol) throw std::runtime_error("checkpoint: EOS missing");
    if (i >= 2) symbols.push_back(sym);
  }
  return Vocab(std::move(symbols));
}

std::string serialize_matrix(std::string_view tag, std::span<const double> values,
                             std::size_t rows, std::size_t cols) {
  std::string out =
      std::string(tag) + " " + std::to_string(rows) + " " + std::to_string(cols) + "\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) out += ' ';
      out += format_hexfloat(values[r * cols + c]);
    }
    out += '\n';
  }
  return out;
}

std::vector<double> parse_matrix(std::string_view tag, const std::vector<std::string>& lines,
                                 std::size_t& pos, std::size_t rows, std::size_t cols) {
  std::istringstream head(pos < lines.size() ? lines[pos] : std::string{});
  std::string got;
  std::size_t r = 0, c = 0;
  if (!(head >> got >> r >> c) || got != tag || r != rows || c != cols) {
    throw std::runtime_error("checkpoint: expected '" + std::string(tag) + " " +
                             std::to_string(rows) + " " + std::to_string(cols) + "' on line " +
                             std::to_string(pos + 1));
  }
  ++pos;
  std::vector<double> values;
  values.reserve(rows * cols);
  for (std::size_t i = 0; i < rows; ++i, ++pos) {
    if (pos >= lines.size()) throw std::runtime_error("checkpoint: truncated matrix");
    std::istringstream row(lines[pos]);
    std::string cell;
    std::size_t n = 0;
    while (row >> cell) {
      values.push_back(parse_double(cell));
      ++n;
    }
    if (n != cols) throw std::runtime_error("checkpoint: bad row on line " + std::to_string(pos + 1));
  }
  return values;
}

namespace {
constexpr std::string_view kToyLmMagic = "debias-toylm 1";
}

void save_checkpoint(const ToyLm& model, const std::filesystem::path& path,
                     const std::string& meta_json) {
  std::string out(kToyLmMagic);
  out += '\n';
  if (!meta_json.empty()) out += "meta " + meta_json + "\n";
  out += serialize_vocab(model.vocab());
  const std::size_t v = model.vocab().size();
  out += serialize_matrix("params", model.parameters(), v, v);
  write_file(path, out);
}

ToyLm load_checkpoint(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const auto lines = split_lines(text);
  if (lines.empty() || lines[0] != kToyLmMagic) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a toylm checkpoint");
  }
  if (text.back() != '\n') throw std::runtime_error("checkpoint: " + path.string() + " is truncated");
  std::size_t pos = 1;
  if (pos < lines.size() && starts_with(lines[pos], "meta ")) ++pos;
  Vocab vocab = parse_vocab(lines, pos);
  const std::size_t v = vocab.size();
  auto params = parse_matrix("params", lines, pos, v, v);
  if (pos != lines.size()) {
    throw std::runtime_error("checkpoint: unexpected content on line " + std::to_string(pos + 1));
  }
  return ToyLm(std::move(vocab), std::move(params));
}

}  // namespace debias::lm
