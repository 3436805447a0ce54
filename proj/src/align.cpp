#include "debias/align.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "debias/util.hpp"

namespace debias::align {

std::vector<EncodedPair> encode_pairs(std::span<const PreferencePair> pairs,
                                      const lm::Vocab& vocab) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    std::string id = p.source_id.empty() ? "#" + std::to_string(i) : p.source_id;
    if (p.kind) id += "/" + std::string(roman(*p.kind));
    out.push_back({lm::encode(p.prompt, vocab), lm::encode_completion(p.chosen, vocab),
                   lm::encode_completion(p.rejected, vocab), std::move(id)});
  }
  return out;
}

std::vector<std::string> pair_texts(std::span<const PreferencePair> pairs) {
  std::vector<std::string> texts;
  texts.reserve(3 * pairs.size());
  for (const auto& p : pairs) {
    texts.push_back(p.prompt);
    texts.push_back(p.chosen);
    texts.push_back(p.rejected);
  }
  return texts;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double neg_log_sigmoid(double z) {
  if (z >= 0) return std::log1p(std::exp(-z));
  return -z + std::log1p(std::exp(z));
}

namespace {

void check_vocab(const lm::Vocab& a, const lm::Vocab& b, const char* what) {
  if (!(a == b)) throw VocabMismatch(std::string(what) + ": vocabularies differ");
}

}  // namespace

double dpo_margin(const lm::DifferentiableLm& policy, const lm::DifferentiableLm& reference,
                  const EncodedPair& pair) {
  const double w = policy.seq_logprob(pair.prompt, pair.chosen) -
                   reference.seq_logprob(pair.prompt, pair.chosen);
  const double l = policy.seq_logprob(pair.prompt, pair.rejected) -
                   reference.seq_logprob(pair.prompt, pair.rejected);
  return w - l;
}

namespace {

// Loss of one pair; accumulates scale * d loss / d policy into grad when nonempty.
double dpo_pair(const lm::DifferentiableLm& policy, const lm::DifferentiableLm& reference,
                const EncodedPair& pair, double beta, double scale, std::span<double> grad) {
  const double margin = dpo_margin(policy, reference, pair);
  const double loss = neg_log_sigmoid(beta * margin);
  if (!grad.empty()) {
    // d/dm [-log sigmoid(beta m)] = -beta * sigmoid(-beta m)
    const double dm = -beta * sigmoid(-beta * margin) * scale;
    policy.accumulate_logprob_grad(pair.prompt, pair.chosen, dm, grad);
    policy.accumulate_logprob_grad(pair.prompt, pair.rejected, -dm, grad);
  }
  return loss;
}

}  // namespace

double dpo_loss(const lm::DifferentiableLm& policy, const lm::DifferentiableLm& reference,
                std::span<const EncodedPair> batch, double beta) {
  check_vocab(policy.vocab(), reference.vocab(), "dpo_loss");
  if (batch.empty()) throw std::invalid_argument("dpo_loss: empty batch");
  double total = 0.0;
  for (const auto& pair : batch) total += dpo_pair(policy, reference, pair, beta, 0.0, {});
  return total / static_cast<double>(batch.size());
}

std::vector<double> dpo_grad(const lm::DifferentiableLm& policy,
                             const lm::DifferentiableLm& reference,
                             std::span<const EncodedPair> batch, double beta) {
  check_vocab(policy.vocab(), reference.vocab(), "dpo_grad");
  if (batch.empty()) throw std::invalid_argument("dpo_grad: empty batch");
  std::vector<double> grad(policy.parameters().size(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const auto& pair : batch) dpo_pair(policy, reference, pair, beta, scale, grad);
  return grad;
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (!(warmup_ratio >= 0 && warmup_ratio <= 1)) {
    throw std::invalid_argument("warmup_ratio must lie in [0, 1]");
  }
  if (!std::isfinite(max_grad_norm)) throw std::invalid_argument("max_grad_norm must be finite");
}

void DpoConfig::validate() const {
  if (!(beta > 0) || !std::isfinite(beta)) throw std::invalid_argument("beta must be > 0");
  optim.validate();
}

std::string TrainCurve::to_csv(const std::vector<std::string>& comments) const {
  std::string out;
  for (const auto& c : comments) out += "# " + c + "\n";
  out += "step,loss,grad_norm,learning_rate\n";
  for (const auto& s : steps) {
    out += std::to_string(s.step) + "," + format_double(s.loss) + "," +
           format_double(s.grad_norm) + "," + format_double(s.learning_rate) + "\n";
  }
  return out;
}

TrainingError::TrainingError(std::size_t step, std::string example_id, const std::string& what)
    : std::runtime_error("step " + std::to_string(step) + ", example " + example_id + ": " + what),
      step_(step),
      example_id_(std::move(example_id)) {}

TrainCurve run_gradient_descent(std::span<double> params, std::size_t n_examples,
                                const OptimizerConfig& config, const ExampleObjective& objective,
                                const std::function<std::string(std::size_t)>& example_id) {
  config.validate();
  if (n_examples == 0) throw std::invalid_argument("training needs at least one example");

  const std::size_t per_epoch = (n_examples + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * static_cast<std::size_t>(config.epochs);
  const auto warmup =
      static_cast<std::size_t>(std::ceil(config.warmup_ratio * static_cast<double>(total)));

  auto full_loss = [&](std::size_t step) {
    double sum = 0.0;
    for (std::size_t i = 0; i < n_examples; ++i) {
      const double l = objective(i, 0.0, {});
      if (!std::isfinite(l)) throw TrainingError(step, example_id(i), "non-finite loss");
      sum += l;
    }
    return sum / static_cast<double>(n_examples);
  };

  TrainCurve curve;
  curve.seed = config.seed;
  curve.initial_loss = full_loss(0);

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(n_examples);
  std::vector<double> grad(params.size());
  std::size_t step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < n_examples; b += config.batch_size) {
      const std::size_t end = std::min(n_examples, b + config.batch_size);
      const double scale = 1.0 / static_cast<double>(end - b);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t k = b; k < end; ++k) {
        const double l = objective(order[k], scale, grad);
        if (!std::isfinite(l)) throw TrainingError(step, example_id(order[k]), "non-finite loss");
        loss += l * scale;
      }
      double norm = 0.0;
      for (double g : grad) norm += g * g;
      norm = std::sqrt(norm);
      if (!std::isfinite(norm)) {
        throw TrainingError(step, example_id(order[b]), "non-finite gradient");
      }
      const double lr =
          warmup > 0 ? config.learning_rate *
                           std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup))
                     : config.learning_rate;
      const double clip =
          (config.max_grad_norm > 0 && norm > config.max_grad_norm) ? config.max_grad_norm / norm
                                                                    : 1.0;
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * clip * grad[i];
      curve.steps.push_back({step, loss, norm, lr});
      ++step;
    }
  }
  curve.final_loss = full_loss(step);
  return curve;
}

DpoResult train_dpo(const lm::DifferentiableLm& init, std::span<const EncodedPair> pairs,
                    const DpoConfig& config) {
  config.validate();
  if (pairs.empty()) throw std::invalid_argument("train_dpo: no preference pairs");
  DpoResult result;
  result.reference = init.clone();
  result.policy = init.clone();
  const auto& policy = *result.policy;
  const auto& reference = *result.reference;
  result.curve = run_gradient_descent(
      result.policy->parameters(), pairs.size(), config.optim,
      [&](std::size_t i, double scale, std::span<double> grad) {
        return dpo_pair(policy, reference, pairs[i], config.beta, scale, grad);
      },
      [&](std::size_t i) { return pairs[i].id; });
  return result;
}

TrainCurve train_sft(lm::DifferentiableLm& model, std::span<const EncodedPair> pairs,
                     const SftConfig& config) {
  if (pairs.empty()) throw std::invalid_argument("train_sft: no examples");
  return run_gradient_descent(
      model.parameters(), pairs.size(), config.optim,
      [&](std::size_t i, double scale, std::span<double> grad) {
        if (!grad.empty()) model.accumulate_logprob_grad(pairs[i].prompt, pairs[i].chosen, -scale, grad);
        return -model.seq_logprob(pairs[i].prompt, pairs[i].chosen);
      },
      [&](std::size_t i) { return pairs[i].id; });
}

RewardModel::RewardModel(lm::Vocab vocab, std::vector<double> backbone, std::vector<double> head)
    : vocab_(std::move(vocab)) {
  const std::size_t v = vocab_.size();
  if (backbone.size() != v * v) throw std::invalid_argument("RewardModel: backbone must be V x V");
  if (head.size() != v) throw std::invalid_argument("RewardModel: head must have V entries");
  params_ = std::move(backbone);
  params_.insert(params_.end(), head.begin(), head.end());
  for (double x : params_) {
    if (!std::isfinite(x)) throw std::invalid_argument("RewardModel: non-finite parameter");
  }
}

RewardModel RewardModel::from_backbone(const lm::ToyLm& backbone) {
  const auto p = backbone.parameters();
  return RewardModel(backbone.vocab(), std::vector<double>(p.begin(), p.end()),
                     std::vector<double>(backbone.vocab().size(), 0.0));
}

std::span<const double> RewardModel::backbone() const {
  const std::size_t v = vocab_.size();
  return std::span<const double>(params_).first(v * v);
}

std::span<const double> RewardModel::head() const {
  const std::size_t v = vocab_.size();
  return std::span<const double>(params_).subspan(v * v, v);
}

double RewardModel::token_score(lm::TokenId token) const {
  const std::size_t v = vocab_.size();
  const auto lp = lm::log_softmax(backbone().subspan(token * v, v));
  const auto h = head();
  double s = 0.0;
  for (std::size_t j = 0; j < v; ++j) s += h[j] * std::exp(lp[j]);
  return s;
}

double RewardModel::reward(std::span<const lm::TokenId> /*prompt*/,
                           std::span<const lm::TokenId> completion) const {
  if (completion.empty()) return 0.0;
  double sum = 0.0;
  for (lm::TokenId t : completion) sum += token_score(t);
  return sum / static_cast<double>(completion.size());
}

void RewardModel::accumulate_reward_grad(std::span<const lm::TokenId> /*prompt*/,
                                         std::span<const lm::TokenId> completion, double scale,
                                         std::span<double> grad) const {
  if (grad.size() != params_.size()) throw std::invalid_argument("gradient size mismatch");
  if (completion.empty()) return;
  const std::size_t v = vocab_.size();
  const double c = scale / static_cast<double>(completion.size());
  const auto h = head();
  double* head_grad = grad.data() + v * v;
  for (lm::TokenId t : completion) {
    const auto lp = lm::log_softmax(backbone().subspan(t * v, v));
    double hp = 0.0;
    for (std::size_t j = 0; j < v; ++j) hp += h[j] * std::exp(lp[j]);
    double* row = grad.data() + static_cast<std::size_t>(t) * v;
    for (std::size_t j = 0; j < v; ++j) {
      const double p = std::exp(lp[j]);
      head_grad[j] += c * p;
      row[j] += c * p * (h[j] - hp);
    }
  }
}

namespace {

double rm_pair(const RewardModel& rm, const EncodedPair& pair, double scale,
               std::span<double> grad) {
  const double margin = rm.reward(pair.prompt, pair.chosen) - rm.reward(pair.prompt, pair.rejected);
  if (!grad.empty()) {
    const double dm = -sigmoid(-margin) * scale;
    rm.accumulate_reward_grad(pair.prompt, pair.chosen, dm, grad);
    rm.accumulate_reward_grad(pair.prompt, pair.rejected, -dm, grad);
  }
  return neg_log_sigmoid(margin);
}

}  // namespace

double rm_loss(const RewardModel& rm, const EncodedPair& pair) { return rm_pair(rm, pair, 0.0, {}); }

std::vector<double> rm_grad(const RewardModel& rm, const EncodedPair& pair) {
  std::vector<double> grad(rm.parameters().size(), 0.0);
  rm_pair(rm, pair, 1.0, grad);
  return grad;
}

double rm_batch_loss(const RewardModel& rm, std::span<const EncodedPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("rm_batch_loss: empty batch");
  double sum = 0.0;
  for (const auto& p : pairs) sum += rm_loss(rm, p);
  return sum / static_cast<double>(pairs.size());
}

double ranking_accuracy(const RewardScorer& rm, std::span<const EncodedPair> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& p : pairs) {
    if (rm.reward(p.prompt, p.chosen) > rm.reward(p.prompt, p.rejected)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

RmResult train_rm(const RewardModel& init, std::span<const EncodedPair> pairs,
                  const RmConfig& config) {
  if (pairs.empty()) throw std::invalid_argument("train_rm: no preference pairs");
  RmResult result{init, {}};
  const auto& rm = result.model;
  result.curve = run_gradient_descent(
      result.model.parameters(), pairs.size(), config.optim,
      [&](std::size_t i, double scale, std::span<double> grad) {
        return rm_pair(rm, pairs[i], scale, grad);
      },
      [&](std::size_t i) { return pairs[i].id; });
  return result;
}

namespace {
constexpr std::string_view kRewardMagic = "debias-reward 1";
}

void save_reward_model(const RewardModel& rm, const std::filesystem::path& path,
                       const std::string& meta_json) {
  std::string out(kRewardMagic);
  out += '\n';
  if (!meta_json.empty()) out += "meta " + meta_json + "\n";
  out += lm::serialize_vocab(rm.vocab());
  const std::size_t v = rm.vocab().size();
  out += lm::serialize_matrix("backbone", rm.backbone(), v, v);
  out += lm::serialize_matrix("head", rm.head(), 1, v);
  write_file(path, out);
}

RewardModel load_reward_model(const std::filesystem::path& path) {
  const auto text = read_file(path);
  const auto lines = split_lines(text);
  if (lines.empty() || lines[0] != kRewardMagic) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a reward checkpoint");
  }
  if (text.back() != '\n') throw std::runtime_error("checkpoint: " + path.string() + " is truncated");
  std::size_t pos = 1;
  if (pos < lines.size() && starts_with(lines[pos], "meta ")) ++pos;
  lm::Vocab vocab = lm::parse_vocab(lines, pos);
  const std::size_t v = vocab.size();
  auto backbone = lm::parse_matrix("backbone", lines, pos, v, v);
  auto head = lm::parse_matrix("head", lines, pos, 1, v);
  if (pos != lines.size()) {
    throw std::runtime_error("checkpoint: unexpected content on line " + std::to_string(pos + 1));
  }
  return RewardModel(std::move(vocab), std::move(backbone), std::move(head));
}

FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& value,
                                   std::span<const double> analytic_grad,
                                   std::span<const double> params, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_check: step must be > 0");
  if (analytic_grad.size() != params.size()) {
    throw std::invalid_argument("finite_diff_check: gradient size mismatch");
  }
  FiniteDiffReport report;
  std::vector<double> x(params.begin(), params.end());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = value(x);
    x[i] = saved - step;
    const double down = value(x);
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic_grad[i];
    // Resolution of the difference quotient itself: a few ulps of f over 2h.
    const double rounding = 64.0 * std::numeric_limits<double>::epsilon() *
                            std::max(std::abs(up), std::abs(down)) / step;
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-7});
    const double rel = std::max(0.0, std::abs(a - numeric) - rounding) / denom;
    report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
    if (rel > report.max_rel_error || i == 0) {
      report.max_rel_error = rel;
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  return report;
}

}  // namespace debias::align
