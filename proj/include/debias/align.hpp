#pragma once

// Preference optimization on top of the differentiable LM contract:
// the DPO objective against a frozen reference, a pairwise reward model,
// and the gradient-descent loop both share.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "debias/preference.hpp"
#include "debias/toylm.hpp"

namespace debias::align {

/// A preference pair tokenized against a model vocabulary. Completions end with EOS.
struct EncodedPair {
  lm::TokenSeq prompt;
  lm::TokenSeq chosen;
  lm::TokenSeq rejected;
  std::string id;
};

std::vector<EncodedPair> encode_pairs(std::span<const PreferencePair> pairs,
                                      const lm::Vocab& vocab);

/// Every text field of every pair, for vocabulary harvesting.
std::vector<std::string> pair_texts(std::span<const PreferencePair> pairs);

double sigmoid(double z);
/// -log(sigmoid(z)), evaluated without overflow.
double neg_log_sigmoid(double z);

class VocabMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// (log pi(y_w|x) - log ref(y_w|x)) - (log pi(y_l|x) - log ref(y_l|x)).
double dpo_margin(const lm::DifferentiableLm& policy, const lm::DifferentiableLm& reference,
                  const EncodedPair& pair);

/// Mean over the batch of -log sigmoid(beta * margin).
double dpo_loss(const lm::DifferentiableLm& policy, const lm::DifferentiableLm& reference,
                std::span<const EncodedPair> batch, double beta);

/// Gradient of dpo_loss with respect to the policy parameters; the reference is constant.
std::vector<double> dpo_grad(const lm::DifferentiableLm& policy,
                             const lm::DifferentiableLm& reference,
                             std::span<const EncodedPair> batch, double beta);

struct OptimizerConfig {
  double learning_rate = 8e-6;
  int epochs = 2;
  std::size_t batch_size = 1;
  double max_grad_norm = 0.3;  // <= 0 disables clipping
  double warmup_ratio = 0.03;
  std::uint64_t seed = 42;

  void validate() const;
};

struct DpoConfig {
  double beta = 0.1;
  OptimizerConfig optim{};

  void validate() const;
};

struct SftConfig {
  OptimizerConfig optim{1e-5};
};

struct RmConfig {
  OptimizerConfig optim{8e-6};
  /// Std-dev of the random backbone used when no backbone checkpoint is given.
  double init_scale = 1.0;
};

struct TrainStep {
  std::size_t step = 0;
  double loss = 0.0;       // mean loss of the batch before the update
  double grad_norm = 0.0;  // before clipping
  double learning_rate = 0.0;
};

struct TrainCurve {
  std::vector<TrainStep> steps;
  double initial_loss = 0.0;  // full-dataset loss before step 0
  double final_loss = 0.0;    // full-dataset loss after the last step
  std::uint64_t seed = 0;

  /// "step,loss,grad_norm,learning_rate" rows; `comment` lines are prefixed with '#'.
  std::string to_csv(const std::vector<std::string>& comments = {}) const;
};

class TrainingError : public std::runtime_error {
 public:
  TrainingError(std::size_t step, std::string example_id, const std::string& what);
  std::size_t step() const { return step_; }
  const std::string& example_id() const { return example_id_; }

 private:
  std::size_t step_;
  std::string example_id_;
};

/// Loss of one example; adds scale * its gradient into `grad`.
using ExampleObjective =
    std::function<double(std::size_t example, double scale, std::span<double> grad)>;

/// Mini-batch gradient descent with per-epoch seeded shuffling, linear warmup
/// over ceil(warmup_ratio * total_steps) steps and global-norm clipping.
/// Throws TrainingError when an example loss is not finite.
TrainCurve run_gradient_descent(std::span<double> params, std::size_t n_examples,
                                const OptimizerConfig& config, const ExampleObjective& objective,
                                const std::function<std::string(std::size_t)>& example_id);

struct DpoResult {
  std::unique_ptr<lm::DifferentiableLm> policy;
  std::unique_ptr<lm::DifferentiableLm> reference;  // snapshot of `init` before step 0
  TrainCurve curve;
};

DpoResult train_dpo(const lm::DifferentiableLm& init, std::span<const EncodedPair> pairs,
                    const DpoConfig& config);

/// Maximum-likelihood fine-tuning on (prompt, chosen); loss is the mean
/// negative log-likelihood of the chosen completion.
TrainCurve train_sft(lm::DifferentiableLm& model, std::span<const EncodedPair> pairs,
                     const SftConfig& config);

/// Scalar scorer r([x, y]).
class RewardScorer {
 public:
  virtual ~RewardScorer() = default;
  virtual const lm::Vocab& vocab() const = 0;
  virtual double reward(std::span<const lm::TokenId> prompt,
                        std::span<const lm::TokenId> completion) const = 0;
};

/// Backbone table theta (V x V, LM-shaped) plus a head of V weights.
/// Each completion token t gets the scalar head . softmax(theta[t]); the reward
/// is the mean over completion tokens (0 for an empty completion).
class RewardModel final : public RewardScorer {
 public:
  RewardModel(lm::Vocab vocab, std::vector<double> backbone, std::vector<double> head);

  /// Copies the LM table as backbone; head starts at zero.
  static RewardModel from_backbone(const lm::ToyLm& backbone);

  const lm::Vocab& vocab() const override { return vocab_; }
  double reward(std::span<const lm::TokenId> prompt,
                std::span<const lm::TokenId> completion) const override;
  double token_score(lm::TokenId token) const;

  /// grad += scale * d reward / d parameters (backbone block then head block).
  void accumulate_reward_grad(std::span<const lm::TokenId> prompt,
                              std::span<const lm::TokenId> completion, double scale,
                              std::span<double> grad) const;

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::span<const double> backbone() const;
  std::span<const double> head() const;

 private:
  lm::Vocab vocab_;
  std::vector<double> params_;
};

/// -log sigmoid(r([x, y_w]) - r([x, y_l])).
double rm_loss(const RewardModel& rm, const EncodedPair& pair);
std::vector<double> rm_grad(const RewardModel& rm, const EncodedPair& pair);
double rm_batch_loss(const RewardModel& rm, std::span<const EncodedPair> pairs);

/// Fraction of pairs with r(chosen) > r(rejected).
double ranking_accuracy(const RewardScorer& rm, std::span<const EncodedPair> pairs);

struct RmResult {
  RewardModel model;
  TrainCurve curve;
};

RmResult train_rm(const RewardModel& init, std::span<const EncodedPair> pairs,
                  const RmConfig& config);

// Reward checkpoint: "debias-reward 1", optional meta line, vocab section as
// in the LM checkpoint, then "backbone V V" and "head 1 V" hex-float matrices.
void save_reward_model(const RewardModel& rm, const std::filesystem::path& path,
                       const std::string& meta_json = {});
RewardModel load_reward_model(const std::filesystem::path& path);

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double max_abs_error = 0.0;  // largest raw |analytic - numeric|
};

/// Central differences per coordinate. Relative error is
/// max(0, |analytic - numeric| - rounding) / max(|analytic|, |numeric|, 1e-7),
/// where rounding = 64 eps max(|f(x+h)|, |f(x-h)|) / h is the floating-point
/// resolution of the difference quotient.
FiniteDiffReport finite_diff_check(const std::function<double(std::span<const double>)>& value,
                                   std::span<const double> analytic_grad,
                                   std::span<const double> params, double step);

}  // namespace debias::align
