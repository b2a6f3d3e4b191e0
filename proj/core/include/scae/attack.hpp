#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "scae/classifiers.hpp"
#include "scae/model.hpp"

namespace scae::attack {

/// Inner-loop update rule: Adam on the objective (evaluation attack) or a
/// fixed signed-gradient step (training-time generator).
enum class StepRule { kAdam, kSign };

struct AdamSettings {
  double learning_rate = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AttackConfig {
  double alpha_init = 100.0;
  double alpha_lb = 0.0;
  double alpha_ub = std::numeric_limits<double>::infinity();
  double alpha_blowup = 10.0;
  int n_outer = 300;
  int n_inner = 9;
  double beta = 1.0;             // sign step size
  double eps_clamp = 0.999999;   // keeps arctanh finite at x in {0, 1}
  StepRule rule = StepRule::kAdam;
  AdamSettings adam;

  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j, AttackConfig base);

  /// 9 inner x 300 outer Adam iterations.
  static AttackConfig evaluation_profile();
  /// 5 inner x 30 outer signed steps with beta = 1.
  static AttackConfig training_profile();
};

/// Maps SCAE outputs to class labels; the attack only needs predictions.
class LabelPredictor {
 public:
  virtual ~LabelPredictor() = default;
  virtual torch::Tensor predict(const model::ScaeOutputs& outputs) const = 0;
  virtual std::string name() const = 0;
};

/// k-means on prior presences or on M-summed posterior presences.
class KMeansPredictor final : public LabelPredictor {
 public:
  explicit KMeansPredictor(classify::KMeansClassifier clf) : clf_(std::move(clf)) {}
  torch::Tensor predict(const model::ScaeOutputs& outputs) const override;
  std::string name() const override;
  const classify::KMeansClassifier& classifier() const { return clf_; }

 private:
  classify::KMeansClassifier clf_;
};

/// Linear head on M-summed posterior presences.
class LinearPredictor final : public LabelPredictor {
 public:
  explicit LinearPredictor(classify::LinearClassifier clf) : clf_(std::move(clf)) {}
  torch::Tensor predict(const model::ScaeOutputs& outputs) const override;
  std::string name() const override { return "posterior_linear"; }

 private:
  classify::LinearClassifier clf_;
};

/// Always returns the same label.
class ConstantPredictor final : public LabelPredictor {
 public:
  explicit ConstantPredictor(int label) : label_(label) {}
  torch::Tensor predict(const model::ScaeOutputs& outputs) const override;
  std::string name() const override { return "constant"; }

 private:
  int label_;
};

enum class AttackStatus { kSucceeded, kFailed, kNoActiveCapsule };
std::string to_string(AttackStatus status);

struct AttackResult {
  torch::Tensor perturbation;  // [H, W]; zero unless succeeded
  torch::Tensor adversarial;   // [H, W]; equals the clean image unless succeeded
  double l2_norm = 0.0;        // ||perturbation||_2
  bool success = false;
  AttackStatus status = AttackStatus::kFailed;
  std::vector<std::int64_t> target_set;
  int clean_label = -1;        // classifier output on the clean image
  int adversarial_label = -1;  // classifier output on the returned image
  int rounds_succeeded = 0;
};

/// Capsules whose presence is strictly above the mean presence.
std::vector<std::int64_t> select_target_capsules(const torch::Tensor& prior_presence);

/// w = arctanh((2x - 1) * eps_clamp).
torch::Tensor to_w(const torch::Tensor& x, double eps_clamp);

struct FromW {
  torch::Tensor adversarial;   // 0.5 * (tanh(w + p') + 1)
  torch::Tensor perturbation;  // adversarial - x
};
FromW from_w(const torch::Tensor& w, const torch::Tensor& p_prime, const torch::Tensor& x);

/// ||x_adv - x||_2 + alpha * sum of targeted prior presences, per sample.
/// `target_mask` is [B, K] with ones on the targeted capsules.
torch::Tensor attack_objective(const torch::Tensor& x_adv, const torch::Tensor& x,
                               model::ScaeModel& model, const torch::Tensor& target_mask,
                               const torch::Tensor& alpha);

/// d(sum of objective)/dp' with non-finite entries zeroed.
torch::Tensor perturbation_gradient(const torch::Tensor& objective, const torch::Tensor& p_prime);

/// p' <- p' - beta * sign(grad), in place.
void sign_step(torch::Tensor& p_prime, const torch::Tensor& grad, double beta);

/// Adam moments for one round; `t` counts updates from 1.
struct AdamState {
  torch::Tensor m, v;
  int t = 0;
};
void adam_step(torch::Tensor& p_prime, const torch::Tensor& grad, AdamState& state,
               const AdamSettings& settings);

struct AlphaState {
  double alpha = 100.0;
  double ub = std::numeric_limits<double>::infinity();
  double lb = 0.0;
};

/// Success lowers the upper bound, failure raises the lower bound; the next
/// alpha is the bracket midpoint, or alpha * blowup while ub is unbounded.
AlphaState update_alpha(AlphaState state, bool round_succeeded, double blowup = 10.0);

/// Observes every iterate that the success check sees (test instrumentation).
struct IterateRecord {
  std::int64_t sample = 0;
  int outer = 0;
  int inner = 0;
  double alpha = 0.0;
  double l2_norm = 0.0;
  bool misclassified = false;
  torch::Tensor adversarial;  // [H, W]
};
using IterateObserver = std::function<void(const IterateRecord&)>;

struct AttackRunOptions {
  IterateObserver observer;
};

/// Runs the attack independently on every image of a batch [B,H,W]. Each
/// sample gets its own alpha bracket, target set and random stream seeded
/// from `seeds[b]`.
std::vector<AttackResult> run_attack_batch(const torch::Tensor& images, model::ScaeModel& model,
                                           const LabelPredictor& classifier,
                                           const AttackConfig& config,
                                           const std::vector<std::uint64_t>& seeds,
                                           const AttackRunOptions& options = {});

/// Single-image evasion attack, x is [H,W].
AttackResult run_evasion_attack(const torch::Tensor& x, model::ScaeModel& model,
                                const LabelPredictor& classifier, const AttackConfig& config,
                                std::uint64_t seed, const AttackRunOptions& options = {});

/// Training-time generator: signed-gradient attack that returns the
/// minimal-norm adversarial image per sample, or the clean image when every
/// round failed.
torch::Tensor generate_training_adversarial(const torch::Tensor& images, model::ScaeModel& model,
                                            const LabelPredictor& classifier,
                                            const AttackConfig& config,
                                            const std::vector<std::uint64_t>& seeds);

}  // namespace scae::attack
