#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "scae/attack.hpp"
#include "scae/classifiers.hpp"
#include "scae/data.hpp"
#include "scae/model.hpp"

namespace scae::defense {

enum class Regime { kPlain, kAt, kAd, kHat, kNtat };
std::string to_string(Regime regime);
Regime parse_regime(const std::string& name);

/// Which student/teacher encoding the distillation distance compares.
enum class DistillSource { kPrior, kPosterior };

/// RMSProp with momentum and a staircase learning-rate decay.
struct OptimizerSettings {
  double learning_rate = 3e-5;
  double momentum = 0.9;
  double epsilon = 1e-6;
  double decay = 0.9;  // moving-average factor of the squared gradient
  std::int64_t lr_decay_steps = 10000;
  double lr_decay_rate = 0.96;
  double template_lr_scale = 1.0;
};

/// lr0 * rate^floor(step / decay_steps).
double learning_rate_at(const OptimizerSettings& settings, std::int64_t step);

struct DefenseConfig {
  Regime regime = Regime::kPlain;
  int interval = 1;     // k: normal batches between adversarial ones
  double lambda = 0.5;  // distillation weight
  int n_ep = 100;       // PLAIN / AT / AD epochs
  int n_ad = 50;        // HAT / NTAT first phase
  int n_at = 50;        // HAT / NTAT second phase
  int batch_size = 100;
  std::int64_t train_limit = 0;  // 0: the whole training split
  bool random_shift = false;     // training-time placement augmentation
  bool template_patch_init = false;
  DistillSource distill_source = DistillSource::kPrior;
  int linear_epochs = 200;
  int checkpoint_every = 0;  // epochs; 0 disables intermediate checkpoints
  OptimizerSettings optimizer;
  attack::AttackConfig generator = attack::AttackConfig::training_profile();

  void validate() const;
  /// Generator settings are written with a "generator_" prefix so the flat
  /// config file can hold both attack profiles.
  nlohmann::json to_json() const;
  static DefenseConfig from_json(const nlohmann::json& j, DefenseConfig base);

  static DefenseConfig paper();
  /// Larger learning rate and template init that train in a few epochs.
  static DefenseConfig desk();
};

/// Alternates k normal batches with one adversarial batch.
class BatchScheduler {
 public:
  explicit BatchScheduler(int k);
  /// True iff the counter equals k (then resets to 0); otherwise increments.
  bool next();
  int counter() const { return n_bch_; }

 private:
  int k_;
  int n_bch_ = 0;
};

bool is_adversarial_batch(int& n_bch, int k);

/// Eq. 7 split: non_rec on the encoding of `input`, rec between the decoding
/// of `input` and `target`.
model::LossBreakdown loss_at(const torch::Tensor& input, const torch::Tensor& target,
                             model::ScaeModel& model, const model::EncodeOptions& options = {});

struct DistillLoss {
  model::LossBreakdown at;  // L_AT(x' -> x) for the student
  torch::Tensor distill;    // mean over the batch of ||E_tch(x) - E_stu(x')||_2
  torch::Tensor total;      // (1 - lambda) * at.total + lambda * distill
};

/// `clean` is the reconstruction target and the teacher input, `input` the
/// student input. The teacher runs without gradient in inference mode.
DistillLoss loss_ad(const torch::Tensor& clean, const torch::Tensor& input,
                    model::ScaeModel& teacher, model::ScaeModel& student, double lambda,
                    DistillSource source = DistillSource::kPrior,
                    const model::EncodeOptions& options = {});

struct EpochStats {
  int epoch = 0;
  std::string phase;
  double total_loss = 0.0;  // batch means
  double rec = 0.0;
  double non_rec = 0.0;
  double distill = 0.0;
  int adv_batches = 0;
  int normal_batches = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  std::string checkpoint;

  void write_csv(const std::filesystem::path& path) const;
};

/// Produces adversarial versions of a batch for training. `batch_seed`
/// identifies the batch; per-sample streams derive from it.
using AdversarialGenerator = std::function<torch::Tensor(
    const torch::Tensor& images, model::ScaeModel& model, const attack::LabelPredictor& target,
    std::uint64_t batch_seed)>;

/// Sign-step generator with the given profile.
AdversarialGenerator make_training_generator(const attack::AttackConfig& config);

struct TrainOptions {
  std::uint64_t seed = 0;
  model::ScaeModel* teacher = nullptr;  // required by AD and HAT
  AdversarialGenerator generator;       // defaults to make_training_generator(config.generator)
  /// Called after each epoch with the 1-based epoch index.
  std::function<void(int, model::ScaeModel&, const TrainReport&)> on_epoch;
  bool verbose = false;
};

struct TrainResult {
  model::ScaeModel model{nullptr};
  TrainReport report;
  classify::LinearClassifier head;  // last generator target
  std::int64_t steps = 0;
};

/// Runs the configured regime from a fresh model: PLAIN and AT/AD for n_ep
/// epochs, HAT as n_ad AD epochs then n_at AT epochs sharing one batch
/// counter, NTAT as n_ad plain epochs then n_at AT epochs.
TrainResult train(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                  const DefenseConfig& config, const TrainOptions& options);

TrainResult train_plain(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                        DefenseConfig config, const TrainOptions& options);
TrainResult train_at(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                     DefenseConfig config, const TrainOptions& options);
TrainResult train_ad(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                     DefenseConfig config, const TrainOptions& options);
TrainResult train_hat(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                      DefenseConfig config, const TrainOptions& options);
TrainResult train_ntat(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                       DefenseConfig config, const TrainOptions& options);

/// Reduced posterior presences of every image, in dataset order; [N, K].
torch::Tensor encode_posterior_features(model::ScaeModel& model, const torch::Tensor& images,
                                        int batch_size = 500);

}  // namespace scae::defense
