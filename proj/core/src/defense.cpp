#include "scae/defense.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

#include "scae/errors.hpp"
#include "scae/rng.hpp"

namespace scae::defense {

namespace {

// Independent seed streams derived from the run seed.
enum Stream : std::uint64_t {
  kInitStream = 0,
  kNoiseStream = 1,
  kTemplateStream = 2,
  kShuffleStream = 1000,
  kShiftStream = 2000,
  kGeneratorStream = 3000,
};

std::string to_string(DistillSource s) { return s == DistillSource::kPrior ? "prior" : "posterior"; }

DistillSource parse_distill_source(const std::string& name) {
  if (name == "prior") return DistillSource::kPrior;
  if (name == "posterior") return DistillSource::kPosterior;
  throw ConfigError("unknown distill_source '" + name + "' (expected prior or posterior)");
}

torch::Tensor distill_features(const model::ScaeOutputs& out, DistillSource source) {
  return source == DistillSource::kPrior ? out.prior_presence
                                         : classify::reduce_posterior(out.posterior_presence);
}

enum class Phase { kPlain, kAt, kAd };

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::kPlain: return "plain";
    case Phase::kAt: return "at";
    case Phase::kAd: return "ad";
  }
  return "?";
}

// Moves each centred digit by a uniform offset, equivalent to placing the
// source at a uniform position on the canvas.
torch::Tensor random_shift(const torch::Tensor& images, std::mt19937_64& rng) {
  const int canvas = static_cast<int>(images.size(1));
  const int src = std::min(28, canvas);
  const int centre = (canvas - src) / 2;
  auto out = torch::empty_like(images);
  for (std::int64_t i = 0; i < images.size(0); ++i) {
    auto [dy, dx] = data::canvas_offset(src, src, canvas, data::Placement::kRandomShift, &rng);
    out[i].copy_(torch::roll(images[i], {dy - centre, dx - centre}, {0, 1}));
  }
  return out;
}

}  // namespace

std::string to_string(Regime regime) {
  switch (regime) {
    case Regime::kPlain: return "plain";
    case Regime::kAt: return "at";
    case Regime::kAd: return "ad";
    case Regime::kHat: return "hat";
    case Regime::kNtat: return "ntat";
  }
  return "unknown";
}

Regime parse_regime(const std::string& name) {
  if (name == "plain") return Regime::kPlain;
  if (name == "at") return Regime::kAt;
  if (name == "ad") return Regime::kAd;
  if (name == "hat") return Regime::kHat;
  if (name == "ntat") return Regime::kNtat;
  throw ConfigError("unknown regime '" + name + "' (expected plain, at, ad, hat or ntat)");
}

double learning_rate_at(const OptimizerSettings& settings, std::int64_t step) {
  const auto stairs = step / settings.lr_decay_steps;
  return settings.learning_rate * std::pow(settings.lr_decay_rate, static_cast<double>(stairs));
}

void DefenseConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid DefenseConfig: " + what);
  };
  require(interval >= 0, "interval >= 0");
  require(lambda >= 0 && lambda <= 1, "lambda in [0,1]");
  require(n_ep >= 0 && n_ad >= 0 && n_at >= 0, "epoch counts >= 0");
  require(batch_size >= 1, "batch_size >= 1");
  require(train_limit >= 0, "train_limit >= 0");
  require(linear_epochs >= 1, "linear_epochs >= 1");
  require(checkpoint_every >= 0, "checkpoint_every >= 0");
  require(optimizer.learning_rate > 0 && optimizer.epsilon > 0, "learning_rate, epsilon > 0");
  require(optimizer.momentum >= 0 && optimizer.momentum < 1, "momentum in [0,1)");
  require(optimizer.decay > 0 && optimizer.decay < 1, "decay in (0,1)");
  require(optimizer.lr_decay_steps >= 1, "lr_decay_steps >= 1");
  require(optimizer.lr_decay_rate > 0, "lr_decay_rate > 0");
  require(optimizer.template_lr_scale > 0, "template_lr_scale > 0");
  generator.validate();
}

nlohmann::json DefenseConfig::to_json() const {
  nlohmann::json j = {{"regime", to_string(regime)},
                      {"interval", interval},
                      {"lambda", lambda},
                      {"n_ep", n_ep},
                      {"n_ad", n_ad},
                      {"n_at", n_at},
                      {"batch_size", batch_size},
                      {"train_limit", train_limit},
                      {"random_shift", random_shift},
                      {"template_patch_init", template_patch_init},
                      {"distill_source", to_string(distill_source)},
                      {"linear_epochs", linear_epochs},
                      {"checkpoint_every", checkpoint_every},
                      {"learning_rate", optimizer.learning_rate},
                      {"momentum", optimizer.momentum},
                      {"rmsprop_epsilon", optimizer.epsilon},
                      {"rmsprop_decay", optimizer.decay},
                      {"lr_decay_steps", optimizer.lr_decay_steps},
                      {"lr_decay_rate", optimizer.lr_decay_rate},
                      {"template_lr_scale", optimizer.template_lr_scale}};
  const auto gen = generator.to_json();
  for (const auto& [key, value] : gen.items()) j["generator_" + key] = value;
  return j;
}

DefenseConfig DefenseConfig::from_json(const nlohmann::json& j, DefenseConfig base) {
  if (!j.is_object()) throw ConfigError("DefenseConfig JSON must be an object");
  const auto known = base.to_json();
  nlohmann::json gen = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown DefenseConfig key '" + key + "'");
    if (key.rfind("generator_", 0) == 0) gen[key.substr(10)] = value;
  }
  auto m = known;
  m.update(j);
  try {
    base.regime = parse_regime(m.at("regime").get<std::string>());
    base.interval = m.at("interval").get<int>();
    base.lambda = m.at("lambda").get<double>();
    base.n_ep = m.at("n_ep").get<int>();
    base.n_ad = m.at("n_ad").get<int>();
    base.n_at = m.at("n_at").get<int>();
    base.batch_size = m.at("batch_size").get<int>();
    base.train_limit = m.at("train_limit").get<std::int64_t>();
    base.random_shift = m.at("random_shift").get<bool>();
    base.template_patch_init = m.at("template_patch_init").get<bool>();
    base.distill_source = parse_distill_source(m.at("distill_source").get<std::string>());
    base.linear_epochs = m.at("linear_epochs").get<int>();
    base.checkpoint_every = m.at("checkpoint_every").get<int>();
    base.optimizer.learning_rate = m.at("learning_rate").get<double>();
    base.optimizer.momentum = m.at("momentum").get<double>();
    base.optimizer.epsilon = m.at("rmsprop_epsilon").get<double>();
    base.optimizer.decay = m.at("rmsprop_decay").get<double>();
    base.optimizer.lr_decay_steps = m.at("lr_decay_steps").get<std::int64_t>();
    base.optimizer.lr_decay_rate = m.at("lr_decay_rate").get<double>();
    base.optimizer.template_lr_scale = m.at("template_lr_scale").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad DefenseConfig value: ") + e.what());
  }
  base.generator = attack::AttackConfig::from_json(gen, base.generator);
  base.validate();
  return base;
}

DefenseConfig DefenseConfig::paper() { return DefenseConfig{}; }

DefenseConfig DefenseConfig::desk() {
  DefenseConfig c;
  c.n_ep = 10;
  c.n_ad = 5;
  c.n_at = 5;
  c.train_limit = 10000;
  c.template_patch_init = true;
  c.optimizer.learning_rate = 3e-4;
  c.optimizer.decay = 0.99;
  c.optimizer.template_lr_scale = 10.0;
  return c;
}

BatchScheduler::BatchScheduler(int k) : k_(k) {
  if (k < 0) throw ConfigError("batch interval k must be >= 0");
}

bool BatchScheduler::next() { return is_adversarial_batch(n_bch_, k_); }

bool is_adversarial_batch(int& n_bch, int k) {
  if (n_bch == k) {
    n_bch = 0;
    return true;
  }
  ++n_bch;
  return false;
}

model::LossBreakdown loss_at(const torch::Tensor& input, const torch::Tensor& target,
                             model::ScaeModel& model, const model::EncodeOptions& options) {
  auto opts = options;
  opts.with_reconstruction = true;
  auto out = model->encode(input, opts);
  return model::compute_loss(model, input, target, out);
}

DistillLoss loss_ad(const torch::Tensor& clean, const torch::Tensor& input,
                    model::ScaeModel& teacher, model::ScaeModel& student, double lambda,
                    DistillSource source, const model::EncodeOptions& options) {
  torch::Tensor reference;
  {
    torch::NoGradGuard no_grad;
    reference = distill_features(
        teacher->encode(clean, {.training = false, .with_reconstruction = false}), source);
  }
  auto opts = options;
  opts.with_reconstruction = true;
  auto out = student->encode(input, opts);
  DistillLoss loss;
  loss.at = model::compute_loss(student, input, clean, out);
  loss.distill = (reference - distill_features(out, source)).norm(2, 1).mean();
  loss.total = (1.0 - lambda) * loss.at.total + lambda * loss.distill;
  return loss;
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write train report: " + path.string());
  out << "epoch,total_loss,rec,non_rec,distill,adv_batches\n";
  out << std::setprecision(9);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.total_loss << ',' << e.rec << ',' << e.non_rec << ',' << e.distill
        << ',' << e.adv_batches << '\n';
  }
  if (!out) throw std::runtime_error("failed writing train report: " + path.string());
}

AdversarialGenerator make_training_generator(const attack::AttackConfig& config) {
  return [config](const torch::Tensor& images, model::ScaeModel& model,
                  const attack::LabelPredictor& target, std::uint64_t batch_seed) {
    std::vector<std::uint64_t> seeds;
    for (std::int64_t i = 0; i < images.size(0); ++i) {
      seeds.push_back(derive_seed(batch_seed, static_cast<std::uint64_t>(i)));
    }
    return attack::generate_training_adversarial(images, model, target, config, seeds);
  };
}

torch::Tensor encode_posterior_features(model::ScaeModel& model, const torch::Tensor& images,
                                        int batch_size) {
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> parts;
  for (std::int64_t i = 0; i < images.size(0); i += batch_size) {
    auto out = model->encode(images.slice(0, i, i + batch_size),
                             {.training = false, .with_reconstruction = false});
    parts.push_back(classify::reduce_posterior(out.posterior_presence));
  }
  return torch::cat(parts);
}

TrainResult train(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                  const DefenseConfig& config, const TrainOptions& options) {
  config.validate();
  const bool needs_teacher = config.regime == Regime::kAd || config.regime == Regime::kHat;
  if (needs_teacher && options.teacher == nullptr) {
    throw ConfigError(to_string(config.regime) + " training needs a pre-trained teacher");
  }

  std::vector<std::pair<Phase, int>> phases;
  switch (config.regime) {
    case Regime::kPlain: phases = {{Phase::kPlain, config.n_ep}}; break;
    case Regime::kAt: phases = {{Phase::kAt, config.n_ep}}; break;
    case Regime::kAd: phases = {{Phase::kAd, config.n_ep}}; break;
    case Regime::kHat: phases = {{Phase::kAd, config.n_ad}, {Phase::kAt, config.n_at}}; break;
    case Regime::kNtat: phases = {{Phase::kPlain, config.n_ad}, {Phase::kAt, config.n_at}}; break;
  }

  const data::Dataset subset =
      config.train_limit > 0 ? train_set.head(config.train_limit) : train_set;
  TrainResult result;
  result.model = model::init_model(scae_config, derive_seed(options.seed, kInitStream));
  auto& model = result.model;
  if (config.template_patch_init) {
    model::init_templates_from_patches(model, subset.images,
                                       derive_seed(options.seed, kTemplateStream));
  }
  model->train();

  model::ScaeModel* teacher = options.teacher;
  if (teacher != nullptr) {
    (*teacher)->eval();
    for (auto& p : (*teacher)->parameters()) p.set_requires_grad(false);
  }

  // Templates get their own (usually larger) step size.
  std::vector<torch::Tensor> body, templates;
  for (const auto& item : model->named_parameters()) {
    (item.key() == "template_logits" ? templates : body).push_back(item.value());
  }
  const auto& os = config.optimizer;
  auto rms = [&](double lr) {
    return std::make_unique<torch::optim::RMSpropOptions>(
        torch::optim::RMSpropOptions(lr).alpha(os.decay).eps(os.epsilon).momentum(os.momentum));
  };
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(body, rms(os.learning_rate));
  groups.emplace_back(templates, rms(os.learning_rate * os.template_lr_scale));
  torch::optim::RMSprop optimizer(groups, torch::optim::RMSpropOptions(os.learning_rate));

  auto noise = make_generator(derive_seed(options.seed, kNoiseStream));
  std::mt19937_64 shift_rng(derive_seed(options.seed, kShiftStream));
  AdversarialGenerator generator =
      options.generator ? options.generator : make_training_generator(config.generator);
  BatchScheduler scheduler(config.interval);  // one counter across phases
  classify::LinearOptions linear_options;
  linear_options.epochs = config.linear_epochs;

  int epoch = 0;
  for (const auto& [phase, epochs] : phases) {
    for (int e = 0; e < epochs; ++e, ++epoch) {
      const bool adversarial_phase = phase != Phase::kPlain;
      std::unique_ptr<attack::LinearPredictor> target;
      if (adversarial_phase) {
        // The generator attacks a linear head fitted to the current model.
        result.head = classify::train_linear(encode_posterior_features(model, subset.images),
                                             subset.labels, linear_options);
        target = std::make_unique<attack::LinearPredictor>(result.head);
        model->train();
      }

      EpochStats stats;
      stats.epoch = epoch + 1;
      stats.phase = phase_name(phase);
      data::BatchStream stream(subset, config.batch_size, true,
                               derive_seed(options.seed, kShuffleStream + epoch));
      int batches = 0;
      while (auto batch = stream.next()) {
        auto x = config.random_shift ? random_shift(batch->images, shift_rng) : batch->images;
        torch::Tensor input = x;
        bool adversarial = false;
        if (adversarial_phase && scheduler.next()) {
          adversarial = true;
          input = generator(x, model, *target,
                            derive_seed(options.seed, kGeneratorStream + result.steps))
                      .detach();
          model->train();
        }

        const model::EncodeOptions enc{.training = true, .with_reconstruction = true,
                                       .generator = &noise};
        torch::Tensor loss;
        double rec = 0, non_rec = 0, distill = 0;
        if (phase == Phase::kAd) {
          auto l = loss_ad(x, input, *teacher, model, config.lambda, config.distill_source, enc);
          loss = l.total;
          rec = l.at.rec.item<double>();
          non_rec = l.at.non_rec.item<double>();
          distill = l.distill.item<double>();
        } else {
          auto l = loss_at(input, x, model, enc);
          loss = l.total;
          rec = l.rec.item<double>();
          non_rec = l.non_rec.item<double>();
        }

        const double lr = learning_rate_at(os, result.steps);
        auto& pg = optimizer.param_groups();
        static_cast<torch::optim::RMSpropOptions&>(pg[0].options()).lr(lr);
        static_cast<torch::optim::RMSpropOptions&>(pg[1].options()).lr(lr * os.template_lr_scale);
        optimizer.zero_grad();
        loss.backward();
        optimizer.step();
        ++result.steps;

        stats.total_loss += loss.item<double>();
        stats.rec += rec;
        stats.non_rec += non_rec;
        stats.distill += distill;
        (adversarial ? stats.adv_batches : stats.normal_batches)++;
        ++batches;
      }
      if (batches > 0) {
        stats.total_loss /= batches;
        stats.rec /= batches;
        stats.non_rec /= batches;
        stats.distill /= batches;
      }
      result.report.epochs.push_back(stats);
      if (options.verbose) {
        std::cerr << "[" << to_string(config.regime) << "] epoch " << stats.epoch << " ("
                  << stats.phase << ") loss " << stats.total_loss << " rec " << stats.rec
                  << " non_rec " << stats.non_rec << " distill " << stats.distill << " adv "
                  << stats.adv_batches << "/" << batches << std::endl;
      }
      if (options.on_epoch) options.on_epoch(stats.epoch, model, result.report);
    }
  }
  model->eval();
  return result;
}

TrainResult train_plain(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                        DefenseConfig config, const TrainOptions& options) {
  config.regime = Regime::kPlain;
  return train(train_set, scae_config, config, options);
}

TrainResult train_at(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                     DefenseConfig config, const TrainOptions& options) {
  config.regime = Regime::kAt;
  return train(train_set, scae_config, config, options);
}

TrainResult train_ad(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                     DefenseConfig config, const TrainOptions& options) {
  config.regime = Regime::kAd;
  return train(train_set, scae_config, config, options);
}

TrainResult train_hat(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                      DefenseConfig config, const TrainOptions& options) {
  config.regime = Regime::kHat;
  return train(train_set, scae_config, config, options);
}

TrainResult train_ntat(const data::Dataset& train_set, const model::ScaeConfig& scae_config,
                       DefenseConfig config, const TrainOptions& options) {
  config.regime = Regime::kNtat;
  return train(train_set, scae_config, config, options);
}

}  // namespace scae::defense
