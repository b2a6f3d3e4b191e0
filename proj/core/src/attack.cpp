#include "scae/attack.hpp"

#include <cmath>

#include "scae/errors.hpp"
#include "scae/rng.hpp"

namespace scae::attack {

namespace {

std::string to_string(StepRule rule) { return rule == StepRule::kAdam ? "adam" : "sign"; }

StepRule parse_step_rule(const std::string& name) {
  if (name == "adam") return StepRule::kAdam;
  if (name == "sign") return StepRule::kSign;
  throw ConfigError("unknown step_rule '" + name + "' (expected adam or sign)");
}

// JSON has no infinity; the unbounded alpha ceiling is written as null.
nlohmann::json bound_to_json(double v) {
  return std::isinf(v) ? nlohmann::json(nullptr) : nlohmann::json(v);
}

double bound_from_json(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

void AttackConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid AttackConfig: " + what);
  };
  require(alpha_lb < alpha_init, "alpha_lb < alpha_init");
  require(alpha_init <= alpha_ub, "alpha_init <= alpha_ub");
  require(alpha_blowup > 1, "alpha_blowup > 1");
  require(n_outer >= 1 && n_inner >= 1, "n_outer, n_inner >= 1");
  require(beta > 0, "beta > 0");
  require(eps_clamp > 0 && eps_clamp < 1, "0 < eps_clamp < 1");
  require(adam.learning_rate > 0 && adam.epsilon > 0, "adam lr and epsilon > 0");
  require(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1,
          "adam betas in [0,1)");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"alpha_init", alpha_init},     {"alpha_lb", alpha_lb},
          {"alpha_ub", bound_to_json(alpha_ub)}, {"alpha_blowup", alpha_blowup},
          {"n_outer", n_outer},           {"n_inner", n_inner},
          {"beta", beta},                 {"eps_clamp", eps_clamp},
          {"step_rule", to_string(rule)}, {"adam_lr", adam.learning_rate},
          {"adam_beta1", adam.beta1},     {"adam_beta2", adam.beta2},
          {"adam_epsilon", adam.epsilon}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j, AttackConfig base) {
  if (!j.is_object()) throw ConfigError("AttackConfig JSON must be an object");
  const auto known = base.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown AttackConfig key '" + key + "'");
  }
  auto m = known;
  m.update(j);
  try {
    base.alpha_init = m.at("alpha_init").get<double>();
    base.alpha_lb = m.at("alpha_lb").get<double>();
    base.alpha_ub = bound_from_json(m.at("alpha_ub"));
    base.alpha_blowup = m.at("alpha_blowup").get<double>();
    base.n_outer = m.at("n_outer").get<int>();
    base.n_inner = m.at("n_inner").get<int>();
    base.beta = m.at("beta").get<double>();
    base.eps_clamp = m.at("eps_clamp").get<double>();
    base.rule = parse_step_rule(m.at("step_rule").get<std::string>());
    base.adam.learning_rate = m.at("adam_lr").get<double>();
    base.adam.beta1 = m.at("adam_beta1").get<double>();
    base.adam.beta2 = m.at("adam_beta2").get<double>();
    base.adam.epsilon = m.at("adam_epsilon").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad AttackConfig value: ") + e.what());
  }
  base.validate();
  return base;
}

AttackConfig AttackConfig::evaluation_profile() { return AttackConfig{}; }

AttackConfig AttackConfig::training_profile() {
  AttackConfig c;
  c.n_inner = 5;
  c.n_outer = 30;
  c.rule = StepRule::kSign;
  return c;
}

torch::Tensor KMeansPredictor::predict(const model::ScaeOutputs& outputs) const {
  const auto features = clf_.source == classify::FeatureSource::kPrior
                            ? outputs.prior_presence
                            : classify::reduce_posterior(outputs.posterior_presence);
  return classify::predict_kmeans(clf_, features.detach());
}

std::string KMeansPredictor::name() const {
  return classify::to_string(clf_.source) + "_kmeans";
}

torch::Tensor LinearPredictor::predict(const model::ScaeOutputs& outputs) const {
  return classify::predict_linear(clf_,
                                  classify::reduce_posterior(outputs.posterior_presence).detach());
}

torch::Tensor ConstantPredictor::predict(const model::ScaeOutputs& outputs) const {
  return torch::full({outputs.prior_presence.size(0)}, label_, torch::kInt64);
}

std::string to_string(AttackStatus status) {
  switch (status) {
    case AttackStatus::kSucceeded: return "succeeded";
    case AttackStatus::kFailed: return "failed";
    case AttackStatus::kNoActiveCapsule: return "no_active_capsule";
  }
  return "unknown";
}

std::vector<std::int64_t> select_target_capsules(const torch::Tensor& prior_presence) {
  TORCH_CHECK(prior_presence.dim() == 1 && prior_presence.size(0) >= 1,
              "select_target_capsules expects a non-empty vector");
  auto p = prior_presence.detach().to(torch::kFloat64).contiguous();
  const auto mean = p.mean().item<double>();
  auto acc = p.accessor<double, 1>();
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < p.size(0); ++i) {
    if (acc[i] > mean) out.push_back(i);
  }
  return out;
}

torch::Tensor to_w(const torch::Tensor& x, double eps_clamp) {
  return torch::atanh((2 * x - 1) * eps_clamp);
}

FromW from_w(const torch::Tensor& w, const torch::Tensor& p_prime, const torch::Tensor& x) {
  auto adv = 0.5 * (torch::tanh(w + p_prime) + 1);
  return {adv, adv - x};
}

torch::Tensor attack_objective(const torch::Tensor& x_adv, const torch::Tensor& x,
                               model::ScaeModel& model, const torch::Tensor& target_mask,
                               const torch::Tensor& alpha) {
  auto out = model->encode(x_adv, {.training = false, .with_reconstruction = false});
  auto distance = (x_adv - x).flatten(1).norm(2, 1);
  return distance + alpha * (out.prior_presence * target_mask).sum(1);
}

torch::Tensor perturbation_gradient(const torch::Tensor& objective, const torch::Tensor& p_prime) {
  auto grad = torch::autograd::grad({objective.sum()}, {p_prime})[0];
  return torch::nan_to_num(grad, 0.0, 0.0, 0.0);
}

void sign_step(torch::Tensor& p_prime, const torch::Tensor& grad, double beta) {
  torch::NoGradGuard no_grad;
  p_prime.sub_(beta * torch::sign(grad));
}

void adam_step(torch::Tensor& p_prime, const torch::Tensor& grad, AdamState& state,
               const AdamSettings& settings) {
  torch::NoGradGuard no_grad;
  if (!state.m.defined()) {
    state.m = torch::zeros_like(grad);
    state.v = torch::zeros_like(grad);
  }
  const double t = ++state.t;
  state.m.mul_(settings.beta1).add_(grad, 1 - settings.beta1);
  state.v.mul_(settings.beta2).addcmul_(grad, grad, 1 - settings.beta2);
  auto m_hat = state.m / (1 - std::pow(settings.beta1, t));
  auto v_hat = state.v / (1 - std::pow(settings.beta2, t));
  p_prime.sub_(settings.learning_rate * m_hat / (v_hat.sqrt() + settings.epsilon));
}

AlphaState update_alpha(AlphaState state, bool round_succeeded, double blowup) {
  if (round_succeeded) {
    state.ub = state.alpha;
  } else {
    state.lb = state.alpha;
  }
  state.alpha = std::isinf(state.ub) ? state.alpha * blowup : 0.5 * (state.ub + state.lb);
  return state;
}

std::vector<AttackResult> run_attack_batch(const torch::Tensor& images, model::ScaeModel& model,
                                           const LabelPredictor& classifier,
                                           const AttackConfig& config,
                                           const std::vector<std::uint64_t>& seeds,
                                           const AttackRunOptions& options) {
  config.validate();
  TORCH_CHECK(images.dim() == 3, "run_attack_batch expects [B,H,W] images");
  const auto B = images.size(0);
  if (static_cast<std::int64_t>(seeds.size()) != B) {
    throw ConfigError("run_attack_batch needs one seed per image");
  }
  const bool was_training = model->is_training();
  model->eval();

  std::vector<AttackResult> results(static_cast<std::size_t>(B));
  torch::Tensor clean_labels;
  torch::Tensor clean_prior;
  {
    torch::NoGradGuard no_grad;
    auto clean = model->encode(images, {.training = false, .with_reconstruction = false});
    clean_labels = classifier.predict(clean).to(torch::kInt64);
    clean_prior = clean.prior_presence;
  }

  // S is fixed from the clean encoding; samples with an empty S are not
  // attacked at all.
  const auto K = clean_prior.size(1);
  std::vector<std::int64_t> active;
  auto mask = torch::zeros({B, K}, images.options());
  for (std::int64_t b = 0; b < B; ++b) {
    auto& r = results[static_cast<std::size_t>(b)];
    r.clean_label = static_cast<int>(clean_labels[b].item<std::int64_t>());
    r.adversarial_label = r.clean_label;
    r.perturbation = torch::zeros_like(images[b]);
    r.adversarial = images[b].clone();
    r.target_set = select_target_capsules(clean_prior[b]);
    if (r.target_set.empty()) {
      r.status = AttackStatus::kNoActiveCapsule;
      continue;
    }
    for (auto k : r.target_set) mask[b][k] = 1.0;
    active.push_back(b);
  }
  if (active.empty()) {
    model->train(was_training);
    return results;
  }

  const auto n = static_cast<std::int64_t>(active.size());
  auto idx = torch::tensor(active, torch::kInt64);
  const auto x = images.index_select(0, idx);
  const auto target_mask = mask.index_select(0, idx);
  const auto w = to_w(x, config.eps_clamp);
  const auto act_labels = clean_labels.index_select(0, idx);

  std::vector<torch::Generator> gens;
  std::vector<AlphaState> alpha(static_cast<std::size_t>(n),
                                AlphaState{config.alpha_init, config.alpha_ub, config.alpha_lb});
  for (auto b : active) gens.push_back(make_generator(seeds[static_cast<std::size_t>(b)]));
  std::vector<double> best(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  std::vector<int> best_label(static_cast<std::size_t>(n), -1);
  auto best_adv = x.clone();
  const auto clean_active = act_labels.contiguous();
  auto clean_acc = clean_active.accessor<std::int64_t, 1>();

  for (int outer = 0; outer < config.n_outer; ++outer) {
    std::vector<torch::Tensor> starts;
    for (auto& g : gens) starts.push_back(torch::rand(x.sizes().slice(1), g, x.options()));
    auto p = torch::stack(starts).requires_grad_(true);
    AdamState adam;
    std::vector<double> alpha_values;
    for (const auto& a : alpha) alpha_values.push_back(a.alpha);
    auto alpha_t = torch::tensor(alpha_values, x.options());
    std::vector<char> round_success(static_cast<std::size_t>(n), 0);
    // Samples whose objective went non-finite sit out the rest of the round.
    std::vector<double> live(static_cast<std::size_t>(n), 1.0);

    for (int inner = 0; inner <= config.n_inner; ++inner) {
      auto [adv, pert] = from_w(w, p, x);
      auto out = model->encode(adv, {.training = false, .with_reconstruction = false});
      auto l2 = pert.flatten(1).norm(2, 1);
      auto objective = l2 + alpha_t * (out.prior_presence * target_mask).sum(1);

      auto labels = classifier.predict(out).to(torch::kInt64).contiguous();
      auto l2_d = l2.detach().to(torch::kFloat64).contiguous();
      auto obj_d = objective.detach().to(torch::kFloat64).contiguous();
      auto label_acc = labels.accessor<std::int64_t, 1>();
      auto l2_acc = l2_d.accessor<double, 1>();
      auto obj_acc = obj_d.accessor<double, 1>();
      for (std::int64_t i = 0; i < n; ++i) {
        const auto si = static_cast<std::size_t>(i);
        if (live[si] == 0.0) continue;
        if (!std::isfinite(obj_acc[i])) {
          live[si] = 0.0;
          round_success[si] = 0;
          continue;
        }
        // Candidates are the iterates produced by an update; the random
        // start of a round is never returned on its own.
        if (inner == 0) continue;
        const bool mis = label_acc[i] != clean_acc[i];
        const double norm = l2_acc[i];
        if (options.observer) {
          options.observer({active[si], outer, inner, alpha[si].alpha, norm, mis,
                            adv[i].detach().clone()});
        }
        if (mis) {
          round_success[si] = 1;
          if (norm < best[si]) {
            best[si] = norm;
            best_label[si] = static_cast<int>(label_acc[i]);
            best_adv[i].copy_(adv[i].detach());
          }
        }
      }
      if (inner == config.n_inner) break;

      auto live_t = torch::tensor(live, x.options());
      auto grad = perturbation_gradient(objective * live_t, p) * live_t.view({n, 1, 1});
      if (config.rule == StepRule::kSign) {
        sign_step(p, grad, config.beta);
      } else {
        adam_step(p, grad, adam, config.adam);
      }
    }
    for (std::int64_t i = 0; i < n; ++i) {
      const auto si = static_cast<std::size_t>(i);
      if (round_success[si]) results[static_cast<std::size_t>(active[si])].rounds_succeeded++;
      alpha[si] = update_alpha(alpha[si], round_success[si] != 0, config.alpha_blowup);
    }
  }

  for (std::int64_t i = 0; i < n; ++i) {
    const auto si = static_cast<std::size_t>(i);
    auto& r = results[static_cast<std::size_t>(active[si])];
    if (std::isinf(best[si])) {
      r.status = AttackStatus::kFailed;
      continue;
    }
    r.success = true;
    r.status = AttackStatus::kSucceeded;
    r.adversarial = best_adv[i].clone();
    r.perturbation = r.adversarial - x[i];
    r.l2_norm = best[si];
    r.adversarial_label = best_label[si];
  }
  model->train(was_training);
  return results;
}

AttackResult run_evasion_attack(const torch::Tensor& x, model::ScaeModel& model,
                                const LabelPredictor& classifier, const AttackConfig& config,
                                std::uint64_t seed, const AttackRunOptions& options) {
  TORCH_CHECK(x.dim() == 2, "run_evasion_attack expects an [H,W] image");
  return run_attack_batch(x.unsqueeze(0), model, classifier, config, {seed}, options).front();
}

torch::Tensor generate_training_adversarial(const torch::Tensor& images, model::ScaeModel& model,
                                            const LabelPredictor& classifier,
                                            const AttackConfig& config,
                                            const std::vector<std::uint64_t>& seeds) {
  auto results = run_attack_batch(images, model, classifier, config, seeds);
  std::vector<torch::Tensor> out;
  out.reserve(results.size());
  for (const auto& r : results) out.push_back(r.adversarial);
  return torch::stack(out);
}

}  // namespace scae::attack
