#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "scae/attack.hpp"
#include "scae/defense.hpp"
#include "scae/eval.hpp"
#include "scae/model.hpp"

namespace scae {

/// Everything a CLI run can configure. The config file is one flat JSON
/// object; every key belongs to exactly one of the four sections.
struct RunConfig {
  model::ScaeConfig scae;
  attack::AttackConfig attack;  // evaluation attack
  defense::DefenseConfig defense;
  eval::EvalConfig eval;

  nlohmann::json to_json() const;

  /// Published settings, or the reduced desk-scale variant, or the tiny
  /// configuration used by gradient checks.
  static RunConfig preset(const std::string& name);
};

/// Overlays a flat JSON object on `base`. Unknown keys raise ConfigError.
RunConfig apply_overrides(RunConfig base, const nlohmann::json& flat);

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);

}  // namespace scae
