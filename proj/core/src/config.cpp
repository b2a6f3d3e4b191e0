#include "scae/config.hpp"

#include <fstream>

#include "scae/errors.hpp"

namespace scae {

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = scae.to_json();
  j.update(attack.to_json());
  j.update(defense.to_json());
  j.update(eval.to_json());
  return j;
}

RunConfig RunConfig::preset(const std::string& name) {
  RunConfig c;
  if (name == "paper") return c;
  if (name == "desk") {
    c.scae = model::ScaeConfig::desk();
    c.defense = defense::DefenseConfig::desk();
    return c;
  }
  if (name == "toy") {
    c.scae = model::ScaeConfig::toy();
    c.defense = defense::DefenseConfig::desk();
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected paper, desk or toy)");
}

RunConfig apply_overrides(RunConfig base, const nlohmann::json& flat) {
  if (!flat.is_object()) throw ConfigError("config file must hold a flat JSON object");
  const auto scae_keys = base.scae.to_json();
  const auto attack_keys = base.attack.to_json();
  const auto defense_keys = base.defense.to_json();
  const auto eval_keys = base.eval.to_json();
  nlohmann::json s = nlohmann::json::object(), a = s, d = s, e = s;
  for (const auto& [key, value] : flat.items()) {
    if (scae_keys.contains(key)) {
      s[key] = value;
    } else if (attack_keys.contains(key)) {
      a[key] = value;
    } else if (defense_keys.contains(key)) {
      d[key] = value;
    } else if (eval_keys.contains(key)) {
      e[key] = value;
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  base.scae = model::ScaeConfig::from_json(s, base.scae);
  base.attack = attack::AttackConfig::from_json(a, base.attack);
  base.defense = defense::DefenseConfig::from_json(d, base.defense);
  base.eval = eval::EvalConfig::from_json(e, base.eval);
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& err) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + err.what());
  }
  return apply_overrides(std::move(base), j);
}

}  // namespace scae
