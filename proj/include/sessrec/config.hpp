#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sessrec/errors.hpp"

namespace sessrec {

struct AblationFlags {
  bool use_user_embed = true;        // concatenate the user embedding everywhere
  bool use_history_attention = true; // cross-session attention onto history
  bool use_propagation = true;       // gated graph propagation (off = raw embeddings)
};

struct TrainConfig {
  int dim_item = 50;         // d
  int dim_user = 50;         // d'
  int steps = 1;             // propagation rounds T
  int max_hist_sessions = 30;  // M, most recent history sessions fed to attention
  int max_session_len = 20;
  double lr = 1e-3;
  double l2 = 0.0;
  int batch_size = 100;
  int epochs = 10;
  AblationFlags ablation;
  bool batch_norm = false;
  std::uint64_t seed = 1;
  int precision = 32;  // 32 or 64 bit floating point
};

// Hyperparameter bundles for the two reference datasets.
inline void apply_preset(TrainConfig& cfg, const std::string& name) {
  if (name == "xing") {
    cfg.dim_item = 100;
    cfg.dim_user = 50;
    cfg.steps = 1;
    cfg.max_hist_sessions = 50;
    cfg.batch_norm = true;
  } else if (name == "reddit") {
    cfg.dim_item = 50;
    cfg.dim_user = 50;
    cfg.steps = 3;
    cfg.max_hist_sessions = 30;
    cfg.batch_norm = false;
  } else {
    throw ContractError("unknown preset: " + name + " (expected xing or reddit)");
  }
}

namespace detail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ContractError("config key " + key + ": bad boolean '" + v + "'");
}

}  // namespace detail

inline void set_config_key(TrainConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (key == "dim_item") cfg.dim_item = std::stoi(value);
    else if (key == "dim_user") cfg.dim_user = std::stoi(value);
    else if (key == "steps") cfg.steps = std::stoi(value);
    else if (key == "max_hist_sessions") cfg.max_hist_sessions = std::stoi(value);
    else if (key == "max_session_len") cfg.max_session_len = std::stoi(value);
    else if (key == "lr") cfg.lr = std::stod(value);
    else if (key == "l2") cfg.l2 = std::stod(value);
    else if (key == "batch_size") cfg.batch_size = std::stoi(value);
    else if (key == "epochs") cfg.epochs = std::stoi(value);
    else if (key == "batch_norm") cfg.batch_norm = detail::parse_bool(value, key);
    else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "precision") cfg.precision = std::stoi(value);
    else if (key == "use_user_embed") cfg.ablation.use_user_embed = detail::parse_bool(value, key);
    else if (key == "use_history_attention")
      cfg.ablation.use_history_attention = detail::parse_bool(value, key);
    else if (key == "use_propagation") cfg.ablation.use_propagation = detail::parse_bool(value, key);
    else if (key == "preset") apply_preset(cfg, value);
    else throw ContractError("unknown config key: " + key);
  } catch (const std::invalid_argument&) {
    throw ContractError("config key " + key + ": cannot parse value '" + value + "'");
  }
  if (key == "precision" && cfg.precision != 32 && cfg.precision != 64)
    throw ContractError("precision must be 32 or 64");
}

// Flat key=value lines; '#' starts a comment.
inline void load_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    while (!line.empty() && (line.back() == ' ' || line.back() == '\r' || line.back() == '\t'))
      line.pop_back();
    std::size_t start = line.find_first_not_of(" \t");
    if (start == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ContractError(path + " line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(start, eq - start);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::string value = line.substr(eq + 1);
    const auto vstart = value.find_first_not_of(" \t");
    value = vstart == std::string::npos ? "" : value.substr(vstart);
    set_config_key(cfg, key, value);
  }
}

inline std::vector<std::pair<std::string, std::string>> config_to_kv(const TrainConfig& cfg) {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto d = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  return {
      {"dim_item", std::to_string(cfg.dim_item)},
      {"dim_user", std::to_string(cfg.dim_user)},
      {"steps", std::to_string(cfg.steps)},
      {"max_hist_sessions", std::to_string(cfg.max_hist_sessions)},
      {"max_session_len", std::to_string(cfg.max_session_len)},
      {"lr", d(cfg.lr)},
      {"l2", d(cfg.l2)},
      {"batch_size", std::to_string(cfg.batch_size)},
      {"epochs", std::to_string(cfg.epochs)},
      {"batch_norm", b(cfg.batch_norm)},
      {"seed", std::to_string(cfg.seed)},
      {"precision", std::to_string(cfg.precision)},
      {"use_user_embed", b(cfg.ablation.use_user_embed)},
      {"use_history_attention", b(cfg.ablation.use_history_attention)},
      {"use_propagation", b(cfg.ablation.use_propagation)},
  };
}

}  // namespace sessrec
