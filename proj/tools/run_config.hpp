#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kanmix/errors.hpp"
#include "kanmix/mixer.hpp"

namespace kanmix::cli {

struct DatasetShape {
  std::size_t channels;
  std::size_t image_size;
  std::size_t classes;
};

inline DatasetShape dataset_shape(const std::string& name) {
  if (name == "mnist") return {1, 28, 10};
  if (name == "cifar10") return {3, 32, 10};
  if (name == "cifar100") return {3, 32, 100};
  throw ConfigError("unknown dataset '" + name + "' (expected mnist, cifar10 or cifar100)");
}

/// Everything a command needs. Config files and flags use the same keys;
/// flags spell them with dashes (n_channels <-> --n-channels).
struct RunConfig {
  std::string dataset = "mnist";
  MixerConfig model;
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  std::size_t eval_batch_size = 256;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::string data_dir;
  std::string checkpoint;
  std::string metrics;
  std::string csv;
  std::size_t limit_train = 0;  // 0 = whole split
  std::size_t limit_test = 0;
  std::optional<std::size_t> image_size;
  std::optional<std::size_t> in_channels;
  std::optional<std::size_t> n_output;

  static const std::vector<std::string>& keys() {
    static const std::vector<std::string> k = {
        "dataset",     "patch_size", "n_channels",  "n_hiddens",    "depth",
        "spline_order", "grid_size", "grid_min",    "grid_max",     "residual",
        "seed",        "epochs",     "batch_size",  "eval_batch_size", "lr",
        "weight_decay", "data_dir",  "checkpoint",  "metrics",      "csv",
        "limit_train", "limit_test", "image_size",  "in_channels",  "n_output"};
    return k;
  }

  void set(const std::string& key, const std::string& value);

  /// Fills dataset-derived fields and rejects conflicting overrides.
  void finalize();

  nlohmann::json to_json() const;
};

namespace detail {

inline std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || n < 0) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(n);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty()) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

inline void RunConfig::set(const std::string& raw_key, const std::string& v) {
  std::string key = raw_key;
  for (auto& ch : key) {
    if (ch == '-') ch = '_';
  }
  using namespace detail;
  if (key == "dataset") dataset = v;
  else if (key == "patch_size") model.patch_size = parse_size(key, v);
  else if (key == "n_channels") model.n_channels = parse_size(key, v);
  else if (key == "n_hiddens") model.n_hiddens = parse_size(key, v);
  else if (key == "depth") model.depth = parse_size(key, v);
  else if (key == "spline_order") model.spline_order = static_cast<int>(parse_size(key, v));
  else if (key == "grid_size") model.grid_size = static_cast<int>(parse_size(key, v));
  else if (key == "grid_min") model.grid_min = parse_real(key, v);
  else if (key == "grid_max") model.grid_max = parse_real(key, v);
  else if (key == "residual") model.residual = parse_bool(key, v);
  else if (key == "seed") seed = parse_size(key, v);
  else if (key == "epochs") epochs = parse_size(key, v);
  else if (key == "batch_size") batch_size = parse_size(key, v);
  else if (key == "eval_batch_size") eval_batch_size = parse_size(key, v);
  else if (key == "lr") lr = parse_real(key, v);
  else if (key == "weight_decay") weight_decay = parse_real(key, v);
  else if (key == "data_dir") data_dir = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "metrics") metrics = v;
  else if (key == "csv") csv = v;
  else if (key == "limit_train") limit_train = parse_size(key, v);
  else if (key == "limit_test") limit_test = parse_size(key, v);
  else if (key == "image_size") image_size = parse_size(key, v);
  else if (key == "in_channels") in_channels = parse_size(key, v);
  else if (key == "n_output") n_output = parse_size(key, v);
  else throw ConfigError("unknown configuration key '" + raw_key + "'");
}

inline void RunConfig::finalize() {
  const DatasetShape shape = dataset_shape(dataset);
  auto conflict = [&](const char* what, std::size_t given, std::size_t expected) {
    if (given != expected) {
      throw ConfigError(std::string(what) + " " + std::to_string(given) + " conflicts with dataset " +
                        dataset + " (" + std::to_string(expected) + ")");
    }
  };
  if (image_size) conflict("image_size", *image_size, shape.image_size);
  if (in_channels) conflict("in_channels", *in_channels, shape.channels);
  if (n_output) conflict("n_output", *n_output, shape.classes);
  model.in_channels = shape.channels;
  model.image_height = model.image_width = shape.image_size;
  model.n_output = shape.classes;
  model.seed = seed;
  if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be > 0");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  model.validate();
  if (data_dir.empty()) {
    const char* env = std::getenv("DATA_DIR");
    data_dir = env && *env ? env : "data";
  }
}

inline nlohmann::json RunConfig::to_json() const {
  return {{"dataset", dataset},
          {"patch_size", model.patch_size},
          {"n_channels", model.n_channels},
          {"n_hiddens", model.n_hiddens},
          {"depth", model.depth},
          {"spline_order", model.spline_order},
          {"grid_size", model.grid_size},
          {"grid_min", model.grid_min},
          {"grid_max", model.grid_max},
          {"residual", model.residual},
          {"in_channels", model.in_channels},
          {"image_size", model.image_height},
          {"n_output", model.n_output},
          {"seed", seed},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"eval_batch_size", eval_batch_size},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"data_dir", data_dir},
          {"checkpoint", checkpoint},
          {"limit_train", limit_train},
          {"limit_test", limit_test}};
}

/// Reads a config file: a JSON object, or flat `key = value` lines with `#`
/// comments. Values are returned as strings for RunConfig::set.
inline std::vector<std::pair<std::string, std::string>> read_config_file(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  std::vector<std::pair<std::string, std::string>> out;

  const std::string body = detail::trim(text);
  if (!body.empty() && body.front() == '{') {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path.string() + ": invalid JSON: " + e.what());
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
      const auto& v = it.value();
      if (v.is_string()) out.emplace_back(it.key(), v.get<std::string>());
      else if (v.is_boolean() || v.is_number()) out.emplace_back(it.key(), v.dump());
      else throw ConfigError(path.string() + ": value of '" + it.key() + "' must be a scalar");
    }
    return out;
  }

  std::istringstream lines(text);
  std::string line;
  int lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    out.emplace_back(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return out;
}

}  // namespace kanmix::cli
