#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "asvit/ops.hpp"
#include "asvit/tensor.hpp"

namespace asvit {

struct ConfigError : Error {
  using Error::Error;
};

struct ModelConfig {
  std::uint32_t image_size = 32;
  std::uint32_t patch_size = 4;
  std::uint32_t in_channels = 3;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_heads = 4;
  std::uint32_t num_layers = 12;
  std::uint32_t mlp_ratio = 4;
  std::uint32_t num_classes = 10;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t patch_dim() const { return std::size_t{in_channels} * patch_size * patch_size; }
  std::size_t hidden_dim() const { return std::size_t{mlp_ratio} * embed_dim; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (num_heads == 0 || embed_dim % num_heads != 0) throw ConfigError("embed_dim must be divisible by num_heads");
    if (num_layers == 0 || num_classes == 0 || in_channels == 0 || mlp_ratio == 0)
      throw ConfigError("layers, classes, channels and mlp_ratio must be positive");
  }

  bool operator==(const ModelConfig&) const = default;

  /// Desk-scale default: 32px images, 4px patches (64 tokens), D=64, 4 heads, 12 layers.
  static ModelConfig tiny_as() { return {}; }
  static ModelConfig deit_small() { return {224, 16, 3, 384, 6, 12, 4, 1000}; }
  static ModelConfig deit_base(std::uint32_t image = 224) { return {image, 16, 3, 768, 12, 12, 4, 1000}; }
};

enum class MaskStrategy { Attention, Activation };
enum class ScoreKind { HeadWeighted, Vanilla };

struct PruneConfig {
  std::vector<std::size_t> locations{4, 7, 10};
  std::vector<double> thresholds{0.001, 0.002, 0.003};
  double temperature = 1e4;
  // Fine-tuning ramps T geometrically from here up to `temperature`; at T=1e4 only scores within
  // ~0.01 of a threshold pass gradient, so a cold start leaves the thresholds where they began.
  double temperature_start = 100;
  MaskStrategy mask_strategy = MaskStrategy::Attention;
  ScoreKind score = ScoreKind::HeadWeighted;
  double budget = 0.65;
  // Stop the task loss from reaching backbone weights through the token scores.
  bool detach_scores = false;

  std::size_t num_stages() const { return locations.size(); }

  void validate(std::size_t num_layers) const {
    if (locations.empty()) throw ConfigError("prune locations must not be empty");
    for (std::size_t i = 0; i < locations.size(); ++i) {
      if (locations[i] == 0 || locations[i] >= num_layers)
        throw ConfigError("prune location " + std::to_string(locations[i]) + " must lie in [1, num_layers)");
      if (i && locations[i] <= locations[i - 1]) throw ConfigError("prune locations must be strictly increasing");
    }
    if (thresholds.size() != locations.size()) throw ConfigError("need one threshold per prune location");
    if (!(temperature > 0) || !(temperature_start > 0)) throw ConfigError("temperature must be positive");
    if (!(budget > 0 && budget <= 1)) throw ConfigError("budget fraction must lie in (0, 1]");
  }
};

enum class TrainMode { Pretrain, Finetune };

struct TrainConfig {
  TrainMode mode = TrainMode::Finetune;
  std::string dataset = "synthetic";
  std::size_t train_size = 2000;
  std::size_t eval_size = 500;
  std::uint64_t data_seed = 7;
  std::string teacher;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 2e-5;
  double min_lr = 2e-6;
  double weight_decay = 1e-6;
  double threshold_lr = 2e-4;
  double lambda_flops = 2.0;
  double lambda_distill = 0.5;
  KlDirection kl_direction = KlDirection::TeacherStudent;
  bool freeze_backbone = false;

  void validate() const {
    if (lambda_flops < 0 || lambda_distill < 0) throw ConfigError("loss weights must be nonnegative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr > 0) || min_lr < 0 || min_lr > lr) throw ConfigError("learning rates must satisfy 0 <= min_lr <= lr, lr > 0");
    if (train_size == 0 || eval_size == 0) throw ConfigError("dataset splits must be nonempty");
    if (mode == TrainMode::Finetune && teacher.empty()) throw ConfigError("missing config key: teacher");
  }
};

struct RunConfig {
  ModelConfig model;
  PruneConfig prune;
  TrainConfig train;
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
  }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto d = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a nonnegative integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected true/false, got '" + v + "'");
}

}  // namespace config_detail

/// Parsed `key = value` file. Lines starting with '#' are comments; lists are comma separated.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text) {
    KeyValueFile kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = config_detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      const auto key = config_detail::trim(line.substr(0, eq));
      const auto value = config_detail::trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError("duplicate config key: " + key);
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::string& require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }
  const std::map<std::string, std::string>& entries() const { return values_; }

  /// FNV-1a over the sorted `key=value` lines, as 16 hex digits. Comments, spacing and key
  /// order do not change it.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const std::string& s) {
      for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
    };
    for (const auto& [k, v] : values_) feed(k + '=' + v + '\n');
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

 private:
  std::map<std::string, std::string> values_;
};

inline const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys{
      "mode", "dataset", "train_size", "eval_size", "data_seed", "teacher", "out_dir", "seed", "epochs",
      "batch_size", "lr", "min_lr", "weight_decay", "threshold_lr", "lambda_flops", "lambda_distill",
      "kl_direction", "freeze_backbone", "detach_scores", "budget", "locations", "thresholds", "temperature",
      "temperature_start",
      "mask_strategy", "score", "image_size", "patch_size", "channels", "embed_dim", "heads", "layers",
      "mlp_ratio", "classes"};
  return keys;
}

/// Builds a RunConfig from a key-value file. `mode`, `dataset`, `out_dir` and `seed` are required,
/// finetuning additionally requires `teacher` and `budget`; every other key has a default.
inline RunConfig run_config_from(const KeyValueFile& kv) {
  using namespace config_detail;
  for (const auto& [k, v] : kv.entries())
    if (!known_config_keys().count(k)) throw ConfigError("unknown config key: " + k);

  RunConfig rc;
  auto& t = rc.train;
  const auto& mode = kv.require("mode");
  if (mode == "pretrain") {
    // Training from scratch wants a much larger step and stronger regularisation than fine-tuning.
    t.mode = TrainMode::Pretrain;
    t.lr = 5e-4;
    t.min_lr = 1e-5;
    t.weight_decay = 0.05;
    t.epochs = 30;
  }
  else if (mode == "finetune")
    t.mode = TrainMode::Finetune;
  else
    throw ConfigError("config key mode: expected pretrain or finetune, got '" + mode + "'");
  t.dataset = kv.require("dataset");
  t.out_dir = kv.require("out_dir");
  t.seed = to_uint("seed", kv.require("seed"));
  if (t.mode == TrainMode::Finetune) {
    t.teacher = kv.require("teacher");
    rc.prune.budget = to_double("budget", kv.require("budget"));
  } else if (kv.has("budget")) {
    rc.prune.budget = to_double("budget", kv.require("budget"));
  }

  auto num = [&](const char* key, double& dst) {
    if (kv.has(key)) dst = to_double(key, kv.require(key));
  };
  auto uint = [&](const char* key, auto& dst) {
    if (kv.has(key)) dst = static_cast<std::remove_reference_t<decltype(dst)>>(to_uint(key, kv.require(key)));
  };
  auto flag = [&](const char* key, bool& dst) {
    if (kv.has(key)) dst = to_bool(key, kv.require(key));
  };

  uint("train_size", t.train_size);
  uint("eval_size", t.eval_size);
  uint("data_seed", t.data_seed);
  uint("epochs", t.epochs);
  uint("batch_size", t.batch_size);
  num("lr", t.lr);
  num("min_lr", t.min_lr);
  num("weight_decay", t.weight_decay);
  num("threshold_lr", t.threshold_lr);
  num("lambda_flops", t.lambda_flops);
  num("lambda_distill", t.lambda_distill);
  flag("freeze_backbone", t.freeze_backbone);
  if (kv.has("kl_direction")) {
    const auto& v = kv.require("kl_direction");
    if (v == "teacher_student")
      t.kl_direction = KlDirection::TeacherStudent;
    else if (v == "student_teacher")
      t.kl_direction = KlDirection::StudentTeacher;
    else
      throw ConfigError("config key kl_direction: expected teacher_student or student_teacher");
  }

  auto& p = rc.prune;
  flag("detach_scores", p.detach_scores);
  num("temperature", p.temperature);
  num("temperature_start", p.temperature_start);
  if (kv.has("locations")) {
    p.locations.clear();
    for (const auto& s : split_list(kv.require("locations"))) p.locations.push_back(to_uint("locations", s));
  }
  if (kv.has("thresholds")) {
    p.thresholds.clear();
    for (const auto& s : split_list(kv.require("thresholds"))) p.thresholds.push_back(to_double("thresholds", s));
  }
  if (kv.has("mask_strategy")) {
    const auto& v = kv.require("mask_strategy");
    if (v == "attention")
      p.mask_strategy = MaskStrategy::Attention;
    else if (v == "activation")
      p.mask_strategy = MaskStrategy::Activation;
    else
      throw ConfigError("config key mask_strategy: expected attention or activation");
  }
  if (kv.has("score")) {
    const auto& v = kv.require("score");
    if (v == "weighted")
      p.score = ScoreKind::HeadWeighted;
    else if (v == "vanilla")
      p.score = ScoreKind::Vanilla;
    else
      throw ConfigError("config key score: expected weighted or vanilla");
  }

  auto& m = rc.model;
  uint("image_size", m.image_size);
  uint("patch_size", m.patch_size);
  uint("channels", m.in_channels);
  uint("embed_dim", m.embed_dim);
  uint("heads", m.num_heads);
  uint("layers", m.num_layers);
  uint("mlp_ratio", m.mlp_ratio);
  uint("classes", m.num_classes);

  m.validate();
  p.validate(m.num_layers);
  t.validate();
  return rc;
}

}  // namespace asvit
