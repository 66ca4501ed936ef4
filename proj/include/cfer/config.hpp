// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>

#include "cfer/error.hpp"
#include "cfer/model.hpp"
#include "cfer/optim.hpp"

namespace cfer {

/// Flat `key = value` text. `#` starts a comment line; keys are unique.
class KeyValues {
public:
  static KeyValues parse(const std::string &text, const std::string &source = "<config>") {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n) + ": expected key = value");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError(source + ":" + std::to_string(n) + ": empty key");
      if (!kv.map_.emplace(key, trim(t.substr(eq + 1))).second)
        throw ConfigError(source + ":" + std::to_string(n) + ": duplicate key '" + key + "'");
    }
    return kv;
  }

  static KeyValues load(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
  }

  std::string format() const {
    std::string s;
    for (const auto &[k, v] : map_) s += k + " = " + v + "\n";
    return s;
  }

  void set(const std::string &key, std::string value) { map_[key] = std::move(value); }
  bool has(const std::string &key) const { return map_.count(key) > 0; }
  const std::map<std::string, std::string> &entries() const { return map_; }

  std::optional<std::string> get(const std::string &key) const {
    auto it = map_.find(key);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  void read(const std::string &key, std::string &out) const {
    if (auto v = get(key)) out = *v;
  }

  void read(const std::string &key, double &out) const {
    if (auto v = get(key)) out = parse_number<double>(key, *v);
  }

  template <typename T>
    requires std::is_unsigned_v<T>
  void read(const std::string &key, T &out) const {
    if (auto v = get(key)) out = parse_number<T>(key, *v);
  }

  void read(const std::string &key, bool &out) const {
    if (auto v = get(key)) {
      if (*v == "true") out = true;
      else if (*v == "false") out = false;
      else throw ConfigError("config key '" + key + "': expected true or false, got '" + *v + "'");
    }
  }

  static std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

private:
  template <typename T> static T parse_number(const std::string &key, const std::string &v) {
    T out{};
    const char *first = v.data(), *last = v.data() + v.size();
    const std::from_chars_result r = std::from_chars(first, last, out);
    if (v.empty() || r.ec != std::errc{} || r.ptr != last)
      throw ConfigError("config key '" + key + "': cannot parse '" + v + "' as a number");
    return out;
  }

  std::map<std::string, std::string> map_;
};

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double x) {
  char buf[40];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) return buf;
  }
  return buf;
}

inline const char *aggregator_name(Aggregator a) { return a == Aggregator::Mean ? "mean" : "attention"; }
inline const char *path_mode_name(PathMode p) { return p == PathMode::SingleRandom ? "single_random" : "all"; }

inline void write_config(KeyValues &kv, const CferConfig &c) {
  kv.set("model.d_emb", std::to_string(c.d_emb));
  kv.set("model.d_h", std::to_string(c.d_h));
  kv.set("model.n_blocks", std::to_string(c.n_blocks));
  kv.set("model.sublayers", std::to_string(c.sublayers));
  kv.set("model.n_r", std::to_string(c.n_r));
  kv.set("model.dropout_dcgcn", format_double(c.dropout_dcgcn));
  kv.set("model.dropout_other", format_double(c.dropout_other));
  kv.set("model.path_cap", c.path_cap ? std::to_string(*c.path_cap) : "none");
  kv.set("ablation.use_fine", c.ablation.use_fine ? "true" : "false");
  kv.set("ablation.use_coarse_repr", c.ablation.use_coarse_repr ? "true" : "false");
  kv.set("ablation.use_dcgcn", c.ablation.use_dcgcn ? "true" : "false");
  kv.set("ablation.aggregator", aggregator_name(c.ablation.aggregator));
  kv.set("ablation.paths", path_mode_name(c.ablation.paths));
}

inline void read_config(const KeyValues &kv, CferConfig &c) {
  kv.read("model.d_emb", c.d_emb);
  kv.read("model.d_h", c.d_h);
  kv.read("model.n_blocks", c.n_blocks);
  kv.read("model.sublayers", c.sublayers);
  kv.read("model.n_r", c.n_r);
  kv.read("model.dropout_dcgcn", c.dropout_dcgcn);
  kv.read("model.dropout_other", c.dropout_other);
  if (auto v = kv.get("model.path_cap")) {
    if (*v == "none") c.path_cap.reset();
    else {
      std::size_t cap = 0;
      kv.read("model.path_cap", cap);
      c.path_cap = cap;
    }
  }
  kv.read("ablation.use_fine", c.ablation.use_fine);
  kv.read("ablation.use_coarse_repr", c.ablation.use_coarse_repr);
  kv.read("ablation.use_dcgcn", c.ablation.use_dcgcn);
  if (auto v = kv.get("ablation.aggregator")) {
    if (*v == "attention") c.ablation.aggregator = Aggregator::Attention;
    else if (*v == "mean") c.ablation.aggregator = Aggregator::Mean;
    else throw ConfigError("ablation.aggregator must be attention or mean, got '" + *v + "'");
  }
  if (auto v = kv.get("ablation.paths")) {
    if (*v == "all") c.ablation.paths = PathMode::All;
    else if (*v == "single_random") c.ablation.paths = PathMode::SingleRandom;
    else throw ConfigError("ablation.paths must be all or single_random, got '" + *v + "'");
  }
}

inline void write_config(KeyValues &kv, const TrainConfig &c) {
  kv.set("train.peak_lr", format_double(c.peak_lr));
  kv.set("train.batch_size", std::to_string(c.batch_size));
  kv.set("train.epochs", std::to_string(c.epochs));
  kv.set("train.warmup_frac", format_double(c.warmup_frac));
  kv.set("train.ema_decay", format_double(c.ema_decay));
  kv.set("train.beta1", format_double(c.beta1));
  kv.set("train.beta2", format_double(c.beta2));
  kv.set("train.eps", format_double(c.eps));
  kv.set("train.weight_decay", format_double(c.weight_decay));
  kv.set("train.seed", std::to_string(c.seed));
  kv.set("train.workers", std::to_string(c.workers));
  kv.set("train.checkpoint", c.checkpoint);
}

inline void read_config(const KeyValues &kv, TrainConfig &c) {
  kv.read("train.peak_lr", c.peak_lr);
  kv.read("train.batch_size", c.batch_size);
  kv.read("train.epochs", c.epochs);
  kv.read("train.warmup_frac", c.warmup_frac);
  kv.read("train.ema_decay", c.ema_decay);
  kv.read("train.beta1", c.beta1);
  kv.read("train.beta2", c.beta2);
  kv.read("train.eps", c.eps);
  kv.read("train.weight_decay", c.weight_decay);
  kv.read("train.seed", c.seed);
  kv.read("train.workers", c.workers);
  kv.read("train.checkpoint", c.checkpoint);
}

/// Everything a command needs: model and optimization settings plus data
/// locations. Empty paths mean "not given".
struct RunConfig {
  CferConfig model;
  TrainConfig train;
  std::string train_path;
  std::string dev_path;
  std::string test_path;
  std::string relations_path; // optional; labels come from the training file when empty
  std::string embeddings_path;
  std::string output_dir;
  std::size_t min_freq = 1;

  bool operator==(const RunConfig &) const = default;

  KeyValues to_kv() const {
    KeyValues kv;
    write_config(kv, model);
    write_config(kv, train);
    kv.set("data.train", train_path);
    kv.set("data.dev", dev_path);
    kv.set("data.test", test_path);
    kv.set("data.relations", relations_path);
    kv.set("data.embeddings", embeddings_path);
    kv.set("data.min_freq", std::to_string(min_freq));
    kv.set("output_dir", output_dir);
    return kv;
  }

  static RunConfig from_kv(const KeyValues &kv) {
    RunConfig rc;
    const KeyValues known = RunConfig{}.to_kv();
    for (const auto &[k, v] : kv.entries())
      if (!known.has(k)) throw ConfigError("unknown config key '" + k + "'");
    read_config(kv, rc.model);
    read_config(kv, rc.train);
    kv.read("data.train", rc.train_path);
    kv.read("data.dev", rc.dev_path);
    kv.read("data.test", rc.test_path);
    kv.read("data.relations", rc.relations_path);
    kv.read("data.embeddings", rc.embeddings_path);
    kv.read("data.min_freq", rc.min_freq);
    kv.read("output_dir", rc.output_dir);
    return rc;
  }

  std::string format() const { return to_kv().format(); }
  static RunConfig parse(const std::string &text) { return from_kv(KeyValues::parse(text)); }
  static RunConfig load(const std::string &path) { return from_kv(KeyValues::load(path)); }
};

} // namespace cfer
