// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cfer/config.hpp"
#include "cfer/error.hpp"
#include "cfer/evaluator.hpp"
#include "cfer/ndiff/tensor.hpp"

namespace cfer {

inline constexpr char kCheckpointMagic[8] = {'C', 'F', 'E', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kEmaPrefix = "ema/";
inline const std::string kAdamMPrefix = "adam.m/";
inline const std::string kAdamVPrefix = "adam.v/";

/// Complete training state plus what evaluation needs to rebuild inputs.
struct Checkpoint {
  CferConfig model;
  TrainConfig train;
  std::vector<std::string> vocab; // full token list, specials included
  std::vector<std::string> relations;
  std::vector<std::string> names; // parameter names, store order
  std::vector<nd::Tensor> params;
  std::vector<nd::Tensor> shadow;
  std::vector<nd::Tensor> adam_m;
  std::vector<nd::Tensor> adam_v;
  std::uint64_t adam_step = 0;
  std::uint64_t epoch = 0; // completed epochs
  double dev_f1 = 0.0;
  Thresholds thresholds;
};

namespace detail {

class Writer {
public:
  explicit Writer(std::ostream &os) : os_(os) {}

  template <typename T> void pod(const T &v) { os_.write(reinterpret_cast<const char *>(&v), sizeof v); }

  void str(const std::string &s) {
    pod<std::uint64_t>(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void tensor(const std::string &name, const nd::Tensor &t) {
    str(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) pod<std::uint64_t>(d);
    os_.write(reinterpret_cast<const char *>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  }

private:
  std::ostream &os_;
};

class Reader {
public:
  Reader(std::istream &is, std::string source) : is_(is), source_(std::move(source)) {}

  template <typename T> T pod() {
    T v{};
    is_.read(reinterpret_cast<char *>(&v), sizeof v);
    if (!is_) fail("truncated file");
    return v;
  }

  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ULL << 32)) fail("implausible string length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) fail("truncated file");
    return s;
  }

  std::pair<std::string, nd::Tensor> tensor() {
    std::string name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) fail("implausible tensor rank for '" + name + "'");
    nd::Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(pod<std::uint64_t>());
      n *= shape.back();
    }
    if (n > (1ULL << 31)) fail("implausible tensor size for '" + name + "'");
    std::vector<double> data(n);
    is_.read(reinterpret_cast<char *>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!is_) fail("truncated file");
    return {std::move(name), nd::Tensor(std::move(shape), std::move(data))};
  }

  [[noreturn]] void fail(const std::string &what) const {
    throw CheckpointError("checkpoint '" + source_ + "': " + what);
  }

private:
  std::istream &is_;
  std::string source_;
};

} // namespace detail

/// Layout: magic, format version, the config as key = value text, vocab and
/// relation labels, counters, then named tensors (parameters, EMA shadow under
/// "ema/", Adam moments under "adam.m/" and "adam.v/"), then thresholds as
/// (relation label, delta) pairs. Numbers are native little-endian.
inline void write_checkpoint(std::ostream &os, const Checkpoint &c) {
  detail::Writer w(os);
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod(kCheckpointVersion);
  KeyValues kv;
  write_config(kv, c.model);
  write_config(kv, c.train);
  w.str(kv.format());
  w.pod<std::uint64_t>(c.vocab.size());
  for (const auto &t : c.vocab) w.str(t);
  w.pod<std::uint64_t>(c.relations.size());
  for (const auto &r : c.relations) w.str(r);
  w.pod<std::uint64_t>(c.epoch);
  w.pod<std::uint64_t>(c.adam_step);
  w.pod<double>(c.dev_f1);
  const std::size_t n = c.names.size();
  if (c.params.size() != n || c.shadow.size() != n || c.adam_m.size() != n || c.adam_v.size() != n)
    throw CheckpointError("write_checkpoint: tensor lists do not match the parameter names");
  w.pod<std::uint64_t>(4 * n);
  for (std::size_t i = 0; i < n; ++i) w.tensor(c.names[i], c.params[i]);
  for (std::size_t i = 0; i < n; ++i) w.tensor(kEmaPrefix + c.names[i], c.shadow[i]);
  for (std::size_t i = 0; i < n; ++i) w.tensor(kAdamMPrefix + c.names[i], c.adam_m[i]);
  for (std::size_t i = 0; i < n; ++i) w.tensor(kAdamVPrefix + c.names[i], c.adam_v[i]);
  if (c.thresholds.delta.size() != c.relations.size())
    throw CheckpointError("write_checkpoint: thresholds do not cover the relation labels");
  w.pod<std::uint64_t>(c.relations.size());
  for (std::size_t r = 0; r < c.relations.size(); ++r) {
    w.str(c.relations[r]);
    w.pod<double>(c.thresholds.delta[r]);
  }
}

inline Checkpoint read_checkpoint(std::istream &is, const std::string &source = "<stream>") {
  detail::Reader r(is, source);
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) r.fail("bad magic (not a checkpoint file)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    r.fail("unsupported format version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  const KeyValues kv = KeyValues::parse(r.str(), source + " (config)");
  read_config(kv, c.model);
  read_config(kv, c.train);
  c.vocab.resize(r.pod<std::uint64_t>());
  for (auto &t : c.vocab) t = r.str();
  c.relations.resize(r.pod<std::uint64_t>());
  for (auto &l : c.relations) l = r.str();
  c.epoch = r.pod<std::uint64_t>();
  c.adam_step = r.pod<std::uint64_t>();
  c.dev_f1 = r.pod<double>();
  const auto count = r.pod<std::uint64_t>();
  if (count % 4 != 0) r.fail("tensor count is not a multiple of 4");
  const std::size_t n = count / 4;
  auto expect = [&](const std::string &prefix, std::vector<nd::Tensor> &into, bool record) {
    for (std::size_t i = 0; i < n; ++i) {
      auto [name, t] = r.tensor();
      if (record) {
        c.names.push_back(name);
      } else if (name != prefix + c.names[i]) {
        r.fail("expected tensor '" + prefix + c.names[i] + "', found '" + name + "'");
      }
      into.push_back(std::move(t));
    }
  };
  expect("", c.params, true);
  expect(kEmaPrefix, c.shadow, false);
  expect(kAdamMPrefix, c.adam_m, false);
  expect(kAdamVPrefix, c.adam_v, false);
  const auto nt = r.pod<std::uint64_t>();
  if (nt != c.relations.size()) r.fail("threshold count does not match relation labels");
  c.thresholds.delta.resize(nt);
  for (std::size_t i = 0; i < nt; ++i) {
    const std::string label = r.str();
    if (label != c.relations[i]) r.fail("threshold label '" + label + "' out of order");
    c.thresholds.delta[i] = r.pod<double>();
  }
  return c;
}

inline void save_checkpoint(const std::string &path, const Checkpoint &c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
  write_checkpoint(os, c);
  if (!os) throw CheckpointError("error while writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is, path);
}

} // namespace cfer
