#pragma once

// Binary checkpoint:
//
//   "CMODCKPT"                       magic, 8 bytes
//   u32 version
//   u32 hyper_json_len, bytes        hyperparameters as JSON
//   u64 adam_step
//   u32 array_count
//   array_count × { u32 name_len, name bytes, u64 rows, u64 cols }
//   for each array in manifest order: rows·cols little-endian f64
//   u64 FNV-1a checksum of every byte after the magic
//
// Arrays are the model parameters followed by "adam.m.<name>" and
// "adam.v.<name>" moment arrays.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmod/config.hpp"
#include "cmod/error.hpp"
#include "cmod/optim.hpp"
#include "cmod/params.hpp"

namespace cmod {

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'O', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelParams params;
  OptimizerState opt;
  HyperParams hyper;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ChecksumMismatch("checkpoint payload is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const ModelParams& params, const OptimizerState& opt, const HyperParams& hyper,
                            const std::string& path) {
  ad::NamedArrays arrays = params.named();
  const std::size_t n_params = arrays.size();
  if (!opt.m.empty() && (opt.m.size() != n_params || opt.v.size() != n_params)) {
    throw ShapeError("optimizer moments do not match parameters");
  }
  for (std::size_t i = 0; i < opt.m.size(); ++i) arrays.emplace_back("adam.m." + arrays[i].first, opt.m[i]);
  for (std::size_t i = 0; i < opt.v.size(); ++i) arrays.emplace_back("adam.v." + arrays[i].first, opt.v[i]);

  detail::ByteWriter w;
  w.put(kCheckpointVersion);
  nlohmann::json meta = to_json(hyper);
  meta["adam"] = {{"lr", opt.lr}, {"beta1", opt.beta1}, {"beta2", opt.beta2}, {"eps", opt.eps}};
  const std::string meta_str = meta.dump();
  w.put(static_cast<std::uint32_t>(meta_str.size()));
  w.put_bytes(meta_str);
  w.put(static_cast<std::uint64_t>(opt.step));
  w.put(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, m] : arrays) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name);
    w.put(static_cast<std::uint64_t>(m.rows()));
    w.put(static_cast<std::uint64_t>(m.cols()));
  }
  for (const auto& [name, m] : arrays)
    for (double x : m.data()) w.put(x);
  const std::string& payload = w.bytes();
  const std::uint64_t sum = fnv1a64(payload.data(), payload.size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.write(reinterpret_cast<const char*>(&sum), sizeof(sum));
  if (!out) throw IoError("failed writing '" + path + "'");
}

/// Loads a checkpoint. When `expect` is given, every array must match the
/// shapes `expect` implies (ShapeMismatch, a VersionMismatch, otherwise).
inline Checkpoint load_checkpoint(const std::string& path, const HyperParams* expect = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (file.size() < sizeof(kCheckpointMagic) || std::memcmp(file.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw VersionMismatch("'" + path + "' is not a checkpoint");
  }
  if (file.size() < sizeof(kCheckpointMagic) + 4 + 8) throw ChecksumMismatch("checkpoint is truncated");
  const std::string payload = file.substr(sizeof(kCheckpointMagic), file.size() - sizeof(kCheckpointMagic) - 8);
  std::uint64_t stored = 0;
  std::memcpy(&stored, file.data() + file.size() - 8, 8);
  detail::ByteReader r(payload);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw VersionMismatch("checkpoint version " + std::to_string(version));
  if (fnv1a64(payload.data(), payload.size()) != stored) throw ChecksumMismatch("checksum does not match payload");

  const auto meta_len = r.get<std::uint32_t>();
  const auto meta = nlohmann::json::parse(r.get_bytes(meta_len));
  Checkpoint ck;
  ck.hyper = hyper_from_json(meta);
  ck.opt.step = r.get<std::uint64_t>();
  if (meta.contains("adam")) {
    const auto& a = meta.at("adam");
    ck.opt.lr = a.value("lr", ck.opt.lr);
    ck.opt.beta1 = a.value("beta1", ck.opt.beta1);
    ck.opt.beta2 = a.value("beta2", ck.opt.beta2);
    ck.opt.eps = a.value("eps", ck.opt.eps);
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<std::pair<std::string, std::pair<std::uint64_t, std::uint64_t>>> manifest;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>();
    std::string name = r.get_bytes(len);
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    manifest.push_back({std::move(name), {rows, cols}});
  }
  ad::NamedArrays arrays;
  for (const auto& [name, shape] : manifest) {
    Matrix m(shape.first, shape.second);
    for (auto& x : m.data()) x = r.get<double>();
    arrays.emplace_back(name, std::move(m));
  }
  if (!r.done()) throw ChecksumMismatch("trailing bytes in checkpoint payload");

  // Shapes come from the stored hyperparameters; the requested ones must agree.
  const HyperParams& shape_source = expect ? *expect : ck.hyper;
  ModelParams skeleton = init_params(shape_source, 0);
  std::size_t n_params = 0;
  skeleton.for_each([&](const std::string&, const Matrix&) { ++n_params; });
  if (arrays.size() != n_params && arrays.size() != 3 * n_params) {
    throw ShapeMismatch("checkpoint holds " + std::to_string(arrays.size()) + " arrays, model needs " +
                        std::to_string(n_params));
  }
  ad::NamedArrays param_arrays(arrays.begin(), arrays.begin() + static_cast<std::ptrdiff_t>(n_params));
  try {
    skeleton.assign(param_arrays);
  } catch (const ShapeMismatch& e) {
    throw ShapeMismatch(std::string("checkpoint does not fit requested model: ") + e.what());
  }
  ck.params = std::move(skeleton);
  if (arrays.size() == 3 * n_params) {
    for (std::size_t i = 0; i < n_params; ++i) {
      ck.opt.m.push_back(arrays[n_params + i].second);
      ck.opt.v.push_back(arrays[2 * n_params + i].second);
    }
  }
  return ck;
}

}  // namespace cmod
