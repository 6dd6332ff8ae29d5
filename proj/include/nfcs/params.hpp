#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>

#include "nfcs/tensor.hpp"

namespace nfcs {

// Named parameter set. Buffers (e.g. batch-norm running stats) ride along but
// are skipped by the optimizer. std::map keeps iteration order stable, which
// the checkpoint format and deterministic init rely on.
template <typename T>
class ParamsT {
 public:
  struct Entry {
    TensorT<T> value;
    TensorT<T> m, v;  // Adam state, allocated on first step
    bool is_buffer = false;
  };

  TensorT<T>& add(const std::string& name, TensorT<T> t, bool is_buffer = false) {
    NFCS_REQUIRE(!entries_.count(name), "duplicate parameter '", name, "'");
    auto& e = entries_[name];
    e.value = std::move(t);
    e.is_buffer = is_buffer;
    return e.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  TensorT<T>& get(const std::string& name) {
    auto it = entries_.find(name);
    NFCS_REQUIRE(it != entries_.end(), "unknown parameter '", name, "'");
    return it->second.value;
  }
  const TensorT<T>& get(const std::string& name) const {
    auto it = entries_.find(name);
    NFCS_REQUIRE(it != entries_.end(), "unknown parameter '", name, "'");
    return it->second.value;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  size_t size() const { return entries_.size(); }

  size_t scalar_count(bool learnable_only = true) const {
    size_t n = 0;
    for (const auto& [k, e] : entries_)
      if (!learnable_only || !e.is_buffer) n += e.value.numel();
    return n;
  }

  // Deep copy (fresh buffers); Adam state is not carried over.
  ParamsT clone_values() const {
    ParamsT out;
    for (const auto& [k, e] : entries_) {
      auto& ne = out.entries_[k];
      ne.value = e.value.clone();
      ne.is_buffer = e.is_buffer;
    }
    return out;
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

using Params = ParamsT<float>;

// One Adam step over every learnable entry. `grads` maps name -> gradient;
// entries without a gradient are left untouched. t is 1-based.
template <typename T>
void adam_step(ParamsT<T>& params,
               const std::map<std::string, TensorT<T>>& grads, T lr,
               T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8),
               int64_t t = 1) {
  NFCS_REQUIRE(t >= 1, "adam step index is 1-based");
  T bc1 = T(1) - std::pow(beta1, static_cast<T>(t));
  T bc2 = T(1) - std::pow(beta2, static_cast<T>(t));
  for (auto& [name, e] : params.entries()) {
    if (e.is_buffer) continue;
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const TensorT<T>& g = it->second;
    NFCS_REQUIRE(g.numel() == e.value.numel(), "gradient size mismatch for '",
                 name, "'");
    if (!e.m.defined()) {
      e.m = TensorT<T>::zeros(e.value.shape());
      e.v = TensorT<T>::zeros(e.value.shape());
    }
    for (size_t i = 0; i < e.value.numel(); i++) {
      e.m[i] = beta1 * e.m[i] + (T(1) - beta1) * g[i];
      e.v[i] = beta2 * e.v[i] + (T(1) - beta2) * g[i] * g[i];
      T mhat = e.m[i] / bc1;
      T vhat = e.v[i] / bc2;
      e.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// avg <- decay * avg + (1 - decay) * params, for every entry incl. buffers.
template <typename T>
void polyak_update(ParamsT<T>& avg, const ParamsT<T>& params, T decay) {
  for (auto& [name, e] : avg.entries()) {
    const TensorT<T>& src = params.get(name);
    for (size_t i = 0; i < e.value.numel(); i++)
      e.value[i] = decay * e.value[i] + (T(1) - decay) * src[i];
  }
}

// ---------------------------------------------------------------------------
// checkpoint format: magic "NFCS", u32 version, u32 count, then per tensor
// u16 name-len + name, u8 dtype (0=f32 1=f64), u8 is_buffer, u8 ndim,
// i32 dims..., little-endian payload.

namespace ckpt_detail {
inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
               static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
  os.write(b, 4);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
}  // namespace ckpt_detail

constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_params(const ParamsT<T>& params, std::ostream& os) {
  using namespace ckpt_detail;
  os.write("NFCS", 4);
  put_u32(os, kCheckpointVersion);
  put_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, e] : params.entries()) {
    NFCS_REQUIRE(name.size() < 65536, "parameter name too long");
    uint16_t len = static_cast<uint16_t>(name.size());
    char lb[2] = {static_cast<char>(len), static_cast<char>(len >> 8)};
    os.write(lb, 2);
    os.write(name.data(), len);
    char dtype = sizeof(T) == 4 ? 0 : 1;
    os.put(dtype);
    os.put(e.is_buffer ? 1 : 0);
    os.put(static_cast<char>(e.value.ndim()));
    for (int d : e.value.shape()) put_u32(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(e.value.data()),
             static_cast<std::streamsize>(e.value.numel() * sizeof(T)));
  }
  NFCS_REQUIRE(os.good(), "checkpoint write failed");
}

template <typename T>
ParamsT<T> load_params(std::istream& is) {
  using namespace ckpt_detail;
  char magic[4];
  is.read(magic, 4);
  NFCS_REQUIRE(is.good() && std::memcmp(magic, "NFCS", 4) == 0,
               "not an NFCS checkpoint (bad magic)");
  uint32_t version = get_u32(is);
  NFCS_REQUIRE(version == kCheckpointVersion, "unsupported checkpoint version ",
               version, " (expected ", kCheckpointVersion, ")");
  uint32_t count = get_u32(is);
  ParamsT<T> out;
  for (uint32_t i = 0; i < count; i++) {
    unsigned char lb[2];
    is.read(reinterpret_cast<char*>(lb), 2);
    std::string name(static_cast<size_t>(lb[0] | (lb[1] << 8)), '\0');
    is.read(name.data(), static_cast<std::streamsize>(name.size()));
    int dtype = is.get();
    NFCS_REQUIRE(dtype == (sizeof(T) == 4 ? 0 : 1),
                 "checkpoint dtype mismatch for '", name, "'");
    int is_buffer = is.get();
    int ndim = is.get();
    Shape shape(static_cast<size_t>(ndim));
    for (int d = 0; d < ndim; d++) shape[static_cast<size_t>(d)] = static_cast<int>(get_u32(is));
    TensorT<T> t = TensorT<T>::zeros(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    NFCS_REQUIRE(is.good(), "truncated checkpoint while reading '", name, "'");
    out.add(name, std::move(t), is_buffer != 0);
  }
  return out;
}

template <typename T>
void save_params_file(const ParamsT<T>& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  NFCS_REQUIRE(f.good(), "cannot open '", path, "' for writing");
  save_params(params, f);
}

template <typename T>
ParamsT<T> load_params_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  NFCS_REQUIRE(f.good(), "cannot open checkpoint '", path, "'");
  return load_params<T>(f);
}

// FNV-1a over the serialized parameter bytes; cache invalidation key.
template <typename T>
uint64_t params_hash(const ParamsT<T>& params) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; i++) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, e] : params.entries()) {
    mix(name.data(), name.size());
    mix(e.value.data(), e.value.numel() * sizeof(T));
  }
  return h;
}

}  // namespace nfcs
