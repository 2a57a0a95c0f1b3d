#include "frboost/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "frboost/errors.hpp"

namespace frboost::ckpt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'F', 'R', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, size_t& off) {
  if (off + sizeof(T) > in.size()) throw PrerequisiteError("checkpoint: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& kv : tensors) {
    if (kv.first == name) return &kv.second;
  }
  return nullptr;
}

Checkpoint snapshot(const nn::ParamRegistry& reg, std::string stage, std::string config_json,
                    int64_t samples_seen, const Rng* rng) {
  Checkpoint ck;
  ck.stage = std::move(stage);
  ck.config_json = std::move(config_json);
  ck.samples_seen = samples_seen;
  if (rng) ck.rng_state = rng->serialize();
  for (const auto& kv : reg.params) ck.tensors.emplace_back(kv.first, kv.second.value());
  for (const auto& kv : reg.state) ck.tensors.emplace_back(kv.first, *kv.second);
  return ck;
}

void restore(const Checkpoint& ck, nn::ParamRegistry& reg) {
  auto fetch = [&](const std::string& name, const std::vector<int>& shape) -> const Tensor& {
    const Tensor* t = ck.find(name);
    if (!t) throw PrerequisiteError("checkpoint: missing tensor '" + name + "'");
    if (t->shape != shape) {
      throw PrerequisiteError("checkpoint: shape mismatch for '" + name + "': stored " +
                              t->shape_str());
    }
    return *t;
  };
  for (auto& kv : reg.params) {
    kv.second.node->val = fetch(kv.first, kv.second.shape());
  }
  for (auto& kv : reg.state) {
    *kv.second = fetch(kv.first, kv.second->shape);
  }
}

void atomic_write_file(const std::string& path, const std::string& data) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string blob;
  blob.append(kMagic, 4);
  put<uint32_t>(blob, kVersion);
  put<uint64_t>(blob, ck.tensors.size());
  for (const auto& kv : ck.tensors) {
    put<uint32_t>(blob, static_cast<uint32_t>(kv.first.size()));
    blob.append(kv.first);
    put<uint32_t>(blob, static_cast<uint32_t>(kv.second.ndim()));
    for (int i = 0; i < kv.second.ndim(); ++i) put<uint32_t>(blob, static_cast<uint32_t>(kv.second.dim(i)));
    put<uint64_t>(blob, static_cast<uint64_t>(kv.second.numel()));
    const char* raw = reinterpret_cast<const char*>(kv.second.data());
    blob.append(raw, sizeof(double) * kv.second.d.size());
  }
  atomic_write_file(path, blob);

  json side;
  side["stage"] = ck.stage;
  side["config"] = json::parse(ck.config_json.empty() ? "{}" : ck.config_json);
  side["samples_seen"] = ck.samples_seen;
  side["rng_state"] = ck.rng_state;
  side["extra"] = json::parse(ck.extra_json.empty() ? "{}" : ck.extra_json);
  atomic_write_file(path + ".json", side.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PrerequisiteError("checkpoint not found: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string blob = ss.str();
  size_t off = 0;
  if (blob.size() < 4 || std::memcmp(blob.data(), kMagic, 4) != 0)
    throw PrerequisiteError("checkpoint: bad magic in " + path);
  off = 4;
  uint32_t version = get<uint32_t>(blob, off);
  if (version != kVersion) throw PrerequisiteError("checkpoint: unsupported version");
  uint64_t count = get<uint64_t>(blob, off);
  Checkpoint ck;
  ck.tensors.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint32_t nlen = get<uint32_t>(blob, off);
    if (off + nlen > blob.size()) throw PrerequisiteError("checkpoint: truncated name");
    std::string name = blob.substr(off, nlen);
    off += nlen;
    uint32_t ndim = get<uint32_t>(blob, off);
    std::vector<int> shape(ndim);
    for (uint32_t k = 0; k < ndim; ++k) shape[k] = static_cast<int>(get<uint32_t>(blob, off));
    uint64_t numel = get<uint64_t>(blob, off);
    Tensor t(shape);
    if (static_cast<uint64_t>(t.numel()) != numel)
      throw PrerequisiteError("checkpoint: shape/numel mismatch for '" + name + "'");
    if (off + sizeof(double) * numel > blob.size())
      throw PrerequisiteError("checkpoint: truncated data for '" + name + "'");
    std::memcpy(t.data(), blob.data() + off, sizeof(double) * numel);
    off += sizeof(double) * numel;
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }

  std::ifstream sidef(path + ".json");
  if (sidef) {
    json side = json::parse(sidef, nullptr, false);
    if (!side.is_discarded()) {
      ck.stage = side.value("stage", "");
      ck.samples_seen = side.value("samples_seen", static_cast<int64_t>(0));
      ck.rng_state = side.value("rng_state", "");
      if (side.contains("config")) ck.config_json = side["config"].dump();
      if (side.contains("extra")) ck.extra_json = side["extra"].dump();
    }
  }
  return ck;
}

uint64_t params_hash(const nn::ParamRegistry& reg) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, size_t n) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& kv : reg.params) {
    mix(kv.first.data(), kv.first.size());
    uint64_t th = tensor_hash(kv.second.value());
    mix(&th, sizeof(th));
  }
  return h;
}

}  // namespace frboost::ckpt
