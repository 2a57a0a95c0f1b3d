#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "frboost/nn.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

namespace frboost::ckpt {

// A container of named parameter tensors. On disk it is a little-endian
// binary file plus a JSON sidecar `<path>.json` holding
// {stage, config, samples_seen, rng_state}. Both are written atomically
// (write-temp-then-rename).
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string stage;
  std::string config_json = "{}";  // serialized config object
  int64_t samples_seen = 0;
  std::string rng_state;
  std::string extra_json = "{}";  // free-form extras (e.g. init provenance)

  const Tensor* find(const std::string& name) const;
};

// Collects parameters and mutable state from a registry into a checkpoint.
Checkpoint snapshot(const nn::ParamRegistry& reg, std::string stage, std::string config_json,
                    int64_t samples_seen, const Rng* rng);

// Copies checkpoint tensors back into a registry; every registry entry must
// be present with a matching shape.
void restore(const Checkpoint& ck, nn::ParamRegistry& reg);

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Order-sensitive hash over names, shapes and values of all parameters.
uint64_t params_hash(const nn::ParamRegistry& reg);

// Atomically writes `data` to `path` via a temp file in the same directory.
void atomic_write_file(const std::string& path, const std::string& data);

}  // namespace frboost::ckpt
