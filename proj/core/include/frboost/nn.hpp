#pragma once

#include <string>
#include <utility>
#include <vector>

#include "frboost/autograd.hpp"
#include "frboost/rng.hpp"

namespace frboost::nn {

using ag::Var;

// Ordered registry of named parameters and mutable state tensors (running
// stats etc.) used by optimizers and checkpoints. Order is construction
// order, so it is stable across runs for a fixed architecture.
struct ParamRegistry {
  std::vector<std::pair<std::string, Var>> params;
  std::vector<std::pair<std::string, Tensor*>> state;

  void add(const std::string& name, const Var& v) { params.emplace_back(name, v); }
  void add_state(const std::string& name, Tensor* t) { state.emplace_back(name, t); }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(params.size());
    for (const auto& kv : params) out.push_back(kv.second);
    return out;
  }
  const Var* find(const std::string& name) const {
    for (const auto& kv : params) {
      if (kv.first == name) return &kv.second;
    }
    return nullptr;
  }
  void zero_grad() const {
    for (const auto& kv : params) kv.second.zero_grad();
  }
};

// Per-forward-pass mode flags shared down a network.
struct TrainCtx {
  bool training = false;
  double conv_dropout = 0.0;  // applied after convs in the trunk when > 0
  bool bn_update_stats = true;  // when false, BN running stats stay pinned even in training
  Rng* rng = nullptr;
};

// Inverted dropout; identity when not training or p == 0.
Var dropout(const Var& x, double p, const TrainCtx& ctx);

struct Linear {
  Var w, b;
  bool bias = true;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true, double gain = 1.0);
  Var forward(const Var& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix) const;
};

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 1;
  bool bias = true;

  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride, int pad, Rng& rng, bool with_bias = true,
         double gain = 1.0);
  Var forward(const Var& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix) const;
};

struct BatchNorm2d {
  Var gamma, beta;
  ag::BatchNormState st;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int c);
  Var forward(const Var& x, const TrainCtx& ctx, bool update_stats = true);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

// BatchNorm over feature vectors [B, D]; wraps the 2-d kernel.
struct BatchNorm1d {
  BatchNorm2d bn;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int d) : bn(d) {}
  Var forward(const Var& x, const TrainCtx& ctx, bool update_stats = true);
  void collect(ParamRegistry& reg, const std::string& prefix) { bn.collect(reg, prefix); }
};

struct PReLU {
  Var slope;

  PReLU() = default;
  explicit PReLU(int c, double init = 0.25);
  Var forward(const Var& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix) const;
};

// Squeeze-and-excitation channel gating.
struct SEBlock {
  Linear fc1, fc2;

  SEBlock() = default;
  SEBlock(int c, int reduction, Rng& rng);
  Var forward(const Var& x) const;
  void collect(ParamRegistry& reg, const std::string& prefix) const;
};

// Residual bottleneck in the IR-SE style: BN -> conv3x3 -> PReLU ->
// conv3x3(stride) -> BN -> SE, plus an (optionally projected) shortcut.
// se_reduction <= 0 disables the SE gate.
struct IRSEBlock {
  BatchNorm2d bn1;
  Conv2d conv1;
  PReLU act;
  Conv2d conv2;
  BatchNorm2d bn2;
  bool use_se = true;
  SEBlock se;
  bool projected = false;
  Conv2d short_conv;
  BatchNorm2d short_bn;

  IRSEBlock() = default;
  IRSEBlock(int in, int out, int stride, int se_reduction, Rng& rng);
  Var forward(const Var& x, const TrainCtx& ctx);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

struct TrunkConfig {
  int in_ch = 3;
  std::vector<int> stage_channels{16, 32, 64};
  std::vector<int> stage_blocks{1, 1, 1};
  int se_reduction = 4;
};

// IR-SE trunk: stem conv + staged residual blocks, each stage opening with a
// stride-2 block. Exposes one feature tap per stage for pyramid consumers.
struct Trunk {
  TrunkConfig cfg;
  Conv2d stem;
  BatchNorm2d stem_bn;
  PReLU stem_act;
  std::vector<IRSEBlock> blocks;
  std::vector<int> stage_end;  // index one past the last block of each stage

  Trunk() = default;
  Trunk(const TrunkConfig& cfg, Rng& rng);
  // Returns the deepest feature map; when taps != nullptr it is filled with
  // one tap per stage, shallow to deep.
  Var forward(const Var& x, const TrainCtx& ctx, std::vector<Var>* taps = nullptr);
  void collect(ParamRegistry& reg, const std::string& prefix);
  int out_channels() const { return cfg.stage_channels.back(); }
};

// Embedding head: BN -> dropout -> flatten -> linear -> BN1d.
struct EmbedHead {
  BatchNorm2d bn_in;
  Linear fc;
  BatchNorm1d bn_out;
  double dropout_p = 0.0;
  int in_ch = 0, in_hw = 0;

  EmbedHead() = default;
  EmbedHead(int in_ch, int in_hw, int emb_dim, double dropout_p, Rng& rng);
  Var forward(const Var& x, const TrainCtx& ctx);
  void collect(ParamRegistry& reg, const std::string& prefix);
};

// x * scalar_param, where s is a {1}-shaped Var.
Var scale_by_scalar(const Var& x, const Var& s);

// Per-row pixel norm for [B, D]: x / sqrt(mean(x^2) + eps).
Var pixel_norm(const Var& x, double eps = 1e-8);

// L2-normalize rows of [B, D].
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

}  // namespace frboost::nn
