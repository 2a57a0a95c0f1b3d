#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "frboost/autograd.hpp"
#include "frboost/checkpoint.hpp"
#include "frboost/nn.hpp"
#include "frboost/prior_data.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

namespace frboost::gan {

namespace ag = frboost::ag;

// Stage-1 configuration. Default values are the full-scale settings; desk()
// shrinks every axis to something a single CPU core can train.
struct GanConfig {
  int latent_dim = 512;
  int mapping_layers = 8;
  int resolution = 128;
  double g_lr = 0.002;
  double d_lr = 0.00235;
  double lambda_gp = 4.0;
  double lambda_plp = 2.0;
  double ada_start_p = 0.0;
  double ada_target = 0.6;
  int64_t total_samples = 8'000'000;
  int batch_size = 32;

  // Lazy-regularization cadence and control-loop constants (exposed knobs;
  // standard values for this model family).
  int r1_interval = 16;          // k_d: D steps between R1 applications
  int plp_interval = 8;          // k_g: G steps between path-length applications
  double ada_step = 0.005;       // p adjustment per update
  double ada_ema_halflife = 500; // batches for the overfit-estimate EMA
  double plp_ema_decay = 0.01;   // running-mean tracking rate
  double adam_beta1 = 0.0;
  double adam_beta2 = 0.99;

  // Channel schedule: channels(res) = min(channel_max, channel_base / res).
  int channel_base = 8192;
  int channel_max = 512;

  // Logging/eval cadence in samples; 0 disables the periodic FID.
  int64_t log_interval = 4096;
  int64_t fid_interval = 0;
  int fid_sample_count = 128;  // images per side for the periodic FID

  void validate() const;               // throws ConfigError
  int style_count() const;             // 2 * (log2(resolution) - 1)
  int channels_at(int res) const;

  static GanConfig desk();
  static GanConfig paper();
};

std::string gan_config_to_json(const GanConfig& c);
GanConfig gan_config_from_json(const std::string& json_text);

// z -> w through mapping_layers fully-connected layers. The final layer has
// no activation so a 1-layer identity-initialized map is exactly w = z.
class MappingNet {
 public:
  MappingNet() = default;
  MappingNet(int latent_dim, int layers, Rng& rng, bool normalize_z = true);

  ag::Var forward(const ag::Var& z) const;  // [B, latent] -> [B, latent]
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;

  std::vector<nn::Linear> layers;
  bool normalize_z = true;
};

// One style-modulated 3x3 convolution: per-sample input-channel scaling from
// an affine of w, weight demodulation, optional 2x upsample, shared noise
// image with a learned strength, bias, and leaky-ReLU.
struct StyledConv {
  nn::Linear style;       // latent -> in_ch, bias initialized to 1
  ag::Var weight;         // [out, in, 3, 3]
  ag::Var bias;           // [out]
  ag::Var noise_strength; // [1]
  int in_ch = 0, out_ch = 0;
  int res = 0;            // output resolution
  bool upsample = false;

  StyledConv() = default;
  StyledConv(int in_ch, int out_ch, int latent_dim, int res, bool upsample, Rng& rng);
  // styles: [B, latent]; noise_rng == nullptr pins all noise images to zero.
  ag::Var forward(const ag::Var& x, const ag::Var& w, Rng* noise_rng) const;
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;
};

// Learned-constant input followed by styled convolutions, two per resolution
// level from 4x4 up to the target, then an unstyled 1x1 RGB projection.
class SynthesisNet {
 public:
  SynthesisNet() = default;
  SynthesisNet(const GanConfig& cfg, Rng& rng);

  // Number of style inputs actually constructed (the generator's L).
  int style_count() const { return static_cast<int>(convs.size()); }
  int resolution() const { return resolution_; }

  // styles.size() must equal style_count(); each entry is [B, latent].
  // noise_rng == nullptr pins noise to zero (deterministic synthesis).
  ag::Var forward(const std::vector<ag::Var>& styles, Rng* noise_rng = nullptr) const;
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;

  ag::Var const_input;  // [1, C0*16], reshaped to [B, C0, 4, 4]
  std::vector<StyledConv> convs;
  nn::Conv2d to_rgb;

 private:
  int resolution_ = 0;
  int latent_dim_ = 0;
};

class Generator {
 public:
  Generator() = default;
  Generator(const GanConfig& cfg, Rng& rng);

  // z [B, latent] -> images [B, 3, res, res].
  ag::Var forward_z(const ag::Var& z, Rng* noise_rng = nullptr) const;
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;

  GanConfig cfg;
  MappingNet mapping;
  SynthesisNet synthesis;
};

class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const GanConfig& cfg, Rng& rng);

  ag::Var forward(const ag::Var& images) const;  // [B,3,R,R] -> logits [B,1]
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;

  nn::Conv2d from_rgb;
  struct Block {
    nn::Conv2d conv1;  // 3x3, same resolution
    nn::Conv2d conv2;  // 3x3 stride 2
  };
  std::vector<Block> blocks;
  nn::Conv2d final_conv;
  nn::Linear fc1, fc2;
};

// ---- operations ------------------------------------------------------------

// w [B, latent] (or [latent]) broadcast to L identical style rows.
Tensor broadcast_latent(const Tensor& w, int style_count);
std::vector<ag::Var> broadcast_styles(const ag::Var& w, int style_count);

// Single-sample synthesis from an L x latent_dim unfolded latent; noise
// pinned to zero. Returns [3, res, res].
Tensor synthesize(const Generator& g, const Tensor& w_plus);

// z [latent] -> w [latent] through the mapping network.
Tensor map_latent(const Generator& g, const Tensor& z);

// Mean over the batch of the squared gradient norm of the critic's output
// w.r.t. its input pixels. The generic overload accepts any per-sample
// critic (logits [B,1]) and leaves gradient buffers of parameters captured
// by `critic` dirty; the Discriminator overload re-zeroes its own.
double r1_penalty(const std::function<ag::Var(const ag::Var&)>& critic, const Tensor& real_images);
double r1_penalty(const Discriminator& d, const Tensor& real_images);

// Accumulates scale * d(penalty)/d(params) into the gradients of `params`
// (two-pass forward-over-reverse). Caller zeroes gradients beforehand; on
// return they hold exactly the scaled penalty gradient. Returns the penalty.
double r1_penalty_backward(const std::function<ag::Var(const ag::Var&)>& critic,
                           const nn::ParamRegistry& params, const Tensor& real_images,
                           double scale);

struct PlpState {
  double running_mean = 0.0;
};

// Squared deviation of per-sample Jacobian-vector-product norms from the
// running mean; updates the running mean (rate ema_decay). `synth` maps a
// [B, D] style batch to images. When noise_y is null a standard-normal
// projection is drawn from rng.
double path_length_penalty(const std::function<ag::Var(const ag::Var&)>& synth,
                           const Tensor& w_batch, PlpState& state, Rng& rng,
                           double ema_decay = 0.01, const Tensor* noise_y = nullptr);
double path_length_penalty(const Generator& g, const Tensor& w_batch, PlpState& state, Rng& rng,
                           double ema_decay = 0.01, const Tensor* noise_y = nullptr);

// Training variant: additionally accumulates scale * d(penalty)/d(params)
// into the gradients of `params` (caller zeroes first; on return they hold
// exactly the scaled penalty gradient).
double path_length_penalty_backward(const std::function<ag::Var(const ag::Var&)>& synth,
                                    const nn::ParamRegistry& params, const Tensor& w_batch,
                                    PlpState& state, Rng& rng, double ema_decay,
                                    const Tensor* noise_y, double scale);

struct AdaState {
  double p = 0.0;
  double overfit_estimate = 0.0;
};

// EMA of the batch mean of sign(real logits); p stepped toward keeping the
// estimate at ada_target and clamped to [0,1].
AdaState ada_update(AdaState state, const Tensor& real_logits, const GanConfig& cfg);

// Which augmentation categories the pipeline applies (fixed order).
struct AugmentPipeline {
  bool hflip = true;
  bool rot90 = true;
  bool translate = true;
  bool color = true;
};

// Each image independently receives each enabled category with probability
// p. p == 0 returns the input unchanged, bit-exact. Differentiable w.r.t.
// the image values.
ag::Var apply_augmentation(const ag::Var& images, double p, Rng& rng,
                           const AugmentPipeline& pipe = {});
Tensor apply_augmentation(const Tensor& images, double p, Rng& rng,
                          const AugmentPipeline& pipe = {});

// ---- training ---------------------------------------------------------------

using FidFn = std::function<double(const Tensor& fake, const Tensor& real)>;

struct GanTrainOptions {
  std::filesystem::path out_dir;  // empty: write no artifacts
  FidFn fid;                      // empty: built-in seeded feature pyramid
  std::function<void(const std::string&)> log_sink;  // receives JSONL records
};

struct GanTrainStats {
  std::vector<std::pair<int64_t, double>> fid_history;  // (samples_seen, fid)
  double final_g_loss = 0.0;
  double final_d_loss = 0.0;
  int64_t samples_seen = 0;
};

// Non-saturating adversarial training with lazy R1 / path-length penalties
// and ADA. Returns the trained parameters; with out_dir set, also writes
// gan.ckpt (+ sidecar) and gan_train_log.jsonl there.
ckpt::Checkpoint train_gan(const prior::PriorDataset& dataset, const GanConfig& cfg, Rng& rng,
                           const GanTrainOptions& opts = {}, GanTrainStats* stats = nullptr);

// n images [n, 3, res, res] from z ~ N(0, I) through map -> broadcast ->
// synthesize; noise images are drawn from the same rng (seed-deterministic).
Tensor sample_faces(const Generator& g, int64_t n, Rng& rng);
Tensor sample_faces(const ckpt::Checkpoint& generator_ckpt, int64_t n, Rng& rng);

// Rebuilds a generator from a stage-1 checkpoint (inverse of train_gan's
// snapshot). Throws PrerequisiteError on stage/name mismatches.
Generator load_generator(const ckpt::Checkpoint& ck);

}  // namespace frboost::gan
