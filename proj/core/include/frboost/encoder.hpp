#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "frboost/autograd.hpp"
#include "frboost/checkpoint.hpp"
#include "frboost/metrics.hpp"
#include "frboost/nn.hpp"
#include "frboost/prior_data.hpp"
#include "frboost/rng.hpp"

namespace frboost::enc {

// Stage 2 configuration: inversion-encoder training against a frozen
// generator, plus the AE/VAE pretraining baselines.
struct EncoderConfig {
  // Loss weights. The identity and latent-regularizer terms exist as recorded
  // knobs but this trainer does not implement them; both must stay 0.
  double lambda_l2 = 1.0;
  double lambda_lpips = 0.8;
  double lambda_id = 0.0;
  double lambda_reg = 0.0;

  int input_size = 112;              // encoder-facing square resolution
  int64_t total_steps = 16'000'000;  // counted in samples

  int trunk_depth = 4;            // residual stages (>= 3 for the pyramid taps)
  int trunk_width = 64;           // first-stage channels; doubles per stage
  int trunk_blocks_per_stage = 3;
  bool use_squeeze_excitation = true;

  int batch_size = 8;
  double lr = 1e-4;  // adaptive-moments step size
  int64_t log_interval = 65'536;
  int ae_latent_dim = 512;  // AE/VAE bottleneck width

  void validate() const;  // throws ConfigError
  nn::TrunkConfig trunk_config() const;
  static EncoderConfig desk();
  static EncoderConfig paper();
};

std::string encoder_config_to_json(const EncoderConfig& cfg);
EncoderConfig encoder_config_from_json(const std::string& text);

// "map2style" head: strided conv chain collapsing one trunk feature tap down
// to a single latent row per image.
struct Map2Style {
  std::vector<nn::Conv2d> convs;

  Map2Style() = default;
  Map2Style(int in_ch, int in_hw, int latent_dim, Rng& rng);
  ag::Var forward(const ag::Var& tap) const;  // [B,C,H,W] -> [B,latent]
  void collect(nn::ParamRegistry& reg, const std::string& prefix) const;
};

// Inversion encoder: shared residual trunk plus one style head per generator
// style input. Heads read from three trunk pyramid levels: the first third
// (coarse styles) from the deepest features, the middle third from mid-level,
// the rest from the shallowest of the three taps.
struct EncoderParams {
  EncoderConfig cfg;
  int style_count = 0;
  int latent_dim = 0;
  nn::Trunk trunk;
  std::vector<Map2Style> heads;
  std::vector<int> head_tap;  // trunk stage index consumed by each head

  EncoderParams() = default;
  EncoderParams(const EncoderConfig& cfg, int style_count, int latent_dim, Rng& rng);
  // One [B,latent] style row per generator layer, coarse first.
  std::vector<ag::Var> forward_styles(const ag::Var& images, const nn::TrainCtx& ctx);
  ag::Var forward(const ag::Var& images, const nn::TrainCtx& ctx);  // [B,L,D]
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
};

// Unfolded latent code for one [3,S,S] image: [style_count, latent_dim].
// Eval mode, gradient-free. Throws std::invalid_argument on a size mismatch.
Tensor encode(EncoderParams& enc, const Tensor& image);

// LPIPS-style distance: mean squared difference of channel-unit-normalized
// feature maps, summed over pyramid levels. Accepts [3,H,W] or [B,3,H,W];
// symmetric, zero iff the features coincide.
ag::Var perceptual_distance(const metrics::FeaturePyramid& net, const ag::Var& a,
                            const ag::Var& b);
double perceptual_distance(const metrics::FeaturePyramid& net, const Tensor& a,
                           const Tensor& b);

// lambda_l2 * ||I - down(I_hat)||_2 + lambda_lpips * LPIPS(I, down(I_hat));
// the generated full-resolution image is bilinearly downscaled to the
// config's input size. Per sample, averaged over the batch. Optional out
// parameters receive the unweighted terms (for logging).
ag::Var reconstruction_loss(const EncoderConfig& cfg, const metrics::FeaturePyramid& net,
                            const ag::Var& target, const ag::Var& generated_full,
                            ag::Var* l2_out = nullptr, ag::Var* lpips_out = nullptr);
double reconstruction_loss(const EncoderConfig& cfg, const metrics::FeaturePyramid& net,
                           const Tensor& target, const Tensor& generated_full);

struct EncTrainOptions {
  std::filesystem::path out_dir;  // checkpoints + jsonl log + preview grids
  std::function<void(const std::string&)> log_sink;
  int preview_count = 4;  // images per row in the reconstruction grid
};

struct EncTrainStats {
  double initial_loss = 0.0;  // mean over the first logging window
  double final_loss = 0.0;    // mean over the last logging window
  int64_t samples_seen = 0;
  uint64_t generator_hash_before = 0;
  uint64_t generator_hash_after = 0;
};

// Trains the pSp-style inversion encoder against the frozen generator held in
// generator_ckpt (stage "gan"). The generator is never updated; its parameter
// hash is recorded before and after in the stats. Non-finite losses abort
// with a diagnostic checkpoint and NumericalError.
ckpt::Checkpoint train_encoder(const prior::PriorDataset& prior,
                               const ckpt::Checkpoint& generator_ckpt,
                               const EncoderConfig& cfg, Rng& rng,
                               const EncTrainOptions& opts = {},
                               EncTrainStats* stats = nullptr);

// Rebuilds the encoder from a stage-"encoder" checkpoint (inverse of
// train_encoder's snapshot).
EncoderParams load_encoder(const ckpt::Checkpoint& ck);

// KL(q || N(0, I)) for a diagonal Gaussian posterior given per-row mu and
// log-variance [B,D]: 0.5 * sum_d(mu^2 + sigma^2 - 1 - log sigma^2), averaged
// over rows.
ag::Var kl_standard_normal(const ag::Var& mu, const ag::Var& logvar);

// Symmetric autoencoder baseline sharing the encoder trunk; mirrored
// upsampling decoder. When variational, the bottleneck is a diagonal
// Gaussian reparameterization and the loss gains a unit-weight KL term.
struct AutoencoderParams {
  EncoderConfig cfg;
  bool variational = false;
  nn::Trunk trunk;
  nn::Linear fc_mu, fc_logvar;  // fc_logvar present only when variational
  nn::Linear fc_up;             // latent -> deepest feature map
  std::vector<nn::Conv2d> dec_convs;
  nn::Conv2d dec_out;
  int deep_ch = 0, deep_hw = 0;

  AutoencoderParams() = default;
  AutoencoderParams(const EncoderConfig& cfg, bool variational, Rng& rng);
  // Posterior parameters; logvar is an empty Var unless variational.
  std::pair<ag::Var, ag::Var> encode_latent(const ag::Var& images, const nn::TrainCtx& ctx);
  ag::Var decode(const ag::Var& z, const nn::TrainCtx& ctx);
  void collect(nn::ParamRegistry& reg, const std::string& prefix);
};

// Trains the AE (variational=false) or VAE baseline on the prior dataset.
// Checkpoint stage is "ae" or "vae"; the trunk layout matches EncoderParams
// so downstream weight transfer works from either pretraining path.
ckpt::Checkpoint train_autoencoder(const prior::PriorDataset& prior, bool variational,
                                   const EncoderConfig& cfg, Rng& rng,
                                   const EncTrainOptions& opts = {},
                                   EncTrainStats* stats = nullptr);

// Fréchet distance over pooled pyramid features; shared numeric core with the
// GAN trainer's quality tracking.
using metrics::FeaturePyramid;
using metrics::fid;
using metrics::FidDiag;
using metrics::frechet_distance;

}  // namespace frboost::enc
