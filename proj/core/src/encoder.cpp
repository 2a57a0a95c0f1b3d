#include "frboost/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "frboost/errors.hpp"
#include "frboost/gan.hpp"
#include "frboost/image.hpp"
#include "frboost/optim.hpp"
#include "train_common.hpp"

namespace frboost::enc {

using ag::Var;
using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void EncoderConfig::validate() const {
  if (lambda_l2 < 0 || lambda_lpips < 0 || lambda_id < 0 || lambda_reg < 0)
    throw ConfigError("EncoderConfig: loss weights must be >= 0");
  if (lambda_id != 0.0)
    throw ConfigError("EncoderConfig: the identity loss is deliberately disabled; lambda_id must be 0");
  if (lambda_reg != 0.0)
    throw ConfigError("EncoderConfig: the latent regularizer is not supported; lambda_reg must be 0");
  if (input_size < 8) throw ConfigError("EncoderConfig: input_size must be >= 8");
  if (total_steps < 0) throw ConfigError("EncoderConfig: total_steps must be >= 0");
  if (trunk_depth < 3)
    throw ConfigError("EncoderConfig: trunk_depth must be >= 3 (three pyramid taps)");
  if (trunk_width < 1) throw ConfigError("EncoderConfig: trunk_width must be >= 1");
  if (trunk_blocks_per_stage < 1)
    throw ConfigError("EncoderConfig: trunk_blocks_per_stage must be >= 1");
  if (batch_size < 1) throw ConfigError("EncoderConfig: batch_size must be >= 1");
  if (lr <= 0) throw ConfigError("EncoderConfig: lr must be positive");
  if (log_interval < 1) throw ConfigError("EncoderConfig: log_interval must be >= 1");
  if (ae_latent_dim < 1) throw ConfigError("EncoderConfig: ae_latent_dim must be >= 1");
}

nn::TrunkConfig EncoderConfig::trunk_config() const {
  nn::TrunkConfig t;
  t.in_ch = 3;
  t.stage_channels.clear();
  t.stage_blocks.clear();
  for (int s = 0; s < trunk_depth; ++s) {
    t.stage_channels.push_back(std::min(trunk_width << s, trunk_width * 8));
    t.stage_blocks.push_back(trunk_blocks_per_stage);
  }
  t.se_reduction = use_squeeze_excitation ? 4 : 0;
  return t;
}

EncoderConfig EncoderConfig::desk() {
  EncoderConfig c;
  c.input_size = 32;
  c.total_steps = 50'000;
  c.trunk_depth = 3;
  c.trunk_width = 8;
  c.trunk_blocks_per_stage = 1;
  c.batch_size = 8;
  c.lr = 1e-3;
  c.log_interval = 4'096;
  c.ae_latent_dim = 64;
  return c;
}

EncoderConfig EncoderConfig::paper() {
  EncoderConfig c;       // defaults are the published settings
  c.batch_size = 1;      // 1-sample steps
  c.log_interval = 100'000;
  return c;
}

std::string encoder_config_to_json(const EncoderConfig& cfg) {
  json j;
  j["lambda_l2"] = cfg.lambda_l2;
  j["lambda_lpips"] = cfg.lambda_lpips;
  j["lambda_id"] = cfg.lambda_id;
  j["lambda_reg"] = cfg.lambda_reg;
  j["input_size"] = cfg.input_size;
  j["total_steps"] = cfg.total_steps;
  j["trunk_depth"] = cfg.trunk_depth;
  j["trunk_width"] = cfg.trunk_width;
  j["trunk_blocks_per_stage"] = cfg.trunk_blocks_per_stage;
  j["use_squeeze_excitation"] = cfg.use_squeeze_excitation;
  j["batch_size"] = cfg.batch_size;
  j["lr"] = cfg.lr;
  j["log_interval"] = cfg.log_interval;
  j["ae_latent_dim"] = cfg.ae_latent_dim;
  return j.dump(2);
}

EncoderConfig encoder_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("encoder config: invalid JSON: ") + e.what());
  }
  EncoderConfig c;
  try {
    c.lambda_l2 = j.value("lambda_l2", c.lambda_l2);
    c.lambda_lpips = j.value("lambda_lpips", c.lambda_lpips);
    c.lambda_id = j.value("lambda_id", c.lambda_id);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.input_size = j.value("input_size", c.input_size);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.trunk_depth = j.value("trunk_depth", c.trunk_depth);
    c.trunk_width = j.value("trunk_width", c.trunk_width);
    c.trunk_blocks_per_stage = j.value("trunk_blocks_per_stage", c.trunk_blocks_per_stage);
    c.use_squeeze_excitation = j.value("use_squeeze_excitation", c.use_squeeze_excitation);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr = j.value("lr", c.lr);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.ae_latent_dim = j.value("ae_latent_dim", c.ae_latent_dim);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("encoder config: bad field type: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// encoder network
// ---------------------------------------------------------------------------

namespace {

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

int conv_halve(int h) { return (h + 2 - 3) / 2 + 1; }  // 3x3, stride 2, pad 1

// Spatial size of each trunk stage output for a given input size.
std::vector<int> stage_spatials(int input_size, int depth) {
  std::vector<int> hw;
  int h = input_size;
  for (int s = 0; s < depth; ++s) {
    h = conv_halve(h);
    hw.push_back(h);
  }
  return hw;
}

}  // namespace

Map2Style::Map2Style(int in_ch, int in_hw, int latent_dim, Rng& rng) {
  if (in_hw == 1) {
    convs.emplace_back(in_ch, latent_dim, 1, 1, 0, rng);
    return;
  }
  int h = in_hw, ch = in_ch;
  while (h > 1) {
    convs.emplace_back(ch, latent_dim, 3, 2, 1, rng);
    ch = latent_dim;
    h = conv_halve(h);
  }
}

Var Map2Style::forward(const Var& tap) const {
  Var h = tap;
  for (size_t i = 0; i < convs.size(); ++i) {
    h = convs[i].forward(h);
    if (i + 1 < convs.size()) h = ag::leaky_relu(h, 0.2);
  }
  const Tensor& v = h.value();
  return ag::reshape(h, {v.dim(0), v.dim(1)});  // spatial is 1x1 here
}

void Map2Style::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  for (size_t i = 0; i < convs.size(); ++i)
    convs[i].collect(reg, prefix + ".conv" + std::to_string(i));
}

EncoderParams::EncoderParams(const EncoderConfig& cfg_, int style_count_, int latent_dim_,
                             Rng& rng)
    : cfg(cfg_), style_count(style_count_), latent_dim(latent_dim_) {
  cfg.validate();
  if (style_count < 1 || latent_dim < 1)
    throw ConfigError("EncoderParams: style_count and latent_dim must be >= 1");
  nn::TrunkConfig tc = cfg.trunk_config();
  trunk = nn::Trunk(tc, rng);
  const int depth = cfg.trunk_depth;
  std::vector<int> hw = stage_spatials(cfg.input_size, depth);
  if (hw.back() < 1) throw ConfigError("EncoderParams: input_size too small for trunk_depth");

  // Coarse styles from the deepest tap, medium from the middle, fine from the
  // shallowest of the three consumed taps.
  const int l = style_count;
  const int n_deep = (l + 2) / 3;
  const int n_mid = (l - n_deep + 1) / 2;
  for (int k = 0; k < l; ++k) {
    int tap = depth - 1;
    if (k >= n_deep) tap = depth - 2;
    if (k >= n_deep + n_mid) tap = depth - 3;
    head_tap.push_back(tap);
    heads.emplace_back(tc.stage_channels[static_cast<size_t>(tap)],
                       hw[static_cast<size_t>(tap)], latent_dim, rng);
  }
}

std::vector<Var> EncoderParams::forward_styles(const Var& images, const nn::TrainCtx& ctx) {
  const Tensor& v = images.value();
  if (v.ndim() != 4 || v.dim(1) != 3 || v.dim(2) != cfg.input_size || v.dim(3) != cfg.input_size)
    throw std::invalid_argument("EncoderParams: expected [B,3," + std::to_string(cfg.input_size) +
                                "," + std::to_string(cfg.input_size) + "] input, got " +
                                v.shape_str());
  std::vector<Var> taps;
  trunk.forward(images, ctx, &taps);
  std::vector<Var> styles;
  styles.reserve(heads.size());
  for (size_t k = 0; k < heads.size(); ++k)
    styles.push_back(heads[k].forward(taps[static_cast<size_t>(head_tap[k])]));
  return styles;
}

Var EncoderParams::forward(const Var& images, const nn::TrainCtx& ctx) {
  return ag::stack_rows(forward_styles(images, ctx));
}

void EncoderParams::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  trunk.collect(reg, join(prefix, "trunk"));
  for (size_t k = 0; k < heads.size(); ++k)
    heads[k].collect(reg, join(prefix, "head" + std::to_string(k)));
}

Tensor encode(EncoderParams& enc, const Tensor& image) {
  if (image.ndim() != 3 || image.dim(0) != 3 || image.dim(1) != enc.cfg.input_size ||
      image.dim(2) != enc.cfg.input_size)
    throw std::invalid_argument("encode: expected a [3," + std::to_string(enc.cfg.input_size) +
                                "," + std::to_string(enc.cfg.input_size) + "] image, got " +
                                image.shape_str());
  ag::NoGradGuard ng;
  nn::TrainCtx ctx;  // eval mode
  Tensor batch = image;
  batch.shape = {1, 3, enc.cfg.input_size, enc.cfg.input_size};
  Var out = enc.forward(Var::constant(std::move(batch)), ctx);
  Tensor w = out.value();
  w.shape = {enc.style_count, enc.latent_dim};
  return w;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

namespace {

Var as_batch(const Var& x, const char* who) {
  const Tensor& v = x.value();
  if (v.ndim() == 3) return ag::reshape(x, {1, v.dim(0), v.dim(1), v.dim(2)});
  if (v.ndim() == 4) return x;
  throw std::invalid_argument(std::string(who) + ": expected a 3-d or 4-d image tensor, got " +
                              v.shape_str());
}

// Unit-normalize along the channel axis at every spatial location.
Var channel_unit(const Var& f) {
  Var inv = ag::rsqrt(ag::reduce_sum(ag::square(f), {1}, true), 1e-12);
  return ag::cbcast_mul(f, inv);
}

}  // namespace

Var perceptual_distance(const metrics::FeaturePyramid& net, const Var& a, const Var& b) {
  Var ba = as_batch(a, "perceptual_distance");
  Var bb = as_batch(b, "perceptual_distance");
  if (!ba.value().same_shape(bb.value()))
    throw std::invalid_argument("perceptual_distance: image shapes differ: " +
                                ba.value().shape_str() + " vs " + bb.value().shape_str());
  std::vector<Var> fa = net.feature_maps(ba);
  std::vector<Var> fb = net.feature_maps(bb);
  Var total;
  for (size_t i = 0; i < fa.size(); ++i) {
    Var term = ag::mean_all(ag::square(ag::sub(channel_unit(fa[i]), channel_unit(fb[i]))));
    total = i == 0 ? term : ag::add(total, term);
  }
  return total;
}

double perceptual_distance(const metrics::FeaturePyramid& net, const Tensor& a, const Tensor& b) {
  ag::NoGradGuard ng;
  return perceptual_distance(net, Var::constant(a), Var::constant(b)).value().item();
}

Var reconstruction_loss(const EncoderConfig& cfg, const metrics::FeaturePyramid& net,
                        const Var& target, const Var& generated_full, Var* l2_out,
                        Var* lpips_out) {
  Var t = as_batch(target, "reconstruction_loss");
  Var g = as_batch(generated_full, "reconstruction_loss");
  const int s = cfg.input_size;
  if (t.value().dim(2) != s || t.value().dim(3) != s)
    throw std::invalid_argument("reconstruction_loss: target must be input_size square, got " +
                                t.value().shape_str());
  if (g.value().dim(2) < s || g.value().dim(3) < s)
    throw std::invalid_argument("reconstruction_loss: generated image smaller than input_size");
  Var down = (g.value().dim(2) == s && g.value().dim(3) == s) ? g : ag::bilinear_resize(g, s, s);

  // Per-sample Euclidean norm of the residual, averaged over the batch.
  Var l2 = ag::mean_all(ag::vsqrt(ag::reduce_sum(ag::square(ag::sub(down, t)), {1, 2, 3})));
  if (l2_out) *l2_out = l2;
  Var loss = ag::mul_scalar(l2, cfg.lambda_l2);
  if (cfg.lambda_lpips > 0) {
    Var lp = perceptual_distance(net, t, down);
    if (lpips_out) *lpips_out = lp;
    loss = ag::add(loss, ag::mul_scalar(lp, cfg.lambda_lpips));
  } else if (lpips_out) {
    *lpips_out = Var::constant(Tensor::scalar(0.0));
  }
  return loss;
}

double reconstruction_loss(const EncoderConfig& cfg, const metrics::FeaturePyramid& net,
                           const Tensor& target, const Tensor& generated_full) {
  ag::NoGradGuard ng;
  return reconstruction_loss(cfg, net, Var::constant(target), Var::constant(generated_full))
      .value()
      .item();
}

// ---------------------------------------------------------------------------
// training helpers
// ---------------------------------------------------------------------------

namespace {

std::vector<Image8> preload_resized(const prior::PriorDataset& ds, int size) {
  std::vector<Image8> cache;
  cache.reserve(ds.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    Image8 im = ds.load(i);
    if (im.h != size || im.w != size) im = resize_image(im, size, size);
    cache.push_back(std::move(im));
  }
  return cache;
}

// Trend window sized to the run: a quarter of the steps, capped at 64.
size_t trend_window(int64_t total_steps, int batch) {
  const int64_t steps = (total_steps + batch - 1) / std::max(1, batch);
  return static_cast<size_t>(std::clamp<int64_t>(steps / 4, 1, 64));
}

struct TrainLog {
  std::ofstream file;
  const EncTrainOptions* opts = nullptr;

  TrainLog(const EncTrainOptions& o, const char* name) : opts(&o) {
    if (!o.out_dir.empty()) {
      std::filesystem::create_directories(o.out_dir);
      file.open(o.out_dir / name, std::ios::trunc);
    }
  }
  void emit(const json& j) {
    std::string line = j.dump();
    if (file.is_open()) file << line << '\n' << std::flush;
    if (opts->log_sink) opts->log_sink(line);
  }
};

// Two-row preview grid: inputs on top, reconstructions below.
void write_preview(const std::filesystem::path& dir, int64_t samples_seen, const Tensor& inputs,
                   const Tensor& recons, int count) {
  const int k = std::min<int>(count, inputs.dim(0));
  if (k < 1) return;
  const int s = inputs.dim(2);
  std::vector<Image8> in_imgs = batch_to_images(inputs);
  std::vector<Image8> re_imgs = batch_to_images(recons);
  Image8 grid(2 * s, k * s);
  for (int col = 0; col < k; ++col)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x)
        for (int c = 0; c < 3; ++c) {
          grid.at(y, col * s + x, c) = in_imgs[static_cast<size_t>(col)].at(y, x, c);
          grid.at(s + y, col * s + x, c) = re_imgs[static_cast<size_t>(col)].at(y, x, c);
        }
  save_image((dir / ("recon_" + std::to_string(samples_seen) + ".png")).string(), grid);
}

Tensor slice_batch(const Tensor& batch, int count) {
  const int k = std::min<int>(count, batch.dim(0));
  Tensor out({k, batch.dim(1), batch.dim(2), batch.dim(3)});
  std::copy_n(batch.d.begin(), out.numel(), out.d.begin());
  return out;
}

[[noreturn]] void abort_nonfinite(const nn::ParamRegistry& reg, const char* stage,
                                  const std::string& config_json, int64_t samples_seen,
                                  const Rng& rng, const EncTrainOptions& opts,
                                  const std::string& what) {
  if (!opts.out_dir.empty()) {
    ckpt::Checkpoint diag = ckpt::snapshot(reg, stage, config_json, samples_seen, &rng);
    ckpt::save_checkpoint(opts.out_dir / (std::string(stage) + "_diagnostic.ckpt"), diag);
  }
  throw NumericalError(std::string(stage) + " training diverged at sample " +
                       std::to_string(samples_seen) + ": " + what +
                       (opts.out_dir.empty() ? "" : " (diagnostic checkpoint written)"));
}

}  // namespace

// ---------------------------------------------------------------------------
// train_encoder
// ---------------------------------------------------------------------------

ckpt::Checkpoint train_encoder(const prior::PriorDataset& prior,
                               const ckpt::Checkpoint& generator_ckpt, const EncoderConfig& cfg,
                               Rng& rng, const EncTrainOptions& opts, EncTrainStats* stats) {
  cfg.validate();
  if (prior.empty()) throw PrerequisiteError("train_encoder: prior dataset is empty");

  gan::Generator gen = gan::load_generator(generator_ckpt);
  const gan::GanConfig gcfg = gen.cfg;
  if (cfg.input_size > gcfg.resolution)
    throw ConfigError("train_encoder: input_size " + std::to_string(cfg.input_size) +
                      " exceeds generator resolution " + std::to_string(gcfg.resolution));
  const int l = gen.synthesis.style_count();
  const int d = gcfg.latent_dim;
  const int s = cfg.input_size;
  const int b = cfg.batch_size;

  Rng init_rng(rng.next_u64());
  Rng data_rng(rng.next_u64());

  EncoderParams encoder(cfg, l, d, init_rng);
  nn::ParamRegistry reg;
  encoder.collect(reg, "");
  optim::Adam opt(reg, cfg.lr);

  nn::ParamRegistry reg_gen;
  gen.collect(reg_gen, "generator");
  const uint64_t gen_hash0 = ckpt::params_hash(reg_gen);

  metrics::FeaturePyramid lpips_net(derive_seed(0x6c706970, "encoder.lpips"));

  json cj;
  cj["encoder"] = json::parse(encoder_config_to_json(cfg));
  cj["style_count"] = l;
  cj["latent_dim"] = d;
  cj["generator_hash"] = gen_hash0;
  cj["generator_config"] = json::parse(gan::gan_config_to_json(gcfg));
  const std::string config_json = cj.dump(2);

  std::vector<Image8> cache = preload_resized(prior, s);
  detail::BatchSource batches(data_rng.permutation(static_cast<int64_t>(cache.size())), data_rng);
  TrainLog log(opts, "encoder_train_log.jsonl");
  detail::LossWindow window(trend_window(cfg.total_steps, b));
  nn::TrainCtx train_ctx;
  train_ctx.training = true;

  int64_t samples_seen = 0;
  int64_t next_log = 0;
  while (samples_seen < cfg.total_steps) {
    const int bsz = static_cast<int>(std::min<int64_t>(b, cfg.total_steps - samples_seen));
    std::vector<Image8> imgs;
    imgs.reserve(static_cast<size_t>(bsz));
    for (int i = 0; i < bsz; ++i)
      imgs.push_back(cache[static_cast<size_t>(batches.next())]);
    Var batch = Var::constant(images_to_batch(imgs));

    std::vector<Var> styles = encoder.forward_styles(batch, train_ctx);
    Var recon_full = gen.synthesis.forward(styles, nullptr);
    Var l2_term, lpips_term;
    Var loss = reconstruction_loss(cfg, lpips_net, batch, recon_full, &l2_term, &lpips_term);

    const double loss_v = loss.value().item();
    if (!std::isfinite(loss_v))
      abort_nonfinite(reg, "encoder", config_json, samples_seen, rng, opts,
                      "non-finite reconstruction loss");
    reg.zero_grad();
    reg_gen.zero_grad();
    ag::backward(loss);
    opt.step();

    samples_seen += bsz;
    window.push(loss_v);

    if (samples_seen >= next_log || samples_seen >= cfg.total_steps) {
      json j;
      j["samples_seen"] = samples_seen;
      j["loss"] = loss_v;
      j["l2"] = l2_term.value().item();
      j["lpips"] = lpips_term.value().item();
      j["lambda_id"] = cfg.lambda_id;
      log.emit(j);
      if (!opts.out_dir.empty() && opts.preview_count > 0) {
        ag::NoGradGuard ng;
        Tensor down = recon_full.value().dim(2) == s
                          ? recon_full.value()
                          : ag::bilinear_resize(Var::constant(recon_full.value()), s, s).value();
        write_preview(opts.out_dir, samples_seen, slice_batch(batch.value(), opts.preview_count),
                      slice_batch(down, opts.preview_count), opts.preview_count);
      }
      next_log += cfg.log_interval;
    }
  }

  const uint64_t gen_hash1 = ckpt::params_hash(reg_gen);
  if (gen_hash1 != gen_hash0)
    throw NumericalError("train_encoder: frozen generator was modified (hash mismatch)");
  if (stats) {
    stats->initial_loss = window.initial();
    stats->final_loss = window.current();
    stats->samples_seen = samples_seen;
    stats->generator_hash_before = gen_hash0;
    stats->generator_hash_after = gen_hash1;
  }

  ckpt::Checkpoint ck = ckpt::snapshot(reg, "encoder", config_json, samples_seen, &rng);
  for (const auto& [name, t] : ck.tensors)
    if (!all_finite(t))
      abort_nonfinite(reg, "encoder", config_json, samples_seen, rng, opts,
                      "non-finite parameter " + name);
  if (!opts.out_dir.empty()) ckpt::save_checkpoint(opts.out_dir / "encoder.ckpt", ck);
  return ck;
}

EncoderParams load_encoder(const ckpt::Checkpoint& ck) {
  if (ck.stage != "encoder")
    throw PrerequisiteError("load_encoder: expected a stage-encoder checkpoint, got '" + ck.stage +
                            "'");
  json cj;
  try {
    cj = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw PrerequisiteError(std::string("load_encoder: checkpoint config is not JSON: ") +
                            e.what());
  }
  if (!cj.contains("encoder") || !cj.contains("style_count") || !cj.contains("latent_dim"))
    throw PrerequisiteError("load_encoder: checkpoint config lacks encoder/style_count/latent_dim");
  EncoderConfig cfg = encoder_config_from_json(cj["encoder"].dump());
  Rng tmp(0);
  EncoderParams enc(cfg, cj["style_count"].get<int>(), cj["latent_dim"].get<int>(), tmp);
  nn::ParamRegistry reg;
  enc.collect(reg, "");
  ckpt::restore(ck, reg);
  return enc;
}

// ---------------------------------------------------------------------------
// autoencoder baselines
// ---------------------------------------------------------------------------

Var kl_standard_normal(const Var& mu, const Var& logvar) {
  Var t = ag::sub(ag::add(ag::square(mu), ag::vexp(logvar)), ag::add_scalar(logvar, 1.0));
  return ag::mul_scalar(ag::mean_all(ag::reduce_sum(t, {1})), 0.5);
}

AutoencoderParams::AutoencoderParams(const EncoderConfig& cfg_, bool variational_, Rng& rng)
    : cfg(cfg_), variational(variational_) {
  cfg.validate();
  nn::TrunkConfig tc = cfg.trunk_config();
  trunk = nn::Trunk(tc, rng);
  std::vector<int> hw = stage_spatials(cfg.input_size, cfg.trunk_depth);
  deep_ch = tc.stage_channels.back();
  deep_hw = hw.back();
  const int flat = deep_ch * deep_hw * deep_hw;
  fc_mu = nn::Linear(flat, cfg.ae_latent_dim, rng);
  if (variational) fc_logvar = nn::Linear(flat, cfg.ae_latent_dim, rng);
  fc_up = nn::Linear(cfg.ae_latent_dim, flat, rng);

  // Mirror the trunk: one upsample+conv per stage, deep to shallow, then a
  // final conv back to RGB.
  std::vector<int> chain;
  for (int sft = cfg.trunk_depth - 1; sft >= 0; --sft)
    chain.push_back(tc.stage_channels[static_cast<size_t>(sft)]);
  chain.push_back(chain.back());
  for (size_t i = 0; i + 1 < chain.size(); ++i)
    dec_convs.emplace_back(chain[i], chain[i + 1], 3, 1, 1, rng);
  dec_out = nn::Conv2d(chain.back(), 3, 3, 1, 1, rng);
}

std::pair<Var, Var> AutoencoderParams::encode_latent(const Var& images, const nn::TrainCtx& ctx) {
  const Tensor& v = images.value();
  if (v.ndim() != 4 || v.dim(1) != 3 || v.dim(2) != cfg.input_size || v.dim(3) != cfg.input_size)
    throw std::invalid_argument("AutoencoderParams: expected [B,3," +
                                std::to_string(cfg.input_size) + "," +
                                std::to_string(cfg.input_size) + "] input, got " + v.shape_str());
  Var deep = trunk.forward(images, ctx);
  Var flat = ag::reshape(deep, {v.dim(0), deep_ch * deep_hw * deep_hw});
  Var mu = fc_mu.forward(flat);
  Var logvar = variational ? fc_logvar.forward(flat) : Var();
  return {mu, logvar};
}

Var AutoencoderParams::decode(const Var& z, const nn::TrainCtx&) {
  const int bsz = z.value().dim(0);
  Var h = ag::reshape(fc_up.forward(z), {bsz, deep_ch, deep_hw, deep_hw});
  h = ag::leaky_relu(h, 0.2);
  for (auto& conv : dec_convs) {
    h = ag::upsample_nearest2(h);
    h = ag::leaky_relu(conv.forward(h), 0.2);
  }
  Var out = dec_out.forward(h);
  if (out.value().dim(2) != cfg.input_size || out.value().dim(3) != cfg.input_size)
    out = ag::bilinear_resize(out, cfg.input_size, cfg.input_size);
  return out;
}

void AutoencoderParams::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  trunk.collect(reg, join(prefix, "trunk"));
  fc_mu.collect(reg, join(prefix, "mu_fc"));
  if (variational) fc_logvar.collect(reg, join(prefix, "logvar_fc"));
  fc_up.collect(reg, join(prefix, "up_fc"));
  for (size_t i = 0; i < dec_convs.size(); ++i)
    dec_convs[i].collect(reg, join(prefix, "dec" + std::to_string(i)));
  dec_out.collect(reg, join(prefix, "dec_out"));
}

ckpt::Checkpoint train_autoencoder(const prior::PriorDataset& prior, bool variational,
                                   const EncoderConfig& cfg, Rng& rng,
                                   const EncTrainOptions& opts, EncTrainStats* stats) {
  cfg.validate();
  if (prior.empty()) throw PrerequisiteError("train_autoencoder: prior dataset is empty");
  const char* stage = variational ? "vae" : "ae";
  const int s = cfg.input_size;
  const int b = cfg.batch_size;

  Rng init_rng(rng.next_u64());
  Rng data_rng(rng.next_u64());
  Rng eps_rng(rng.next_u64());

  AutoencoderParams net(cfg, variational, init_rng);
  nn::ParamRegistry reg;
  net.collect(reg, "");
  optim::Adam opt(reg, cfg.lr);

  json cj;
  cj["encoder"] = json::parse(encoder_config_to_json(cfg));
  cj["variational"] = variational;
  const std::string config_json = cj.dump(2);

  std::vector<Image8> cache = preload_resized(prior, s);
  detail::BatchSource batches(data_rng.permutation(static_cast<int64_t>(cache.size())), data_rng);
  TrainLog log(opts, variational ? "vae_train_log.jsonl" : "ae_train_log.jsonl");
  detail::LossWindow window(trend_window(cfg.total_steps, b));
  nn::TrainCtx train_ctx;
  train_ctx.training = true;

  int64_t samples_seen = 0;
  int64_t next_log = 0;
  while (samples_seen < cfg.total_steps) {
    const int bsz = static_cast<int>(std::min<int64_t>(b, cfg.total_steps - samples_seen));
    std::vector<Image8> imgs;
    imgs.reserve(static_cast<size_t>(bsz));
    for (int i = 0; i < bsz; ++i)
      imgs.push_back(cache[static_cast<size_t>(batches.next())]);
    Var batch = Var::constant(images_to_batch(imgs));

    auto [mu, logvar] = net.encode_latent(batch, train_ctx);
    Var z = mu;
    Var kl;
    if (variational) {
      Var sigma = ag::vexp(ag::mul_scalar(logvar, 0.5));
      Var eps = Var::constant(Tensor::randn({bsz, cfg.ae_latent_dim}, eps_rng));
      z = ag::add(mu, ag::mul(sigma, eps));
      kl = kl_standard_normal(mu, logvar);
    }
    Var out = net.decode(z, train_ctx);
    Var recon = ag::mean_all(ag::reduce_sum(ag::square(ag::sub(out, batch)), {1, 2, 3}));
    Var loss = variational ? ag::add(recon, kl) : recon;

    const double loss_v = loss.value().item();
    if (!std::isfinite(loss_v))
      abort_nonfinite(reg, stage, config_json, samples_seen, rng, opts, "non-finite loss");
    reg.zero_grad();
    ag::backward(loss);
    opt.step();

    samples_seen += bsz;
    window.push(loss_v);

    if (samples_seen >= next_log || samples_seen >= cfg.total_steps) {
      json j;
      j["samples_seen"] = samples_seen;
      j["loss"] = loss_v;
      j["recon"] = recon.value().item();
      if (variational) j["kl"] = kl.value().item();
      log.emit(j);
      if (!opts.out_dir.empty() && opts.preview_count > 0)
        write_preview(opts.out_dir, samples_seen, slice_batch(batch.value(), opts.preview_count),
                      slice_batch(out.value(), opts.preview_count), opts.preview_count);
      next_log += cfg.log_interval;
    }
  }

  if (stats) {
    stats->initial_loss = window.initial();
    stats->final_loss = window.current();
    stats->samples_seen = samples_seen;
  }

  ckpt::Checkpoint ck = ckpt::snapshot(reg, stage, config_json, samples_seen, &rng);
  for (const auto& [name, t] : ck.tensors)
    if (!all_finite(t))
      abort_nonfinite(reg, stage, config_json, samples_seen, rng, opts,
                      "non-finite parameter " + name);
  if (!opts.out_dir.empty())
    ckpt::save_checkpoint(opts.out_dir / (std::string(stage) + ".ckpt"), ck);
  return ck;
}

}  // namespace frboost::enc
