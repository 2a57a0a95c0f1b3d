#include "frboost/gan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "frboost/errors.hpp"
#include "frboost/image.hpp"
#include "frboost/metrics.hpp"
#include "frboost/optim.hpp"
#include "train_common.hpp"

namespace frboost::gan {

using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void GanConfig::validate() const {
  auto bad = [](const std::string& msg) { throw ConfigError("gan config: " + msg); };
  if (resolution < 8 || (resolution & (resolution - 1)) != 0)
    bad("resolution must be a power of two >= 8, got " + std::to_string(resolution));
  if (latent_dim < 1) bad("latent_dim must be positive");
  if (mapping_layers < 1) bad("mapping_layers must be positive");
  if (g_lr <= 0 || d_lr <= 0) bad("learning rates must be positive");
  if (ada_start_p < 0 || ada_start_p > 1) bad("ada_start_p must lie in [0,1]");
  if (ada_target <= 0 || ada_target >= 1) bad("ada_target must lie in (0,1)");
  if (lambda_gp < 0 || lambda_plp < 0) bad("penalty weights must be nonnegative");
  if (total_samples < 0) bad("total_samples must be nonnegative");
  if (batch_size < 1) bad("batch_size must be positive");
  if (r1_interval < 1 || plp_interval < 1) bad("regularization intervals must be positive");
  if (ada_step <= 0 || ada_ema_halflife <= 0) bad("ada control constants must be positive");
  if (channel_base < 8 || channel_max < 8) bad("channel schedule bounds must be >= 8");
  if (fid_sample_count < 2) bad("fid_sample_count must be >= 2");
}

int GanConfig::style_count() const {
  int l = 0;
  for (int r = resolution; r > 2; r /= 2) ++l;  // log2(resolution) - 1
  return 2 * l;
}

int GanConfig::channels_at(int res) const {
  return std::clamp(channel_base / res, 8, channel_max);
}

GanConfig GanConfig::desk() {
  GanConfig c;
  c.latent_dim = 64;
  c.mapping_layers = 4;
  c.resolution = 32;
  c.total_samples = 200'000;
  c.batch_size = 32;
  c.channel_base = 512;
  c.channel_max = 64;
  c.log_interval = 4096;
  c.fid_interval = 50'000;
  c.fid_sample_count = 128;
  return c;
}

GanConfig GanConfig::paper() {
  GanConfig c;  // struct defaults are the full-scale values
  c.fid_interval = 500'000;
  c.fid_sample_count = 1024;
  return c;
}

std::string gan_config_to_json(const GanConfig& c) {
  json j{{"latent_dim", c.latent_dim},
         {"mapping_layers", c.mapping_layers},
         {"resolution", c.resolution},
         {"g_lr", c.g_lr},
         {"d_lr", c.d_lr},
         {"lambda_gp", c.lambda_gp},
         {"lambda_plp", c.lambda_plp},
         {"ada_start_p", c.ada_start_p},
         {"ada_target", c.ada_target},
         {"total_samples", c.total_samples},
         {"batch_size", c.batch_size},
         {"r1_interval", c.r1_interval},
         {"plp_interval", c.plp_interval},
         {"ada_step", c.ada_step},
         {"ada_ema_halflife", c.ada_ema_halflife},
         {"plp_ema_decay", c.plp_ema_decay},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"channel_base", c.channel_base},
         {"channel_max", c.channel_max},
         {"log_interval", c.log_interval},
         {"fid_interval", c.fid_interval},
         {"fid_sample_count", c.fid_sample_count}};
  return j.dump();
}

GanConfig gan_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gan config: bad JSON: ") + e.what());
  }
  GanConfig c;
  try {
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.mapping_layers = j.value("mapping_layers", c.mapping_layers);
    c.resolution = j.value("resolution", c.resolution);
    c.g_lr = j.value("g_lr", c.g_lr);
    c.d_lr = j.value("d_lr", c.d_lr);
    c.lambda_gp = j.value("lambda_gp", c.lambda_gp);
    c.lambda_plp = j.value("lambda_plp", c.lambda_plp);
    c.ada_start_p = j.value("ada_start_p", c.ada_start_p);
    c.ada_target = j.value("ada_target", c.ada_target);
    c.total_samples = j.value("total_samples", c.total_samples);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.r1_interval = j.value("r1_interval", c.r1_interval);
    c.plp_interval = j.value("plp_interval", c.plp_interval);
    c.ada_step = j.value("ada_step", c.ada_step);
    c.ada_ema_halflife = j.value("ada_ema_halflife", c.ada_ema_halflife);
    c.plp_ema_decay = j.value("plp_ema_decay", c.plp_ema_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.channel_base = j.value("channel_base", c.channel_base);
    c.channel_max = j.value("channel_max", c.channel_max);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.fid_interval = j.value("fid_interval", c.fid_interval);
    c.fid_sample_count = j.value("fid_sample_count", c.fid_sample_count);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("gan config: bad field type: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// networks
// ---------------------------------------------------------------------------

MappingNet::MappingNet(int latent_dim, int n_layers, Rng& rng, bool normalize)
    : normalize_z(normalize) {
  layers.reserve(static_cast<size_t>(n_layers));
  for (int i = 0; i < n_layers; ++i) layers.emplace_back(latent_dim, latent_dim, rng);
}

ag::Var MappingNet::forward(const ag::Var& z) const {
  ag::Var h = normalize_z ? nn::pixel_norm(z) : z;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = ag::leaky_relu(h, 0.2);
  }
  return h;
}

void MappingNet::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(reg, prefix + ".map" + std::to_string(i));
}

StyledConv::StyledConv(int in, int out, int latent_dim, int res_, bool up, Rng& rng)
    : style(latent_dim, in, rng), in_ch(in), out_ch(out), res(res_), upsample(up) {
  style.b.value_mut().fill(1.0);  // modulation starts as identity scaling
  Tensor w = Tensor::randn({out, in, 3, 3}, rng);
  w.scale_(1.0 / std::sqrt(9.0 * in));
  weight = ag::Var::param(std::move(w));
  bias = ag::Var::param(Tensor::zeros({out}));
  noise_strength = ag::Var::param(Tensor::zeros({1}));
}

ag::Var StyledConv::forward(const ag::Var& x, const ag::Var& w, Rng* noise_rng) const {
  ag::Var s = style.forward(w);  // [B, in]
  ag::Var h = upsample ? ag::upsample_nearest2(x) : x;
  h = ag::bcast_mul(h, s);
  ag::Var y = ag::conv2d(h, weight, /*stride=*/1, /*pad=*/1);
  // Demodulate: per (sample, out-channel) scale 1/sqrt(sum_i s_i^2 * |w_oi|^2).
  ag::Var k2 = ag::reduce_sum(ag::square(weight), {2, 3});            // [out, in]
  ag::Var d = ag::rsqrt(ag::matmul(ag::square(s), k2, false, true), 1e-8);  // [B, out]
  y = ag::bcast_mul(y, d);
  if (noise_rng != nullptr) {
    const Tensor& yv = y.value();
    Tensor nz = Tensor::randn({yv.dim(0), 1, yv.dim(2), yv.dim(3)}, *noise_rng);
    y = ag::cbcast_add(y, nn::scale_by_scalar(ag::Var::constant(std::move(nz)), noise_strength));
  }
  return ag::leaky_relu(ag::channel_add(y, bias), 0.2);
}

void StyledConv::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  style.collect(reg, prefix + ".style");
  reg.add(prefix + ".w", weight);
  reg.add(prefix + ".b", bias);
  reg.add(prefix + ".noise", noise_strength);
}

SynthesisNet::SynthesisNet(const GanConfig& cfg, Rng& rng)
    : resolution_(cfg.resolution), latent_dim_(cfg.latent_dim) {
  const int c0 = cfg.channels_at(4);
  const_input = ag::Var::param(Tensor::randn({1, c0 * 16}, rng));
  int prev = c0;
  for (int res = 4; res <= cfg.resolution; res *= 2) {
    const int ch = cfg.channels_at(res);
    convs.emplace_back(prev, ch, cfg.latent_dim, res, /*up=*/res > 4, rng);
    convs.emplace_back(ch, ch, cfg.latent_dim, res, /*up=*/false, rng);
    prev = ch;
  }
  to_rgb = nn::Conv2d(prev, 3, /*k=*/1, /*stride=*/1, /*pad=*/0, rng);
}

ag::Var SynthesisNet::forward(const std::vector<ag::Var>& styles, Rng* noise_rng) const {
  if (static_cast<int>(styles.size()) != style_count())
    throw std::invalid_argument("synthesize: got " + std::to_string(styles.size()) +
                                " style rows, generator has " + std::to_string(style_count()));
  const int b = styles[0].value().dim(0);
  const int c0 = const_input.value().dim(1) / 16;
  ag::Var ones = ag::Var::constant(Tensor::full({b, 1}, 1.0));
  ag::Var x = ag::reshape(ag::matmul(ones, const_input), {b, c0, 4, 4});
  for (size_t i = 0; i < convs.size(); ++i) x = convs[i].forward(x, styles[i], noise_rng);
  return to_rgb.forward(x);
}

void SynthesisNet::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".const", const_input);
  for (size_t i = 0; i < convs.size(); ++i)
    convs[i].collect(reg, prefix + ".conv" + std::to_string(i));
  to_rgb.collect(reg, prefix + ".rgb");
}

Generator::Generator(const GanConfig& config, Rng& rng)
    : cfg(config), mapping(config.latent_dim, config.mapping_layers, rng), synthesis(config, rng) {}

ag::Var Generator::forward_z(const ag::Var& z, Rng* noise_rng) const {
  ag::Var w = mapping.forward(z);
  return synthesis.forward(broadcast_styles(w, synthesis.style_count()), noise_rng);
}

void Generator::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  mapping.collect(reg, prefix + ".mapping");
  synthesis.collect(reg, prefix + ".synthesis");
}

Discriminator::Discriminator(const GanConfig& cfg, Rng& rng) {
  from_rgb = nn::Conv2d(3, cfg.channels_at(cfg.resolution), 1, 1, 0, rng);
  for (int res = cfg.resolution; res > 4; res /= 2) {
    Block b;
    b.conv1 = nn::Conv2d(cfg.channels_at(res), cfg.channels_at(res), 3, 1, 1, rng);
    b.conv2 = nn::Conv2d(cfg.channels_at(res), cfg.channels_at(res / 2), 3, 2, 1, rng);
    blocks.push_back(std::move(b));
  }
  const int c4 = cfg.channels_at(4);
  final_conv = nn::Conv2d(c4, c4, 3, 1, 1, rng);
  fc1 = nn::Linear(c4 * 16, c4, rng);
  fc2 = nn::Linear(c4, 1, rng);
}

ag::Var Discriminator::forward(const ag::Var& images) const {
  ag::Var h = ag::leaky_relu(from_rgb.forward(images), 0.2);
  for (const auto& b : blocks) {
    h = ag::leaky_relu(b.conv1.forward(h), 0.2);
    h = ag::leaky_relu(b.conv2.forward(h), 0.2);
  }
  h = ag::leaky_relu(final_conv.forward(h), 0.2);
  const Tensor& hv = h.value();
  h = ag::reshape(h, {hv.dim(0), hv.dim(1) * hv.dim(2) * hv.dim(3)});
  h = ag::leaky_relu(fc1.forward(h), 0.2);
  return fc2.forward(h);
}

void Discriminator::collect(nn::ParamRegistry& reg, const std::string& prefix) const {
  from_rgb.collect(reg, prefix + ".rgb");
  for (size_t i = 0; i < blocks.size(); ++i) {
    blocks[i].conv1.collect(reg, prefix + ".block" + std::to_string(i) + ".conv1");
    blocks[i].conv2.collect(reg, prefix + ".block" + std::to_string(i) + ".conv2");
  }
  final_conv.collect(reg, prefix + ".final");
  fc1.collect(reg, prefix + ".fc1");
  fc2.collect(reg, prefix + ".fc2");
}

// ---------------------------------------------------------------------------
// latent plumbing
// ---------------------------------------------------------------------------

Tensor broadcast_latent(const Tensor& w, int style_count) {
  const Tensor* row = &w;
  Tensor flat;
  if (w.ndim() == 2 && w.dim(0) == 1) {
    flat = w.reshaped({w.dim(1)});
    row = &flat;
  } else if (w.ndim() != 1) {
    throw std::invalid_argument("broadcast_latent: want a single style vector, got " +
                                w.shape_str());
  }
  const int d = row->dim(0);
  Tensor out({style_count, d});
  for (int l = 0; l < style_count; ++l)
    std::copy_n(row->d.begin(), d, out.d.begin() + static_cast<int64_t>(l) * d);
  return out;
}

std::vector<ag::Var> broadcast_styles(const ag::Var& w, int style_count) {
  return std::vector<ag::Var>(static_cast<size_t>(style_count), w);
}

Tensor map_latent(const Generator& g, const Tensor& z) {
  ag::NoGradGuard ng;
  Tensor zin = z.ndim() == 1 ? z.reshaped({1, z.dim(0)}) : z;
  Tensor w = g.mapping.forward(ag::Var::constant(std::move(zin))).value();
  return z.ndim() == 1 ? w.reshaped({w.dim(1)}) : w;
}

Tensor synthesize(const Generator& g, const Tensor& w_plus) {
  const int l = g.synthesis.style_count();
  if (w_plus.ndim() != 2 || w_plus.dim(0) != l)
    throw std::invalid_argument("synthesize: want " + std::to_string(l) +
                                " style rows, got shape " + w_plus.shape_str());
  ag::NoGradGuard ng;
  const int d = w_plus.dim(1);
  std::vector<ag::Var> styles;
  styles.reserve(static_cast<size_t>(l));
  for (int i = 0; i < l; ++i) {
    Tensor row({1, d});
    std::copy_n(w_plus.d.begin() + static_cast<int64_t>(i) * d, d, row.d.begin());
    styles.push_back(ag::Var::constant(std::move(row)));
  }
  Tensor img = g.synthesis.forward(styles, nullptr).value();
  return img.reshaped({img.dim(1), img.dim(2), img.dim(3)});
}

// ---------------------------------------------------------------------------
// penalties
// ---------------------------------------------------------------------------

namespace {

double sumsq(const Tensor& t) {
  double acc = 0.0;
  for (double v : t.d) acc += v * v;
  return acc;
}

}  // namespace

double r1_penalty(const std::function<ag::Var(const ag::Var&)>& critic,
                  const Tensor& real_images) {
  ag::Var x = ag::Var::leaf(real_images, /*requires_grad=*/true);
  ag::backward(ag::sum_all(critic(x)));
  return sumsq(x.grad()) / real_images.dim(0);
}

double r1_penalty(const Discriminator& d, const Tensor& real_images) {
  nn::ParamRegistry reg;
  d.collect(reg, "d");
  double v = r1_penalty([&](const ag::Var& x) { return d.forward(x); }, real_images);
  reg.zero_grad();
  return v;
}

double r1_penalty_backward(const std::function<ag::Var(const ag::Var&)>& critic,
                           const nn::ParamRegistry& params, const Tensor& real_images,
                           double scale) {
  const int b = real_images.dim(0);
  // Pass A: input gradient G of sum(D(x)).
  ag::Var x = ag::Var::leaf(real_images, true);
  ag::backward(ag::sum_all(critic(x)));
  Tensor g = x.grad();
  const double penalty = sumsq(g) / b;
  // Pass B: seed the forward tangent with G; the gradient-of-tangent channel
  // then deposits d(mean |G|^2)/d(theta) into the parameter gradients.
  params.zero_grad();
  ag::Var x2 = ag::Var::leaf(real_images, true);
  x2.set_tangent(std::move(g));
  ag::Var s2 = ag::sum_all(critic(x2));
  ag::backward(s2, Tensor(), Tensor::scalar(2.0 * scale / b));
  return penalty;
}

double path_length_penalty(const std::function<ag::Var(const ag::Var&)>& synth,
                           const Tensor& w_batch, PlpState& state, Rng& rng, double ema_decay,
                           const Tensor* noise_y) {
  nn::ParamRegistry empty;
  return path_length_penalty_backward(synth, empty, w_batch, state, rng, ema_decay, noise_y,
                                      /*scale=*/0.0);
}

double path_length_penalty(const Generator& g, const Tensor& w_batch, PlpState& state, Rng& rng,
                           double ema_decay, const Tensor* noise_y) {
  nn::ParamRegistry reg;
  g.synthesis.collect(reg, "g");
  auto synth = [&](const ag::Var& w) {
    return g.synthesis.forward(broadcast_styles(w, g.synthesis.style_count()), nullptr);
  };
  double v = path_length_penalty(synth, w_batch, state, rng, ema_decay, noise_y);
  reg.zero_grad();
  return v;
}

double path_length_penalty_backward(const std::function<ag::Var(const ag::Var&)>& synth,
                                    const nn::ParamRegistry& params, const Tensor& w_batch,
                                    PlpState& state, Rng& rng, double ema_decay,
                                    const Tensor* noise_y, double scale) {
  if (w_batch.ndim() != 2) throw std::invalid_argument("path_length_penalty: want w [B, D]");
  const int b = w_batch.dim(0);
  const int d = w_batch.dim(1);

  // Pass A: per-sample JVP-transpose J_b = d<G(w_b), y_b>/dw_b.
  ag::Var w = ag::Var::leaf(w_batch, true);
  ag::Var img = synth(w);
  Tensor y = noise_y != nullptr ? *noise_y : Tensor::randn(img.value().shape, rng);
  if (!y.same_shape(img.value()))
    throw std::invalid_argument("path_length_penalty: noise shape " + y.shape_str() +
                                " does not match images " + img.value().shape_str());
  ag::backward(ag::sum_all(ag::mul(img, ag::Var::constant(y))));
  const Tensor& j = w.grad();

  std::vector<double> norms(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    double acc = 0.0;
    for (int k = 0; k < d; ++k) {
      double v = j.d[static_cast<size_t>(i) * d + k];
      acc += v * v;
    }
    norms[static_cast<size_t>(i)] = std::sqrt(acc);
  }
  const double a = state.running_mean;
  double penalty = 0.0, mean_norm = 0.0;
  for (double n : norms) {
    penalty += (n - a) * (n - a);
    mean_norm += n;
  }
  penalty /= b;
  mean_norm /= b;
  state.running_mean = a + ema_decay * (mean_norm - a);

  if (scale != 0.0) {
    // Pass B: seed w's tangent with V_b = 2 (n_b - a) J_b / (B n_b); the
    // parameter gradients then receive scale * d(penalty)/d(theta).
    Tensor v({b, d});
    for (int i = 0; i < b; ++i) {
      const double n = norms[static_cast<size_t>(i)];
      const double coef = n > 0 ? 2.0 * (n - a) / (b * n) : 0.0;
      for (int k = 0; k < d; ++k)
        v.d[static_cast<size_t>(i) * d + k] = coef * j.d[static_cast<size_t>(i) * d + k];
    }
    params.zero_grad();
    ag::Var w2 = ag::Var::leaf(w_batch, true);
    w2.set_tangent(std::move(v));
    ag::Var s2 = ag::sum_all(ag::mul(synth(w2), ag::Var::constant(y)));
    ag::backward(s2, Tensor(), Tensor::scalar(scale));
  }
  return penalty;
}

// ---------------------------------------------------------------------------
// ADA
// ---------------------------------------------------------------------------

AdaState ada_update(AdaState state, const Tensor& real_logits, const GanConfig& cfg) {
  if (real_logits.numel() == 0) throw std::invalid_argument("ada_update: empty logits");
  double mean_sign = 0.0;
  for (double v : real_logits.d) mean_sign += (v > 0) - (v < 0);
  mean_sign /= static_cast<double>(real_logits.numel());

  const double beta = std::exp2(-1.0 / cfg.ada_ema_halflife);
  state.overfit_estimate = beta * state.overfit_estimate + (1.0 - beta) * mean_sign;

  if (state.overfit_estimate > cfg.ada_target)
    state.p += cfg.ada_step;
  else if (state.overfit_estimate < cfg.ada_target)
    state.p -= cfg.ada_step;
  state.p = std::clamp(state.p, 0.0, 1.0);
  return state;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

ag::Var apply_augmentation(const ag::Var& images, double p, Rng& rng,
                           const AugmentPipeline& pipe) {
  if (p < 0 || p > 1) throw ConfigError("apply_augmentation: p must lie in [0,1]");
  if (p == 0) return images;  // bit-exact identity; consumes no rng draws
  const Tensor& xv = images.value();
  if (xv.ndim() != 4) throw std::invalid_argument("apply_augmentation: want [B,C,H,W]");
  const int b = xv.dim(0), h = xv.dim(2);

  std::vector<ag::GeomSpec> specs(static_cast<size_t>(b));
  std::vector<double> cscale, cshift;
  bool any_geom = false, any_color = false;
  const int max_shift = std::max(1, h / 8);
  const double log_contrast = std::log(1.25);
  for (int i = 0; i < b; ++i) {
    auto& g = specs[static_cast<size_t>(i)];
    if (pipe.hflip && rng.bernoulli(p)) g.hflip = true;
    if (pipe.rot90 && rng.bernoulli(p)) g.rot90 = 1 + static_cast<int>(rng.below(3));
    if (pipe.translate && rng.bernoulli(p)) {
      g.dx = static_cast<int>(rng.range(-max_shift, max_shift));
      g.dy = static_cast<int>(rng.range(-max_shift, max_shift));
    }
    double sc = 1.0, sh = 0.0;
    if (pipe.color && rng.bernoulli(p)) {
      sc = std::exp(rng.uniform(-log_contrast, log_contrast));
      sh = rng.uniform(-0.25, 0.25);
      any_color = true;
    }
    cscale.push_back(sc);
    cshift.push_back(sh);
    if (!g.identity()) any_geom = true;
  }

  ag::Var out = images;
  if (any_geom) out = ag::geom_transform(out, specs);
  if (any_color) {
    Tensor sc({b}), sh({b});
    std::copy(cscale.begin(), cscale.end(), sc.d.begin());
    std::copy(cshift.begin(), cshift.end(), sh.d.begin());
    out = ag::bcast_add(ag::bcast_mul(out, ag::Var::constant(std::move(sc))),
                        ag::Var::constant(std::move(sh)));
  }
  return out;
}

Tensor apply_augmentation(const Tensor& images, double p, Rng& rng, const AugmentPipeline& pipe) {
  ag::NoGradGuard ng;
  return apply_augmentation(ag::Var::constant(images), p, rng, pipe).value();
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

using detail::BatchSource;

ckpt::Checkpoint train_gan(const prior::PriorDataset& dataset, const GanConfig& cfg, Rng& rng,
                           const GanTrainOptions& opts, GanTrainStats* stats) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("train_gan: dataset is empty");
  const int res = cfg.resolution;
  const int b = cfg.batch_size;

  Rng init_rng(rng.next_u64());
  Rng data_rng(rng.next_u64());
  Rng z_rng(rng.next_u64());
  Rng aug_rng(rng.next_u64());
  Rng noise_rng(rng.next_u64());
  Rng fid_rng(rng.next_u64());
  Rng plp_rng(rng.next_u64());

  Generator gen(cfg, init_rng);
  Discriminator dis(cfg, init_rng);
  nn::ParamRegistry reg_g, reg_d, reg_all;
  gen.collect(reg_g, "generator");
  dis.collect(reg_d, "discriminator");
  gen.collect(reg_all, "generator");
  dis.collect(reg_all, "discriminator");
  optim::Adam opt_g(reg_g, cfg.g_lr, cfg.adam_beta1, cfg.adam_beta2);
  optim::Adam opt_d(reg_d, cfg.d_lr, cfg.adam_beta1, cfg.adam_beta2);

  AdaState ada{cfg.ada_start_p, 0.0};
  PlpState plp;

  // Decode every image once, resized to the training resolution.
  std::vector<Image8> cache;
  cache.reserve(dataset.size());
  for (size_t i = 0; i < dataset.size(); ++i) {
    Image8 im = dataset.load(i);
    if (im.h != res || im.w != res) im = resize_image(im, res, res);
    cache.push_back(std::move(im));
  }

  // Hold out a slice for the periodic FID; never trained on.
  const int64_t n = static_cast<int64_t>(cache.size());
  int64_t holdout = 0;
  if (cfg.fid_interval > 0) holdout = std::min<int64_t>(cfg.fid_sample_count, n / 5);
  if (holdout < 2) holdout = 0;
  std::vector<int64_t> order = data_rng.permutation(n);
  std::vector<int64_t> train_pool(order.begin() + holdout, order.end());
  BatchSource batches(train_pool, data_rng);

  Tensor holdout_images;
  if (holdout > 0) {
    std::vector<Image8> hs;
    hs.reserve(static_cast<size_t>(holdout));
    for (int64_t i = 0; i < holdout; ++i)
      hs.push_back(cache[static_cast<size_t>(order[static_cast<size_t>(i)])]);
    holdout_images = images_to_batch(hs);
  }

  FidFn fid_fn = opts.fid;
  if (!fid_fn && holdout > 0) {
    auto net = std::make_shared<metrics::FeaturePyramid>(derive_seed(0x66696421, "gan.fid"));
    fid_fn = [net](const Tensor& a, const Tensor& bt) { return metrics::fid(*net, a, bt); };
  }

  std::ofstream log_file;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log_file.open(opts.out_dir / "gan_train_log.jsonl", std::ios::trunc);
  }
  auto emit = [&](const json& j) {
    std::string line = j.dump();
    if (log_file.is_open()) log_file << line << '\n' << std::flush;
    if (opts.log_sink) opts.log_sink(line);
  };

  auto make_batch = [&](int count) {
    std::vector<Image8> imgs;
    imgs.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
      imgs.push_back(cache[static_cast<size_t>(batches.next())]);
    return images_to_batch(imgs);
  };
  auto gen_images = [&](int count, Rng& z_src, Rng& nz_src) {
    ag::NoGradGuard ng;
    Tensor out({count, 3, res, res});
    const int64_t per = static_cast<int64_t>(3) * res * res;
    for (int at = 0; at < count; at += b) {
      const int k = std::min(b, count - at);
      Tensor z = Tensor::randn({k, cfg.latent_dim}, z_src);
      Tensor img = gen.forward_z(ag::Var::constant(std::move(z)), &nz_src).value();
      std::copy_n(img.d.begin(), k * per, out.d.begin() + at * per);
    }
    return out;
  };

  int64_t samples_seen = 0, iter = 0;
  double d_loss_v = 0, g_loss_v = 0, last_r1 = 0, last_plp = 0;
  double last_fid = std::numeric_limits<double>::quiet_NaN();

  auto snapshot_now = [&]() {
    ckpt::Checkpoint ck =
        ckpt::snapshot(reg_all, "gan", gan_config_to_json(cfg), samples_seen, &rng);
    ck.tensors.emplace_back("ada.p", Tensor::scalar(ada.p));
    ck.tensors.emplace_back("ada.overfit_estimate", Tensor::scalar(ada.overfit_estimate));
    ck.tensors.emplace_back("plp.running_mean", Tensor::scalar(plp.running_mean));
    return ck;
  };
  auto abort_nonfinite = [&](const char* what) {
    std::string note;
    if (!opts.out_dir.empty()) {
      const auto diag = opts.out_dir / "gan_diagnostic.ckpt";
      ckpt::save_checkpoint(diag.string(), snapshot_now());
      note = "; diagnostic checkpoint at " + diag.string();
    }
    throw NumericalError(std::string("train_gan: non-finite ") + what + " at sample " +
                                 std::to_string(samples_seen) + note);
  };
  auto run_fid = [&]() {
    if (!fid_fn || holdout == 0) return;
    last_fid = fid_fn(gen_images(static_cast<int>(holdout), fid_rng, fid_rng), holdout_images);
    if (stats) stats->fid_history.emplace_back(samples_seen, last_fid);
  };

  int64_t next_log = cfg.log_interval > 0 ? cfg.log_interval : std::numeric_limits<int64_t>::max();
  int64_t next_fid = cfg.fid_interval;
  if (cfg.total_samples > 0) run_fid();  // baseline point for trend tracking

  auto d_forward = [&](const ag::Var& x) { return dis.forward(x); };
  auto synth_fn = [&](const ag::Var& w) {
    return gen.synthesis.forward(broadcast_styles(w, gen.synthesis.style_count()), nullptr);
  };

  while (samples_seen < cfg.total_samples) {
    ++iter;
    Tensor real = make_batch(b);

    // Discriminator step (generator detached).
    Tensor fake;
    {
      ag::NoGradGuard ng;
      Tensor z = Tensor::randn({b, cfg.latent_dim}, z_rng);
      fake = gen.forward_z(ag::Var::constant(std::move(z)), &noise_rng).value();
    }
    ag::Var real_aug = apply_augmentation(ag::Var::constant(real), ada.p, aug_rng);
    ag::Var fake_aug = apply_augmentation(ag::Var::constant(std::move(fake)), ada.p, aug_rng);
    ag::Var d_real = dis.forward(real_aug);
    ag::Var loss_d = ag::add(ag::mean_all(ag::softplus(ag::neg(d_real))),
                             ag::mean_all(ag::softplus(dis.forward(fake_aug))));
    opt_d.zero_grad();
    ag::backward(loss_d);
    opt_d.step();
    d_loss_v = loss_d.value().item();
    if (!std::isfinite(d_loss_v)) abort_nonfinite("discriminator loss");
    ada = ada_update(ada, d_real.value(), cfg);

    // Lazy R1 (weight lambda_gp/2, interval-compensated).
    if (cfg.lambda_gp > 0 && iter % cfg.r1_interval == 0) {
      opt_d.zero_grad();
      last_r1 = r1_penalty_backward(d_forward, reg_d, real,
                                    0.5 * cfg.lambda_gp * cfg.r1_interval);
      if (!std::isfinite(last_r1)) abort_nonfinite("R1 penalty");
      opt_d.step();
    }

    // Generator step.
    {
      Tensor z = Tensor::randn({b, cfg.latent_dim}, z_rng);
      ag::Var fake2 = gen.forward_z(ag::Var::constant(std::move(z)), &noise_rng);
      ag::Var loss_g =
          ag::mean_all(ag::softplus(ag::neg(dis.forward(apply_augmentation(fake2, ada.p, aug_rng)))));
      opt_g.zero_grad();
      opt_d.zero_grad();
      ag::backward(loss_g);
      opt_g.step();
      g_loss_v = loss_g.value().item();
      if (!std::isfinite(g_loss_v)) abort_nonfinite("generator loss");
    }

    // Lazy path-length penalty on the synthesis network (noise pinned).
    if (cfg.lambda_plp > 0 && iter % cfg.plp_interval == 0) {
      Tensor w_values;
      {
        ag::NoGradGuard ng;
        Tensor z = Tensor::randn({b, cfg.latent_dim}, z_rng);
        w_values = gen.mapping.forward(ag::Var::constant(std::move(z))).value();
      }
      opt_g.zero_grad();
      last_plp = path_length_penalty_backward(synth_fn, reg_g, w_values, plp, plp_rng,
                                              cfg.plp_ema_decay, nullptr,
                                              cfg.lambda_plp * cfg.plp_interval);
      if (!std::isfinite(last_plp)) abort_nonfinite("path-length penalty");
      opt_g.step();
    }

    samples_seen += b;
    const bool done = samples_seen >= cfg.total_samples;
    if (samples_seen >= next_fid && cfg.fid_interval > 0 && !done) {
      run_fid();
      next_fid += cfg.fid_interval;
    }
    if (samples_seen >= next_log || done) {
      if (done && cfg.fid_interval > 0) run_fid();
      json rec{{"samples_seen", samples_seen}, {"g_loss", g_loss_v},
               {"d_loss", d_loss_v},          {"r1", last_r1},
               {"plp", last_plp},             {"ada_p", ada.p}};
      if (std::isfinite(last_fid))
        rec["fid"] = last_fid;
      else
        rec["fid"] = nullptr;
      emit(rec);
      while (next_log <= samples_seen) next_log += cfg.log_interval;
    }
  }

  if (stats) {
    stats->final_d_loss = d_loss_v;
    stats->final_g_loss = g_loss_v;
    stats->samples_seen = samples_seen;
  }
  ckpt::Checkpoint ck = snapshot_now();
  if (!opts.out_dir.empty())
    ckpt::save_checkpoint((opts.out_dir / "gan.ckpt").string(), ck);
  return ck;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

Tensor sample_faces(const Generator& g, int64_t n, Rng& rng) {
  const int res = g.synthesis.resolution();
  Tensor out({static_cast<int>(n), 3, res, res});
  if (n == 0) return out;
  ag::NoGradGuard ng;
  const int64_t per = static_cast<int64_t>(3) * res * res;
  const int chunk = 32;
  for (int64_t at = 0; at < n; at += chunk) {
    const int k = static_cast<int>(std::min<int64_t>(chunk, n - at));
    Tensor z = Tensor::randn({k, g.cfg.latent_dim}, rng);
    Tensor img = g.forward_z(ag::Var::constant(std::move(z)), &rng).value();
    std::copy_n(img.d.begin(), k * per, out.d.begin() + at * per);
  }
  return out;
}

Generator load_generator(const ckpt::Checkpoint& ck) {
  if (ck.stage != "gan")
    throw PrerequisiteError("load_generator: checkpoint stage is '" + ck.stage +
                                    "', need a stage-1 'gan' checkpoint");
  GanConfig cfg = gan_config_from_json(ck.config_json);
  Rng scratch(0);
  Generator g(cfg, scratch);
  Discriminator d(cfg, scratch);
  nn::ParamRegistry reg;
  g.collect(reg, "generator");
  d.collect(reg, "discriminator");
  ckpt::restore(ck, reg);
  // The discriminator is rebuilt only so restore() can verify the full
  // parameter set; the caller keeps the generator.
  return g;
}

Tensor sample_faces(const ckpt::Checkpoint& generator_ckpt, int64_t n, Rng& rng) {
  Generator g = load_generator(generator_ckpt);
  return sample_faces(g, n, rng);
}

}  // namespace frboost::gan
