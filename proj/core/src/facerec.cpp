#include "frboost/facerec.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "frboost/optim.hpp"
#include "train_common.hpp"

namespace frboost::fr {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void BackboneConfig::validate() const {
  if (input_size < 8) throw ConfigError("backbone: input_size must be >= 8");
  if (emb_dim < 1) throw ConfigError("backbone: emb_dim must be positive");
  if (trunk_depth < 3) throw ConfigError("backbone: trunk_depth must be >= 3");
  if (trunk_width < 1) throw ConfigError("backbone: trunk_width must be positive");
  if (trunk_blocks_per_stage < 1) throw ConfigError("backbone: trunk_blocks_per_stage must be >= 1");
  if (head_dropout < 0.0 || head_dropout >= 1.0)
    throw ConfigError("backbone: head_dropout must be in [0,1)");
  if (input_size >> trunk_depth < 1)
    throw ConfigError("backbone: input_size too small for trunk_depth stages");
}

nn::TrunkConfig BackboneConfig::trunk_config() const {
  nn::TrunkConfig tc;
  tc.in_ch = 3;
  tc.stage_channels.clear();
  tc.stage_blocks.clear();
  for (int s = 0; s < trunk_depth; ++s) {
    tc.stage_channels.push_back(std::min(trunk_width << s, trunk_width * 8));
    tc.stage_blocks.push_back(trunk_blocks_per_stage);
  }
  tc.se_reduction = use_squeeze_excitation ? 4 : 0;
  return tc;
}

BackboneConfig BackboneConfig::from_encoder(const enc::EncoderConfig& e, int emb_dim_,
                                            double head_dropout_) {
  BackboneConfig c;
  c.input_size = e.input_size;
  c.emb_dim = emb_dim_;
  c.trunk_depth = e.trunk_depth;
  c.trunk_width = e.trunk_width;
  c.trunk_blocks_per_stage = e.trunk_blocks_per_stage;
  c.use_squeeze_excitation = e.use_squeeze_excitation;
  c.head_dropout = head_dropout_;
  c.validate();
  return c;
}

BackboneConfig BackboneConfig::desk() {
  BackboneConfig c;
  c.input_size = 32;
  c.emb_dim = 64;
  c.trunk_depth = 3;
  c.trunk_width = 8;
  c.trunk_blocks_per_stage = 1;
  c.use_squeeze_excitation = true;
  return c;
}

std::string backbone_config_to_json(const BackboneConfig& cfg) {
  json j;
  j["input_size"] = cfg.input_size;
  j["emb_dim"] = cfg.emb_dim;
  j["trunk_depth"] = cfg.trunk_depth;
  j["trunk_width"] = cfg.trunk_width;
  j["trunk_blocks_per_stage"] = cfg.trunk_blocks_per_stage;
  j["use_squeeze_excitation"] = cfg.use_squeeze_excitation;
  j["head_dropout"] = cfg.head_dropout;
  return j.dump(2);
}

BackboneConfig backbone_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backbone config: invalid JSON: ") + e.what());
  }
  BackboneConfig c;
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "input_size") c.input_size = val.get<int>();
      else if (key == "emb_dim") c.emb_dim = val.get<int>();
      else if (key == "trunk_depth") c.trunk_depth = val.get<int>();
      else if (key == "trunk_width") c.trunk_width = val.get<int>();
      else if (key == "trunk_blocks_per_stage") c.trunk_blocks_per_stage = val.get<int>();
      else if (key == "use_squeeze_excitation") c.use_squeeze_excitation = val.get<bool>();
      else if (key == "head_dropout") c.head_dropout = val.get<double>();
      else throw ConfigError("backbone config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("backbone config: bad value: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// BackboneParams
// ---------------------------------------------------------------------------

namespace {

int conv_halve(int h) { return (h + 2 - 3) / 2 + 1; }  // 3x3, stride 2, pad 1

int deep_spatial(int input_size, int depth) {
  int h = input_size;
  for (int s = 0; s < depth; ++s) h = conv_halve(h);
  return h;
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

BackboneParams::BackboneParams(const BackboneConfig& cfg_, Rng& rng) : cfg(cfg_) {
  cfg.validate();
  trunk = nn::Trunk(cfg.trunk_config(), rng);
  head = nn::EmbedHead(trunk.out_channels(), deep_spatial(cfg.input_size, cfg.trunk_depth),
                       cfg.emb_dim, cfg.head_dropout, rng);
}

Var BackboneParams::forward_embedding(const Var& images, const nn::TrainCtx& ctx) {
  if (images.shape().size() != 4 || images.shape()[1] != 3 ||
      images.shape()[2] != cfg.input_size || images.shape()[3] != cfg.input_size)
    throw std::invalid_argument("forward_embedding: expected [B,3," +
                                std::to_string(cfg.input_size) + "," +
                                std::to_string(cfg.input_size) + "] batch");
  Var h = trunk.forward(images, ctx);
  return head.forward(h, ctx);
}

void BackboneParams::init_classes(int num_classes_, Rng& rng) {
  if (num_classes_ < 1) throw std::invalid_argument("init_classes: need at least one class");
  Tensor w = Tensor::randn({num_classes_, cfg.emb_dim}, rng,
                           1.0 / std::sqrt(static_cast<double>(cfg.emb_dim)));
  class_weights = Var::param(std::move(w));
}

int BackboneParams::num_classes() const {
  return class_weights.defined() ? class_weights.shape()[0] : 0;
}

void BackboneParams::collect(nn::ParamRegistry& reg, const std::string& prefix) {
  trunk.collect(reg, join(prefix, "trunk"));
  head.collect(reg, join(prefix, "head"));
  if (class_weights.defined()) reg.add(join(prefix, "class_weights"), class_weights);
}

// ---------------------------------------------------------------------------
// Weight transfer
// ---------------------------------------------------------------------------

namespace {

enc::EncoderConfig encoder_config_of(const ckpt::Checkpoint& ck) {
  json cj;
  try {
    cj = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw PrerequisiteError(std::string("transfer_weights: checkpoint config is not JSON: ") +
                            e.what());
  }
  if (!cj.contains("encoder"))
    throw PrerequisiteError("transfer_weights: checkpoint config has no 'encoder' section");
  return enc::encoder_config_from_json(cj["encoder"].dump());
}

}  // namespace

BackboneParams transfer_weights(const ckpt::Checkpoint& pretrain_ckpt, const BackboneConfig& cfg,
                                Rng& rng) {
  if (pretrain_ckpt.stage != "encoder" && pretrain_ckpt.stage != "ae" &&
      pretrain_ckpt.stage != "vae")
    throw PrerequisiteError("transfer_weights: expected a pretraining checkpoint (stage encoder, "
                            "ae or vae), got stage '" +
                            pretrain_ckpt.stage + "'");
  BackboneParams bb(cfg, rng);
  bb.provenance = pretrain_ckpt.stage;

  nn::ParamRegistry trunk_reg;
  bb.trunk.collect(trunk_reg, "trunk");

  std::vector<std::string> diffs;
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const Tensor* src = pretrain_ckpt.find(name);
    if (src == nullptr) {
      diffs.push_back(name + ": missing from checkpoint");
      return;
    }
    if (src->shape != dst.shape) {
      diffs.push_back(name + ": checkpoint " + src->shape_str() + " vs backbone " +
                      dst.shape_str());
      return;
    }
    dst = *src;
  };
  for (auto& [name, var] : trunk_reg.params) copy_into(name, var.value_mut());
  for (auto& [name, ptr] : trunk_reg.state) copy_into(name, *ptr);

  if (!diffs.empty()) {
    std::string msg = "transfer_weights: trunk layout mismatch (" + std::to_string(diffs.size()) +
                      " tensors):";
    for (const auto& d : diffs) msg += "\n  " + d;
    throw PrerequisiteError(msg);
  }
  return bb;
}

BackboneParams transfer_weights(const ckpt::Checkpoint& pretrain_ckpt, Rng& rng, int emb_dim,
                                double head_dropout) {
  BackboneConfig cfg =
      BackboneConfig::from_encoder(encoder_config_of(pretrain_ckpt), emb_dim, head_dropout);
  return transfer_weights(pretrain_ckpt, cfg, rng);
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

Tensor embed_batch(BackboneParams& backbone, const Tensor& images) {
  ag::NoGradGuard ng;
  nn::TrainCtx eval_ctx;
  Var e = backbone.forward_embedding(Var::constant(images), eval_ctx);
  return e.value();
}

Tensor embed(BackboneParams& backbone, const Image8& image) {
  if (image.empty()) throw std::invalid_argument("embed: empty image");
  const int s = backbone.cfg.input_size;
  Image8 sized = (image.h == s && image.w == s) ? image : resize_image(image, s, s);
  Tensor t = image_to_tensor(sized);
  Tensor e = embed_batch(backbone, t.reshaped({1, 3, s, s}));
  return e.reshaped({backbone.cfg.emb_dim});
}

// ---------------------------------------------------------------------------
// Margin losses
// ---------------------------------------------------------------------------

std::string to_string(LossKind k) {
  return k == LossKind::arcface ? "arcface" : "sphereface";
}

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "arcface") return LossKind::arcface;
  if (s == "sphereface") return LossKind::sphereface;
  throw ConfigError("unknown loss kind '" + s + "' (want arcface or sphereface)");
}

TwoHotLabel TwoHotLabel::from_lambda(int64_t index_a_, int64_t index_b_, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("TwoHotLabel: lambda must be in [0,1]");
  TwoHotLabel l;
  if (index_a_ == index_b_) {
    l.index_a = l.index_b = index_a_;
    l.weight_a = 1.0;
    l.weight_b = 0.0;
  } else {
    l.index_a = index_a_;
    l.index_b = index_b_;
    l.weight_a = 1.0 - lambda;
    l.weight_b = lambda;
  }
  return l;
}

void TwoHotLabel::validate(int64_t num_classes) const {
  if (index_a < 0 || index_a >= num_classes || index_b < 0 || index_b >= num_classes)
    throw std::invalid_argument("TwoHotLabel: class index out of range [0, " +
                                std::to_string(num_classes) + ")");
  if (weight_a < 0.0 || weight_b < 0.0)
    throw std::invalid_argument("TwoHotLabel: weights must be nonnegative");
  if (std::abs(weight_a + weight_b - 1.0) > 1e-9)
    throw std::invalid_argument("TwoHotLabel: weights must sum to 1");
  if (index_a == index_b && weight_a > 0.0 && weight_b > 0.0)
    throw std::invalid_argument("TwoHotLabel: duplicate index with two nonzero weights");
}

namespace {

constexpr double kPi = 3.14159265358979323846;

// [B,C] cosine between unit embeddings and unit class weights.
Var cosine_logits(const Var& emb, const Var& weights) {
  return ag::matmul(nn::l2_normalize_rows(emb), nn::l2_normalize_rows(weights), false, true);
}

void check_loss_args(const Var& emb, const Var& weights) {
  if (emb.shape().size() != 2) throw std::invalid_argument("margin loss: embeddings must be [B,D]");
  if (weights.shape().size() != 2)
    throw std::invalid_argument("margin loss: class_weights must be [C,D]");
  if (emb.shape()[1] != weights.shape()[1])
    throw std::invalid_argument("margin loss: embedding dim " + std::to_string(emb.shape()[1]) +
                                " vs class weight dim " + std::to_string(weights.shape()[1]));
}

std::vector<int> as_int_labels(const std::vector<int64_t>& labels, int64_t num_classes, int64_t b) {
  if (static_cast<int64_t>(labels.size()) != b)
    throw std::invalid_argument("margin loss: got " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(b));
  std::vector<int> idx(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::invalid_argument("margin loss: label " + std::to_string(labels[i]) +
                                  " out of range [0, " + std::to_string(num_classes) + ")");
    idx[i] = static_cast<int>(labels[i]);
  }
  return idx;
}

// Mean over rows of lse(z) - sum_t w_t * z_t, stabilized by a constant
// per-row max shift. Up to two weighted target columns per row; a zero weight
// contributes exactly nothing (0 * z == 0).
Var soft_ce_rows(const Var& z, const std::vector<int>& idx_a, const Tensor& w_a,
                 const std::vector<int>& idx_b, const Tensor& w_b) {
  const int b = z.shape()[0];
  const int c = z.shape()[1];
  Tensor neg_rowmax({b});
  for (int i = 0; i < b; ++i) {
    double m = z.value().d[static_cast<size_t>(i) * c];
    for (int j = 1; j < c; ++j)
      m = std::max(m, z.value().d[static_cast<size_t>(i) * c + j]);
    neg_rowmax.d[static_cast<size_t>(i)] = -m;
  }
  Var shifted = ag::bcast_add(z, Var::constant(neg_rowmax));
  Var lse = ag::vlog(ag::reduce_sum(ag::vexp(shifted), {1}));
  Var target = ag::mul(ag::gather_cols(shifted, idx_a), Var::constant(w_a));
  if (!idx_b.empty())
    target = ag::add(target, ag::mul(ag::gather_cols(shifted, idx_b), Var::constant(w_b)));
  return ag::mean_all(ag::sub(lse, target));
}

// ArcFace-adjusted target column values: cos(theta + m), falling back to
// cos(theta) - m*sin(m) once theta + m exceeds pi (standard safeguard keeping
// the logit monotone in theta).
Var arcface_phi(const Var& cos_t, double m) {
  Var theta = ag::vacos(cos_t);
  Var phi = ag::vcos(ag::add_scalar(theta, m));
  const int b = cos_t.shape()[0];
  Tensor use_phi({b}), use_fb({b});
  const double threshold = std::cos(kPi - m);
  for (int i = 0; i < b; ++i) {
    bool ok = cos_t.value().d[static_cast<size_t>(i)] > threshold;
    use_phi.d[static_cast<size_t>(i)] = ok ? 1.0 : 0.0;
    use_fb.d[static_cast<size_t>(i)] = ok ? 0.0 : 1.0;
  }
  Var fallback = ag::add_scalar(cos_t, -m * std::sin(m));
  return ag::add(ag::mul(phi, Var::constant(use_phi)), ag::mul(fallback, Var::constant(use_fb)));
}

// z with column idx[b] of row b replaced by s*phi[b] (z is s*cos).
Var replace_target_logit(const Var& z, const Var& cos_t, const Var& phi,
                         const std::vector<int>& idx, double s) {
  const int c = z.shape()[1];
  Var delta = ag::mul_scalar(ag::sub(phi, cos_t), s);
  return ag::add(z, ag::scatter_cols(delta, idx, c));
}

}  // namespace

Var arcface_loss(const Var& embeddings, const std::vector<int64_t>& labels,
                 const Var& class_weights, double s, double m) {
  check_loss_args(embeddings, class_weights);
  if (s <= 0.0) throw std::invalid_argument("arcface_loss: s must be positive");
  if (m < 0.0 || m >= kPi / 2) throw std::invalid_argument("arcface_loss: m must be in [0, pi/2)");
  const int c = class_weights.shape()[0];
  std::vector<int> idx = as_int_labels(labels, c, embeddings.shape()[0]);

  Var cos = cosine_logits(embeddings, class_weights);
  Var cos_t = ag::gather_cols(cos, idx);
  Var z = replace_target_logit(ag::mul_scalar(cos, s), cos_t, arcface_phi(cos_t, m), idx, s);
  Tensor ones = Tensor::full({embeddings.shape()[0]}, 1.0);
  return soft_ce_rows(z, idx, ones, {}, Tensor());
}

Var sphereface_loss(const Var& embeddings, const std::vector<int64_t>& labels,
                    const Var& class_weights, int m_mult, double s) {
  check_loss_args(embeddings, class_weights);
  if (m_mult < 1) throw std::invalid_argument("sphereface_loss: m_mult must be >= 1");
  if (s <= 0.0) throw std::invalid_argument("sphereface_loss: s must be positive");
  const int c = class_weights.shape()[0];
  const int b = embeddings.shape()[0];
  std::vector<int> idx = as_int_labels(labels, c, b);

  Var cos = cosine_logits(embeddings, class_weights);
  Var cos_t = ag::gather_cols(cos, idx);
  Var theta = ag::vacos(cos_t);
  // psi(theta) = (-1)^k cos(m*theta) - 2k, k = floor(m*theta/pi): the
  // monotonized multiplicative margin. k is constant almost everywhere, so it
  // is folded in from values.
  Tensor sign({b}), shift({b});
  for (int i = 0; i < b; ++i) {
    double th = theta.value().d[static_cast<size_t>(i)];
    int k = static_cast<int>(std::floor(m_mult * th / kPi));
    sign.d[static_cast<size_t>(i)] = (k % 2 == 0) ? 1.0 : -1.0;
    shift.d[static_cast<size_t>(i)] = -2.0 * k;
  }
  Var psi = ag::add(ag::mul(ag::vcos(ag::mul_scalar(theta, m_mult)), Var::constant(sign)),
                    Var::constant(shift));
  Var z = replace_target_logit(ag::mul_scalar(cos, s), cos_t, psi, idx, s);
  Tensor ones = Tensor::full({b}, 1.0);
  return soft_ce_rows(z, idx, ones, {}, Tensor());
}

Var soft_margin_loss(const Var& embeddings, const std::vector<TwoHotLabel>& labels,
                     const Var& class_weights, double s, double m) {
  check_loss_args(embeddings, class_weights);
  if (s <= 0.0) throw std::invalid_argument("soft_margin_loss: s must be positive");
  if (m < 0.0 || m >= kPi / 2)
    throw std::invalid_argument("soft_margin_loss: m must be in [0, pi/2)");
  const int c = class_weights.shape()[0];
  const int b = embeddings.shape()[0];
  if (static_cast<int>(labels.size()) != b)
    throw std::invalid_argument("soft_margin_loss: got " + std::to_string(labels.size()) +
                                " labels for batch of " + std::to_string(b));
  std::vector<int> idx_a(labels.size()), idx_b(labels.size());
  Tensor w_a({b}), w_b({b}), active_a({b}), active_b({b});
  for (int i = 0; i < b; ++i) {
    labels[static_cast<size_t>(i)].validate(c);
    const TwoHotLabel& l = labels[static_cast<size_t>(i)];
    idx_a[static_cast<size_t>(i)] = static_cast<int>(l.index_a);
    idx_b[static_cast<size_t>(i)] = static_cast<int>(l.index_b);
    w_a.d[static_cast<size_t>(i)] = l.weight_a;
    w_b.d[static_cast<size_t>(i)] = l.weight_b;
    active_a.d[static_cast<size_t>(i)] = l.weight_a > 0.0 ? 1.0 : 0.0;
    active_b.d[static_cast<size_t>(i)] = l.weight_b > 0.0 ? 1.0 : 0.0;
  }

  Var cos = cosine_logits(embeddings, class_weights);
  Var z = ag::mul_scalar(cos, s);
  // Additive margin on every class with nonzero target weight. Masking the
  // delta by the active flag keeps zero-weight columns bit-identical to the
  // unadjusted logits, so the lambda endpoints coincide exactly with arcface.
  Var cos_a = ag::gather_cols(cos, idx_a);
  Var delta_a = ag::mul(ag::mul_scalar(ag::sub(arcface_phi(cos_a, m), cos_a), s),
                        Var::constant(active_a));
  z = ag::add(z, ag::scatter_cols(delta_a, idx_a, c));
  Var cos_b = ag::gather_cols(cos, idx_b);
  Var delta_b = ag::mul(ag::mul_scalar(ag::sub(arcface_phi(cos_b, m), cos_b), s),
                        Var::constant(active_b));
  z = ag::add(z, ag::scatter_cols(delta_b, idx_b, c));

  return soft_ce_rows(z, idx_a, w_a, idx_b, w_b);
}

// ---------------------------------------------------------------------------
// Interpolated identities
// ---------------------------------------------------------------------------

std::pair<Tensor, TwoHotLabel> make_interpolation_at(const Image8& i1, const Image8& i2,
                                                     int64_t id1, int64_t id2,
                                                     enc::EncoderParams& encoder,
                                                     const gan::Generator& generator,
                                                     double lambda) {
  if (i1.empty() || i2.empty())
    throw std::invalid_argument("make_interpolation: empty source image");
  if (lambda < 0.0 || lambda > 1.0)
    throw std::invalid_argument("make_interpolation: lambda must be in [0,1]");
  const int s = encoder.cfg.input_size;
  auto code_of = [&](const Image8& img) {
    Image8 sized = (img.h == s && img.w == s) ? img : resize_image(img, s, s);
    return enc::encode(encoder, image_to_tensor(sized));  // [L,D]
  };
  Tensor c1 = code_of(i1);
  Tensor c2 = code_of(i2);
  Tensor comb(c1.shape);
  for (size_t i = 0; i < comb.d.size(); ++i)
    comb.d[i] = lambda * c1.d[i] + (1.0 - lambda) * c2.d[i];

  const int layers = comb.dim(0);
  const int d = comb.dim(1);
  std::vector<Var> styles;
  styles.reserve(static_cast<size_t>(layers));
  for (int l = 0; l < layers; ++l) {
    Tensor row({1, d});
    std::copy_n(comb.d.begin() + static_cast<size_t>(l) * d, d, row.d.begin());
    styles.push_back(Var::constant(std::move(row)));
  }
  ag::NoGradGuard ng;
  Tensor img = generator.synthesis.forward(styles, nullptr).value();
  const int r = img.dim(2);
  // Weight lambda goes to id1 (whose code has coefficient lambda).
  return {img.reshaped({3, r, r}), TwoHotLabel::from_lambda(id2, id1, lambda)};
}

std::pair<Tensor, TwoHotLabel> make_interpolation(const Image8& i1, const Image8& i2, int64_t id1,
                                                  int64_t id2, enc::EncoderParams& encoder,
                                                  const gan::Generator& generator, Rng& rng) {
  return make_interpolation_at(i1, i2, id1, id2, encoder, generator, rng.uniform());
}

std::vector<InterpSample> build_interpolation_pool(const IdentityDataset& ds,
                                                   enc::EncoderParams& encoder,
                                                   const gan::Generator& generator, int64_t count,
                                                   Rng& rng) {
  if (ds.identity_count() < 2)
    throw PrerequisiteError("build_interpolation_pool: need at least two identities, got " +
                            std::to_string(ds.identity_count()));
  if (count < 0) throw std::invalid_argument("build_interpolation_pool: negative count");
  const auto& ids = ds.identity_ids();
  std::vector<InterpSample> pool;
  pool.reserve(static_cast<size_t>(count));
  for (int64_t n = 0; n < count; ++n) {
    int64_t ia = static_cast<int64_t>(rng.below(ids.size()));
    int64_t ib = static_cast<int64_t>(rng.below(ids.size() - 1));
    if (ib >= ia) ++ib;
    int64_t id1 = ids[static_cast<size_t>(ia)];
    int64_t id2 = ids[static_cast<size_t>(ib)];
    const auto& rows1 = ds.images_of(id1);
    const auto& rows2 = ds.images_of(id2);
    Image8 i1 = ds.load(rows1[rng.below(rows1.size())]);
    Image8 i2 = ds.load(rows2[rng.below(rows2.size())]);
    auto [img, label] = make_interpolation(i1, i2, id1, id2, encoder, generator, rng);
    pool.push_back({tensor_to_image(img), label, label.weight_b});
  }
  return pool;
}

// ---------------------------------------------------------------------------
// IdentityDataset
// ---------------------------------------------------------------------------

namespace {

void index_rows(const std::vector<IdentityImage>& rows, std::vector<int64_t>& ids,
                std::map<int64_t, std::vector<size_t>>& by_id) {
  by_id.clear();
  for (size_t i = 0; i < rows.size(); ++i) by_id[rows[i].identity_id].push_back(i);
  ids.clear();
  ids.reserve(by_id.size());
  for (const auto& kv : by_id) ids.push_back(kv.first);
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

}  // namespace

IdentityDataset::IdentityDataset(std::vector<IdentityImage> rows) : rows_(std::move(rows)) {
  index_rows(rows_, ids_, by_id_);
}

IdentityDataset IdentityDataset::from_directory(const std::string& root) {
  fs::path r(root);
  if (!fs::is_directory(r))
    throw IngestError("identity dataset: '" + root + "' is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(r))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());

  std::vector<IdentityImage> rows;
  int64_t next_id = 0;
  for (const auto& dir : dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    for (const auto& f : files) rows.push_back({f.string(), next_id, 0});
    ++next_id;
  }
  if (rows.empty()) throw IngestError("identity dataset: no images under '" + root + "'");
  return IdentityDataset(std::move(rows));
}

IdentityDataset IdentityDataset::from_csv(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IngestError("identity dataset: cannot open manifest '" + csv_path + "'");
  fs::path base = fs::path(csv_path).parent_path();
  std::vector<IdentityImage> rows;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string path_s, id_s, group_s;
    if (!std::getline(ss, path_s, ',') || !std::getline(ss, id_s, ',') ||
        !std::getline(ss, group_s))
      throw IngestError("identity dataset: malformed line " + std::to_string(line_no) + " in '" +
                        csv_path + "' (want image_path,identity_id,group_id)");
    if (line_no == 1 && path_s == "image_path") continue;  // header row
    IdentityImage row;
    fs::path p(path_s);
    row.path = p.is_absolute() ? p.string() : (base / p).string();
    try {
      row.identity_id = std::stoll(id_s);
      row.group_id = std::stoll(group_s);
    } catch (const std::exception&) {
      throw IngestError("identity dataset: bad id on line " + std::to_string(line_no) + " in '" +
                        csv_path + "'");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw IngestError("identity dataset: empty manifest '" + csv_path + "'");
  return IdentityDataset(std::move(rows));
}

const std::vector<size_t>& IdentityDataset::images_of(int64_t identity_id) const {
  auto it = by_id_.find(identity_id);
  if (it == by_id_.end())
    throw std::invalid_argument("identity dataset: unknown identity " +
                                std::to_string(identity_id));
  return it->second;
}

Image8 IdentityDataset::load(size_t i) const { return load_image(rows_.at(i).path); }

IdentityDataset subsample_identities(const IdentityDataset& ds, double fraction, uint64_t seed) {
  if (!(fraction > 0.0) || fraction > 1.0)
    throw std::invalid_argument("subsample_identities: fraction must be in (0, 1]");
  const auto& ids = ds.identity_ids();
  const int64_t people = static_cast<int64_t>(ids.size());
  const int64_t keep = std::llround(fraction * static_cast<double>(people));
  Rng rng(seed);
  std::vector<int64_t> perm = rng.permutation(people);
  std::set<int64_t> kept;
  for (int64_t i = 0; i < keep; ++i) kept.insert(ids[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
  std::vector<IdentityImage> rows;
  for (const auto& r : ds.rows())
    if (kept.count(r.identity_id)) rows.push_back(r);
  return IdentityDataset(std::move(rows));
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

Image8 flip_horizontal(const Image8& img) {
  Image8 out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, img.w - 1 - x, c);
  return out;
}

Image8 augment_batch(const Image8& image, Rng& rng, int resize_to, int crop) {
  if (image.empty()) throw std::invalid_argument("augment_batch: empty image");
  if (crop < 1 || resize_to < crop)
    throw std::invalid_argument("augment_batch: need 1 <= crop <= resize_to");
  Image8 sized = (image.h == resize_to && image.w == resize_to)
                     ? image
                     : resize_image(image, resize_to, resize_to);
  const int span = resize_to - crop;
  const int y0 = static_cast<int>(rng.below(static_cast<uint64_t>(span) + 1));
  const int x0 = static_cast<int>(rng.below(static_cast<uint64_t>(span) + 1));
  Image8 out(crop, crop);
  for (int y = 0; y < crop; ++y)
    for (int x = 0; x < crop; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = sized.at(y0 + y, x0 + x, c);
  if (rng.bernoulli(0.5)) out = flip_horizontal(out);
  return out;
}

// ---------------------------------------------------------------------------
// Finetuning
// ---------------------------------------------------------------------------

void FinetuneSchedule::validate(int input_size) const {
  if (epochs < 1) throw ConfigError("finetune: epochs must be >= 1");
  if (freeze_epochs < 0 || freeze_epochs > epochs)
    throw ConfigError("finetune: freeze_epochs must be in [0, epochs]");
  if (lr0 <= 0.0) throw ConfigError("finetune: lr0 must be positive");
  if (lr_decay_factor < 1.0) throw ConfigError("finetune: lr_decay_factor must be >= 1");
  if (lr_decay_every < 1) throw ConfigError("finetune: lr_decay_every must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("finetune: momentum must be in [0,1)");
  if (weight_decay < 0.0) throw ConfigError("finetune: weight_decay must be nonnegative");
  if (conv_dropout < 0.0 || conv_dropout >= 1.0)
    throw ConfigError("finetune: conv_dropout must be in [0,1)");
  if (margin_s <= 0.0) throw ConfigError("finetune: margin_s must be positive");
  if (margin_m < 0.0 || margin_m >= kPi / 2)
    throw ConfigError("finetune: margin_m must be in [0, pi/2)");
  if (sphere_m_mult < 1) throw ConfigError("finetune: sphere_m_mult must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune: batch_size must be >= 1");
  if (resize_to < input_size)
    throw ConfigError("finetune: resize_to " + std::to_string(resize_to) +
                      " smaller than backbone input " + std::to_string(input_size));
}

FinetuneSchedule FinetuneSchedule::desk() {
  FinetuneSchedule s;
  s.epochs = 15;
  s.freeze_epochs = 2;
  s.batch_size = 32;
  s.resize_to = 36;  // pairs with the 32px desk backbone
  return s;
}

std::string finetune_schedule_to_json(const FinetuneSchedule& s) {
  json j;
  j["epochs"] = s.epochs;
  j["freeze_epochs"] = s.freeze_epochs;
  j["lr0"] = s.lr0;
  j["lr_decay_factor"] = s.lr_decay_factor;
  j["lr_decay_every"] = s.lr_decay_every;
  j["momentum"] = s.momentum;
  j["weight_decay"] = s.weight_decay;
  j["conv_dropout"] = s.conv_dropout;
  j["margin_s"] = s.margin_s;
  j["margin_m"] = s.margin_m;
  j["sphere_m_mult"] = s.sphere_m_mult;
  j["batch_size"] = s.batch_size;
  j["resize_to"] = s.resize_to;
  return j.dump(2);
}

FinetuneSchedule finetune_schedule_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("finetune schedule: invalid JSON: ") + e.what());
  }
  FinetuneSchedule s;
  try {
    for (const auto& [key, val] : j.items()) {
      if (key == "epochs") s.epochs = val.get<int>();
      else if (key == "freeze_epochs") s.freeze_epochs = val.get<int>();
      else if (key == "lr0") s.lr0 = val.get<double>();
      else if (key == "lr_decay_factor") s.lr_decay_factor = val.get<double>();
      else if (key == "lr_decay_every") s.lr_decay_every = val.get<int>();
      else if (key == "momentum") s.momentum = val.get<double>();
      else if (key == "weight_decay") s.weight_decay = val.get<double>();
      else if (key == "conv_dropout") s.conv_dropout = val.get<double>();
      else if (key == "margin_s") s.margin_s = val.get<double>();
      else if (key == "margin_m") s.margin_m = val.get<double>();
      else if (key == "sphere_m_mult") s.sphere_m_mult = val.get<int>();
      else if (key == "batch_size") s.batch_size = val.get<int>();
      else if (key == "resize_to") s.resize_to = val.get<int>();
      else throw ConfigError("finetune schedule: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("finetune schedule: bad value: ") + e.what());
  }
  return s;
}

namespace {

struct FinetuneLog {
  std::ofstream file;
  const FinetuneOptions* opts = nullptr;

  FinetuneLog(const FinetuneOptions& o, const char* name) : opts(&o) {
    if (!o.out_dir.empty()) {
      fs::create_directories(o.out_dir);
      file.open(o.out_dir / name, std::ios::trunc);
    }
  }
  void emit(const json& j) {
    std::string line = j.dump();
    if (file.is_open()) file << line << '\n' << std::flush;
    if (opts->log_sink) opts->log_sink(line);
  }
};

// Fraction of rows whose max-cosine class matches the label.
double argmax_cosine_accuracy(const Tensor& emb, const Tensor& weights,
                              const std::vector<int64_t>& labels) {
  const int b = emb.dim(0), d = emb.dim(1), c = weights.dim(0);
  auto row_norm = [](const Tensor& t, int row, int dim) {
    double s = 0.0;
    for (int j = 0; j < dim; ++j) {
      double v = t.d[static_cast<size_t>(row) * dim + j];
      s += v * v;
    }
    return std::sqrt(std::max(s, 1e-24));
  };
  int hits = 0;
  for (int i = 0; i < b; ++i) {
    double en = row_norm(emb, i, d);
    int best = 0;
    double best_cos = -2.0;
    for (int j = 0; j < c; ++j) {
      double dot = 0.0;
      for (int k = 0; k < d; ++k)
        dot += emb.d[static_cast<size_t>(i) * d + k] * weights.d[static_cast<size_t>(j) * d + k];
      double cs = dot / (en * row_norm(weights, j, d));
      if (cs > best_cos) {
        best_cos = cs;
        best = j;
      }
    }
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return b > 0 ? static_cast<double>(hits) / b : 0.0;
}

}  // namespace

ckpt::Checkpoint finetune(const IdentityDataset& data, BackboneParams& backbone,
                          const FinetuneSchedule& schedule, LossKind loss_kind, Rng& rng,
                          const std::vector<InterpSample>* interpolation_pool,
                          const FinetuneOptions& opts, FinetuneStats* stats) {
  schedule.validate(backbone.cfg.input_size);
  if (data.empty()) throw PrerequisiteError("finetune: dataset is empty");

  // Identity ids -> contiguous class indices in sorted-id order.
  const auto& ids = data.identity_ids();
  std::map<int64_t, int64_t> class_of;
  for (size_t i = 0; i < ids.size(); ++i) class_of[ids[i]] = static_cast<int64_t>(i);
  const int num_classes = static_cast<int>(ids.size());

  Rng init_rng(rng.next_u64());
  Rng data_rng(rng.next_u64());
  Rng aug_rng(rng.next_u64());
  Rng drop_rng(rng.next_u64());
  if (backbone.num_classes() != num_classes) backbone.init_classes(num_classes, init_rng);

  // Remap pool labels (identity ids) to class indices.
  std::vector<TwoHotLabel> pool_labels;
  const std::vector<InterpSample>* pool = interpolation_pool;
  if (pool != nullptr && !pool->empty()) {
    pool_labels.reserve(pool->size());
    for (const auto& s : *pool) {
      auto a = class_of.find(s.label.index_a);
      auto b = class_of.find(s.label.index_b);
      if (a == class_of.end() || b == class_of.end())
        throw std::invalid_argument(
            "finetune: interpolation pool references identity " +
            std::to_string(a == class_of.end() ? s.label.index_a : s.label.index_b) +
            " absent from the dataset");
      TwoHotLabel l = s.label;
      l.index_a = a->second;
      l.index_b = b->second;
      l.validate(num_classes);
      pool_labels.push_back(l);
    }
  } else {
    pool = nullptr;
  }

  nn::ParamRegistry reg;
  backbone.collect(reg, "");
  optim::Sgd opt(reg, schedule.lr0, schedule.momentum, schedule.weight_decay);

  json cj;
  cj["backbone"] = json::parse(backbone_config_to_json(backbone.cfg));
  cj["schedule"] = json::parse(finetune_schedule_to_json(schedule));
  cj["loss_kind"] = to_string(loss_kind);
  cj["provenance"] = backbone.provenance;
  cj["num_classes"] = num_classes;
  const std::string config_json = cj.dump(2);

  FinetuneLog log(opts, "finetune_log.jsonl");
  const int n_real = static_cast<int>(data.size());
  const int n_pool = pool ? static_cast<int>(pool->size()) : 0;
  const int s_in = backbone.cfg.input_size;
  int64_t samples_seen = 0;

  // Combined sample index space: [0, n_real) real rows, then pool rows.
  std::vector<int> order(static_cast<size_t>(n_real + n_pool));
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < schedule.epochs; ++epoch) {
    const bool frozen_phase = epoch < schedule.freeze_epochs;
    if (epoch == 0 && frozen_phase) {
      // Freeze all but the stem unit, the output block and the class weights.
      opt.set_all_frozen(true);
      opt.set_frozen_by_prefix({"trunk.stem", "head", "class_weights"}, false);
    }
    if (!frozen_phase && epoch == schedule.freeze_epochs) opt.set_all_frozen(false);
    opt.lr = optim::step_decay_lr(schedule.lr0, epoch, schedule.lr_decay_every, schedule.lr_decay_factor);

    nn::TrainCtx ctx;
    ctx.training = true;
    ctx.conv_dropout = schedule.conv_dropout;
    ctx.bn_update_stats = !frozen_phase;
    ctx.rng = &drop_rng;

    data_rng.shuffle(order);
    double loss_sum = 0.0;
    int64_t loss_batches = 0;
    int64_t real_hits_num = 0, real_seen = 0;

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(schedule.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(schedule.batch_size));
      std::vector<Image8> real_imgs, pool_imgs;
      std::vector<int64_t> real_labels;
      std::vector<TwoHotLabel> batch_pool_labels;
      for (size_t i = start; i < stop; ++i) {
        const int s = order[i];
        if (s < n_real) {
          real_imgs.push_back(augment_batch(data.load(static_cast<size_t>(s)), aug_rng,
                                            schedule.resize_to, s_in));
          real_labels.push_back(class_of.at(data.row(static_cast<size_t>(s)).identity_id));
        } else {
          const auto& ps = (*pool)[static_cast<size_t>(s - n_real)];
          pool_imgs.push_back(augment_batch(ps.image, aug_rng, schedule.resize_to, s_in));
          batch_pool_labels.push_back(pool_labels[static_cast<size_t>(s - n_real)]);
        }
      }

      Var loss;
      const int k_real = static_cast<int>(real_imgs.size());
      const int k_pool = static_cast<int>(pool_imgs.size());
      if (k_real > 0) {
        Var emb = backbone.forward_embedding(Var::constant(images_to_batch(real_imgs)), ctx);
        Var l = loss_kind == LossKind::arcface
                    ? arcface_loss(emb, real_labels, backbone.class_weights, schedule.margin_s,
                                   schedule.margin_m)
                    : sphereface_loss(emb, real_labels, backbone.class_weights,
                                      schedule.sphere_m_mult, schedule.margin_s);
        loss = ag::mul_scalar(l, static_cast<double>(k_real) / (k_real + k_pool));
        real_hits_num += std::llround(
            argmax_cosine_accuracy(emb.value(), backbone.class_weights.value(), real_labels) *
            k_real);
        real_seen += k_real;
      }
      if (k_pool > 0) {
        Var emb = backbone.forward_embedding(Var::constant(images_to_batch(pool_imgs)), ctx);
        Var l = soft_margin_loss(emb, batch_pool_labels, backbone.class_weights, schedule.margin_s,
                                 schedule.margin_m);
        Var scaled = ag::mul_scalar(l, static_cast<double>(k_pool) / (k_real + k_pool));
        loss = (k_real > 0) ? ag::add(loss, scaled) : scaled;
      }

      const double loss_val = loss.value().d[0];
      if (!std::isfinite(loss_val)) {
        if (!opts.out_dir.empty()) {
          ckpt::Checkpoint diag = ckpt::snapshot(reg, "facerec", config_json, samples_seen, &rng);
          diag.extra_json = json{{"provenance", backbone.provenance}}.dump();
          ckpt::save_checkpoint((opts.out_dir / "facerec_diagnostic.ckpt").string(), diag);
        }
        throw NumericalError("finetune diverged at sample " + std::to_string(samples_seen) +
                             ": non-finite loss" +
                             (opts.out_dir.empty() ? "" : " (diagnostic checkpoint written)"));
      }
      reg.zero_grad();
      ag::backward(loss);
      opt.step();
      samples_seen += k_real + k_pool;
      loss_sum += loss_val;
      ++loss_batches;
    }

    const double epoch_loss = loss_batches > 0 ? loss_sum / static_cast<double>(loss_batches) : 0.0;
    const double epoch_acc =
        real_seen > 0 ? static_cast<double>(real_hits_num) / static_cast<double>(real_seen) : 0.0;
    if (stats) {
      stats->epoch_loss.push_back(epoch_loss);
      stats->epoch_accuracy.push_back(epoch_acc);
      stats->epoch_lr.push_back(opt.lr);
      stats->samples_seen = samples_seen;
    }
    log.emit(json{{"epoch", epoch + 1},
                  {"samples_seen", samples_seen},
                  {"lr", opt.lr},
                  {"loss", epoch_loss},
                  {"accuracy", epoch_acc},
                  {"frozen", frozen_phase}});
  }

  ckpt::Checkpoint ck = ckpt::snapshot(reg, "facerec", config_json, samples_seen, &rng);
  ck.extra_json = json{{"provenance", backbone.provenance}}.dump();
  for (const auto& [name, t] : ck.tensors)
    if (!all_finite(t))
      throw NumericalError("finetune produced non-finite parameter tensor '" + name + "'");
  if (!opts.out_dir.empty())
    ckpt::save_checkpoint((opts.out_dir / "facerec.ckpt").string(), ck);
  return ck;
}

BackboneParams load_backbone(const ckpt::Checkpoint& ck) {
  if (ck.stage != "facerec")
    throw PrerequisiteError("load_backbone: expected a stage-facerec checkpoint, got '" +
                            ck.stage + "'");
  json cj;
  try {
    cj = json::parse(ck.config_json);
  } catch (const json::exception& e) {
    throw PrerequisiteError(std::string("load_backbone: checkpoint config is not JSON: ") +
                            e.what());
  }
  if (!cj.contains("backbone") || !cj.contains("num_classes"))
    throw PrerequisiteError("load_backbone: checkpoint config lacks backbone/num_classes");
  BackboneConfig cfg = backbone_config_from_json(cj["backbone"].dump());
  Rng tmp(0);
  BackboneParams bb(cfg, tmp);
  bb.init_classes(cj["num_classes"].get<int>(), tmp);
  if (cj.contains("provenance")) bb.provenance = cj["provenance"].get<std::string>();
  nn::ParamRegistry reg;
  bb.collect(reg, "");
  ckpt::restore(ck, reg);
  return bb;
}

}  // namespace frboost::fr
