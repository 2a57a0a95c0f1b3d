#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "frboost/autograd.hpp"
#include "frboost/checkpoint.hpp"
#include "frboost/encoder.hpp"
#include "frboost/errors.hpp"
#include "frboost/gan.hpp"
#include "frboost/image.hpp"
#include "frboost/nn.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

namespace frboost::fr {

using ag::Var;

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

struct BackboneConfig {
  int input_size = 112;
  int emb_dim = 512;
  int trunk_depth = 4;
  int trunk_width = 64;
  int trunk_blocks_per_stage = 3;
  bool use_squeeze_excitation = true;
  double head_dropout = 0.0;  // dropout inside the embedding head (off by default)

  void validate() const;  // throws ConfigError
  nn::TrunkConfig trunk_config() const;
  // Backbone whose trunk mirrors the given encoder trunk exactly.
  static BackboneConfig from_encoder(const enc::EncoderConfig& e, int emb_dim = 512,
                                     double head_dropout = 0.0);
  static BackboneConfig desk();
};

std::string backbone_config_to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const std::string& text);

// IR-SE trunk + embedding head + (optional) per-class weight matrix for the
// margin-softmax classification heads used during finetuning.
struct BackboneParams {
  BackboneConfig cfg;
  nn::Trunk trunk;
  nn::EmbedHead head;
  Var class_weights;  // [num_classes, emb_dim]; empty until init_classes
  std::string provenance = "scratch";  // "scratch" | "encoder" | "ae" | "vae"

  BackboneParams() = default;
  BackboneParams(const BackboneConfig& cfg, Rng& rng);

  // [B,3,S,S] -> [B,emb_dim] raw (unnormalized) embeddings.
  Var forward_embedding(const Var& images, const nn::TrainCtx& ctx);
  void init_classes(int num_classes, Rng& rng);
  int num_classes() const;
  // Registers trunk.*, head.* and (when initialized) class_weights.
  void collect(nn::ParamRegistry& reg, const std::string& prefix = "");
};

// Copies the trunk (parameters and normalization statistics) out of a
// pretraining checkpoint (stage "encoder", "ae" or "vae") into a fresh
// backbone. The embedding head is freshly initialized from `rng`; the
// checkpoint's non-trunk parameters are discarded. Provenance is set from the
// checkpoint stage. Throws PrerequisiteError with a per-tensor shape diff when
// the layouts disagree.
BackboneParams transfer_weights(const ckpt::Checkpoint& pretrain_ckpt, const BackboneConfig& cfg,
                                Rng& rng);
// Convenience overload deriving the backbone config from the checkpoint's own
// encoder config (same trunk, same input size).
BackboneParams transfer_weights(const ckpt::Checkpoint& pretrain_ckpt, Rng& rng, int emb_dim = 512,
                                double head_dropout = 0.0);

// Deterministic eval-mode embedding of one image (resized to the backbone
// input size when needed). Returns [emb_dim].
Tensor embed(BackboneParams& backbone, const Image8& image);
// Eval-mode embeddings for a [B,3,S,S] batch. Returns [B,emb_dim].
Tensor embed_batch(BackboneParams& backbone, const Tensor& images);

// ---------------------------------------------------------------------------
// Margin losses
// ---------------------------------------------------------------------------

enum class LossKind { arcface, sphereface };
std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

// Soft two-class target: weight_a on index_a, weight_b on index_b. Weights are
// nonnegative and sum to 1. Interpolation labels carry (1-lambda) on the
// identity whose latent code has coefficient (1-lambda).
struct TwoHotLabel {
  int64_t index_a = 0;
  int64_t index_b = 0;
  double weight_a = 1.0;
  double weight_b = 0.0;

  // a gets weight 1-lambda, b gets weight lambda. Collapses to a hard label
  // when a == b.
  static TwoHotLabel from_lambda(int64_t index_a, int64_t index_b, double lambda);
  void validate(int64_t num_classes) const;  // throws std::invalid_argument
};

// ArcFace: cross-entropy over s*cos(theta_j + m*[j==label]), with the standard
// safeguard (cos(theta) - m*sin(m)) once theta + m would exceed pi.
Var arcface_loss(const Var& embeddings, const std::vector<int64_t>& labels,
                 const Var& class_weights, double s = 64.0, double m = 0.5);

// SphereFace: target logit uses psi(theta) = (-1)^k cos(m_mult*theta) - 2k
// with k = floor(m_mult*theta / pi); cross-entropy over s-scaled logits.
Var sphereface_loss(const Var& embeddings, const std::vector<int64_t>& labels,
                    const Var& class_weights, int m_mult = 4, double s = 64.0);

// Soft-target cross-entropy over margin-adjusted logits; the additive margin m
// is applied to every class carrying nonzero target weight. Reduces exactly to
// arcface_loss at weight endpoints.
Var soft_margin_loss(const Var& embeddings, const std::vector<TwoHotLabel>& labels,
                     const Var& class_weights, double s = 64.0, double m = 0.5);

// ---------------------------------------------------------------------------
// Interpolated identities
// ---------------------------------------------------------------------------

struct InterpSample {
  Image8 image;
  TwoHotLabel label;  // indices are identity ids; finetune remaps to classes
  double lambda = 0.0;
};

// Synthesizes from lambda*code(i1) + (1-lambda)*code(i2) with pinned (zero)
// synthesis noise; the label puts weight lambda on id1 and 1-lambda on id2.
std::pair<Tensor, TwoHotLabel> make_interpolation_at(const Image8& i1, const Image8& i2,
                                                     int64_t id1, int64_t id2,
                                                     enc::EncoderParams& encoder,
                                                     const gan::Generator& generator,
                                                     double lambda);
// Same with lambda ~ U[0,1) drawn from rng.
std::pair<Tensor, TwoHotLabel> make_interpolation(const Image8& i1, const Image8& i2, int64_t id1,
                                                  int64_t id2, enc::EncoderParams& encoder,
                                                  const gan::Generator& generator, Rng& rng);

class IdentityDataset;

// Draws `count` interpolations between random images of two distinct random
// identities. Requires at least two identities.
std::vector<InterpSample> build_interpolation_pool(const IdentityDataset& ds,
                                                   enc::EncoderParams& encoder,
                                                   const gan::Generator& generator, int64_t count,
                                                   Rng& rng);

// ---------------------------------------------------------------------------
// Data handling
// ---------------------------------------------------------------------------

struct IdentityImage {
  std::string path;
  int64_t identity_id = 0;
  int64_t group_id = 0;
};

// A labeled face dataset: rows of (image path, identity, group).
class IdentityDataset {
 public:
  IdentityDataset() = default;
  explicit IdentityDataset(std::vector<IdentityImage> rows);

  // One directory per identity, images inside; identity ids are assigned in
  // sorted directory order, group ids stay 0.
  static IdentityDataset from_directory(const std::string& root);
  // CSV manifest `image_path,identity_id,group_id` (optional header row);
  // relative paths resolve against the manifest's directory.
  static IdentityDataset from_csv(const std::string& csv_path);

  size_t size() const { return rows_.size(); }
  bool empty() const { return rows_.empty(); }
  const IdentityImage& row(size_t i) const { return rows_.at(i); }
  const std::vector<IdentityImage>& rows() const { return rows_; }

  const std::vector<int64_t>& identity_ids() const { return ids_; }  // sorted unique
  int64_t identity_count() const { return static_cast<int64_t>(ids_.size()); }
  const std::vector<size_t>& images_of(int64_t identity_id) const;

  Image8 load(size_t i) const;

 private:
  std::vector<IdentityImage> rows_;
  std::vector<int64_t> ids_;
  std::map<int64_t, std::vector<size_t>> by_id_;
};

// Keeps round(fraction*people) whole identities, chosen as a prefix of a
// seeded permutation so smaller fractions nest inside larger ones.
IdentityDataset subsample_identities(const IdentityDataset& ds, double fraction, uint64_t seed);

// Horizontal mirror (exact involution).
Image8 flip_horizontal(const Image8& img);

// Train-time augmentation: resize to resize_to, random crop x crop, flip with
// probability 0.5. Rng draw order: crop y, crop x, flip.
Image8 augment_batch(const Image8& image, Rng& rng, int resize_to = 128, int crop = 112);

// ---------------------------------------------------------------------------
// Finetuning
// ---------------------------------------------------------------------------

struct FinetuneSchedule {
  int epochs = 100;
  int freeze_epochs = 3;  // freeze all but the stem and the output block
  double lr0 = 0.03;
  double lr_decay_factor = 1.5;
  int lr_decay_every = 5;  // epochs
  double momentum = 0.9;
  double weight_decay = 2e-3;
  double conv_dropout = 0.15;
  double margin_s = 64.0;
  double margin_m = 0.5;
  int sphere_m_mult = 4;
  int batch_size = 256;
  int resize_to = 128;  // augmentation resize; crop target is the input size

  void validate(int input_size) const;  // throws ConfigError
  static FinetuneSchedule desk();
};

std::string finetune_schedule_to_json(const FinetuneSchedule& s);
FinetuneSchedule finetune_schedule_from_json(const std::string& text);

struct FinetuneOptions {
  std::filesystem::path out_dir;  // when set: facerec.ckpt + finetune_log.jsonl
  std::function<void(const std::string&)> log_sink;
};

struct FinetuneStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;  // argmax-cosine accuracy on real samples
  std::vector<double> epoch_lr;
  int64_t samples_seen = 0;
};

// SGD finetuning of the backbone on a labeled identity dataset. Identity ids
// are remapped to contiguous class indices (sorted order); class weights are
// (re)initialized to match. When an interpolation pool is given its samples
// are shuffled in with the real ones and scored with soft_margin_loss.
// Returns the final checkpoint (stage "facerec").
ckpt::Checkpoint finetune(const IdentityDataset& data, BackboneParams& backbone,
                          const FinetuneSchedule& schedule, LossKind loss_kind, Rng& rng,
                          const std::vector<InterpSample>* interpolation_pool = nullptr,
                          const FinetuneOptions& opts = {}, FinetuneStats* stats = nullptr);

// Rebuilds a backbone from a stage-"facerec" checkpoint.
BackboneParams load_backbone(const ckpt::Checkpoint& ck);

}  // namespace frboost::fr
