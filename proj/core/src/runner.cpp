#include "frboost/runner.hpp"

#include <unistd.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

#include <json.hpp>

#include "frboost/checkpoint.hpp"
#include "frboost/errors.hpp"
#include "frboost/image.hpp"
#include "frboost/metrics.hpp"
#include "frboost/rng.hpp"

namespace frboost::run {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kVersion = "0.1.0";

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

json parse_object(const std::string& text, const std::string& what) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(what + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError(what + ": expected a JSON object");
  return j;
}

// A config file may only use keys that the canonical serialization emits;
// anything else is almost certainly a typo and silently ignoring it would
// change the experiment behind the user's back.
void reject_unknown_keys(const json& user, const json& allowed, const std::string& scope) {
  for (auto it = user.begin(); it != user.end(); ++it)
    if (!allowed.contains(it.key()))
      throw ConfigError("config: unknown key '" + scope + it.key() + "'");
}

// Overlays the user's sub-object onto the fully serialized preset values, so
// the module's own from-json defaults never leak through.
template <class Cfg, class ToJson, class FromJson>
Cfg overlay_section(const Cfg& base, const json& user, const std::string& scope, ToJson to_j,
                    FromJson from_j) {
  if (!user.is_object()) throw ConfigError("config: '" + scope + "' must be an object");
  json merged = json::parse(to_j(base));
  reject_unknown_keys(user, merged, scope + ".");
  merged.merge_patch(user);
  return from_j(merged.dump());
}

// ---- sections without module-level json helpers ----

std::string ingest_to_json(const prior::IngestConfig& c) {
  json j{{"frame_period_s", c.frame_period_s},
         {"max_minutes_per_video", c.max_minutes_per_video},
         {"min_face_px", c.min_face_px},
         {"detector_confidence", c.detector_confidence},
         {"target_size", c.target_size}};
  return j.dump();
}

prior::IngestConfig ingest_from_json(const std::string& text) {
  const json j = json::parse(text);
  prior::IngestConfig c;
  c.frame_period_s = j.value("frame_period_s", c.frame_period_s);
  c.max_minutes_per_video = j.value("max_minutes_per_video", c.max_minutes_per_video);
  c.min_face_px = j.value("min_face_px", c.min_face_px);
  c.detector_confidence = j.value("detector_confidence", c.detector_confidence);
  c.target_size = j.value("target_size", c.target_size);
  return c;
}

std::string paths_to_json(const PathsConfig& p) {
  json j{{"out_dir", p.out_dir.string()},
         {"media_manifest", p.media_manifest.string()},
         {"labeled_data", p.labeled_data.string()},
         {"eval_data", p.eval_data.string()}};
  return j.dump();
}

PathsConfig paths_from_json(const std::string& text) {
  const json j = json::parse(text);
  PathsConfig p;
  p.out_dir = j.value("out_dir", p.out_dir.string());
  p.media_manifest = j.value("media_manifest", p.media_manifest.string());
  p.labeled_data = j.value("labeled_data", p.labeled_data.string());
  p.eval_data = j.value("eval_data", p.eval_data.string());
  return p;
}

std::string facerec_stage_to_json(const FacerecStageConfig& c) {
  json j{{"loss", c.loss},
         {"init", c.init},
         {"label_fraction", c.label_fraction},
         {"interp_pool", c.interp_pool}};
  return j.dump();
}

FacerecStageConfig facerec_stage_from_json(const std::string& text) {
  const json j = json::parse(text);
  FacerecStageConfig c;
  c.loss = j.value("loss", c.loss);
  c.init = j.value("init", c.init);
  c.label_fraction = j.value("label_fraction", c.label_fraction);
  c.interp_pool = j.value("interp_pool", c.interp_pool);
  return c;
}

std::string protocol_to_json(const ProtocolConfig& c) {
  json j{{"kind", c.kind},
         {"n_pairs", c.n_pairs},
         {"candidate_factor", c.candidate_factor},
         {"n_people_per_group", c.n_people_per_group},
         {"pos_per_person", c.pos_per_person},
         {"reuse_first_image", c.reuse_first_image},
         {"folds", c.folds},
         {"mining", c.mining},
         {"fpr_targets", c.fpr_targets}};
  return j.dump();
}

ProtocolConfig protocol_from_json(const std::string& text) {
  const json j = json::parse(text);
  ProtocolConfig c;
  c.kind = j.value("kind", c.kind);
  c.n_pairs = j.value("n_pairs", c.n_pairs);
  c.candidate_factor = j.value("candidate_factor", c.candidate_factor);
  c.n_people_per_group = j.value("n_people_per_group", c.n_people_per_group);
  c.pos_per_person = j.value("pos_per_person", c.pos_per_person);
  c.reuse_first_image = j.value("reuse_first_image", c.reuse_first_image);
  c.folds = j.value("folds", c.folds);
  c.mining = j.value("mining", c.mining);
  c.fpr_targets = j.value("fpr_targets", c.fpr_targets);
  return c;
}

std::string utc_now_iso() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// ExperimentConfig
// ---------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (preset != "desk" && preset != "paper")
    throw ConfigError("config: preset must be \"desk\" or \"paper\", got \"" + preset + "\"");
  if (paths.out_dir.empty()) throw ConfigError("config: paths.out_dir must not be empty");
  ingest.validate();
  gan.validate();
  encoder.validate();
  backbone.validate();
  finetune.validate(backbone.input_size);
  fr::loss_kind_from_string(facerec.loss);  // throws on unknown names
  if (facerec.init != "encoder" && facerec.init != "ae" && facerec.init != "vae" &&
      facerec.init != "scratch")
    throw ConfigError("config: facerec.init must be one of encoder|ae|vae|scratch, got \"" +
                      facerec.init + "\"");
  if (!(facerec.label_fraction > 0.0) || facerec.label_fraction > 1.0)
    throw ConfigError("config: facerec.label_fraction must be in (0, 1]");
  if (facerec.interp_pool < 0) throw ConfigError("config: facerec.interp_pool must be >= 0");
  if (protocol.kind != "rfw" && protocol.kind != "rbweb")
    throw ConfigError("config: protocol.kind must be \"rfw\" or \"rbweb\", got \"" +
                      protocol.kind + "\"");
  if (protocol.mining != "seeded" && protocol.mining != "model")
    throw ConfigError("config: protocol.mining must be \"seeded\" or \"model\", got \"" +
                      protocol.mining + "\"");
  if (protocol.n_pairs < 1) throw ConfigError("config: protocol.n_pairs must be >= 1");
  if (protocol.candidate_factor < 1)
    throw ConfigError("config: protocol.candidate_factor must be >= 1");
  if (protocol.n_people_per_group < 0)
    throw ConfigError("config: protocol.n_people_per_group must be >= 0");
  if (protocol.pos_per_person < 1) throw ConfigError("config: protocol.pos_per_person must be >= 1");
  if (protocol.folds < 2) throw ConfigError("config: protocol.folds must be >= 2");
  if (protocol.fpr_targets.empty())
    throw ConfigError("config: protocol.fpr_targets must not be empty");
  for (double t : protocol.fpr_targets)
    if (!(t > 0.0) || !(t < 1.0))
      throw ConfigError("config: protocol.fpr_targets entries must lie in (0, 1)");
  if (!(prior_fraction > 0.0) || prior_fraction > 1.0)
    throw ConfigError("config: prior_fraction must be in (0, 1]");
  if (fid_samples < 2) throw ConfigError("config: fid_samples must be >= 2");
}

ExperimentConfig ExperimentConfig::paper() { return ExperimentConfig{}; }

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.preset = "desk";
  c.ingest.target_size = 32;
  c.ingest.min_face_px = 16;
  c.gan = gan::GanConfig::desk();
  c.encoder = enc::EncoderConfig::desk();
  c.backbone = fr::BackboneConfig::desk();
  c.finetune = fr::FinetuneSchedule::desk();
  c.protocol.n_pairs = 300;
  c.fid_samples = 128;
  return c;
}

std::string experiment_to_json(const ExperimentConfig& cfg) {
  json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["paths"] = json::parse(paths_to_json(cfg.paths));
  j["ingest"] = json::parse(ingest_to_json(cfg.ingest));
  j["gan"] = json::parse(gan::gan_config_to_json(cfg.gan));
  j["encoder"] = json::parse(enc::encoder_config_to_json(cfg.encoder));
  j["backbone"] = json::parse(fr::backbone_config_to_json(cfg.backbone));
  j["finetune"] = json::parse(fr::finetune_schedule_to_json(cfg.finetune));
  j["facerec"] = json::parse(facerec_stage_to_json(cfg.facerec));
  j["protocol"] = json::parse(protocol_to_json(cfg.protocol));
  j["prior_fraction"] = cfg.prior_fraction;
  j["fid_samples"] = cfg.fid_samples;
  return j.dump(2);
}

ExperimentConfig experiment_from_json(const std::string& text, const CliOverrides& overrides) {
  const json user = parse_object(text, "config");
  std::string preset = "paper";
  if (user.contains("preset")) {
    if (!user["preset"].is_string()) throw ConfigError("config: preset must be a string");
    preset = user["preset"].get<std::string>();
  }
  if (overrides.preset) preset = *overrides.preset;
  if (preset != "desk" && preset != "paper")
    throw ConfigError("config: preset must be \"desk\" or \"paper\", got \"" + preset + "\"");

  ExperimentConfig cfg = preset == "desk" ? ExperimentConfig::desk() : ExperimentConfig::paper();
  reject_unknown_keys(user, json::parse(experiment_to_json(cfg)), "");
  try {
    if (user.contains("seed")) cfg.seed = user["seed"].get<uint64_t>();
    if (user.contains("paths"))
      cfg.paths = overlay_section(cfg.paths, user["paths"], "paths", paths_to_json, paths_from_json);
    if (user.contains("ingest"))
      cfg.ingest =
          overlay_section(cfg.ingest, user["ingest"], "ingest", ingest_to_json, ingest_from_json);
    if (user.contains("gan"))
      cfg.gan = overlay_section(cfg.gan, user["gan"], "gan", gan::gan_config_to_json,
                                gan::gan_config_from_json);
    if (user.contains("encoder"))
      cfg.encoder = overlay_section(cfg.encoder, user["encoder"], "encoder",
                                    enc::encoder_config_to_json, enc::encoder_config_from_json);
    if (user.contains("backbone"))
      cfg.backbone = overlay_section(cfg.backbone, user["backbone"], "backbone",
                                     fr::backbone_config_to_json, fr::backbone_config_from_json);
    if (user.contains("finetune"))
      cfg.finetune =
          overlay_section(cfg.finetune, user["finetune"], "finetune",
                          fr::finetune_schedule_to_json, fr::finetune_schedule_from_json);
    if (user.contains("facerec"))
      cfg.facerec = overlay_section(cfg.facerec, user["facerec"], "facerec",
                                    facerec_stage_to_json, facerec_stage_from_json);
    if (user.contains("protocol"))
      cfg.protocol = overlay_section(cfg.protocol, user["protocol"], "protocol", protocol_to_json,
                                     protocol_from_json);
    if (user.contains("prior_fraction")) cfg.prior_fraction = user["prior_fraction"].get<double>();
    if (user.contains("fid_samples")) cfg.fid_samples = user["fid_samples"].get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.preset = preset;
  if (overrides.seed) cfg.seed = *overrides.seed;
  if (overrides.out_dir) cfg.paths.out_dir = *overrides.out_dir;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& file,
                                        const CliOverrides& overrides) {
  std::ifstream in(file);
  if (!in) throw ConfigError("config: cannot read '" + file.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return experiment_from_json(text.str(), overrides);
}

uint64_t config_hash(const ExperimentConfig& cfg) {
  json j = json::parse(experiment_to_json(cfg));
  j.erase("preset");              // a macro for defaults, already expanded below it
  j["paths"].erase("out_dir");    // relocating an experiment keeps its identity
  return fnv1a64(j.dump());       // object keys serialize sorted -> canonical
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

std::string build_id() {
#if defined(__clang__)
  return std::string("frboost ") + kVersion + " clang " + __clang_version__;
#elif defined(__GNUC__)
  return std::string("frboost ") + kVersion + " gcc " + __VERSION__;
#else
  return std::string("frboost ") + kVersion;
#endif
}

void append_run_record(const std::filesystem::path& file, const RunRecord& rec) {
  json m;
  try {
    m = json::parse(rec.metrics_json);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run record: metrics_json is not JSON: ") + e.what());
  }
  const json j{{"stage", rec.stage},          {"config_hash", hex64(rec.config_hash)},
               {"seed", rec.seed},            {"build", rec.build_id},
               {"started_at", rec.started_at}, {"wall_seconds", rec.wall_seconds},
               {"artifacts", rec.artifacts},  {"metrics", m}};
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::app);
  if (!out) throw IngestError("cannot append to run record log '" + file.string() + "'");
  out << j.dump() << '\n';
}

std::vector<RunRecord> read_run_records(const std::filesystem::path& file) {
  std::vector<RunRecord> recs;
  std::ifstream in(file);
  if (!in) return recs;  // no completed stages yet
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IngestError("run record log '" + file.string() + "' line " +
                        std::to_string(line_no) + ": " + e.what());
    }
    RunRecord r;
    r.stage = j.value("stage", std::string());
    r.config_hash = std::strtoull(j.value("config_hash", std::string("0")).c_str(), nullptr, 16);
    r.seed = j.value("seed", uint64_t{0});
    r.build_id = j.value("build", std::string());
    r.started_at = j.value("started_at", std::string());
    r.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("artifacts")) r.artifacts = j["artifacts"].get<std::vector<std::string>>();
    r.metrics_json = j.value("metrics", json::object()).dump();
    recs.push_back(std::move(r));
  }
  return recs;
}

// ---------------------------------------------------------------------------
// Lock file
// ---------------------------------------------------------------------------

StageLock::StageLock(const std::filesystem::path& experiment_dir) {
  fs::create_directories(experiment_dir);
  path_ = experiment_dir / ".frboost.lock";
  std::FILE* f = std::fopen(path_.string().c_str(), "wx");
  if (!f) {
    std::string holder;
    if (std::ifstream in(path_); in) std::getline(in, holder);
    throw ConfigError("experiment directory '" + experiment_dir.string() +
                      "' is locked by another stage" + (holder.empty() ? "" : " (" + holder + ")") +
                      "; delete '" + path_.string() + "' if that run is dead");
  }
  std::fprintf(f, "pid %ld since %s\n", static_cast<long>(::getpid()), utc_now_iso().c_str());
  std::fclose(f);
}

StageLock::~StageLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

// ---------------------------------------------------------------------------
// Stage execution
// ---------------------------------------------------------------------------

bool is_stage_name(const std::string& name) {
  return std::any_of(std::begin(kStageNames), std::end(kStageNames),
                     [&](const char* s) { return name == s; });
}

std::filesystem::path cache_dir(const ExperimentConfig& cfg) {
  fs::path root = cfg.paths.out_dir / "cache";
  if (const char* env = std::getenv("FRBOOST_CACHE"); env != nullptr && *env != '\0') root = env;
  return root / hex64(config_hash(cfg));
}

namespace {

struct StageOutput {
  std::vector<std::string> artifacts;
  json metrics = json::object();
};

// Artifact paths are recorded relative to the experiment directory when they
// live below it, so run records survive moving the directory.
std::string artifact_path(const ExperimentConfig& cfg, const fs::path& p) {
  const fs::path rel = p.lexically_relative(cfg.paths.out_dir);
  if (rel.empty() || rel.native().starts_with("..")) return p.string();
  return rel.string();
}

fs::path need_artifact(const ExperimentConfig& cfg, const fs::path& rel, const char* producer,
                       const std::string& stage) {
  fs::path p = cfg.paths.out_dir / rel;
  if (!fs::exists(p))
    throw PrerequisiteError(stage + ": missing " + rel.string() + " under '" +
                            cfg.paths.out_dir.string() + "' — run stage '" + producer + "' first");
  return p;
}

prior::PriorDataset need_prior(const ExperimentConfig& cfg, const std::string& stage) {
  const fs::path manifest = need_artifact(cfg, fs::path("prior") / "manifest.csv", "prep", stage);
  prior::PriorDataset ds = prior::PriorDataset::open(manifest.parent_path().string());
  if (ds.empty())
    throw PrerequisiteError(stage + ": prior dataset under '" + manifest.parent_path().string() +
                            "' is empty — rerun stage 'prep' with usable media");
  if (cfg.prior_fraction < 1.0)
    ds = prior::subsample(ds, cfg.prior_fraction, derive_seed(cfg.seed, "prior-subsample"));
  return ds;
}

fr::IdentityDataset load_identities(const fs::path& p, const char* key) {
  if (p.empty())
    throw ConfigError(std::string("config: paths.") + key + " is required for this stage");
  if (!fs::exists(p))
    throw ConfigError(std::string("config: paths.") + key + " '" + p.string() +
                      "' does not exist");
  fr::IdentityDataset ds = fs::is_directory(p) ? fr::IdentityDataset::from_directory(p.string())
                                               : fr::IdentityDataset::from_csv(p.string());
  if (ds.empty())
    throw ConfigError(std::string("config: paths.") + key + " '" + p.string() + "' has no images");
  return ds;
}

// The labeled set actually fed to stage 3: whole-identity subsample under a
// named seed, shared with augment-interp so pool labels always refer to
// identities the finetune will see.
fr::IdentityDataset labeled_subset(const ExperimentConfig& cfg) {
  fr::IdentityDataset ds = load_identities(cfg.paths.labeled_data, "labeled_data");
  if (cfg.facerec.label_fraction < 1.0)
    ds = fr::subsample_identities(ds, cfg.facerec.label_fraction,
                                  derive_seed(cfg.seed, "label-subsample"));
  return ds;
}

eval::GroupedPeople group_people(const fr::IdentityDataset& ds) {
  std::map<std::string, std::map<std::string, std::vector<std::string>>> nested;
  for (const auto& row : ds.rows())
    nested[std::to_string(row.group_id)][std::to_string(row.identity_id)].push_back(row.path);
  eval::GroupedPeople grouped;
  for (auto& [gid, people] : nested) {
    auto& list = grouped[gid];
    for (auto& [pid, images] : people) {
      std::sort(images.begin(), images.end());
      list.push_back(eval::PersonImages{pid, std::move(images)});
    }
  }
  return grouped;
}

Rng stage_rng(const ExperimentConfig& cfg, const std::string& stage) {
  return Rng(derive_seed(cfg.seed, "stage:" + stage));
}

// ---- the eleven stages ----

StageOutput stage_prep(const ExperimentConfig& cfg, const StageOptions&) {
  if (cfg.paths.media_manifest.empty())
    throw ConfigError("prep: paths.media_manifest is required");
  if (!fs::exists(cfg.paths.media_manifest))
    throw ConfigError("prep: media manifest '" + cfg.paths.media_manifest.string() +
                      "' does not exist");
  const fs::path prior_root = cfg.paths.out_dir / "prior";
  prior::CenteredFaceDetector detector;
  prior::BuildReport rep = prior::build_prior_dataset(cfg.paths.media_manifest.string(), detector,
                                                      cfg.ingest, prior_root.string());
  StageOutput out;
  out.artifacts = {artifact_path(cfg, prior_root / "manifest.csv")};
  out.metrics = {{"images", rep.dataset.size()}, {"failed_sources", rep.failures}};
  return out;
}

StageOutput stage_train_gan(const ExperimentConfig& cfg, const StageOptions& opts) {
  const prior::PriorDataset ds = need_prior(cfg, "train-gan");
  Rng rng = stage_rng(cfg, "train-gan");
  gan::GanTrainOptions gopts;
  gopts.out_dir = cfg.paths.out_dir / "checkpoints";
  gopts.log_sink = opts.log_sink;
  gan::GanTrainStats stats;
  gan::train_gan(ds, cfg.gan, rng, gopts, &stats);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, gopts.out_dir / "gan.ckpt"),
                   artifact_path(cfg, gopts.out_dir / "gan_train_log.jsonl")};
  out.metrics = {{"samples_seen", stats.samples_seen},
                 {"prior_images", ds.size()},
                 {"final_g_loss", stats.final_g_loss},
                 {"final_d_loss", stats.final_d_loss}};
  if (!stats.fid_history.empty()) out.metrics["final_fid"] = stats.fid_history.back().second;
  return out;
}

StageOutput stage_train_encoder(const ExperimentConfig& cfg, const StageOptions& opts) {
  const fs::path gan_path =
      need_artifact(cfg, fs::path("checkpoints") / "gan.ckpt", "train-gan", "train-encoder");
  const prior::PriorDataset ds = need_prior(cfg, "train-encoder");
  const ckpt::Checkpoint gan_ck = ckpt::load_checkpoint(gan_path.string());
  Rng rng = stage_rng(cfg, "train-encoder");
  enc::EncTrainOptions eopts;
  eopts.out_dir = cfg.paths.out_dir / "checkpoints";
  eopts.log_sink = opts.log_sink;
  enc::EncTrainStats stats;
  enc::train_encoder(ds, gan_ck, cfg.encoder, rng, eopts, &stats);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, eopts.out_dir / "encoder.ckpt"),
                   artifact_path(cfg, eopts.out_dir / "encoder_train_log.jsonl")};
  out.metrics = {{"samples_seen", stats.samples_seen},
                 {"initial_loss", stats.initial_loss},
                 {"final_loss", stats.final_loss},
                 {"generator_hash_before", hex64(stats.generator_hash_before)},
                 {"generator_hash_after", hex64(stats.generator_hash_after)},
                 {"generator_frozen",
                  stats.generator_hash_before == stats.generator_hash_after}};
  return out;
}

StageOutput stage_pretrain_autoencoder(const ExperimentConfig& cfg, const StageOptions& opts,
                                       bool variational) {
  const char* stage = variational ? "pretrain-vae" : "pretrain-ae";
  const char* name = variational ? "vae" : "ae";
  const prior::PriorDataset ds = need_prior(cfg, stage);
  Rng rng = stage_rng(cfg, stage);
  enc::EncTrainOptions eopts;
  eopts.out_dir = cfg.paths.out_dir / "checkpoints";
  eopts.log_sink = opts.log_sink;
  enc::EncTrainStats stats;
  enc::train_autoencoder(ds, variational, cfg.encoder, rng, eopts, &stats);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, eopts.out_dir / (std::string(name) + ".ckpt")),
                   artifact_path(cfg, eopts.out_dir / (std::string(name) + "_train_log.jsonl"))};
  out.metrics = {{"samples_seen", stats.samples_seen},
                 {"initial_loss", stats.initial_loss},
                 {"final_loss", stats.final_loss}};
  return out;
}

StageOutput stage_augment_interp(const ExperimentConfig& cfg, const StageOptions&) {
  if (cfg.facerec.interp_pool <= 0)
    throw ConfigError("augment-interp: facerec.interp_pool must be > 0 to build a pool");
  const fs::path enc_path = need_artifact(cfg, fs::path("checkpoints") / "encoder.ckpt",
                                          "train-encoder", "augment-interp");
  const fs::path gan_path =
      need_artifact(cfg, fs::path("checkpoints") / "gan.ckpt", "train-gan", "augment-interp");
  const fr::IdentityDataset ds = labeled_subset(cfg);
  enc::EncoderParams encoder = enc::load_encoder(ckpt::load_checkpoint(enc_path.string()));
  gan::Generator generator = gan::load_generator(ckpt::load_checkpoint(gan_path.string()));
  Rng rng = stage_rng(cfg, "augment-interp");
  const std::vector<fr::InterpSample> pool =
      fr::build_interpolation_pool(ds, encoder, generator, cfg.facerec.interp_pool, rng);
  const fs::path file = cfg.paths.out_dir / "interp" / "pool.ckpt";
  save_interp_pool(file, pool);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, file)};
  out.metrics = {{"samples", pool.size()}, {"identities", ds.identity_count()}};
  return out;
}

StageOutput stage_train_facerec(const ExperimentConfig& cfg, const StageOptions& opts) {
  const fr::IdentityDataset ds = labeled_subset(cfg);
  Rng rng = stage_rng(cfg, "train-facerec");
  fr::BackboneParams backbone = [&] {
    if (cfg.facerec.init == "scratch") return fr::BackboneParams(cfg.backbone, rng);
    const char* producer = cfg.facerec.init == "encoder" ? "train-encoder"
                           : cfg.facerec.init == "ae"    ? "pretrain-ae"
                                                         : "pretrain-vae";
    const fs::path ck_path = need_artifact(
        cfg, fs::path("checkpoints") / (cfg.facerec.init + ".ckpt"), producer, "train-facerec");
    return fr::transfer_weights(ckpt::load_checkpoint(ck_path.string()), cfg.backbone, rng);
  }();

  std::vector<fr::InterpSample> pool;
  if (cfg.facerec.interp_pool > 0)
    pool = load_interp_pool(
        need_artifact(cfg, fs::path("interp") / "pool.ckpt", "augment-interp", "train-facerec"));

  fr::FinetuneOptions fopts;
  fopts.out_dir = cfg.paths.out_dir / "checkpoints";
  fopts.log_sink = opts.log_sink;
  fr::FinetuneStats stats;
  fr::finetune(ds, backbone, cfg.finetune, fr::loss_kind_from_string(cfg.facerec.loss), rng,
               pool.empty() ? nullptr : &pool, fopts, &stats);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, fopts.out_dir / "facerec.ckpt"),
                   artifact_path(cfg, fopts.out_dir / "finetune_log.jsonl")};
  out.metrics = {{"init", cfg.facerec.init},
                 {"identities", ds.identity_count()},
                 {"images", ds.size()},
                 {"interp_samples", pool.size()},
                 {"samples_seen", stats.samples_seen}};
  if (!stats.epoch_accuracy.empty()) out.metrics["final_train_accuracy"] = stats.epoch_accuracy.back();
  if (!stats.epoch_loss.empty()) out.metrics["final_train_loss"] = stats.epoch_loss.back();
  return out;
}

StageOutput stage_build_pairs(const ExperimentConfig& cfg, const StageOptions&) {
  const fs::path source =
      cfg.paths.eval_data.empty() ? cfg.paths.labeled_data : cfg.paths.eval_data;
  const fr::IdentityDataset ds =
      load_identities(source, cfg.paths.eval_data.empty() ? "labeled_data" : "eval_data");
  const eval::GroupedPeople grouped = group_people(ds);
  Rng rng = stage_rng(cfg, "build-pairs");

  eval::PairProtocol protocol;
  std::string mining = "none";
  if (cfg.protocol.kind == "rbweb") {
    protocol = eval::build_rbweb_protocol(grouped, cfg.protocol.n_people_per_group,
                                          cfg.protocol.pos_per_person, rng,
                                          cfg.protocol.reuse_first_image);
  } else {
    eval::SimilarityFn similarity;
    if (cfg.protocol.mining == "model") {
      const fs::path ck_path = need_artifact(cfg, fs::path("checkpoints") / "facerec.ckpt",
                                             "train-facerec", "build-pairs");
      auto backbone =
          std::make_shared<fr::BackboneParams>(fr::load_backbone(ckpt::load_checkpoint(ck_path.string())));
      auto cache = std::make_shared<std::unordered_map<std::string, Tensor>>();
      similarity = [backbone, cache](const std::string& a, const std::string& b) {
        auto emb = [&](const std::string& ref) -> const Tensor& {
          auto it = cache->find(ref);
          if (it == cache->end())
            it = cache->emplace(ref, fr::embed(*backbone, load_image(ref))).first;
          return it->second;
        };
        const Tensor& ea = emb(a);
        const Tensor& eb = emb(b);
        double dot = 0, na = 0, nb = 0;
        for (int64_t i = 0; i < ea.numel(); ++i) {
          dot += ea.d[static_cast<size_t>(i)] * eb.d[static_cast<size_t>(i)];
          na += ea.d[static_cast<size_t>(i)] * ea.d[static_cast<size_t>(i)];
          nb += eb.d[static_cast<size_t>(i)] * eb.d[static_cast<size_t>(i)];
        }
        return dot / std::sqrt(na * nb);
      };
      mining = "model";
    } else {
      // Deterministic stand-in: mining degrades to seeded uniform sampling.
      const uint64_t mine_seed = derive_seed(cfg.seed, "pair-mining");
      similarity = [mine_seed](const std::string& a, const std::string& b) {
        const auto& [lo, hi] = std::minmax(a, b);
        return static_cast<double>(fnv1a64(lo + '\x1f' + hi, mine_seed)) * 0x1.0p-64;
      };
      mining = "seeded";
    }
    protocol = eval::build_rfw_style_protocol(grouped, cfg.protocol.n_pairs, similarity, rng,
                                              cfg.protocol.candidate_factor);
  }
  protocol.seed = derive_seed(cfg.seed, "stage:build-pairs");

  const fs::path dir = cfg.paths.out_dir / "pairs";
  eval::save_protocol(protocol, dir);
  StageOutput out;
  for (const auto& entry : fs::directory_iterator(dir))
    out.artifacts.push_back(artifact_path(cfg, entry.path()));
  std::sort(out.artifacts.begin(), out.artifacts.end());
  int64_t positives = 0;
  for (const auto& g : protocol.groups) positives += static_cast<int64_t>(g.positives.size());
  out.metrics = {{"kind", cfg.protocol.kind},
                 {"mining", mining},
                 {"groups", protocol.groups.size()},
                 {"positives", positives},
                 {"pairs", protocol.total_pairs()}};
  return out;
}

StageOutput stage_embed(const ExperimentConfig& cfg, const StageOptions&) {
  const fs::path pairs_dir = cfg.paths.out_dir / "pairs";
  need_artifact(cfg, fs::path("pairs") / "pairs.tsv", "build-pairs", "embed");
  const fs::path ck_path =
      need_artifact(cfg, fs::path("checkpoints") / "facerec.ckpt", "train-facerec", "embed");
  const eval::PairProtocol protocol = eval::load_protocol(pairs_dir);
  fr::BackboneParams backbone = fr::load_backbone(ckpt::load_checkpoint(ck_path.string()));

  std::set<std::string> refs;
  for (const auto& g : protocol.groups) {
    for (const auto& [a, b] : g.positives) {
      refs.insert(a);
      refs.insert(b);
    }
    for (const auto& [a, b] : g.negatives) {
      refs.insert(a);
      refs.insert(b);
    }
    refs.insert(g.negative_representatives.begin(), g.negative_representatives.end());
  }
  eval::EmbeddingTable table;
  for (const auto& ref : refs) table.add(ref, fr::embed(backbone, load_image(ref)));

  const fs::path file = cache_dir(cfg) / "embeddings.emb";
  eval::write_emb1(file, table);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, file)};
  out.metrics = {{"images", table.count()}, {"dim", table.dim()}};
  return out;
}

StageOutput stage_evaluate(const ExperimentConfig& cfg, const StageOptions&) {
  need_artifact(cfg, fs::path("pairs") / "pairs.tsv", "build-pairs", "evaluate");
  const fs::path emb_file = cache_dir(cfg) / "embeddings.emb";
  if (!fs::exists(emb_file))
    throw PrerequisiteError("evaluate: missing embedding cache '" + emb_file.string() +
                            "' — run stage 'embed' first");
  const eval::PairProtocol protocol = eval::load_protocol(cfg.paths.out_dir / "pairs");
  const eval::EmbeddingTable table = eval::read_emb1(emb_file);
  const eval::ScoreMap scores = eval::score_pairs(table, protocol);

  std::map<std::string, eval::GroupMetrics> per_group;
  const uint64_t fold_seed = derive_seed(cfg.seed, "evaluate:folds");
  for (const auto& [gid, gs] : scores) {
    eval::GroupMetrics m;
    const eval::LfwAccuracy acc =
        eval::lfw_accuracy(gs.pos, gs.neg, cfg.protocol.folds, fold_seed);
    m.accuracy = acc.cv_accuracy;
    m.accuracy_best_threshold = acc.best_threshold_accuracy;
    for (double target : cfg.protocol.fpr_targets)
      m.tpr_at_fpr.emplace_back(target, eval::tpr_at_fpr(gs.pos, gs.neg, target));
    per_group[gid] = std::move(m);
  }
  const eval::VerificationReport rep = eval::report(per_group);
  const fs::path csv = cfg.paths.out_dir / "reports" / "report.csv";
  const fs::path js = cfg.paths.out_dir / "reports" / "report.json";
  eval::save_report(rep, csv, js);
  StageOutput out;
  out.artifacts = {artifact_path(cfg, csv), artifact_path(cfg, js)};
  out.metrics = {{"groups", per_group.size()}};
  if (rep.avg) out.metrics["avg_accuracy"] = *rep.avg;
  if (rep.stddev) out.metrics["std_accuracy"] = *rep.stddev;
  return out;
}

StageOutput stage_fid(const ExperimentConfig& cfg, const StageOptions&) {
  const fs::path gan_path =
      need_artifact(cfg, fs::path("checkpoints") / "gan.ckpt", "train-gan", "fid");
  const prior::PriorDataset ds = need_prior(cfg, "fid");
  Rng rng = stage_rng(cfg, "fid");
  const gan::Generator generator = gan::load_generator(ckpt::load_checkpoint(gan_path.string()));
  const int64_t n = std::min<int64_t>(cfg.fid_samples, static_cast<int64_t>(ds.size()));
  if (n < 2) throw ConfigError("fid: need at least 2 images per side");

  Rng sample_rng(derive_seed(cfg.seed, "fid:samples"));
  const Tensor fake = gan::sample_faces(generator, n, sample_rng);
  const int res = fake.dim(2);
  std::vector<Image8> real;
  real.reserve(static_cast<size_t>(n));
  const std::vector<int64_t> perm = rng.permutation(static_cast<int64_t>(ds.size()));
  for (int64_t i = 0; i < n; ++i) {
    Image8 img = ds.load(static_cast<size_t>(perm[static_cast<size_t>(i)]));
    if (img.h != res || img.w != res) img = resize_image(img, res, res);
    real.push_back(std::move(img));
  }

  // Same frozen feature net as the in-training FID history, so the two are
  // directly comparable.
  const metrics::FeaturePyramid net(derive_seed(0x66696421, "gan.fid"));
  metrics::FidDiag diag;
  const double value = metrics::fid(net, images_to_batch(real), fake, &diag);

  const json j{{"fid", value},
               {"samples_per_side", n},
               {"resolution", res},
               {"covariance_jitter", diag.jitter_applied}};
  const fs::path file = cfg.paths.out_dir / "reports" / "fid.json";
  fs::create_directories(file.parent_path());
  ckpt::atomic_write_file(file.string(), j.dump(2) + "\n");
  StageOutput out;
  out.artifacts = {artifact_path(cfg, file)};
  out.metrics = j;
  return out;
}

StageOutput dispatch_stage(const std::string& stage, const ExperimentConfig& cfg,
                           const StageOptions& opts) {
  if (stage == "prep") return stage_prep(cfg, opts);
  if (stage == "train-gan") return stage_train_gan(cfg, opts);
  if (stage == "train-encoder") return stage_train_encoder(cfg, opts);
  if (stage == "pretrain-ae") return stage_pretrain_autoencoder(cfg, opts, false);
  if (stage == "pretrain-vae") return stage_pretrain_autoencoder(cfg, opts, true);
  if (stage == "augment-interp") return stage_augment_interp(cfg, opts);
  if (stage == "train-facerec") return stage_train_facerec(cfg, opts);
  if (stage == "build-pairs") return stage_build_pairs(cfg, opts);
  if (stage == "embed") return stage_embed(cfg, opts);
  if (stage == "evaluate") return stage_evaluate(cfg, opts);
  if (stage == "fid") return stage_fid(cfg, opts);
  throw ConfigError("unknown stage '" + stage + "'");
}

}  // namespace

StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg,
                      const StageOptions& opts) {
  if (!is_stage_name(stage)) {
    std::string names;
    for (const char* s : kStageNames) names += std::string(names.empty() ? "" : ", ") + s;
    throw ConfigError("unknown stage '" + stage + "' (expected one of: " + names + ")");
  }
  cfg.validate();
  fs::create_directories(cfg.paths.out_dir);
  StageLock lock(cfg.paths.out_dir);

  const std::string started = utc_now_iso();
  const auto t0 = std::chrono::steady_clock::now();
  StageOutput out = dispatch_stage(stage, cfg, opts);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  RunRecord rec;
  rec.stage = stage;
  rec.config_hash = config_hash(cfg);
  rec.seed = cfg.seed;
  rec.build_id = build_id();
  rec.started_at = started;
  rec.wall_seconds = wall;
  rec.artifacts = out.artifacts;
  rec.metrics_json = out.metrics.dump();
  append_run_record(cfg.paths.out_dir / "run_records.jsonl", rec);

  StageResult res;
  res.stage = stage;
  res.artifacts = std::move(out.artifacts);
  res.wall_seconds = wall;
  res.metrics_json = rec.metrics_json;
  return res;
}

// ---------------------------------------------------------------------------
// Interpolation-pool persistence
// ---------------------------------------------------------------------------

void save_interp_pool(const std::filesystem::path& file,
                      const std::vector<fr::InterpSample>& pool) {
  if (pool.empty()) throw ConfigError("save_interp_pool: pool is empty");
  std::vector<Image8> images;
  images.reserve(pool.size());
  json labels = json::array();
  for (const fr::InterpSample& s : pool) {
    images.push_back(s.image);
    labels.push_back({{"index_a", s.label.index_a},
                      {"index_b", s.label.index_b},
                      {"weight_a", s.label.weight_a},
                      {"weight_b", s.label.weight_b},
                      {"lambda", s.lambda}});
  }
  ckpt::Checkpoint ck;
  ck.stage = "interp";
  ck.tensors.emplace_back("images", images_to_batch(images));  // throws on mixed sizes
  ck.samples_seen = static_cast<int64_t>(pool.size());
  ck.extra_json = json{{"labels", labels}}.dump();
  ckpt::save_checkpoint(file.string(), ck);
}

std::vector<fr::InterpSample> load_interp_pool(const std::filesystem::path& file) {
  const ckpt::Checkpoint ck = ckpt::load_checkpoint(file.string());
  if (ck.stage != "interp")
    throw PrerequisiteError("load_interp_pool: expected a stage-interp checkpoint, got '" +
                            ck.stage + "'");
  const Tensor* images = ck.find("images");
  if (images == nullptr || images->shape.size() != 4)
    throw PrerequisiteError("load_interp_pool: checkpoint lacks an [N,3,H,W] 'images' tensor");
  json extra;
  try {
    extra = json::parse(ck.extra_json);
  } catch (const json::exception& e) {
    throw PrerequisiteError(std::string("load_interp_pool: bad label block: ") + e.what());
  }
  if (!extra.contains("labels") || !extra["labels"].is_array() ||
      extra["labels"].size() != static_cast<size_t>(images->shape[0]))
    throw PrerequisiteError("load_interp_pool: label count does not match image count");

  std::vector<Image8> decoded = batch_to_images(*images);
  std::vector<fr::InterpSample> pool(decoded.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    const json& l = extra["labels"][i];
    try {
      pool[i].label.index_a = l.at("index_a").get<int64_t>();
      pool[i].label.index_b = l.at("index_b").get<int64_t>();
      pool[i].label.weight_a = l.at("weight_a").get<double>();
      pool[i].label.weight_b = l.at("weight_b").get<double>();
      pool[i].lambda = l.at("lambda").get<double>();
    } catch (const json::exception& e) {
      throw PrerequisiteError(std::string("load_interp_pool: bad label block: ") + e.what());
    }
    pool[i].image = std::move(decoded[i]);
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

namespace {

std::string fpr_label(double target) {
  std::ostringstream os;
  os << "tpr@" << target;
  return os.str();
}

}  // namespace

std::vector<DeltaRow> compare_runs(const eval::VerificationReport& baseline,
                                   const eval::VerificationReport& candidate) {
  auto group_list = [](const eval::VerificationReport& r) {
    std::string s;
    for (const auto& [gid, m] : r.per_group) s += (s.empty() ? "" : ", ") + gid;
    return s.empty() ? std::string("<none>") : s;
  };
  {
    std::vector<std::string> a, b;
    for (const auto& [gid, m] : baseline.per_group) a.push_back(gid);
    for (const auto& [gid, m] : candidate.per_group) b.push_back(gid);
    if (a != b)
      throw std::invalid_argument("compare_runs: reports cover different groups (baseline: " +
                                  group_list(baseline) + "; candidate: " + group_list(candidate) +
                                  ")");
  }

  std::vector<DeltaRow> rows;
  auto push = [&rows](const std::string& group, const std::string& metric, double base,
                      double cand) {
    rows.push_back(DeltaRow{group, metric, base, cand, cand - base});
  };
  auto mismatch = [](const std::string& group, const std::string& metric) {
    return std::invalid_argument("compare_runs: metric '" + metric + "' of group '" + group +
                                 "' is present in only one report");
  };

  for (const auto& [gid, base] : baseline.per_group) {
    const eval::GroupMetrics& cand = candidate.per_group.at(gid);
    if (base.accuracy.has_value() != cand.accuracy.has_value())
      throw mismatch(gid, "accuracy_cv");
    if (base.accuracy) push(gid, "accuracy_cv", *base.accuracy, *cand.accuracy);
    if (base.accuracy_best_threshold.has_value() != cand.accuracy_best_threshold.has_value())
      throw mismatch(gid, "accuracy_best_threshold");
    if (base.accuracy_best_threshold)
      push(gid, "accuracy_best_threshold", *base.accuracy_best_threshold,
           *cand.accuracy_best_threshold);
    if (base.tpr_at_fpr.size() != cand.tpr_at_fpr.size()) throw mismatch(gid, "tpr_at_fpr");
    for (size_t i = 0; i < base.tpr_at_fpr.size(); ++i) {
      if (base.tpr_at_fpr[i].first != cand.tpr_at_fpr[i].first)
        throw std::invalid_argument("compare_runs: group '" + gid +
                                    "' lists different fpr targets");
      push(gid, fpr_label(base.tpr_at_fpr[i].first), base.tpr_at_fpr[i].second.tpr,
           cand.tpr_at_fpr[i].second.tpr);
    }
  }
  if (baseline.avg.has_value() != candidate.avg.has_value()) throw mismatch("_all", "avg");
  if (baseline.avg) push("_all", "avg", *baseline.avg, *candidate.avg);
  if (baseline.stddev.has_value() != candidate.stddev.has_value()) throw mismatch("_all", "std");
  if (baseline.stddev) push("_all", "std", *baseline.stddev, *candidate.stddev);
  return rows;
}

std::string render_delta_table(const std::vector<DeltaRow>& rows) {
  auto num = [](double v, bool sign) {
    char buf[64];
    std::snprintf(buf, sizeof buf, sign ? "%+.2f" : "%.2f", v);
    return std::string(buf);
  };
  std::vector<std::array<std::string, 5>> cells{{"group", "metric", "baseline", "candidate",
                                                 "delta"}};
  for (const auto& r : rows)
    cells.push_back({r.group, r.metric, num(r.baseline, false), num(r.candidate, false),
                     num(r.delta, true)});
  std::array<size_t, 5> width{};
  for (const auto& row : cells)
    for (size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (size_t c = 0; c < row.size(); ++c) {
      if (c > 0) os << "  ";
      // Text columns left-aligned, numbers right-aligned.
      const bool left = c < 2;
      const int pad = static_cast<int>(width[c] - row[c].size());
      if (!left) os << std::string(static_cast<size_t>(pad), ' ');
      os << row[c];
      if (left && &row != &cells.back()) os << std::string(static_cast<size_t>(pad), ' ');
    }
    // Trim trailing spaces the left-aligned padding may have added.
    std::string line = os.str();
    os.str(std::string());
    while (!line.empty() && line.back() == ' ') line.pop_back();
    os << line << '\n';
  }
  return os.str();
}

eval::VerificationReport load_report_json(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IngestError("cannot read report '" + file.string() + "'");
  std::ostringstream text;
  text << in.rdbuf();
  json j;
  try {
    j = json::parse(text.str());
  } catch (const json::exception& e) {
    throw IngestError("report '" + file.string() + "' is not JSON: " + e.what());
  }

  std::map<std::string, eval::GroupMetrics> per_group;
  try {
    for (const auto& [gid, g] : j.value("groups", json::object()).items()) {
      eval::GroupMetrics m;
      if (g.contains("accuracy_cv")) m.accuracy = g["accuracy_cv"].get<double>();
      if (g.contains("accuracy_best_threshold"))
        m.accuracy_best_threshold = g["accuracy_best_threshold"].get<double>();
      for (const auto& t : g.value("tpr_at_fpr", json::array())) {
        eval::TprResult r;
        r.tpr = t.at("tpr").get<double>();
        // +inf thresholds serialize as null.
        r.threshold = t.at("threshold").is_number()
                          ? t["threshold"].get<double>()
                          : std::numeric_limits<double>::infinity();
        r.mode = t.value("mode", std::string("exact"));
        r.resolution_warning = t.value("warning", false);
        m.tpr_at_fpr.emplace_back(t.at("target").get<double>(), r);
      }
      per_group[gid] = std::move(m);
    }
  } catch (const json::exception& e) {
    throw IngestError("report '" + file.string() + "': " + e.what());
  }
  eval::VerificationReport rep = eval::report(per_group);
  // Prefer the stored aggregates: they cover aggregate-only files and keep
  // the loader a faithful inverse.
  if (j.contains("avg")) rep.avg = j["avg"].get<double>();
  if (j.contains("std")) rep.stddev = j["std"].get<double>();
  return rep;
}

}  // namespace frboost::run
