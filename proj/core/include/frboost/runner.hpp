#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "frboost/encoder.hpp"
#include "frboost/evalbench.hpp"
#include "frboost/facerec.hpp"
#include "frboost/gan.hpp"
#include "frboost/prior_data.hpp"

namespace frboost::run {

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

// Where an experiment reads its inputs and writes its artifacts. Everything a
// stage emits lands under out_dir:
//   prior/          sharded unlabeled dataset (stage prep)
//   checkpoints/    gan.ckpt, encoder.ckpt, ae.ckpt, vae.ckpt, facerec.ckpt
//   interp/         serialized interpolation pool (stage augment-interp)
//   pairs/          verification protocol (stage build-pairs)
//   cache/          embedding cache (unless FRBOOST_CACHE overrides the root)
//   reports/        report.csv/.json, fid.json
//   run_records.jsonl  append-only log of completed stages
struct PathsConfig {
  std::filesystem::path out_dir = "runs/exp";
  std::filesystem::path media_manifest;  // input media list for stage prep
  std::filesystem::path labeled_data;    // identity dataset: directory or .csv manifest
  std::filesystem::path eval_data;       // held-out identities; empty -> labeled_data
};

// Stage-3 choices that are not part of the backbone/schedule structs.
struct FacerecStageConfig {
  std::string loss = "arcface";  // "arcface" | "sphereface"
  std::string init = "encoder";  // "encoder" | "ae" | "vae" | "scratch"
  double label_fraction = 1.0;   // whole-identity subsample of the labeled set
  int64_t interp_pool = 0;       // interpolated-sample count; 0 disables augment-interp
};

// Verification-protocol construction and scoring parameters.
struct ProtocolConfig {
  std::string kind = "rfw";    // "rfw" | "rbweb"
  int n_pairs = 3000;          // rfw: positives (= mined negatives) per group
  int candidate_factor = 8;    // rfw: negative-mining oversampling factor
  // rfw negative mining: "seeded" scores candidates with a seeded hash
  // (uniform sampling, protocol independent of any trained model — the right
  // choice when comparing runs), "model" scores them with this experiment's
  // facerec checkpoint (hard negatives; requires train-facerec first).
  std::string mining = "seeded";
  int n_people_per_group = 0;  // rbweb: people sampled per group; 0 = all
  int pos_per_person = 5;      // rbweb: positive pairs per person
  bool reuse_first_image = false;  // rbweb: allow one image as first element twice
  int folds = 10;                  // cross-validation folds for accuracy
  std::vector<double> fpr_targets = {1e-3, 1e-4};
};

// The complete description of one experiment. Default-constructed values are
// the full-scale ("paper") settings of every stage; desk() swaps in the
// desk-scale defaults. A config file overlays individual fields on top of the
// preset it names, so a file only states what it changes.
struct ExperimentConfig {
  std::string preset = "paper";  // "desk" | "paper": which default set underlies this config
  uint64_t seed = 0;             // master seed; stages derive named seeds from it
  PathsConfig paths;

  prior::IngestConfig ingest;
  gan::GanConfig gan;
  enc::EncoderConfig encoder;
  fr::BackboneConfig backbone;
  fr::FinetuneSchedule finetune;
  FacerecStageConfig facerec;
  ProtocolConfig protocol;

  double prior_fraction = 1.0;  // seeded subsample of the prior consumed by training stages
  int fid_samples = 2048;       // images per side for the fid stage

  void validate() const;  // throws ConfigError
  static ExperimentConfig desk();
  static ExperimentConfig paper();
};

// Command-line overrides applied after the file is parsed.
struct CliOverrides {
  std::optional<uint64_t> seed;
  std::optional<std::string> preset;
  std::optional<std::filesystem::path> out_dir;
};

// Serializes every field (canonical form: objects with sorted keys).
std::string experiment_to_json(const ExperimentConfig& cfg);

// Parses an experiment from JSON text. Resolution order: the preset named by
// `overrides.preset` (else the file's "preset", else "paper") supplies every
// default; the file's fields overlay it; CLI overrides win last. Unknown keys
// anywhere are a ConfigError, as is structurally invalid JSON.
ExperimentConfig experiment_from_json(const std::string& text, const CliOverrides& overrides = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& file,
                                        const CliOverrides& overrides = {});

// Hash of the resolved semantic content: every field that can change results.
// Key order never matters (canonical serialization), and plumbing that cannot
// change results is excluded — the output directory and the preset label
// (already expanded into concrete fields). Two routes to the same resolved
// fields therefore hash identically.
uint64_t config_hash(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

// One completed stage execution. Serialized as one JSON line appended to
// <out_dir>/run_records.jsonl; the log is never rewritten.
struct RunRecord {
  std::string stage;
  uint64_t config_hash = 0;
  uint64_t seed = 0;
  std::string build_id;    // library version + compiler
  std::string started_at;  // UTC, ISO-8601
  double wall_seconds = 0;
  std::vector<std::string> artifacts;     // paths relative to out_dir when below it
  std::string metrics_json = "{}";        // small stage-summary object
};

std::string build_id();
void append_run_record(const std::filesystem::path& file, const RunRecord& rec);
std::vector<RunRecord> read_run_records(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Stage execution
// ---------------------------------------------------------------------------

inline constexpr const char* kStageNames[] = {
    "prep",           "train-gan", "train-encoder", "pretrain-ae",
    "pretrain-vae",   "augment-interp", "train-facerec", "build-pairs",
    "embed",          "evaluate",  "fid",
};
bool is_stage_name(const std::string& name);

struct StageOptions {
  std::function<void(const std::string&)> log_sink;  // forwarded to trainers (JSONL records)
};

struct StageResult {
  std::string stage;
  std::vector<std::string> artifacts;  // as recorded in the RunRecord
  double wall_seconds = 0;
  std::string metrics_json = "{}";
};

// Guards an experiment directory: one stage at a time. Creation is atomic
// (O_EXCL); a second lock on the same directory is a ConfigError naming the
// holder. Removed on destruction; a crash leaves the file for the operator to
// inspect and delete.
class StageLock {
 public:
  explicit StageLock(const std::filesystem::path& experiment_dir);
  ~StageLock();
  StageLock(const StageLock&) = delete;
  StageLock& operator=(const StageLock&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Root of the embedding cache: $FRBOOST_CACHE when set, else
// <out_dir>/cache; either way keyed by the config hash so experiments never
// collide.
std::filesystem::path cache_dir(const ExperimentConfig& cfg);

// Executes exactly one stage under the experiment lock, appends a RunRecord
// on success and returns it in digest form. Missing upstream artifacts raise
// PrerequisiteError naming the stage that produces them; missing inputs and
// unknown stage names raise ConfigError; training divergence propagates as
// NumericalError.
StageResult run_stage(const std::string& stage, const ExperimentConfig& cfg,
                      const StageOptions& opts = {});

// Interpolation-pool persistence used by augment-interp / train-facerec.
void save_interp_pool(const std::filesystem::path& file,
                      const std::vector<fr::InterpSample>& pool);
std::vector<fr::InterpSample> load_interp_pool(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// Run comparison
// ---------------------------------------------------------------------------

struct DeltaRow {
  std::string group;   // group id, or "_all" for the aggregate rows
  std::string metric;  // e.g. "accuracy_cv", "tpr@0.001", "avg", "std"
  double baseline = 0;
  double candidate = 0;
  double delta = 0;  // candidate - baseline
};

// Per-group metric deltas plus the aggregate rows. The reports must agree on
// group set and on which metrics are present; a mismatch is an
// std::invalid_argument.
std::vector<DeltaRow> compare_runs(const eval::VerificationReport& baseline,
                                   const eval::VerificationReport& candidate);
// Fixed-width table; deltas rendered with an explicit sign ("+1.00").
std::string render_delta_table(const std::vector<DeltaRow>& rows);

// Reads a report back from its JSON artifact (inverse of eval::save_report's
// JSON half).
eval::VerificationReport load_report_json(const std::filesystem::path& file);

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

// The frboost command line: `frboost <stage> --config <path> [--seed N]
// [--preset desk|paper] [--out DIR]` plus `compare --baseline A --candidate
// B`. `args` excludes argv[0]. Returns the process exit code: 0 success,
// 2 config error, 3 prerequisite error, 4 numerical abort, 1 anything else.
int run_cli(const std::vector<std::string>& args);

}  // namespace frboost::run
