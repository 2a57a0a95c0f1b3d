#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "frboost/facerec.hpp"
#include "frboost/rng.hpp"
#include "frboost/tensor.hpp"

namespace frboost::eval {

// ---------------------------------------------------------------------------
// Verification protocols.
//
// Scores are cosine SIMILARITY everywhere (higher = same person), thresholded
// with >=. Curve rates are fractions in [0, 1]; reported accuracies and TPRs
// are percentages.
// ---------------------------------------------------------------------------

// One person's images, keyed by opaque image refs (file paths or cache ids).
struct PersonImages {
  std::string person_id;
  std::vector<std::string> images;
};

// group id -> decided people of that group. std::map keeps group iteration
// order deterministic.
using GroupedPeople = std::map<std::string, std::vector<PersonImages>>;

// Pairs of one group. Negatives are either explicit pairs or an implicit
// exhaustive descriptor: one representative image per person, expanding to
// all N(N-1)/2 cross-person pairs without ever materializing the list.
struct GroupPairs {
  std::string group_id;
  std::vector<std::pair<std::string, std::string>> positives;
  std::vector<std::pair<std::string, std::string>> negatives;  // explicit form
  std::vector<std::string> negative_representatives;           // implicit form

  bool has_implicit_negatives() const { return !negative_representatives.empty(); }
  // Explicit count, or N(N-1)/2 over the representatives.
  int64_t negative_count() const;
};

struct PairProtocol {
  std::vector<GroupPairs> groups;
  uint64_t seed = 0;

  const GroupPairs* find_group(const std::string& group_id) const;
  int64_t total_pairs() const;  // positives + negatives over all groups
};

// ---------------------------------------------------------------------------
// Consensus group assignment.
// ---------------------------------------------------------------------------

struct ConsensusPolicy {
  int min_photos = 14;   // fewer -> undecided without classifying anything
  int max_sampled = 20;  // classify at most this many seeded-random photos
  double majority = 0.8; // a group needs >= this fraction of the votes
};

// Vote-level decision rule: the modal group if it holds >= `majority` of the
// votes, otherwise nullopt. Empty vote list -> nullopt.
std::optional<int> consensus_from_votes(const std::vector<int>& votes, double majority = 0.8);

// Full procedure: sample min(max_sampled, count) distinct photos (permutation
// prefix), classify each, apply the vote rule. Deterministic under a pinned
// rng state.
template <class Img, class Classifier>
std::optional<int> consensus_group(const std::vector<Img>& photos, Classifier&& classify, Rng& rng,
                                   const ConsensusPolicy& policy = {}) {
  if (static_cast<int64_t>(photos.size()) < policy.min_photos) return std::nullopt;
  const int64_t n = std::min<int64_t>(policy.max_sampled, static_cast<int64_t>(photos.size()));
  std::vector<int64_t> order = rng.permutation(static_cast<int64_t>(photos.size()));
  std::vector<int> votes;
  votes.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) votes.push_back(classify(photos[static_cast<size_t>(order[i])]));
  return consensus_from_votes(votes, policy.majority);
}

// ---------------------------------------------------------------------------
// Protocol builders.
// ---------------------------------------------------------------------------

// RB-WebFace style: per group, select n_people_per_group people (each needs
// >= 2 images), draw pos_per_person duplicate-free positive pairs per person,
// and leave negatives implicit as one seeded-random representative image per
// selected person. With reuse_first_image = false (default) no image appears
// twice as the first element of a person's positive pairs.
// Throws ProtocolError (naming the group) when a group cannot supply the
// requested people or a person cannot supply the requested pairs.
PairProtocol build_rbweb_protocol(const GroupedPeople& grouped, int n_people_per_group,
                                  int pos_per_person, Rng& rng, bool reuse_first_image = false);

// Similarity between two image refs, used to mine hard negatives. May be a
// stub (e.g. seeded noise), in which case mining degrades to uniform sampling.
using SimilarityFn = std::function<double(const std::string&, const std::string&)>;

// RFW style: per group, n_pairs positives and n_pairs explicit negatives; the
// negatives are the highest-similarity cross-person pairs among a sampled
// candidate set of candidate_factor * n_pairs pairs. No pair is emitted twice.
// Throws ProtocolError when a group lacks the data to fill either side.
PairProtocol build_rfw_style_protocol(const GroupedPeople& grouped, int n_pairs,
                                      const SimilarityFn& similarity, Rng& rng,
                                      int candidate_factor = 8);

// ---------------------------------------------------------------------------
// Protocol files.
//
// Explicit pairs: UTF-8 text, one pair per line,
//   <path_a>\t<path_b>\t<label 0|1>\t<group_id>
// Implicit negatives: JSON {group_id, representative_images, seed}, one file
// per group named implicit_<group>.json next to pairs.tsv.
// ---------------------------------------------------------------------------

void write_pairs_tsv(const PairProtocol& protocol, const std::filesystem::path& file);
PairProtocol read_pairs_tsv(const std::filesystem::path& file);  // explicit pairs only

void save_protocol(const PairProtocol& protocol, const std::filesystem::path& dir);
PairProtocol load_protocol(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Embedding cache (EMB1).
//
// Binary layout: 16-byte header — magic "EMB1", count u32 LE, dim u32 LE,
// reserved u32 — then count*dim float32 LE row-major, then count
// null-terminated UTF-8 image ids. The only 32-bit floats in the project.
// ---------------------------------------------------------------------------

struct EmbeddingTable {
  std::vector<std::string> ids;
  Tensor mat;  // [count, dim]
  std::unordered_map<std::string, int64_t> index;

  int64_t dim() const { return mat.empty() ? 0 : mat.shape[1]; }
  int64_t count() const { return static_cast<int64_t>(ids.size()); }
  void add(std::string id, const Tensor& embedding);  // [dim] row append
  const double* row(const std::string& id) const;     // nullptr when unknown
};

void write_emb1(const std::filesystem::path& file, const EmbeddingTable& table);
EmbeddingTable read_emb1(const std::filesystem::path& file);  // throws IngestError

// ---------------------------------------------------------------------------
// Pair scoring.
// ---------------------------------------------------------------------------

struct GroupScores {
  std::string group_id;
  std::vector<double> pos;
  std::vector<double> neg;
};

using ScoreMap = std::map<std::string, GroupScores>;

// Maps an image ref to its embedding [d]. Exceptions are rethrown as
// ScoringError naming the pair being scored.
using EmbedFn = std::function<Tensor(const std::string& image_ref)>;

// Cosine similarity per pair, clamped to [-1, 1]. Each image is embedded once
// and cached; implicit negative sets are scored in streaming chunks of
// chunk_size pairs in lexicographic (i, j) order, bit-identical to a
// monolithic pass.
ScoreMap score_pairs(const EmbedFn& embed, const PairProtocol& protocol, int chunk_size = 4096);
// Embeds by loading each image ref from disk through the backbone.
ScoreMap score_pairs(fr::BackboneParams& backbone, const PairProtocol& protocol,
                     int chunk_size = 4096);
// Looks embeddings up in a precomputed table; unknown ids -> ScoringError.
ScoreMap score_pairs(const EmbeddingTable& table, const PairProtocol& protocol,
                     int chunk_size = 4096);

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

struct LfwAccuracy {
  double cv_accuracy = 0;              // mean held-out accuracy, percent
  double best_threshold_accuracy = 0;  // best single threshold on all pairs
  double best_threshold = 0;
  int folds = 0;
};

// LFW-like k-fold cross-validation: per fold, the threshold (and comparison
// direction) maximizing accuracy on the other folds is applied to the
// held-out fold. Fold blocks are contiguous after a seeded shuffle whose seed
// depends only on the score vector's content, so swapping pos/neg labels
// leaves both reported accuracies exactly unchanged (the rule direction
// flips). Throws std::invalid_argument on empty inputs, folds < 2, or a class
// smaller than the fold count.
LfwAccuracy lfw_accuracy(const std::vector<double>& pos_scores,
                         const std::vector<double>& neg_scores, int folds = 10,
                         uint64_t seed = 0);

struct RocCurve {
  std::vector<double> thresholds;  // ascending
  std::vector<double> tpr;         // fraction of positives >= threshold
  std::vector<double> fpr;         // fraction of negatives >= threshold
  int64_t n_pos = 0;
  int64_t n_neg = 0;
};

// Streaming (TPR, FPR) accumulation over a fixed ascending threshold grid;
// scores can arrive in any order and any chunking. Counting matches a direct
// per-threshold `score >= t` comparison bit-exactly.
class RocAccumulator {
 public:
  RocAccumulator(double range_lo, double range_hi, int steps);

  void add(bool positive, double score);
  void add_positives(std::span<const double> scores);
  void add_negatives(std::span<const double> scores);

  RocCurve curve() const;  // throws std::invalid_argument if a side is empty

 private:
  std::vector<double> thresholds_;
  std::vector<int64_t> pos_hist_, neg_hist_;  // bin = #thresholds <= score
  int64_t n_pos_ = 0, n_neg_ = 0;
};

// The paper-faithful sweep: 66 steps over [0.1, 0.75] is a 0.01 grid.
RocCurve roc_sweep(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores,
                   double range_lo = 0.1, double range_hi = 0.75, int steps = 66);

struct TprResult {
  double tpr = 0;        // percent
  double threshold = 0;  // +inf when no admissible threshold exists
  std::string mode;      // "exact" or "sweep"
  bool resolution_warning = false;  // negatives < 1/target: target below resolution
};

// Exact sort-based rule: TPR at the smallest candidate threshold (drawn from
// the scores themselves) whose FPR <= target. The default for reports.
TprResult tpr_at_fpr(const std::vector<double>& pos_scores, const std::vector<double>& neg_scores,
                     double fpr_target);
// Same rule over an already-swept curve.
TprResult tpr_at_fpr(const RocCurve& curve, double fpr_target);

// ---------------------------------------------------------------------------
// Reports.
// ---------------------------------------------------------------------------

struct GroupMetrics {
  std::optional<double> accuracy;                 // cross-validated, percent
  std::optional<double> accuracy_best_threshold;  // percent
  std::vector<std::pair<double, TprResult>> tpr_at_fpr;  // (target, result)
};

struct VerificationReport {
  std::map<std::string, GroupMetrics> per_group;
  // Mean and sample (n-1) standard deviation over the groups that carry an
  // accuracy; the sample estimator is what reproduces the published tables.
  std::optional<double> avg;
  std::optional<double> stddev;
};

VerificationReport report(const std::map<std::string, GroupMetrics>& per_group);

// CSV with columns group,metric,value,mode (aggregate rows use group "_all");
// the JSON mirror carries the same numbers untruncated.
std::string report_csv(const VerificationReport& rep);
std::string report_json(const VerificationReport& rep);
void save_report(const VerificationReport& rep, const std::filesystem::path& csv_file,
                 const std::filesystem::path& json_file);

}  // namespace frboost::eval
