#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "frboost/errors.hpp"
#include "frboost/evalbench.hpp"
#include "frboost/image.hpp"
#include "frboost/rng.hpp"
#include "frboost/runner.hpp"
#include "support/synthetic_faces.hpp"

using namespace frboost;
using namespace frboost::run;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("frboost_run_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(bool(in));
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// A face-image folder plus the media manifest pointing at it (prep input).
fs::path write_media(const fs::path& dir, int identities, int photos, int size) {
  Rng rng(7);
  std::vector<uint64_t> ids;
  for (int i = 0; i < identities; ++i) ids.push_back(500 + static_cast<uint64_t>(i));
  testsupport::write_face_folder((dir / "imgs").string(), ids, photos, size, rng);
  std::ofstream mf(dir / "media.txt");
  mf << "# micro prior media\n" << (dir / "imgs").string() << "\n";
  return dir / "media.txt";
}

// Labeled identities as a CSV manifest; identities alternate between two
// groups so the protocol stages see more than one group.
fs::path write_labeled_csv(const fs::path& dir, int identities, int photos, int size) {
  fs::create_directories(dir);
  std::ofstream csv(dir / "labels.csv");
  csv << "image_path,identity_id,group_id\n";
  for (int id = 0; id < identities; ++id) {
    Rng rng(derive_seed(31, "labeled:" + std::to_string(id)));
    std::vector<Image8> shots =
        testsupport::render_identity_photos(1000 + static_cast<uint64_t>(id), photos, size, rng);
    for (int k = 0; k < photos; ++k) {
      const std::string name = "id" + std::to_string(id) + "_" + std::to_string(k) + ".png";
      save_image((dir / name).string(), shots[static_cast<size_t>(k)]);
      csv << name << ',' << id << ',' << (id % 2) << '\n';
    }
  }
  return dir / "labels.csv";
}

// Every knob shrunk until the full pipeline finishes in seconds.
ExperimentConfig micro_cfg(const fs::path& out_dir) {
  ExperimentConfig c = ExperimentConfig::desk();
  c.seed = 11;
  c.paths.out_dir = out_dir;
  c.ingest.target_size = 16;
  c.ingest.min_face_px = 8;
  c.gan.resolution = 16;
  c.gan.latent_dim = 8;
  c.gan.mapping_layers = 1;
  c.gan.channel_base = 64;
  c.gan.channel_max = 16;
  c.gan.total_samples = 192;
  c.gan.batch_size = 8;
  c.gan.log_interval = 64;
  c.gan.fid_interval = 0;
  c.encoder.input_size = 16;
  c.encoder.trunk_depth = 3;
  c.encoder.trunk_width = 4;
  c.encoder.trunk_blocks_per_stage = 1;
  c.encoder.total_steps = 64;
  c.encoder.batch_size = 8;
  c.encoder.ae_latent_dim = 8;
  c.backbone.input_size = 16;
  c.backbone.emb_dim = 16;
  c.backbone.trunk_depth = 3;
  c.backbone.trunk_width = 4;
  c.backbone.trunk_blocks_per_stage = 1;
  c.finetune.epochs = 2;
  c.finetune.freeze_epochs = 1;
  c.finetune.batch_size = 8;
  c.finetune.resize_to = 16;
  c.finetune.lr0 = 0.01;
  c.protocol.kind = "rfw";
  c.protocol.n_pairs = 8;
  c.protocol.folds = 4;
  c.protocol.fpr_targets = {0.25};
  c.fid_samples = 16;
  return c;
}

// Reference report with the given per-group cross-validated accuracies.
eval::VerificationReport report_of(const std::vector<std::pair<std::string, double>>& accs) {
  std::map<std::string, eval::GroupMetrics> per_group;
  for (const auto& [gid, a] : accs) {
    eval::GroupMetrics m;
    m.accuracy = a;
    per_group[gid] = m;
  }
  return eval::report(per_group);
}

}  // namespace

TEST_SUITE_BEGIN("runner");

TEST_CASE("experiment config: preset overlay, file fields, cli overrides") {
  SUBCASE("a desk file only states what it changes") {
    const std::string text = R"({
      "preset": "desk",
      "seed": 5,
      "gan": {"batch_size": 4},
      "finetune": {"epochs": 3}
    })";
    const ExperimentConfig cfg = experiment_from_json(text);
    CHECK(cfg.preset == "desk");
    CHECK(cfg.seed == 5);
    CHECK(cfg.gan.batch_size == 4);                 // from the file
    CHECK(cfg.finetune.epochs == 3);                // from the file
    CHECK(cfg.gan.latent_dim == gan::GanConfig::desk().latent_dim);  // desk default
    CHECK(cfg.encoder.input_size == enc::EncoderConfig::desk().input_size);
    CHECK(cfg.finetune.freeze_epochs == fr::FinetuneSchedule::desk().freeze_epochs);
  }

  SUBCASE("omitting the preset means full-scale defaults") {
    const ExperimentConfig cfg = experiment_from_json("{}");
    CHECK(cfg.preset == "paper");
    CHECK(cfg.gan.latent_dim == 512);
    CHECK(cfg.finetune.epochs == 100);
  }

  SUBCASE("cli overrides beat the file") {
    CliOverrides ov;
    ov.seed = 9;
    ov.preset = "desk";
    ov.out_dir = "runs/elsewhere";
    const ExperimentConfig cfg = experiment_from_json(R"({"preset":"paper","seed":5})", ov);
    CHECK(cfg.seed == 9);
    CHECK(cfg.preset == "desk");
    CHECK(cfg.gan.latent_dim == gan::GanConfig::desk().latent_dim);
    CHECK(cfg.paths.out_dir == fs::path("runs/elsewhere"));
  }

  SUBCASE("typos are rejected, not ignored") {
    CHECK_THROWS_AS(experiment_from_json(R"({"gann": {}})"), ConfigError);
    CHECK_THROWS_WITH_AS(experiment_from_json(R"({"gan": {"batchsize": 3}})"),
                         "config: unknown key 'gan.batchsize'", ConfigError);
  }

  SUBCASE("malformed input is a config error") {
    CHECK_THROWS_AS(experiment_from_json("not json"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json("[1,2]"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"seed": "abc"})"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"preset": "laptop"})"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"gan": 3})"), ConfigError);
  }

  SUBCASE("validation failures name the field") {
    CHECK_THROWS_AS(experiment_from_json(R"({"facerec": {"label_fraction": 0.0}})"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"facerec": {"init": "psp"}})"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"protocol": {"kind": "lfw"}})"), ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"protocol": {"fpr_targets": [0.5, 2.0]}})"),
                    ConfigError);
    CHECK_THROWS_AS(experiment_from_json(R"({"prior_fraction": 0.0})"), ConfigError);
  }

  SUBCASE("file loading reports unreadable paths") {
    CHECK_THROWS_AS(load_experiment_config("/nonexistent/exp.json"), ConfigError);
    const fs::path dir = temp_dir("cfgfile");
    {
      std::ofstream out(dir / "exp.json");
      out << R"({"preset": "desk", "seed": 21})";
    }
    const ExperimentConfig cfg = load_experiment_config(dir / "exp.json");
    CHECK(cfg.seed == 21);
    CHECK(cfg.gan.resolution == gan::GanConfig::desk().resolution);
  }

  SUBCASE("serialization round trip preserves every field") {
    ExperimentConfig cfg = micro_cfg("runs/x");
    cfg.facerec.init = "vae";
    cfg.protocol.fpr_targets = {0.01, 0.002};
    const ExperimentConfig back = experiment_from_json(experiment_to_json(cfg));
    CHECK(experiment_to_json(back) == experiment_to_json(cfg));
    CHECK(config_hash(back) == config_hash(cfg));
  }
}

TEST_CASE("experiment config: hash is canonical and semantic") {
  SUBCASE("key order never matters") {
    const ExperimentConfig a = experiment_from_json(R"({"seed": 3, "gan": {"g_lr": 0.01}})");
    const ExperimentConfig b = experiment_from_json(R"({"gan": {"g_lr": 0.01}, "seed": 3})");
    CHECK(config_hash(a) == config_hash(b));
  }

  SUBCASE("semantic fields move the hash") {
    const ExperimentConfig base = experiment_from_json(R"({"preset": "desk"})");
    ExperimentConfig changed = base;
    changed.gan.g_lr *= 2;
    CHECK(config_hash(changed) != config_hash(base));
    changed = base;
    changed.seed += 1;
    CHECK(config_hash(changed) != config_hash(base));
    changed = base;
    changed.paths.labeled_data = "somewhere/else";  // different data -> different experiment
    CHECK(config_hash(changed) != config_hash(base));
  }

  SUBCASE("plumbing does not") {
    const ExperimentConfig base = experiment_from_json(R"({"preset": "desk"})");
    ExperimentConfig moved = base;
    moved.paths.out_dir = "some/other/dir";  // relocation keeps identity
    CHECK(config_hash(moved) == config_hash(base));
    ExperimentConfig relabeled = base;
    relabeled.preset = "paper";  // same resolved fields, different label
    CHECK(config_hash(relabeled) == config_hash(base));
  }
}

TEST_CASE("run records: append-only jsonl") {
  const fs::path dir = temp_dir("records");
  const fs::path file = dir / "run_records.jsonl";

  CHECK(read_run_records(file).empty());  // nothing run yet

  RunRecord r1;
  r1.stage = "prep";
  r1.config_hash = 0xdeadbeefcafef00dULL;
  r1.seed = 17;
  r1.build_id = build_id();
  r1.started_at = "2026-08-14T12:00:00Z";
  r1.wall_seconds = 1.25;
  r1.artifacts = {"prior/manifest.csv"};
  r1.metrics_json = R"({"images": 42})";
  append_run_record(file, r1);

  RunRecord r2 = r1;
  r2.stage = "train-gan";
  r2.artifacts = {"checkpoints/gan.ckpt", "checkpoints/gan_train_log.jsonl"};
  r2.metrics_json = R"({"samples_seen": 192})";
  const std::string before_second = slurp(file);
  append_run_record(file, r2);

  SUBCASE("appending never rewrites earlier lines") {
    const std::string after = slurp(file);
    CHECK(after.substr(0, before_second.size()) == before_second);
    CHECK(std::count(after.begin(), after.end(), '\n') == 2);
  }

  SUBCASE("the round trip preserves every field") {
    const std::vector<RunRecord> recs = read_run_records(file);
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].stage == "prep");
    CHECK(recs[0].config_hash == 0xdeadbeefcafef00dULL);
    CHECK(recs[0].seed == 17);
    CHECK(recs[0].build_id == build_id());
    CHECK(recs[0].started_at == "2026-08-14T12:00:00Z");
    CHECK(recs[0].wall_seconds == doctest::Approx(1.25));
    CHECK(recs[0].artifacts == std::vector<std::string>{"prior/manifest.csv"});
    CHECK(json::parse(recs[0].metrics_json)["images"] == 42);
    CHECK(recs[1].stage == "train-gan");
    CHECK(recs[1].artifacts.size() == 2);
  }

  SUBCASE("a corrupt line is an ingest error") {
    std::ofstream(file, std::ios::app) << "{not json\n";
    CHECK_THROWS_AS(read_run_records(file), IngestError);
  }

  SUBCASE("metrics must be json") {
    RunRecord bad = r1;
    bad.metrics_json = "{oops";
    CHECK_THROWS_AS(append_run_record(file, bad), ConfigError);
  }
}

TEST_CASE("stage lock: one stage at a time per experiment directory") {
  const fs::path dir = temp_dir("lock");
  {
    StageLock held(dir);
    CHECK(fs::exists(held.path()));
    CHECK_THROWS_AS(StageLock{dir}, ConfigError);  // second holder refused

    // run_stage refuses too, before doing any work
    ExperimentConfig cfg = micro_cfg(dir);
    CHECK_THROWS_AS(run_stage("prep", cfg), ConfigError);
  }
  // released on destruction: can lock again
  StageLock again(dir);
  CHECK(fs::exists(again.path()));
}

TEST_CASE("stage dag: missing prerequisites name the producing stage") {
  const fs::path dir = temp_dir("dag");
  ExperimentConfig cfg = micro_cfg(dir / "out");
  cfg.paths.labeled_data = write_labeled_csv(dir / "labeled", 4, 3, 16);

  auto thrown_message = [&](const std::string& stage, const ExperimentConfig& c) {
    try {
      run_stage(stage, c);
      FAIL("stage '" << stage << "' should have thrown");
    } catch (const PrerequisiteError& e) {
      return std::string(e.what());
    }
    return std::string();
  };

  CHECK(thrown_message("train-gan", cfg).find("'prep'") != std::string::npos);
  CHECK(thrown_message("train-encoder", cfg).find("'train-gan'") != std::string::npos);
  CHECK(thrown_message("pretrain-ae", cfg).find("'prep'") != std::string::npos);
  CHECK(thrown_message("pretrain-vae", cfg).find("'prep'") != std::string::npos);
  CHECK(thrown_message("fid", cfg).find("'train-gan'") != std::string::npos);
  CHECK(thrown_message("embed", cfg).find("'build-pairs'") != std::string::npos);
  CHECK(thrown_message("evaluate", cfg).find("'build-pairs'") != std::string::npos);

  ExperimentConfig with_pool = cfg;
  with_pool.facerec.interp_pool = 4;
  CHECK(thrown_message("augment-interp", with_pool).find("'train-encoder'") != std::string::npos);
  CHECK(thrown_message("train-facerec", with_pool).find("'train-encoder'") != std::string::npos);

  ExperimentConfig ae_init = cfg;
  ae_init.facerec.init = "ae";
  CHECK(thrown_message("train-facerec", ae_init).find("'pretrain-ae'") != std::string::npos);
  ae_init.facerec.init = "vae";
  CHECK(thrown_message("train-facerec", ae_init).find("'pretrain-vae'") != std::string::npos);

  ExperimentConfig model_mined = cfg;
  model_mined.protocol.mining = "model";
  CHECK(thrown_message("build-pairs", model_mined).find("'train-facerec'") != std::string::npos);

  SUBCASE("config-level failures are config errors, not prerequisite errors") {
    CHECK_THROWS_AS(run_stage("prep", cfg), ConfigError);  // no media manifest configured
    CHECK_THROWS_AS(run_stage("made-up-stage", cfg), ConfigError);
    ExperimentConfig no_pool = cfg;
    no_pool.facerec.interp_pool = 0;
    CHECK_THROWS_AS(run_stage("augment-interp", no_pool), ConfigError);
  }
}

TEST_CASE("interp pool: checkpointed round trip") {
  const fs::path dir = temp_dir("pool");
  Rng rng(3);
  std::vector<fr::InterpSample> pool(3);
  for (size_t i = 0; i < pool.size(); ++i) {
    Image8 img(8, 8);
    for (auto& v : img.rgb) v = static_cast<uint8_t>(rng.below(256));
    pool[i].image = img;
    pool[i].label = fr::TwoHotLabel::from_lambda(static_cast<int64_t>(i), 7, 0.25 * (double)(i + 1));
    pool[i].lambda = 0.25 * static_cast<double>(i + 1);
  }
  save_interp_pool(dir / "pool.ckpt", pool);
  const std::vector<fr::InterpSample> back = load_interp_pool(dir / "pool.ckpt");
  REQUIRE(back.size() == pool.size());
  for (size_t i = 0; i < pool.size(); ++i) {
    CHECK(back[i].image.rgb == pool[i].image.rgb);  // 8-bit payload survives exactly
    CHECK(back[i].label.index_a == pool[i].label.index_a);
    CHECK(back[i].label.index_b == pool[i].label.index_b);
    CHECK(back[i].label.weight_a == doctest::Approx(pool[i].label.weight_a).epsilon(1e-15));
    CHECK(back[i].lambda == doctest::Approx(pool[i].lambda).epsilon(1e-15));
  }

  SUBCASE("wrong checkpoint stage is rejected") {
    ckpt::Checkpoint ck = ckpt::load_checkpoint((dir / "pool.ckpt").string());
    ck.stage = "gan";
    ckpt::save_checkpoint((dir / "bad.ckpt").string(), ck);
    CHECK_THROWS_AS(load_interp_pool(dir / "bad.ckpt"), PrerequisiteError);
  }

  SUBCASE("empty pools cannot be persisted") {
    CHECK_THROWS_AS(save_interp_pool(dir / "empty.ckpt", {}), ConfigError);
  }
}

TEST_CASE("compare runs: paper-style delta table") {
  SUBCASE("the documented +1.00 increase renders as such") {
    const eval::VerificationReport baseline = report_of(
        {{"African", 94.00}, {"Asian", 93.98}, {"Caucasian", 93.72}, {"Indian", 94.67}});
    const eval::VerificationReport candidate = report_of(
        {{"African", 95.00}, {"Asian", 94.98}, {"Caucasian", 94.72}, {"Indian", 95.67}});
    const std::vector<DeltaRow> rows = compare_runs(baseline, candidate);

    const auto african = std::find_if(rows.begin(), rows.end(), [](const DeltaRow& r) {
      return r.group == "African" && r.metric == "accuracy_cv";
    });
    REQUIRE(african != rows.end());
    CHECK(african->baseline == doctest::Approx(94.00));
    CHECK(african->candidate == doctest::Approx(95.00));
    CHECK(african->delta == doctest::Approx(1.00).epsilon(1e-12));

    const auto avg = std::find_if(rows.begin(), rows.end(), [](const DeltaRow& r) {
      return r.group == "_all" && r.metric == "avg";
    });
    REQUIRE(avg != rows.end());
    CHECK(avg->delta == doctest::Approx(1.00).epsilon(1e-9));  // every group moved by +1
    const auto stddev = std::find_if(rows.begin(), rows.end(), [](const DeltaRow& r) {
      return r.group == "_all" && r.metric == "std";
    });
    REQUIRE(stddev != rows.end());
    CHECK(stddev->delta == doctest::Approx(0.0).epsilon(1e-9));  // uniform shift

    const std::string table = render_delta_table(rows);
    CHECK(table.find("+1.00") != std::string::npos);
    CHECK(table.find("African") != std::string::npos);
    CHECK(table.find("baseline") != std::string::npos);
  }

  SUBCASE("identical reports give all-zero deltas") {
    const eval::VerificationReport rep = report_of({{"a", 90.0}, {"b", 91.0}});
    for (const DeltaRow& r : compare_runs(rep, rep)) CHECK(r.delta == 0.0);
  }

  SUBCASE("mismatches are argument errors") {
    const eval::VerificationReport a = report_of({{"a", 90.0}});
    const eval::VerificationReport b = report_of({{"b", 90.0}});
    CHECK_THROWS_AS(compare_runs(a, b), std::invalid_argument);

    eval::VerificationReport with_tpr = report_of({{"a", 90.0}});
    with_tpr.per_group["a"].tpr_at_fpr.emplace_back(0.001, eval::TprResult{50.0, 0.4, "exact", false});
    CHECK_THROWS_AS(compare_runs(a, with_tpr), std::invalid_argument);

    eval::VerificationReport other_target = with_tpr;
    other_target.per_group["a"].tpr_at_fpr[0].first = 0.0001;
    CHECK_THROWS_AS(compare_runs(with_tpr, other_target), std::invalid_argument);
  }

  SUBCASE("report json loads back for comparison") {
    const fs::path dir = temp_dir("cmp");
    eval::VerificationReport rep = report_of({{"x", 88.5}, {"y", 91.25}});
    rep.per_group["x"].tpr_at_fpr.emplace_back(
        0.001, eval::TprResult{0.0, std::numeric_limits<double>::infinity(), "exact", true});
    rep.per_group["y"].tpr_at_fpr.emplace_back(0.001, eval::TprResult{62.5, 0.31, "exact", false});
    rep = eval::report(rep.per_group);
    eval::save_report(rep, dir / "report.csv", dir / "report.json");

    const eval::VerificationReport loaded = load_report_json(dir / "report.json");
    REQUIRE(loaded.per_group.count("x") == 1);
    CHECK(*loaded.per_group.at("x").accuracy == doctest::Approx(88.5));
    CHECK(std::isinf(loaded.per_group.at("x").tpr_at_fpr.at(0).second.threshold));
    CHECK(loaded.per_group.at("x").tpr_at_fpr.at(0).second.resolution_warning);
    CHECK(loaded.per_group.at("y").tpr_at_fpr.at(0).second.tpr == doctest::Approx(62.5));
    REQUIRE(loaded.avg.has_value());
    CHECK(*loaded.avg == doctest::Approx(*rep.avg));
    for (const DeltaRow& r : compare_runs(rep, loaded)) CHECK(r.delta == 0.0);
  }
}

TEST_CASE("cache root: FRBOOST_CACHE overrides, keyed by config hash") {
  const ExperimentConfig cfg = micro_cfg("runs/cache_demo");
  const fs::path by_default = cache_dir(cfg);
  CHECK(by_default.parent_path() == fs::path("runs/cache_demo") / "cache");

  const fs::path alt = temp_dir("cachealt");
  setenv("FRBOOST_CACHE", alt.string().c_str(), 1);
  const fs::path overridden = cache_dir(cfg);
  unsetenv("FRBOOST_CACHE");
  CHECK(overridden.parent_path() == alt);
  CHECK(overridden.filename() == by_default.filename());  // same hash key

  ExperimentConfig other = cfg;
  other.seed += 1;
  CHECK(cache_dir(other) != by_default);  // different experiment, different key
}

TEST_CASE("end to end: the desk-preset pipeline produces a verification report") {
  const fs::path dir = temp_dir("e2e");
  ExperimentConfig cfg = micro_cfg(dir / "out");
  cfg.paths.media_manifest = write_media(dir / "media", 6, 10, 16);
  cfg.paths.labeled_data = write_labeled_csv(dir / "labeled", 8, 6, 16);
  cfg.facerec.interp_pool = 6;

  const std::vector<std::string> stages = {"prep",         "train-gan",     "train-encoder",
                                           "pretrain-ae",  "pretrain-vae",  "augment-interp",
                                           "train-facerec", "build-pairs",  "embed",
                                           "evaluate",      "fid"};
  for (const std::string& stage : stages) {
    INFO("stage " << stage);
    const StageResult res = run_stage(stage, cfg);
    CHECK(res.stage == stage);
    REQUIRE(!res.artifacts.empty());
    for (const std::string& a : res.artifacts) {
      const fs::path p = fs::path(a).is_absolute() ? fs::path(a) : cfg.paths.out_dir / a;
      INFO("artifact " << p.string());
      CHECK(fs::exists(p));
    }
  }

  SUBCASE("run records trace the whole pipeline") {
    const std::vector<RunRecord> recs =
        read_run_records(cfg.paths.out_dir / "run_records.jsonl");
    REQUIRE(recs.size() == stages.size());
    for (size_t i = 0; i < stages.size(); ++i) {
      CHECK(recs[i].stage == stages[i]);
      CHECK(recs[i].config_hash == config_hash(cfg));
      CHECK(recs[i].seed == cfg.seed);
      CHECK(recs[i].wall_seconds >= 0.0);
    }
    const json enc_metrics = json::parse(recs[2].metrics_json);
    CHECK(enc_metrics.at("generator_frozen") == true);  // stage-2 contract
    const json pairs_metrics = json::parse(recs[7].metrics_json);
    CHECK(pairs_metrics.at("groups") == 2);
    CHECK(pairs_metrics.at("mining") == "seeded");
  }

  SUBCASE("the verification report covers both groups") {
    const eval::VerificationReport rep =
        load_report_json(cfg.paths.out_dir / "reports" / "report.json");
    REQUIRE(rep.per_group.size() == 2);
    for (const auto& [gid, m] : rep.per_group) {
      INFO("group " << gid);
      REQUIRE(m.accuracy.has_value());
      CHECK(*m.accuracy >= 0.0);
      CHECK(*m.accuracy <= 100.0);
      REQUIRE(m.tpr_at_fpr.size() == 1);
      CHECK(m.tpr_at_fpr[0].first == doctest::Approx(0.25));
    }
    REQUIRE(rep.avg.has_value());
    REQUIRE(rep.stddev.has_value());
  }

  SUBCASE("fid artifact is a finite number") {
    const json fid = json::parse(slurp(cfg.paths.out_dir / "reports" / "fid.json"));
    CHECK(fid.at("fid").get<double>() >= 0.0);
    CHECK(std::isfinite(fid.at("fid").get<double>()));
    CHECK(fid.at("samples_per_side") == 16);
  }

  SUBCASE("embeddings land in the config-hash cache slot") {
    CHECK(fs::exists(cache_dir(cfg) / "embeddings.emb"));
    const eval::EmbeddingTable table = eval::read_emb1(cache_dir(cfg) / "embeddings.emb");
    CHECK(table.dim() == cfg.backbone.emb_dim);
    CHECK(table.count() > 0);
  }

  SUBCASE("reruns are bit-reproducible where the contract says so") {
    const std::string pairs_before = slurp(cfg.paths.out_dir / "pairs" / "pairs.tsv");
    run_stage("build-pairs", cfg);
    CHECK(slurp(cfg.paths.out_dir / "pairs" / "pairs.tsv") == pairs_before);
  }
}

TEST_CASE("cli: exit codes follow the documented contract") {
  const fs::path dir = temp_dir("cli");
  const ExperimentConfig cfg = [&] {
    ExperimentConfig c = micro_cfg(dir / "out");
    c.paths.labeled_data = write_labeled_csv(dir / "labeled", 4, 3, 16);
    return c;
  }();
  const fs::path cfg_file = dir / "exp.json";
  std::ofstream(cfg_file) << experiment_to_json(cfg);

  SUBCASE("help is success") { CHECK(run_cli({"--help"}) == 0); }

  SUBCASE("bad command lines are config errors") {
    CHECK(run_cli({}) == 2);
    CHECK(run_cli({"no-such-stage", "--config", cfg_file.string()}) == 2);
    CHECK(run_cli({"prep"}) == 2);                                     // --config required
    CHECK(run_cli({"prep", "--config", "/definitely/missing.json"}) == 2);
    CHECK(run_cli({"prep", "--config", cfg_file.string(), "--preset", "laptop"}) == 2);
  }

  SUBCASE("config errors exit 2") {
    const fs::path bad = dir / "bad.json";
    std::ofstream(bad) << R"({"gan": {"batchsize": 3}})";
    CHECK(run_cli({"train-gan", "--config", bad.string()}) == 2);
  }

  SUBCASE("missing prerequisites exit 3") {
    CHECK(run_cli({"train-gan", "--config", cfg_file.string()}) == 3);
    CHECK(run_cli({"evaluate", "--config", cfg_file.string()}) == 3);
  }

  SUBCASE("a full micro stage runs to success") {
    std::ofstream(dir / "media.txt") << (dir / "labeled").string() << "\n";
    ExperimentConfig with_media = cfg;
    with_media.paths.media_manifest = dir / "media.txt";
    std::ofstream(cfg_file) << experiment_to_json(with_media);
    CHECK(run_cli({"prep", "--config", cfg_file.string()}) == 0);
    CHECK(fs::exists(with_media.paths.out_dir / "prior" / "manifest.csv"));

    // and the record carries the overridden seed
    CHECK(run_cli({"prep", "--config", cfg_file.string(), "--seed", "99"}) == 0);
    const auto recs = read_run_records(with_media.paths.out_dir / "run_records.jsonl");
    REQUIRE(recs.size() == 2);
    CHECK(recs[1].seed == 99);
  }

  SUBCASE("compare prints the delta table") {
    const eval::VerificationReport a = report_of({{"g", 94.0}});
    const eval::VerificationReport b = report_of({{"g", 95.0}});
    eval::save_report(a, dir / "a.csv", dir / "a.json");
    eval::save_report(b, dir / "b.csv", dir / "b.json");

    std::ostringstream captured;
    std::streambuf* old = std::cout.rdbuf(captured.rdbuf());
    const int code = run_cli({"compare", "--baseline", (dir / "a.json").string(), "--candidate",
                              (dir / "b.json").string()});
    std::cout.rdbuf(old);
    CHECK(code == 0);
    CHECK(captured.str().find("+1.00") != std::string::npos);

    // mismatched reports are argument errors -> exit 2
    eval::save_report(report_of({{"other", 90.0}}), dir / "c.csv", dir / "c.json");
    const int mismatch = run_cli({"compare", "--baseline", (dir / "a.json").string(),
                                  "--candidate", (dir / "c.json").string()});
    CHECK(mismatch == 2);
  }
}

TEST_SUITE_END();
