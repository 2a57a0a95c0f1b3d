#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "frboost/checkpoint.hpp"
#include "frboost/encoder.hpp"
#include "frboost/errors.hpp"
#include "frboost/facerec.hpp"
#include "frboost/gan.hpp"
#include "frboost/image.hpp"
#include "frboost/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic_faces.hpp"

using namespace frboost;
using namespace frboost::fr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("frboost_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

BackboneConfig micro_backbone(int input = 16) {
  BackboneConfig c = BackboneConfig::desk();
  c.input_size = input;
  c.emb_dim = 16;
  c.trunk_depth = 3;
  c.trunk_width = 4;
  c.trunk_blocks_per_stage = 1;
  return c;
}

enc::EncoderConfig micro_encoder(int input = 16) {
  enc::EncoderConfig c = enc::EncoderConfig::desk();
  c.input_size = input;
  c.trunk_depth = 3;
  c.trunk_width = 4;
  c.trunk_blocks_per_stage = 1;
  c.ae_latent_dim = 8;
  return c;
}

// ---------------------------------------------------------------------------
// Plain-double enumeration oracles mirroring the documented loss formulas.
// ---------------------------------------------------------------------------

constexpr double kPi = 3.14159265358979323846;

std::vector<double> unit(std::vector<double> v) {
  double s = 1e-12;  // matches the row-normalization epsilon
  for (double x : v) s += x * x;
  double inv = 1.0 / std::sqrt(s);
  for (double& x : v) x *= inv;
  return v;
}

double clamped_acos(double c) {
  return std::acos(std::clamp(c, -1.0 + 1e-12, 1.0 - 1e-12));
}

// Cosine rows between unit embeddings and unit class weights.
std::vector<std::vector<double>> cosines(const std::vector<std::vector<double>>& emb,
                                         const std::vector<std::vector<double>>& w) {
  std::vector<std::vector<double>> out(emb.size(), std::vector<double>(w.size(), 0.0));
  for (size_t i = 0; i < emb.size(); ++i) {
    std::vector<double> e = unit(emb[i]);
    for (size_t j = 0; j < w.size(); ++j) {
      std::vector<double> c = unit(w[j]);
      double dot = 0.0;
      for (size_t k = 0; k < e.size(); ++k) dot += e[k] * c[k];
      out[i][j] = dot;
    }
  }
  return out;
}

double arcface_phi_oracle(double cos_t, double m) {
  if (cos_t > std::cos(kPi - m)) return std::cos(clamped_acos(cos_t) + m);
  return cos_t - m * std::sin(m);
}

// Mean over rows of lse(z) - sum_t w_t z_t.
double ce_oracle(const std::vector<std::vector<double>>& z,
                 const std::vector<std::vector<std::pair<int, double>>>& targets) {
  double total = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    double mx = *std::max_element(z[i].begin(), z[i].end());
    double se = 0.0;
    for (double v : z[i]) se += std::exp(v - mx);
    double lse = mx + std::log(se);
    double t = 0.0;
    for (const auto& [j, w] : targets[i]) t += w * z[i][static_cast<size_t>(j)];
    total += lse - t;
  }
  return total / static_cast<double>(z.size());
}

double arcface_oracle(const std::vector<std::vector<double>>& emb,
                      const std::vector<int64_t>& labels,
                      const std::vector<std::vector<double>>& w, double s, double m) {
  auto cos = cosines(emb, w);
  std::vector<std::vector<std::pair<int, double>>> targets(emb.size());
  for (size_t i = 0; i < emb.size(); ++i) {
    int t = static_cast<int>(labels[i]);
    cos[i][static_cast<size_t>(t)] = arcface_phi_oracle(cos[i][static_cast<size_t>(t)], m);
    for (auto& v : cos[i]) v *= s;
    targets[i] = {{t, 1.0}};
  }
  return ce_oracle(cos, targets);
}

double sphereface_oracle(const std::vector<std::vector<double>>& emb,
                         const std::vector<int64_t>& labels,
                         const std::vector<std::vector<double>>& w, int m_mult, double s) {
  auto cos = cosines(emb, w);
  std::vector<std::vector<std::pair<int, double>>> targets(emb.size());
  for (size_t i = 0; i < emb.size(); ++i) {
    int t = static_cast<int>(labels[i]);
    double theta = clamped_acos(cos[i][static_cast<size_t>(t)]);
    int k = static_cast<int>(std::floor(m_mult * theta / kPi));
    double psi = ((k % 2 == 0) ? 1.0 : -1.0) * std::cos(m_mult * theta) - 2.0 * k;
    cos[i][static_cast<size_t>(t)] = psi;
    for (auto& v : cos[i]) v *= s;
    targets[i] = {{t, 1.0}};
  }
  return ce_oracle(cos, targets);
}

double soft_margin_oracle(const std::vector<std::vector<double>>& emb,
                          const std::vector<TwoHotLabel>& labels,
                          const std::vector<std::vector<double>>& w, double s, double m) {
  auto cos = cosines(emb, w);
  std::vector<std::vector<std::pair<int, double>>> targets(emb.size());
  for (size_t i = 0; i < emb.size(); ++i) {
    const TwoHotLabel& l = labels[i];
    if (l.weight_a > 0.0) {
      auto& c = cos[i][static_cast<size_t>(l.index_a)];
      c = arcface_phi_oracle(c, m);
    }
    if (l.weight_b > 0.0) {
      auto& c = cos[i][static_cast<size_t>(l.index_b)];
      c = arcface_phi_oracle(c, m);
    }
    for (auto& v : cos[i]) v *= s;
    targets[i] = {{static_cast<int>(l.index_a), l.weight_a},
                  {static_cast<int>(l.index_b), l.weight_b}};
  }
  return ce_oracle(cos, targets);
}

ag::Var rows_var(const std::vector<std::vector<double>>& rows) {
  const int b = static_cast<int>(rows.size());
  const int d = static_cast<int>(rows[0].size());
  Tensor t({b, d});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j) t.d[static_cast<size_t>(i) * d + j] = rows[static_cast<size_t>(i)][static_cast<size_t>(j)];
  return ag::Var::param(std::move(t));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0.0;
  for (size_t i = 0; i < a.d.size(); ++i) m = std::max(m, std::fabs(a.d[i] - b.d[i]));
  return m;
}

}  // namespace

TEST_SUITE("facerec") {

TEST_CASE("backbone config and finetune schedule: presets, validation, json") {
  BackboneConfig def;
  CHECK(def.input_size == 112);
  CHECK(def.emb_dim == 512);
  CHECK(def.trunk_depth == 4);
  CHECK(def.trunk_width == 64);
  CHECK(def.trunk_blocks_per_stage == 3);
  CHECK(def.use_squeeze_excitation);
  nn::TrunkConfig tc = def.trunk_config();
  CHECK(tc.stage_channels == std::vector<int>{64, 128, 256, 512});
  CHECK(tc.stage_blocks == std::vector<int>{3, 3, 3, 3});
  CHECK(tc.se_reduction == 4);

  BackboneConfig desk = BackboneConfig::desk();
  CHECK(desk.input_size == 32);
  CHECK(desk.trunk_depth == 3);
  desk.validate();

  BackboneConfig bad = desk;
  bad.input_size = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.trunk_depth = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.emb_dim = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = desk;
  bad.head_dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  BackboneConfig rt = backbone_config_from_json(backbone_config_to_json(desk));
  CHECK(rt.input_size == desk.input_size);
  CHECK(rt.emb_dim == desk.emb_dim);
  CHECK(rt.trunk_width == desk.trunk_width);
  CHECK_THROWS_AS(backbone_config_from_json("{\"widht\": 3}"), ConfigError);
  CHECK_THROWS_AS(backbone_config_from_json("not json"), ConfigError);

  FinetuneSchedule sd;
  CHECK(sd.epochs == 100);
  CHECK(sd.freeze_epochs == 3);
  CHECK(sd.lr0 == doctest::Approx(0.03));
  CHECK(sd.lr_decay_factor == doctest::Approx(1.5));
  CHECK(sd.lr_decay_every == 5);
  CHECK(sd.momentum == doctest::Approx(0.9));
  CHECK(sd.weight_decay == doctest::Approx(2e-3));
  CHECK(sd.conv_dropout == doctest::Approx(0.15));
  CHECK(sd.margin_s == doctest::Approx(64.0));
  CHECK(sd.margin_m == doctest::Approx(0.5));
  CHECK(sd.sphere_m_mult == 4);
  CHECK(sd.batch_size == 256);
  CHECK(sd.resize_to == 128);
  sd.validate(112);
  CHECK_THROWS_AS(sd.validate(200), ConfigError);  // resize smaller than input
  FinetuneSchedule sbad = sd;
  sbad.freeze_epochs = 101;
  CHECK_THROWS_AS(sbad.validate(112), ConfigError);
  sbad = sd;
  sbad.lr_decay_factor = 0.5;
  CHECK_THROWS_AS(sbad.validate(112), ConfigError);

  FinetuneSchedule srt = finetune_schedule_from_json(finetune_schedule_to_json(sd));
  CHECK(srt.epochs == sd.epochs);
  CHECK(srt.margin_m == doctest::Approx(sd.margin_m));
  CHECK_THROWS_AS(finetune_schedule_from_json("{\"epoch\": 2}"), ConfigError);

  CHECK(to_string(LossKind::arcface) == "arcface");
  CHECK(loss_kind_from_string("sphereface") == LossKind::sphereface);
  CHECK_THROWS_AS(loss_kind_from_string("cosface"), ConfigError);
}

TEST_CASE("margin losses match scalar enumeration oracles") {
  // Hand-set 2-d geometry: three classes, three embeddings. The third row is
  // exactly opposite its target weight so the arcface safeguard branch runs.
  std::vector<std::vector<double>> w = {{0.9, 0.1}, {-0.2, 1.0}, {-0.8, -0.5}};
  std::vector<std::vector<double>> e = {{1.0, 0.2}, {-0.3, 0.9}, {0.8, 0.5}};
  std::vector<int64_t> labels = {0, 2, 2};

  SUBCASE("arcface") {
    ag::Var emb = rows_var(e);
    ag::Var cw = rows_var(w);
    double got = arcface_loss(emb, labels, cw, 2.0, 0.3).value().item();
    double want = arcface_oracle(e, labels, w, 2.0, 0.3);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
    // The safeguard row really is in the fallback region.
    auto cos = cosines(e, w);
    CHECK(cos[2][2] < std::cos(kPi - 0.3));
  }

  SUBCASE("sphereface") {
    ag::Var emb = rows_var(e);
    ag::Var cw = rows_var(w);
    for (int m_mult : {2, 4}) {
      double got = sphereface_loss(emb, labels, cw, m_mult, 2.0).value().item();
      double want = sphereface_oracle(e, labels, w, m_mult, 2.0);
      CHECK(got == doctest::Approx(want).epsilon(1e-10));
    }
    // The hand values hit k >= 1 folds at m_mult = 4 (not just the trivial
    // k = 0 region).
    auto cos = cosines(e, w);
    double theta = clamped_acos(cos[1][2]);
    CHECK(std::floor(4 * theta / kPi) >= 1);
  }

  SUBCASE("soft margin") {
    std::vector<TwoHotLabel> th(3);
    th[0] = TwoHotLabel::from_lambda(0, 1, 0.6);
    th[1] = TwoHotLabel::from_lambda(2, 0, 0.0);  // hard endpoint inside a soft batch
    th[2] = TwoHotLabel::from_lambda(1, 2, 0.25);
    ag::Var emb = rows_var(e);
    ag::Var cw = rows_var(w);
    double got = soft_margin_loss(emb, th, cw, 2.0, 0.3).value().item();
    double want = soft_margin_oracle(e, th, w, 2.0, 0.3);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }
}

TEST_CASE("margin loss degeneracies and argument validation") {
  std::vector<std::vector<double>> w = {{0.9, 0.1, -0.3}, {-0.2, 1.0, 0.4}, {-0.8, -0.5, 0.1}};
  std::vector<std::vector<double>> e = {{1.0, 0.2, 0.1}, {-0.3, 0.9, -0.6}};
  std::vector<int64_t> labels = {0, 2};
  ag::Var emb = rows_var(e);
  ag::Var cw = rows_var(w);

  SUBCASE("m = 0 equals softmax cross-entropy over scaled cosines") {
    auto cos = cosines(e, w);
    std::vector<std::vector<std::pair<int, double>>> targets(e.size());
    for (size_t i = 0; i < e.size(); ++i) {
      for (auto& v : cos[i]) v *= 3.0;
      targets[i] = {{static_cast<int>(labels[i]), 1.0}};
    }
    double plain = ce_oracle(cos, targets);
    CHECK(arcface_loss(emb, labels, cw, 3.0, 0.0).value().item() ==
          doctest::Approx(plain).epsilon(1e-6));
    CHECK(sphereface_loss(emb, labels, cw, 1, 3.0).value().item() ==
          doctest::Approx(plain).epsilon(1e-6));
  }

  SUBCASE("single class gives zero loss") {
    std::vector<std::vector<double>> w1 = {{0.4, -0.7, 0.2}};
    ag::Var cw1 = rows_var(w1);
    std::vector<int64_t> l1 = {0, 0};
    CHECK(arcface_loss(emb, l1, cw1, 64.0, 0.5).value().item() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(sphereface_loss(emb, l1, cw1, 4, 64.0).value().item() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("theta = 0 makes the sphereface target logit maximal (s)") {
    // Embedding exactly along its class weight: theta ~ 0 for any m_mult.
    std::vector<std::vector<double>> e0 = {{1.8, 0.2, -0.6}};
    std::vector<std::vector<double>> w0 = {{0.9, 0.1, -0.3}, {-0.2, 1.0, 0.4}};
    w0[0] = e0[0];
    std::vector<int64_t> l0 = {0};
    for (int m_mult : {1, 2, 4}) {
      // Oracle with the target logit pinned to exactly s.
      auto cos = cosines(e0, w0);
      std::vector<std::vector<double>> z = cos;
      for (auto& v : z[0]) v *= 5.0;
      z[0][0] = 5.0;
      double want = ce_oracle(z, {{{0, 1.0}}});
      CHECK(sphereface_loss(rows_var(e0), l0, rows_var(w0), m_mult, 5.0).value().item() ==
            doctest::Approx(want).epsilon(1e-8));
    }
  }

  SUBCASE("cosine is invariant to positive rescaling of embeddings") {
    std::vector<std::vector<double>> e_scaled = e;
    for (auto& row : e_scaled)
      for (auto& v : row) v *= 2.7;
    double base = arcface_loss(emb, labels, cw, 64.0, 0.5).value().item();
    double scaled = arcface_loss(rows_var(e_scaled), labels, cw, 64.0, 0.5).value().item();
    CHECK(base == doctest::Approx(scaled).epsilon(1e-10));
  }

  SUBCASE("loss decreases as the target cosine rises, other logits fixed") {
    // Rotate the embedding in the x-y plane against weights chosen so the
    // non-target cosines stay exactly zero while the target cosine rises.
    std::vector<std::vector<double>> worth = {{1, 0, 0}, {0, 0, 1}, {0, 0, -1}};
    ag::Var cworth = rows_var(worth);
    double prev = 1e300;
    for (double alpha : {1.2, 0.9, 0.6, 0.3}) {
      std::vector<std::vector<double>> e_one = {{std::cos(alpha), std::sin(alpha), 0.0}};
      std::vector<int64_t> l_one = {0};
      double v = arcface_loss(rows_var(e_one), l_one, cworth, 8.0, 0.4).value().item();
      CHECK(v < prev);
      prev = v;
    }
  }

  SUBCASE("argument errors") {
    CHECK_THROWS_AS(arcface_loss(emb, {0, 3}, cw, 64.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(arcface_loss(emb, {0, -1}, cw, 64.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(arcface_loss(emb, {0}, cw, 64.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(arcface_loss(emb, labels, cw, 0.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(arcface_loss(emb, labels, cw, 64.0, 1.6), std::invalid_argument);
    CHECK_THROWS_AS(sphereface_loss(emb, labels, cw, 0, 64.0), std::invalid_argument);
    std::vector<TwoHotLabel> bad(2);
    bad[0] = TwoHotLabel::from_lambda(0, 1, 0.5);
    bad[1].index_a = 0;
    bad[1].index_b = 1;
    bad[1].weight_a = 0.7;
    bad[1].weight_b = 0.7;
    CHECK_THROWS_AS(soft_margin_loss(emb, bad, cw, 64.0, 0.5), std::invalid_argument);
    bad[1] = TwoHotLabel::from_lambda(0, 5, 0.5);
    CHECK_THROWS_AS(soft_margin_loss(emb, bad, cw, 64.0, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(TwoHotLabel::from_lambda(0, 1, 1.5), std::invalid_argument);
    TwoHotLabel collapse = TwoHotLabel::from_lambda(3, 3, 0.4);
    CHECK(collapse.weight_a == 1.0);
    CHECK(collapse.weight_b == 0.0);
  }
}

TEST_CASE("soft margin endpoints equal arcface; symmetric config has symmetric gradient") {
  std::vector<std::vector<double>> w = {{0.9, 0.1, -0.3}, {-0.2, 1.0, 0.4}, {-0.8, -0.5, 0.1}};
  std::vector<std::vector<double>> e = {{1.0, 0.2, 0.1}, {-0.3, 0.9, -0.6}};
  ag::Var emb = rows_var(e);
  ag::Var cw = rows_var(w);

  SUBCASE("lambda = 0 reduces to arcface on index_a") {
    std::vector<TwoHotLabel> th = {TwoHotLabel::from_lambda(0, 1, 0.0),
                                   TwoHotLabel::from_lambda(2, 1, 0.0)};
    double soft = soft_margin_loss(emb, th, cw, 64.0, 0.5).value().item();
    double hard = arcface_loss(emb, {0, 2}, cw, 64.0, 0.5).value().item();
    CHECK(soft == doctest::Approx(hard).epsilon(1e-10));
  }

  SUBCASE("lambda = 1 reduces to arcface on index_b") {
    std::vector<TwoHotLabel> th = {TwoHotLabel::from_lambda(0, 1, 1.0),
                                   TwoHotLabel::from_lambda(2, 0, 1.0)};
    double soft = soft_margin_loss(emb, th, cw, 64.0, 0.5).value().item();
    double hard = arcface_loss(emb, {1, 0}, cw, 64.0, 0.5).value().item();
    CHECK(soft == doctest::Approx(hard).epsilon(1e-10));
  }

  SUBCASE("mirror-symmetric two-hot at lambda = 0.5") {
    // Classes mirrored about the x-axis, embedding on the axis: the loss is
    // invariant under y -> -y, so the embedding gradient cannot have a
    // y-component and the class-weight gradients must mirror each other.
    std::vector<std::vector<double>> wsym = {{0.8, 0.6}, {0.8, -0.6}};
    std::vector<std::vector<double>> esym = {{1.0, 0.0}};
    ag::Var emb2 = rows_var(esym);
    ag::Var cw2 = rows_var(wsym);
    std::vector<TwoHotLabel> th = {TwoHotLabel::from_lambda(0, 1, 0.5)};
    ag::Var loss = soft_margin_loss(emb2, th, cw2, 8.0, 0.4);
    emb2.zero_grad();
    cw2.zero_grad();
    ag::backward(loss);
    CHECK(std::isfinite(loss.value().item()));
    CHECK(std::fabs(emb2.grad().d[1]) < 1e-12);
    CHECK(std::fabs(cw2.grad().d[0] - cw2.grad().d[2]) < 1e-12);
    CHECK(std::fabs(cw2.grad().d[1] + cw2.grad().d[3]) < 1e-12);
  }
}

TEST_CASE("margin loss gradients match finite differences") {
  Rng rng(4242);
  Tensor e_t = testsupport::generic_values({3, 5}, rng);
  Tensor w_t = testsupport::generic_values({4, 5}, rng);
  std::vector<int64_t> labels = {0, 3, 1};

  ag::Var emb = ag::Var::param(e_t);
  ag::Var cw = ag::Var::param(w_t);

  // Precondition: stay away from the safeguard threshold and the sphereface
  // fold boundaries so the finite-difference window sees a smooth function.
  {
    auto to_rows = [](const Tensor& t) {
      std::vector<std::vector<double>> rows(static_cast<size_t>(t.dim(0)));
      for (int i = 0; i < t.dim(0); ++i)
        rows[static_cast<size_t>(i)].assign(
            t.d.begin() + static_cast<size_t>(i) * t.dim(1),
            t.d.begin() + static_cast<size_t>(i + 1) * t.dim(1));
      return rows;
    };
    auto cos = cosines(to_rows(e_t), to_rows(w_t));
    for (const auto& row : cos)
      for (double c : row) REQUIRE(std::fabs(c - std::cos(kPi - 0.35)) > 1e-3);
    for (size_t i = 0; i < labels.size(); ++i) {
      double frac = 4 * clamped_acos(cos[i][static_cast<size_t>(labels[i])]) / kPi;
      REQUIRE(std::fabs(frac - std::round(frac)) > 1e-3);
    }
  }

  SUBCASE("arcface") {
    auto res = testsupport::gradcheck(
        [&] { return arcface_loss(emb, labels, cw, 3.0, 0.35); }, {emb, cw});
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("sphereface") {
    auto res = testsupport::gradcheck(
        [&] { return sphereface_loss(emb, labels, cw, 4, 3.0); }, {emb, cw});
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
  SUBCASE("soft margin") {
    std::vector<TwoHotLabel> th = {TwoHotLabel::from_lambda(0, 2, 0.3),
                                   TwoHotLabel::from_lambda(3, 1, 0.7),
                                   TwoHotLabel::from_lambda(1, 0, 0.0)};
    auto res = testsupport::gradcheck(
        [&] { return soft_margin_loss(emb, th, cw, 3.0, 0.35); }, {emb, cw});
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
  }
}

TEST_CASE("backbone forward, embed and registry names") {
  Rng rng(11);
  BackboneParams bb(micro_backbone(), rng);
  CHECK(bb.num_classes() == 0);

  nn::TrainCtx ev;
  Tensor x = Tensor::randn({2, 3, 16, 16}, rng, 0.5);
  ag::Var e = bb.forward_embedding(ag::Var::constant(x), ev);
  CHECK(e.shape() == std::vector<int>{2, 16});
  CHECK_THROWS_AS(bb.forward_embedding(ag::Var::constant(Tensor::randn({2, 3, 8, 8}, rng)), ev),
                  std::invalid_argument);

  // embed: deterministic, resizes arbitrary inputs, matches the batched path.
  Image8 img(20, 24);
  for (int y = 0; y < img.h; ++y)
    for (int xx = 0; xx < img.w; ++xx)
      for (int c = 0; c < 3; ++c)
        img.at(y, xx, c) = static_cast<uint8_t>((y * 11 + xx * 7 + c * 40) % 256);
  Tensor e1 = embed(bb, img);
  Tensor e2 = embed(bb, img);
  CHECK(e1.shape == std::vector<int>{16});
  CHECK(max_abs_diff(e1, e2) == 0.0);

  Image8 sized = resize_image(img, 16, 16);
  Tensor batch = images_to_batch({sized, flip_horizontal(sized)});
  Tensor eb = embed_batch(bb, batch);
  CHECK(eb.shape == std::vector<int>{2, 16});
  double row_diff = 0.0, cross_diff = 0.0;
  Tensor single = embed(bb, sized);
  for (int j = 0; j < 16; ++j) {
    row_diff = std::max(row_diff, std::fabs(eb.d[static_cast<size_t>(j)] - single.d[static_cast<size_t>(j)]));
    cross_diff = std::max(cross_diff,
                          std::fabs(eb.d[static_cast<size_t>(16 + j)] - eb.d[static_cast<size_t>(j)]));
  }
  CHECK(row_diff < 1e-12);       // batching does not change the embedding
  CHECK(cross_diff > 1e-8);      // distinct images embed distinctly

  nn::ParamRegistry reg;
  bb.collect(reg, "");
  CHECK(reg.find("trunk.stem.w") != nullptr);
  CHECK(reg.find("head.fc.w") != nullptr);
  CHECK(reg.find("head.bn_in.gamma") != nullptr);
  CHECK(reg.find("class_weights") == nullptr);

  bb.init_classes(5, rng);
  CHECK(bb.num_classes() == 5);
  CHECK(bb.class_weights.shape() == std::vector<int>{5, 16});
  nn::ParamRegistry reg2;
  bb.collect(reg2, "");
  CHECK(reg2.find("class_weights") != nullptr);
  CHECK_THROWS_AS(bb.init_classes(0, rng), std::invalid_argument);
}

TEST_CASE("transfer_weights copies the trunk exactly and rejects mismatches") {
  Rng rng(21);
  enc::EncoderConfig ecfg = micro_encoder();
  enc::EncoderParams ep(ecfg, 4, 8, rng);

  // Make the normalization statistics non-trivial so the test covers state
  // transfer, not just parameters.
  {
    Rng drng(5);
    nn::TrainCtx tctx;
    tctx.training = true;
    tctx.rng = &drng;
    Tensor warm = Tensor::randn({2, 3, 16, 16}, drng, 0.5);
    (void)ep.trunk.forward(ag::Var::constant(warm), tctx);
  }

  nn::ParamRegistry ereg;
  ep.collect(ereg, "");
  nlohmann::json cj;
  cj["encoder"] = nlohmann::json::parse(enc::encoder_config_to_json(ecfg));
  ckpt::Checkpoint ck = ckpt::snapshot(ereg, "encoder", cj.dump(), 1234, nullptr);

  auto eval_trunk = [](nn::Trunk& t, const Tensor& x) {
    ag::NoGradGuard ng;
    nn::TrainCtx ev;
    return t.forward(ag::Var::constant(x), ev).value();
  };

  SUBCASE("derived config: features equal, head fresh, provenance set") {
    Rng r1(7);
    BackboneParams bb = transfer_weights(ck, r1, 16);
    CHECK(bb.provenance == "encoder");
    CHECK(bb.cfg.input_size == 16);
    CHECK(bb.cfg.trunk_width == 4);
    CHECK(bb.cfg.emb_dim == 16);

    Rng xr(99);
    Tensor x = Tensor::randn({1, 3, 16, 16}, xr, 0.7);
    Tensor fe = eval_trunk(ep.trunk, x);
    Tensor fb = eval_trunk(bb.trunk, x);
    CHECK(max_abs_diff(fe, fb) <= 1e-6);
    CHECK(max_abs_diff(fe, fb) == 0.0);  // exact copy, same arithmetic

    // Same seed -> identical backbone; different seed -> same trunk, new head.
    Rng r2(7);
    BackboneParams bb2 = transfer_weights(ck, r2, 16);
    nn::ParamRegistry a, b;
    bb.collect(a, "");
    bb2.collect(b, "");
    CHECK(ckpt::params_hash(a) == ckpt::params_hash(b));

    Rng r3(8);
    BackboneParams bb3 = transfer_weights(ck, r3, 16);
    nn::ParamRegistry ta, tb;
    bb.trunk.collect(ta, "trunk");
    bb3.trunk.collect(tb, "trunk");
    CHECK(ckpt::params_hash(ta) == ckpt::params_hash(tb));
    CHECK(max_abs_diff(bb.head.fc.w.value(), bb3.head.fc.w.value()) > 0.0);
  }

  SUBCASE("autoencoder checkpoints transfer through the same contract") {
    Rng ar(31);
    enc::AutoencoderParams ae(ecfg, false, ar);
    nn::ParamRegistry areg;
    ae.collect(areg, "");
    ckpt::Checkpoint ack = ckpt::snapshot(areg, "ae", cj.dump(), 99, nullptr);
    Rng r(12);
    BackboneParams bb = transfer_weights(ack, r, 16);
    CHECK(bb.provenance == "ae");
    Rng xr(100);
    Tensor x = Tensor::randn({1, 3, 16, 16}, xr, 0.7);
    CHECK(max_abs_diff(eval_trunk(ae.trunk, x), eval_trunk(bb.trunk, x)) == 0.0);
  }

  SUBCASE("layout mismatch produces a per-tensor shape diff") {
    BackboneConfig wide = micro_backbone();
    wide.trunk_width = 8;
    Rng r(5);
    try {
      transfer_weights(ck, wide, r);
      FAIL("expected PrerequisiteError");
    } catch (const PrerequisiteError& e) {
      std::string msg = e.what();
      CHECK(msg.find("trunk.stem.w") != std::string::npos);
      CHECK(msg.find(" vs ") != std::string::npos);
    }
  }

  SUBCASE("stage and config validation") {
    ckpt::Checkpoint wrong = ck;
    wrong.stage = "gan";
    Rng r(5);
    CHECK_THROWS_AS(transfer_weights(wrong, r, 16), PrerequisiteError);
    ckpt::Checkpoint noenc = ck;
    noenc.config_json = "{}";
    CHECK_THROWS_AS(transfer_weights(noenc, r, 16), PrerequisiteError);
  }
}

TEST_CASE("interpolation: endpoint, label weights and lambda law") {
  Rng rng(77);
  gan::GanConfig gcfg = gan::GanConfig::desk();
  gcfg.resolution = 8;
  gcfg.latent_dim = 8;
  gcfg.mapping_layers = 2;
  gcfg.channel_base = 64;
  gcfg.channel_max = 16;
  gan::Generator gen(gcfg, rng);

  enc::EncoderConfig ecfg = micro_encoder(8);
  ecfg.trunk_width = 2;
  ecfg.use_squeeze_excitation = false;
  enc::EncoderParams ep(ecfg, gen.synthesis.style_count(), gcfg.latent_dim, rng);

  Rng fr_rng(3);
  Image8 i1 = testsupport::render_face(testsupport::with_nuisance(testsupport::identity_params(1), fr_rng), 8);
  Image8 i2 = testsupport::render_face(testsupport::with_nuisance(testsupport::identity_params(2), fr_rng), 8);

  SUBCASE("lambda = 0 equals the reconstruction of I2") {
    auto [img, label] = make_interpolation_at(i1, i2, 7, 9, ep, gen, 0.0);
    CHECK(img.shape == std::vector<int>{3, 8, 8});
    CHECK(label.index_a == 9);
    CHECK(label.weight_a == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(label.index_b == 7);
    CHECK(label.weight_b == doctest::Approx(0.0).epsilon(1e-15));

    Tensor code = enc::encode(ep, image_to_tensor(i2));
    std::vector<ag::Var> styles;
    for (int l = 0; l < code.dim(0); ++l) {
      Tensor row({1, code.dim(1)});
      std::copy_n(code.d.begin() + static_cast<size_t>(l) * code.dim(1), code.dim(1), row.d.begin());
      styles.push_back(ag::Var::constant(std::move(row)));
    }
    ag::NoGradGuard ng;
    Tensor recon = gen.synthesis.forward(styles, nullptr).value().reshaped({3, 8, 8});
    CHECK(max_abs_diff(img, recon) == 0.0);
  }

  SUBCASE("weights always sum to one and follow the formula ordering") {
    auto [img, label] = make_interpolation_at(i1, i2, 7, 9, ep, gen, 0.7);
    (void)img;
    CHECK(label.index_a == 9);   // id of I2 carries weight 1 - lambda
    CHECK(label.weight_a == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(label.index_b == 7);
    CHECK(label.weight_b == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(label.weight_a + label.weight_b == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(make_interpolation_at(i1, i2, 7, 9, ep, gen, 1.5), std::invalid_argument);
  }

  SUBCASE("10,000 lambda draws concentrate at mean 0.5") {
    Rng lam_rng(123);
    double sum = 0.0;
    for (int n = 0; n < 10000; ++n) {
      auto [img, label] = make_interpolation(i1, i2, 1, 2, ep, gen, lam_rng);
      (void)img;
      sum += label.weight_b;  // weight on id(I1) is lambda itself
    }
    CHECK(sum / 10000.0 == doctest::Approx(0.5).epsilon(0.04));
    CHECK(std::fabs(sum / 10000.0 - 0.5) < 0.02);
  }

  SUBCASE("pool builder") {
    fs::path root = temp_dir("fr_pool");
    Rng prng(9);
    for (int id = 0; id < 2; ++id) {
      fs::create_directories(root / ("p" + std::to_string(id)));
      auto photos = testsupport::render_identity_photos(40 + id, 2, 8, prng);
      for (size_t j = 0; j < photos.size(); ++j)
        save_image((root / ("p" + std::to_string(id)) / (std::to_string(j) + ".png")).string(),
                   photos[j]);
    }
    IdentityDataset ds = IdentityDataset::from_directory(root.string());
    Rng pool_rng(17);
    std::vector<InterpSample> pool = build_interpolation_pool(ds, ep, gen, 5, pool_rng);
    CHECK(pool.size() == 5);
    for (const auto& s : pool) {
      CHECK(s.image.h == 8);
      CHECK(s.image.w == 8);
      CHECK(s.label.index_a != s.label.index_b);
      CHECK((s.label.index_a == 0 || s.label.index_a == 1));
      CHECK(s.label.weight_a + s.label.weight_b == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(s.lambda == doctest::Approx(s.label.weight_b).epsilon(1e-15));
    }
    std::vector<IdentityImage> one_id(ds.rows().begin(), ds.rows().begin() + 2);
    CHECK_THROWS_AS(build_interpolation_pool(IdentityDataset(one_id), ep, gen, 2, pool_rng),
                    PrerequisiteError);
  }
}

TEST_CASE("augment_batch: crop size, determinism, flip statistics") {
  Image8 img(30, 40);
  Rng fill(1);
  for (auto& v : img.rgb) v = static_cast<uint8_t>(fill.below(256));

  SUBCASE("output size and determinism") {
    Rng r1(5), r2(5);
    Image8 a = augment_batch(img, r1);
    CHECK(a.h == 112);
    CHECK(a.w == 112);
    Image8 b = augment_batch(img, r2);
    CHECK(a.rgb == b.rgb);
    Image8 c = augment_batch(img, r1, 20, 16);
    CHECK(c.h == 16);
    CHECK(c.w == 16);
    CHECK_THROWS_AS(augment_batch(img, r1, 16, 20), std::invalid_argument);
    CHECK_THROWS_AS(augment_batch(Image8(), r1), std::invalid_argument);
  }

  SUBCASE("crop window and flip replicate the documented rng draw order") {
    Rng ra(9);
    Image8 got = augment_batch(img, ra, 20, 16);
    Rng rb(9);
    Image8 sized = resize_image(img, 20, 20);
    int y0 = static_cast<int>(rb.below(5));
    int x0 = static_cast<int>(rb.below(5));
    Image8 want(16, 16);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c) want.at(y, x, c) = sized.at(y0 + y, x0 + x, c);
    if (rb.bernoulli(0.5)) want = flip_horizontal(want);
    CHECK(got.rgb == want.rgb);
  }

  SUBCASE("flip is an exact involution") {
    CHECK(flip_horizontal(flip_horizontal(img)).rgb == img.rgb);
  }

  SUBCASE("flip frequency is 0.5 +- 0.02 over 10,000 draws") {
    // With resize == crop the only randomness left is the flip.
    Image8 base(10, 10);
    for (int y = 0; y < 10; ++y)
      for (int x = 0; x < 10; ++x)
        for (int c = 0; c < 3; ++c) base.at(y, x, c) = static_cast<uint8_t>(x * 25);
    Image8 flipped = flip_horizontal(base);
    Rng r(31);
    int flips = 0;
    for (int n = 0; n < 10000; ++n) {
      Image8 out = augment_batch(base, r, 10, 10);
      if (out.rgb == flipped.rgb) ++flips;
      else REQUIRE(out.rgb == base.rgb);
    }
    CHECK(std::fabs(flips / 10000.0 - 0.5) < 0.02);
  }
}

TEST_CASE("identity dataset loaders and subsample nesting") {
  SUBCASE("directory layout") {
    fs::path root = temp_dir("fr_ds_dir");
    Rng rng(2);
    fs::create_directories(root / "b_person");
    fs::create_directories(root / "a_person");
    auto pa = testsupport::render_identity_photos(1, 1, 12, rng);
    auto pb = testsupport::render_identity_photos(2, 2, 12, rng);
    save_image((root / "a_person" / "0.png").string(), pa[0]);
    save_image((root / "b_person" / "0.png").string(), pb[0]);
    save_image((root / "b_person" / "1.png").string(), pb[1]);

    IdentityDataset ds = IdentityDataset::from_directory(root.string());
    CHECK(ds.size() == 3);
    CHECK(ds.identity_count() == 2);
    CHECK(ds.identity_ids() == std::vector<int64_t>{0, 1});
    CHECK(ds.images_of(0).size() == 1);  // a_person sorts first
    CHECK(ds.images_of(1).size() == 2);
    Image8 loaded = ds.load(ds.images_of(0)[0]);
    CHECK(loaded.rgb == pa[0].rgb);
    CHECK_THROWS_AS(ds.images_of(7), std::invalid_argument);
    CHECK_THROWS_AS(IdentityDataset::from_directory((root / "missing").string()), IngestError);
    fs::path empty_root = temp_dir("fr_ds_empty");
    CHECK_THROWS_AS(IdentityDataset::from_directory(empty_root.string()), IngestError);
  }

  SUBCASE("csv manifest") {
    fs::path root = temp_dir("fr_ds_csv");
    Rng rng(3);
    auto photos = testsupport::render_identity_photos(5, 2, 12, rng);
    save_image((root / "x0.png").string(), photos[0]);
    save_image((root / "x1.png").string(), photos[1]);
    {
      std::ofstream f(root / "manifest.csv");
      f << "image_path,identity_id,group_id\n";
      f << "x0.png,7,1\n";
      f << (root / "x1.png").string() << ",9,2\n";
    }
    IdentityDataset ds = IdentityDataset::from_csv((root / "manifest.csv").string());
    CHECK(ds.size() == 2);
    CHECK(ds.identity_ids() == std::vector<int64_t>{7, 9});
    CHECK(ds.row(0).group_id == 1);
    CHECK(ds.row(1).group_id == 2);
    CHECK(ds.load(0).rgb == photos[0].rgb);  // relative path resolved

    {
      std::ofstream f(root / "bad.csv");
      f << "x0.png,7\n";
    }
    CHECK_THROWS_AS(IdentityDataset::from_csv((root / "bad.csv").string()), IngestError);
    {
      std::ofstream f(root / "bad2.csv");
      f << "x0.png,seven,1\n";
    }
    CHECK_THROWS_AS(IdentityDataset::from_csv((root / "bad2.csv").string()), IngestError);
    CHECK_THROWS_AS(IdentityDataset::from_csv((root / "nope.csv").string()), IngestError);
  }

  SUBCASE("subsample: rounding, nesting, whole identities") {
    std::vector<IdentityImage> rows;
    for (int64_t id = 0; id < 28000; ++id) rows.push_back({"img", id, 0});
    IdentityDataset big(std::move(rows));
    IdentityDataset pct1 = subsample_identities(big, 0.01, 42);
    CHECK(pct1.identity_count() == 280);
    IdentityDataset pct10 = subsample_identities(big, 0.1, 42);
    CHECK(pct10.identity_count() == 2800);
    std::set<int64_t> big_set(pct10.identity_ids().begin(), pct10.identity_ids().end());
    for (int64_t id : pct1.identity_ids()) CHECK(big_set.count(id) == 1);

    IdentityDataset all = subsample_identities(big, 1.0, 42);
    CHECK(all.identity_count() == 28000);
    CHECK(all.size() == big.size());

    IdentityDataset other_seed = subsample_identities(big, 0.01, 43);
    CHECK(other_seed.identity_ids() != pct1.identity_ids());
    IdentityDataset same_seed = subsample_identities(big, 0.01, 42);
    CHECK(same_seed.identity_ids() == pct1.identity_ids());

    CHECK_THROWS_AS(subsample_identities(big, 0.0, 1), std::invalid_argument);
    CHECK_THROWS_AS(subsample_identities(big, -0.1, 1), std::invalid_argument);
    CHECK_THROWS_AS(subsample_identities(big, 1.01, 1), std::invalid_argument);

    std::vector<IdentityImage> multi;
    for (int64_t id = 0; id < 50; ++id)
      for (int j = 0; j < 2; ++j) multi.push_back({"img", id, 0});
    IdentityDataset md(std::move(multi));
    IdentityDataset half = subsample_identities(md, 0.5, 7);
    CHECK(half.identity_count() == 25);
    CHECK(half.size() == 50);  // both images of every kept identity retained
    for (int64_t id : half.identity_ids()) CHECK(half.images_of(id).size() == 2);
  }
}

namespace {

// Renders `n_ids` synthetic identities with `per_id` photos each into a
// directory-per-identity tree and opens it as a dataset.
IdentityDataset toy_faces(const fs::path& root, int n_ids, int per_id, int size, uint64_t seed) {
  Rng rng(seed);
  for (int i = 0; i < n_ids; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "id_%03d", i);
    fs::create_directories(root / name);
    auto photos = testsupport::render_identity_photos(1000 + static_cast<uint64_t>(i), per_id,
                                                      size, rng);
    for (size_t j = 0; j < photos.size(); ++j)
      save_image((root / name / (std::to_string(j) + ".png")).string(), photos[j]);
  }
  return IdentityDataset::from_directory(root.string());
}

}  // namespace

TEST_CASE("finetune: freeze contract, lr schedule, checkpoint round trip") {
  fs::path root = temp_dir("fr_ft_small");
  IdentityDataset ds = toy_faces(root / "data", 4, 2, 16, 50);

  FinetuneSchedule sched;
  sched.epochs = 11;
  sched.freeze_epochs = 2;
  sched.batch_size = 8;
  sched.resize_to = 18;
  sched.validate(16);

  Rng rng(60);
  BackboneParams bb(micro_backbone(16), rng);
  bb.init_classes(4, rng);

  // Snapshot every parameter and the normalization statistics before training.
  nn::ParamRegistry before;
  bb.collect(before, "");
  std::vector<std::pair<std::string, Tensor>> prior_params;
  for (const auto& [name, var] : before.params) prior_params.emplace_back(name, var.value());
  std::vector<std::pair<std::string, Tensor>> prior_state;
  for (const auto& [name, ptr] : before.state) prior_state.emplace_back(name, *ptr);

  SUBCASE("single frozen epoch leaves non-trainable parameters bit-identical") {
    FinetuneSchedule one = sched;
    one.epochs = 1;
    one.freeze_epochs = 1;
    Rng frng(61);
    finetune(ds, bb, one, LossKind::arcface, frng);

    auto is_trainable = [](const std::string& n) {
      return n.rfind("trunk.stem", 0) == 0 || n.rfind("head", 0) == 0 || n == "class_weights";
    };
    nn::ParamRegistry after;
    bb.collect(after, "");
    int frozen_checked = 0;
    double trainable_moved = 0.0;
    for (size_t i = 0; i < after.params.size(); ++i) {
      const auto& [name, var] = after.params[i];
      REQUIRE(prior_params[i].first == name);
      double d = max_abs_diff(prior_params[i].second, var.value());
      if (is_trainable(name)) {
        trainable_moved = std::max(trainable_moved, d);
      } else {
        CHECK_MESSAGE(d == 0.0, name);
        ++frozen_checked;
      }
    }
    CHECK(frozen_checked > 0);
    CHECK(trainable_moved > 0.0);
    // Normalization statistics stay pinned while the trunk is frozen.
    for (size_t i = 0; i < after.state.size(); ++i) {
      REQUIRE(prior_state[i].first == after.state[i].first);
      CHECK_MESSAGE(max_abs_diff(prior_state[i].second, *after.state[i].second) == 0.0,
                    after.state[i].first);
    }
  }

  SUBCASE("lr follows the step decay and the checkpoint round-trips") {
    FinetuneOptions opts;
    opts.out_dir = root / "run";
    FinetuneStats stats;
    Rng frng(62);
    ckpt::Checkpoint ck = finetune(ds, bb, sched, LossKind::arcface, frng, nullptr, opts, &stats);

    REQUIRE(stats.epoch_lr.size() == 11);
    CHECK(stats.epoch_lr[0] == doctest::Approx(0.03).epsilon(1e-15));
    CHECK(stats.epoch_lr[4] == doctest::Approx(0.03).epsilon(1e-15));
    CHECK(stats.epoch_lr[5] == doctest::Approx(0.03 / 1.5).epsilon(1e-15));
    CHECK(stats.epoch_lr[10] == doctest::Approx(0.03 / 2.25).epsilon(1e-15));
    CHECK(stats.samples_seen == 11 * 8);
    CHECK(stats.epoch_loss.size() == 11);
    CHECK(stats.epoch_accuracy.size() == 11);

    CHECK(ck.stage == "facerec");
    CHECK(ck.samples_seen == 88);
    nlohmann::json cj = nlohmann::json::parse(ck.config_json);
    CHECK(cj["provenance"] == "scratch");
    CHECK(cj["num_classes"] == 4);
    CHECK(cj["loss_kind"] == "arcface");
    CHECK(cj["schedule"]["epochs"] == 11);
    CHECK(nlohmann::json::parse(ck.extra_json)["provenance"] == "scratch");
    CHECK(fs::exists(opts.out_dir / "facerec.ckpt"));

    std::ifstream log(opts.out_dir / "finetune_log.jsonl");
    REQUIRE(log.good());
    std::string line;
    int lines = 0;
    bool saw_frozen = false, saw_thawed = false;
    while (std::getline(log, line)) {
      nlohmann::json rec = nlohmann::json::parse(line);
      CHECK(rec.contains("epoch"));
      CHECK(rec.contains("lr"));
      CHECK(rec.contains("loss"));
      CHECK(rec.contains("accuracy"));
      if (rec["frozen"].get<bool>()) saw_frozen = true;
      else saw_thawed = true;
      ++lines;
    }
    CHECK(lines == 11);
    CHECK(saw_frozen);
    CHECK(saw_thawed);

    // Round trip: the restored backbone embeds identically.
    BackboneParams re = load_backbone(ck);
    CHECK(re.provenance == "scratch");
    CHECK(re.num_classes() == 4);
    Image8 probe = ds.load(0);
    CHECK(max_abs_diff(embed(bb, probe), embed(re, probe)) == 0.0);

    ckpt::Checkpoint wrong = ck;
    wrong.stage = "encoder";
    CHECK_THROWS_AS(load_backbone(wrong), PrerequisiteError);
  }

  SUBCASE("input validation") {
    Rng frng(63);
    CHECK_THROWS_AS(finetune(IdentityDataset(), bb, sched, LossKind::arcface, frng),
                    PrerequisiteError);
    FinetuneSchedule bad = sched;
    bad.resize_to = 12;  // smaller than the 16px input
    CHECK_THROWS_AS(finetune(ds, bb, bad, LossKind::arcface, frng), ConfigError);
  }

  SUBCASE("interpolation pool mixes in and is validated") {
    FinetuneSchedule two = sched;
    two.epochs = 2;
    std::vector<InterpSample> pool;
    Rng prng(64);
    for (int n = 0; n < 3; ++n) {
      InterpSample s;
      s.image = testsupport::render_face(testsupport::identity_params(500 + static_cast<uint64_t>(n)), 16);
      s.lambda = 0.25 * (n + 1);
      s.label = TwoHotLabel::from_lambda(n % 4, (n + 1) % 4, s.lambda);
      pool.push_back(std::move(s));
    }
    FinetuneStats stats;
    Rng frng(65);
    ckpt::Checkpoint ck = finetune(ds, bb, two, LossKind::arcface, frng, &pool, {}, &stats);
    CHECK(ck.samples_seen == 2 * (8 + 3));
    CHECK(stats.samples_seen == 22);

    std::vector<InterpSample> bad_pool = pool;
    bad_pool[0].label.index_a = 999;  // identity absent from the dataset
    CHECK_THROWS_AS(finetune(ds, bb, two, LossKind::arcface, frng, &bad_pool),
                    std::invalid_argument);
  }

  SUBCASE("sphereface path runs") {
    FinetuneSchedule two = sched;
    two.epochs = 2;
    FinetuneStats stats;
    Rng frng(66);
    ckpt::Checkpoint ck = finetune(ds, bb, two, LossKind::sphereface, frng, nullptr, {}, &stats);
    CHECK(nlohmann::json::parse(ck.config_json)["loss_kind"] == "sphereface");
    for (double l : stats.epoch_loss) CHECK(std::isfinite(l));
  }
}

TEST_CASE("finetune learns a 20-identity toy set") {
  fs::path root = temp_dir("fr_ft_toy");
  IdentityDataset ds = toy_faces(root / "data", 20, 4, 16, 90);
  REQUIRE(ds.identity_count() == 20);

  BackboneConfig bc = micro_backbone(16);
  bc.trunk_width = 8;  // a little extra capacity so the fit clears 90% comfortably
  Rng rng(91);
  BackboneParams bb(bc, rng);

  // Margins scaled to the toy problem (the paper-scale s=64/m=0.5 pair is for
  // tens of thousands of identities, not 20).
  FinetuneSchedule sched;
  sched.epochs = 30;
  sched.freeze_epochs = 0;
  sched.batch_size = 8;
  sched.resize_to = 16;  // flips only; crop jitter adds nothing at 16px
  sched.lr0 = 0.05;
  sched.lr_decay_every = 10;
  sched.margin_s = 16.0;
  sched.margin_m = 0.2;
  sched.conv_dropout = 0.0;

  FinetuneStats stats;
  Rng frng(92);
  finetune(ds, bb, sched, LossKind::arcface, frng, nullptr, {}, &stats);

  double best_late = 0.0;
  for (size_t i = stats.epoch_accuracy.size() - 5; i < stats.epoch_accuracy.size(); ++i)
    best_late = std::max(best_late, stats.epoch_accuracy[i]);
  CHECK_MESSAGE(best_late > 0.9, "late-epoch accuracy " << best_late);
}

}  // TEST_SUITE
