// Feature distillation: temperature-softmax KL against hand values and the
// serial reference, its invariances (zero at equality, shift invariance,
// flat high-temperature limit), the constant-teacher property, the combined
// objective, metrics CSV output, and trainer behavior (parameter movement,
// teacher independence at lambda_kd = 0, single-agent degeneration, and the
// divergence guard).

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "coopercept/distill.hpp"
#include "coopercept/reference.hpp"
#include "coopercept/rng.hpp"
#include "doctest.h"
#include "support/testutil.hpp"

using namespace coopercept;
using coopref::dvec;
using testsupport::random_normal;

namespace {

Tensor two_channel(float a, float b) {
  Tensor t = Tensor::zeros({1, 2, 1, 1});
  auto d = t.mutable_data();
  d[0] = a;
  d[1] = b;
  return t;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

sim::SceneGenConfig tiny_scene(int n_agents, bool rsu) {
  sim::SceneGenConfig sc;
  sc.n_vehicles = 4;
  sc.n_agents = n_agents;
  sc.roadside_unit = rsu;
  sc.x_min = -9.6;
  sc.x_max = 9.6;
  sc.y_min = -9.6;
  sc.y_max = 9.6;
  sc.lane_ys = {-2.2, 2.2};
  sc.azimuth_step_deg = 1.0;
  sc.rings_vehicle = 10;
  sc.rings_infra = 14;
  sc.max_range = 40.0;
  return sc;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto ad = a.data(), bd = b.data();
  for (size_t i = 0; i < ad.size(); ++i)
    if (ad[i] != bd[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("kd loss: hand values for a two-channel location") {
  Tensor teacher = two_channel(2.0f, 0.0f);
  Tensor student = two_channel(0.0f, 2.0f);

  // T=1: p=(e^2,1)/Z, q reversed; KL = (p1-p2)*2 = 2*tanh(1).
  double t1 = kd_loss(teacher, student, 1.0f).item();
  CHECK(t1 == doctest::Approx(1.523188).epsilon(1e-4));

  // T=2: logits halve; KL = tanh(0.5).
  double t2 = kd_loss(teacher, student, 2.0f).item();
  CHECK(t2 == doctest::Approx(0.462117).epsilon(1e-4));
}

TEST_CASE("kd loss: identical features give exactly zero") {
  Rng rng(7);
  Tensor f = random_normal({1, 4, 3, 2}, rng);
  CHECK(kd_loss(f, f, 1.0f).item() == 0.0);
  CHECK(kd_loss(f, f, 10.0f, true).item() == 0.0);
}

TEST_CASE("kd loss: non-negative and shift invariant") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(100 + seed);
    Tensor t = random_normal({1, 5, 2, 3}, rng);
    Tensor s = random_normal({1, 5, 2, 3}, rng);
    double base = kd_loss(t, s, 2.0f).item();
    CHECK(base >= -1e-7);

    // Adding a constant to every channel of either input leaves the
    // temperature softmax, and hence the loss, unchanged.
    double shifted = kd_loss(add_const(t, 3.7f), add_const(s, -1.2f), 2.0f).item();
    CHECK(std::abs(shifted - base) < 1e-5);
  }
}

TEST_CASE("kd loss: a huge temperature flattens both distributions") {
  Rng rng(42);
  Tensor t = random_normal({1, 8, 4, 4}, rng);
  Tensor s = random_normal({1, 8, 4, 4}, rng);
  CHECK(kd_loss(t, s, 1e6f).item() < 1e-6);
}

TEST_CASE("kd loss matches the serial reference in both views") {
  int c = 6, h = 3, w = 2, hw = h * w;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(500 + seed);
    Tensor t = random_normal({1, c, h, w}, rng);
    Tensor s = random_normal({1, c, h, w}, rng);
    float temp = 1.0f + static_cast<float>(rng.uniform()) * 9.0f;

    auto td = t.data();
    auto sd = s.data();

    // Channel view: one distribution per location.
    dvec zt(static_cast<size_t>(hw) * c), zs(zt.size());
    for (int i = 0; i < hw; ++i)
      for (int ch = 0; ch < c; ++ch) {
        zt[static_cast<size_t>(i) * c + ch] = td[static_cast<size_t>(ch) * hw + i];
        zs[static_cast<size_t>(i) * c + ch] = sd[static_cast<size_t>(ch) * hw + i];
      }
    double want = coopref::kd_kl(zt, zs, hw, c, temp);
    double got = kd_loss(t, s, temp, false).item();
    CHECK(std::abs(got - want) <= 1e-5 * std::max(1.0, std::abs(want)));

    // Spatial view: one distribution per channel.
    dvec zt2(td.begin(), td.end()), zs2(sd.begin(), sd.end());
    double want2 = coopref::kd_kl(zt2, zs2, c, hw, temp);
    double got2 = kd_loss(t, s, temp, true).item();
    CHECK(std::abs(got2 - want2) <= 1e-5 * std::max(1.0, std::abs(want2)));
  }
}

TEST_CASE("kd loss treats the teacher as a constant") {
  Rng rng(9);
  Tensor t = random_normal({1, 4, 2, 2}, rng);
  Tensor s = random_normal({1, 4, 2, 2}, rng);
  t.set_requires_grad(true);
  s.set_requires_grad(true);

  Tensor loss = kd_loss(t, s, 2.0f);
  backward(loss);

  REQUIRE(s.has_grad());
  bool student_nonzero = false;
  for (float g : s.grad())
    if (g != 0.0f) student_nonzero = true;
  CHECK(student_nonzero);

  if (t.has_grad())
    for (float g : t.grad()) CHECK(g == 0.0f);
}

TEST_CASE("kd loss input validation") {
  Rng rng(1);
  Tensor a = random_normal({1, 4, 2, 2}, rng);
  Tensor b = random_normal({1, 4, 2, 3}, rng);
  CHECK_THROWS_AS(kd_loss(a, b, 1.0f), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss(a, a, 0.0f), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss(a, a, -2.0f), std::invalid_argument);
  Tensor three = Tensor::zeros({4, 2, 2});
  CHECK_THROWS_AS(kd_loss(three, three, 1.0f), std::invalid_argument);
}

TEST_CASE("total loss is the weighted sum of its parts") {
  KdConfig cfg;
  cfg.lambda_det = 1.0f;
  cfg.lambda_kd = 2.0f;
  Tensor det = Tensor::scalar(1.0f);
  Tensor kd = Tensor::scalar(0.5f);
  CHECK(total_loss(det, kd, cfg).item() == 2.0);

  cfg.lambda_kd = 0.0f;
  CHECK(total_loss(det, kd, cfg).item() == 1.0);
}

TEST_CASE("epoch metrics serialize as epoch,l_det,l_kd,l_total,lr") {
  std::vector<EpochMetrics> rows(2);
  rows[0] = {0, 1.5, 0.25, 1.75, 0.001};
  rows[1] = {1, 1.25, 0.125, 1.375, 0.001};
  std::string path = "metrics_test.csv";
  save_metrics_csv(path, rows);
  CHECK(read_file(path) ==
        "epoch,l_det,l_kd,l_total,lr\n"
        "0,1.5,0.25,1.75,0.001\n"
        "1,1.25,0.125,1.375,0.001\n");
  std::remove(path.c_str());
}

TEST_CASE("one training step produces finite losses and moves parameters") {
  RunConfig cfg = RunConfig::for_preset("tiny", 33);
  cfg.strategy = "ahd";
  PerceptionModel model;
  model.init(cfg);

  sim::SceneFrame frame = sim::generate_scene(tiny_scene(2, false), 51);
  frame.frame_id = 0;

  auto before = model.params();
  std::vector<float> snapshot(before[0].t.data().begin(), before[0].t.data().end());

  Trainer trainer(model, cfg);
  auto [l_det, l_kd, l_total] = trainer.step(frame, 0);
  CHECK(std::isfinite(l_det));
  CHECK(std::isfinite(l_kd));
  CHECK(std::isfinite(l_total));
  CHECK(l_kd > 0.0);  // teacher and student disagree at init
  // The objective also carries the teacher's own detection loss, so it
  // strictly exceeds the student's share.
  CHECK(l_total > l_det + l_kd);

  bool moved = false;
  auto now = before[0].t.data();
  for (size_t i = 0; i < snapshot.size(); ++i)
    if (snapshot[i] != now[i]) moved = true;
  CHECK(moved);
}

TEST_CASE("with lambda_kd = 0 the student never sees the teacher") {
  RunConfig cfg = RunConfig::for_preset("tiny", 44);
  cfg.strategy = "ahd";
  cfg.kd.lambda_kd = 0.0f;

  std::vector<sim::SceneFrame> frames;
  for (int i = 0; i < 2; ++i) {
    frames.push_back(sim::generate_scene(tiny_scene(2, false), 600 + static_cast<uint64_t>(i)));
    frames.back().frame_id = i;
  }

  PerceptionModel a, b;
  a.init(cfg);
  b.init(cfg);

  // Scramble model B's teacher branch; the student trajectory must not care.
  Rng noise(123);
  bool scrambled = false;
  for (auto& p : b.params())
    if (p.name.rfind("teacher", 0) == 0) {
      for (auto& v : p.t.mutable_data()) v = static_cast<float>(noise.normal());
      scrambled = true;
    }
  REQUIRE(scrambled);

  Trainer ta(a, cfg), tb(b, cfg);
  for (const auto& f : frames) {
    auto ra = ta.step(f, 0);
    auto rb = tb.step(f, 0);
    CHECK(ra[0] == rb[0]);
    CHECK(ra[1] == 0.0);
    CHECK(rb[1] == 0.0);
    CHECK(ra[2] == rb[2]);
  }
  auto pa = a.params();
  auto pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].name.rfind("teacher", 0) == 0) continue;
    CAPTURE(pa[i].name);
    CHECK(same_bits(pa[i].t, pb[i].t));
  }
}

TEST_CASE("lambda_kd = 0 on a single-agent frame degenerates to single-view training") {
  sim::SceneFrame frame = sim::generate_scene(tiny_scene(1, false), 77);
  frame.frame_id = 0;

  RunConfig coop_cfg = RunConfig::for_preset("tiny", 55);
  coop_cfg.strategy = "ahd";
  coop_cfg.kd.lambda_kd = 0.0f;
  PerceptionModel coop;
  coop.init(coop_cfg);

  RunConfig solo_cfg = RunConfig::for_preset("tiny", 55);
  solo_cfg.strategy = "none";
  PerceptionModel solo;
  solo.init(solo_cfg);

  Trainer tc(coop, coop_cfg), ts(solo, solo_cfg);
  auto rc = tc.step(frame, 0);
  auto rs = ts.step(frame, 0);
  CHECK(rc[0] == rs[0]);
  CHECK(rc[2] == rs[2]);

  auto pc = coop.params();
  auto ps = solo.params();
  REQUIRE(pc.size() == ps.size());
  for (size_t i = 0; i < pc.size(); ++i) {
    if (pc[i].name.rfind("teacher", 0) == 0) continue;
    CAPTURE(pc[i].name);
    CHECK(same_bits(pc[i].t, ps[i].t));
  }
}

TEST_CASE("non-finite losses abort training with a diagnostic") {
  RunConfig cfg = RunConfig::for_preset("tiny", 66);
  cfg.strategy = "none";
  PerceptionModel model;
  model.init(cfg);
  // Poison the objectness head: its logits feed the loss with no
  // rectifier in between to swallow the NaNs.
  for (auto& v : model.head().cls.w.mutable_data()) v = std::nanf("");

  sim::SceneFrame frame = sim::generate_scene(tiny_scene(1, false), 5);
  Trainer t(model, cfg);
  CHECK_THROWS_AS(t.step(frame, 0), std::runtime_error);
}

TEST_CASE("train_epoch averages the per-frame losses and applies the lr schedule") {
  RunConfig cfg = RunConfig::for_preset("tiny", 88);
  cfg.strategy = "none";
  cfg.train.lr = 1e-3f;
  cfg.train.lr_step_epochs = 2;
  cfg.train.lr_decay = 0.1f;
  PerceptionModel model;
  model.init(cfg);

  std::vector<sim::SceneFrame> frames;
  for (int i = 0; i < 2; ++i) {
    frames.push_back(sim::generate_scene(tiny_scene(2, false), 900 + static_cast<uint64_t>(i)));
    frames.back().frame_id = i;
  }

  Trainer t(model, cfg);
  EpochMetrics m0 = t.train_epoch(frames, 0);
  CHECK(m0.epoch == 0);
  CHECK(std::isfinite(m0.l_total));
  CHECK(m0.lr == doctest::Approx(1e-3));

  EpochMetrics m2 = t.train_epoch(frames, 2);
  CHECK(m2.lr == doctest::Approx(1e-4));  // decayed once after two epochs

  CHECK_THROWS_AS(t.train_epoch({}, 0), std::invalid_argument);
}
