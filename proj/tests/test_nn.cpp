// Neural building blocks: parallel f32 kernels against the serial f64
// reference, batch-norm statistics bookkeeping, the optimizer against a
// hand-rolled double-precision mirror, parameter init determinism, and the
// checkpoint container.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <vector>

#include "coopercept/nn.hpp"
#include "coopercept/reference.hpp"
#include "coopercept/rng.hpp"
#include "coopercept/tensor.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace coopercept;
using coopref::dvec;
using testsupport::max_abs_diff;
using testsupport::random_normal;
using testsupport::to_dvec;

namespace {
std::filesystem::path tmp_dir() {
  auto d = std::filesystem::temp_directory_path() / "coopercept_test_nn";
  std::filesystem::create_directories(d);
  return d;
}
}  // namespace

TEST_CASE("conv2d matches the serial reference") {
  struct Case {
    int n, c, h, w, oc, k, stride, pad;
    bool bias;
  };
  std::vector<Case> cases = {
      {1, 3, 8, 9, 4, 3, 1, 1, true},  {2, 5, 7, 6, 3, 3, 2, 1, true},
      {1, 4, 6, 6, 8, 1, 1, 0, true},  {1, 2, 9, 5, 4, 3, 1, 1, false},
      {2, 3, 10, 11, 6, 3, 2, 1, false},
  };
  int ci = 0;
  for (const auto& cs : cases) {
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(mix_seed(7100 + static_cast<uint64_t>(ci), seed));
      Tensor x = random_normal({cs.n, cs.c, cs.h, cs.w}, rng);
      Tensor w = random_normal({cs.oc, cs.c, cs.k, cs.k}, rng);
      Tensor b = cs.bias ? random_normal({cs.oc}, rng) : Tensor();
      Tensor y = conv2d(x, w, b, cs.stride, cs.pad);

      dvec bd = cs.bias ? to_dvec(b) : dvec();
      dvec want = coopref::conv2d(to_dvec(x), cs.n, cs.c, cs.h, cs.w, to_dvec(w), cs.oc, cs.k,
                                  cs.k, cs.bias ? bd.data() : nullptr, cs.stride, cs.pad);
      int oh = (cs.h + 2 * cs.pad - cs.k) / cs.stride + 1;
      int ow = (cs.w + 2 * cs.pad - cs.k) / cs.stride + 1;
      REQUIRE(y.shape() == Shape{cs.n, cs.oc, oh, ow});
      CHECK(testsupport::rel_linf(y.data(), want) < 1e-6);
    }
    ++ci;
  }
}

TEST_CASE("conv_transpose2d matches the serial reference") {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(mix_seed(7110, seed));
    int n = 1, c = 4, h = 5, w = 6, oc = 3, k = 2, s = 2;
    Tensor x = random_normal({n, c, h, w}, rng);
    Tensor wt = random_normal({c, oc, k, k}, rng);
    Tensor y = conv_transpose2d(x, wt, s);
    dvec want = coopref::conv_transpose2d(to_dvec(x), n, c, h, w, to_dvec(wt), oc, k, k, s);
    REQUIRE(y.shape() == Shape{n, oc, (h - 1) * s + k, (w - 1) * s + k});
    CHECK(testsupport::rel_linf(y.data(), want) < 1e-6);
  }
}

TEST_CASE("matmul, bmm and linear match the serial reference") {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(mix_seed(7120, seed));
    Tensor a = random_normal({7, 5}, rng);
    Tensor b = random_normal({5, 6}, rng);
    CHECK(testsupport::rel_linf(matmul(a, b).data(), coopref::matmul(to_dvec(a), 7, 5, to_dvec(b), 6)) <
          1e-6);

    Tensor ba = random_normal({3, 4, 5}, rng);
    Tensor bb = random_normal({3, 5, 2}, rng);
    CHECK(testsupport::rel_linf(bmm(ba, bb).data(),
                                coopref::bmm(to_dvec(ba), 3, 4, 5, to_dvec(bb), 2)) < 1e-6);

    Tensor x = random_normal({9, 5}, rng);
    Tensor w = random_normal({4, 5}, rng);
    Tensor bias = random_normal({4}, rng);
    dvec bd = to_dvec(bias);
    CHECK(testsupport::rel_linf(linear(x, w, bias).data(),
                                coopref::linear(to_dvec(x), 9, 5, to_dvec(w), 4, bd.data())) <
          1e-6);
    // no-bias variant
    CHECK(testsupport::rel_linf(linear(x, w, Tensor()).data(),
                                coopref::linear(to_dvec(x), 9, 5, to_dvec(w), 4, nullptr)) <
          1e-6);
  }
}

TEST_CASE("batch norm") {
  int N = 2, C = 3, H = 4, W = 5;

  SUBCASE("training output matches the reference, full and masked") {
    for (uint64_t seed = 1; seed <= 8; ++seed) {
      Rng rng(mix_seed(7130, seed));
      Tensor x = random_normal({N, C, H, W}, rng);
      Tensor gamma = random_normal({C}, rng);
      Tensor beta = random_normal({C}, rng);

      BnState st;
      st.init(C);
      Tensor y = batch_norm2d(x, gamma, beta, st, true);
      dvec want = coopref::batch_norm_train(to_dvec(x), N, C, H, W, to_dvec(gamma),
                                            to_dvec(beta), 1e-5, nullptr);
      CHECK(testsupport::rel_linf(y.data(), want) < 1e-5);

      SpatialMask m;
      m.n = N;
      m.h = H;
      m.w = W;
      for (int i = 0; i < N * H * W; ++i)
        m.active.push_back(static_cast<uint8_t>((i % 3) != 1));
      BnState st2;
      st2.init(C);
      Tensor ym = batch_norm2d(x, gamma, beta, st2, true, 0.1f, 1e-5f, &m);
      dvec wantm = coopref::batch_norm_train(to_dvec(x), N, C, H, W, to_dvec(gamma),
                                             to_dvec(beta), 1e-5, &m.active);
      CHECK(testsupport::rel_linf(ym.data(), wantm) < 1e-5);
    }
  }

  SUBCASE("running statistics follow (1-m)*old + m*batch with unbiased variance") {
    Rng rng(7131);
    Tensor x = random_normal({N, C, H, W}, rng);
    Tensor gamma = Tensor::from_data({C}, {1.0f, 1.0f, 1.0f});
    Tensor beta = Tensor::zeros({C});
    BnState st;
    st.init(C);
    (void)batch_norm2d(x, gamma, beta, st, true, 0.25f);

    auto xd = to_dvec(x);
    int64_t cnt = static_cast<int64_t>(N) * H * W;
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < H * W; ++i) {
          double v = xd[static_cast<size_t>((n * C + c) * H * W + i)];
          s += v;
          s2 += v * v;
        }
      double mu = s / static_cast<double>(cnt);
      double var = s2 / static_cast<double>(cnt) - mu * mu;
      double uvar = var * static_cast<double>(cnt) / static_cast<double>(cnt - 1);
      CHECK(std::abs(st.running_mean[static_cast<size_t>(c)] - 0.25 * mu) < 1e-6);
      CHECK(std::abs(st.running_var[static_cast<size_t>(c)] - (0.75 * 1.0 + 0.25 * uvar)) < 1e-6);
    }
  }

  SUBCASE("eval mode uses running statistics") {
    Rng rng(7132);
    Tensor x = random_normal({N, C, H, W}, rng);
    Tensor gamma = random_normal({C}, rng);
    Tensor beta = random_normal({C}, rng);
    BnState st;
    st.init(C);
    st.running_mean = {0.3f, -0.1f, 0.7f};
    st.running_var = {1.5f, 0.8f, 2.0f};
    Tensor y = batch_norm2d(x, gamma, beta, st, false);
    dvec rm(st.running_mean.begin(), st.running_mean.end());
    dvec rv(st.running_var.begin(), st.running_var.end());
    dvec want = coopref::batch_norm_eval(to_dvec(x), N, C, H, W, to_dvec(gamma), to_dvec(beta),
                                         rm, rv, 1e-5);
    CHECK(testsupport::rel_linf(y.data(), want) < 1e-5);
    // eval must not touch the stats
    CHECK(st.running_mean[0] == 0.3f);
    CHECK(st.running_var[2] == 2.0f);
  }

  SUBCASE("training with fewer than two active cells throws") {
    Tensor x = Tensor::zeros({1, 1, 2, 2});
    Tensor gamma = Tensor::from_data({1}, {1.0f});
    Tensor beta = Tensor::zeros({1});
    BnState st;
    st.init(1);
    SpatialMask m;
    m.n = 1;
    m.h = 2;
    m.w = 2;
    m.active = {1, 0, 0, 0};
    CHECK_THROWS_AS((void)batch_norm2d(x, gamma, beta, st, true, 0.1f, 1e-5f, &m),
                    std::invalid_argument);
  }
}

TEST_CASE("max_pool_points matches the serial reference") {
  for (uint64_t seed = 1; seed <= 8; ++seed) {
    Rng rng(mix_seed(7140, seed));
    int C = 5, P = 4, M = 6;
    Tensor x = random_normal({1, C, P, M}, rng);
    std::vector<uint8_t> mask(static_cast<size_t>(P * M), 0);
    for (int p = 0; p < P; ++p) {
      int valid = 1 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(M));
      for (int j = 0; j < valid; ++j) mask[static_cast<size_t>(p * M + j)] = 1;
    }
    Tensor y = max_pool_points(x, mask, P, M);
    dvec want = coopref::max_pool_points(to_dvec(x), C, P, M, mask);
    REQUIRE(y.shape() == Shape{P, C});
    CHECK(testsupport::rel_linf(y.data(), want) < 1e-6);
  }
}

TEST_CASE("mask_mul zeroes inactive cells exactly") {
  Rng rng(7150);
  Tensor x = random_normal({2, 3, 2, 4}, rng);
  SpatialMask m;
  m.n = 2;
  m.h = 2;
  m.w = 4;
  for (int i = 0; i < 16; ++i) m.active.push_back(static_cast<uint8_t>(i % 2));
  CHECK(m.count() == 8);
  Tensor y = mask_mul(x, m);
  auto xd = x.data();
  auto yd = y.data();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 8; ++i) {
        size_t idx = static_cast<size_t>(((n * 3 + c) * 8) + i);
        if (m.active[static_cast<size_t>(n * 8 + i)])
          CHECK(yd[idx] == xd[idx]);
        else
          CHECK(yd[idx] == 0.0f);
      }
  CHECK(SpatialMask::all_active(2, 2, 4).count() == 16);
}

TEST_CASE("scatter_pillars") {
  Tensor feats = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<std::pair<int, int>> coords = {{0, 1}, {1, 0}, {2, 3}};

  SUBCASE("values land at their cells, rest is zero") {
    Tensor img = scatter_pillars(feats, coords, 3, 4);
    REQUIRE(img.shape() == Shape{1, 2, 3, 4});
    auto d = img.data();
    auto at = [&](int c, int r, int col) { return d[static_cast<size_t>((c * 3 + r) * 4 + col)]; };
    CHECK(at(0, 0, 1) == 1.0f);
    CHECK(at(1, 0, 1) == 2.0f);
    CHECK(at(0, 1, 0) == 3.0f);
    CHECK(at(1, 2, 3) == 6.0f);
    double total = 0;
    for (float v : d) total += v;
    CHECK(total == doctest::Approx(21.0));
  }

  SUBCASE("duplicate coordinates throw") {
    std::vector<std::pair<int, int>> dup = {{0, 1}, {0, 1}, {2, 3}};
    CHECK_THROWS_AS((void)scatter_pillars(feats, dup, 3, 4), std::invalid_argument);
  }

  SUBCASE("out-of-grid coordinates throw") {
    std::vector<std::pair<int, int>> oob = {{0, 1}, {1, 4}, {2, 3}};
    CHECK_THROWS_AS((void)scatter_pillars(feats, oob, 3, 4), std::out_of_range);
  }
}

TEST_CASE("bilinear_warp applies tap weights") {
  // hand-built plan on a 1x1x2x2 input
  Tensor x = Tensor::from_data({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
  WarpPlan plan;
  plan.src_h = plan.src_w = 2;
  plan.dst_h = 1;
  plan.dst_w = 3;
  WarpPlan::Tap t0;  // pure copy of cell (0,0)
  t0.idx[0] = 0;
  t0.wgt[0] = 1.0f;
  WarpPlan::Tap t1;  // midpoint of all four cells
  for (int i = 0; i < 4; ++i) {
    t1.idx[i] = i;
    t1.wgt[i] = 0.25f;
  }
  WarpPlan::Tap t2;  // invalid cell
  plan.taps = {t0, t1, t2};
  plan.valid = {1, 1, 0};
  Tensor y = bilinear_warp(x, plan);
  REQUIRE(y.shape() == Shape{1, 1, 1, 3});
  CHECK(y.data()[0] == 1.0f);
  CHECK(y.data()[1] == doctest::Approx(2.5f));
  CHECK(y.data()[2] == 0.0f);
}

TEST_CASE("kaiming_uniform init") {
  Shape s{16, 8};
  int fan_in = 8;
  Tensor a = kaiming_uniform(s, fan_in, 42, "layer.w");
  Tensor b = kaiming_uniform(s, fan_in, 42, "layer.w");
  Tensor c = kaiming_uniform(s, fan_in, 42, "other.w");
  Tensor d = kaiming_uniform(s, fan_in, 43, "layer.w");

  // deterministic in (seed, name); independent across names and seeds
  CHECK(max_abs_diff(a.data(), to_dvec(b)) == 0.0);
  CHECK(max_abs_diff(a.data(), to_dvec(c)) > 0.0);
  CHECK(max_abs_diff(a.data(), to_dvec(d)) > 0.0);

  double bound = std::sqrt(6.0 / fan_in);
  double mean = 0.0;
  for (float v : a.data()) {
    CHECK(std::abs(v) <= bound);
    mean += v;
  }
  mean /= static_cast<double>(a.numel());
  // mean of 128 uniforms in [-b, b]: sd = b/sqrt(3*128) ~ 0.044; allow 5 sd
  CHECK(std::abs(mean) < 5.0 * bound / std::sqrt(3.0 * 128.0));
}

TEST_CASE("layers wrap their kernels") {
  Rng rng(7160);

  SUBCASE("LinearLayer") {
    LinearLayer lin;
    lin.init("lin", 4, 5, 99);
    Tensor x = random_normal({6, 5}, rng);
    Tensor y = lin.forward(x);
    dvec bd = to_dvec(lin.b);
    dvec want = coopref::linear(to_dvec(x), 6, 5, to_dvec(lin.w), 4, bd.data());
    CHECK(testsupport::rel_linf(y.data(), want) < 1e-6);
    ParamList ps;
    lin.collect(ps);
    CHECK(ps.size() == 2);
    CHECK(ps[0].name == "lin.weight");
  }

  SUBCASE("Conv2dLayer stride and padding") {
    Conv2dLayer conv;
    conv.init("conv", 4, 3, 3, 2, 1, 99);
    Tensor x = random_normal({1, 3, 9, 9}, rng);
    Tensor y = conv.forward(x);
    REQUIRE(y.shape() == Shape{1, 4, 5, 5});
    dvec bd = to_dvec(conv.b);
    dvec want =
        coopref::conv2d(to_dvec(x), 1, 3, 9, 9, to_dvec(conv.w), 4, 3, 3, bd.data(), 2, 1);
    CHECK(testsupport::rel_linf(y.data(), want) < 1e-6);
  }

  SUBCASE("no-bias conv leaves b undefined") {
    Conv2dLayer conv;
    conv.init("conv", 4, 3, 3, 1, 1, 99, /*bias=*/false);
    CHECK(!conv.b.defined());
    ParamList ps;
    conv.collect(ps);
    CHECK(ps.size() == 1);
  }
}

TEST_CASE("Adam matches a double-precision mirror") {
  // one parameter vector, five steps of fixed synthetic gradients
  const int n = 4;
  Tensor p = Tensor::from_data({n}, {0.5f, -1.0f, 2.0f, 0.0f});
  p.set_requires_grad(true);
  ParamList params{{"p", p}};

  Adam opt;
  opt.lr = 0.01f;

  std::vector<double> pd = {0.5, -1.0, 2.0, 0.0};
  std::vector<double> m(n, 0.0), v(n, 0.0);
  double b1 = opt.beta1, b2 = opt.beta2, eps = opt.eps, lr = opt.lr;

  for (int step = 1; step <= 5; ++step) {
    std::vector<float> g(n);
    for (int i = 0; i < n; ++i)
      g[static_cast<size_t>(i)] = static_cast<float>(0.1 * (i + 1) * ((step % 2 == 0) ? -1 : 1));

    // drive the tensor's grad buffer directly
    Tensor loss = reduce_sum(mul(params[0].t, Tensor::from_data({n}, g)));
    Adam::zero_grad(params);
    backward(loss);
    opt.step(params);

    for (int i = 0; i < n; ++i) {
      double gi = g[static_cast<size_t>(i)];
      m[static_cast<size_t>(i)] = b1 * m[static_cast<size_t>(i)] + (1 - b1) * gi;
      v[static_cast<size_t>(i)] = b2 * v[static_cast<size_t>(i)] + (1 - b2) * gi * gi;
      double mh = m[static_cast<size_t>(i)] / (1 - std::pow(b1, step));
      double vh = v[static_cast<size_t>(i)] / (1 - std::pow(b2, step));
      pd[static_cast<size_t>(i)] -= lr * mh / (std::sqrt(vh) + eps);
    }
    for (int i = 0; i < n; ++i)
      CHECK(std::abs(params[0].t.data()[static_cast<size_t>(i)] - pd[static_cast<size_t>(i)]) <
            1e-6);
  }

  // first-step update magnitude is ~lr regardless of gradient scale
  Tensor q = Tensor::from_data({1}, {3.0f});
  q.set_requires_grad(true);
  ParamList qs{{"q", q}};
  Adam opt2;
  opt2.lr = 0.05f;
  Tensor loss = scale(qs[0].t, 1234.5f);
  backward(loss);
  opt2.step(qs);
  CHECK(std::abs((3.0f - qs[0].t.data()[0]) - 0.05f) < 1e-4f);

  // zero_grad resets accumulated gradients
  Adam::zero_grad(qs);
  REQUIRE(qs[0].t.has_grad());
  CHECK(qs[0].t.grad()[0] == 0.0f);
}

TEST_CASE("NamedTensorMap round-trips bit-exactly") {
  auto dir = tmp_dir();
  auto path = dir / "roundtrip.cpkt";

  NamedTensorMap out;
  Rng rng(7170);
  out.put("alpha", Shape{2, 3}, {1.0f, -2.5f, 3.25f, 0.0f, 1e-20f, 42.0f});
  std::vector<float> big;
  for (int i = 0; i < 1000; ++i) big.push_back(static_cast<float>(rng.normal()));
  out.put("beta.w", Shape{10, 10, 10}, big);
  out.put("scalar", Shape{1}, {7.0f});
  out.save(path);

  NamedTensorMap in = NamedTensorMap::load(path);
  REQUIRE(in.items.size() == 3);
  CHECK(in.items.at("alpha").first == Shape{2, 3});
  CHECK(in.items.at("alpha").second == out.items.at("alpha").second);
  CHECK(in.items.at("beta.w").second == big);
  CHECK(in.items.at("scalar").second[0] == 7.0f);

  SUBCASE("missing file throws") {
    CHECK_THROWS((void)NamedTensorMap::load(dir / "does_not_exist.cpkt"));
  }

  SUBCASE("corrupted magic throws") {
    auto bad = dir / "bad_magic.cpkt";
    std::ofstream f(bad, std::ios::binary);
    f << "NOPE" << std::string(64, '\0');
    f.close();
    CHECK_THROWS((void)NamedTensorMap::load(bad));
  }

  SUBCASE("truncated payload throws") {
    auto trunc = dir / "trunc.cpkt";
    std::ifstream src(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(src)),
                            std::istreambuf_iterator<char>());
    std::ofstream dst(trunc, std::ios::binary);
    dst.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    dst.close();
    CHECK_THROWS((void)NamedTensorMap::load(trunc));
  }
}
