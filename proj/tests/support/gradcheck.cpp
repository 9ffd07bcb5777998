#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "coopercept/detection.hpp"
#include "coopercept/distill.hpp"
#include "coopercept/fusion.hpp"
#include "coopercept/geometry.hpp"
#include "coopercept/nn.hpp"
#include "coopercept/reference.hpp"

namespace testsupport {

using namespace coopercept;

double run_fd_case(const FdCase& c, uint64_t seed) {
  Rng rng(mix_seed(seed, c.name));
  std::vector<Tensor> inputs;
  for (size_t i = 0; i < c.shapes.size(); ++i) {
    std::vector<float> vals(static_cast<size_t>(shape_numel(c.shapes[i])));
    if (c.fill) {
      c.fill(rng, i, vals);
    } else {
      for (auto& v : vals) v = static_cast<float>(rng.normal());
    }
    inputs.push_back(Tensor::from_data(c.shapes[i], std::move(vals)).set_requires_grad(true));
  }

  Tensor loss = c.build(inputs);
  if (loss.numel() != 1) throw std::logic_error(c.name + ": loss is not scalar");
  backward(loss);

  std::vector<dvec> darrays;
  for (const auto& t : inputs) {
    auto d = t.data();
    darrays.emplace_back(d.begin(), d.end());
  }

  std::vector<int> check = c.check;
  if (check.empty())
    for (size_t i = 0; i < inputs.size(); ++i) check.push_back(static_cast<int>(i));

  double max_diff = 0.0, max_fd = 0.0;
  for (int ci : check) {
    dvec& x = darrays[static_cast<size_t>(ci)];
    std::span<const float> g_ad =
        inputs[static_cast<size_t>(ci)].has_grad()
            ? inputs[static_cast<size_t>(ci)].grad()
            : std::span<const float>();
    for (size_t j = 0; j < x.size(); ++j) {
      double v = x[j];
      x[j] = v + c.h;
      double fp = c.ref(darrays);
      x[j] = v - c.h;
      double fm = c.ref(darrays);
      x[j] = v;
      double g_fd = (fp - fm) / (2.0 * c.h);
      double g = g_ad.empty() ? 0.0 : static_cast<double>(g_ad[j]);
      max_diff = std::max(max_diff, std::fabs(g - g_fd));
      max_fd = std::max(max_fd, std::fabs(g_fd));
    }
  }
  return max_diff / std::max(max_fd, 1e-8);
}

namespace {

double dsum(const dvec& y, const dvec& probe) {
  double s = 0.0;
  for (size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
  return s;
}

// elementwise op case: loss = sum(op(a[,b]) * probe), probe is the last input
// and never checked
FdCase ew2(const std::string& name, std::function<Tensor(Tensor&, Tensor&)> op,
           std::function<double(double, double)> dop) {
  FdCase c;
  c.name = name;
  c.shapes = {{3, 4, 5}, {3, 4, 5}, {3, 4, 5}};
  c.check = {0, 1};
  c.build = [op](std::vector<Tensor>& in) { return reduce_sum(mul(op(in[0], in[1]), in[2])); };
  c.ref = [dop](const std::vector<dvec>& in) {
    double s = 0.0;
    for (size_t i = 0; i < in[0].size(); ++i) s += dop(in[0][i], in[1][i]) * in[2][i];
    return s;
  };
  return c;
}

FdCase ew1(const std::string& name, std::function<Tensor(Tensor&)> op,
           std::function<double(double)> dop,
           std::function<void(Rng&, size_t, std::vector<float>&)> fill = nullptr) {
  FdCase c;
  c.name = name;
  c.shapes = {{3, 4, 5}, {3, 4, 5}};
  c.check = {0};
  c.fill = std::move(fill);
  c.build = [op](std::vector<Tensor>& in) { return reduce_sum(mul(op(in[0]), in[1])); };
  c.ref = [dop](const std::vector<dvec>& in) {
    double s = 0.0;
    for (size_t i = 0; i < in[0].size(); ++i) s += dop(in[0][i]) * in[1][i];
    return s;
  };
  return c;
}

void fill_normal(Rng& rng, std::vector<float>& v) {
  for (auto& x : v) x = static_cast<float>(rng.normal());
}

// |x| >= margin, sign random: keeps relu/abs kinks out of FD reach
void fill_margin(Rng& rng, std::vector<float>& v, float margin) {
  for (auto& x : v) {
    float n = static_cast<float>(rng.normal());
    float s = n < 0 ? -1.0f : 1.0f;
    x = s * (margin + std::fabs(n));
  }
}

void fill_positive(Rng& rng, std::vector<float>& v, float floor) {
  for (auto& x : v) x = floor + std::fabs(static_cast<float>(rng.normal()));
}

// values away from the huber junctions |d| = beta (and from zero curvature
// jumps nothing else needed; 0 is C^2-smooth's boundary but f'' jump there is
// handled by margin too for safety)
void fill_huber_safe(Rng& rng, std::vector<float>& v, float beta) {
  for (auto& x : v) {
    float n = static_cast<float>(rng.normal());
    if (std::fabs(std::fabs(n) - beta) < 0.05f) n += (std::fabs(n) > beta ? 0.1f : -0.1f) *
                                                     (n < 0 ? -1.0f : 1.0f);
    x = n;
  }
}

double ref_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double ref_softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double ref_huber(double d, double beta) {
  double a = std::fabs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

std::vector<FdCase> build_cases() {
  std::vector<FdCase> cs;

  // ---- elementwise ----
  cs.push_back(ew2("add", [](Tensor& a, Tensor& b) { return add(a, b); },
                   [](double a, double b) { return a + b; }));
  cs.push_back(ew2("sub", [](Tensor& a, Tensor& b) { return sub(a, b); },
                   [](double a, double b) { return a - b; }));
  cs.push_back(ew2("mul", [](Tensor& a, Tensor& b) { return mul(a, b); },
                   [](double a, double b) { return a * b; }));
  cs.push_back(ew1("scale", [](Tensor& a) { return scale(a, 1.7f); },
                   [](double a) { return double(1.7f) * a; }));
  cs.push_back(ew1("add_const", [](Tensor& a) { return add_const(a, 0.37f); },
                   [](double a) { return a + double(0.37f); }));
  cs.push_back(ew1(
      "relu", [](Tensor& a) { return relu(a); }, [](double a) { return a > 0 ? a : 0.0; },
      [](Rng& rng, size_t i, std::vector<float>& v) {
        i == 0 ? fill_margin(rng, v, 0.05f) : fill_normal(rng, v);
      }));
  cs.push_back(ew1("sigmoid", [](Tensor& a) { return sigmoid(a); }, ref_sigmoid));
  cs.push_back(ew1("softplus", [](Tensor& a) { return softplus(a); }, ref_softplus));
  cs.push_back(ew1(
      "log", [](Tensor& a) { return log_t(a); }, [](double a) { return std::log(a); },
      [](Rng& rng, size_t i, std::vector<float>& v) {
        i == 0 ? fill_positive(rng, v, 0.2f) : fill_normal(rng, v);
      }));
  cs.push_back(ew1("exp", [](Tensor& a) { return exp_t(a); },
                   [](double a) { return std::exp(a); }));
  cs.push_back(ew1(
      "pow_2", [](Tensor& a) { return pow_const(a, 2.0f); },
      [](double a) { return std::pow(a, 2.0); },
      [](Rng& rng, size_t i, std::vector<float>& v) {
        i == 0 ? fill_positive(rng, v, 0.1f) : fill_normal(rng, v);
      }));
  cs.push_back(ew1(
      "pow_1p5", [](Tensor& a) { return pow_const(a, 1.5f); },
      [](double a) { return std::pow(a, double(1.5f)); },
      [](Rng& rng, size_t i, std::vector<float>& v) {
        i == 0 ? fill_positive(rng, v, 0.1f) : fill_normal(rng, v);
      }));
  cs.push_back(ew1(
      "smooth_l1_elem", [](Tensor& a) { return smooth_l1_elem(a, 1.0f); },
      [](double a) { return ref_huber(a, 1.0); },
      [](Rng& rng, size_t i, std::vector<float>& v) {
        i == 0 ? fill_huber_safe(rng, v, 1.0f) : fill_normal(rng, v);
      }));

  // ---- mask_mul ----
  {
    FdCase c;
    c.name = "mask_mul";
    c.shapes = {{2, 3, 4, 5}, {2, 3, 4, 5}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) {
      SpatialMask m;
      m.n = 2;
      m.h = 4;
      m.w = 5;
      m.active.assign(40, 0);
      for (size_t i = 0; i < 40; ++i) m.active[i] = (i % 3) != 1;
      return reduce_sum(mul(mask_mul(in[0], m), in[1]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int n = 0; n < 2; ++n)
        for (int ch = 0; ch < 3; ++ch)
          for (int i = 0; i < 20; ++i) {
            bool act = ((n * 20 + i) % 3) != 1;
            size_t idx = (static_cast<size_t>(n) * 3 + ch) * 20 + i;
            if (act) s += in[0][idx] * in[1][idx];
          }
      return s;
    };
    cs.push_back(c);
  }

  // ---- shape ops ----
  {
    FdCase c;
    c.name = "reshape";
    c.shapes = {{3, 4, 5}, {5, 12}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(reshape(in[0], {5, 12}), in[1]));
    };
    c.ref = [](const std::vector<dvec>& in) { return dsum(in[0], in[1]); };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "permute";
    c.shapes = {{3, 4, 5}, {5, 3, 4}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(permute(in[0], {2, 0, 1}), in[1]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j)
          for (int k = 0; k < 5; ++k)
            s += in[0][(static_cast<size_t>(i) * 4 + j) * 5 + k] *
                 in[1][(static_cast<size_t>(k) * 3 + i) * 4 + j];
      return s;
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "select";
    c.shapes = {{3, 4, 5}, {3, 5}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) { return reduce_sum(mul(select(in[0], 1, 2), in[1])); };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 5; ++k)
          s += in[0][(static_cast<size_t>(i) * 4 + 2) * 5 + k] * in[1][static_cast<size_t>(i) * 5 + k];
      return s;
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "concat";
    c.shapes = {{2, 3, 4}, {2, 5, 4}, {2, 8, 4}};
    c.check = {0, 1};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(concat({in[0], in[1]}, 1), in[2]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int n = 0; n < 2; ++n) {
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 4; ++k)
            s += in[0][(static_cast<size_t>(n) * 3 + j) * 4 + k] *
                 in[2][(static_cast<size_t>(n) * 8 + j) * 4 + k];
        for (int j = 0; j < 5; ++j)
          for (int k = 0; k < 4; ++k)
            s += in[1][(static_cast<size_t>(n) * 5 + j) * 4 + k] *
                 in[2][(static_cast<size_t>(n) * 8 + 3 + j) * 4 + k];
      }
      return s;
    };
    cs.push_back(c);
  }

  // ---- reductions ----
  {
    FdCase c;
    c.name = "reduce_sum";
    c.shapes = {{3, 4, 5}, {3, 4, 5}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) { return reduce_sum(mul(in[0], in[1])); };
    c.ref = [](const std::vector<dvec>& in) { return dsum(in[0], in[1]); };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "reduce_mean";
    c.shapes = {{3, 4, 5}, {3, 4, 5}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) { return reduce_mean(mul(in[0], in[1])); };
    c.ref = [](const std::vector<dvec>& in) { return dsum(in[0], in[1]) / 60.0; };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "reduce_mean_axis";
    c.shapes = {{3, 4, 5}, {3, 5}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(reduce_mean_axis(in[0], 1), in[1]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 5; ++k) {
          double m = 0.0;
          for (int j = 0; j < 4; ++j) m += in[0][(static_cast<size_t>(i) * 4 + j) * 5 + k];
          s += (m / 4.0) * in[1][static_cast<size_t>(i) * 5 + k];
        }
      return s;
    };
    cs.push_back(c);
  }

  // ---- linear algebra ----
  {
    FdCase c;
    c.name = "matmul";
    c.shapes = {{5, 4}, {4, 6}, {5, 6}};
    c.check = {0, 1};
    c.build = [](std::vector<Tensor>& in) { return reduce_sum(mul(matmul(in[0], in[1]), in[2])); };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::matmul(in[0], 5, 4, in[1], 6), in[2]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "bmm";
    c.shapes = {{3, 4, 5}, {3, 5, 2}, {3, 4, 2}};
    c.check = {0, 1};
    c.build = [](std::vector<Tensor>& in) { return reduce_sum(mul(bmm(in[0], in[1]), in[2])); };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::bmm(in[0], 3, 4, 5, in[1], 2), in[2]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "linear";
    c.shapes = {{7, 5}, {4, 5}, {4}, {7, 4}};
    c.check = {0, 1, 2};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(linear(in[0], in[1], in[2]), in[3]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::linear(in[0], 7, 5, in[1], 4, in[2].data()), in[3]);
    };
    cs.push_back(c);
  }

  // ---- softmax ----
  auto softmax_case = [](const std::string& name, float temp) {
    FdCase c;
    c.name = name;
    c.shapes = {{2, 3, 6}, {2, 3, 6}};
    c.check = {0};
    c.build = [temp](std::vector<Tensor>& in) {
      return reduce_sum(mul(softmax(in[0], 2, temp), in[1]));
    };
    c.ref = [temp](const std::vector<dvec>& in) {
      return dsum(coopref::softmax_lastaxis(in[0], 6, 6, double(temp), nullptr), in[1]);
    };
    return c;
  };
  cs.push_back(softmax_case("softmax_t1", 1.0f));
  cs.push_back(softmax_case("softmax_t2p5", 2.5f));
  {
    FdCase c;
    c.name = "softmax_masked";
    c.shapes = {{2, 3, 6}, {2, 3, 6}};
    c.check = {0};
    auto mask_flags = [] {
      std::vector<uint8_t> m(36, 1);
      for (size_t i = 0; i < 36; ++i)
        if (i % 6 != 0 && (i * 7) % 3 == 0) m[i] = 0;  // col 0 always valid
      return m;
    };
    c.build = [mask_flags](std::vector<Tensor>& in) {
      auto mf = mask_flags();
      std::vector<float> md(mf.begin(), mf.end());
      Tensor mask = Tensor::from_data({2, 3, 6}, std::move(md));
      return reduce_sum(mul(softmax(in[0], 2, 1.0f, &mask), in[1]));
    };
    c.ref = [mask_flags](const std::vector<dvec>& in) {
      auto mf = mask_flags();
      return dsum(coopref::softmax_lastaxis(in[0], 6, 6, 1.0, &mf), in[1]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "softmax_axis1";
    c.shapes = {{2, 3, 6}, {2, 3, 6}};
    c.check = {0};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(softmax(in[0], 1, 1.3f), in[1]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      double s = 0.0;
      for (int n = 0; n < 2; ++n)
        for (int k = 0; k < 6; ++k) {
          double mx = -1e300;
          for (int j = 0; j < 3; ++j)
            mx = std::max(mx, in[0][(static_cast<size_t>(n) * 3 + j) * 6 + k] / double(1.3f));
          double z = 0.0;
          for (int j = 0; j < 3; ++j)
            z += std::exp(in[0][(static_cast<size_t>(n) * 3 + j) * 6 + k] / double(1.3f) - mx);
          for (int j = 0; j < 3; ++j) {
            size_t idx = (static_cast<size_t>(n) * 3 + j) * 6 + k;
            s += std::exp(in[0][idx] / double(1.3f) - mx) / z * in[1][idx];
          }
        }
      return s;
    };
    cs.push_back(c);
  }

  // ---- convolution / norm / pooling / warp ----
  {
    FdCase c;
    c.name = "conv2d_s1";
    c.shapes = {{1, 3, 6, 7}, {4, 3, 3, 3}, {4}, {1, 4, 6, 7}};
    c.check = {0, 1, 2};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(conv2d(in[0], in[1], in[2], 1, 1), in[3]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::conv2d(in[0], 1, 3, 6, 7, in[1], 4, 3, 3, in[2].data(), 1, 1), in[3]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "conv2d_s2_nobias";
    c.shapes = {{1, 2, 7, 9}, {3, 2, 3, 3}, {1, 3, 4, 5}};
    c.check = {0, 1};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(conv2d(in[0], in[1], Tensor(), 2, 1), in[2]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::conv2d(in[0], 1, 2, 7, 9, in[1], 3, 3, 3, nullptr, 2, 1), in[2]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "conv_transpose2d";
    c.shapes = {{1, 4, 5, 6}, {4, 3, 2, 2}, {1, 3, 10, 12}};
    c.check = {0, 1};
    c.build = [](std::vector<Tensor>& in) {
      return reduce_sum(mul(conv_transpose2d(in[0], in[1], 2), in[2]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::conv_transpose2d(in[0], 1, 4, 5, 6, in[1], 3, 2, 2, 2), in[2]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "batch_norm_train";
    c.shapes = {{1, 3, 5, 6}, {3}, {3}, {1, 3, 5, 6}};
    c.check = {0, 1, 2};
    c.fill = [](Rng& rng, size_t i, std::vector<float>& v) {
      if (i == 1)
        fill_positive(rng, v, 0.5f);
      else
        fill_normal(rng, v);
    };
    c.build = [](std::vector<Tensor>& in) {
      BnState st;
      st.init(3);
      return reduce_sum(mul(batch_norm2d(in[0], in[1], in[2], st, true), in[3]));
    };
    c.ref = [](const std::vector<dvec>& in) {
      return dsum(coopref::batch_norm_train(in[0], 1, 3, 5, 6, in[1], in[2], 1e-5, nullptr),
                  in[3]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "batch_norm_train_masked";
    c.shapes = {{1, 3, 5, 6}, {3}, {3}, {1, 3, 5, 6}};
    c.check = {0, 1, 2};
    auto mask_flags = [] {
      std::vector<uint8_t> m(30, 1);
      for (size_t i = 0; i < 30; ++i)
        if ((i * 5) % 7 < 2) m[i] = 0;
      return m;
    };
    c.fill = [](Rng& rng, size_t i, std::vector<float>& v) {
      if (i == 1)
        fill_positive(rng, v, 0.5f);
      else
        fill_normal(rng, v);
    };
    c.build = [mask_flags](std::vector<Tensor>& in) {
      SpatialMask m;
      m.n = 1;
      m.h = 5;
      m.w = 6;
      m.active = mask_flags();
      BnState st;
      st.init(3);
      return reduce_sum(mul(mask_mul(batch_norm2d(in[0], in[1], in[2], st, true, 0.1f, 1e-5f, &m),
                                     m),
                            in[3]));
    };
    c.ref = [mask_flags](const std::vector<dvec>& in) {
      auto mf = mask_flags();
      dvec y = coopref::batch_norm_train(in[0], 1, 3, 5, 6, in[1], in[2], 1e-5, &mf);
      double s = 0.0;
      for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 30; ++i)
          if (mf[static_cast<size_t>(i)])
            s += y[static_cast<size_t>(ch) * 30 + i] * in[3][static_cast<size_t>(ch) * 30 + i];
      return s;
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "max_pool_points";
    c.shapes = {{1, 3, 4, 5}, {4, 3}};
    c.check = {0};
    auto occupancy = [] {
      std::vector<uint8_t> m(20, 0);
      int counts[4] = {5, 3, 1, 4};
      for (int p = 0; p < 4; ++p)
        for (int s = 0; s < counts[p]; ++s) m[static_cast<size_t>(p) * 5 + s] = 1;
      return m;
    };
    // per (channel, pillar) row: well-separated values so the argmax has a
    // margin far beyond the FD step
    c.fill = [](Rng& rng, size_t i, std::vector<float>& v) {
      if (i != 0) {
        fill_normal(rng, v);
        return;
      }
      for (size_t row = 0; row < 12; ++row) {
        float base[5];
        for (int s = 0; s < 5; ++s)
          base[s] = 0.25f * static_cast<float>(s) + 0.05f * static_cast<float>(rng.uniform());
        for (int s = 4; s > 0; --s) std::swap(base[s], base[rng.uniform_int(0, s)]);
        for (int s = 0; s < 5; ++s) v[row * 5 + static_cast<size_t>(s)] = base[s];
      }
    };
    c.build = [occupancy](std::vector<Tensor>& in) {
      return reduce_sum(mul(max_pool_points(in[0], occupancy(), 4, 5), in[1]));
    };
    c.ref = [occupancy](const std::vector<dvec>& in) {
      return dsum(coopref::max_pool_points(in[0], 3, 4, 5, occupancy()), in[1]);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "bilinear_warp";
    c.shapes = {{1, 3, 5, 6}, {1, 3, 5, 6}};
    c.check = {0};
    auto plan = [] {
      geom::Pose ego{0.4, -0.3, 0.0, 0.2};
      geom::Pose other{-0.2, 0.5, 0.0, -0.35};
      return make_feature_warp_plan(geom::relative_transform(ego, other), 5, 6, -3.0, -2.5, 1.0);
    };
    c.build = [plan](std::vector<Tensor>& in) {
      return reduce_sum(mul(bilinear_warp(in[0], plan()), in[1]));
    };
    c.ref = [plan](const std::vector<dvec>& in) {
      WarpPlan p = plan();
      double s = 0.0;
      for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 30; ++i) {
          if (!p.valid[static_cast<size_t>(i)]) continue;
          double v = 0.0;
          for (int k = 0; k < 4; ++k) {
            int idx = p.taps[static_cast<size_t>(i)].idx[k];
            if (idx >= 0)
              v += double(p.taps[static_cast<size_t>(i)].wgt[k]) *
                   in[0][static_cast<size_t>(ch) * 30 + idx];
          }
          s += v * in[1][static_cast<size_t>(ch) * 30 + i];
        }
      return s;
    };
    cs.push_back(c);
  }

  // ---- losses ----
  {
    FdCase c;
    c.name = "focal_loss";
    c.shapes = {{1, 2, 4, 5}};
    auto labels = [] {
      std::vector<int8_t> lab(40);
      for (size_t i = 0; i < 40; ++i) lab[i] = static_cast<int8_t>((i % 5 == 3) ? 1 : (i % 7 == 2) ? -1 : 0);
      return lab;
    };
    c.build = [labels](std::vector<Tensor>& in) {
      TargetAssignment t;
      t.h = 4;
      t.w = 5;
      t.per_cell = 2;
      t.labels = labels();
      return focal_loss(in[0], t, 0.25f, 2.0f);
    };
    c.ref = [labels](const std::vector<dvec>& in) {
      auto lab8 = labels();
      std::vector<int> lab(lab8.begin(), lab8.end());
      return coopref::focal_loss(in[0], lab, 0.25, 2.0);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "smooth_l1_loss";
    c.shapes = {{1, 14, 4, 5}};
    auto labels = [] {
      std::vector<int8_t> lab(40);
      for (size_t i = 0; i < 40; ++i) lab[i] = static_cast<int8_t>((i % 4 == 1) ? 1 : 0);
      return lab;
    };
    // reg targets are a fixed pseudo-random pattern; predictions are filled a
    // huber-safe distance from them
    auto targets_vec = [] {
      std::vector<float> tg(280);
      Rng r(987654321u);
      for (auto& v : tg) v = static_cast<float>(r.normal());
      return tg;
    };
    c.fill = [targets_vec](Rng& rng, size_t, std::vector<float>& v) {
      auto tg = targets_vec();
      std::vector<float> d(v.size());
      fill_huber_safe(rng, d, 1.0f);
      for (size_t i = 0; i < v.size(); ++i) v[i] = tg[i] + d[i];
    };
    c.build = [labels, targets_vec](std::vector<Tensor>& in) {
      TargetAssignment t;
      t.h = 4;
      t.w = 5;
      t.per_cell = 2;
      t.labels = labels();
      t.reg_targets = targets_vec();
      for (auto l : t.labels)
        if (l == 1) ++t.n_positive;
      return smooth_l1_loss(in[0], t);
    };
    c.ref = [labels, targets_vec](const std::vector<dvec>& in) {
      auto lab8 = labels();
      auto tg = targets_vec();
      // reorder channel-major [k*7+j][hw] into anchor-major rows [a][7]
      int hw = 20;
      std::vector<int> lab;
      dvec preds, tgts;
      for (int k = 0; k < 2; ++k)
        for (int i = 0; i < hw; ++i) {
          lab.push_back(lab8[static_cast<size_t>(k) * hw + i]);
          for (int j = 0; j < 7; ++j) {
            size_t idx = (static_cast<size_t>(k) * 7 + j) * hw + i;
            preds.push_back(in[0][idx]);
            tgts.push_back(tg[idx]);
          }
        }
      return coopref::smooth_l1_loss(preds, tgts, lab, 7, 1.0);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "kd_loss_channel";
    c.shapes = {{1, 4, 3, 5}, {1, 4, 3, 5}};
    c.check = {1};  // teacher side is stop-gradient by contract
    c.build = [](std::vector<Tensor>& in) { return kd_loss(in[0], in[1], 2.0f, false); };
    c.ref = [](const std::vector<dvec>& in) {
      int hw = 15, ch = 4;
      dvec zt(static_cast<size_t>(hw) * ch), zs(zt.size());
      for (int i = 0; i < hw; ++i)
        for (int cc = 0; cc < ch; ++cc) {
          zt[static_cast<size_t>(i) * ch + cc] = in[0][static_cast<size_t>(cc) * hw + i];
          zs[static_cast<size_t>(i) * ch + cc] = in[1][static_cast<size_t>(cc) * hw + i];
        }
      return coopref::kd_kl(zt, zs, hw, ch, 2.0);
    };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "kd_loss_spatial";
    c.shapes = {{1, 4, 3, 5}, {1, 4, 3, 5}};
    c.check = {1};
    c.build = [](std::vector<Tensor>& in) { return kd_loss(in[0], in[1], 3.0f, true); };
    c.ref = [](const std::vector<dvec>& in) { return coopref::kd_kl(in[0], in[1], 4, 15, 3.0); };
    cs.push_back(c);
  }
  {
    FdCase c;
    c.name = "total_loss";
    c.shapes = {{1}, {1}};
    c.build = [](std::vector<Tensor>& in) {
      KdConfig kcfg;
      kcfg.lambda_det = 1.0f;
      kcfg.lambda_kd = 2.0f;
      return total_loss(in[0], in[1], kcfg);
    };
    c.ref = [](const std::vector<dvec>& in) { return in[0][0] + 2.0 * in[1][0]; };
    cs.push_back(c);
  }

  return cs;
}

}  // namespace

const std::vector<FdCase>& fd_cases() {
  static const std::vector<FdCase> cases = build_cases();
  return cases;
}

}  // namespace testsupport
