// Times the OpenMP-parallel f32 kernels against the serial double-precision
// reference implementations on representative shapes. The reference exists
// for correctness testing; this target quantifies what the optimized kernels
// buy on the same inputs.
#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "coopercept/nn.hpp"
#include "coopercept/reference.hpp"
#include "coopercept/rng.hpp"
#include "coopercept/tensor.hpp"

using namespace coopercept;

namespace {

double time_ms(const std::function<void()>& fn, int repeats) {
  double best = 1e300;
  for (int i = 0; i < repeats; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    fn();
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

Tensor random_tensor(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  auto d = t.mutable_data();
  for (auto& v : d) v = static_cast<float>(rng.normal());
  return t;
}

coopref::dvec to_dvec(const Tensor& t) {
  auto d = t.data();
  return coopref::dvec(d.begin(), d.end());
}

struct Row {
  std::string kernel, shape;
  double parallel_ms, serial_ms;
};

}  // namespace

int main() {
  Rng rng(20240817);
  std::vector<Row> rows;
  const int reps = 3;

  {
    // one mid-pyramid backbone convolution
    Tensor x = random_tensor({1, 32, 96, 352}, rng);
    Tensor w = random_tensor({32, 32, 3, 3}, rng);
    coopref::dvec xd = to_dvec(x), wd = to_dvec(w);
    NoGradGuard ng;
    double par = time_ms([&] { conv2d(x, w, Tensor(), 1, 1); }, reps);
    double ser = time_ms(
        [&] { coopref::conv2d(xd, 1, 32, 96, 352, wd, 32, 3, 3, nullptr, 1, 1); }, reps);
    rows.push_back({"conv2d_3x3", "1x32x96x352->32", par, ser});
  }
  {
    Tensor a = random_tensor({4096, 256}, rng);
    Tensor b = random_tensor({256, 256}, rng);
    coopref::dvec ad = to_dvec(a), bd = to_dvec(b);
    NoGradGuard ng;
    double par = time_ms([&] { matmul(a, b); }, reps);
    double ser = time_ms([&] { coopref::matmul(ad, 4096, 256, bd, 256); }, reps);
    rows.push_back({"matmul", "4096x256 * 256x256", par, ser});
  }
  {
    Tensor a = random_tensor({48, 64, 64}, rng);
    Tensor b = random_tensor({48, 64, 64}, rng);
    coopref::dvec ad = to_dvec(a), bd = to_dvec(b);
    NoGradGuard ng;
    double par = time_ms([&] { bmm(a, b); }, reps);
    double ser = time_ms([&] { coopref::bmm(ad, 48, 64, 64, bd, 64); }, reps);
    rows.push_back({"bmm", "48x64x64 * 48x64x64", par, ser});
  }
  {
    Tensor x = random_tensor({1, 64, 96, 352}, rng);
    Tensor gamma = Tensor::full({64}, 1.0f);
    Tensor beta = Tensor::zeros({64});
    coopref::dvec xd = to_dvec(x), gd = to_dvec(gamma), bd = to_dvec(beta);
    BnState state;
    NoGradGuard ng;
    double par =
        time_ms([&] { batch_norm2d(x, gamma, beta, state, true, 0.1f, 1e-5f, nullptr); }, reps);
    double ser = time_ms(
        [&] { coopref::batch_norm_train(xd, 1, 64, 96, 352, gd, bd, 1e-5, nullptr); }, reps);
    rows.push_back({"batch_norm_train", "1x64x96x352", par, ser});
  }

  std::printf("kernel,shape,parallel_ms,serial_ms\n");
  for (const auto& r : rows)
    std::printf("%s,%s,%.6g,%.6g\n", r.kernel.c_str(), r.shape.c_str(), r.parallel_ms,
                r.serial_ms);
  return 0;
}
