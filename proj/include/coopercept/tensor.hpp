#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace coopercept {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  float* grad_ptr();  // allocates zeros on first use
};

// Dense row-major f32 tensor with reverse-mode autodiff. Value-semantics
// handle onto a shared node; ops build a DAG, backward() walks it in reverse
// topological order. Reductions accumulate in f64 internally.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, float v);
  static Tensor from_data(const Shape& s, std::vector<float> d);
  static Tensor scalar(float v);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int dim(int i) const;
  int64_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();  // untracked writes (init, optimizer)

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  float item() const;  // scalar tensors only

  TensorNode* node() const { return n_.get(); }
  std::shared_ptr<TensorNode> handle() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Gradient recording is on by default; NoGradGuard disables it in scope.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Runs reverse-mode accumulation from a scalar loss. Leaf gradients
// accumulate additively across calls; interior gradients are reset per call.
void backward(const Tensor& loss);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_const(const Tensor& a, float c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor pow_const(const Tensor& a, float p);
// 0.5*d^2/beta for |d|<beta, |d|-0.5*beta otherwise; elementwise smooth L1.
Tensor smooth_l1_elem(const Tensor& d, float beta = 1.0f);
Tensor stop_grad(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute(const Tensor& a, const std::vector<int>& perm);
Tensor select(const Tensor& a, int axis, int index);  // removes the axis
Tensor concat(const std::vector<Tensor>& xs, int axis);

// ---- reductions ----
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
Tensor reduce_mean_axis(const Tensor& a, int axis);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);              // [M,K]x[K,N]
Tensor bmm(const Tensor& a, const Tensor& b);                 // [B,M,K]x[B,K,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // [R,Din],[Dout,Din],[Dout]

// Softmax along `axis` of logits/temperature. Optional 0/1 mask of the same
// shape: masked entries get exactly zero output and are excluded from the
// normalization. Errors if temperature <= 0 or a softmax row is fully masked.
Tensor softmax(const Tensor& a, int axis, float temperature = 1.0f, const Tensor* mask = nullptr);

void assert_all_finite(const Tensor& t, const char* what);

// Shared loop helper: parallel when OpenMP is enabled and n is large enough
// to amortize scheduling. Iterations must write disjoint outputs so results
// are bit-identical for any thread count.
template <class F>
inline void par_for(int64_t n, F&& f) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (n >= 8192)
#endif
  for (int64_t i = 0; i < n; ++i) f(i);
}

}  // namespace coopercept
