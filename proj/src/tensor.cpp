#include "coopercept/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace coopercept {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

float* TensorNode::grad_ptr() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad.data();
}

namespace {
thread_local int g_no_grad_depth = 0;
}

bool grad_enabled() { return g_no_grad_depth == 0; }
NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

Tensor Tensor::zeros(const Shape& s) { return full(s, 0.0f); }

Tensor Tensor::full(const Shape& s, float v) {
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->data.assign(static_cast<size_t>(shape_numel(s)), v);
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(const Shape& s, std::vector<float> d) {
  if (static_cast<int64_t>(d.size()) != shape_numel(s))
    throw std::invalid_argument("from_data: " + std::to_string(d.size()) +
                                " values for shape " + shape_str(s));
  auto n = std::make_shared<TensorNode>();
  n->shape = s;
  n->data = std::move(d);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return from_data({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!n_) throw std::logic_error("shape() on undefined tensor");
  return n_->shape;
}

int Tensor::dim(int i) const {
  const Shape& s = shape();
  if (i < 0) i += static_cast<int>(s.size());
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw std::out_of_range("dim index " + std::to_string(i) + " for shape " + shape_str(s));
  return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { return n_ ? n_->numel() : 0; }

std::span<const float> Tensor::data() const {
  if (!n_) throw std::logic_error("data() on undefined tensor");
  return {n_->data.data(), n_->data.size()};
}

std::span<float> Tensor::mutable_data() {
  if (!n_) throw std::logic_error("mutable_data() on undefined tensor");
  return {n_->data.data(), n_->data.size()};
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!n_) throw std::logic_error("set_requires_grad on undefined tensor");
  n_->requires_grad = v;
  return *this;
}

bool Tensor::has_grad() const { return n_ && !n_->grad.empty(); }

std::span<const float> Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad() called before any backward reached this tensor");
  return {n_->grad.data(), n_->grad.size()};
}

std::span<float> Tensor::mutable_grad() {
  if (!n_) throw std::logic_error("mutable_grad() on undefined tensor");
  n_->grad_ptr();
  return {n_->grad.data(), n_->grad.size()};
}

void Tensor::zero_grad() {
  if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) throw std::logic_error("item() on tensor with shape " + shape_str(shape()));
  return n_->data[0];
}

void assert_all_finite(const Tensor& t, const char* what) {
  for (float v : t.data()) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string("non-finite value in ") + what);
  }
}

namespace {

// Builds the result node; records parents/backward only when grad mode is on
// and at least one parent requires grad.
Tensor finish_op(Shape shape, std::vector<float> data, const char* op,
                 std::vector<Tensor> parents,
                 const std::function<std::function<void()>(TensorNode*)>& make_bw) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool rec = grad_enabled();
  if (rec) {
    rec = false;
    for (const Tensor& p : parents)
      if (p.requires_grad()) rec = true;
  }
  if (rec) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) node->parents.push_back(p.handle());
    node->backward_fn = make_bw(node.get());
  }
  return Tensor(std::move(node));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward on undefined tensor");
  if (loss.numel() != 1)
    throw std::logic_error("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS over parent edges.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-call scratch; leaf grads accumulate across calls.
  for (TensorNode* n : order) {
    if (!n->parents.empty()) {
      n->grad.assign(n->data.size(), 0.0f);
    }
  }
  root->grad_ptr()[0] += 1.0f;  // interior roots were just reset, leaves accumulate

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn();
  }
}

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] + db[i]; });
  return finish_op(a.shape(), std::move(out), "add", {a, b}, [&](TensorNode* res) {
    auto pa = a.handle();
    auto pb = b.handle();
    return [res, pa, pb]() {
      const float* g = res->grad.data();
      int64_t n = res->numel();
      if (pa->requires_grad) {
        float* ga = pa->grad_ptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb->requires_grad) {
        float* gb = pb->grad_ptr();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    };
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] - db[i]; });
  return finish_op(a.shape(), std::move(out), "sub", {a, b}, [&](TensorNode* res) {
    auto pa = a.handle();
    auto pb = b.handle();
    return [res, pa, pb]() {
      const float* g = res->grad.data();
      int64_t n = res->numel();
      if (pa->requires_grad) {
        float* ga = pa->grad_ptr();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (pb->requires_grad) {
        float* gb = pb->grad_ptr();
        for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
      }
    };
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] * db[i]; });
  return finish_op(a.shape(), std::move(out), "mul", {a, b}, [&](TensorNode* res) {
    auto pa = a.handle();
    auto pb = b.handle();
    return [res, pa, pb]() {
      const float* g = res->grad.data();
      int64_t n = res->numel();
      if (pa->requires_grad) {
        float* ga = pa->grad_ptr();
        const float* vb = pb->data.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
      }
      if (pb->requires_grad) {
        float* gb = pb->grad_ptr();
        const float* va = pa->data.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
      }
    };
  });
}

Tensor scale(const Tensor& a, float s) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] * s; });
  return finish_op(a.shape(), std::move(out), "scale", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, s]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    };
  });
}

Tensor add_const(const Tensor& a, float c) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] + c; });
  return finish_op(a.shape(), std::move(out), "add_const", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    };
  });
}

Tensor relu(const Tensor& a) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = da[i] > 0.0f ? da[i] : 0.0f; });
  return finish_op(a.shape(), std::move(out), "relu", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      const float* x = pa->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0f ? g[i] : 0.0f;
    };
  });
}

Tensor sigmoid(const Tensor& a) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) {
    float x = da[i];
    out[i] = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
  });
  return finish_op(a.shape(), std::move(out), "sigmoid", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      const float* y = res->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.0f - y[i]);
    };
  });
}

Tensor softplus(const Tensor& a) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) {
    float x = da[i];
    out[i] = (x > 0.0f ? x : 0.0f) + std::log1p(std::exp(-std::fabs(x)));
  });
  return finish_op(a.shape(), std::move(out), "softplus", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      const float* x = pa->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) {
        float s = x[i] >= 0.0f ? 1.0f / (1.0f + std::exp(-x[i]))
                               : std::exp(x[i]) / (1.0f + std::exp(x[i]));
        ga[i] += g[i] * s;
      }
    };
  });
}

Tensor log_t(const Tensor& a) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  for (size_t i = 0; i < da.size(); ++i) {
    if (!(da[i] > 0.0f))
      throw std::domain_error("log of non-positive value " + std::to_string(da[i]));
    out[i] = std::log(da[i]);
  }
  return finish_op(a.shape(), std::move(out), "log", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      const float* x = pa->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] / x[i];
    };
  });
}

Tensor exp_t(const Tensor& a) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = std::exp(da[i]); });
  return finish_op(a.shape(), std::move(out), "exp", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      const float* y = res->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
    };
  });
}

Tensor pow_const(const Tensor& a, float p) {
  const auto& da = a.data();
  std::vector<float> out(da.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) { out[i] = std::pow(da[i], p); });
  return finish_op(a.shape(), std::move(out), "pow_const", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, p]() {
      const float* g = res->grad.data();
      const float* x = pa->data.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * p * std::pow(x[i], p - 1.0f);
    };
  });
}

Tensor smooth_l1_elem(const Tensor& d, float beta) {
  if (!(beta > 0.0f)) throw std::invalid_argument("smooth_l1: beta must be > 0");
  const auto& dd = d.data();
  std::vector<float> out(dd.size());
  par_for(static_cast<int64_t>(out.size()), [&](int64_t i) {
    float x = dd[i];
    float ax = std::fabs(x);
    out[i] = ax < beta ? 0.5f * x * x / beta : ax - 0.5f * beta;
  });
  return finish_op(d.shape(), std::move(out), "smooth_l1", {d}, [&](TensorNode* res) {
    auto pd = d.handle();
    return [res, pd, beta]() {
      const float* g = res->grad.data();
      const float* x = pd->data.data();
      float* gd = pd->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) {
        float v = x[i];
        float dv = std::fabs(v) < beta ? v / beta : (v > 0.0f ? 1.0f : -1.0f);
        gd[i] += g[i] * dv;
      }
    };
  });
}

Tensor stop_grad(const Tensor& a) {
  auto node = std::make_shared<TensorNode>();
  node->shape = a.shape();
  node->data.assign(a.data().begin(), a.data().end());
  node->op = "stop_grad";
  return Tensor(std::move(node));
}

// ---------------- shape ----------------

Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(s));
  std::vector<float> out(a.data().begin(), a.data().end());
  return finish_op(s, std::move(out), "reshape", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      int64_t n = res->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
    };
  });
}

Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  size_t nd = s.size();
  if (perm.size() != nd) throw std::invalid_argument("permute: rank mismatch");
  std::vector<bool> seen(nd, false);
  Shape os(nd);
  for (size_t i = 0; i < nd; ++i) {
    int p = perm[i];
    if (p < 0 || p >= static_cast<int>(nd) || seen[static_cast<size_t>(p)])
      throw std::invalid_argument("permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    os[i] = s[static_cast<size_t>(p)];
  }
  auto ist = strides_of(s);
  auto ost = strides_of(os);
  int64_t n = a.numel();
  const auto& da = a.data();
  std::vector<float> out(static_cast<size_t>(n));
  // mapping: out[j] = a[src(j)]
  std::vector<int64_t> src_stride(nd);  // stride in input per output axis
  for (size_t i = 0; i < nd; ++i) src_stride[i] = ist[static_cast<size_t>(perm[i])];
  par_for(n, [&](int64_t j) {
    int64_t rem = j, si = 0;
    for (size_t ax = 0; ax < nd; ++ax) {
      int64_t c = rem / ost[ax];
      rem -= c * ost[ax];
      si += c * src_stride[ax];
    }
    out[j] = da[si];
  });
  return finish_op(os, std::move(out), "permute", {a}, [&, ost, src_stride, nd](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, ost, src_stride, nd]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      int64_t n2 = res->numel();
      for (int64_t j = 0; j < n2; ++j) {
        int64_t rem = j, si = 0;
        for (size_t ax = 0; ax < nd; ++ax) {
          int64_t c = rem / ost[ax];
          rem -= c * ost[ax];
          si += c * src_stride[ax];
        }
        ga[si] += g[j];
      }
    };
  });
}

Tensor select(const Tensor& a, int axis, int index) {
  const Shape& s = a.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("select: bad axis");
  int dim = s[static_cast<size_t>(axis)];
  if (index < 0 || index >= dim) throw std::out_of_range("select: index out of range");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  Shape os;
  for (size_t i = 0; i < s.size(); ++i)
    if (static_cast<int>(i) != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  const auto& da = a.data();
  std::vector<float> out(static_cast<size_t>(outer * inner));
  par_for(outer, [&](int64_t o) {
    const float* src = da.data() + (o * dim + index) * inner;
    float* dst = out.data() + o * inner;
    std::memcpy(dst, src, static_cast<size_t>(inner) * sizeof(float));
  });
  return finish_op(os, std::move(out), "select", {a}, [&, outer, inner, dim, index](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, outer, inner, dim, index]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      for (int64_t o = 0; o < outer; ++o) {
        float* dst = ga + (o * dim + index) * inner;
        const float* src = g + o * inner;
        for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    };
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw std::invalid_argument("concat: empty input list");
  const Shape& s0 = xs[0].shape();
  size_t nd = s0.size();
  if (axis < 0) axis += static_cast<int>(nd);
  if (axis < 0 || axis >= static_cast<int>(nd)) throw std::invalid_argument("concat: bad axis");
  int total = 0;
  for (const Tensor& t : xs) {
    const Shape& s = t.shape();
    if (s.size() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (size_t i = 0; i < nd; ++i)
      if (static_cast<int>(i) != axis && s[i] != s0[i])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(s) + " vs " +
                                    shape_str(s0));
    total += s[static_cast<size_t>(axis)];
  }
  Shape os = s0;
  os[static_cast<size_t>(axis)] = total;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < nd; ++i) inner *= s0[i];
  std::vector<float> out(static_cast<size_t>(shape_numel(os)));
  int64_t off = 0;
  std::vector<int64_t> offsets;
  std::vector<int64_t> widths;
  for (const Tensor& t : xs) {
    int64_t w = t.dim(axis) * inner;
    offsets.push_back(off);
    widths.push_back(w);
    const auto& dt = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * (total * inner) + off, dt.data() + o * w,
                  static_cast<size_t>(w) * sizeof(float));
    off += w;
  }
  return finish_op(os, std::move(out), "concat", xs,
                   [&, outer, inner, total, offsets, widths](TensorNode* res) {
    std::vector<std::shared_ptr<TensorNode>> ps;
    for (const Tensor& t : xs) ps.push_back(t.handle());
    return [res, ps, outer, inner, total, offsets, widths]() {
      const float* g = res->grad.data();
      for (size_t k = 0; k < ps.size(); ++k) {
        if (!ps[k]->requires_grad) continue;
        float* gp = ps[k]->grad_ptr();
        int64_t w = widths[k];
        for (int64_t o = 0; o < outer; ++o) {
          const float* src = g + o * (static_cast<int64_t>(total) * inner) + offsets[k];
          float* dst = gp + o * w;
          for (int64_t i = 0; i < w; ++i) dst[i] += src[i];
        }
      }
    };
  });
}

// ---------------- reductions ----------------

Tensor reduce_sum(const Tensor& a) {
  const auto& da = a.data();
  double acc = 0.0;
  for (float v : da) acc += v;
  return finish_op({1}, {static_cast<float>(acc)}, "sum", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa]() {
      float g = res->grad[0];
      float* ga = pa->grad_ptr();
      int64_t n = pa->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    };
  });
}

Tensor reduce_mean(const Tensor& a) {
  int64_t n = a.numel();
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  const auto& da = a.data();
  double acc = 0.0;
  for (float v : da) acc += v;
  acc /= static_cast<double>(n);
  return finish_op({1}, {static_cast<float>(acc)}, "mean", {a}, [&](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, n]() {
      float g = res->grad[0] / static_cast<float>(n);
      float* ga = pa->grad_ptr();
      for (int64_t i = 0; i < n; ++i) ga[i] += g;
    };
  });
}

Tensor reduce_mean_axis(const Tensor& a, int axis) {
  const Shape& s = a.shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw std::invalid_argument("mean_axis: bad axis");
  int dim = s[static_cast<size_t>(axis)];
  if (dim == 0) throw std::invalid_argument("mean over empty axis");
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  Shape os;
  for (size_t i = 0; i < s.size(); ++i)
    if (static_cast<int>(i) != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  const auto& da = a.data();
  std::vector<float> out(static_cast<size_t>(outer * inner));
  par_for(outer * inner, [&](int64_t j) {
    int64_t o = j / inner, i = j % inner;
    double acc = 0.0;
    const float* base = da.data() + o * dim * inner + i;
    for (int d = 0; d < dim; ++d) acc += base[static_cast<int64_t>(d) * inner];
    out[j] = static_cast<float>(acc / dim);
  });
  return finish_op(os, std::move(out), "mean_axis", {a}, [&, outer, inner, dim](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, outer, inner, dim]() {
      const float* g = res->grad.data();
      float* ga = pa->grad_ptr();
      for (int64_t o = 0; o < outer; ++o)
        for (int d = 0; d < dim; ++d)
          for (int64_t i = 0; i < inner; ++i)
            ga[(o * dim + d) * inner + i] += g[o * inner + i] / static_cast<float>(dim);
    };
  });
}

// ---------------- linear algebra ----------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<float> out(static_cast<size_t>(M) * N);
  par_for(M, [&](int64_t m) {
    std::vector<double> acc(static_cast<size_t>(N), 0.0);
    const float* arow = da.data() + m * K;
    for (int k = 0; k < K; ++k) {
      double av = arow[k];
      const float* brow = db.data() + static_cast<int64_t>(k) * N;
      for (int n = 0; n < N; ++n) acc[static_cast<size_t>(n)] += av * brow[n];
    }
    float* orow = out.data() + m * N;
    for (int n = 0; n < N; ++n) orow[n] = static_cast<float>(acc[static_cast<size_t>(n)]);
  });
  return finish_op({M, N}, std::move(out), "matmul", {a, b}, [&, M, K, N](TensorNode* res) {
    auto pa = a.handle();
    auto pb = b.handle();
    return [res, pa, pb, M, K, N]() {
      const float* g = res->grad.data();
      if (pa->requires_grad) {
        float* ga = pa->grad_ptr();
        const float* vb = pb->data.data();
        par_for(M, [&](int64_t m) {
          for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            const float* grow = g + m * N;
            const float* brow = vb + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) acc += static_cast<double>(grow[n]) * brow[n];
            ga[m * K + k] += static_cast<float>(acc);
          }
        });
      }
      if (pb->requires_grad) {
        float* gb = pb->grad_ptr();
        const float* va = pa->data.data();
        par_for(K, [&](int64_t k) {
          std::vector<double> acc(static_cast<size_t>(N), 0.0);
          for (int m = 0; m < M; ++m) {
            double av = va[static_cast<int64_t>(m) * K + k];
            const float* grow = g + static_cast<int64_t>(m) * N;
            for (int n = 0; n < N; ++n) acc[static_cast<size_t>(n)] += av * grow[n];
          }
          for (int n = 0; n < N; ++n) gb[k * N + n] += static_cast<float>(acc[static_cast<size_t>(n)]);
        });
      }
    };
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<float> out(static_cast<size_t>(B) * M * N);
  par_for(static_cast<int64_t>(B) * M, [&](int64_t bm) {
    int64_t bb = bm / M, m = bm % M;
    const float* arow = da.data() + (bb * M + m) * K;
    const float* bmat = db.data() + bb * K * N;
    std::vector<double> acc(static_cast<size_t>(N), 0.0);
    for (int k = 0; k < K; ++k) {
      double av = arow[k];
      const float* brow = bmat + static_cast<int64_t>(k) * N;
      for (int n = 0; n < N; ++n) acc[static_cast<size_t>(n)] += av * brow[n];
    }
    float* orow = out.data() + (bb * M + m) * N;
    for (int n = 0; n < N; ++n) orow[n] = static_cast<float>(acc[static_cast<size_t>(n)]);
  });
  return finish_op({B, M, N}, std::move(out), "bmm", {a, b}, [&, B, M, K, N](TensorNode* res) {
    auto pa = a.handle();
    auto pb = b.handle();
    return [res, pa, pb, B, M, K, N]() {
      const float* g = res->grad.data();
      if (pa->requires_grad) {
        float* ga = pa->grad_ptr();
        const float* vb = pb->data.data();
        par_for(static_cast<int64_t>(B) * M, [&](int64_t bm) {
          int64_t bb = bm / M, m = bm % M;
          const float* grow = g + (bb * M + m) * N;
          const float* bmat = vb + bb * K * N;
          float* garow = ga + (bb * M + m) * K;
          for (int k = 0; k < K; ++k) {
            double acc = 0.0;
            const float* brow = bmat + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) acc += static_cast<double>(grow[n]) * brow[n];
            garow[k] += static_cast<float>(acc);
          }
        });
      }
      if (pb->requires_grad) {
        float* gb = pb->grad_ptr();
        const float* va = pa->data.data();
        par_for(static_cast<int64_t>(B) * K, [&](int64_t bk) {
          int64_t bb = bk / K, k = bk % K;
          std::vector<double> acc(static_cast<size_t>(N), 0.0);
          for (int m = 0; m < M; ++m) {
            double av = va[(bb * M + m) * K + k];
            const float* grow = g + (bb * M + m) * N;
            for (int n = 0; n < N; ++n) acc[static_cast<size_t>(n)] += av * grow[n];
          }
          float* gbrow = gb + (bb * K + k) * N;
          for (int n = 0; n < N; ++n) gbrow[n] += static_cast<float>(acc[static_cast<size_t>(n)]);
        });
      }
    };
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1))
    throw std::invalid_argument("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                                shape_str(w.shape()));
  int R = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
  bool has_b = b.defined();
  if (has_b && (b.ndim() != 1 || b.dim(0) != Dout))
    throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()));
  const auto& dx = x.data();
  const auto& dw = w.data();
  std::vector<float> out(static_cast<size_t>(R) * Dout);
  par_for(R, [&](int64_t r) {
    const float* xrow = dx.data() + r * Din;
    float* orow = out.data() + r * Dout;
    for (int o = 0; o < Dout; ++o) {
      const float* wrow = dw.data() + static_cast<int64_t>(o) * Din;
      double acc = has_b ? static_cast<double>(b.data()[static_cast<size_t>(o)]) : 0.0;
      for (int d = 0; d < Din; ++d) acc += static_cast<double>(xrow[d]) * wrow[d];
      orow[o] = static_cast<float>(acc);
    }
  });
  std::vector<Tensor> parents = {x, w};
  if (has_b) parents.push_back(b);
  return finish_op({R, Dout}, std::move(out), "linear", parents,
                   [&, R, Din, Dout, has_b](TensorNode* res) {
    auto px = x.handle();
    auto pw = w.handle();
    std::shared_ptr<TensorNode> pbias = has_b ? b.handle() : nullptr;
    return [res, px, pw, pbias, R, Din, Dout]() {
      const float* g = res->grad.data();
      if (px->requires_grad) {
        float* gx = px->grad_ptr();
        const float* vw = pw->data.data();
        par_for(R, [&](int64_t r) {
          const float* grow = g + r * Dout;
          std::vector<double> acc(static_cast<size_t>(Din), 0.0);
          for (int o = 0; o < Dout; ++o) {
            double gv = grow[o];
            const float* wrow = vw + static_cast<int64_t>(o) * Din;
            for (int d = 0; d < Din; ++d) acc[static_cast<size_t>(d)] += gv * wrow[d];
          }
          float* gxrow = gx + r * Din;
          for (int d = 0; d < Din; ++d) gxrow[d] += static_cast<float>(acc[static_cast<size_t>(d)]);
        });
      }
      if (pw->requires_grad) {
        float* gw = pw->grad_ptr();
        const float* vx = px->data.data();
        par_for(Dout, [&](int64_t o) {
          std::vector<double> acc(static_cast<size_t>(Din), 0.0);
          for (int r = 0; r < R; ++r) {
            double gv = g[static_cast<int64_t>(r) * Dout + o];
            const float* xrow = vx + static_cast<int64_t>(r) * Din;
            for (int d = 0; d < Din; ++d) acc[static_cast<size_t>(d)] += gv * xrow[d];
          }
          float* gwrow = gw + o * Din;
          for (int d = 0; d < Din; ++d) gwrow[d] += static_cast<float>(acc[static_cast<size_t>(d)]);
        });
      }
      if (pbias && pbias->requires_grad) {
        float* gb = pbias->grad_ptr();
        for (int o = 0; o < Dout; ++o) {
          double acc = 0.0;
          for (int r = 0; r < R; ++r) acc += g[static_cast<int64_t>(r) * Dout + o];
          gb[o] += static_cast<float>(acc);
        }
      }
    };
  });
}

// ---------------- softmax ----------------

namespace {

Tensor softmax_last(const Tensor& a, float T, const Tensor* mask) {
  const Shape& s = a.shape();
  int cols = s.back();
  int64_t rows = a.numel() / cols;
  const auto& da = a.data();
  const float* dm = nullptr;
  if (mask != nullptr) {
    if (mask->shape() != s)
      throw std::invalid_argument("softmax: mask shape " + shape_str(mask->shape()) +
                                  " does not match " + shape_str(s));
    dm = mask->data().data();
  }
  if (dm != nullptr) {
    for (int64_t r = 0; r < rows; ++r) {
      bool any = false;
      for (int c = 0; c < cols; ++c)
        if (dm[r * cols + c] != 0.0f) any = true;
      if (!any) throw std::invalid_argument("softmax: fully masked row");
    }
  }
  std::vector<float> out(da.size());
  par_for(rows, [&](int64_t r) {
    const float* xr = da.data() + r * cols;
    const float* mr = dm ? dm + r * cols : nullptr;
    float* orow = out.data() + r * cols;
    float mx = -std::numeric_limits<float>::infinity();
    for (int c = 0; c < cols; ++c) {
      if (mr && mr[c] == 0.0f) continue;
      mx = std::max(mx, xr[c]);
    }
    double denom = 0.0;
    for (int c = 0; c < cols; ++c) {
      if (mr && mr[c] == 0.0f) {
        orow[c] = 0.0f;
        continue;
      }
      float e = std::exp((xr[c] - mx) / T);
      orow[c] = e;
      denom += e;
    }
    float inv = static_cast<float>(1.0 / denom);
    for (int c = 0; c < cols; ++c) orow[c] *= (mr && mr[c] == 0.0f) ? 0.0f : inv;
  });
  return finish_op(s, std::move(out), "softmax", {a}, [&, rows, cols, T](TensorNode* res) {
    auto pa = a.handle();
    return [res, pa, rows, cols, T]() {
      const float* g = res->grad.data();
      const float* p = res->data.data();
      float* ga = pa->grad_ptr();
      for (int64_t r = 0; r < rows; ++r) {
        const float* pr = p + r * cols;
        const float* gr = g + r * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += static_cast<double>(pr[c]) * gr[c];
        float* gar = ga + r * cols;
        for (int c = 0; c < cols; ++c)
          gar[c] += pr[c] * (gr[c] - static_cast<float>(dot)) / T;
      }
    };
  });
}

}  // namespace

Tensor softmax(const Tensor& a, int axis, float temperature, const Tensor* mask) {
  if (!(temperature > 0.0f))
    throw std::invalid_argument("softmax: temperature must be > 0, got " +
                                std::to_string(temperature));
  int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd) throw std::invalid_argument("softmax: bad axis");
  if (axis == nd - 1) return softmax_last(a, temperature, mask);
  std::vector<int> perm, inv(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    if (i != axis) perm.push_back(i);
  perm.push_back(axis);
  for (int i = 0; i < nd; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
  Tensor ap = permute(a, perm);
  Tensor mp;
  const Tensor* mpp = nullptr;
  if (mask != nullptr) {
    NoGradGuard ng;
    mp = permute(*mask, perm);
    mpp = &mp;
  }
  Tensor sp = softmax_last(ap, temperature, mpp);
  return permute(sp, std::vector<int>(inv.begin(), inv.end()));
}

}  // namespace coopercept
