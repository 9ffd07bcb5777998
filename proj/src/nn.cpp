#include "coopercept/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "coopercept/rng.hpp"

namespace coopercept {

namespace {

Tensor finish_nn_op(Shape shape, std::vector<float> data, const char* op,
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
    for (const Tensor& p : parents) node->parents.push_back(p.handle());
    node->backward_fn = make_bw(node.get());
  }
  return Tensor(std::move(node));
}

void check_nchw(const Tensor& x, const char* op) {
  if (x.ndim() != 4)
    throw std::invalid_argument(std::string(op) + ": expected NCHW input, got " +
                                shape_str(x.shape()));
}

}  // namespace

int64_t SpatialMask::count() const {
  int64_t c = 0;
  for (uint8_t v : active) c += v ? 1 : 0;
  return c;
}

SpatialMask SpatialMask::all_active(int n, int h, int w) {
  SpatialMask m;
  m.n = n;
  m.h = h;
  m.w = w;
  m.active.assign(static_cast<size_t>(n) * h * w, 1);
  return m;
}

Tensor mask_mul(const Tensor& x, const SpatialMask& m) {
  check_nchw(x, "mask_mul");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (m.n != N || m.h != H || m.w != W)
    throw std::invalid_argument("mask_mul: mask " + std::to_string(m.n) + "x" +
                                std::to_string(m.h) + "x" + std::to_string(m.w) +
                                " does not match input " + shape_str(x.shape()));
  const auto& dx = x.data();
  std::vector<float> out(dx.size());
  int64_t hw = static_cast<int64_t>(H) * W;
  par_for(static_cast<int64_t>(N) * C, [&](int64_t nc) {
    int64_t n = nc / C;
    const uint8_t* mp = m.active.data() + n * hw;
    const float* xp = dx.data() + nc * hw;
    float* op = out.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i) op[i] = mp[i] ? xp[i] : 0.0f;
  });
  std::vector<uint8_t> mask_copy = m.active;
  return finish_nn_op(x.shape(), std::move(out), "mask_mul", {x},
                      [&, N, C, hw, mask_copy](TensorNode* res) {
    auto px = x.handle();
    return [res, px, N, C, hw, mask_copy]() {
      const float* g = res->grad.data();
      float* gx = px->grad_ptr();
      for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        int64_t n = nc / C;
        const uint8_t* mp = mask_copy.data() + n * hw;
        for (int64_t i = 0; i < hw; ++i)
          if (mp[i]) gx[nc * hw + i] += g[nc * hw + i];
      }
    };
  });
}

// ---------------- conv2d ----------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  check_nchw(x, "conv2d");
  if (w.ndim() != 4)
    throw std::invalid_argument("conv2d: weight must be [OC,IC,KH,KW], got " +
                                shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int OC = w.dim(0), IC = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (IC != C)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                " != weight channels " + std::to_string(IC));
  int OH = (H + 2 * pad - KH) / stride + 1;
  int OW = (W + 2 * pad - KW) / stride + 1;
  if (OH <= 0 || OW <= 0)
    throw std::invalid_argument("conv2d: non-positive output size for input " +
                                shape_str(x.shape()));
  bool has_b = b.defined();
  if (has_b && (b.ndim() != 1 || b.dim(0) != OC))
    throw std::invalid_argument("conv2d: bias shape " + shape_str(b.shape()));

  const float* xp = x.data().data();
  const float* wp = w.data().data();
  const float* bp = has_b ? b.data().data() : nullptr;
  std::vector<float> out(static_cast<size_t>(N) * OC * OH * OW);

  par_for(static_cast<int64_t>(N) * OC, [&](int64_t noc) {
    int n = static_cast<int>(noc / OC);
    int oc = static_cast<int>(noc % OC);
    const float* wbase = wp + static_cast<int64_t>(oc) * IC * KH * KW;
    float* obase = out.data() + noc * OH * OW;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        double acc = bp ? static_cast<double>(bp[oc]) : 0.0;
        int ih0 = oh * stride - pad;
        int iw0 = ow * stride - pad;
        for (int ic = 0; ic < IC; ++ic) {
          const float* xc = xp + (static_cast<int64_t>(n) * C + ic) * H * W;
          const float* wc = wbase + static_cast<int64_t>(ic) * KH * KW;
          for (int kh = 0; kh < KH; ++kh) {
            int ih = ih0 + kh;
            if (ih < 0 || ih >= H) continue;
            const float* xrow = xc + static_cast<int64_t>(ih) * W;
            const float* wrow = wc + static_cast<int64_t>(kh) * KW;
            for (int kw = 0; kw < KW; ++kw) {
              int iw = iw0 + kw;
              if (iw < 0 || iw >= W) continue;
              acc += static_cast<double>(xrow[iw]) * wrow[kw];
            }
          }
        }
        obase[static_cast<int64_t>(oh) * OW + ow] = static_cast<float>(acc);
      }
    }
  });

  std::vector<Tensor> parents = {x, w};
  if (has_b) parents.push_back(b);
  return finish_nn_op({N, OC, OH, OW}, std::move(out), "conv2d", parents,
                      [&, N, C, H, W, OC, IC, KH, KW, OH, OW, stride, pad, has_b](TensorNode* res) {
    auto px = x.handle();
    auto pw = w.handle();
    std::shared_ptr<TensorNode> pb = has_b ? b.handle() : nullptr;
    return [res, px, pw, pb, N, C, H, W, OC, IC, KH, KW, OH, OW, stride, pad]() {
      const float* g = res->grad.data();
      const float* xv = px->data.data();
      const float* wv = pw->data.data();
      if (px->requires_grad) {
        float* gx = px->grad_ptr();
        par_for(static_cast<int64_t>(N) * IC, [&](int64_t nic) {
          int n = static_cast<int>(nic / IC);
          int ic = static_cast<int>(nic % IC);
          float* gxc = gx + nic * H * W;
          for (int ih = 0; ih < H; ++ih) {
            for (int iw = 0; iw < W; ++iw) {
              double acc = 0.0;
              for (int kh = 0; kh < KH; ++kh) {
                int ohs = ih + pad - kh;
                if (ohs < 0 || ohs % stride != 0) continue;
                int oh = ohs / stride;
                if (oh >= OH) continue;
                for (int kw = 0; kw < KW; ++kw) {
                  int ows = iw + pad - kw;
                  if (ows < 0 || ows % stride != 0) continue;
                  int ow = ows / stride;
                  if (ow >= OW) continue;
                  for (int oc = 0; oc < OC; ++oc) {
                    acc += static_cast<double>(
                               g[((static_cast<int64_t>(n) * OC + oc) * OH + oh) * OW + ow]) *
                           wv[((static_cast<int64_t>(oc) * IC + ic) * KH + kh) * KW + kw];
                  }
                }
              }
              gxc[static_cast<int64_t>(ih) * W + iw] += static_cast<float>(acc);
            }
          }
        });
      }
      if (pw->requires_grad) {
        float* gw = pw->grad_ptr();
        par_for(OC, [&](int64_t oc) {
          for (int ic = 0; ic < IC; ++ic) {
            for (int kh = 0; kh < KH; ++kh) {
              for (int kw = 0; kw < KW; ++kw) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) {
                  const float* gc = g + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
                  const float* xc = xv + (static_cast<int64_t>(n) * C + ic) * H * W;
                  for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride - pad + kh;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < OW; ++ow) {
                      int iw = ow * stride - pad + kw;
                      if (iw < 0 || iw >= W) continue;
                      acc += static_cast<double>(gc[static_cast<int64_t>(oh) * OW + ow]) *
                             xc[static_cast<int64_t>(ih) * W + iw];
                    }
                  }
                }
                gw[((oc * IC + ic) * KH + kh) * KW + kw] += static_cast<float>(acc);
              }
            }
          }
        });
      }
      if (pb && pb->requires_grad) {
        float* gb = pb->grad_ptr();
        par_for(OC, [&](int64_t oc) {
          double acc = 0.0;
          for (int n = 0; n < N; ++n) {
            const float* gc = g + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
            for (int64_t i = 0; i < static_cast<int64_t>(OH) * OW; ++i) acc += gc[i];
          }
          gb[oc] += static_cast<float>(acc);
        });
      }
    };
  });
}

// ---------------- conv_transpose2d ----------------

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride) {
  check_nchw(x, "conv_transpose2d");
  if (w.ndim() != 4)
    throw std::invalid_argument("conv_transpose2d: weight must be [IC,OC,KH,KW], got " +
                                shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv_transpose2d: stride must be >= 1");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int IC = w.dim(0), OC = w.dim(1), KH = w.dim(2), KW = w.dim(3);
  if (IC != C)
    throw std::invalid_argument("conv_transpose2d: input channels " + std::to_string(C) +
                                " != weight channels " + std::to_string(IC));
  int OH = (H - 1) * stride + KH;
  int OW = (W - 1) * stride + KW;
  const float* xp = x.data().data();
  const float* wp = w.data().data();
  std::vector<float> out(static_cast<size_t>(N) * OC * OH * OW);
  par_for(static_cast<int64_t>(N) * OC, [&](int64_t noc) {
    int n = static_cast<int>(noc / OC);
    int oc = static_cast<int>(noc % OC);
    float* obase = out.data() + noc * OH * OW;
    for (int oh = 0; oh < OH; ++oh) {
      for (int ow = 0; ow < OW; ++ow) {
        double acc = 0.0;
        for (int kh = 0; kh < KH; ++kh) {
          int ihs = oh - kh;
          if (ihs < 0 || ihs % stride != 0) continue;
          int ih = ihs / stride;
          if (ih >= H) continue;
          for (int kw = 0; kw < KW; ++kw) {
            int iws = ow - kw;
            if (iws < 0 || iws % stride != 0) continue;
            int iw = iws / stride;
            if (iw >= W) continue;
            for (int ic = 0; ic < IC; ++ic) {
              acc += static_cast<double>(
                         xp[((static_cast<int64_t>(n) * C + ic) * H + ih) * W + iw]) *
                     wp[((static_cast<int64_t>(ic) * OC + oc) * KH + kh) * KW + kw];
            }
          }
        }
        obase[static_cast<int64_t>(oh) * OW + ow] = static_cast<float>(acc);
      }
    }
  });
  return finish_nn_op({N, OC, OH, OW}, std::move(out), "conv_transpose2d", {x, w},
                      [&, N, C, H, W, IC, OC, KH, KW, OH, OW, stride](TensorNode* res) {
    auto px = x.handle();
    auto pw = w.handle();
    return [res, px, pw, N, C, H, W, IC, OC, KH, KW, OH, OW, stride]() {
      const float* g = res->grad.data();
      const float* xv = px->data.data();
      const float* wv = pw->data.data();
      if (px->requires_grad) {
        float* gx = px->grad_ptr();
        par_for(static_cast<int64_t>(N) * IC, [&](int64_t nic) {
          int n = static_cast<int>(nic / IC);
          int ic = static_cast<int>(nic % IC);
          float* gxc = gx + nic * H * W;
          for (int ih = 0; ih < H; ++ih) {
            for (int iw = 0; iw < W; ++iw) {
              double acc = 0.0;
              for (int oc = 0; oc < OC; ++oc) {
                const float* gc = g + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
                const float* wc = wv + (static_cast<int64_t>(ic) * OC + oc) * KH * KW;
                for (int kh = 0; kh < KH; ++kh) {
                  int oh = ih * stride + kh;
                  const float* grow = gc + static_cast<int64_t>(oh) * OW;
                  const float* wrow = wc + static_cast<int64_t>(kh) * KW;
                  for (int kw = 0; kw < KW; ++kw)
                    acc += static_cast<double>(grow[iw * stride + kw]) * wrow[kw];
                }
              }
              gxc[static_cast<int64_t>(ih) * W + iw] += static_cast<float>(acc);
            }
          }
        });
      }
      if (pw->requires_grad) {
        float* gw = pw->grad_ptr();
        par_for(IC, [&](int64_t ic) {
          for (int oc = 0; oc < OC; ++oc) {
            for (int kh = 0; kh < KH; ++kh) {
              for (int kw = 0; kw < KW; ++kw) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n) {
                  const float* xc = xv + (static_cast<int64_t>(n) * C + ic) * H * W;
                  const float* gc = g + (static_cast<int64_t>(n) * OC + oc) * OH * OW;
                  for (int ih = 0; ih < H; ++ih) {
                    const float* xrow = xc + static_cast<int64_t>(ih) * W;
                    const float* grow = gc + static_cast<int64_t>(ih * stride + kh) * OW + kw;
                    for (int iw = 0; iw < W; ++iw)
                      acc += static_cast<double>(xrow[iw]) * grow[static_cast<int64_t>(iw) * stride];
                  }
                }
                gw[((ic * OC + oc) * KH + kh) * KW + kw] += static_cast<float>(acc);
              }
            }
          }
        });
      }
    };
  });
}

// ---------------- batch norm ----------------

void BnState::init(int channels) {
  running_mean.assign(static_cast<size_t>(channels), 0.0f);
  running_var.assign(static_cast<size_t>(channels), 1.0f);
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                    bool training, float momentum, float eps, const SpatialMask* mask) {
  check_nchw(x, "batch_norm2d");
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
    throw std::invalid_argument("batch_norm2d: gamma/beta must be [C]");
  if (static_cast<int>(state.running_mean.size()) != C)
    throw std::invalid_argument("batch_norm2d: state not initialized for C=" + std::to_string(C));
  if (mask != nullptr && (mask->n != N || mask->h != H || mask->w != W))
    throw std::invalid_argument("batch_norm2d: mask dims mismatch");

  int64_t hw = static_cast<int64_t>(H) * W;
  int64_t plane = static_cast<int64_t>(N) * hw;
  int64_t cnt = mask ? mask->count() : plane;
  if (training && cnt < 2)
    throw std::invalid_argument("batch_norm2d: training requires >= 2 active elements, got " +
                                std::to_string(cnt));

  const float* xp = x.data().data();
  const float* gp = gamma.data().data();
  const float* bp = beta.data().data();
  std::vector<float> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));

  if (training) {
    par_for(C, [&](int64_t c) {
      double s = 0.0, s2 = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* xc = xp + (static_cast<int64_t>(n) * C + c) * hw;
        const uint8_t* mp = mask ? mask->active.data() + static_cast<int64_t>(n) * hw : nullptr;
        for (int64_t i = 0; i < hw; ++i) {
          if (mp && !mp[i]) continue;
          double v = xc[i];
          s += v;
          s2 += v * v;
        }
      }
      double mu = s / static_cast<double>(cnt);
      double var = s2 / static_cast<double>(cnt) - mu * mu;
      if (var < 0.0) var = 0.0;
      mean[static_cast<size_t>(c)] = static_cast<float>(mu);
      invstd[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + eps));
      // running stats: unbiased variance
      double uvar = cnt > 1 ? var * static_cast<double>(cnt) / static_cast<double>(cnt - 1) : var;
      state.running_mean[static_cast<size_t>(c)] =
          (1.0f - momentum) * state.running_mean[static_cast<size_t>(c)] +
          momentum * static_cast<float>(mu);
      state.running_var[static_cast<size_t>(c)] =
          (1.0f - momentum) * state.running_var[static_cast<size_t>(c)] +
          momentum * static_cast<float>(uvar);
    });
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      invstd[static_cast<size_t>(c)] =
          1.0f / std::sqrt(state.running_var[static_cast<size_t>(c)] + eps);
    }
  }

  std::vector<float> out(x.data().size());
  par_for(static_cast<int64_t>(N) * C, [&](int64_t nc) {
    int c = static_cast<int>(nc % C);
    const float* xc = xp + nc * hw;
    float* oc = out.data() + nc * hw;
    float mu = mean[static_cast<size_t>(c)];
    float inv = invstd[static_cast<size_t>(c)];
    float ga = gp[c], be = bp[c];
    for (int64_t i = 0; i < hw; ++i) oc[i] = ga * (xc[i] - mu) * inv + be;
  });

  std::vector<uint8_t> mask_copy;
  bool has_mask = mask != nullptr;
  if (has_mask) mask_copy = mask->active;
  return finish_nn_op(x.shape(), std::move(out), "batch_norm2d", {x, gamma, beta},
                      [&, N, C, hw, cnt, training, has_mask, mask_copy, mean,
                       invstd](TensorNode* res) {
    auto px = x.handle();
    auto pg = gamma.handle();
    auto pb = beta.handle();
    return [res, px, pg, pb, N, C, hw, cnt, training, has_mask, mask_copy, mean, invstd]() {
      const float* g = res->grad.data();
      const float* xv = px->data.data();
      const float* gav = pg->data.data();
      // per-channel sums over all transformed cells
      std::vector<double> sum_g(static_cast<size_t>(C), 0.0),
          sum_gx(static_cast<size_t>(C), 0.0);
      par_for(C, [&](int64_t c) {
        double sg = 0.0, sgx = 0.0;
        float mu = mean[static_cast<size_t>(c)];
        float inv = invstd[static_cast<size_t>(c)];
        for (int n = 0; n < N; ++n) {
          const float* gc = g + (static_cast<int64_t>(n) * C + c) * hw;
          const float* xc = xv + (static_cast<int64_t>(n) * C + c) * hw;
          for (int64_t i = 0; i < hw; ++i) {
            double gg = gc[i];
            sg += gg;
            sgx += gg * static_cast<double>((xc[i] - mu) * inv);
          }
        }
        sum_g[static_cast<size_t>(c)] = sg;
        sum_gx[static_cast<size_t>(c)] = sgx;
      });
      if (pg->requires_grad) {
        float* ggamma = pg->grad_ptr();
        for (int c = 0; c < C; ++c) ggamma[c] += static_cast<float>(sum_gx[static_cast<size_t>(c)]);
      }
      if (pb->requires_grad) {
        float* gbeta = pb->grad_ptr();
        for (int c = 0; c < C; ++c) gbeta[c] += static_cast<float>(sum_g[static_cast<size_t>(c)]);
      }
      if (px->requires_grad) {
        float* gx = px->grad_ptr();
        par_for(static_cast<int64_t>(N) * C, [&](int64_t nc) {
          int64_t n = nc / C;
          int c = static_cast<int>(nc % C);
          float mu = mean[static_cast<size_t>(c)];
          float inv = invstd[static_cast<size_t>(c)];
          float ga = gav[c];
          const float* gc = g + nc * hw;
          const float* xc = xv + nc * hw;
          float* gxc = gx + nc * hw;
          const uint8_t* mp = has_mask ? mask_copy.data() + n * hw : nullptr;
          double mg = sum_g[static_cast<size_t>(c)] / static_cast<double>(cnt);
          double mgx = sum_gx[static_cast<size_t>(c)] / static_cast<double>(cnt);
          for (int64_t i = 0; i < hw; ++i) {
            double corr = 0.0;
            if (training && (!mp || mp[i])) {
              double xh = static_cast<double>((xc[i] - mu) * inv);
              corr = mg + xh * mgx;
            }
            gxc[i] += static_cast<float>(static_cast<double>(ga) * inv *
                                         (static_cast<double>(gc[i]) - corr));
          }
        });
      }
    };
  });
}

// ---------------- max pool over points ----------------

Tensor max_pool_points(const Tensor& x, const std::vector<uint8_t>& mask, int P, int M) {
  check_nchw(x, "max_pool_points");
  if (x.dim(0) != 1 || x.dim(2) != P || x.dim(3) != M)
    throw std::invalid_argument("max_pool_points: expected [1,C,P,M], got " +
                                shape_str(x.shape()));
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(P) * M)
    throw std::invalid_argument("max_pool_points: mask size mismatch");
  int C = x.dim(1);
  for (int p = 0; p < P; ++p) {
    bool any = false;
    for (int m = 0; m < M; ++m)
      if (mask[static_cast<size_t>(p) * M + m]) any = true;
    if (!any)
      throw std::runtime_error("max_pool_points: pillar " + std::to_string(p) +
                               " has no valid points");
  }
  const float* xp = x.data().data();
  std::vector<float> out(static_cast<size_t>(P) * C);
  std::vector<int32_t> argmax(static_cast<size_t>(P) * C, -1);
  par_for(static_cast<int64_t>(P) * C, [&](int64_t pc) {
    int p = static_cast<int>(pc / C);
    int c = static_cast<int>(pc % C);
    const float* row = xp + (static_cast<int64_t>(c) * P + p) * M;
    const uint8_t* mp = mask.data() + static_cast<int64_t>(p) * M;
    float best = 0.0f;
    int bi = -1;
    for (int m = 0; m < M; ++m) {
      if (!mp[m]) continue;
      if (bi < 0 || row[m] > best) {
        best = row[m];
        bi = m;
      }
    }
    out[pc] = best;
    argmax[pc] = bi;
  });
  return finish_nn_op({P, C}, std::move(out), "max_pool_points", {x},
                      [&, P, C, M, argmax](TensorNode* res) {
    auto px = x.handle();
    return [res, px, P, C, M, argmax]() {
      const float* g = res->grad.data();
      float* gx = px->grad_ptr();
      for (int64_t pc = 0; pc < static_cast<int64_t>(P) * C; ++pc) {
        int p = static_cast<int>(pc / C);
        int c = static_cast<int>(pc % C);
        gx[(static_cast<int64_t>(c) * P + p) * M + argmax[pc]] += g[pc];
      }
    };
  });
}

// ---------------- scatter pillars ----------------

Tensor scatter_pillars(const Tensor& feats, const std::vector<std::pair<int, int>>& coords,
                       int h, int w) {
  if (feats.ndim() != 2)
    throw std::invalid_argument("scatter_pillars: features must be [P,C], got " +
                                shape_str(feats.shape()));
  int P = feats.dim(0), C = feats.dim(1);
  if (static_cast<int>(coords.size()) != P)
    throw std::invalid_argument("scatter_pillars: coords count " +
                                std::to_string(coords.size()) + " != pillars " +
                                std::to_string(P));
  std::vector<uint8_t> seen(static_cast<size_t>(h) * w, 0);
  for (const auto& [r, c] : coords) {
    if (r < 0 || r >= h || c < 0 || c >= w)
      throw std::out_of_range("scatter_pillars: coord (" + std::to_string(r) + "," +
                              std::to_string(c) + ") outside grid " + std::to_string(h) + "x" +
                              std::to_string(w));
    uint8_t& s = seen[static_cast<size_t>(r) * w + c];
    if (s) throw std::invalid_argument("scatter_pillars: duplicate pillar coordinate (" +
                                       std::to_string(r) + "," + std::to_string(c) + ")");
    s = 1;
  }
  const float* fp = feats.data().data();
  std::vector<float> out(static_cast<size_t>(C) * h * w, 0.0f);
  for (int p = 0; p < P; ++p) {
    auto [r, c_] = coords[static_cast<size_t>(p)];
    for (int c = 0; c < C; ++c)
      out[(static_cast<int64_t>(c) * h + r) * w + c_] = fp[static_cast<int64_t>(p) * C + c];
  }
  auto coords_copy = coords;
  return finish_nn_op({1, C, h, w}, std::move(out), "scatter_pillars", {feats},
                      [&, P, C, h, w, coords_copy](TensorNode* res) {
    auto pf = feats.handle();
    return [res, pf, P, C, w, coords_copy]() {
      const float* g = res->grad.data();
      float* gf = pf->grad_ptr();
      int hh = res->shape[2];
      for (int p = 0; p < P; ++p) {
        auto [r, c_] = coords_copy[static_cast<size_t>(p)];
        for (int c = 0; c < C; ++c)
          gf[static_cast<int64_t>(p) * C + c] +=
              g[(static_cast<int64_t>(c) * hh + r) * w + c_];
      }
    };
  });
}

// ---------------- bilinear warp ----------------

Tensor bilinear_warp(const Tensor& x, const WarpPlan& plan) {
  check_nchw(x, "bilinear_warp");
  if (x.dim(0) != 1 || x.dim(2) != plan.src_h || x.dim(3) != plan.src_w)
    throw std::invalid_argument("bilinear_warp: input " + shape_str(x.shape()) +
                                " does not match plan source " + std::to_string(plan.src_h) +
                                "x" + std::to_string(plan.src_w));
  int C = x.dim(1);
  int64_t src_hw = static_cast<int64_t>(plan.src_h) * plan.src_w;
  int64_t dst_hw = static_cast<int64_t>(plan.dst_h) * plan.dst_w;
  if (static_cast<int64_t>(plan.taps.size()) != dst_hw)
    throw std::invalid_argument("bilinear_warp: malformed plan");
  const float* xp = x.data().data();
  std::vector<float> out(static_cast<size_t>(C) * dst_hw, 0.0f);
  par_for(C, [&](int64_t c) {
    const float* xc = xp + c * src_hw;
    float* oc = out.data() + c * dst_hw;
    for (int64_t j = 0; j < dst_hw; ++j) {
      const auto& t = plan.taps[static_cast<size_t>(j)];
      double acc = 0.0;
      for (int k = 0; k < 4; ++k)
        if (t.idx[k] >= 0) acc += static_cast<double>(t.wgt[k]) * xc[t.idx[k]];
      oc[j] = static_cast<float>(acc);
    }
  });
  // The plan is captured by value: small relative to features at desk scale.
  WarpPlan plan_copy = plan;
  return finish_nn_op({1, C, plan.dst_h, plan.dst_w}, std::move(out), "bilinear_warp", {x},
                      [&, C, src_hw, dst_hw, plan_copy](TensorNode* res) {
    auto px = x.handle();
    return [res, px, C, src_hw, dst_hw, plan_copy]() {
      const float* g = res->grad.data();
      float* gx = px->grad_ptr();
      par_for(C, [&](int64_t c) {
        const float* gc = g + c * dst_hw;
        float* gxc = gx + c * src_hw;
        for (int64_t j = 0; j < dst_hw; ++j) {
          const auto& t = plan_copy.taps[static_cast<size_t>(j)];
          for (int k = 0; k < 4; ++k)
            if (t.idx[k] >= 0) gxc[t.idx[k]] += t.wgt[k] * gc[j];
        }
      });
    };
  });
}

// ---------------- layers ----------------

Tensor kaiming_uniform(const Shape& shape, int fan_in, uint64_t seed, const std::string& name) {
  if (fan_in <= 0) throw std::invalid_argument("kaiming_uniform: fan_in must be positive");
  Rng rng(mix_seed(seed, name));
  double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<float> d(static_cast<size_t>(shape_numel(shape)));
  for (float& v : d) v = static_cast<float>(rng.uniform(-bound, bound));
  Tensor t = Tensor::from_data(shape, std::move(d));
  t.set_requires_grad(true);
  return t;
}

void LinearLayer::init(const std::string& nm, int out_f, int in_f, uint64_t seed, bool bias) {
  name = nm;
  w = kaiming_uniform({out_f, in_f}, in_f, seed, nm + ".weight");
  if (bias) {
    b = Tensor::zeros({out_f});
    b.set_requires_grad(true);
  } else {
    b = Tensor();
  }
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, w, b); }

void LinearLayer::collect(ParamList& out) {
  out.push_back({name + ".weight", w});
  if (b.defined()) out.push_back({name + ".bias", b});
}

void Conv2dLayer::init(const std::string& nm, int oc, int ic, int k, int stride_, int pad_,
                       uint64_t seed, bool bias) {
  name = nm;
  stride = stride_;
  pad = pad_;
  w = kaiming_uniform({oc, ic, k, k}, ic * k * k, seed, nm + ".weight");
  if (bias) {
    b = Tensor::zeros({oc});
    b.set_requires_grad(true);
  } else {
    b = Tensor();
  }
}

Tensor Conv2dLayer::forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }

void Conv2dLayer::collect(ParamList& out) {
  out.push_back({name + ".weight", w});
  if (b.defined()) out.push_back({name + ".bias", b});
}

void ConvTranspose2dLayer::init(const std::string& nm, int ic, int oc, int k, int stride_,
                                uint64_t seed) {
  name = nm;
  stride = stride_;
  w = kaiming_uniform({ic, oc, k, k}, ic * k * k, seed, nm + ".weight");
}

Tensor ConvTranspose2dLayer::forward(const Tensor& x) const {
  return conv_transpose2d(x, w, stride);
}

void ConvTranspose2dLayer::collect(ParamList& out) { out.push_back({name + ".weight", w}); }

void BatchNorm2dLayer::init(const std::string& nm, int channels) {
  name = nm;
  gamma = Tensor::full({channels}, 1.0f);
  gamma.set_requires_grad(true);
  beta = Tensor::zeros({channels});
  beta.set_requires_grad(true);
  state.init(channels);
}

Tensor BatchNorm2dLayer::forward(const Tensor& x, bool training, const SpatialMask* mask) {
  return batch_norm2d(x, gamma, beta, state, training, momentum, eps, mask);
}

void BatchNorm2dLayer::collect(ParamList& out) {
  out.push_back({name + ".gamma", gamma});
  out.push_back({name + ".beta", beta});
}

void BatchNorm2dLayer::collect_buffers(
    std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const {
  int c = gamma.dim(0);
  out[name + ".running_mean"] = {Shape{c}, state.running_mean};
  out[name + ".running_var"] = {Shape{c}, state.running_var};
}

void BatchNorm2dLayer::load_buffers(
    const std::map<std::string, std::pair<Shape, std::vector<float>>>& in) {
  auto it = in.find(name + ".running_mean");
  if (it != in.end()) state.running_mean = it->second.second;
  it = in.find(name + ".running_var");
  if (it != in.end()) state.running_var = it->second.second;
}

// ---------------- optimizer ----------------

void Adam::step(ParamList& params) {
  for (Parameter& p : params) {
    if (!p.t.has_grad()) continue;
    State& st = state[p.name];
    size_t n = p.t.mutable_data().size();
    if (st.m.empty()) {
      st.m.assign(n, 0.0f);
      st.v.assign(n, 0.0f);
    }
    if (st.m.size() != n)
      throw std::logic_error("adam: state size mismatch for " + p.name);
    ++st.t;
    double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(st.t));
    double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(st.t));
    float* w = p.t.mutable_data().data();
    auto g = p.t.grad();
    for (size_t i = 0; i < n; ++i) {
      float gi = g[i];
      st.m[i] = beta1 * st.m[i] + (1.0f - beta1) * gi;
      st.v[i] = beta2 * st.v[i] + (1.0f - beta2) * gi * gi;
      double mhat = st.m[i] / bc1;
      double vhat = st.v[i] / bc2;
      w[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

void Adam::zero_grad(ParamList& params) {
  for (Parameter& p : params) p.t.zero_grad();
}

// ---------------- checkpoint ----------------

namespace {

template <class T>
void write_raw(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_raw(std::ifstream& is, T& v, const char* what) {
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error(std::string("checkpoint: truncated reading ") + what);
}

}  // namespace

void NamedTensorMap::put(const std::string& name, const Shape& s, std::vector<float> data) {
  if (static_cast<int64_t>(data.size()) != shape_numel(s))
    throw std::invalid_argument("checkpoint put: data size mismatch for " + name);
  items[name] = {s, std::move(data)};
}

void NamedTensorMap::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  os.write("CPKT", 4);
  write_raw<uint32_t>(os, 1u);
  write_raw<uint32_t>(os, static_cast<uint32_t>(items.size()));
  for (const auto& [name, entry] : items) {
    write_raw<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& s = entry.first;
    write_raw<uint32_t>(os, static_cast<uint32_t>(s.size()));
    for (int d : s) write_raw<uint32_t>(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(entry.second.data()),
             static_cast<std::streamsize>(entry.second.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

NamedTensorMap NamedTensorMap::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CPKT", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path.string());
  uint32_t version = 0, count = 0;
  read_raw(is, version, "version");
  if (version != 1)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  read_raw(is, count, "count");
  NamedTensorMap out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    read_raw(is, name_len, "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error("checkpoint: truncated reading name");
    uint32_t ndim = 0;
    read_raw(is, ndim, "ndim");
    Shape s(ndim);
    int64_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      uint32_t dim = 0;
      read_raw(is, dim, "dims");
      s[d] = static_cast<int>(dim);
      numel *= dim;
    }
    std::vector<float> data(static_cast<size_t>(numel));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated payload for " + name);
    out.items[name] = {std::move(s), std::move(data)};
  }
  return out;
}

}  // namespace coopercept
