#include "coopercept/backbone.hpp"

#include <stdexcept>
#include <string>

namespace coopercept {

std::vector<int> BackboneConfig::default_blocks(Variant v, size_t n_stages) {
  std::vector<int> b(n_stages, 2);
  if (v == Variant::Teacher)
    for (size_t i = 1; i < n_stages; ++i) b[i] = 3;  // deeper from stage 2 on
  return b;
}

void BackboneConfig::validate() const {
  if (stage_channels.size() < 2)
    throw std::invalid_argument("BackboneConfig: need at least 2 stages");
  for (int c : stage_channels)
    if (c < 1) throw std::invalid_argument("BackboneConfig: non-positive stage width");
  if (!blocks_per_stage.empty() && blocks_per_stage.size() != stage_channels.size())
    throw std::invalid_argument("BackboneConfig: blocks_per_stage size mismatch");
  for (int b : blocks_per_stage)
    if (b < 1) throw std::invalid_argument("BackboneConfig: non-positive block count");
  if (stage_channels.back() % 2 != 0)
    throw std::invalid_argument("BackboneConfig: last stage width must be even (neck halves it)");
}

int BackboneConfig::neck_out_channels() const {
  size_t n = stage_channels.size();
  return stage_channels[n - 2] + stage_channels[n - 1] / 2;
}

void Backbone::init(const BackboneConfig& cfg, uint64_t seed, const std::string& prefix) {
  cfg.validate();
  cfg_ = cfg;
  if (cfg_.blocks_per_stage.empty())
    cfg_.blocks_per_stage = BackboneConfig::default_blocks(cfg_.variant, cfg_.stage_channels.size());

  size_t n = cfg_.stage_channels.size();
  stages_.assign(n, {});
  int in_c = cfg_.stage_channels[0];  // pseudo-image channels == stage-1 width
  for (size_t k = 0; k < n; ++k) {
    int out_c = cfg_.stage_channels[k];
    for (int j = 0; j < cfg_.blocks_per_stage[k]; ++j) {
      ConvBnBlock blk;
      std::string base =
          prefix + ".stage" + std::to_string(k + 1) + ".block" + std::to_string(j + 1);
      int stride = (k > 0 && j == 0) ? 2 : 1;
      blk.conv.init(base + ".conv", out_c, j == 0 ? in_c : out_c, 3, stride, 1, seed,
                    /*bias=*/false);
      blk.bn.init(base + ".bn", out_c);
      stages_[k].push_back(std::move(blk));
    }
    in_c = out_c;
  }
  int c_last = cfg_.stage_channels[n - 1];
  int c_skip = cfg_.stage_channels[n - 2];
  deconv1_.init(prefix + ".neck.deconv1", c_last, c_last / 2, 2, 2, seed);
  dbn1_.init(prefix + ".neck.bn1", c_last / 2);
  int cat_c = c_skip + c_last / 2;
  deconv2_.init(prefix + ".neck.deconv2", cat_c, cat_c, 2, 2, seed);
  dbn2_.init(prefix + ".neck.bn2", cat_c);
}

Tensor Backbone::run_graph(const Tensor& x_in, const SpatialMask* mask, bool training) {
  size_t n = stages_.size();
  Tensor x = x_in;
  SpatialMask m;
  if (mask) m = *mask;
  Tensor skip;  // second-to-last stage output
  for (size_t k = 0; k < n; ++k) {
    bool sparse_stage = (k + 1 < n) && mask != nullptr;
    for (auto& blk : stages_[k]) {
      x = blk.conv.forward(x);
      if (sparse_stage) {
        m = propagate_mask3x3(m, blk.conv.stride);
        x = blk.bn.forward(x, training, &m);
        x = relu(mask_mul(x, m));
      } else {
        x = relu(blk.bn.forward(x, training, nullptr));
      }
    }
    if (k + 2 == n) skip = x;
  }
  Tensor up = relu(dbn1_.forward(deconv1_.forward(x), training));
  Tensor cat = concat({skip, up}, 1);
  return relu(dbn2_.forward(deconv2_.forward(cat), training));
}

Tensor Backbone::forward(const Tensor& pseudo_image, const SpatialMask& mask, bool training) {
  if (pseudo_image.ndim() != 4 || pseudo_image.dim(1) != cfg_.stage_channels[0])
    throw std::invalid_argument("Backbone: expected [1," + std::to_string(cfg_.stage_channels[0]) +
                                ",H,W], got " + shape_str(pseudo_image.shape()));
  return run_graph(pseudo_image, &mask, training);
}

Tensor Backbone::forward_dense_unmasked(const Tensor& pseudo_image) {
  NoGradGuard ng;
  return run_graph(pseudo_image, nullptr, false);
}

Tensor Backbone::forward_sparse(const SparseMap2D& pseudo_image) {
  NoGradGuard ng;
  size_t n = stages_.size();
  SparseMap2D s = pseudo_image;
  SparseMap2D skip_sm;
  for (size_t k = 0; k + 1 < n; ++k) {
    for (auto& blk : stages_[k]) {
      s = sparse_conv2d(s, blk.conv.w, blk.conv.b, blk.conv.stride);
      Tensor rm = Tensor::from_data({static_cast<int>(blk.bn.state.running_mean.size())},
                                    blk.bn.state.running_mean);
      Tensor rv = Tensor::from_data({static_cast<int>(blk.bn.state.running_var.size())},
                                    blk.bn.state.running_var);
      sparse_batch_norm_eval(s, blk.bn.gamma, blk.bn.beta, rm, rv, blk.bn.eps);
      sparse_relu(s);
    }
    if (k + 2 == n) skip_sm = s;
  }
  Tensor x = densify(s);
  for (auto& blk : stages_[n - 1]) {
    x = blk.conv.forward(x);
    x = relu(blk.bn.forward(x, false, nullptr));
  }
  Tensor skip = densify(skip_sm);
  Tensor up = relu(dbn1_.forward(deconv1_.forward(x), false));
  Tensor cat = concat({skip, up}, 1);
  return relu(dbn2_.forward(deconv2_.forward(cat), false));
}

void Backbone::collect(ParamList& out) {
  for (auto& st : stages_)
    for (auto& blk : st) {
      blk.conv.collect(out);
      blk.bn.collect(out);
    }
  deconv1_.collect(out);
  dbn1_.collect(out);
  deconv2_.collect(out);
  dbn2_.collect(out);
}

void Backbone::collect_buffers(
    std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const {
  for (const auto& st : stages_)
    for (const auto& blk : st) blk.bn.collect_buffers(out);
  dbn1_.collect_buffers(out);
  dbn2_.collect_buffers(out);
}

void Backbone::load_buffers(
    const std::map<std::string, std::pair<Shape, std::vector<float>>>& in) {
  for (auto& st : stages_)
    for (auto& blk : st) blk.bn.load_buffers(in);
  dbn1_.load_buffers(in);
  dbn2_.load_buffers(in);
}

int64_t Backbone::param_count() const {
  ParamList p;
  const_cast<Backbone*>(this)->collect(p);
  int64_t c = 0;
  for (const auto& q : p) c += q.t.numel();
  return c;
}

}  // namespace coopercept
