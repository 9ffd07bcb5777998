#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "coopercept/nn.hpp"
#include "coopercept/sparse.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

enum class Variant { Teacher, Student };

// Pillar-image encoder + neck. Stages halve resolution from stage 2 onward;
// all stages but the last run with sparse active-site semantics, the last is
// dense. The neck upsamples the last stage x2, concatenates the
// second-to-last stage, and upsamples x2 again, so output spatial dims are
// input dims / 4 (for the default 5-stage layout) and output width is
// C[n-2] + C[n-1]/2.
struct BackboneConfig {
  Variant variant = Variant::Student;
  std::vector<int> stage_channels = {32, 64, 128, 256, 256};
  std::vector<int> blocks_per_stage;  // empty -> variant default (see init)

  void validate() const;
  int neck_out_channels() const;
  static std::vector<int> default_blocks(Variant v, size_t n_stages);
};

struct ConvBnBlock {
  Conv2dLayer conv;  // 3x3, pad 1, no bias (the norm layer absorbs it)
  BatchNorm2dLayer bn;
};

class Backbone {
 public:
  void init(const BackboneConfig& cfg, uint64_t seed, const std::string& prefix);

  // Masked-dense forward (autodiff-capable): identical numerics to the sparse
  // path at active sites, exact zeros elsewhere through the sparse stages.
  Tensor forward(const Tensor& pseudo_image, const SpatialMask& mask, bool training);

  // Fast sparse inference path (eval statistics, no gradient tracking).
  Tensor forward_sparse(const SparseMap2D& pseudo_image);

  // Plain dense forward with no masking; the comparison baseline for
  // benchmarking the sparse path (eval statistics, no gradient tracking).
  Tensor forward_dense_unmasked(const Tensor& pseudo_image);

  void collect(ParamList& out);
  void collect_buffers(std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const;
  void load_buffers(const std::map<std::string, std::pair<Shape, std::vector<float>>>& in);

  int out_channels() const { return cfg_.neck_out_channels(); }
  const BackboneConfig& config() const { return cfg_; }
  int64_t param_count() const;

 private:
  Tensor run_graph(const Tensor& pseudo_image, const SpatialMask* mask, bool training);

  BackboneConfig cfg_;
  std::vector<std::vector<ConvBnBlock>> stages_;
  ConvTranspose2dLayer deconv1_;
  BatchNorm2dLayer dbn1_;
  ConvTranspose2dLayer deconv2_;
  BatchNorm2dLayer dbn2_;
};

}  // namespace coopercept
