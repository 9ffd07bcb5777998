#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coopercept/geometry.hpp"
#include "coopercept/nn.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

// Per-point feature layout: (x, y, z, x-xm, y-ym, z-zm, x-xc, y-yc) where
// (xm,ym,zm) is the mean of the pillar's kept points and (xc,yc) the cell
// center. No intensity channel (synthetic LiDAR carries none).
constexpr int kPointFeatureDim = 8;

struct VoxelConfig {
  double x_min = -140.8, x_max = 140.8;
  double y_min = -38.4, y_max = 38.4;
  double z_min = -1.0, z_max = 3.0;
  double voxel_xy = 0.4;
  double voxel_z = 4.0;
  int max_points_per_pillar = 32;
  int max_pillars = 12000;

  int rows() const;  // y extent / voxel_xy
  int cols() const;  // x extent / voxel_xy
  void validate() const;
};

struct PillarBatch {
  int n_pillars = 0;
  int max_points = 0;
  Tensor features;                          // [P, max_points, kPointFeatureDim]
  std::vector<std::pair<int, int>> coords;  // (row, col), unique, row-major sorted
  std::vector<uint8_t> occupancy;           // P * max_points slot flags
};

// Buckets a cloud into grid pillars. Points in each pillar are sorted
// canonically before any seeded subsampling, so the result is invariant to
// input point order. Oversubscribed pillars keep a seeded random subset;
// excess pillars are dropped lowest-count-first.
PillarBatch pillarize(const geom::PointCloud& cloud, const VoxelConfig& cfg, uint64_t seed);

// Shared per-point embedding: linear(D->C) + batch norm over the population
// of real points + ReLU, then a max over each pillar's points.
struct PillarFeatureNet {
  int out_channels = 32;
  LinearLayer linear;
  BatchNorm2dLayer bn;

  void init(int out_channels, uint64_t seed, const std::string& prefix);
  Tensor forward(const PillarBatch& batch, bool training);  // [P, C]
  void collect(ParamList& out);
  void collect_buffers(std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const;
  void load_buffers(const std::map<std::string, std::pair<Shape, std::vector<float>>>& in);
};

// Places per-pillar vectors onto the BEV grid: [P,C] -> [1,C,rows,cols].
// If mask_out is non-null it receives the active-cell mask.
Tensor scatter_to_pseudo_image(const Tensor& pillar_feats, const PillarBatch& batch,
                               const VoxelConfig& cfg, SpatialMask* mask_out = nullptr);

}  // namespace coopercept
