#include "coopercept/pillars.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "coopercept/rng.hpp"

namespace coopercept {

namespace {

int extent_cells(double lo, double hi, double step, const char* what) {
  double q = (hi - lo) / step;
  double r = std::round(q);
  if (std::fabs(q - r) > 1e-9 || r < 1.0)
    throw std::invalid_argument(std::string("VoxelConfig: ") + what +
                                " extent not divisible by voxel size");
  return static_cast<int>(r);
}

}  // namespace

int VoxelConfig::rows() const { return extent_cells(y_min, y_max, voxel_xy, "y"); }
int VoxelConfig::cols() const { return extent_cells(x_min, x_max, voxel_xy, "x"); }

void VoxelConfig::validate() const {
  if (voxel_xy <= 0.0 || voxel_z <= 0.0)
    throw std::invalid_argument("VoxelConfig: voxel sizes must be positive");
  (void)rows();
  (void)cols();
  (void)extent_cells(z_min, z_max, voxel_z, "z");
  if (max_points_per_pillar < 1) throw std::invalid_argument("VoxelConfig: max_points_per_pillar < 1");
  if (max_pillars < 1) throw std::invalid_argument("VoxelConfig: max_pillars < 1");
}

PillarBatch pillarize(const geom::PointCloud& cloud, const VoxelConfig& cfg, uint64_t seed) {
  cfg.validate();
  const int rows = cfg.rows(), cols = cfg.cols();
  const int m = cfg.max_points_per_pillar;

  struct Pt {
    float x, y, z;
    bool operator<(const Pt& o) const {
      if (x != o.x) return x < o.x;
      if (y != o.y) return y < o.y;
      return z < o.z;
    }
  };
  // ordered map keyed by linear cell index -> deterministic pillar order
  std::map<int64_t, std::vector<Pt>> cells;
  size_t n = cloud.size();
  for (size_t i = 0; i < n; ++i) {
    double x = cloud.xyz[3 * i], y = cloud.xyz[3 * i + 1], z = cloud.xyz[3 * i + 2];
    if (x < cfg.x_min || x >= cfg.x_max || y < cfg.y_min || y >= cfg.y_max || z < cfg.z_min ||
        z >= cfg.z_max)
      continue;
    int col = static_cast<int>(std::floor((x - cfg.x_min) / cfg.voxel_xy));
    int row = static_cast<int>(std::floor((y - cfg.y_min) / cfg.voxel_xy));
    if (col < 0 || col >= cols || row < 0 || row >= rows) continue;  // fp edge guard
    cells[static_cast<int64_t>(row) * cols + col].push_back(
        {cloud.xyz[3 * i], cloud.xyz[3 * i + 1], cloud.xyz[3 * i + 2]});
  }

  struct Pillar {
    int64_t key;
    std::vector<Pt> pts;  // kept points, canonically sorted
  };
  std::vector<Pillar> pillars;
  pillars.reserve(cells.size());
  for (auto& [key, pts] : cells) {
    std::sort(pts.begin(), pts.end());  // canonical order: independent of input order
    if (static_cast<int>(pts.size()) > m) {
      Rng rng(mix_seed(seed, static_cast<uint64_t>(key)));
      for (int i = 0; i < m; ++i) {
        int j = rng.uniform_int(i, static_cast<int>(pts.size()) - 1);
        std::swap(pts[static_cast<size_t>(i)], pts[static_cast<size_t>(j)]);
      }
      pts.resize(static_cast<size_t>(m));
      std::sort(pts.begin(), pts.end());
    }
    pillars.push_back({key, std::move(pts)});
  }

  if (static_cast<int>(pillars.size()) > cfg.max_pillars) {
    std::stable_sort(pillars.begin(), pillars.end(), [](const Pillar& a, const Pillar& b) {
      if (a.pts.size() != b.pts.size()) return a.pts.size() > b.pts.size();
      return a.key < b.key;
    });
    pillars.resize(static_cast<size_t>(cfg.max_pillars));
    std::sort(pillars.begin(), pillars.end(),
              [](const Pillar& a, const Pillar& b) { return a.key < b.key; });
  }

  PillarBatch out;
  out.n_pillars = static_cast<int>(pillars.size());
  out.max_points = m;
  out.features = Tensor::zeros({out.n_pillars, m, kPointFeatureDim});
  out.occupancy.assign(static_cast<size_t>(out.n_pillars) * m, 0);
  auto fd = out.features.mutable_data();
  for (int p = 0; p < out.n_pillars; ++p) {
    const auto& pil = pillars[static_cast<size_t>(p)];
    int row = static_cast<int>(pil.key / cols);
    int col = static_cast<int>(pil.key % cols);
    out.coords.emplace_back(row, col);
    double xc = cfg.x_min + (col + 0.5) * cfg.voxel_xy;
    double yc = cfg.y_min + (row + 0.5) * cfg.voxel_xy;
    double sx = 0, sy = 0, sz = 0;
    for (const auto& q : pil.pts) {
      sx += q.x;
      sy += q.y;
      sz += q.z;
    }
    double cnt = static_cast<double>(pil.pts.size());
    double xm = sx / cnt, ym = sy / cnt, zm = sz / cnt;
    for (size_t k = 0; k < pil.pts.size(); ++k) {
      const auto& q = pil.pts[k];
      float* f = &fd[(static_cast<size_t>(p) * m + k) * kPointFeatureDim];
      f[0] = q.x;
      f[1] = q.y;
      f[2] = q.z;
      f[3] = static_cast<float>(q.x - xm);
      f[4] = static_cast<float>(q.y - ym);
      f[5] = static_cast<float>(q.z - zm);
      f[6] = static_cast<float>(q.x - xc);
      f[7] = static_cast<float>(q.y - yc);
      out.occupancy[static_cast<size_t>(p) * m + k] = 1;
    }
  }
  return out;
}

void PillarFeatureNet::init(int out_ch, uint64_t seed, const std::string& prefix) {
  out_channels = out_ch;
  linear.init(prefix + ".pfn.linear", out_ch, kPointFeatureDim, seed);
  bn.init(prefix + ".pfn.bn", out_ch);
}

Tensor PillarFeatureNet::forward(const PillarBatch& batch, bool training) {
  int p = batch.n_pillars, m = batch.max_points;
  if (p == 0) return Tensor::zeros({0, out_channels});
  Tensor flat = reshape(batch.features, {p * m, kPointFeatureDim});
  Tensor emb = linear.forward(flat);                          // [P*M, C]
  Tensor x4 = reshape(permute(reshape(emb, {p, m, out_channels}), {2, 0, 1}),
                      {1, out_channels, p, m});               // [1,C,P,M]
  SpatialMask pm;
  pm.n = 1;
  pm.h = p;
  pm.w = m;
  pm.active = batch.occupancy;
  Tensor h = relu(bn.forward(x4, training, &pm));
  return max_pool_points(h, batch.occupancy, p, m);           // [P, C]
}

void PillarFeatureNet::collect(ParamList& out) {
  linear.collect(out);
  bn.collect(out);
}

void PillarFeatureNet::collect_buffers(
    std::map<std::string, std::pair<Shape, std::vector<float>>>& out) const {
  bn.collect_buffers(out);
}

void PillarFeatureNet::load_buffers(
    const std::map<std::string, std::pair<Shape, std::vector<float>>>& in) {
  bn.load_buffers(in);
}

Tensor scatter_to_pseudo_image(const Tensor& pillar_feats, const PillarBatch& batch,
                               const VoxelConfig& cfg, SpatialMask* mask_out) {
  int rows = cfg.rows(), cols = cfg.cols();
  if (pillar_feats.ndim() != 2 || pillar_feats.dim(0) != batch.n_pillars)
    throw std::invalid_argument("scatter_to_pseudo_image: features must be [P,C] matching batch");
  Tensor img = (batch.n_pillars == 0)
                   ? Tensor::zeros({1, pillar_feats.dim(1), rows, cols})
                   : scatter_pillars(pillar_feats, batch.coords, rows, cols);
  if (mask_out) {
    mask_out->n = 1;
    mask_out->h = rows;
    mask_out->w = cols;
    mask_out->active.assign(static_cast<size_t>(rows) * cols, 0);
    for (const auto& [r, c] : batch.coords)
      mask_out->active[static_cast<size_t>(r) * cols + c] = 1;
  }
  return img;
}

}  // namespace coopercept
