#include "coopercept/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>

#include "coopercept/backbone.hpp"
#include "coopercept/logging.hpp"
#include "coopercept/rng.hpp"
#include "coopercept/sparse.hpp"
#include "coopercept/tensor.hpp"

namespace coopercept {

namespace {

double time_ms(const std::function<void()>& fn) {
  auto t0 = std::chrono::steady_clock::now();
  fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

// Vehicle-footprint-sized rectangles of active pillars dropped at random
// until the target fraction of the grid is covered.
SpatialMask make_blob_mask(int h, int w, double density, Rng& rng) {
  SpatialMask mask;
  mask.n = 1;
  mask.h = h;
  mask.w = w;
  mask.active.assign(static_cast<size_t>(h) * w, 0);
  int64_t target = std::llround(density * static_cast<double>(h) * static_cast<double>(w));
  int64_t count = 0;
  int guard = 0;
  while (count < target && guard < 1000000) {
    ++guard;
    int bh = rng.uniform_int(2, std::min(6, h));
    int bw = rng.uniform_int(3, std::min(12, w));
    int r0 = rng.uniform_int(0, h - bh);
    int c0 = rng.uniform_int(0, w - bw);
    for (int r = r0; r < r0 + bh; ++r)
      for (int c = c0; c < c0 + bw; ++c) {
        uint8_t& cell = mask.active[static_cast<size_t>(r) * w + c];
        if (!cell) {
          cell = 1;
          ++count;
        }
      }
  }
  return mask;
}

}  // namespace

std::vector<BenchRow> bench_sparse_vs_dense(const RunConfig& cfg,
                                            const std::vector<double>& densities, int repeats,
                                            uint64_t seed) {
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");
  BackboneConfig bc;
  bc.variant = Variant::Student;
  bc.stage_channels = cfg.stage_channels;
  Backbone backbone;
  backbone.init(bc, mix_seed(seed, "bench-backbone"), "bench");

  const int h = cfg.voxels.rows();
  const int w = cfg.voxels.cols();
  const int c0 = cfg.stage_channels.at(0);

  std::vector<BenchRow> rows;
  for (double density : densities) {
    if (density <= 0.0 || density > 1.0)
      throw std::invalid_argument("bench: density must be in (0,1]");
    Rng rng(mix_seed(mix_seed(seed, "bench-mask"),
                     static_cast<uint64_t>(std::llround(density * 1e9))));
    SpatialMask mask = make_blob_mask(h, w, density, rng);

    Tensor x = Tensor::zeros({1, c0, h, w});
    auto xd = x.mutable_data();
    for (int c = 0; c < c0; ++c)
      for (int r = 0; r < h; ++r)
        for (int cc = 0; cc < w; ++cc)
          if (mask.active[static_cast<size_t>(r) * w + cc])
            xd[(static_cast<size_t>(c) * h + r) * w + cc] = static_cast<float>(rng.normal());
    SparseMap2D sm = sparsify(x, mask);

    BenchRow row;
    row.density = density;
    row.measured = static_cast<double>(mask.count()) / (static_cast<double>(h) * w);
    row.sparse_ms = std::numeric_limits<double>::infinity();
    row.dense_ms = std::numeric_limits<double>::infinity();

    backbone.forward_sparse(sm);  // warmup
    for (int r = 0; r < repeats; ++r)
      row.sparse_ms = std::min(row.sparse_ms, time_ms([&] { backbone.forward_sparse(sm); }));
    backbone.forward_dense_unmasked(x);  // warmup
    for (int r = 0; r < repeats; ++r)
      row.dense_ms =
          std::min(row.dense_ms, time_ms([&] { backbone.forward_dense_unmasked(x); }));

    COOP_LOG_INFO("bench: density %.4f (measured %.4f): sparse %.2f ms, dense %.2f ms",
                  row.density, row.measured, row.sparse_ms, row.dense_ms);
    rows.push_back(row);
  }
  return rows;
}

void save_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << "density,sparse_ms,dense_ms\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.6g,%.6g,%.6g\n", r.density, r.sparse_ms, r.dense_ms);
    out << buf;
  }
}

}  // namespace coopercept
