// Pillarization: grid bucketing, canonical ordering, seeded subsampling,
// the per-point feature layout against a hand oracle, the pillar feature
// net against the serial reference composition, and BEV scattering.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "coopercept/pillars.hpp"
#include "coopercept/reference.hpp"
#include "coopercept/rng.hpp"
#include "doctest.h"
#include "testutil.hpp"

using namespace coopercept;
using coopref::dvec;
using testsupport::random_normal;
using testsupport::to_dvec;

namespace {

VoxelConfig small_grid() {
  VoxelConfig v;
  v.x_min = -4.0;
  v.x_max = 4.0;
  v.y_min = -2.0;
  v.y_max = 2.0;
  v.z_min = -1.0;
  v.z_max = 3.0;
  v.voxel_xy = 1.0;
  v.voxel_z = 4.0;
  v.max_points_per_pillar = 4;
  v.max_pillars = 100;
  return v;
}

geom::PointCloud random_cloud(int n, const VoxelConfig& v, Rng& rng) {
  geom::PointCloud pc;
  for (int i = 0; i < n; ++i)
    pc.push(static_cast<float>(rng.uniform(v.x_min - 1.0, v.x_max + 1.0)),
            static_cast<float>(rng.uniform(v.y_min - 1.0, v.y_max + 1.0)),
            static_cast<float>(rng.uniform(v.z_min - 0.5, v.z_max + 0.5)));
  return pc;
}

bool batches_identical(const PillarBatch& a, const PillarBatch& b) {
  if (a.n_pillars != b.n_pillars || a.max_points != b.max_points) return false;
  if (a.coords != b.coords || a.occupancy != b.occupancy) return false;
  auto da = a.features.data();
  auto db = b.features.data();
  if (da.size() != db.size()) return false;
  for (size_t i = 0; i < da.size(); ++i)
    if (da[i] != db[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("voxel grid dimensions") {
  VoxelConfig v;  // defaults: x +-140.8, y +-38.4, 0.4 m cells
  CHECK(v.rows() == 192);
  CHECK(v.cols() == 704);
  CHECK_NOTHROW(v.validate());

  // the point (0.2, 0.2) lands in cell (row 96, col 352):
  // col = floor((0.2+140.8)/0.4), row = floor((0.2+38.4)/0.4)
  geom::PointCloud pc;
  pc.push(0.2f, 0.2f, 0.5f);
  PillarBatch b = pillarize(pc, v, 1);
  REQUIRE(b.n_pillars == 1);
  CHECK(b.coords[0].first == 96);
  CHECK(b.coords[0].second == 352);

  SUBCASE("non-divisible extents throw") {
    VoxelConfig bad = v;
    bad.x_max = 140.9;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = v;
    bad.voxel_xy = -0.4;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  }
}

TEST_CASE("pillarize bucketing and features") {
  VoxelConfig v = small_grid();

  SUBCASE("hand case: two pillars with exact features") {
    geom::PointCloud pc;
    // three points in cell (row 2, col 4): x in [0,1), y in [0,1)
    pc.push(0.25f, 0.5f, 0.0f);
    pc.push(0.5f, 0.25f, 1.0f);
    pc.push(0.75f, 0.75f, 2.0f);
    // one point in cell (row 0, col 0)
    pc.push(-3.5f, -1.5f, 0.5f);

    PillarBatch b = pillarize(pc, v, 7);
    REQUIRE(b.n_pillars == 2);
    CHECK(b.max_points == 4);
    // row-major sorted coords: (0,0) before (2,4)
    CHECK(b.coords[0] == std::make_pair(0, 0));
    CHECK(b.coords[1] == std::make_pair(2, 4));
    // occupancy: 1 point then 3 points
    int occ0 = 0, occ1 = 0;
    for (int k = 0; k < 4; ++k) {
      occ0 += b.occupancy[static_cast<size_t>(k)];
      occ1 += b.occupancy[static_cast<size_t>(4 + k)];
    }
    CHECK(occ0 == 1);
    CHECK(occ1 == 3);

    auto f = b.features.data();
    // pillar 0: single point, mean = itself, cell center (-3.5, -1.5)
    CHECK(f[0] == -3.5f);
    CHECK(f[1] == -1.5f);
    CHECK(f[2] == 0.5f);
    CHECK(f[3] == 0.0f);  // x - x_mean
    CHECK(f[4] == 0.0f);
    CHECK(f[5] == 0.0f);
    CHECK(f[6] == 0.0f);  // x - x_center
    CHECK(f[7] == 0.0f);

    // pillar 1, first point after canonical (x,y,z) sort: (0.25, 0.5, 0.0);
    // mean = (0.5, 0.5, 1.0), center = (0.5, 0.5)
    const float* p1 = &f[4 * 8];
    CHECK(p1[0] == 0.25f);
    CHECK(p1[1] == 0.5f);
    CHECK(p1[2] == 0.0f);
    CHECK(p1[3] == doctest::Approx(-0.25f));
    CHECK(p1[4] == doctest::Approx(0.0f));
    CHECK(p1[5] == doctest::Approx(-1.0f));
    CHECK(p1[6] == doctest::Approx(-0.25f));
    CHECK(p1[7] == doctest::Approx(0.0f));
    // empty slots stay zero
    const float* p0_slot1 = &f[1 * 8];
    for (int j = 0; j < 8; ++j) CHECK(p0_slot1[j] == 0.0f);
  }

  SUBCASE("out-of-range points are dropped, boundaries half-open") {
    geom::PointCloud pc;
    pc.push(static_cast<float>(v.x_max), 0.0f, 0.0f);        // x == x_max: out
    pc.push(static_cast<float>(v.x_min), 0.0f, 0.0f);        // x == x_min: in
    pc.push(0.0f, static_cast<float>(v.y_max), 0.0f);        // out
    pc.push(0.0f, 0.0f, static_cast<float>(v.z_max));        // out
    pc.push(0.0f, 0.0f, static_cast<float>(v.z_min));        // in
    PillarBatch b = pillarize(pc, v, 1);
    int total = 0;
    for (auto o : b.occupancy) total += o;
    CHECK(total == 2);
  }

  SUBCASE("empty cloud gives an empty batch") {
    PillarBatch b = pillarize(geom::PointCloud{}, v, 1);
    CHECK(b.n_pillars == 0);
    CHECK(b.coords.empty());
  }

  SUBCASE("coords are unique and row-major sorted") {
    Rng rng(9001);
    PillarBatch b = pillarize(random_cloud(500, v, rng), v, 3);
    for (size_t i = 1; i < b.coords.size(); ++i) CHECK(b.coords[i - 1] < b.coords[i]);
  }
}

TEST_CASE("pillarize is invariant to input point order") {
  VoxelConfig v = small_grid();
  Rng rng(9002);
  geom::PointCloud pc = random_cloud(300, v, rng);

  geom::PointCloud shuffled = pc;
  // Fisher-Yates over whole points
  size_t n = shuffled.size();
  for (size_t i = n - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(rng.next_u64() % (i + 1));
    for (int k = 0; k < 3; ++k) std::swap(shuffled.xyz[3 * i + static_cast<size_t>(k)],
                                          shuffled.xyz[3 * j + static_cast<size_t>(k)]);
  }

  PillarBatch a = pillarize(pc, v, 42);
  PillarBatch b = pillarize(shuffled, v, 42);
  CHECK(batches_identical(a, b));
}

TEST_CASE("oversubscribed pillars keep a seeded subset") {
  VoxelConfig v = small_grid();
  geom::PointCloud pc;
  std::set<std::array<float, 3>> originals;
  Rng rng(9003);
  for (int i = 0; i < 50; ++i) {  // all into cell (2,4)
    float x = static_cast<float>(rng.uniform(0.01, 0.99));
    float y = static_cast<float>(rng.uniform(0.01, 0.99));
    float z = static_cast<float>(rng.uniform(0.0, 2.0));
    pc.push(x, y, z);
    originals.insert({x, y, z});
  }

  PillarBatch a = pillarize(pc, v, 1);
  REQUIRE(a.n_pillars == 1);
  int occ = 0;
  for (auto o : a.occupancy) occ += o;
  CHECK(occ == v.max_points_per_pillar);
  // every kept point is one of the originals
  auto f = a.features.data();
  for (int k = 0; k < v.max_points_per_pillar; ++k) {
    std::array<float, 3> pt{f[8 * k], f[8 * k + 1], f[8 * k + 2]};
    CHECK(originals.count(pt) == 1);
  }
  // same seed: identical; different seed: different subset (with 50 choose 4
  // possibilities a collision would be a miracle)
  PillarBatch b = pillarize(pc, v, 1);
  CHECK(batches_identical(a, b));
  PillarBatch c = pillarize(pc, v, 2);
  CHECK(!batches_identical(a, c));
}

TEST_CASE("excess pillars are dropped lowest-count-first") {
  VoxelConfig v = small_grid();
  v.max_pillars = 2;
  geom::PointCloud pc;
  // cell (0,0): 3 points; cell (0,1): 1 point; cell (1,2): 2 points
  pc.push(-3.5f, -1.5f, 0.0f);
  pc.push(-3.4f, -1.5f, 0.0f);
  pc.push(-3.3f, -1.5f, 0.0f);
  pc.push(-2.5f, -1.5f, 0.0f);
  pc.push(-1.5f, -0.5f, 0.0f);
  pc.push(-1.4f, -0.5f, 0.0f);

  PillarBatch b = pillarize(pc, v, 1);
  REQUIRE(b.n_pillars == 2);
  // the singleton cell (0,1) is dropped; survivors stay row-major sorted
  CHECK(b.coords[0] == std::make_pair(0, 0));
  CHECK(b.coords[1] == std::make_pair(1, 2));
}

TEST_CASE("pillar feature net matches the reference composition") {
  VoxelConfig v = small_grid();
  Rng rng(9004);
  geom::PointCloud pc = random_cloud(200, v, rng);
  PillarBatch batch = pillarize(pc, v, 5);
  REQUIRE(batch.n_pillars > 3);

  PillarFeatureNet pfn;
  pfn.init(6, 321, "pfn");
  int P = batch.n_pillars, M = batch.max_points, C = 6;

  auto reference_forward = [&](bool training) {
    // linear on [P*M, 8]
    dvec flat = to_dvec(batch.features);
    dvec bias = to_dvec(pfn.linear.b);
    dvec emb = coopref::linear(flat, P * M, kPointFeatureDim, to_dvec(pfn.linear.w), C,
                               bias.data());
    // [P*M, C] -> [1, C, P, M]
    dvec x(static_cast<size_t>(C) * P * M);
    for (int p = 0; p < P; ++p)
      for (int m = 0; m < M; ++m)
        for (int c = 0; c < C; ++c)
          x[static_cast<size_t>((c * P + p) * M + m)] =
              emb[static_cast<size_t>((p * M + m) * C + c)];
    dvec y;
    if (training) {
      y = coopref::batch_norm_train(x, 1, C, P, M, to_dvec(pfn.bn.gamma), to_dvec(pfn.bn.beta),
                                    1e-5, &batch.occupancy);
    } else {
      dvec rm(pfn.bn.state.running_mean.begin(), pfn.bn.state.running_mean.end());
      dvec rv(pfn.bn.state.running_var.begin(), pfn.bn.state.running_var.end());
      y = coopref::batch_norm_eval(x, 1, C, P, M, to_dvec(pfn.bn.gamma), to_dvec(pfn.bn.beta), rm,
                                   rv, 1e-5);
    }
    y = coopref::relu(y);
    return coopref::max_pool_points(y, C, P, M, batch.occupancy);  // [P, C]
  };

  // training mode first (this also advances the running stats)
  dvec want_train = reference_forward(true);
  Tensor got_train = pfn.forward(batch, true);
  REQUIRE(got_train.shape() == Shape{P, C});
  CHECK(testsupport::rel_linf(got_train.data(), want_train) < 1e-5);

  // eval mode uses the stats updated above
  dvec want_eval = reference_forward(false);
  Tensor got_eval = pfn.forward(batch, false);
  CHECK(testsupport::rel_linf(got_eval.data(), want_eval) < 1e-5);

  // empty batch short-circuits
  PillarBatch empty = pillarize(geom::PointCloud{}, v, 1);
  Tensor ze = pfn.forward(empty, false);
  CHECK(ze.shape() == Shape{0, C});
}

TEST_CASE("scatter_to_pseudo_image places pillars on the BEV grid") {
  VoxelConfig v = small_grid();
  geom::PointCloud pc;
  pc.push(0.5f, 0.5f, 0.0f);    // cell (2,4)
  pc.push(-3.5f, -1.5f, 0.0f);  // cell (0,0)
  PillarBatch batch = pillarize(pc, v, 1);
  REQUIRE(batch.n_pillars == 2);

  Tensor feats = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  SpatialMask mask;
  Tensor img = scatter_to_pseudo_image(feats, batch, v, &mask);
  REQUIRE(img.shape() == Shape{1, 3, v.rows(), v.cols()});
  CHECK(mask.count() == 2);
  CHECK(mask.active[0] == 1);                                      // cell (0,0)
  CHECK(mask.active[static_cast<size_t>(2) * v.cols() + 4] == 1);  // cell (2,4)

  auto d = img.data();
  auto at = [&](int c, int r, int col) {
    return d[static_cast<size_t>((c * v.rows() + r) * v.cols() + col)];
  };
  CHECK(at(0, 0, 0) == 1.0f);
  CHECK(at(1, 0, 0) == 2.0f);
  CHECK(at(2, 0, 0) == 3.0f);
  CHECK(at(0, 2, 4) == 4.0f);
  CHECK(at(2, 2, 4) == 6.0f);
  double sum = 0;
  for (float x : d) sum += x;
  CHECK(sum == doctest::Approx(21.0));

  SUBCASE("feature row count must match the batch") {
    Tensor bad = Tensor::zeros({3, 3});
    CHECK_THROWS_AS((void)scatter_to_pseudo_image(bad, batch, v, nullptr), std::invalid_argument);
  }

  SUBCASE("empty batch yields an all-zero image") {
    PillarBatch empty = pillarize(geom::PointCloud{}, v, 1);
    Tensor z = scatter_to_pseudo_image(Tensor::zeros({0, 3}), empty, v, &mask);
    REQUIRE(z.shape() == Shape{1, 3, v.rows(), v.cols()});
    CHECK(mask.count() == 0);
    for (float x : z.data()) CHECK(x == 0.0f);
  }
}
