#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coopercept/config.hpp"

namespace coopercept {

struct BenchRow {
  double density = 0.0;    // requested active fraction of the pillar grid
  double measured = 0.0;   // fraction actually active after blob placement
  double sparse_ms = 0.0;  // best-of-repeats wall time, sparse backbone
  double dense_ms = 0.0;   // best-of-repeats wall time, plain dense backbone
};

// Times the sparse inference path against the plain dense forward on the
// configured pillar grid. Active sites are clustered into object-sized blobs
// (the shape real pillar occupancy takes) rather than scattered uniformly,
// because scattered single sites dilate to near-full density after a few 3x3
// layers and stop resembling any real workload.
std::vector<BenchRow> bench_sparse_vs_dense(const RunConfig& cfg,
                                            const std::vector<double>& densities, int repeats,
                                            uint64_t seed);

// "density,sparse_ms,dense_ms" rows.
void save_bench_csv(const std::string& path, const std::vector<BenchRow>& rows);

}  // namespace coopercept
