#pragma once

#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/mesh.hpp"
#include "vesselforge/volume.hpp"

namespace vf::metrics {

/// 2*sum(ab) / (sum(a^2) + sum(b^2)); both-empty defined as 1.
double dice_voxel(const volume::VoxelGrid& a, const volume::VoxelGrid& b);

/// Average symmetric surface distance between point sets (mm).
double asd(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2);

/// Symmetric Hausdorff distance (mm); spatial-index fast path with results
/// identical to the O(n^2) brute force.
double hausdorff(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2);

/// Brute-force references used as oracles in tests.
double asd_bruteforce(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2);
double hausdorff_bruteforce(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2);

/// Exact nearest-neighbor queries over a fixed point set (uniform grid).
class PointIndex {
 public:
  explicit PointIndex(const std::vector<Vec3>& points);
  /// Returns (index, distance) of the closest stored point.
  std::pair<int, double> nearest(const Vec3& p) const;

 private:
  const std::vector<Vec3>& points_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  int nx_ = 1, ny_ = 1, nz_ = 1;
  std::vector<std::vector<int>> cells_;
};

struct SurfaceEnsembleStats {
  mesh::TriMesh mean_surface;   // connectivity of the first sample
  std::vector<double> std_mm;   // per-vertex spread of the K correspondences
  std::vector<double> snr;      // local SNR of the image at the mean vertices
};

/// Correspondence by nearest surface point on every other mesh, relative to
/// the first mesh's vertices; std is the population spread around the mean.
SurfaceEnsembleStats surface_ensemble_stats(const std::vector<mesh::TriMesh>& meshes,
                                            const volume::VoxelGrid& image, int snr_window = 5);

/// Per-point local SNR: mean/stddev of raw intensities in the w^3 window of
/// the containing voxel; stddev < 1e-12 caps the value at 1e6.
std::vector<double> local_snr(const volume::VoxelGrid& image, const std::vector<Vec3>& points,
                              int window = 5);

/// OLS slope of log10(std) against snr. Throws on fewer than 3 points or a
/// constant abscissa.
double snr_std_regression(const std::vector<double>& snr, const std::vector<double>& std_mm);

}  // namespace vf::metrics
