#include "vesselforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vf::metrics {

double dice_voxel(const volume::VoxelGrid& a, const volume::VoxelGrid& b) {
  if (!a.same_geometry(b)) throw std::invalid_argument("dice_voxel: geometry mismatch");
  double num = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    num += a.data[i] * b.data[i];
    da += a.data[i] * a.data[i];
    db += b.data[i] * b.data[i];
  }
  if (da + db == 0.0) return 1.0;
  return 2.0 * num / (da + db);
}

// ---------------------------------------------------------------------------
// Point index
// ---------------------------------------------------------------------------

PointIndex::PointIndex(const std::vector<Vec3>& points) : points_(points) {
  if (points.empty()) throw std::invalid_argument("PointIndex: empty point set");
  lo_ = hi_ = points[0];
  for (const Vec3& p : points) {
    lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
    hi_ = {std::max(hi_.x, p.x), std::max(hi_.y, p.y), std::max(hi_.z, p.z)};
  }
  double diag = norm(hi_ - lo_);
  double guess = diag / std::cbrt(double(points.size())) * 1.5;
  cell_ = std::max(guess, diag / 128.0) + 1e-12;

  nx_ = std::max(1, int(std::floor((hi_.x - lo_.x) / cell_)) + 1);
  ny_ = std::max(1, int(std::floor((hi_.y - lo_.y) / cell_)) + 1);
  nz_ = std::max(1, int(std::floor((hi_.z - lo_.z) / cell_)) + 1);
  cells_.assign(std::size_t(nx_) * ny_ * nz_, {});
  for (std::size_t i = 0; i < points.size(); ++i) {
    int x = std::clamp(int(std::floor((points[i].x - lo_.x) / cell_)), 0, nx_ - 1);
    int y = std::clamp(int(std::floor((points[i].y - lo_.y) / cell_)), 0, ny_ - 1);
    int z = std::clamp(int(std::floor((points[i].z - lo_.z) / cell_)), 0, nz_ - 1);
    cells_[std::size_t(x) + std::size_t(nx_) * (y + std::size_t(ny_) * z)].push_back(int(i));
  }
}

std::pair<int, double> PointIndex::nearest(const Vec3& p) const {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  int cx = std::clamp(int(std::floor((p.x - lo_.x) / cell_)), 0, nx_ - 1);
  int cy = std::clamp(int(std::floor((p.y - lo_.y) / cell_)), 0, ny_ - 1);
  int cz = std::clamp(int(std::floor((p.z - lo_.z) / cell_)), 0, nz_ - 1);

  // The query may sit outside the grid; rings still terminate because any
  // cell at Chebyshev ring r is at least (r-1)*cell - clamp_offset away.
  double outside = 0.0;
  outside = std::max(outside, lo_.x - p.x);
  outside = std::max(outside, p.x - hi_.x);
  outside = std::max(outside, lo_.y - p.y);
  outside = std::max(outside, p.y - hi_.y);
  outside = std::max(outside, lo_.z - p.z);
  outside = std::max(outside, p.z - hi_.z);

  const int max_ring = std::max({nx_, ny_, nz_});
  for (int ring = 0; ring <= max_ring; ++ring) {
    if (best >= 0 && best_d <= double(ring) * cell_ + outside) break;
    int x0 = std::max(0, cx - ring), x1 = std::min(nx_ - 1, cx + ring);
    int y0 = std::max(0, cy - ring), y1 = std::min(ny_ - 1, cy + ring);
    int z0 = std::max(0, cz - ring), z1 = std::min(nz_ - 1, cz + ring);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          if (std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)}) != ring) continue;
          for (int i : cells_[std::size_t(x) + std::size_t(nx_) * (y + std::size_t(ny_) * z)]) {
            double d = norm(points_[i] - p);
            if (d < best_d) { best_d = d; best = i; }
          }
        }
  }
  return {best, best_d};
}

// ---------------------------------------------------------------------------
// Surface distances
// ---------------------------------------------------------------------------

namespace {

void require_nonempty(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2, const char* who) {
  if (s1.empty() || s2.empty())
    throw std::invalid_argument(std::string(who) + ": point sets must be nonempty");
}

}  // namespace

double asd(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2) {
  require_nonempty(s1, s2, "asd");
  PointIndex i1(s1), i2(s2);
  double sum = 0.0;
  for (const Vec3& p : s1) sum += i2.nearest(p).second;
  for (const Vec3& p : s2) sum += i1.nearest(p).second;
  return sum / double(s1.size() + s2.size());
}

double hausdorff(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2) {
  require_nonempty(s1, s2, "hausdorff");
  PointIndex i1(s1), i2(s2);
  double h = 0.0;
  for (const Vec3& p : s1) h = std::max(h, i2.nearest(p).second);
  for (const Vec3& p : s2) h = std::max(h, i1.nearest(p).second);
  return h;
}

double asd_bruteforce(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2) {
  require_nonempty(s1, s2, "asd");
  auto directed_sum = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double sum = 0.0;
    for (const Vec3& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& q : b) best = std::min(best, norm(p - q));
      sum += best;
    }
    return sum;
  };
  return (directed_sum(s1, s2) + directed_sum(s2, s1)) / double(s1.size() + s2.size());
}

double hausdorff_bruteforce(const std::vector<Vec3>& s1, const std::vector<Vec3>& s2) {
  require_nonempty(s1, s2, "hausdorff");
  auto directed_max = [](const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    double worst = 0.0;
    for (const Vec3& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vec3& q : b) best = std::min(best, norm(p - q));
      worst = std::max(worst, best);
    }
    return worst;
  };
  return std::max(directed_max(s1, s2), directed_max(s2, s1));
}

// ---------------------------------------------------------------------------
// Ensemble statistics
// ---------------------------------------------------------------------------

SurfaceEnsembleStats surface_ensemble_stats(const std::vector<mesh::TriMesh>& meshes,
                                            const volume::VoxelGrid& image, int snr_window) {
  if (meshes.size() < 2)
    throw std::invalid_argument("surface_ensemble_stats: needs K >= 2 surfaces");

  const mesh::TriMesh& ref = meshes[0];
  std::vector<mesh::TriangleIndex> indices;
  indices.reserve(meshes.size() - 1);
  for (std::size_t k = 1; k < meshes.size(); ++k) indices.emplace_back(meshes[k]);

  SurfaceEnsembleStats out;
  out.mean_surface = ref;
  out.std_mm.resize(ref.vertices.size());

  const double K = double(meshes.size());
  for (std::size_t v = 0; v < ref.vertices.size(); ++v) {
    std::vector<Vec3> corr;
    corr.reserve(meshes.size());
    corr.push_back(ref.vertices[v]);
    for (const auto& idx : indices) corr.push_back(idx.nearest(ref.vertices[v]).point);

    Vec3 mean{};
    for (const Vec3& p : corr) mean += p;
    mean = mean / K;
    double var = 0.0;
    for (const Vec3& p : corr) var += norm2(p - mean);
    out.mean_surface.vertices[v] = mean;
    out.std_mm[v] = std::sqrt(var / K);
  }

  out.snr = local_snr(image, out.mean_surface.vertices, snr_window);
  return out;
}

std::vector<double> local_snr(const volume::VoxelGrid& image, const std::vector<Vec3>& points,
                              int window) {
  if (window < 3 || window % 2 == 0)
    throw std::invalid_argument("local_snr: window must be odd and >= 3");
  const int half = window / 2;
  std::vector<double> out;
  out.reserve(points.size());
  for (const Vec3& p : points) {
    int cx = std::clamp(int(std::lround((p.x - image.origin[0]) / image.spacing[0])), 0,
                        image.dims[0] - 1);
    int cy = std::clamp(int(std::lround((p.y - image.origin[1]) / image.spacing[1])), 0,
                        image.dims[1] - 1);
    int cz = std::clamp(int(std::lround((p.z - image.origin[2]) / image.spacing[2])), 0,
                        image.dims[2] - 1);
    double sum = 0.0, sq = 0.0;
    int n = 0;
    for (int z = std::max(0, cz - half); z <= std::min(image.dims[2] - 1, cz + half); ++z)
      for (int y = std::max(0, cy - half); y <= std::min(image.dims[1] - 1, cy + half); ++y)
        for (int x = std::max(0, cx - half); x <= std::min(image.dims[0] - 1, cx + half); ++x) {
          double v = image.at(x, y, z);
          sum += v;
          sq += v * v;
          ++n;
        }
    double mean = sum / double(n);
    double var = std::max(0.0, sq / double(n) - mean * mean);
    double sd = std::sqrt(var);
    out.push_back(sd < 1e-12 ? 1e6 : mean / sd);
  }
  return out;
}

double snr_std_regression(const std::vector<double>& snr, const std::vector<double>& std_mm) {
  if (snr.size() != std_mm.size())
    throw std::invalid_argument("snr_std_regression: size mismatch");
  if (snr.size() < 3) throw std::invalid_argument("snr_std_regression: needs >= 3 points");
  for (std::size_t i = 0; i < snr.size(); ++i) {
    if (!std::isfinite(snr[i])) throw std::invalid_argument("snr_std_regression: non-finite SNR");
    if (!(std_mm[i] > 0.0))
      throw std::invalid_argument("snr_std_regression: std values must be > 0 for log10");
  }

  const double n = double(snr.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < snr.size(); ++i) {
    double x = snr[i], y = std::log10(std_mm[i]);
    sx += x; sy += y; sxx += x * x; sxy += x * y;
  }
  double denom = sxx - sx * sx / n;
  if (std::abs(denom) < 1e-12 * std::max(1.0, sxx))
    throw std::invalid_argument("snr_std_regression: degenerate (constant) abscissa");
  return (sxy - sx * sy / n) / denom;
}

}  // namespace vf::metrics
