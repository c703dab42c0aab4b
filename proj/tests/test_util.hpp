#pragma once

#include <cmath>
#include <map>
#include <random>
#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/mesh.hpp"
#include "vesselforge/volume.hpp"

namespace vftest {

using vf::Vec3;

// Icosphere centered at `center` with the given radius and subdivision level.
inline vf::mesh::TriMesh icosphere(const Vec3& center, double radius, int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v = {
      {-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1},
  };
  std::vector<std::array<int, 3>> f = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},  {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},  {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},  {9, 8, 1},
  };
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> mid;
    auto midpoint = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = mid.find(key);
      if (it != mid.end()) return it->second;
      Vec3 m = vf::normalized(0.5 * (v[a] + v[b]));
      v.push_back(m);
      mid[key] = int(v.size()) - 1;
      return int(v.size()) - 1;
    };
    std::vector<std::array<int, 3>> nf;
    for (const auto& tri : f) {
      int ab = midpoint(tri[0], tri[1]);
      int bc = midpoint(tri[1], tri[2]);
      int ca = midpoint(tri[2], tri[0]);
      nf.push_back({tri[0], ab, ca});
      nf.push_back({tri[1], bc, ab});
      nf.push_back({tri[2], ca, bc});
      nf.push_back({ab, bc, ca});
    }
    f = std::move(nf);
  }
  vf::mesh::TriMesh m;
  for (Vec3& p : v) m.vertices.push_back(center + radius * vf::normalized(p));
  m.faces = f;
  return m;
}

// Scalar grid holding `inside_value` within a sphere and `outside_value`
// elsewhere, smoothed by a signed-distance ramp of one voxel.
inline vf::volume::VoxelGrid sphere_grid(int n, double radius_vox, double inside_value = 1.0,
                                         double outside_value = 0.0) {
  vf::volume::VoxelGrid g({n, n, n}, {1, 1, 1}, {0, 0, 0}, 0.0);
  const double c = (n - 1) / 2.0;
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double d = std::sqrt((x - c) * (x - c) + (y - c) * (y - c) + (z - c) * (z - c));
        double t = std::clamp(radius_vox - d + 0.5, 0.0, 1.0);  // 1 inside, ramp at the shell
        g.at(x, y, z) = outside_value + (inside_value - outside_value) * t;
      }
  return g;
}

inline std::vector<Vec3> random_points(int n, double extent, std::uint64_t seed) {
  vf::Rng rng(seed);
  std::uniform_real_distribution<double> u(-extent, extent);
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = {u(rng), u(rng), u(rng)};
  return pts;
}

inline double rel_err(double a, double b) {
  double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace vftest
