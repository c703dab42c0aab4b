#pragma once

#include <cstdint>
#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/mesh.hpp"
#include "vesselforge/volume.hpp"

namespace vf::phantom {

/// Polyline centerline with a per-sample radius, all in mm.
struct Centerline {
  std::vector<Vec3> points;
  std::vector<double> radii;

  void validate() const;
  /// Signed distance from p to the tube around this centerline (< 0 inside).
  double signed_distance(const Vec3& p) const;
};

/// Straight segment with uniformly spaced samples.
Centerline straight_centerline(const Vec3& a, const Vec3& b, double radius, int samples = 2);
/// Circular arc in the plane spanned by (u,v) around `center`.
Centerline arc_centerline(const Vec3& center, double arc_radius, const Vec3& u, const Vec3& v,
                          double angle0, double angle1, double tube_radius, int samples = 33);

/// One vessel cap: center on the cap disk, cap radius, outward axis.
struct Cap {
  Vec3 center;
  double radius = 0.0;
  Vec3 outward;
  bool is_inlet = false;
};

struct InletOutletSpec {
  std::vector<Cap> caps;
  double buffer_sigma = 2.0;  // mm, transition width of the scaling gate

  void validate() const;
};

struct PhantomSpec {
  std::array<int, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::vector<Centerline> centerlines;  // [0] is the trunk
  double foreground = 400.0;
  double background = 50.0;
  double noise_sd = 0.0;
  double blur_sigma = 0.0;  // voxels
  double buffer_sigma = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PhantomResult {
  volume::VoxelGrid image;  // clean: background + (foreground-background)*label
  volume::VoxelGrid label;  // 0/1
  InletOutletSpec io;
};

/// Single straight/arc tube; io carries the two end caps.
PhantomResult make_tube_phantom(const PhantomSpec& spec);

/// Trunk (centerlines[0]) plus side branches; label is the union occupancy;
/// io has one inlet (trunk start) and k+1 outlets.
PhantomResult make_branching_phantom(const PhantomSpec& spec);

/// Gaussian blur then iid Gaussian noise, clamped to [0, 500].
volume::VoxelGrid corrupt(const volume::VoxelGrid& image, double noise_sd, double blur_sigma,
                          std::uint64_t seed);

/// Watertight triangulation of a single-centerline tube with capped ends;
/// body vertices lie exactly at distance r from the centerline.
mesh::TriMesh analytic_surface(const PhantomSpec& spec, int segments = 48,
                               double ring_spacing_mm = 0.75);

}  // namespace vf::phantom
