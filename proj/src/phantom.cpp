#include "vesselforge/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace vf::phantom {

void Centerline::validate() const {
  if (points.size() < 2) throw std::invalid_argument("Centerline: needs >= 2 samples");
  if (points.size() != radii.size())
    throw std::invalid_argument("Centerline: points/radii size mismatch");
  for (double r : radii)
    if (!(r > 0.0)) throw std::invalid_argument("Centerline: radii must be > 0");
  for (std::size_t i = 1; i < points.size(); ++i)
    if (norm2(points[i] - points[i - 1]) == 0.0)
      throw std::invalid_argument("Centerline: consecutive samples must be distinct");
}

double Centerline::signed_distance(const Vec3& p) const {
  // Union of finite capped cylinders, one per polyline segment: ends are flat
  // (flush with the end samples), matching the capped analytic surface.
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    Vec3 ab = points[i + 1] - points[i];
    double len = norm(ab);
    Vec3 dir = ab / len;
    double t = dot(p - points[i], dir);
    Vec3 radial = (p - points[i]) - t * dir;
    double tc = std::clamp(t / len, 0.0, 1.0);
    double r = radii[i] + tc * (radii[i + 1] - radii[i]);
    double dx = norm(radial) - r;          // radial distance to the wall
    double dy = std::max(-t, t - len);     // axial distance outside the slab
    double sdf;
    if (dx <= 0.0 && dy <= 0.0) {
      sdf = std::max(dx, dy);
    } else {
      double px = std::max(dx, 0.0), py = std::max(dy, 0.0);
      sdf = std::sqrt(px * px + py * py);
    }
    best = std::min(best, sdf);
  }
  return best;
}

Centerline straight_centerline(const Vec3& a, const Vec3& b, double radius, int samples) {
  Centerline c;
  samples = std::max(samples, 2);
  for (int i = 0; i < samples; ++i) {
    double t = double(i) / double(samples - 1);
    c.points.push_back(a + t * (b - a));
    c.radii.push_back(radius);
  }
  c.validate();
  return c;
}

Centerline arc_centerline(const Vec3& center, double arc_radius, const Vec3& u, const Vec3& v,
                          double angle0, double angle1, double tube_radius, int samples) {
  if (!(arc_radius > tube_radius))
    throw std::invalid_argument("arc_centerline: arc radius must exceed tube radius");
  Centerline c;
  Vec3 un = normalized(u);
  Vec3 vn = normalized(v - un * dot(v, un));
  samples = std::max(samples, 2);
  for (int i = 0; i < samples; ++i) {
    double a = angle0 + (angle1 - angle0) * double(i) / double(samples - 1);
    c.points.push_back(center + arc_radius * (std::cos(a) * un + std::sin(a) * vn));
    c.radii.push_back(tube_radius);
  }
  c.validate();
  return c;
}

void InletOutletSpec::validate() const {
  if (caps.size() < 2) throw std::invalid_argument("InletOutletSpec: needs >= 2 caps");
  if (!(buffer_sigma > 0.0)) throw std::invalid_argument("InletOutletSpec: buffer sigma must be > 0");
  for (const Cap& c : caps)
    if (!(c.radius > 0.0)) throw std::invalid_argument("InletOutletSpec: cap radius must be > 0");
}

void PhantomSpec::validate() const {
  if (centerlines.empty()) throw std::invalid_argument("PhantomSpec: no centerlines");
  for (const Centerline& c : centerlines) c.validate();
  if (foreground < 0.0 || foreground > 500.0 || background < 0.0 || background > 500.0)
    throw std::invalid_argument("PhantomSpec: intensities must lie in [0, 500]");
  if (noise_sd < 0.0) throw std::invalid_argument("PhantomSpec: noise stddev must be >= 0");
}

namespace {

// Requires every tube sample (inflated by its radius) to keep `margin_voxels`
// clear of the grid boundary.
void check_margin(const PhantomSpec& spec, double margin_voxels) {
  for (const Centerline& c : spec.centerlines)
    for (std::size_t i = 0; i < c.points.size(); ++i)
      for (int a = 0; a < 3; ++a) {
        double lo = spec.origin[a];
        double hi = spec.origin[a] + (spec.dims[a] - 1) * spec.spacing[a];
        double margin = margin_voxels * spec.spacing[a];
        if (c.points[i][a] - c.radii[i] < lo + margin ||
            c.points[i][a] + c.radii[i] > hi - margin)
          throw std::invalid_argument("phantom: tube exits the grid margin");
      }
}

PhantomResult rasterize(const PhantomSpec& spec) {
  PhantomResult r;
  r.label = volume::VoxelGrid(spec.dims, spec.spacing, spec.origin, 0.0);
  r.image = volume::VoxelGrid(spec.dims, spec.spacing, spec.origin, spec.background);
  for (int z = 0; z < spec.dims[2]; ++z)
    for (int y = 0; y < spec.dims[1]; ++y)
      for (int x = 0; x < spec.dims[0]; ++x) {
        Vec3 p = r.label.voxel_center(x, y, z);
        double sdf = std::numeric_limits<double>::infinity();
        for (const Centerline& c : spec.centerlines)
          sdf = std::min(sdf, c.signed_distance(p));
        if (sdf <= 0.0) {
          r.label.at(x, y, z) = 1.0;
          r.image.at(x, y, z) = spec.foreground;
        }
      }
  return r;
}

Cap end_cap(const Centerline& c, bool at_start, bool is_inlet) {
  Cap cap;
  if (at_start) {
    cap.center = c.points.front();
    cap.radius = c.radii.front();
    cap.outward = normalized(c.points.front() - c.points[1]);
  } else {
    cap.center = c.points.back();
    cap.radius = c.radii.back();
    cap.outward = normalized(c.points.back() - c.points[c.points.size() - 2]);
  }
  cap.is_inlet = is_inlet;
  return cap;
}

}  // namespace

PhantomResult make_tube_phantom(const PhantomSpec& spec) {
  spec.validate();
  if (spec.centerlines.size() != 1)
    throw std::invalid_argument("make_tube_phantom: exactly one centerline expected");
  check_margin(spec, 3.0);

  PhantomResult r = rasterize(spec);
  r.io.buffer_sigma = spec.buffer_sigma;
  r.io.caps.push_back(end_cap(spec.centerlines[0], true, true));
  r.io.caps.push_back(end_cap(spec.centerlines[0], false, false));
  r.io.validate();
  return r;
}

PhantomResult make_branching_phantom(const PhantomSpec& spec) {
  spec.validate();
  if (spec.centerlines.size() < 2)
    throw std::invalid_argument("make_branching_phantom: needs a trunk plus >= 1 branch");
  const Centerline& trunk = spec.centerlines[0];
  double trunk_rmin = *std::min_element(trunk.radii.begin(), trunk.radii.end());
  for (std::size_t b = 1; b < spec.centerlines.size(); ++b) {
    double rmax = *std::max_element(spec.centerlines[b].radii.begin(),
                                    spec.centerlines[b].radii.end());
    if (!(rmax < trunk_rmin))
      throw std::invalid_argument("make_branching_phantom: branch radii must be < trunk radius");
    // A branch must start on the trunk so the union stays connected.
    if (trunk.signed_distance(spec.centerlines[b].points.front()) > 0.0)
      throw std::invalid_argument("make_branching_phantom: branch does not start on the trunk");
  }
  check_margin(spec, 3.0);

  PhantomResult r = rasterize(spec);
  r.io.buffer_sigma = spec.buffer_sigma;
  r.io.caps.push_back(end_cap(trunk, true, true));
  r.io.caps.push_back(end_cap(trunk, false, false));
  for (std::size_t b = 1; b < spec.centerlines.size(); ++b)
    r.io.caps.push_back(end_cap(spec.centerlines[b], false, false));
  r.io.validate();
  return r;
}

volume::VoxelGrid corrupt(const volume::VoxelGrid& image, double noise_sd, double blur_sigma,
                          std::uint64_t seed) {
  if (noise_sd < 0.0 || blur_sigma < 0.0)
    throw std::invalid_argument("corrupt: noise_sd and blur_sigma must be >= 0");
  volume::VoxelGrid out = image;

  if (blur_sigma > 0.0) {
    int half = std::max(1, int(std::ceil(3.0 * blur_sigma)));
    std::vector<double> taps(2 * half + 1);
    double sum = 0.0;
    for (int i = -half; i <= half; ++i) {
      taps[i + half] = std::exp(-0.5 * double(i) * double(i) / (blur_sigma * blur_sigma));
      sum += taps[i + half];
    }
    for (double& t : taps) t /= sum;

    const int nx = image.dims[0], ny = image.dims[1], nz = image.dims[2];
    volume::VoxelGrid tmp = out;
    // x, y, z passes with replicate borders
    for (int axis = 0; axis < 3; ++axis) {
      const int n = out.dims[axis];
      for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
          for (int x = 0; x < nx; ++x) {
            double acc = 0.0;
            for (int k = -half; k <= half; ++k) {
              int xi = x, yi = y, zi = z;
              int& c = axis == 0 ? xi : (axis == 1 ? yi : zi);
              c = std::clamp(c + k, 0, n - 1);
              acc += taps[k + half] * out.at(xi, yi, zi);
            }
            tmp.at(x, y, z) = acc;
          }
      std::swap(out.data, tmp.data);
    }
  }

  if (noise_sd > 0.0) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sd);
    for (double& v : out.data) v += noise(rng);
  }
  for (double& v : out.data) v = std::clamp(v, 0.0, 500.0);
  return out;
}

// ---------------------------------------------------------------------------
// Analytic tube surface
// ---------------------------------------------------------------------------

mesh::TriMesh analytic_surface(const PhantomSpec& spec, int segments, double ring_spacing_mm) {
  spec.validate();
  if (spec.centerlines.size() != 1)
    throw std::invalid_argument("analytic_surface: defined for single-centerline specs");
  const Centerline& c = spec.centerlines[0];
  if (segments < 8) throw std::invalid_argument("analytic_surface: segments must be >= 8");

  // Ring stations along arc length (both endpoints included).
  struct Station {
    Vec3 pos;
    Vec3 tangent;
    double radius;
  };
  std::vector<Station> stations;
  {
    std::vector<double> seglen(c.points.size() - 1);
    double total = 0.0;
    for (std::size_t i = 0; i + 1 < c.points.size(); ++i) {
      seglen[i] = norm(c.points[i + 1] - c.points[i]);
      total += seglen[i];
    }
    if (total <= 0.0) throw std::invalid_argument("analytic_surface: degenerate centerline");
    int nrings = std::max(2, int(std::ceil(total / ring_spacing_mm)) + 1);
    for (int i = 0; i < nrings; ++i) {
      double s = total * double(i) / double(nrings - 1);
      double acc = 0.0;
      std::size_t seg = 0;
      while (seg + 1 < seglen.size() && acc + seglen[seg] < s) acc += seglen[seg++];
      double t = seglen[seg] > 0.0 ? std::clamp((s - acc) / seglen[seg], 0.0, 1.0) : 0.0;
      Station st;
      st.pos = c.points[seg] + t * (c.points[seg + 1] - c.points[seg]);
      st.tangent = normalized(c.points[seg + 1] - c.points[seg]);
      st.radius = c.radii[seg] + t * (c.radii[seg + 1] - c.radii[seg]);
      stations.push_back(st);
    }
  }

  // Parallel-transported frame.
  std::vector<Vec3> frame_u(stations.size()), frame_v(stations.size());
  {
    Vec3 t0 = stations[0].tangent;
    Vec3 seed = std::abs(t0.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    frame_u[0] = normalized(seed - t0 * dot(seed, t0));
    frame_v[0] = cross(t0, frame_u[0]);
    for (std::size_t i = 1; i < stations.size(); ++i) {
      Vec3 ta = stations[i - 1].tangent, tb = stations[i].tangent;
      Vec3 axis = cross(ta, tb);
      double s = norm(axis), cth = std::clamp(dot(ta, tb), -1.0, 1.0);
      Vec3 u = frame_u[i - 1];
      if (s > 1e-12) {
        axis = axis / s;
        double th = std::atan2(s, cth);
        // Rodrigues rotation of u about axis by th
        u = u * std::cos(th) + cross(axis, u) * std::sin(th) +
            axis * dot(axis, u) * (1.0 - std::cos(th));
      }
      u = normalized(u - tb * dot(u, tb));
      frame_u[i] = u;
      frame_v[i] = cross(tb, u);
    }
  }

  mesh::TriMesh m;
  const int R = int(stations.size());
  for (int i = 0; i < R; ++i)
    for (int j = 0; j < segments; ++j) {
      double a = 2.0 * M_PI * double(j) / double(segments);
      m.vertices.push_back(stations[i].pos +
                           stations[i].radius * (std::cos(a) * frame_u[i] + std::sin(a) * frame_v[i]));
    }
  auto ring_vert = [&](int ring, int j) { return ring * segments + (j % segments); };

  for (int i = 0; i + 1 < R; ++i)
    for (int j = 0; j < segments; ++j) {
      int a = ring_vert(i, j), b = ring_vert(i, j + 1);
      int d = ring_vert(i + 1, j), e = ring_vert(i + 1, j + 1);
      m.faces.push_back({a, b, e});
      m.faces.push_back({a, e, d});
    }

  int c_start = int(m.vertices.size());
  m.vertices.push_back(stations.front().pos);
  int c_end = int(m.vertices.size());
  m.vertices.push_back(stations.back().pos);
  for (int j = 0; j < segments; ++j) {
    m.faces.push_back({c_start, ring_vert(0, j + 1), ring_vert(0, j)});
    m.faces.push_back({c_end, ring_vert(R - 1, j), ring_vert(R - 1, j + 1)});
  }

  if (mesh_volume(m) < 0.0)
    for (auto& f : m.faces) std::swap(f[1], f[2]);

  m.validate();
  return m;
}

}  // namespace vf::phantom
