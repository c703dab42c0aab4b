#pragma once

#include <array>
#include <string>
#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/volume.hpp"

namespace vf::mesh {

/// Indexed triangle surface, vertex positions in physical mm, faces CCW when
/// viewed from outside.
struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;

  std::size_t vertex_count() const { return vertices.size(); }
  std::size_t face_count() const { return faces.size(); }

  /// Throws std::invalid_argument on out-of-range indices or repeated
  /// vertices within a face.
  void validate() const;
};

/// Undirected edge list plus face adjacency, rebuilt on demand.
struct EdgeInfo {
  int a = 0, b = 0;        // vertex indices, a < b
  int f0 = -1, f1 = -1;    // adjacent faces (f1 == -1 on boundary)
};

struct MeshTopology {
  std::vector<EdgeInfo> edges;
  std::vector<std::vector<int>> vertex_neighbors;
  bool watertight = false;            // every edge has exactly 2 faces
  bool oriented = false;              // each undirected edge used once per direction
  int boundary_edges = 0;
  int nonmanifold_edges = 0;
};

MeshTopology build_topology(const TriMesh& mesh);

Vec3 face_normal(const TriMesh& mesh, int f);               // unit, zero for degenerate
double face_area(const TriMesh& mesh, int f);
std::vector<Vec3> vertex_normals(const TriMesh& mesh);      // angle-weighted, unit
double mesh_volume(const TriMesh& mesh);                    // signed, divergence theorem

struct MeshQualityReport {
  bool watertight = false;
  int euler_characteristic = 0;
  double min_angle_deg = 0.0;
  double mean_angle_deg = 0.0;
  double edge_length_mean = 0.0;
  double edge_length_cv = 0.0;    // stddev / mean
  int self_intersections = 0;     // sampled pair count
};

MeshQualityReport quality_report(const TriMesh& mesh, int intersection_samples = 2000,
                                 std::uint64_t seed = 0);
std::string quality_report_json(const MeshQualityReport& r);

// ---------------------------------------------------------------------------
// Isosurface extraction
// ---------------------------------------------------------------------------

/// Standard 256-case marching cubes with linear edge interpolation; vertices
/// in physical mm, shared across cells (watertight on closed surfaces),
/// normals oriented toward lower field values.
TriMesh marching_cubes(const volume::VoxelGrid& grid, double iso = 0.5);

// ---------------------------------------------------------------------------
// Remeshing and smoothing
// ---------------------------------------------------------------------------

/// Isotropic remeshing (split / collapse / flip / tangential relax with
/// projection back to the input surface). Vertex count lands within +-10% of
/// target, edge-length CV decreases, Hausdorff to input stays within 2x the
/// input mean edge length.
TriMesh remesh_uniform(const TriMesh& mesh, int target_vertex_count);

struct MeshLossTerms {
  double normal = 0.0;     // mean over internal edges of (1 - n1.n2)
  double edge = 0.0;       // mean over edges of (|e| - mean)^2
  double laplacian = 0.0;  // mean over vertices of |v - mean(neighbors)|^2
};

MeshLossTerms mesh_losses(const TriMesh& mesh);

/// Same terms, with d(w_n*normal + w_e*edge + w_l*laplacian)/d(vertex)
/// accumulated into grad (resized and zeroed by the callee).
MeshLossTerms mesh_losses_grad(const TriMesh& mesh, double w_normal, double w_edge,
                               double w_laplacian, std::vector<Vec3>& grad);

struct SmoothResult {
  TriMesh mesh;
  std::vector<double> loss_history;  // combined loss per accepted step
};

/// Gradient descent on vertex positions for w2*normal + w3*edge + w4*laplacian
/// with backtracking halving; loss is non-increasing, connectivity unchanged.
SmoothResult smooth_minimize(const TriMesh& mesh, double w_normal, double w_edge,
                             double w_laplacian, int steps, double lr);

// ---------------------------------------------------------------------------
// Spatial queries
// ---------------------------------------------------------------------------

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Uniform-grid index over triangles for exact nearest-surface-point queries.
class TriangleIndex {
 public:
  explicit TriangleIndex(const TriMesh& mesh);

  struct Hit {
    int face = -1;
    Vec3 point;        // closest point on the surface
    double dist = 0.0;
    Vec3 bary;         // barycentric coords of `point` in `face`
  };
  Hit nearest(const Vec3& p) const;

 private:
  const TriMesh& mesh_;
  Vec3 lo_, hi_;
  double cell_ = 1.0;
  int nx_ = 1, ny_ = 1, nz_ = 1;
  std::vector<std::vector<int>> cells_;

  int cell_index(int x, int y, int z) const { return x + nx_ * (y + ny_ * z); }
};

// ---------------------------------------------------------------------------
// Voxelization (hole filling by surface-normal test)
// ---------------------------------------------------------------------------

/// For every voxel center: nearest surface point, interpolated (angle-weighted
/// vertex) normal n and displacement d = voxel - point; inside iff n.d < 0.
/// Requires a watertight, consistently oriented mesh.
volume::VoxelGrid voxelize_by_normal(const TriMesh& mesh, const std::array<int, 3>& dims,
                                     const std::array<double, 3>& spacing,
                                     const std::array<double, 3>& origin);

// ---------------------------------------------------------------------------
// OBJ I/O (ASCII, v/f records, triangles only)
// ---------------------------------------------------------------------------

TriMesh load_obj(const std::string& path);
void save_obj(const TriMesh& mesh, const std::string& path);

}  // namespace vf::mesh
