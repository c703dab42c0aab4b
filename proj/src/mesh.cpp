#include "vesselforge/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "vesselforge/marching_tables.hpp"

namespace vf::mesh {

void TriMesh::validate() const {
  const int nv = int(vertices.size());
  for (std::size_t f = 0; f < faces.size(); ++f) {
    const auto& t = faces[f];
    for (int k = 0; k < 3; ++k)
      if (t[k] < 0 || t[k] >= nv)
        throw std::invalid_argument("TriMesh: face " + std::to_string(f) + " index out of range");
    if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2])
      throw std::invalid_argument("TriMesh: face " + std::to_string(f) + " has repeated vertices");
  }
  for (const Vec3& v : vertices)
    if (!std::isfinite(v.x) || !std::isfinite(v.y) || !std::isfinite(v.z))
      throw std::invalid_argument("TriMesh: non-finite vertex");
}

MeshTopology build_topology(const TriMesh& mesh) {
  MeshTopology topo;
  std::map<std::pair<int, int>, int> edge_ids;
  std::map<std::pair<int, int>, int> directed;  // (a,b) -> count

  auto edge_of = [&](int a, int b) -> EdgeInfo& {
    auto key = std::minmax(a, b);
    auto it = edge_ids.find(key);
    if (it == edge_ids.end()) {
      it = edge_ids.emplace(key, int(topo.edges.size())).first;
      topo.edges.push_back({key.first, key.second, -1, -1});
    }
    return topo.edges[it->second];
  };

  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    for (int k = 0; k < 3; ++k) {
      int a = t[k], b = t[(k + 1) % 3];
      EdgeInfo& e = edge_of(a, b);
      if (e.f0 < 0) e.f0 = int(f);
      else if (e.f1 < 0) e.f1 = int(f);
      else ++topo.nonmanifold_edges;
      ++directed[{a, b}];
    }
  }

  topo.boundary_edges = 0;
  for (const EdgeInfo& e : topo.edges)
    if (e.f1 < 0) ++topo.boundary_edges;
  topo.watertight = topo.boundary_edges == 0 && topo.nonmanifold_edges == 0 &&
                    !topo.edges.empty();

  topo.oriented = true;
  for (const auto& [key, cnt] : directed)
    if (cnt != 1) { topo.oriented = false; break; }
  if (topo.watertight) {
    // watertight + oriented means each undirected edge appears once per direction
    for (const EdgeInfo& e : topo.edges) {
      if (directed.count({e.a, e.b}) != 1 || directed.count({e.b, e.a}) != 1) {
        topo.oriented = false;
        break;
      }
    }
  }

  topo.vertex_neighbors.assign(mesh.vertices.size(), {});
  for (const EdgeInfo& e : topo.edges) {
    topo.vertex_neighbors[e.a].push_back(e.b);
    topo.vertex_neighbors[e.b].push_back(e.a);
  }
  return topo;
}

Vec3 face_normal(const TriMesh& mesh, int f) {
  const auto& t = mesh.faces[f];
  Vec3 n = cross(mesh.vertices[t[1]] - mesh.vertices[t[0]],
                 mesh.vertices[t[2]] - mesh.vertices[t[0]]);
  return normalized(n);
}

double face_area(const TriMesh& mesh, int f) {
  const auto& t = mesh.faces[f];
  return 0.5 * norm(cross(mesh.vertices[t[1]] - mesh.vertices[t[0]],
                          mesh.vertices[t[2]] - mesh.vertices[t[0]]));
}

std::vector<Vec3> vertex_normals(const TriMesh& mesh) {
  std::vector<Vec3> normals(mesh.vertices.size(), Vec3{});
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    Vec3 fn = face_normal(mesh, int(f));
    for (int k = 0; k < 3; ++k) {
      const Vec3& p = mesh.vertices[t[k]];
      Vec3 u = normalized(mesh.vertices[t[(k + 1) % 3]] - p);
      Vec3 v = normalized(mesh.vertices[t[(k + 2) % 3]] - p);
      double angle = std::acos(std::clamp(dot(u, v), -1.0, 1.0));
      normals[t[k]] += angle * fn;
    }
  }
  for (Vec3& n : normals) n = normalized(n);
  return normals;
}

double mesh_volume(const TriMesh& mesh) {
  double vol = 0.0;
  for (const auto& t : mesh.faces)
    vol += dot(mesh.vertices[t[0]], cross(mesh.vertices[t[1]], mesh.vertices[t[2]]));
  return vol / 6.0;
}

// ---------------------------------------------------------------------------
// Quality report
// ---------------------------------------------------------------------------

namespace {

// Segment-triangle crossing; used only for the sampled self-intersection count.
bool segment_hits_triangle(const Vec3& p, const Vec3& q, const Vec3& a, const Vec3& b,
                           const Vec3& c) {
  Vec3 dir = q - p;
  Vec3 e1 = b - a, e2 = c - a;
  Vec3 h = cross(dir, e2);
  double det = dot(e1, h);
  if (std::abs(det) < 1e-15) return false;
  double inv = 1.0 / det;
  Vec3 s = p - a;
  double u = dot(s, h) * inv;
  if (u < 0.0 || u > 1.0) return false;
  Vec3 qv = cross(s, e1);
  double v = dot(dir, qv) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  double t = dot(e2, qv) * inv;
  return t > 1e-12 && t < 1.0 - 1e-12;
}

bool triangles_intersect(const TriMesh& m, int f, int g) {
  const auto& tf = m.faces[f];
  const auto& tg = m.faces[g];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (tf[i] == tg[j]) return false;  // adjacent faces share an edge legitimately
  for (int k = 0; k < 3; ++k) {
    if (segment_hits_triangle(m.vertices[tf[k]], m.vertices[tf[(k + 1) % 3]],
                              m.vertices[tg[0]], m.vertices[tg[1]], m.vertices[tg[2]]))
      return true;
    if (segment_hits_triangle(m.vertices[tg[k]], m.vertices[tg[(k + 1) % 3]],
                              m.vertices[tf[0]], m.vertices[tf[1]], m.vertices[tf[2]]))
      return true;
  }
  return false;
}

}  // namespace

MeshQualityReport quality_report(const TriMesh& mesh, int intersection_samples,
                                 std::uint64_t seed) {
  mesh.validate();
  MeshQualityReport r;
  MeshTopology topo = build_topology(mesh);
  r.watertight = topo.watertight && topo.oriented;
  r.euler_characteristic =
      int(mesh.vertices.size()) - int(topo.edges.size()) + int(mesh.faces.size());

  double min_angle = 180.0, sum_angle = 0.0;
  std::size_t n_angles = 0;
  for (const auto& t : mesh.faces) {
    for (int k = 0; k < 3; ++k) {
      const Vec3& p = mesh.vertices[t[k]];
      Vec3 u = mesh.vertices[t[(k + 1) % 3]] - p;
      Vec3 v = mesh.vertices[t[(k + 2) % 3]] - p;
      double cosang = dot(u, v) / std::max(norm(u) * norm(v), 1e-300);
      double ang = std::acos(std::clamp(cosang, -1.0, 1.0)) * 180.0 / M_PI;
      min_angle = std::min(min_angle, ang);
      sum_angle += ang;
      ++n_angles;
    }
  }
  r.min_angle_deg = n_angles ? min_angle : 0.0;
  r.mean_angle_deg = n_angles ? sum_angle / double(n_angles) : 0.0;

  double lsum = 0.0, lsq = 0.0;
  for (const EdgeInfo& e : topo.edges) {
    double l = norm(mesh.vertices[e.a] - mesh.vertices[e.b]);
    lsum += l;
    lsq += l * l;
  }
  if (!topo.edges.empty()) {
    double mean = lsum / double(topo.edges.size());
    double var = std::max(0.0, lsq / double(topo.edges.size()) - mean * mean);
    r.edge_length_mean = mean;
    r.edge_length_cv = mean > 0.0 ? std::sqrt(var) / mean : 0.0;
  }

  if (mesh.faces.size() >= 2 && intersection_samples > 0) {
    Rng rng = make_rng(seed);
    std::uniform_int_distribution<int> pick(0, int(mesh.faces.size()) - 1);
    int hits = 0;
    for (int s = 0; s < intersection_samples; ++s) {
      int f = pick(rng), g = pick(rng);
      if (f == g) continue;
      if (triangles_intersect(mesh, f, g)) ++hits;
    }
    r.self_intersections = hits;
  }
  return r;
}

std::string quality_report_json(const MeshQualityReport& r) {
  std::ostringstream os;
  os << "{\n"
     << "  \"watertight\": " << (r.watertight ? "true" : "false") << ",\n"
     << "  \"euler_characteristic\": " << r.euler_characteristic << ",\n"
     << "  \"min_angle_deg\": " << r.min_angle_deg << ",\n"
     << "  \"mean_angle_deg\": " << r.mean_angle_deg << ",\n"
     << "  \"edge_length_mean\": " << r.edge_length_mean << ",\n"
     << "  \"edge_length_cv\": " << r.edge_length_cv << ",\n"
     << "  \"self_intersections\": " << r.self_intersections << "\n"
     << "}\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Marching cubes
// ---------------------------------------------------------------------------

TriMesh marching_cubes(const volume::VoxelGrid& grid, double iso) {
  if (grid.dims[0] < 2 || grid.dims[1] < 2 || grid.dims[2] < 2)
    throw std::invalid_argument("marching_cubes: grid dims must be >= 2 per axis");

  TriMesh out;
  // Welds vertices through a global edge key: lattice point of the lower edge
  // endpoint plus the edge axis.
  std::unordered_map<std::uint64_t, int> edge_vertex;
  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];

  auto edge_key = [&](int x, int y, int z, int axis) {
    return (std::uint64_t(axis) << 48) | (std::uint64_t(z) << 32) | (std::uint64_t(y) << 16) |
           std::uint64_t(x);
  };

  double vmin = grid.data[0], vmax = grid.data[0];
  for (double v : grid.data) {
    vmin = std::min(vmin, v);
    vmax = std::max(vmax, v);
  }
  if (iso <= vmin || iso > vmax)
    throw std::runtime_error("marching_cubes: isovalue outside data range, empty surface");

  double corner[8];
  for (int z = 0; z + 1 < nz; ++z)
    for (int y = 0; y + 1 < ny; ++y)
      for (int x = 0; x + 1 < nx; ++x) {
        int cubeindex = 0;
        for (int v = 0; v < 8; ++v) {
          corner[v] = grid.at(x + mc::kVertOffset[v][0], y + mc::kVertOffset[v][1],
                              z + mc::kVertOffset[v][2]);
          if (corner[v] < iso) cubeindex |= 1 << v;
        }
        if (mc::kEdgeTable[cubeindex] == 0) continue;

        int everts[12];
        for (int e = 0; e < 12; ++e) {
          if (!(mc::kEdgeTable[cubeindex] & (1 << e))) { everts[e] = -1; continue; }
          const int a = mc::kEdgeVerts[e][0], b = mc::kEdgeVerts[e][1];
          const int ax = x + mc::kVertOffset[a][0], ay = y + mc::kVertOffset[a][1],
                    az = z + mc::kVertOffset[a][2];
          const int bx = x + mc::kVertOffset[b][0], by = y + mc::kVertOffset[b][1],
                    bz = z + mc::kVertOffset[b][2];
          int axis = (bx != ax) ? 0 : (by != ay ? 1 : 2);
          int lx = std::min(ax, bx), ly = std::min(ay, by), lz = std::min(az, bz);
          auto key = edge_key(lx, ly, lz, axis);
          auto it = edge_vertex.find(key);
          if (it != edge_vertex.end()) { everts[e] = it->second; continue; }

          double va = corner[a], vb = corner[b];
          double t = std::abs(vb - va) < 1e-300 ? 0.5 : (iso - va) / (vb - va);
          t = std::clamp(t, 0.0, 1.0);
          Vec3 pa = grid.voxel_center(ax, ay, az);
          Vec3 pb = grid.voxel_center(bx, by, bz);
          Vec3 p = pa + t * (pb - pa);
          everts[e] = int(out.vertices.size());
          out.vertices.push_back(p);
          edge_vertex.emplace(key, everts[e]);
        }

        const int* tt = mc::kTriTable[cubeindex];
        for (int i = 0; tt[i] != -1; i += 3) {
          int i0 = everts[tt[i]], i1 = everts[tt[i + 1]], i2 = everts[tt[i + 2]];
          if (i0 == i1 || i1 == i2 || i0 == i2) continue;  // iso hit a lattice point
          // Table winding faces the low-value side; flip so normals point
          // toward lower values (outward for inside-high fields).
          out.faces.push_back({i0, i2, i1});
        }
      }

  if (out.faces.empty())
    throw std::runtime_error("marching_cubes: isovalue produced an empty surface");
  return out;
}

// ---------------------------------------------------------------------------
// Mesh losses
// ---------------------------------------------------------------------------

namespace {

void check_degenerate_faces(const TriMesh& mesh) {
  for (std::size_t f = 0; f < mesh.faces.size(); ++f)
    if (face_area(mesh, int(f)) < 1e-300)
      throw std::runtime_error("mesh_losses: degenerate (zero-area) face " + std::to_string(f));
}

}  // namespace

MeshLossTerms mesh_losses(const TriMesh& mesh) {
  std::vector<Vec3> unused;
  return mesh_losses_grad(mesh, 0.0, 0.0, 0.0, unused);
}

MeshLossTerms mesh_losses_grad(const TriMesh& mesh, double w_normal, double w_edge,
                               double w_laplacian, std::vector<Vec3>& grad) {
  mesh.validate();
  check_degenerate_faces(mesh);
  MeshTopology topo = build_topology(mesh);

  int n_internal = 0;
  for (const EdgeInfo& e : topo.edges)
    if (e.f1 >= 0) ++n_internal;
  if (n_internal == 0)
    throw std::invalid_argument("mesh_losses: mesh has no internal edges");

  const bool want_grad = w_normal != 0.0 || w_edge != 0.0 || w_laplacian != 0.0;
  grad.assign(want_grad ? mesh.vertices.size() : 0, Vec3{});

  MeshLossTerms terms;

  // Normal term: mean over internal edges of (1 - n1.n2).
  std::vector<Vec3> fnormals(mesh.faces.size());
  std::vector<double> fnorm_len(mesh.faces.size());
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    Vec3 n = cross(mesh.vertices[t[1]] - mesh.vertices[t[0]],
                   mesh.vertices[t[2]] - mesh.vertices[t[0]]);
    fnorm_len[f] = norm(n);
    fnormals[f] = n / fnorm_len[f];
  }
  for (const EdgeInfo& e : topo.edges) {
    if (e.f1 < 0) continue;
    terms.normal += 1.0 - dot(fnormals[e.f0], fnormals[e.f1]);
  }
  terms.normal /= double(n_internal);

  if (want_grad && w_normal != 0.0) {
    // VJP of the unit face normal: nbar = (g - n(n.g)) / |n|, then the
    // cross-product pullbacks u_bar = w x nbar, w_bar = nbar x u.
    auto accum_face = [&](int f, const Vec3& g) {
      const auto& t = mesh.faces[f];
      const Vec3& n = fnormals[f];
      Vec3 nbar = (g - n * dot(n, g)) / fnorm_len[f];
      Vec3 u = mesh.vertices[t[1]] - mesh.vertices[t[0]];
      Vec3 w = mesh.vertices[t[2]] - mesh.vertices[t[0]];
      Vec3 ubar = cross(w, nbar);
      Vec3 wbar = cross(nbar, u);
      grad[t[1]] += ubar;
      grad[t[2]] += wbar;
      grad[t[0]] -= ubar + wbar;
    };
    const double scale = -w_normal / double(n_internal);
    for (const EdgeInfo& e : topo.edges) {
      if (e.f1 < 0) continue;
      accum_face(e.f0, scale * fnormals[e.f1]);
      accum_face(e.f1, scale * fnormals[e.f0]);
    }
  }

  // Edge term: mean over all edges of (|e| - lbar)^2, lbar the current mean.
  std::vector<double> elen(topo.edges.size());
  double lbar = 0.0;
  for (std::size_t i = 0; i < topo.edges.size(); ++i) {
    elen[i] = norm(mesh.vertices[topo.edges[i].a] - mesh.vertices[topo.edges[i].b]);
    lbar += elen[i];
  }
  lbar /= double(topo.edges.size());
  for (double l : elen) terms.edge += (l - lbar) * (l - lbar);
  terms.edge /= double(topo.edges.size());

  if (want_grad && w_edge != 0.0) {
    // d lbar/dx drops out: sum of (l_e - lbar) over edges is zero.
    const double scale = 2.0 * w_edge / double(topo.edges.size());
    for (std::size_t i = 0; i < topo.edges.size(); ++i) {
      const EdgeInfo& e = topo.edges[i];
      if (elen[i] < 1e-300) continue;
      Vec3 dir = (mesh.vertices[e.a] - mesh.vertices[e.b]) / elen[i];
      Vec3 g = scale * (elen[i] - lbar) * dir;
      grad[e.a] += g;
      grad[e.b] -= g;
    }
  }

  // Laplacian term: mean over vertices of |v - mean(neighbors)|^2.
  const double nv = double(mesh.vertices.size());
  std::vector<Vec3> defect(mesh.vertices.size());
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const auto& nb = topo.vertex_neighbors[i];
    if (nb.empty()) continue;
    Vec3 c{};
    for (int j : nb) c += mesh.vertices[j];
    defect[i] = mesh.vertices[i] - c / double(nb.size());
    terms.laplacian += norm2(defect[i]);
  }
  terms.laplacian /= nv;

  if (want_grad && w_laplacian != 0.0) {
    const double scale = 2.0 * w_laplacian / nv;
    for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
      const auto& nb = topo.vertex_neighbors[i];
      if (nb.empty()) continue;
      grad[i] += scale * defect[i];
      Vec3 g = scale / double(nb.size()) * defect[i];
      for (int j : nb) grad[j] -= g;
    }
  }

  return terms;
}

SmoothResult smooth_minimize(const TriMesh& mesh, double w_normal, double w_edge,
                             double w_laplacian, int steps, double lr) {
  SmoothResult res;
  res.mesh = mesh;

  auto combined = [&](const TriMesh& m, std::vector<Vec3>* g) {
    MeshLossTerms t;
    if (g) t = mesh_losses_grad(m, w_normal, w_edge, w_laplacian, *g);
    else t = mesh_losses(m);
    return w_normal * t.normal + w_edge * t.edge + w_laplacian * t.laplacian;
  };

  std::vector<Vec3> grad;
  double cur = combined(res.mesh, &grad);
  if (!std::isfinite(cur)) throw std::runtime_error("smooth_minimize: non-finite loss");
  res.loss_history.push_back(cur);

  TriMesh trial = res.mesh;
  for (int s = 0; s < steps; ++s) {
    double step = lr;
    bool accepted = false;
    for (int halving = 0; halving < 30; ++halving) {
      for (std::size_t i = 0; i < res.mesh.vertices.size(); ++i)
        trial.vertices[i] = res.mesh.vertices[i] - step * grad[i];
      double lt = combined(trial, nullptr);
      if (std::isfinite(lt) && lt <= cur) {
        res.mesh.vertices = trial.vertices;
        cur = lt;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // no descent direction at any tried step
    res.loss_history.push_back(cur);
    combined(res.mesh, &grad);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Closest point / triangle index
// ---------------------------------------------------------------------------

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Ericson, Real-Time Collision Detection, 5.1.5.
  Vec3 ab = b - a, ac = c - a, ap = p - a;
  double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0.0 && d2 <= 0.0) return a;

  Vec3 bp = p - b;
  double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0.0 && d4 <= d3) return b;

  double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    double v = d1 / (d1 - d3);
    return a + v * ab;
  }

  Vec3 cp = p - c;
  double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0.0 && d5 <= d6) return c;

  double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    double w = d2 / (d2 - d6);
    return a + w * ac;
  }

  double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + w * (c - b);
  }

  double denom = 1.0 / (va + vb + vc);
  double v = vb * denom, w = vc * denom;
  return a + v * ab + w * ac;
}

namespace {

Vec3 barycentric(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  Vec3 v0 = b - a, v1 = c - a, v2 = p - a;
  double d00 = dot(v0, v0), d01 = dot(v0, v1), d11 = dot(v1, v1);
  double d20 = dot(v2, v0), d21 = dot(v2, v1);
  double denom = d00 * d11 - d01 * d01;
  if (std::abs(denom) < 1e-300) return {1.0, 0.0, 0.0};
  double v = (d11 * d20 - d01 * d21) / denom;
  double w = (d00 * d21 - d01 * d20) / denom;
  return {1.0 - v - w, v, w};
}

}  // namespace

TriangleIndex::TriangleIndex(const TriMesh& mesh) : mesh_(mesh) {
  if (mesh.faces.empty()) throw std::invalid_argument("TriangleIndex: empty mesh");
  lo_ = hi_ = mesh.vertices[0];
  for (const Vec3& v : mesh.vertices) {
    lo_ = {std::min(lo_.x, v.x), std::min(lo_.y, v.y), std::min(lo_.z, v.z)};
    hi_ = {std::max(hi_.x, v.x), std::max(hi_.y, v.y), std::max(hi_.z, v.z)};
  }
  double diag = norm(hi_ - lo_);
  double mean_edge = 0.0;
  for (const auto& t : mesh.faces)
    mean_edge += norm(mesh.vertices[t[1]] - mesh.vertices[t[0]]);
  mean_edge /= double(mesh.faces.size());
  cell_ = std::clamp(2.0 * mean_edge, diag / 128.0 + 1e-12, std::max(diag / 4.0, 1e-9));

  nx_ = std::max(1, int(std::floor((hi_.x - lo_.x) / cell_)) + 1);
  ny_ = std::max(1, int(std::floor((hi_.y - lo_.y) / cell_)) + 1);
  nz_ = std::max(1, int(std::floor((hi_.z - lo_.z) / cell_)) + 1);
  cells_.assign(std::size_t(nx_) * ny_ * nz_, {});

  auto cell_of = [&](double v, double lo, int n) {
    return std::clamp(int(std::floor((v - lo) / cell_)), 0, n - 1);
  };
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    Vec3 tl = mesh.vertices[t[0]], th = tl;
    for (int k = 1; k < 3; ++k) {
      const Vec3& v = mesh.vertices[t[k]];
      tl = {std::min(tl.x, v.x), std::min(tl.y, v.y), std::min(tl.z, v.z)};
      th = {std::max(th.x, v.x), std::max(th.y, v.y), std::max(th.z, v.z)};
    }
    int x0 = cell_of(tl.x, lo_.x, nx_), x1 = cell_of(th.x, lo_.x, nx_);
    int y0 = cell_of(tl.y, lo_.y, ny_), y1 = cell_of(th.y, lo_.y, ny_);
    int z0 = cell_of(tl.z, lo_.z, nz_), z1 = cell_of(th.z, lo_.z, nz_);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          cells_[cell_index(x, y, z)].push_back(int(f));
  }
}

TriangleIndex::Hit TriangleIndex::nearest(const Vec3& p) const {
  Hit best;
  best.dist = std::numeric_limits<double>::infinity();

  auto scan_cell = [&](int x, int y, int z) {
    for (int f : cells_[cell_index(x, y, z)]) {
      const auto& t = mesh_.faces[f];
      Vec3 cp = closest_point_on_triangle(p, mesh_.vertices[t[0]], mesh_.vertices[t[1]],
                                          mesh_.vertices[t[2]]);
      double d = norm(cp - p);
      if (d < best.dist) {
        best.dist = d;
        best.point = cp;
        best.face = f;
      }
    }
  };

  int cx = std::clamp(int(std::floor((p.x - lo_.x) / cell_)), 0, nx_ - 1);
  int cy = std::clamp(int(std::floor((p.y - lo_.y) / cell_)), 0, ny_ - 1);
  int cz = std::clamp(int(std::floor((p.z - lo_.z) / cell_)), 0, nz_ - 1);

  const int max_ring = std::max({nx_, ny_, nz_});
  for (int ring = 0; ring <= max_ring; ++ring) {
    // Any cell at Chebyshev ring r+1 is at least r*cell away from p, so once
    // best <= ring*cell no farther ring can improve it.
    if (best.face >= 0 && best.dist <= double(ring) * cell_) break;
    int x0 = std::max(0, cx - ring), x1 = std::min(nx_ - 1, cx + ring);
    int y0 = std::max(0, cy - ring), y1 = std::min(ny_ - 1, cy + ring);
    int z0 = std::max(0, cz - ring), z1 = std::min(nz_ - 1, cz + ring);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          int cheb = std::max({std::abs(x - cx), std::abs(y - cy), std::abs(z - cz)});
          if (cheb != ring) continue;
          scan_cell(x, y, z);
        }
  }

  if (best.face >= 0) {
    const auto& t = mesh_.faces[best.face];
    best.bary = barycentric(best.point, mesh_.vertices[t[0]], mesh_.vertices[t[1]],
                            mesh_.vertices[t[2]]);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Voxelizer
// ---------------------------------------------------------------------------

volume::VoxelGrid voxelize_by_normal(const TriMesh& mesh, const std::array<int, 3>& dims,
                                     const std::array<double, 3>& spacing,
                                     const std::array<double, 3>& origin) {
  mesh.validate();
  MeshTopology topo = build_topology(mesh);
  if (!topo.watertight || !topo.oriented)
    throw std::invalid_argument("voxelize_by_normal: mesh must be watertight and oriented");

  std::vector<Vec3> vnormals = vertex_normals(mesh);
  TriangleIndex index(mesh);

  volume::VoxelGrid out(dims, spacing, origin, 0.0);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        Vec3 p = out.voxel_center(x, y, z);
        auto hit = index.nearest(p);
        const auto& t = mesh.faces[hit.face];
        Vec3 n = hit.bary.x * vnormals[t[0]] + hit.bary.y * vnormals[t[1]] +
                 hit.bary.z * vnormals[t[2]];
        if (norm2(n) < 1e-24) n = face_normal(mesh, hit.face);
        Vec3 d = p - hit.point;
        out.at(x, y, z) = dot(n, d) < 0.0 ? 1.0 : 0.0;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Isotropic remeshing
// ---------------------------------------------------------------------------

namespace {

struct WorkMesh {
  std::vector<Vec3> verts;
  std::vector<std::array<int, 3>> faces;
  std::vector<bool> vert_alive;
  std::vector<bool> face_alive;
  std::vector<std::vector<int>> vfaces;  // incident alive faces per vertex

  explicit WorkMesh(const TriMesh& m)
      : verts(m.vertices), faces(m.faces), vert_alive(m.vertices.size(), true),
        face_alive(m.faces.size(), true), vfaces(m.vertices.size()) {
    for (std::size_t f = 0; f < faces.size(); ++f)
      for (int k = 0; k < 3; ++k) vfaces[faces[f][k]].push_back(int(f));
  }

  void drop_face(int f) {
    face_alive[f] = false;
    for (int k = 0; k < 3; ++k) {
      auto& lst = vfaces[faces[f][k]];
      lst.erase(std::remove(lst.begin(), lst.end(), f), lst.end());
    }
  }

  int add_face(std::array<int, 3> t) {
    int id = int(faces.size());
    faces.push_back(t);
    face_alive.push_back(true);
    for (int k = 0; k < 3; ++k) vfaces[t[k]].push_back(id);
    return id;
  }

  int add_vertex(const Vec3& p) {
    verts.push_back(p);
    vert_alive.push_back(true);
    vfaces.emplace_back();
    return int(verts.size()) - 1;
  }

  std::vector<int> one_ring(int v) const {
    std::set<int> ring;
    for (int f : vfaces[v])
      for (int k = 0; k < 3; ++k)
        if (faces[f][k] != v) ring.insert(faces[f][k]);
    return {ring.begin(), ring.end()};
  }

  TriMesh compact() const {
    TriMesh out;
    std::vector<int> remap(verts.size(), -1);
    for (std::size_t v = 0; v < verts.size(); ++v)
      if (vert_alive[v] && !vfaces[v].empty()) {
        remap[v] = int(out.vertices.size());
        out.vertices.push_back(verts[v]);
      }
    for (std::size_t f = 0; f < faces.size(); ++f)
      if (face_alive[f])
        out.faces.push_back({remap[faces[f][0]], remap[faces[f][1]], remap[faces[f][2]]});
    return out;
  }

  std::size_t alive_vertex_count() const {
    std::size_t n = 0;
    for (std::size_t v = 0; v < verts.size(); ++v)
      if (vert_alive[v] && !vfaces[v].empty()) ++n;
    return n;
  }
};

// Collects alive undirected edges with their two faces.
std::vector<std::array<int, 4>> collect_edges(const WorkMesh& wm) {
  std::map<std::pair<int, int>, std::array<int, 4>> emap;  // (a,b) -> a,b,f0,f1
  for (std::size_t f = 0; f < wm.faces.size(); ++f) {
    if (!wm.face_alive[f]) continue;
    for (int k = 0; k < 3; ++k) {
      int a = wm.faces[f][k], b = wm.faces[f][(k + 1) % 3];
      auto key = std::minmax(a, b);
      auto it = emap.find(key);
      if (it == emap.end())
        emap[key] = {key.first, key.second, int(f), -1};
      else
        it->second[3] = int(f);
    }
  }
  std::vector<std::array<int, 4>> edges;
  edges.reserve(emap.size());
  for (auto& [k, e] : emap) edges.push_back(e);
  return edges;
}

void split_long_edges(WorkMesh& wm, double lmax) {
  auto edges = collect_edges(wm);
  // Mark, then retriangulate every face against its marked edges (conforming).
  std::map<std::pair<int, int>, int> midpoint;
  for (const auto& e : edges) {
    if (norm(wm.verts[e[0]] - wm.verts[e[1]]) > lmax)
      midpoint[{e[0], e[1]}] = -1;
  }
  if (midpoint.empty()) return;
  for (auto& [key, mid] : midpoint)
    mid = wm.add_vertex(0.5 * (wm.verts[key.first] + wm.verts[key.second]));

  auto mid_of = [&](int a, int b) -> int {
    auto it = midpoint.find(std::minmax(a, b));
    return it == midpoint.end() ? -1 : it->second;
  };

  const std::size_t nf = wm.faces.size();
  for (std::size_t f = 0; f < nf; ++f) {
    if (!wm.face_alive[f]) continue;
    auto t = wm.faces[f];
    int m01 = mid_of(t[0], t[1]), m12 = mid_of(t[1], t[2]), m20 = mid_of(t[2], t[0]);
    int marks = (m01 >= 0) + (m12 >= 0) + (m20 >= 0);
    if (marks == 0) continue;
    wm.drop_face(int(f));
    if (marks == 3) {
      wm.add_face({t[0], m01, m20});
      wm.add_face({m01, t[1], m12});
      wm.add_face({m20, m12, t[2]});
      wm.add_face({m01, m12, m20});
    } else if (marks == 2) {
      // Rotate so the two marked edges are (t0,t1) and (t1,t2).
      while (!(mid_of(t[0], t[1]) >= 0 && mid_of(t[1], t[2]) >= 0)) {
        t = {t[1], t[2], t[0]};
      }
      int ma = mid_of(t[0], t[1]), mb = mid_of(t[1], t[2]);
      wm.add_face({ma, t[1], mb});
      wm.add_face({t[0], ma, mb});
      wm.add_face({t[0], mb, t[2]});
    } else {
      while (mid_of(t[0], t[1]) < 0) t = {t[1], t[2], t[0]};
      int m = mid_of(t[0], t[1]);
      wm.add_face({t[0], m, t[2]});
      wm.add_face({m, t[1], t[2]});
    }
  }
}

void collapse_short_edges(WorkMesh& wm, double lmin, double lmax) {
  auto edges = collect_edges(wm);
  std::sort(edges.begin(), edges.end(), [&](const auto& e1, const auto& e2) {
    return norm2(wm.verts[e1[0]] - wm.verts[e1[1]]) < norm2(wm.verts[e2[0]] - wm.verts[e2[1]]);
  });
  std::vector<bool> touched(wm.verts.size(), false);

  for (const auto& e : edges) {
    int a = e[0], b = e[1];
    if (!wm.vert_alive[a] || !wm.vert_alive[b]) continue;
    if (a >= int(touched.size()) || b >= int(touched.size())) continue;
    if (touched[a] || touched[b]) continue;
    double l = norm(wm.verts[a] - wm.verts[b]);
    if (l >= lmin) break;

    // Link condition: shared one-ring must be exactly the two opposite verts.
    auto ring_a = wm.one_ring(a);
    auto ring_b = wm.one_ring(b);
    std::vector<int> common;
    std::set_intersection(ring_a.begin(), ring_a.end(), ring_b.begin(), ring_b.end(),
                          std::back_inserter(common));
    if (common.size() != 2) continue;

    Vec3 target = 0.5 * (wm.verts[a] + wm.verts[b]);
    // Reject collapses that would create overlong edges.
    bool ok = true;
    for (int v : ring_a)
      if (v != b && norm(wm.verts[v] - target) > lmax) { ok = false; break; }
    for (int v : ring_b)
      if (ok && v != a && norm(wm.verts[v] - target) > lmax) { ok = false; break; }
    if (!ok) continue;

    // Drop the two faces on the edge, rewire b's remaining faces to a.
    std::vector<int> shared_faces;
    for (int f : wm.vfaces[a]) {
      const auto& t = wm.faces[f];
      if (t[0] == b || t[1] == b || t[2] == b) shared_faces.push_back(f);
    }
    if (shared_faces.size() != 2) continue;
    for (int f : shared_faces) wm.drop_face(f);

    wm.verts[a] = target;
    auto bfaces = wm.vfaces[b];
    bool flip = false;
    for (int f : bfaces) {
      auto t = wm.faces[f];
      for (int k = 0; k < 3; ++k)
        if (t[k] == b) t[k] = a;
      if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) { flip = true; break; }
    }
    if (flip) {  // would create a degenerate face; undo by skipping
      for (int f : shared_faces) {
        wm.face_alive[f] = true;
        for (int k = 0; k < 3; ++k) wm.vfaces[wm.faces[f][k]].push_back(f);
      }
      continue;
    }
    for (int f : bfaces) {
      for (int k = 0; k < 3; ++k)
        if (wm.faces[f][k] == b) wm.faces[f][k] = a;
      wm.vfaces[a].push_back(f);
    }
    wm.vfaces[b].clear();
    wm.vert_alive[b] = false;
    touched[a] = true;
    for (int v : common) if (v < int(touched.size())) touched[v] = true;
  }
}

void flip_for_valence(WorkMesh& wm) {
  auto edges = collect_edges(wm);
  std::vector<int> valence(wm.verts.size(), 0);
  std::set<std::pair<int, int>> edge_set;
  for (const auto& e : edges) {
    ++valence[e[0]];
    ++valence[e[1]];
    edge_set.insert({e[0], e[1]});
  }
  auto dev = [&](int v, int delta) {
    int d = valence[v] + delta - 6;
    return d * d;
  };

  for (const auto& e : edges) {
    int a = e[0], b = e[1], f0 = e[2], f1 = e[3];
    if (f1 < 0 || !wm.face_alive[f0] || !wm.face_alive[f1]) continue;
    auto opposite = [&](int f) {
      for (int k = 0; k < 3; ++k) {
        int v = wm.faces[f][k];
        if (v != a && v != b) return v;
      }
      return -1;
    };
    int c = opposite(f0), d = opposite(f1);
    if (c < 0 || d < 0 || c == d) continue;
    if (edge_set.count(std::minmax(c, d))) continue;

    int before = dev(a, 0) + dev(b, 0) + dev(c, 0) + dev(d, 0);
    int after = dev(a, -1) + dev(b, -1) + dev(c, 1) + dev(d, 1);
    if (after >= before) continue;

    // Geometry guards: new triangles must be non-degenerate and not folded.
    Vec3 n_new1 = cross(wm.verts[d] - wm.verts[c], wm.verts[a] - wm.verts[c]);
    Vec3 n_new2 = cross(wm.verts[b] - wm.verts[c], wm.verts[d] - wm.verts[c]);
    if (norm(n_new1) < 1e-14 || norm(n_new2) < 1e-14) continue;
    Vec3 n_old1 = cross(wm.verts[wm.faces[f0][1]] - wm.verts[wm.faces[f0][0]],
                        wm.verts[wm.faces[f0][2]] - wm.verts[wm.faces[f0][0]]);
    if (dot(normalized(n_new1), normalized(n_old1)) < 0.2 ||
        dot(normalized(n_new2), normalized(n_old1)) < 0.2)
      continue;

    // Orient the new faces consistently with f0's winding of (a,b).
    bool ab_in_f0 = false;
    for (int k = 0; k < 3; ++k)
      if (wm.faces[f0][k] == a && wm.faces[f0][(k + 1) % 3] == b) ab_in_f0 = true;
    wm.drop_face(f0);
    wm.drop_face(f1);
    if (ab_in_f0) {
      wm.add_face({c, a, d});
      wm.add_face({d, b, c});
    } else {
      wm.add_face({c, b, d});
      wm.add_face({d, a, c});
    }
    edge_set.erase(std::minmax(a, b));
    edge_set.insert(std::minmax(c, d));
    --valence[a];
    --valence[b];
    ++valence[c];
    ++valence[d];
  }
}

void relax_and_project(WorkMesh& wm, const TriangleIndex& original) {
  TriMesh cur = wm.compact();  // normals need a consistent mesh
  // Map compacted indices back to work indices.
  std::vector<int> remap;
  remap.reserve(cur.vertices.size());
  for (std::size_t v = 0; v < wm.verts.size(); ++v)
    if (wm.vert_alive[v] && !wm.vfaces[v].empty()) remap.push_back(int(v));

  std::vector<Vec3> normals = vertex_normals(cur);
  MeshTopology topo = build_topology(cur);
  for (std::size_t i = 0; i < cur.vertices.size(); ++i) {
    const auto& nb = topo.vertex_neighbors[i];
    if (nb.empty()) continue;
    Vec3 c{};
    for (int j : nb) c += cur.vertices[j];
    c = c / double(nb.size());
    Vec3 d = c - cur.vertices[i];
    Vec3 n = normals[i];
    Vec3 tangential = d - n * dot(n, d);
    Vec3 moved = cur.vertices[i] + 0.5 * tangential;
    wm.verts[remap[i]] = original.nearest(moved).point;
  }
}

}  // namespace

TriMesh remesh_uniform(const TriMesh& mesh, int target_vertex_count) {
  mesh.validate();
  if (target_vertex_count < 100)
    throw std::invalid_argument("remesh_uniform: target must be >= 100");
  MeshTopology topo = build_topology(mesh);
  if (!topo.watertight)
    throw std::invalid_argument("remesh_uniform: input must be watertight");

  double area = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) area += face_area(mesh, int(f));
  double target_len = std::sqrt(2.0 * area / (std::sqrt(3.0) * double(target_vertex_count)));

  TriangleIndex original(mesh);
  WorkMesh wm(mesh);

  const int max_rounds = 12;
  for (int round = 0; round < max_rounds; ++round) {
    split_long_edges(wm, 4.0 / 3.0 * target_len);
    collapse_short_edges(wm, 0.8 * target_len, 4.0 / 3.0 * target_len);
    flip_for_valence(wm);
    relax_and_project(wm, original);

    double nv = double(wm.alive_vertex_count());
    double ratio = nv / double(target_vertex_count);
    if (round >= 3 && ratio > 0.92 && ratio < 1.08) break;
    // Steer the edge length toward the target count.
    target_len *= std::sqrt(std::clamp(ratio, 0.25, 4.0));
  }

  TriMesh out = wm.compact();
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// OBJ I/O
// ---------------------------------------------------------------------------

TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_obj: cannot open " + path);
  TriMesh m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "v") {
      Vec3 p;
      if (!(is >> p.x >> p.y >> p.z))
        throw std::runtime_error("load_obj: malformed vertex at line " + std::to_string(lineno));
      m.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<long> idx;
      std::string tok;
      while (is >> tok) {
        std::size_t pos = 0;
        long v = std::stol(tok, &pos);
        if (pos != tok.size())
          throw std::runtime_error("load_obj: unsupported face token '" + tok + "' at line " +
                                   std::to_string(lineno));
        idx.push_back(v);
      }
      if (idx.size() != 3)
        throw std::runtime_error("load_obj: non-triangle face at line " + std::to_string(lineno));
      std::array<int, 3> t{};
      for (int k = 0; k < 3; ++k) {
        if (idx[k] < 1 || idx[k] > long(m.vertices.size()))
          throw std::runtime_error("load_obj: face index out of range at line " +
                                   std::to_string(lineno));
        t[k] = int(idx[k] - 1);
      }
      m.faces.push_back(t);
    }
    // other records are ignored; this reader handles the v/f subset
  }
  m.validate();
  return m;
}

void save_obj(const TriMesh& mesh, const std::string& path) {
  mesh.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_obj: cannot open " + path + " for writing");
  char buf[128];
  for (const Vec3& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", v.x, v.y, v.z);
    out << buf;
  }
  for (const auto& t : mesh.faces)
    out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  if (!out) throw std::runtime_error("save_obj: write failed for " + path);
}

}  // namespace vf::mesh
