#include "vesselforge/lddmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <stdexcept>

namespace vf::lddmm {

void ShootingState::validate() const {
  if (points.empty()) throw std::invalid_argument("ShootingState: needs >= 1 control point");
  if (points.size() != momenta.size())
    throw std::invalid_argument("ShootingState: points/momenta size mismatch");
  if (!(kernel_sigma > 0.0)) throw std::invalid_argument("ShootingState: kernel sigma must be > 0");
  auto finite = [](const Vec3& v) {
    return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
  };
  for (const Vec3& p : points)
    if (!finite(p)) throw std::invalid_argument("ShootingState: non-finite control point");
  for (const Vec3& m : momenta)
    if (!finite(m)) throw std::invalid_argument("ShootingState: non-finite momentum");
}

// ---------------------------------------------------------------------------
// Scaling gate
// ---------------------------------------------------------------------------

namespace {

double cap_alpha(double d, double r, double sigma) {
  if (d < r) return 0.0;
  if (d < r + 3.0 * sigma) {
    double u = d - r;
    return 1.0 - std::exp(-u * u / (2.0 * sigma * sigma));
  }
  return 1.0;
}

}  // namespace

std::vector<double> scaling_field(const std::vector<Vec3>& points,
                                  const phantom::InletOutletSpec& io) {
  io.validate();
  std::vector<double> alpha(points.size(), 1.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    double a = 1.0;
    for (const phantom::Cap& cap : io.caps)
      a = std::min(a, cap_alpha(norm(points[i] - cap.center), cap.radius, io.buffer_sigma));
    alpha[i] = a;
  }
  return alpha;
}

ScalingGate make_scaling_gate(const phantom::InletOutletSpec& io,
                              const std::vector<Vec3>& control_points,
                              const std::vector<Vec3>& vertices) {
  ScalingGate g;
  g.io = io;
  g.control_alpha = scaling_field(control_points, io);
  g.vertex_alpha = scaling_field(vertices, io);
  return g;
}

ScalingGate uniform_gate(std::size_t n_control, std::size_t n_vertices) {
  ScalingGate g;
  g.control_alpha.assign(n_control, 1.0);
  g.vertex_alpha.assign(n_vertices, 1.0);
  return g;
}

// ---------------------------------------------------------------------------
// Sampling and kernels
// ---------------------------------------------------------------------------

std::vector<int> farthest_point_sample(const std::vector<Vec3>& points, int n, int start_index) {
  if (n < 1 || n > int(points.size()))
    throw std::invalid_argument("farthest_point_sample: n out of range");
  if (start_index < 0 || start_index >= int(points.size()))
    throw std::invalid_argument("farthest_point_sample: bad start index");

  std::vector<int> picked{start_index};
  std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());
  int last = start_index;
  while (int(picked.size()) < n) {
    int best = -1;
    double best_d2 = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      double d2 = norm2(points[i] - points[last]);
      if (d2 < min_d2[i]) min_d2[i] = d2;
      if (min_d2[i] > best_d2) { best_d2 = min_d2[i]; best = int(i); }
    }
    picked.push_back(best);
    last = best;
  }
  return picked;
}

double gauss_kernel(const Vec3& x, const Vec3& y, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gauss_kernel: sigma must be > 0");
  return std::exp(-norm2(x - y) / (sigma * sigma));
}

std::vector<double> kernel_matrix(const std::vector<Vec3>& points, double sigma) {
  const std::size_t n = points.size();
  std::vector<double> k(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    k[i * n + i] = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      double v = gauss_kernel(points[i], points[j], sigma);
      k[i * n + j] = v;
      k[j * n + i] = v;
    }
  }
  return k;
}

std::vector<Vec3> velocity_at(const std::vector<Vec3>& queries, const ShootingState& state) {
  state.validate();
  const double inv_s2 = 1.0 / (state.kernel_sigma * state.kernel_sigma);
  std::vector<Vec3> v(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) {
    Vec3 acc{};
    for (std::size_t j = 0; j < state.points.size(); ++j)
      acc += std::exp(-norm2(queries[q] - state.points[j]) * inv_s2) * state.momenta[j];
    v[q] = acc;
  }
  return v;
}

HamiltonianRhs hamiltonian_rhs(const ShootingState& state) {
  state.validate();
  const std::size_t n = state.points.size();
  const double inv_s2 = 1.0 / (state.kernel_sigma * state.kernel_sigma);
  HamiltonianRhs rhs;
  rhs.ds.assign(n, Vec3{});
  rhs.dxi.assign(n, Vec3{});
  for (std::size_t i = 0; i < n; ++i) {
    rhs.ds[i] += state.momenta[i];  // K(s_i, s_i) = 1
    for (std::size_t j = i + 1; j < n; ++j) {
      Vec3 d = state.points[i] - state.points[j];
      double kij = std::exp(-norm2(d) * inv_s2);
      rhs.ds[i] += kij * state.momenta[j];
      rhs.ds[j] += kij * state.momenta[i];
      double c = 2.0 * inv_s2 * kij * dot(state.momenta[i], state.momenta[j]);
      rhs.dxi[i] += c * d;   // + (2/sigma^2) K_ij (xi_i.xi_j)(s_i - s_j)
      rhs.dxi[j] -= c * d;
    }
  }
  return rhs;
}

double hamiltonian(const ShootingState& state) {
  const std::size_t n = state.points.size();
  const double inv_s2 = 1.0 / (state.kernel_sigma * state.kernel_sigma);
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    h += 0.5 * dot(state.momenta[i], state.momenta[i]);
    for (std::size_t j = i + 1; j < n; ++j)
      h += std::exp(-norm2(state.points[i] - state.points[j]) * inv_s2) *
           dot(state.momenta[i], state.momenta[j]);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Flow (forward + stored trace for the adjoint)
// ---------------------------------------------------------------------------

namespace {

struct ControlState {
  std::vector<Vec3> s, xi;
};

struct StepTrace {
  ControlState start, mid;
  std::vector<Vec3> x_start, x_mid;
};

struct FlowTrace {
  std::vector<StepTrace> steps;
  ControlState final_state;
  std::vector<Vec3> x_final;
};

void check_finite(const std::vector<Vec3>& v, const char* what) {
  for (const Vec3& p : v)
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
      throw std::runtime_error(std::string("shoot_and_advect: non-finite ") + what +
                               " during integration");
}

// RHS of the coupled (controls, vertices) system.
void eval_rhs(const ControlState& c, const std::vector<Vec3>& x, double sigma,
              std::vector<Vec3>& ds, std::vector<Vec3>& dxi, std::vector<Vec3>& dx) {
  ShootingState st{c.s, c.xi, sigma};
  HamiltonianRhs rhs = hamiltonian_rhs(st);
  ds = std::move(rhs.ds);
  dxi = std::move(rhs.dxi);
  dx = velocity_at(x, st);
}

FlowTrace integrate(const std::vector<Vec3>& vertices, const ShootingState& state,
                    const ScalingGate& gate, const FlowConfig& flow) {
  if (flow.steps < 1) throw std::invalid_argument("shoot_and_advect: steps must be >= 1");
  if (gate.control_alpha.size() != state.points.size() ||
      gate.vertex_alpha.size() != vertices.size())
    throw std::invalid_argument("shoot_and_advect: gate sizes do not match state/mesh");

  FlowTrace trace;
  ControlState cur{state.points, state.momenta};
  // Momenta of fully gated control points are zeroed before integration.
  for (std::size_t i = 0; i < cur.xi.size(); ++i)
    if (gate.control_alpha[i] == 0.0) cur.xi[i] = Vec3{};
  std::vector<Vec3> x = vertices;

  const double h = flow.t_end / double(flow.steps);
  std::vector<Vec3> ds, dxi, dx;
  for (int step = 0; step < flow.steps; ++step) {
    StepTrace st;
    st.start = cur;
    st.x_start = x;

    eval_rhs(cur, x, state.kernel_sigma, ds, dxi, dx);
    ControlState mid;
    mid.s.resize(cur.s.size());
    mid.xi.resize(cur.s.size());
    std::vector<Vec3> xm(x.size());
    for (std::size_t i = 0; i < cur.s.size(); ++i) {
      mid.s[i] = cur.s[i] + 0.5 * h * ds[i];
      mid.xi[i] = cur.xi[i] + 0.5 * h * dxi[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i)
      xm[i] = x[i] + 0.5 * h * gate.vertex_alpha[i] * dx[i];

    st.mid = mid;
    st.x_mid = xm;

    eval_rhs(mid, xm, state.kernel_sigma, ds, dxi, dx);
    for (std::size_t i = 0; i < cur.s.size(); ++i) {
      cur.s[i] += h * ds[i];
      cur.xi[i] += h * dxi[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i)
      x[i] += h * gate.vertex_alpha[i] * dx[i];

    check_finite(cur.s, "control points");
    check_finite(cur.xi, "momenta");
    check_finite(x, "vertices");
    trace.steps.push_back(std::move(st));
  }
  trace.final_state = std::move(cur);
  trace.x_final = std::move(x);
  return trace;
}

// --- VJPs -------------------------------------------------------------------

// Accumulates the pullback of v(x) = sum_j K(x, s_j) xi_j given cotangent vbar.
void velocity_vjp(const std::vector<Vec3>& x, const ControlState& c, double sigma,
                  const std::vector<Vec3>& vbar, std::vector<Vec3>& xbar,
                  std::vector<Vec3>& sbar, std::vector<Vec3>& xibar) {
  const double inv_s2 = 1.0 / (sigma * sigma);
  for (std::size_t q = 0; q < x.size(); ++q) {
    const Vec3& vb = vbar[q];
    if (vb.x == 0.0 && vb.y == 0.0 && vb.z == 0.0) continue;
    for (std::size_t j = 0; j < c.s.size(); ++j) {
      Vec3 d = x[q] - c.s[j];
      double k = std::exp(-norm2(d) * inv_s2);
      xibar[j] += k * vb;
      double w = -2.0 * inv_s2 * k * dot(vb, c.xi[j]);
      xbar[q] += w * d;
      sbar[j] -= w * d;
    }
  }
}

// Accumulates the pullback of the Hamiltonian RHS given cotangents
// (abar for ds/dt, bbar for dxi/dt).
void rhs_vjp(const ControlState& c, double sigma, const std::vector<Vec3>& abar,
             const std::vector<Vec3>& bbar, std::vector<Vec3>& sbar, std::vector<Vec3>& xibar) {
  const std::size_t n = c.s.size();
  const double inv_s2 = 1.0 / (sigma * sigma);

  for (std::size_t i = 0; i < n; ++i) xibar[i] += abar[i];  // diagonal of K

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      Vec3 d = c.s[i] - c.s[j];
      double k = std::exp(-norm2(d) * inv_s2);

      // a_i += K_ij xi_j ; a_j += K_ij xi_i
      xibar[j] += k * abar[i];
      xibar[i] += k * abar[j];
      double wa = -2.0 * inv_s2 * k * (dot(abar[i], c.xi[j]) + dot(abar[j], c.xi[i]));
      sbar[i] += wa * d;
      sbar[j] -= wa * d;

      // b_i += c_ij d, b_j -= c_ij d with c_ij = (2/sigma^2) K_ij (xi_i.xi_j)
      double cij = 2.0 * inv_s2 * k * dot(c.xi[i], c.xi[j]);
      Vec3 bdiff = bbar[i] - bbar[j];
      double bd = dot(bdiff, d);

      // via xi in c_ij
      xibar[i] += (2.0 * inv_s2 * k * bd) * c.xi[j];
      xibar[j] += (2.0 * inv_s2 * k * bd) * c.xi[i];

      // via d directly and via K_ij inside c_ij
      Vec3 gs = cij * bdiff - (2.0 * inv_s2 * cij * bd) * d;
      sbar[i] += gs;
      sbar[j] -= gs;
    }
}

}  // namespace

FlowResult shoot_and_advect(const mesh::TriMesh& mesh, const ShootingState& state,
                            const ScalingGate& gate, const FlowConfig& flow) {
  state.validate();
  FlowTrace trace = integrate(mesh.vertices, state, gate, flow);

  FlowResult res;
  res.mesh = mesh;
  res.mesh.vertices = trace.x_final;
  res.control_path.reserve(trace.steps.size() + 1);
  for (const StepTrace& st : trace.steps) res.control_path.push_back(st.start.s);
  res.control_path.push_back(trace.final_state.s);
  return res;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

double misalignment_energy(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag, double eps) {
  double sum = 0.0;
  for (const Vec3& v : mesh.vertices) sum += volume::sample_trilinear(gmag, v);
  return -std::log(std::max(sum, eps));
}

DeformTerms total_loss(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag,
                       const DeformLossConfig& cfg) {
  DeformTerms t;
  t.misalign = misalignment_energy(mesh, gmag, cfg.energy_floor);
  mesh::MeshLossTerms m = mesh::mesh_losses(mesh);
  t.normal = m.normal;
  t.edge = m.edge;
  t.laplacian = m.laplacian;
  t.total = cfg.w_misalign * t.misalign + cfg.w_normal * t.normal + cfg.w_edge * t.edge +
            cfg.w_laplacian * t.laplacian;
  return t;
}

DeformTerms total_loss_grad(const mesh::TriMesh& mesh0, const ShootingState& state,
                            const ScalingGate& gate, const FlowConfig& flow,
                            const volume::VoxelGrid& gmag, const DeformLossConfig& cfg,
                            std::vector<Vec3>& grad_xi) {
  state.validate();
  FlowTrace trace = integrate(mesh0.vertices, state, gate, flow);

  mesh::TriMesh deformed = mesh0;
  deformed.vertices = trace.x_final;

  // Loss terms and dLoss/d(final vertices).
  DeformTerms terms;
  double gsum = 0.0;
  for (const Vec3& v : deformed.vertices) gsum += volume::sample_trilinear(gmag, v);
  terms.misalign = -std::log(std::max(gsum, cfg.energy_floor));

  std::vector<Vec3> xbar(deformed.vertices.size(), Vec3{});
  if (gsum > cfg.energy_floor) {
    const double scale = -cfg.w_misalign / gsum;
    for (std::size_t i = 0; i < deformed.vertices.size(); ++i)
      xbar[i] += scale * volume::sample_trilinear_gradient(gmag, deformed.vertices[i]);
  }

  std::vector<Vec3> mesh_grad;
  mesh::MeshLossTerms m = mesh::mesh_losses_grad(deformed, cfg.w_normal, cfg.w_edge,
                                                 cfg.w_laplacian, mesh_grad);
  terms.normal = m.normal;
  terms.edge = m.edge;
  terms.laplacian = m.laplacian;
  terms.total = cfg.w_misalign * terms.misalign + cfg.w_normal * terms.normal +
                cfg.w_edge * terms.edge + cfg.w_laplacian * terms.laplacian;
  for (std::size_t i = 0; i < xbar.size(); ++i) xbar[i] += mesh_grad[i];

  // Discrete adjoint of the midpoint steps, newest first.
  const std::size_t n = state.points.size();
  const double h = flow.t_end / double(flow.steps);
  std::vector<Vec3> sbar(n, Vec3{}), xibar(n, Vec3{});

  std::vector<Vec3> k2a(n), k2b(n), v2(xbar.size());
  std::vector<Vec3> sbar_m(n), xibar_m(n), xbar_m(xbar.size());
  for (int step = flow.steps - 1; step >= 0; --step) {
    const StepTrace& st = trace.steps[std::size_t(step)];

    // cotangents of the full-step RHS evaluation (at the midpoint state)
    for (std::size_t i = 0; i < n; ++i) {
      k2a[i] = h * sbar[i];
      k2b[i] = h * xibar[i];
    }
    for (std::size_t i = 0; i < v2.size(); ++i)
      v2[i] = (h * gate.vertex_alpha[i]) * xbar[i];

    std::fill(sbar_m.begin(), sbar_m.end(), Vec3{});
    std::fill(xibar_m.begin(), xibar_m.end(), Vec3{});
    std::fill(xbar_m.begin(), xbar_m.end(), Vec3{});
    velocity_vjp(st.x_mid, st.mid, state.kernel_sigma, v2, xbar_m, sbar_m, xibar_m);
    rhs_vjp(st.mid, state.kernel_sigma, k2a, k2b, sbar_m, xibar_m);

    // fold the midpoint state back onto the step start
    for (std::size_t i = 0; i < n; ++i) {
      sbar[i] += sbar_m[i];
      xibar[i] += xibar_m[i];
      k2a[i] = 0.5 * h * sbar_m[i];
      k2b[i] = 0.5 * h * xibar_m[i];
    }
    for (std::size_t i = 0; i < xbar.size(); ++i) {
      xbar[i] += xbar_m[i];
      v2[i] = (0.5 * h * gate.vertex_alpha[i]) * xbar_m[i];
    }
    velocity_vjp(st.x_start, st.start, state.kernel_sigma, v2, xbar, sbar, xibar);
    rhs_vjp(st.start, state.kernel_sigma, k2a, k2b, sbar, xibar);
  }

  // Gated momenta were zeroed before integration, so their gradient is zero.
  grad_xi.assign(n, Vec3{});
  for (std::size_t i = 0; i < n; ++i)
    if (gate.control_alpha[i] != 0.0) grad_xi[i] = xibar[i];

  return terms;
}

// ---------------------------------------------------------------------------
// Momentum optimization
// ---------------------------------------------------------------------------

DeformResult optimize_momenta(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag,
                              const phantom::InletOutletSpec* io, const FlowConfig& flow,
                              const DeformLossConfig& loss_cfg, const DeformConfig& opt,
                              std::uint64_t seed) {
  mesh.validate();
  if (opt.control_points < 1)
    throw std::invalid_argument("optimize_momenta: control_points must be >= 1");

  const int n_ctrl = std::min<int>(opt.control_points, int(mesh.vertices.size()));
  const int start = int(seed % std::uint64_t(mesh.vertices.size()));
  std::vector<int> ctrl_idx = farthest_point_sample(mesh.vertices, n_ctrl, start);

  ShootingState state;
  for (int i : ctrl_idx) state.points.push_back(mesh.vertices[i]);
  state.momenta.assign(state.points.size(), Vec3{});
  if (opt.kernel_sigma > 0.0) {
    state.kernel_sigma = opt.kernel_sigma;
  } else {
    Vec3 lo = mesh.vertices[0], hi = mesh.vertices[0];
    for (const Vec3& v : mesh.vertices) {
      lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
      hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
    state.kernel_sigma = std::max(1e-6, 0.05 * norm(hi - lo));
  }

  ScalingGate gate = io ? make_scaling_gate(*io, state.points, mesh.vertices)
                        : uniform_gate(state.points.size(), mesh.vertices.size());

  DeformResult res;
  res.state = state;
  res.mesh = mesh;
  if (opt.epochs == 0) return res;

  const std::size_t nv = state.points.size() * 3;
  std::vector<double> theta(nv, 0.0), m(nv, 0.0), v(nv, 0.0), prev_theta(nv, 0.0);
  double lr = opt.learning_rate;
  double best_total = std::numeric_limits<double>::infinity();
  std::vector<double> best_theta = theta;

  auto write_theta = [&](ShootingState& st, const std::vector<double>& t) {
    for (std::size_t i = 0; i < st.momenta.size(); ++i)
      st.momenta[i] = {t[3 * i], t[3 * i + 1], t[3 * i + 2]};
  };

  std::vector<Vec3> grad;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    write_theta(state, theta);
    DeformTerms terms;
    bool ok = true;
    try {
      terms = total_loss_grad(mesh, state, gate, flow, gmag, loss_cfg, grad);
      ok = std::isfinite(terms.total);
    } catch (const std::runtime_error&) {
      ok = false;  // non-finite state during integration
    }
    if (!ok) {
      // backtrack: undo the last update and halve the step
      theta = prev_theta;
      lr *= 0.5;
      if (lr < 1e-12)
        throw std::runtime_error("optimize_momenta: loss stayed non-finite after backtracking");
      write_theta(state, theta);
      terms = total_loss_grad(mesh, state, gate, flow, gmag, loss_cfg, grad);
    }

    res.history.push_back(terms);
    if (terms.total < best_total) {
      best_total = terms.total;
      best_theta = theta;
    }

    prev_theta = theta;
    const double t = double(epoch + 1);
    const double bc1 = 1.0 - std::pow(opt.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(opt.adam_beta2, t);
    for (std::size_t i = 0; i < nv; ++i) {
      double gi = grad[i / 3][int(i % 3)];
      m[i] = opt.adam_beta1 * m[i] + (1.0 - opt.adam_beta1) * gi;
      v[i] = opt.adam_beta2 * v[i] + (1.0 - opt.adam_beta2) * gi * gi;
      theta[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt.adam_eps);
    }
  }

  write_theta(res.state, best_theta);
  // Zero gated momenta in the reported state to match the flow's behaviour.
  for (std::size_t i = 0; i < res.state.momenta.size(); ++i)
    if (gate.control_alpha[i] == 0.0) res.state.momenta[i] = Vec3{};
  FlowResult flowed = shoot_and_advect(mesh, res.state, gate, flow);
  res.mesh = std::move(flowed.mesh);
  return res;
}

// ---------------------------------------------------------------------------
// Chebyshev predictor
// ---------------------------------------------------------------------------

void ChebPredictorConfig::validate() const {
  if (order < 1) throw std::invalid_argument("ChebPredictorConfig: order must be >= 1");
  if (hidden < 1) throw std::invalid_argument("ChebPredictorConfig: hidden width must be >= 1");
}

std::size_t cheb_weight_count(const ChebPredictorConfig& cfg) {
  const std::size_t k = std::size_t(cfg.order), h = std::size_t(cfg.hidden);
  // block1: cheb(3->h), cheb(h->h), res(3->h); block2: cheb(h->h), cheb(h->3), res(h->3)
  return k * 3 * h + k * h * h + 3 * h + k * h * h + k * h * 3 + h * 3;
}

namespace {

// Feature matrix N x C stored row-major.
struct Feat {
  std::size_t n = 0, c = 0;
  std::vector<double> v;
  Feat() = default;
  Feat(std::size_t n_, std::size_t c_) : n(n_), c(c_), v(n_ * c_, 0.0) {}
  double& at(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double at(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

struct Graph {
  std::vector<std::vector<int>> nbr;
  std::vector<double> inv_sqrt_deg;
};

Graph build_graph(const mesh::TriMesh& mesh) {
  mesh::MeshTopology topo = mesh::build_topology(mesh);
  Graph g;
  g.nbr = topo.vertex_neighbors;
  g.inv_sqrt_deg.resize(mesh.vertices.size());
  for (std::size_t i = 0; i < g.nbr.size(); ++i) {
    if (g.nbr[i].empty())
      throw std::invalid_argument("cheb_predict_momenta: mesh graph has an isolated vertex");
    g.inv_sqrt_deg[i] = 1.0 / std::sqrt(double(g.nbr[i].size()));
  }
  // connectivity (BFS)
  std::vector<char> seen(g.nbr.size(), 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int w : g.nbr[u])
      if (!seen[w]) { seen[w] = 1; ++count; q.push(w); }
  }
  if (count != g.nbr.size())
    throw std::invalid_argument("cheb_predict_momenta: mesh graph is disconnected");
  return g;
}

// y = Ltilde x with Ltilde = L - I = -D^{-1/2} A D^{-1/2} (lambda_max = 2).
Feat apply_laplacian(const Graph& g, const Feat& x) {
  Feat y(x.n, x.c);
  for (std::size_t i = 0; i < x.n; ++i) {
    const double di = g.inv_sqrt_deg[i];
    for (int j : g.nbr[i]) {
      const double w = -di * g.inv_sqrt_deg[j];
      for (std::size_t ch = 0; ch < x.c; ++ch) y.at(i, ch) += w * x.at(std::size_t(j), ch);
    }
  }
  return y;
}

// Chebyshev convolution: out = sum_k T_k(Ltilde) X Theta_k.
Feat cheb_layer(const Graph& g, const Feat& x, const double* theta, int order, std::size_t cout) {
  Feat out(x.n, cout);
  Feat tk_prev, tk = x;
  for (int k = 0; k < order; ++k) {
    if (k == 1) {
      Feat t1 = apply_laplacian(g, x);
      tk_prev = std::move(tk);
      tk = std::move(t1);
    } else if (k >= 2) {
      Feat tnext = apply_laplacian(g, tk);
      for (std::size_t i = 0; i < tnext.v.size(); ++i)
        tnext.v[i] = 2.0 * tnext.v[i] - tk_prev.v[i];
      tk_prev = std::move(tk);
      tk = std::move(tnext);
    }
    const double* th = theta + std::size_t(k) * x.c * cout;
    for (std::size_t i = 0; i < x.n; ++i)
      for (std::size_t ci = 0; ci < x.c; ++ci) {
        const double xv = tk.at(i, ci);
        if (xv == 0.0) continue;
        for (std::size_t co = 0; co < cout; ++co) out.at(i, co) += xv * th[ci * cout + co];
      }
  }
  return out;
}

Feat pointwise_linear(const Feat& x, const double* theta, std::size_t cout) {
  Feat out(x.n, cout);
  for (std::size_t i = 0; i < x.n; ++i)
    for (std::size_t ci = 0; ci < x.c; ++ci) {
      const double xv = x.at(i, ci);
      if (xv == 0.0) continue;
      for (std::size_t co = 0; co < cout; ++co) out.at(i, co) += xv * theta[ci * cout + co];
    }
  return out;
}

void activate(Feat& x, bool identity) {
  if (identity) return;
  for (double& v : x.v) v = std::tanh(v);
}

}  // namespace

std::vector<Vec3> cheb_vertex_field(const mesh::TriMesh& mesh, const ChebPredictorConfig& cfg,
                                    const std::vector<double>& weights) {
  cfg.validate();
  mesh.validate();
  if (weights.size() != cheb_weight_count(cfg))
    throw std::invalid_argument("cheb_vertex_field: wrong weight count");
  Graph g = build_graph(mesh);

  const std::size_t n = mesh.vertices.size();
  const std::size_t k = std::size_t(cfg.order), hidden = std::size_t(cfg.hidden);
  Feat x(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    x.at(i, 0) = mesh.vertices[i].x;
    x.at(i, 1) = mesh.vertices[i].y;
    x.at(i, 2) = mesh.vertices[i].z;
  }

  const double* w = weights.data();
  const double* b1c1 = w;                      // k*3*hidden
  const double* b1c2 = b1c1 + k * 3 * hidden;  // k*hidden*hidden
  const double* b1r = b1c2 + k * hidden * hidden;  // 3*hidden
  const double* b2c1 = b1r + 3 * hidden;           // k*hidden*hidden
  const double* b2c2 = b2c1 + k * hidden * hidden;  // k*hidden*3
  const double* b2r = b2c2 + k * hidden * 3;        // hidden*3

  // block 1: cheb, act, cheb + residual projection
  Feat a = cheb_layer(g, x, b1c1, cfg.order, hidden);
  activate(a, cfg.identity_activation);
  Feat b = cheb_layer(g, a, b1c2, cfg.order, hidden);
  Feat r = pointwise_linear(x, b1r, hidden);
  for (std::size_t i = 0; i < b.v.size(); ++i) b.v[i] += r.v[i];

  // block 2
  Feat a2 = cheb_layer(g, b, b2c1, cfg.order, hidden);
  activate(a2, cfg.identity_activation);
  Feat out = cheb_layer(g, a2, b2c2, cfg.order, 3);
  Feat r2 = pointwise_linear(b, b2r, 3);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += r2.v[i];

  std::vector<Vec3> field(n);
  for (std::size_t i = 0; i < n; ++i) field[i] = {out.at(i, 0), out.at(i, 1), out.at(i, 2)};
  return field;
}

std::vector<Vec3> cheb_predict_momenta(const mesh::TriMesh& mesh, const ChebPredictorConfig& cfg,
                                       const std::vector<double>& weights,
                                       const std::vector<int>& control_indices) {
  std::vector<Vec3> field = cheb_vertex_field(mesh, cfg, weights);
  std::vector<Vec3> momenta;
  momenta.reserve(control_indices.size());
  for (int i : control_indices) {
    if (i < 0 || i >= int(field.size()))
      throw std::invalid_argument("cheb_predict_momenta: control index out of range");
    momenta.push_back(field[std::size_t(i)]);
  }
  return momenta;
}

}  // namespace vf::lddmm
