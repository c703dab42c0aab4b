#pragma once

#include <cstdint>
#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/mesh.hpp"
#include "vesselforge/phantom.hpp"
#include "vesselforge/volume.hpp"

namespace vf::lddmm {

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// Control points + momenta + kernel width: the full parameterization of the
/// diffeomorphic transform.
struct ShootingState {
  std::vector<Vec3> points;   // s, mm
  std::vector<Vec3> momenta;  // xi
  double kernel_sigma = 5.0;  // sigma_K, mm

  void validate() const;
};

struct FlowConfig {
  double t_end = 1.0;
  int steps = 15;  // second-order Runge-Kutta (midpoint) steps
};

struct DeformLossConfig {
  double w_misalign = 1.0;
  double w_normal = 0.2;
  double w_edge = 0.01;
  double w_laplacian = 0.1;
  double energy_floor = 1e-8;  // epsilon inside the log
};

/// Cap-immobilization field: alpha = 0 on the caps, 1 on the free wall, a
/// truncated-Gaussian ramp between. Values are precomputed at the control
/// points and at the mesh's initial vertex positions.
struct ScalingGate {
  phantom::InletOutletSpec io;
  std::vector<double> control_alpha;
  std::vector<double> vertex_alpha;
};

/// Three-branch alpha of the closest cap (minimum over caps).
std::vector<double> scaling_field(const std::vector<Vec3>& points,
                                  const phantom::InletOutletSpec& io);

ScalingGate make_scaling_gate(const phantom::InletOutletSpec& io,
                              const std::vector<Vec3>& control_points,
                              const std::vector<Vec3>& vertices);
/// alpha = 1 everywhere (no constraints).
ScalingGate uniform_gate(std::size_t n_control, std::size_t n_vertices);

// ---------------------------------------------------------------------------
// Kernel and dynamics
// ---------------------------------------------------------------------------

/// Greedy farthest-point subsampling; deterministic for a fixed start.
std::vector<int> farthest_point_sample(const std::vector<Vec3>& points, int n,
                                       int start_index = 0);

/// exp(-|x-y|^2 / sigma^2).
double gauss_kernel(const Vec3& x, const Vec3& y, double sigma);
/// Dense N x N kernel matrix (row-major), symmetric with unit diagonal.
std::vector<double> kernel_matrix(const std::vector<Vec3>& points, double sigma);

/// v(x) = sum_i K(x, s_i) xi_i.
std::vector<Vec3> velocity_at(const std::vector<Vec3>& queries, const ShootingState& state);

struct HamiltonianRhs {
  std::vector<Vec3> ds;   // K(s,s) xi
  std::vector<Vec3> dxi;  // -1/2 grad_s (xi^T K xi)
};
HamiltonianRhs hamiltonian_rhs(const ShootingState& state);

/// H = 1/2 sum_ij K(s_i,s_j) xi_i . xi_j (conserved by the continuous flow).
double hamiltonian(const ShootingState& state);

// ---------------------------------------------------------------------------
// Flow
// ---------------------------------------------------------------------------

struct FlowResult {
  mesh::TriMesh mesh;                             // advected surface
  std::vector<std::vector<Vec3>> control_path;    // control positions per step
};

/// Integrates controls and vertices with midpoint RK2; momenta at alpha = 0
/// control points are zeroed first, and each vertex step is scaled by the
/// gate value at the vertex's initial position.
FlowResult shoot_and_advect(const mesh::TriMesh& mesh, const ShootingState& state,
                            const ScalingGate& gate, const FlowConfig& flow);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// -log(max(sum_i G(v_i), eps)) with G sampled trilinearly at the vertices.
double misalignment_energy(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag, double eps);

struct DeformTerms {
  double total = 0.0;
  double misalign = 0.0;
  double normal = 0.0;
  double edge = 0.0;
  double laplacian = 0.0;
};

DeformTerms total_loss(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag,
                       const DeformLossConfig& cfg);

/// Loss of the flowed surface plus d(total)/d(momenta) through the full RK2
/// flow and advection (discrete adjoint; matches central differences).
DeformTerms total_loss_grad(const mesh::TriMesh& mesh0, const ShootingState& state,
                            const ScalingGate& gate, const FlowConfig& flow,
                            const volume::VoxelGrid& gmag, const DeformLossConfig& cfg,
                            std::vector<Vec3>& grad_xi);

// ---------------------------------------------------------------------------
// Momentum optimization
// ---------------------------------------------------------------------------

struct DeformConfig {
  double learning_rate = 0.05;
  int epochs = 300;
  int control_points = 60;
  double kernel_sigma = -1.0;  // <= 0: 5% of the mesh bounding-box diagonal
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct DeformResult {
  mesh::TriMesh mesh;       // surface at the best-loss momenta
  ShootingState state;
  std::vector<DeformTerms> history;  // one record per epoch
};

/// Direct Adam optimization of the initial momenta (xi starts at zero);
/// control points are a farthest-point subsample of the mesh vertices. The
/// returned state is the best-total-loss iterate. On a non-finite loss the
/// last step is rolled back and the learning rate halved.
DeformResult optimize_momenta(const mesh::TriMesh& mesh, const volume::VoxelGrid& gmag,
                              const phantom::InletOutletSpec* io, const FlowConfig& flow,
                              const DeformLossConfig& loss_cfg, const DeformConfig& opt,
                              std::uint64_t seed);

// ---------------------------------------------------------------------------
// Chebyshev graph-convolution momentum predictor (optional parameterization)
// ---------------------------------------------------------------------------

struct ChebPredictorConfig {
  int order = 3;       // K_cheb
  int hidden = 16;     // channel width of both blocks
  bool identity_activation = false;  // default tanh between layers

  void validate() const;
};

/// Number of scalar weights the predictor expects.
std::size_t cheb_weight_count(const ChebPredictorConfig& cfg);

/// Per-vertex 3-vector field from two residual blocks of order-K spectral
/// convolutions on the scaled normalized graph Laplacian. Throws on a
/// disconnected mesh graph.
std::vector<Vec3> cheb_vertex_field(const mesh::TriMesh& mesh, const ChebPredictorConfig& cfg,
                                    const std::vector<double>& weights);

/// The field read at the control-point vertices.
std::vector<Vec3> cheb_predict_momenta(const mesh::TriMesh& mesh, const ChebPredictorConfig& cfg,
                                       const std::vector<double>& weights,
                                       const std::vector<int>& control_indices);

}  // namespace vf::lddmm
