#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vesselforge/core.hpp"
#include "vesselforge/volume.hpp"

namespace vf::seg {

// ---------------------------------------------------------------------------
// LoG kernels
// ---------------------------------------------------------------------------

struct LoGKernelSpec {
  // (kernel size, sigma) per scale; prefixes of the default correspond to
  // the 1..5-layer hierarchy.
  std::vector<std::pair<int, double>> scales{{3, 0.5}, {5, 1.0}, {7, 1.5}, {9, 2.0}, {11, 2.5}};
  void validate() const;
};

/// Dense cubic kernel, x-fastest.
struct Kernel3 {
  int size = 0;
  std::vector<double> v;

  double& at(int x, int y, int z) {
    return v[std::size_t(x) + std::size_t(size) * (y + std::size_t(size) * z)];
  }
  double at(int x, int y, int z) const {
    return v[std::size_t(x) + std::size_t(size) * (y + std::size_t(size) * z)];
  }
};

/// 3D Gaussian at (x,y,z): exp(-(x^2+y^2+z^2)/(2 sigma^2)) / (2 pi sigma^2).
double gaussian_sample(double x, double y, double z, double sigma);
/// Laplacian-of-Gaussian at (x,y,z):
/// (x^2+y^2+z^2 - 2 sigma^2)/sigma^4 * exp(-(x^2+y^2+z^2)/(2 sigma^2)).
double log_sample(double x, double y, double z, double sigma);

/// Gaussian samples at integer offsets, renormalized to sum 1.
Kernel3 make_gaussian_kernel(int size, double sigma);
/// LoG samples at integer offsets, DC-corrected so entries sum to 0.
Kernel3 make_log_kernel(int size, double sigma);
/// d/dsigma of the DC-corrected LoG kernel (for learned-sigma training).
Kernel3 make_log_kernel_dsigma(int size, double sigma);

/// Dense cross-correlation with zero padding; output dims equal input dims
/// for stride 1, subsampled at stride multiples otherwise.
volume::VoxelGrid conv3d(const volume::VoxelGrid& grid, const Kernel3& kernel, int stride = 1);

// ---------------------------------------------------------------------------
// Bayesian parameters
// ---------------------------------------------------------------------------

/// KL( N(mu, var) || N(0,1) ) = 0.5 (mu^2 + var - 1 - ln var).
double kl_gaussian(double mu, double var);

/// Reparameterized sample w = mu + exp(logvar/2) * eps, eps ~ N(0,1).
std::vector<double> sample_weights(const std::vector<double>& mu,
                                   const std::vector<double>& logvar, std::uint64_t seed);

/// One named parameter tensor; Bayesian tensors carry a (mu, logvar) pair and
/// per-forward sample caches, deterministic ones just use mu.
struct ParamTensor {
  std::string name;
  std::vector<int> shape;
  bool bayesian = false;
  std::vector<double> mu;
  std::vector<double> logvar;

  // training state
  std::vector<double> g_mu, g_logvar;
  // per-forward sample cache (w == mu for deterministic tensors)
  std::vector<double> w, eps;

  std::size_t count() const { return mu.size(); }
};

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

struct SegNetConfig {
  int blocks = 2;            // encoder depth B in 1..5
  int base_channels = 4;
  LoGKernelSpec log_spec;
  bool learn_log_sigma = false;
  bool log_init_bayes_mean = true;
  double init_logvar = -6.0;

  void validate() const;
};

/// Dense volumetric tensor, channel-major, x-fastest.
struct Tensor {
  int c = 0, nz = 0, ny = 0, nx = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c_, int nz_, int ny_, int nx_)
      : c(c_), nz(nz_), ny(ny_), nx(nx_), v(std::size_t(c_) * nz_ * ny_ * nx_, 0.0) {}
  std::size_t plane() const { return std::size_t(nz) * ny * nx; }
  double* channel(int ch) { return v.data() + ch * plane(); }
  const double* channel(int ch) const { return v.data() + ch * plane(); }
};

struct ObjectiveTerms {
  double total = 0.0;
  double dice = 0.0;  // 1 - Dice
  double nll = 0.0;   // mean Bernoulli negative log-likelihood
  double kl = 0.0;    // beta-scaled KL
};

class SegNetwork {
 public:
  SegNetwork(const SegNetConfig& cfg, std::uint64_t init_seed);

  const SegNetConfig& config() const { return cfg_; }
  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  /// Trainable sigma per LoG scale (mirrors the spec when learning is on).
  std::vector<double>& log_sigmas() { return log_sigmas_; }

  /// Draws one posterior realization into the parameter caches.
  void sample_parameters(std::uint64_t seed);

  /// One posterior sample, full forward; cube dims must divide 2^blocks.
  volume::VoxelGrid forward(const volume::VoxelGrid& cube, std::uint64_t seed);
  /// LoG-stream response map sigmoid(sum of per-scale Bayesian conv outputs);
  /// this is the V_p source for the balanced gate.
  volume::VoxelGrid log_response(const volume::VoxelGrid& cube, std::uint64_t seed);

  /// Forward with the currently cached weight sample (used by tile stitching
  /// so every tile sees the same realization).
  volume::VoxelGrid forward_sampled(const volume::VoxelGrid& cube);

  /// Objective and parameter gradients for one (cube, label) pair under the
  /// weight sample drawn from `seed`. Gradients accumulate into g_mu/g_logvar.
  ObjectiveTerms objective_grad(const volume::VoxelGrid& cube, const volume::VoxelGrid& label,
                                std::uint64_t seed, double beta);

  void zero_grads();
  /// Flat views over all trainable scalars (mu, then logvar per Bayesian
  /// tensor, then LoG sigmas when learned); used by Adam and FD tests.
  std::vector<double> flatten_trainable() const;
  void unflatten_trainable(const std::vector<double>& flat);
  std::vector<double> flatten_gradients() const;

  double kl_sum() const;  // unscaled KL over all Bayesian weights

  void save_checkpoint(const std::string& path) const;
  static SegNetwork load_checkpoint(const std::string& path);

 private:
  SegNetConfig cfg_;
  std::vector<ParamTensor> params_;
  std::vector<double> log_sigmas_;
  std::vector<double> g_log_sigmas_;

  struct Cache;
  void forward_internal(const Tensor& in, Tensor& prob, Tensor& log_resp_raw, Cache* cache);
  ParamTensor& param(const std::string& name);

  friend struct SegNetTestPeer;
};

// ---------------------------------------------------------------------------
// Losses (public ops)
// ---------------------------------------------------------------------------

/// 1 - Dice with Dice = 2 sum(go) / (sum g^2 + sum o^2); empty-vs-empty -> 0.
double dice_loss(const volume::VoxelGrid& pred, const volume::VoxelGrid& label);

/// total = dice + nll + beta*KL(net); probabilities are clamped to
/// [1e-7, 1-1e-7] before the log.
ObjectiveTerms objective(const volume::VoxelGrid& pred, const volume::VoxelGrid& label,
                         const SegNetwork& net, double beta);

/// Fraction of voxels with value > 0.5.
double voxel_percentage(const volume::VoxelGrid& cube);

// ---------------------------------------------------------------------------
// Balanced gate and training
// ---------------------------------------------------------------------------

struct BalancedGate {
  double mu = 0.15;  // V_p threshold splitting "large vessel" vs "small branch"
  int quota = 5;     // cubes drawn per group
  int batch_size = 10;

  void validate() const;
};

/// Draws quota indices from each V_p group (without replacement when the
/// group is big enough, with replacement otherwise). Throws when a group is
/// empty, reporting both group counts.
std::vector<int> assemble_balanced_batch(const std::vector<double>& pool_vp,
                                         const BalancedGate& gate, std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 1e-3;  // paper: 1e-5 at clinical scale
  int epochs = 200;             // paper: 5000
  double beta = -1.0;           // <0 -> 1/(total voxels per batch)
  std::uint64_t seed = 0;
  // Adam moments, fixed per the paper's optimizer choice.
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainSample {
  volume::VoxelGrid image;
  volume::VoxelGrid label;
};

struct EpochRecord {
  double total = 0.0, dice = 0.0, nll = 0.0, kl = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> pool_vp;  // V_p per dataset cube, as grouped by the gate
};

/// Balanced-batch Adam training; deterministic for a fixed cfg.seed. Throws
/// (with the epoch index) if the loss goes non-finite.
TrainResult train(SegNetwork& net, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg, const BalancedGate& gate);

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct EnsembleResult {
  volume::VoxelGrid mean;
  volume::VoxelGrid std;
  std::vector<volume::VoxelGrid> binaries;
};

/// K posterior samples; mean/std per voxel and thresholded binaries.
EnsembleResult predict_ensemble(SegNetwork& net, const volume::VoxelGrid& vol, int k,
                                std::uint64_t seed);

/// Sliding-tile prediction with per-voxel averaging; one weight sample shared
/// by all tiles, so a single-tile volume equals forward(vol, seed).
volume::VoxelGrid stitch_tiles(SegNetwork& net, const volume::VoxelGrid& vol, int tile,
                               int overlap, std::uint64_t seed);

}  // namespace vf::seg
