#include "vesselforge/logbseg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace vf::seg {

// ---------------------------------------------------------------------------
// LoG kernels
// ---------------------------------------------------------------------------

void LoGKernelSpec::validate() const {
  if (scales.empty()) throw std::invalid_argument("LoGKernelSpec: needs at least one scale");
  for (auto [size, sigma] : scales) {
    if (size < 3 || size % 2 == 0)
      throw std::invalid_argument("LoGKernelSpec: sizes must be odd and >= 3");
    if (!(sigma > 0.0)) throw std::invalid_argument("LoGKernelSpec: sigma must be > 0");
  }
}

double gaussian_sample(double x, double y, double z, double sigma) {
  double r2 = x * x + y * y + z * z;
  return std::exp(-r2 / (2.0 * sigma * sigma)) / (2.0 * M_PI * sigma * sigma);
}

double log_sample(double x, double y, double z, double sigma) {
  double r2 = x * x + y * y + z * z;
  double s2 = sigma * sigma;
  return (r2 - 2.0 * s2) / (s2 * s2) * std::exp(-r2 / (2.0 * s2));
}

namespace {

void check_kernel_args(int size, double sigma, const char* who) {
  if (size < 3 || size % 2 == 0)
    throw std::invalid_argument(std::string(who) + ": size must be odd and >= 3");
  if (!(sigma > 0.0)) throw std::invalid_argument(std::string(who) + ": sigma must be > 0");
}

}  // namespace

Kernel3 make_gaussian_kernel(int size, double sigma) {
  check_kernel_args(size, sigma, "make_gaussian_kernel");
  Kernel3 k;
  k.size = size;
  k.v.resize(std::size_t(size) * size * size);
  const int h = size / 2;
  double sum = 0.0;
  for (int z = -h; z <= h; ++z)
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x) {
        double v = gaussian_sample(x, y, z, sigma);
        k.at(x + h, y + h, z + h) = v;
        sum += v;
      }
  for (double& v : k.v) v /= sum;
  return k;
}

Kernel3 make_log_kernel(int size, double sigma) {
  check_kernel_args(size, sigma, "make_log_kernel");
  Kernel3 k;
  k.size = size;
  k.v.resize(std::size_t(size) * size * size);
  const int h = size / 2;
  double sum = 0.0;
  for (int z = -h; z <= h; ++z)
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x) {
        double v = log_sample(x, y, z, sigma);
        k.at(x + h, y + h, z + h) = v;
        sum += v;
      }
  const double mean = sum / double(k.v.size());
  for (double& v : k.v) v -= mean;
  return k;
}

Kernel3 make_log_kernel_dsigma(int size, double sigma) {
  check_kernel_args(size, sigma, "make_log_kernel_dsigma");
  Kernel3 k;
  k.size = size;
  k.v.resize(std::size_t(size) * size * size);
  const int h = size / 2;
  const double s2 = sigma * sigma;
  double sum = 0.0;
  for (int z = -h; z <= h; ++z)
    for (int y = -h; y <= h; ++y)
      for (int x = -h; x <= h; ++x) {
        double r2 = double(x * x + y * y + z * z);
        double e = std::exp(-r2 / (2.0 * s2));
        double d = e * (4.0 * (s2 - r2) / (s2 * s2 * sigma) +
                        r2 * (r2 - 2.0 * s2) / (s2 * s2 * s2 * sigma));
        k.at(x + h, y + h, z + h) = d;
        sum += d;
      }
  const double mean = sum / double(k.v.size());
  for (double& v : k.v) v -= mean;
  return k;
}

volume::VoxelGrid conv3d(const volume::VoxelGrid& grid, const Kernel3& kernel, int stride) {
  if (kernel.size < 1 || kernel.size % 2 == 0)
    throw std::invalid_argument("conv3d: kernel must be odd-sized");
  if (kernel.size > grid.dims[0] || kernel.size > grid.dims[1] || kernel.size > grid.dims[2])
    throw std::invalid_argument("conv3d: kernel larger than grid");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");

  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];
  const int h = kernel.size / 2;
  volume::VoxelGrid dense = grid;
  std::fill(dense.data.begin(), dense.data.end(), 0.0);

  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        for (int dz = -h; dz <= h; ++dz) {
          int zz = z + dz;
          if (zz < 0 || zz >= nz) continue;
          for (int dy = -h; dy <= h; ++dy) {
            int yy = y + dy;
            if (yy < 0 || yy >= ny) continue;
            const double* krow = &kernel.v[std::size_t(dz + h) * kernel.size * kernel.size +
                                           std::size_t(dy + h) * kernel.size];
            const double* grow = &grid.data[grid.index(0, yy, zz)];
            int x0 = std::max(0, x - h), x1 = std::min(nx - 1, x + h);
            for (int xx = x0; xx <= x1; ++xx) acc += krow[xx - x + h] * grow[xx];
          }
        }
        dense.at(x, y, z) = acc;
      }

  if (stride == 1) return dense;
  volume::VoxelGrid out;
  out.dims = {(nx - 1) / stride + 1, (ny - 1) / stride + 1, (nz - 1) / stride + 1};
  out.spacing = {grid.spacing[0] * stride, grid.spacing[1] * stride, grid.spacing[2] * stride};
  out.origin = grid.origin;
  out.data.resize(std::size_t(out.dims[0]) * out.dims[1] * out.dims[2]);
  for (int z = 0; z < out.dims[2]; ++z)
    for (int y = 0; y < out.dims[1]; ++y)
      for (int x = 0; x < out.dims[0]; ++x)
        out.at(x, y, z) = dense.at(x * stride, y * stride, z * stride);
  return out;
}

// ---------------------------------------------------------------------------
// Bayesian primitives
// ---------------------------------------------------------------------------

double kl_gaussian(double mu, double var) {
  if (!(var > 0.0)) throw std::invalid_argument("kl_gaussian: variance must be > 0");
  return 0.5 * (mu * mu + var - 1.0 - std::log(var));
}

std::vector<double> sample_weights(const std::vector<double>& mu,
                                   const std::vector<double>& logvar, std::uint64_t seed) {
  if (mu.size() != logvar.size())
    throw std::invalid_argument("sample_weights: mu/logvar size mismatch");
  Rng rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w(mu.size());
  for (std::size_t i = 0; i < mu.size(); ++i)
    w[i] = mu[i] + std::exp(0.5 * logvar[i]) * normal(rng);
  return w;
}

// ---------------------------------------------------------------------------
// Tensor primitives
// ---------------------------------------------------------------------------

namespace {

// Dense 3x3x3 same-padding cross-correlation, row-blocked so each input row
// is reused across all output channels.
void conv3_forward(const Tensor& in, const double* W, const double* bias, Tensor& out) {
  const int nx = in.nx, ny = in.ny, nz = in.nz, ci_n = in.c, co_n = out.c;
  std::vector<double> rowacc(std::size_t(co_n) * nx);
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      std::fill(rowacc.begin(), rowacc.end(), 0.0);
      for (int ci = 0; ci < ci_n; ++ci) {
        const double* chan = in.channel(ci);
        for (int dz = -1; dz <= 1; ++dz) {
          int zz = z + dz;
          if (zz < 0 || zz >= nz) continue;
          for (int dy = -1; dy <= 1; ++dy) {
            int yy = y + dy;
            if (yy < 0 || yy >= ny) continue;
            const double* src = chan + (std::size_t(zz) * ny + yy) * nx;
            for (int co = 0; co < co_n; ++co) {
              const double* w =
                  W + ((std::size_t(co) * ci_n + ci) * 27 + std::size_t(dz + 1) * 9 +
                       std::size_t(dy + 1) * 3);
              double* acc = rowacc.data() + std::size_t(co) * nx;
              const double w0 = w[0], w1 = w[1], w2 = w[2];
              acc[0] += w1 * src[0] + w2 * src[1];
              for (int x = 1; x < nx - 1; ++x)
                acc[x] += w0 * src[x - 1] + w1 * src[x] + w2 * src[x + 1];
              acc[nx - 1] += w0 * src[nx - 2] + w1 * src[nx - 1];
            }
          }
        }
      }
      for (int co = 0; co < co_n; ++co) {
        double* dst = out.channel(co) + (std::size_t(z) * ny + y) * nx;
        const double* acc = rowacc.data() + std::size_t(co) * nx;
        const double b = bias ? bias[co] : 0.0;
        for (int x = 0; x < nx; ++x) dst[x] = acc[x] + b;
      }
    }
}

// din += correlation of dout with the flipped kernel (transposed channels).
void conv3_backward_input(const Tensor& dout, const double* W, int ci_n, Tensor& din) {
  const int co_n = dout.c;
  // Build flipped/transposed weights, then reuse the forward kernel.
  std::vector<double> wt(std::size_t(ci_n) * co_n * 27);
  for (int co = 0; co < co_n; ++co)
    for (int ci = 0; ci < ci_n; ++ci)
      for (int d = 0; d < 27; ++d)
        wt[(std::size_t(ci) * co_n + co) * 27 + (26 - d)] =
            W[(std::size_t(co) * ci_n + ci) * 27 + d];
  Tensor tmp(ci_n, dout.nz, dout.ny, dout.nx);
  conv3_forward(dout, wt.data(), nullptr, tmp);
  for (std::size_t i = 0; i < din.v.size(); ++i) din.v[i] += tmp.v[i];
}

void conv3_backward_weights(const Tensor& dout, const Tensor& in, double* dW, double* dbias) {
  const int nx = in.nx, ny = in.ny, nz = in.nz, ci_n = in.c, co_n = dout.c;
  for (int co = 0; co < co_n; ++co) {
    const double* dchan = dout.channel(co);
    if (dbias) {
      double b = 0.0;
      for (std::size_t i = 0; i < dout.plane(); ++i) b += dchan[i];
      dbias[co] += b;
    }
    for (int ci = 0; ci < ci_n; ++ci) {
      const double* ichan = in.channel(ci);
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            double acc = 0.0;
            const int z0 = std::max(0, -dz), z1 = nz - 1 - std::max(0, dz);
            const int y0 = std::max(0, -dy), y1 = ny - 1 - std::max(0, dy);
            const int x0 = std::max(0, -dx), x1 = nx - 1 - std::max(0, dx);
            for (int z = z0; z <= z1; ++z)
              for (int y = y0; y <= y1; ++y) {
                const double* a = dchan + (std::size_t(z) * ny + y) * nx;
                const double* b = ichan + (std::size_t(z + dz) * ny + (y + dy)) * nx + dx;
                for (int x = x0; x <= x1; ++x) acc += a[x] * b[x];
              }
            dW[(std::size_t(co) * ci_n + ci) * 27 + std::size_t(dz + 1) * 9 +
               std::size_t(dy + 1) * 3 + (dx + 1)] += acc;
          }
    }
  }
}

void conv1x1_forward(const Tensor& in, const double* W, double bias, Tensor& out) {
  std::fill(out.v.begin(), out.v.end(), bias);
  double* dst = out.channel(0);
  for (int ci = 0; ci < in.c; ++ci) {
    const double* src = in.channel(ci);
    const double w = W[ci];
    for (std::size_t i = 0; i < in.plane(); ++i) dst[i] += w * src[i];
  }
}

void relu_inplace(Tensor& t) {
  for (double& v : t.v) v = v > 0.0 ? v : 0.0;
}

// Propagates grad through a ReLU whose OUTPUT is `post` (post > 0 iff pre > 0).
void relu_backward(const Tensor& post, Tensor& grad) {
  for (std::size_t i = 0; i < post.v.size(); ++i)
    if (post.v[i] <= 0.0) grad.v[i] = 0.0;
}

void maxpool2_forward(const Tensor& in, Tensor& out, std::vector<int>& argmax) {
  const int nx = in.nx, ny = in.ny;
  out = Tensor(in.c, in.nz / 2, in.ny / 2, in.nx / 2);
  argmax.assign(out.v.size(), 0);
  std::size_t oi = 0;
  for (int c = 0; c < in.c; ++c) {
    const double* src = in.channel(c);
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y)
        for (int x = 0; x < out.nx; ++x, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int besti = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                int idx = int((std::size_t(2 * z + dz) * ny + (2 * y + dy)) * nx + (2 * x + dx));
                if (src[idx] > best) { best = src[idx]; besti = idx; }
              }
          out.v[oi] = best;
          argmax[oi] = besti;
        }
  }
}

void maxpool2_backward(const Tensor& dout, const std::vector<int>& argmax, Tensor& din) {
  std::size_t oi = 0;
  for (int c = 0; c < dout.c; ++c) {
    double* dst = din.channel(c);
    const double* src = dout.channel(c);
    const std::size_t oplane = dout.plane();
    for (std::size_t i = 0; i < oplane; ++i, ++oi) dst[argmax[oi]] += src[i];
  }
}

void upsample2_forward(const Tensor& in, Tensor& out) {
  out = Tensor(in.c, in.nz * 2, in.ny * 2, in.nx * 2);
  for (int c = 0; c < in.c; ++c) {
    const double* src = in.channel(c);
    double* dst = out.channel(c);
    for (int z = 0; z < out.nz; ++z)
      for (int y = 0; y < out.ny; ++y) {
        const double* srow = src + (std::size_t(z / 2) * in.ny + (y / 2)) * in.nx;
        double* drow = dst + (std::size_t(z) * out.ny + y) * out.nx;
        for (int x = 0; x < out.nx; ++x) drow[x] = srow[x / 2];
      }
  }
}

void upsample2_backward(const Tensor& dout, Tensor& din) {
  for (int c = 0; c < dout.c; ++c) {
    const double* src = dout.channel(c);
    double* dst = din.channel(c);
    for (int z = 0; z < dout.nz; ++z)
      for (int y = 0; y < dout.ny; ++y) {
        double* drow = dst + (std::size_t(z / 2) * din.ny + (y / 2)) * din.nx;
        const double* srow = src + (std::size_t(z) * dout.ny + y) * dout.nx;
        for (int x = 0; x < dout.nx; ++x) drow[x / 2] += srow[x];
      }
  }
}

// --- separable 1D convolutions with zero padding (single channel planes) ---

void conv1d_x(const double* in, double* out, int nx, int ny, int nz, const double* taps,
              int half) {
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      const double* src = in + (std::size_t(z) * ny + y) * nx;
      double* dst = out + (std::size_t(z) * ny + y) * nx;
      for (int x = 0; x < nx; ++x) {
        double acc = 0.0;
        int k0 = std::max(-half, -x), k1 = std::min(half, nx - 1 - x);
        for (int k = k0; k <= k1; ++k) acc += taps[k + half] * src[x + k];
        dst[x] = acc;
      }
    }
}

void conv1d_y(const double* in, double* out, int nx, int ny, int nz, const double* taps,
              int half) {
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      double* dst = out + (std::size_t(z) * ny + y) * nx;
      std::fill(dst, dst + nx, 0.0);
      int k0 = std::max(-half, -y), k1 = std::min(half, ny - 1 - y);
      for (int k = k0; k <= k1; ++k) {
        const double* src = in + (std::size_t(z) * ny + (y + k)) * nx;
        const double t = taps[k + half];
        for (int x = 0; x < nx; ++x) dst[x] += t * src[x];
      }
    }
}

void conv1d_z(const double* in, double* out, int nx, int ny, int nz, const double* taps,
              int half) {
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      double* dst = out + (std::size_t(z) * ny + y) * nx;
      std::fill(dst, dst + nx, 0.0);
      int k0 = std::max(-half, -z), k1 = std::min(half, nz - 1 - z);
      for (int k = k0; k <= k1; ++k) {
        const double* src = in + (std::size_t(z + k) * ny + y) * nx;
        const double t = taps[k + half];
        for (int x = 0; x < nx; ++x) dst[x] += t * src[x];
      }
    }
}

// Applies the DC-corrected LoG filter of (size, sigma) to a single-channel
// plane. The sampled kernel factors exactly into three separable terms plus
// a constant times the box sum:
//   (r^2 - 2 s^2)/s^4 e^{-r^2/2s^2} = sum_d u(d) g(e1) g(e2),
//   u(t) = (t^2 - 2 s^2/3)/s^4 g(t),  g(t) = e^{-t^2/2s^2}.
void log_filter_apply(const double* in, double* out, int nx, int ny, int nz, int size,
                      double sigma, std::vector<double>& scratch) {
  const int half = size / 2;
  const double s2 = sigma * sigma;
  std::vector<double> g(size), u(size), ones(size, 1.0);
  double sg = 0.0, su = 0.0;
  for (int t = -half; t <= half; ++t) {
    g[t + half] = std::exp(-double(t * t) / (2.0 * s2));
    u[t + half] = (double(t * t) - 2.0 * s2 / 3.0) / (s2 * s2) * g[t + half];
    sg += g[t + half];
    su += u[t + half];
  }
  const std::size_t n = std::size_t(nx) * ny * nz;
  // mean of the raw dense kernel (sum factors as 3 * Su * Sg^2)
  const double dc = 3.0 * su * sg * sg / (double(size) * size * size);

  scratch.resize(n * 4);
  double* A = scratch.data();          // conv_x(u)
  double* B = scratch.data() + n;      // conv_x(g)
  double* T = scratch.data() + 2 * n;  // temp
  double* S = scratch.data() + 3 * n;  // running sum

  conv1d_x(in, A, nx, ny, nz, u.data(), half);
  conv1d_x(in, B, nx, ny, nz, g.data(), half);

  conv1d_y(A, T, nx, ny, nz, g.data(), half);
  conv1d_z(T, S, nx, ny, nz, g.data(), half);  // term_x

  conv1d_y(B, T, nx, ny, nz, u.data(), half);
  conv1d_z(T, A, nx, ny, nz, g.data(), half);  // term_y (A reused)
  for (std::size_t i = 0; i < n; ++i) S[i] += A[i];

  conv1d_y(B, T, nx, ny, nz, g.data(), half);
  conv1d_z(T, A, nx, ny, nz, u.data(), half);  // term_z
  for (std::size_t i = 0; i < n; ++i) S[i] += A[i];

  // box sum for the DC correction
  conv1d_x(in, T, nx, ny, nz, ones.data(), half);
  conv1d_y(T, A, nx, ny, nz, ones.data(), half);
  conv1d_z(A, T, nx, ny, nz, ones.data(), half);
  for (std::size_t i = 0; i < n; ++i) out[i] = S[i] - dc * T[i];
}

void sigmoid_inplace(Tensor& t) {
  for (double& v : t.v) v = 1.0 / (1.0 + std::exp(-v));
}

}  // namespace

// ---------------------------------------------------------------------------
// SegNetwork
// ---------------------------------------------------------------------------

void SegNetConfig::validate() const {
  if (blocks < 1 || blocks > 5) throw std::invalid_argument("SegNetConfig: blocks must be 1..5");
  if (base_channels < 1) throw std::invalid_argument("SegNetConfig: base_channels must be >= 1");
  log_spec.validate();
}

namespace {

ParamTensor make_param(std::string name, std::vector<int> shape, bool bayesian) {
  ParamTensor p;
  p.name = std::move(name);
  p.shape = std::move(shape);
  p.bayesian = bayesian;
  std::size_t n = 1;
  for (int d : p.shape) n *= std::size_t(d);
  p.mu.assign(n, 0.0);
  if (bayesian) p.logvar.assign(n, 0.0);
  p.g_mu.assign(n, 0.0);
  if (bayesian) p.g_logvar.assign(n, 0.0);
  return p;
}

}  // namespace

SegNetwork::SegNetwork(const SegNetConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  const int B = cfg_.blocks, C = cfg_.base_channels;
  const int L = int(cfg_.log_spec.scales.size());

  auto ch = [&](int level) { return C << level; };

  for (int b = 0; b < B; ++b) {
    int ci = b == 0 ? 1 : ch(b - 1);
    params_.push_back(make_param("enc" + std::to_string(b) + ".conv1.w", {ch(b), ci, 3, 3, 3}, false));
    params_.push_back(make_param("enc" + std::to_string(b) + ".conv1.b", {ch(b)}, false));
    params_.push_back(make_param("enc" + std::to_string(b) + ".conv2.w", {ch(b), ch(b), 3, 3, 3}, false));
    params_.push_back(make_param("enc" + std::to_string(b) + ".conv2.b", {ch(b)}, false));
  }
  params_.push_back(make_param("mid.conv1.w", {ch(B), ch(B - 1), 3, 3, 3}, false));
  params_.push_back(make_param("mid.conv1.b", {ch(B)}, false));
  params_.push_back(make_param("mid.conv2.w", {ch(B), ch(B), 3, 3, 3}, false));
  params_.push_back(make_param("mid.conv2.b", {ch(B)}, false));
  for (int b = B - 1; b >= 0; --b) {
    params_.push_back(make_param("dec" + std::to_string(b) + ".up.w", {ch(b), ch(b + 1), 3, 3, 3}, false));
    params_.push_back(make_param("dec" + std::to_string(b) + ".up.b", {ch(b)}, false));
    params_.push_back(make_param("dec" + std::to_string(b) + ".conv1.w", {ch(b), 2 * ch(b), 3, 3, 3}, false));
    params_.push_back(make_param("dec" + std::to_string(b) + ".conv1.b", {ch(b)}, false));
    params_.push_back(make_param("dec" + std::to_string(b) + ".conv2.w", {ch(b), ch(b), 3, 3, 3}, false));
    params_.push_back(make_param("dec" + std::to_string(b) + ".conv2.b", {ch(b)}, false));
  }
  for (int l = 0; l < L; ++l) {
    params_.push_back(make_param("log" + std::to_string(l) + ".bayes.w", {1, 1, 3, 3, 3}, true));
    params_.push_back(make_param("log" + std::to_string(l) + ".bayes.b", {1}, true));
  }
  params_.push_back(make_param("fuse.w", {1, C + L, 1, 1, 1}, false));
  params_.push_back(make_param("fuse.b", {1}, false));

  // He-style init for the deterministic convolutions, LoG-shaped posterior
  // means for the Bayesian ones.
  Rng rng = make_rng(init_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (ParamTensor& p : params_) {
    if (p.shape.size() == 1) continue;  // biases start at zero
    if (p.bayesian) {
      std::fill(p.logvar.begin(), p.logvar.end(), cfg_.init_logvar);
      continue;  // means filled below
    }
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < p.shape.size(); ++d) fan_in *= std::size_t(p.shape[d]);
    double scale = std::sqrt(2.0 / double(fan_in));
    for (double& w : p.mu) w = scale * normal(rng);
  }
  for (int l = 0; l < L; ++l) {
    ParamTensor& w = param("log" + std::to_string(l) + ".bayes.w");
    ParamTensor& b = param("log" + std::to_string(l) + ".bayes.b");
    std::fill(b.logvar.begin(), b.logvar.end(), cfg_.init_logvar);
    if (cfg_.log_init_bayes_mean) {
      Kernel3 k = make_log_kernel(3, cfg_.log_spec.scales[l].second);
      std::copy(k.v.begin(), k.v.end(), w.mu.begin());
    } else {
      for (double& v : w.mu) v = 0.2 * normal(rng);
    }
  }

  log_sigmas_.clear();
  for (auto [size, sigma] : cfg_.log_spec.scales) log_sigmas_.push_back(sigma);
  g_log_sigmas_.assign(log_sigmas_.size(), 0.0);
}

ParamTensor& SegNetwork::param(const std::string& name) {
  for (ParamTensor& p : params_)
    if (p.name == name) return p;
  throw std::logic_error("SegNetwork: unknown parameter " + name);
}

void SegNetwork::sample_parameters(std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (ParamTensor& p : params_) {
    if (!p.bayesian) {
      p.w = p.mu;
      continue;
    }
    p.w.resize(p.count());
    p.eps.resize(p.count());
    for (std::size_t i = 0; i < p.count(); ++i) {
      p.eps[i] = normal(rng);
      p.w[i] = p.mu[i] + std::exp(0.5 * p.logvar[i]) * p.eps[i];
    }
  }
}

struct SegNetwork::Cache {
  Tensor input;
  std::vector<Tensor> enc1, enc2, pooled;
  std::vector<std::vector<int>> pool_argmax;
  Tensor mid1, mid2;
  std::vector<Tensor> up_in, up_out, cat, dec1, dec2;
  std::vector<Tensor> log_bank, log_bayes;
  Tensor fused;
};

void SegNetwork::forward_internal(const Tensor& in, Tensor& prob, Tensor& log_resp_raw,
                                  Cache* cache) {
  const int B = cfg_.blocks, C = cfg_.base_channels;
  const int L = int(cfg_.log_spec.scales.size());
  const int div = 1 << B;
  if (in.nx % div || in.ny % div || in.nz % div)
    throw std::invalid_argument("forward: cube dims must be divisible by 2^blocks");

  Cache local;
  Cache& cc = cache ? *cache : local;
  cc.input = in;
  cc.enc1.resize(B);
  cc.enc2.resize(B);
  cc.pooled.resize(B);
  cc.pool_argmax.resize(B);
  cc.up_in.resize(B);
  cc.up_out.resize(B);
  cc.cat.resize(B);
  cc.dec1.resize(B);
  cc.dec2.resize(B);
  cc.log_bank.resize(L);
  cc.log_bayes.resize(L);

  auto conv = [&](const Tensor& x, const std::string& name, int co) {
    Tensor y(co, x.nz, x.ny, x.nx);
    conv3_forward(x, param(name + ".w").w.data(), param(name + ".b").w.data(), y);
    return y;
  };

  // Regular stream: encoder
  const Tensor* cur = &cc.input;
  for (int b = 0; b < B; ++b) {
    cc.enc1[b] = conv(*cur, "enc" + std::to_string(b) + ".conv1", C << b);
    relu_inplace(cc.enc1[b]);
    cc.enc2[b] = conv(cc.enc1[b], "enc" + std::to_string(b) + ".conv2", C << b);
    relu_inplace(cc.enc2[b]);
    maxpool2_forward(cc.enc2[b], cc.pooled[b], cc.pool_argmax[b]);
    cur = &cc.pooled[b];
  }
  cc.mid1 = conv(*cur, "mid.conv1", C << B);
  relu_inplace(cc.mid1);
  cc.mid2 = conv(cc.mid1, "mid.conv2", C << B);
  relu_inplace(cc.mid2);

  // Decoder with skip concatenation
  cur = &cc.mid2;
  for (int b = B - 1; b >= 0; --b) {
    upsample2_forward(*cur, cc.up_in[b]);
    cc.up_out[b] = conv(cc.up_in[b], "dec" + std::to_string(b) + ".up", C << b);
    relu_inplace(cc.up_out[b]);
    // concat(skip, up)
    const Tensor& skip = cc.enc2[b];
    cc.cat[b] = Tensor(2 * (C << b), skip.nz, skip.ny, skip.nx);
    std::copy(skip.v.begin(), skip.v.end(), cc.cat[b].v.begin());
    std::copy(cc.up_out[b].v.begin(), cc.up_out[b].v.end(),
              cc.cat[b].v.begin() + skip.v.size());
    cc.dec1[b] = conv(cc.cat[b], "dec" + std::to_string(b) + ".conv1", C << b);
    relu_inplace(cc.dec1[b]);
    cc.dec2[b] = conv(cc.dec1[b], "dec" + std::to_string(b) + ".conv2", C << b);
    relu_inplace(cc.dec2[b]);
    cur = &cc.dec2[b];
  }

  // LoG stream
  std::vector<double> scratch;
  for (int l = 0; l < L; ++l) {
    cc.log_bank[l] = Tensor(1, in.nz, in.ny, in.nx);
    log_filter_apply(in.channel(0), cc.log_bank[l].channel(0), in.nx, in.ny, in.nz,
                     cfg_.log_spec.scales[l].first, log_sigmas_[l], scratch);
    cc.log_bayes[l] = Tensor(1, in.nz, in.ny, in.nx);
    conv3_forward(cc.log_bank[l], param("log" + std::to_string(l) + ".bayes.w").w.data(),
                  param("log" + std::to_string(l) + ".bayes.b").w.data(), cc.log_bayes[l]);
  }
  log_resp_raw = Tensor(1, in.nz, in.ny, in.nx);
  for (int l = 0; l < L; ++l)
    for (std::size_t i = 0; i < log_resp_raw.v.size(); ++i)
      log_resp_raw.v[i] += cc.log_bayes[l].v[i];

  // Fusion head: concat(features, per-scale responses) -> 1x1x1 conv -> sigmoid
  cc.fused = Tensor(C + L, in.nz, in.ny, in.nx);
  std::copy(cur->v.begin(), cur->v.end(), cc.fused.v.begin());
  for (int l = 0; l < L; ++l)
    std::copy(cc.log_bayes[l].v.begin(), cc.log_bayes[l].v.end(),
              cc.fused.v.begin() + (std::size_t(C) + l) * cc.fused.plane());

  prob = Tensor(1, in.nz, in.ny, in.nx);
  conv1x1_forward(cc.fused, param("fuse.w").w.data(), param("fuse.b").w[0], prob);
  sigmoid_inplace(prob);
}

namespace {

Tensor grid_to_tensor(const volume::VoxelGrid& g) {
  Tensor t(1, g.dims[2], g.dims[1], g.dims[0]);
  t.v = g.data;
  return t;
}

volume::VoxelGrid tensor_to_grid(const Tensor& t, const volume::VoxelGrid& like) {
  volume::VoxelGrid g = like;
  g.data.assign(t.v.begin(), t.v.begin() + t.plane());
  return g;
}

}  // namespace

volume::VoxelGrid SegNetwork::forward(const volume::VoxelGrid& cube, std::uint64_t seed) {
  sample_parameters(seed);
  return forward_sampled(cube);
}

volume::VoxelGrid SegNetwork::forward_sampled(const volume::VoxelGrid& cube) {
  Tensor in = grid_to_tensor(cube);
  Tensor prob, resp;
  forward_internal(in, prob, resp, nullptr);
  return tensor_to_grid(prob, cube);
}

volume::VoxelGrid SegNetwork::log_response(const volume::VoxelGrid& cube, std::uint64_t seed) {
  sample_parameters(seed);
  Tensor in = grid_to_tensor(cube);
  Tensor prob, resp;
  forward_internal(in, prob, resp, nullptr);
  sigmoid_inplace(resp);
  return tensor_to_grid(resp, cube);
}

// ---------------------------------------------------------------------------
// Objective + backward
// ---------------------------------------------------------------------------

namespace {

constexpr double kProbClamp = 1e-7;

struct SoftDice {
  double loss = 0.0;
  double num = 0.0, den = 0.0;  // 2*sum(go), sum(g^2)+sum(o^2)
};

SoftDice soft_dice(const double* pred, const double* label, std::size_t n) {
  SoftDice d;
  double go = 0.0, gg = 0.0, oo = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    go += label[i] * pred[i];
    gg += label[i] * label[i];
    oo += pred[i] * pred[i];
  }
  d.num = 2.0 * go;
  d.den = gg + oo;
  d.loss = d.den == 0.0 ? 0.0 : 1.0 - d.num / d.den;
  return d;
}

}  // namespace

double dice_loss(const volume::VoxelGrid& pred, const volume::VoxelGrid& label) {
  if (!pred.same_geometry(label)) throw std::invalid_argument("dice_loss: geometry mismatch");
  for (double v : label.data)
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("dice_loss: label must be binary");
  return soft_dice(pred.data.data(), label.data.data(), pred.data.size()).loss;
}

double SegNetwork::kl_sum() const {
  double kl = 0.0;
  for (const ParamTensor& p : params_) {
    if (!p.bayesian) continue;
    for (std::size_t i = 0; i < p.count(); ++i)
      kl += kl_gaussian(p.mu[i], std::exp(p.logvar[i]));
  }
  return kl;
}

ObjectiveTerms objective(const volume::VoxelGrid& pred, const volume::VoxelGrid& label,
                         const SegNetwork& net, double beta) {
  if (!pred.same_geometry(label)) throw std::invalid_argument("objective: geometry mismatch");
  ObjectiveTerms t;
  t.dice = soft_dice(pred.data.data(), label.data.data(), pred.data.size()).loss;
  double nll = 0.0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    double p = std::clamp(pred.data[i], kProbClamp, 1.0 - kProbClamp);
    nll -= label.data[i] * std::log(p) + (1.0 - label.data[i]) * std::log(1.0 - p);
  }
  t.nll = nll / double(pred.data.size());
  t.kl = beta * net.kl_sum();
  t.total = t.dice + t.nll + t.kl;
  return t;
}

ObjectiveTerms SegNetwork::objective_grad(const volume::VoxelGrid& cube,
                                          const volume::VoxelGrid& label, std::uint64_t seed,
                                          double beta) {
  if (!cube.same_geometry(label))
    throw std::invalid_argument("objective_grad: cube/label geometry mismatch");
  sample_parameters(seed);

  Tensor in = grid_to_tensor(cube);
  Cache cc;
  Tensor prob, resp;
  forward_internal(in, prob, resp, &cc);

  const std::size_t n = prob.plane();
  const double* g = label.data.data();

  ObjectiveTerms terms;
  SoftDice dice = soft_dice(prob.v.data(), g, n);
  terms.dice = dice.loss;
  double nll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = std::clamp(prob.v[i], kProbClamp, 1.0 - kProbClamp);
    nll -= g[i] * std::log(p) + (1.0 - g[i]) * std::log(1.0 - p);
  }
  terms.nll = nll / double(n);
  terms.kl = beta * kl_sum();
  terms.total = terms.dice + terms.nll + terms.kl;

  // dTotal/dprob
  Tensor dprob(1, prob.nz, prob.ny, prob.nx);
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    if (dice.den != 0.0)
      d += -(2.0 * g[i] * dice.den - dice.num * 2.0 * prob.v[i]) / (dice.den * dice.den);
    double p = prob.v[i];
    if (p > kProbClamp && p < 1.0 - kProbClamp)
      d += (-g[i] / p + (1.0 - g[i]) / (1.0 - p)) / double(n);
    dprob.v[i] = d;
  }

  // Through the sigmoid
  Tensor dlogit = dprob;
  for (std::size_t i = 0; i < n; ++i) dlogit.v[i] *= prob.v[i] * (1.0 - prob.v[i]);

  const int B = cfg_.blocks, C = cfg_.base_channels;
  const int L = int(cfg_.log_spec.scales.size());

  auto accum_grad = [&](ParamTensor& p, const std::vector<double>& dw) {
    if (!p.bayesian) {
      for (std::size_t i = 0; i < p.count(); ++i) p.g_mu[i] += dw[i];
      return;
    }
    for (std::size_t i = 0; i < p.count(); ++i) {
      p.g_mu[i] += dw[i];
      p.g_logvar[i] += dw[i] * p.eps[i] * 0.5 * std::exp(0.5 * p.logvar[i]);
    }
  };

  // Fusion head backward
  Tensor dfused(C + L, prob.nz, prob.ny, prob.nx);
  {
    ParamTensor& fw = param("fuse.w");
    ParamTensor& fb = param("fuse.b");
    std::vector<double> dW(fw.count(), 0.0), dB(1, 0.0);
    for (int ci = 0; ci < C + L; ++ci) {
      const double* f = cc.fused.channel(ci);
      double* dst = dfused.channel(ci);
      const double w = fw.w[ci];
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        dst[i] = w * dlogit.v[i];
        acc += f[i] * dlogit.v[i];
      }
      dW[ci] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) dB[0] += dlogit.v[i];
    accum_grad(fw, dW);
    accum_grad(fb, dB);
  }

  // LoG stream backward (Bayesian convs; the bank itself is fixed unless
  // sigma is learned)
  for (int l = 0; l < L; ++l) {
    ParamTensor& wl = param("log" + std::to_string(l) + ".bayes.w");
    ParamTensor& bl = param("log" + std::to_string(l) + ".bayes.b");
    Tensor dout(1, prob.nz, prob.ny, prob.nx);
    std::copy(dfused.channel(C + l), dfused.channel(C + l) + n, dout.v.begin());
    std::vector<double> dW(wl.count(), 0.0), dB(1, 0.0);
    conv3_backward_weights(dout, cc.log_bank[l], dW.data(), dB.data());
    accum_grad(wl, dW);
    accum_grad(bl, dB);
    if (cfg_.learn_log_sigma) {
      Tensor dbank(1, prob.nz, prob.ny, prob.nx);
      conv3_backward_input(dout, wl.w.data(), 1, dbank);
      // dL/dsigma = <dbank, (dK/dsigma) * input>
      Kernel3 dk = make_log_kernel_dsigma(cfg_.log_spec.scales[l].first, log_sigmas_[l]);
      volume::VoxelGrid dconv = conv3d(cube, dk);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += dbank.v[i] * dconv.data[i];
      g_log_sigmas_[l] += acc;
    }
  }

  // Regular stream backward
  Tensor dcur(C, prob.nz, prob.ny, prob.nx);
  std::copy(dfused.v.begin(), dfused.v.begin() + std::size_t(C) * n, dcur.v.begin());

  auto conv_backward = [&](const std::string& name, const Tensor& input, const Tensor& dout) {
    ParamTensor& w = param(name + ".w");
    ParamTensor& b = param(name + ".b");
    std::vector<double> dW(w.count(), 0.0), dB(b.count(), 0.0);
    conv3_backward_weights(dout, input, dW.data(), dB.data());
    Tensor din(input.c, input.nz, input.ny, input.nx);
    conv3_backward_input(dout, w.w.data(), input.c, din);
    accum_grad(w, dW);
    accum_grad(b, dB);
    return din;
  };

  for (int b = 0; b < B; ++b) {
    // reverse of decoder level b (executed for b = 0 first, the innermost)
    relu_backward(cc.dec2[b], dcur);
    Tensor ddec1 = conv_backward("dec" + std::to_string(b) + ".conv2", cc.dec1[b], dcur);
    relu_backward(cc.dec1[b], ddec1);
    Tensor dcat = conv_backward("dec" + std::to_string(b) + ".conv1", cc.cat[b], ddec1);

    // split concat into skip and up parts
    const std::size_t half = std::size_t(C << b) * cc.enc2[b].plane();
    Tensor dskip(C << b, cc.enc2[b].nz, cc.enc2[b].ny, cc.enc2[b].nx);
    Tensor dup(C << b, cc.up_out[b].nz, cc.up_out[b].ny, cc.up_out[b].nx);
    std::copy(dcat.v.begin(), dcat.v.begin() + half, dskip.v.begin());
    std::copy(dcat.v.begin() + half, dcat.v.end(), dup.v.begin());

    relu_backward(cc.up_out[b], dup);
    Tensor dupin = conv_backward("dec" + std::to_string(b) + ".up", cc.up_in[b], dup);
    Tensor dprev(cc.up_in[b].c, cc.up_in[b].nz / 2, cc.up_in[b].ny / 2, cc.up_in[b].nx / 2);
    upsample2_backward(dupin, dprev);

    // stash: gradient flowing into the deeper level = dprev; gradient into the
    // encoder skip accumulates with the pooled path handled after the loop.
    cc.up_in[b] = std::move(dprev);   // reuse slot as the downstream gradient
    cc.cat[b] = std::move(dskip);     // reuse slot as the skip gradient
    if (b + 1 <= B - 1) {
      dcur = std::move(cc.up_in[b]);
      // continue into the next decoder level
    }
  }

  // Bottleneck backward: gradient arriving from dec level B-1
  Tensor dmid2 = std::move(cc.up_in[B - 1]);
  relu_backward(cc.mid2, dmid2);
  Tensor dmid1 = conv_backward("mid.conv2", cc.mid1, dmid2);
  relu_backward(cc.mid1, dmid1);
  Tensor dpool = conv_backward("mid.conv1", cc.pooled[B - 1], dmid1);

  // Encoder backward, deepest block first
  for (int b = B - 1; b >= 0; --b) {
    Tensor denc2(cc.enc2[b].c, cc.enc2[b].nz, cc.enc2[b].ny, cc.enc2[b].nx);
    maxpool2_backward(dpool, cc.pool_argmax[b], denc2);
    // add the skip gradient
    for (std::size_t i = 0; i < denc2.v.size(); ++i) denc2.v[i] += cc.cat[b].v[i];
    relu_backward(cc.enc2[b], denc2);
    Tensor denc1 = conv_backward("enc" + std::to_string(b) + ".conv2", cc.enc1[b], denc2);
    relu_backward(cc.enc1[b], denc1);
    Tensor dinp = conv_backward("enc" + std::to_string(b) + ".conv1",
                                b == 0 ? cc.input : cc.pooled[b - 1], denc1);
    if (b > 0) dpool = std::move(dinp);
  }

  // KL gradient (analytic, data-independent)
  if (beta != 0.0) {
    for (ParamTensor& p : params_) {
      if (!p.bayesian) continue;
      for (std::size_t i = 0; i < p.count(); ++i) {
        p.g_mu[i] += beta * p.mu[i];
        p.g_logvar[i] += beta * 0.5 * (std::exp(p.logvar[i]) - 1.0);
      }
    }
  }

  return terms;
}

void SegNetwork::zero_grads() {
  for (ParamTensor& p : params_) {
    std::fill(p.g_mu.begin(), p.g_mu.end(), 0.0);
    std::fill(p.g_logvar.begin(), p.g_logvar.end(), 0.0);
  }
  std::fill(g_log_sigmas_.begin(), g_log_sigmas_.end(), 0.0);
}

std::vector<double> SegNetwork::flatten_trainable() const {
  std::vector<double> flat;
  for (const ParamTensor& p : params_) {
    flat.insert(flat.end(), p.mu.begin(), p.mu.end());
    flat.insert(flat.end(), p.logvar.begin(), p.logvar.end());
  }
  if (cfg_.learn_log_sigma) flat.insert(flat.end(), log_sigmas_.begin(), log_sigmas_.end());
  return flat;
}

void SegNetwork::unflatten_trainable(const std::vector<double>& flat) {
  std::size_t k = 0;
  for (ParamTensor& p : params_) {
    std::copy(flat.begin() + k, flat.begin() + k + p.count(), p.mu.begin());
    k += p.count();
    if (p.bayesian) {
      std::copy(flat.begin() + k, flat.begin() + k + p.count(), p.logvar.begin());
      k += p.count();
    }
  }
  if (cfg_.learn_log_sigma) {
    std::copy(flat.begin() + k, flat.begin() + k + log_sigmas_.size(), log_sigmas_.begin());
    k += log_sigmas_.size();
  }
  if (k != flat.size()) throw std::invalid_argument("unflatten_trainable: size mismatch");
}

std::vector<double> SegNetwork::flatten_gradients() const {
  std::vector<double> flat;
  for (const ParamTensor& p : params_) {
    flat.insert(flat.end(), p.g_mu.begin(), p.g_mu.end());
    flat.insert(flat.end(), p.g_logvar.begin(), p.g_logvar.end());
  }
  if (cfg_.learn_log_sigma) flat.insert(flat.end(), g_log_sigmas_.begin(), g_log_sigmas_.end());
  return flat;
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ofstream& o, const T& v) {
  o.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& i) {
  T v;
  i.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!i) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void SegNetwork::save_checkpoint(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("LOGB1", 5);
  put<std::uint32_t>(out, 1);  // version
  put<std::int32_t>(out, cfg_.blocks);
  put<std::int32_t>(out, cfg_.base_channels);
  put<std::int32_t>(out, int(cfg_.log_spec.scales.size()));
  for (auto [size, sigma] : cfg_.log_spec.scales) {
    put<std::int32_t>(out, size);
    put<double>(out, sigma);
  }
  put<std::uint8_t>(out, cfg_.learn_log_sigma ? 1 : 0);
  put<std::uint8_t>(out, cfg_.log_init_bayes_mean ? 1 : 0);
  put<double>(out, cfg_.init_logvar);

  put<std::uint32_t>(out, std::uint32_t(params_.size()));
  for (const ParamTensor& p : params_) {
    put<std::uint32_t>(out, std::uint32_t(p.name.size()));
    out.write(p.name.data(), std::streamsize(p.name.size()));
    put<std::uint8_t>(out, p.bayesian ? 1 : 0);
    put<std::uint64_t>(out, p.count());
    out.write(reinterpret_cast<const char*>(p.mu.data()),
              std::streamsize(p.count() * sizeof(double)));
    if (p.bayesian)
      out.write(reinterpret_cast<const char*>(p.logvar.data()),
                std::streamsize(p.count() * sizeof(double)));
  }
  put<std::uint32_t>(out, std::uint32_t(log_sigmas_.size()));
  out.write(reinterpret_cast<const char*>(log_sigmas_.data()),
            std::streamsize(log_sigmas_.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

SegNetwork SegNetwork::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[5];
  in.read(magic, 5);
  if (!in || std::memcmp(magic, "LOGB1", 5) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  auto version = get<std::uint32_t>(in);
  if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");

  SegNetConfig cfg;
  cfg.blocks = get<std::int32_t>(in);
  cfg.base_channels = get<std::int32_t>(in);
  int L = get<std::int32_t>(in);
  cfg.log_spec.scales.clear();
  for (int l = 0; l < L; ++l) {
    int size = get<std::int32_t>(in);
    double sigma = get<double>(in);
    cfg.log_spec.scales.emplace_back(size, sigma);
  }
  cfg.learn_log_sigma = get<std::uint8_t>(in) != 0;
  cfg.log_init_bayes_mean = get<std::uint8_t>(in) != 0;
  cfg.init_logvar = get<double>(in);

  SegNetwork net(cfg, 0);
  auto nparams = get<std::uint32_t>(in);
  if (nparams != net.params_.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (ParamTensor& p : net.params_) {
    auto nlen = get<std::uint32_t>(in);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    if (name != p.name) throw std::runtime_error("load_checkpoint: parameter order mismatch");
    bool bayes = get<std::uint8_t>(in) != 0;
    auto count = get<std::uint64_t>(in);
    if (bayes != p.bayesian || count != p.count())
      throw std::runtime_error("load_checkpoint: parameter shape mismatch for " + name);
    in.read(reinterpret_cast<char*>(p.mu.data()), std::streamsize(count * sizeof(double)));
    if (p.bayesian)
      in.read(reinterpret_cast<char*>(p.logvar.data()), std::streamsize(count * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated parameters");
  }
  auto nsig = get<std::uint32_t>(in);
  if (nsig != net.log_sigmas_.size()) throw std::runtime_error("load_checkpoint: sigma mismatch");
  in.read(reinterpret_cast<char*>(net.log_sigmas_.data()),
          std::streamsize(nsig * sizeof(double)));
  if (!in) throw std::runtime_error("load_checkpoint: truncated file");
  return net;
}

// ---------------------------------------------------------------------------
// Gate + training
// ---------------------------------------------------------------------------

double voxel_percentage(const volume::VoxelGrid& cube) {
  if (cube.data.empty()) throw std::invalid_argument("voxel_percentage: empty cube");
  std::size_t n = 0;
  for (double v : cube.data)
    if (v > 0.5) ++n;
  return double(n) / double(cube.data.size());
}

void BalancedGate::validate() const {
  if (!(mu > 0.0 && mu < 1.0)) throw std::invalid_argument("BalancedGate: mu must be in (0,1)");
  if (quota < 1 || 2 * quota != batch_size)
    throw std::invalid_argument("BalancedGate: batch size must be twice the per-group quota");
}

std::vector<int> assemble_balanced_batch(const std::vector<double>& pool_vp,
                                         const BalancedGate& gate, std::uint64_t seed) {
  gate.validate();
  std::vector<int> large, small;
  for (std::size_t i = 0; i < pool_vp.size(); ++i)
    (pool_vp[i] > gate.mu ? large : small).push_back(int(i));
  if (large.empty() || small.empty())
    throw std::runtime_error("assemble_balanced_batch: group imbalance (large=" +
                             std::to_string(large.size()) + ", small=" +
                             std::to_string(small.size()) + ")");

  Rng rng = make_rng(seed);
  auto draw = [&](std::vector<int> group) {
    std::vector<int> picked;
    if (int(group.size()) >= gate.quota) {
      // partial Fisher-Yates: without replacement
      for (int i = 0; i < gate.quota; ++i) {
        std::uniform_int_distribution<int> d(i, int(group.size()) - 1);
        std::swap(group[i], group[d(rng)]);
        picked.push_back(group[i]);
      }
    } else {
      std::uniform_int_distribution<int> d(0, int(group.size()) - 1);
      for (int i = 0; i < gate.quota; ++i) picked.push_back(group[d(rng)]);
    }
    return picked;
  };

  std::vector<int> batch = draw(large);
  std::vector<int> s = draw(small);
  batch.insert(batch.end(), s.begin(), s.end());
  return batch;
}

TrainResult train(SegNetwork& net, const std::vector<TrainSample>& dataset,
                  const TrainConfig& cfg, const BalancedGate& gate) {
  if (dataset.size() < 4) throw std::invalid_argument("train: needs >= 4 training volumes");
  gate.validate();

  TrainResult result;
  // V_p per cube from the LoG-stream response, computed once for the pool.
  // Seed streams: pool 3<<32, batches 2<<32, per-member passes epoch*64+k.
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    auto resp = net.log_response(dataset[i].image, derive_seed(cfg.seed, (3ull << 32) + i));
    result.pool_vp.push_back(voxel_percentage(resp));
  }

  double beta = cfg.beta;
  if (beta < 0.0)
    beta = 1.0 / (double(gate.batch_size) * double(dataset[0].image.data.size()));

  std::vector<double> theta = net.flatten_trainable();
  std::vector<double> m(theta.size(), 0.0), v(theta.size(), 0.0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto batch = assemble_balanced_batch(result.pool_vp, gate,
                                         derive_seed(cfg.seed, (2ull << 32) + epoch));
    net.zero_grads();
    EpochRecord rec;
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const TrainSample& s = dataset[batch[k]];
      auto terms = net.objective_grad(s.image, s.label,
                                      derive_seed(cfg.seed, std::uint64_t(epoch) * 64 + k), beta);
      rec.total += terms.total;
      rec.dice += terms.dice;
      rec.nll += terms.nll;
      rec.kl += terms.kl;
    }
    const double inv = 1.0 / double(batch.size());
    rec.total *= inv; rec.dice *= inv; rec.nll *= inv; rec.kl *= inv;
    if (!std::isfinite(rec.total))
      throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch));

    std::vector<double> grad = net.flatten_gradients();
    const double t = double(epoch + 1);
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, t);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double gi = grad[i] * inv;
      m[i] = cfg.adam_beta1 * m[i] + (1.0 - cfg.adam_beta1) * gi;
      v[i] = cfg.adam_beta2 * v[i] + (1.0 - cfg.adam_beta2) * gi * gi;
      theta[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }
    net.unflatten_trainable(theta);
    result.history.push_back(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

EnsembleResult predict_ensemble(SegNetwork& net, const volume::VoxelGrid& vol, int k,
                                std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("predict_ensemble: K must be >= 2");
  const int div = 1 << net.config().blocks;
  const bool direct = vol.dims[0] % div == 0 && vol.dims[1] % div == 0 && vol.dims[2] % div == 0;

  EnsembleResult out;
  out.mean = vol;
  std::fill(out.mean.data.begin(), out.mean.data.end(), 0.0);
  out.std = out.mean;  // accumulates sum of squares until the final pass

  for (int i = 0; i < k; ++i) {
    volume::VoxelGrid p = direct ? net.forward(vol, derive_seed(seed, i))
                                 : stitch_tiles(net, vol, 64, 16, derive_seed(seed, i));
    for (std::size_t j = 0; j < p.data.size(); ++j) {
      out.mean.data[j] += p.data[j];
      out.std.data[j] += p.data[j] * p.data[j];
    }
    volume::VoxelGrid bin = std::move(p);
    for (double& x : bin.data) x = x > 0.5 ? 1.0 : 0.0;
    out.binaries.push_back(std::move(bin));
  }
  const double kk = double(k);
  for (std::size_t j = 0; j < out.mean.data.size(); ++j) {
    out.mean.data[j] /= kk;
    double var = std::max(0.0, out.std.data[j] / kk - out.mean.data[j] * out.mean.data[j]);
    out.std.data[j] = std::sqrt(var);
  }
  return out;
}

volume::VoxelGrid stitch_tiles(SegNetwork& net, const volume::VoxelGrid& vol, int tile,
                               int overlap, std::uint64_t seed) {
  for (int a = 0; a < 3; ++a)
    if (vol.dims[a] < tile) throw std::invalid_argument("stitch_tiles: volume smaller than tile");
  if (overlap < 0 || overlap >= tile)
    throw std::invalid_argument("stitch_tiles: overlap must be in [0, tile)");
  const int div = 1 << net.config().blocks;
  if (tile % div) throw std::invalid_argument("stitch_tiles: tile must be divisible by 2^blocks");

  auto starts = [&](int dim) {
    std::vector<int> s;
    int step = tile - overlap;
    for (int x = 0; x + tile <= dim; x += step) s.push_back(x);
    if (s.empty() || s.back() + tile < dim) s.push_back(dim - tile);
    return s;
  };

  net.sample_parameters(seed);

  volume::VoxelGrid sum = vol, cnt = vol;
  std::fill(sum.data.begin(), sum.data.end(), 0.0);
  std::fill(cnt.data.begin(), cnt.data.end(), 0.0);

  volume::VoxelGrid tile_grid({tile, tile, tile}, vol.spacing, vol.origin, 0.0);
  for (int z0 : starts(vol.dims[2]))
    for (int y0 : starts(vol.dims[1]))
      for (int x0 : starts(vol.dims[0])) {
        for (int z = 0; z < tile; ++z)
          for (int y = 0; y < tile; ++y)
            for (int x = 0; x < tile; ++x)
              tile_grid.at(x, y, z) = vol.at(x0 + x, y0 + y, z0 + z);
        volume::VoxelGrid pred = net.forward_sampled(tile_grid);
        for (int z = 0; z < tile; ++z)
          for (int y = 0; y < tile; ++y)
            for (int x = 0; x < tile; ++x) {
              sum.at(x0 + x, y0 + y, z0 + z) += pred.at(x, y, z);
              cnt.at(x0 + x, y0 + y, z0 + z) += 1.0;
            }
      }

  for (std::size_t i = 0; i < sum.data.size(); ++i) sum.data[i] /= cnt.data[i];
  return sum;
}

}  // namespace vf::seg
