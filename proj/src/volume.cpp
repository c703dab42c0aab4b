#include "vesselforge/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace vf {

std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vf

namespace vf::volume {

VoxelGrid::VoxelGrid(std::array<int, 3> d, std::array<double, 3> sp, std::array<double, 3> org,
                     double fill)
    : dims(d), spacing(sp), origin(org),
      data(std::size_t(d[0]) * std::size_t(d[1]) * std::size_t(d[2]), fill) {
  validate();
}

void VoxelGrid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0) throw std::invalid_argument("VoxelGrid: dims must be positive");
    if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
      throw std::invalid_argument("VoxelGrid: spacing must be strictly positive");
    if (!std::isfinite(origin[a])) throw std::invalid_argument("VoxelGrid: origin must be finite");
  }
  const std::size_t expect = std::size_t(dims[0]) * std::size_t(dims[1]) * std::size_t(dims[2]);
  if (data.size() != expect)
    throw std::invalid_argument("VoxelGrid: data length does not match dims");
  for (double v : data)
    if (!std::isfinite(v)) throw std::invalid_argument("VoxelGrid: non-finite value");
}

// ---------------------------------------------------------------------------
// NRRD subset
// ---------------------------------------------------------------------------

namespace {

static_assert(std::endian::native == std::endian::little,
              "NRRD payload I/O assumes a little-endian host");

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_volume(const VoxelGrid& grid, const std::string& path) {
  grid.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_volume: cannot open " + path + " for writing");

  out << "NRRD0004\n";
  out << "type: double\n";
  out << "dimension: 3\n";
  out << "sizes: " << grid.dims[0] << " " << grid.dims[1] << " " << grid.dims[2] << "\n";
  out << "space directions: (" << fmt_double(grid.spacing[0]) << ",0,0) (0,"
      << fmt_double(grid.spacing[1]) << ",0) (0,0," << fmt_double(grid.spacing[2]) << ")\n";
  out << "space origin: (" << fmt_double(grid.origin[0]) << "," << fmt_double(grid.origin[1])
      << "," << fmt_double(grid.origin[2]) << ")\n";
  out << "encoding: raw\n";
  out << "endian: little\n";
  out << "\n";
  out.write(reinterpret_cast<const char*>(grid.data.data()),
            static_cast<std::streamsize>(grid.data.size() * sizeof(double)));
  if (!out) throw std::runtime_error("save_volume: write failed for " + path);
}

namespace {

// Parses "(a,b,c)" with optional whitespace.
std::array<double, 3> parse_triple(const std::string& s) {
  std::array<double, 3> v{};
  std::string t = s;
  for (char& c : t)
    if (c == '(' || c == ')' || c == ',') c = ' ';
  std::istringstream is(t);
  if (!(is >> v[0] >> v[1] >> v[2]))
    throw std::runtime_error("NRRD: malformed vector '" + s + "'");
  return v;
}

}  // namespace

VoxelGrid load_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_volume: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("load_volume: empty file " + path);
  if (line == "NRRD0004\r") line = "NRRD0004";
  if (line != "NRRD0004") throw std::runtime_error("load_volume: not an NRRD0004 file: " + path);

  std::map<std::string, std::string> fields;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;  // header/payload separator
    auto colon = line.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("load_volume: malformed header line '" + line + "'");
    std::string key = line.substr(0, colon);
    std::string val = line.substr(colon + 1);
    while (!val.empty() && val.front() == ' ') val.erase(val.begin());
    if (fields.count(key))
      throw std::runtime_error("load_volume: duplicate header field '" + key + "'");
    fields[key] = val;
  }

  for (const char* req : {"type", "dimension", "sizes", "space directions", "space origin",
                          "encoding", "endian"})
    if (!fields.count(req))
      throw std::runtime_error(std::string("load_volume: missing header field '") + req + "'");

  if (fields["type"] != "double")
    throw std::runtime_error("load_volume: unsupported type '" + fields["type"] + "'");
  if (fields["dimension"] != "3")
    throw std::runtime_error("load_volume: unsupported dimension '" + fields["dimension"] + "'");
  if (fields["encoding"] != "raw")
    throw std::runtime_error("load_volume: unsupported encoding '" + fields["encoding"] + "'");
  if (fields["endian"] != "little")
    throw std::runtime_error("load_volume: unsupported endian '" + fields["endian"] + "'");

  VoxelGrid g;
  {
    std::istringstream is(fields["sizes"]);
    if (!(is >> g.dims[0] >> g.dims[1] >> g.dims[2]))
      throw std::runtime_error("load_volume: malformed sizes '" + fields["sizes"] + "'");
  }
  {
    std::istringstream is(fields["space directions"]);
    std::string t0, t1, t2;
    if (!(is >> t0 >> t1 >> t2))
      throw std::runtime_error("load_volume: malformed space directions");
    g.spacing[0] = parse_triple(t0)[0];
    g.spacing[1] = parse_triple(t1)[1];
    g.spacing[2] = parse_triple(t2)[2];
  }
  g.origin = parse_triple(fields["space origin"]);

  if (g.dims[0] <= 0 || g.dims[1] <= 0 || g.dims[2] <= 0)
    throw std::runtime_error("load_volume: non-positive sizes");
  const std::size_t n = std::size_t(g.dims[0]) * std::size_t(g.dims[1]) * std::size_t(g.dims[2]);
  g.data.resize(n);
  in.read(reinterpret_cast<char*>(g.data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (std::size_t(in.gcount()) != n * sizeof(double))
    throw std::runtime_error("load_volume: payload byte count mismatch in " + path);
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("load_volume: trailing bytes after payload in " + path);

  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

VoxelGrid clip_normalize(const VoxelGrid& grid, const PreprocessConfig& cfg) {
  if (!(cfg.clip_lo < cfg.clip_hi))
    throw std::invalid_argument("clip_normalize: clip_lo must be < clip_hi");
  VoxelGrid out = grid;
  for (double& v : out.data) v = std::clamp(v, cfg.clip_lo, cfg.clip_hi) / cfg.clip_hi;
  return out;
}

namespace {

// Catmull-Rom weights for fractional offset t in [0,1).
inline void catmull_rom_weights(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = 0.5 * (-t3 + 2.0 * t2 - t);
  w[1] = 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0);
  w[2] = 0.5 * (-3.0 * t3 + 4.0 * t2 + t);
  w[3] = 0.5 * (t3 - t2);
}

}  // namespace

VoxelGrid resample_cubic(const VoxelGrid& grid, double factor) {
  if (!(factor > 0.0)) throw std::invalid_argument("resample_cubic: factor must be > 0");
  std::array<int, 3> nd{};
  for (int a = 0; a < 3; ++a) {
    nd[a] = int(std::lround(grid.dims[a] * factor));
    if (nd[a] < 2) throw std::invalid_argument("resample_cubic: output dim would be < 2");
  }

  // Axis per axis: x, then y, then z. Intermediate buffers carry mixed dims.
  const int nx = grid.dims[0], ny = grid.dims[1], nz = grid.dims[2];

  // Pass 1: x. lines are (y,z) rows.
  std::vector<double> buf1(std::size_t(nd[0]) * ny * nz);
  {
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y) {
        const double* src = grid.data.data() + grid.index(0, y, z);
        double* dst = buf1.data() + (std::size_t(y) + std::size_t(ny) * z) * nd[0];
        for (int i = 0; i < nd[0]; ++i) {
          double u = double(i) / factor;
          int base = int(std::floor(u));
          double t = u - base, w[4];
          catmull_rom_weights(t, w);
          double acc = 0.0;
          for (int k = -1; k <= 2; ++k) acc += w[k + 1] * src[std::clamp(base + k, 0, nx - 1)];
          dst[i] = acc;
        }
      }
  }

  // Pass 2: y on buf1 (dims nd0 x ny x nz) -> buf2 (nd0 x nd1 x nz).
  std::vector<double> buf2(std::size_t(nd[0]) * nd[1] * nz);
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nd[0]; ++x) {
      const double* src = buf1.data() + std::size_t(ny) * nd[0] * z + x;
      double* dst = buf2.data() + std::size_t(nd[1]) * nd[0] * z + x;
      for (int i = 0; i < nd[1]; ++i) {
        double u = double(i) / factor;
        int base = int(std::floor(u));
        double t = u - base, w[4];
        catmull_rom_weights(t, w);
        double acc = 0.0;
        for (int k = -1; k <= 2; ++k)
          acc += w[k + 1] * src[std::size_t(std::clamp(base + k, 0, ny - 1)) * nd[0]];
        dst[std::size_t(i) * nd[0]] = acc;
      }
    }

  // Pass 3: z on buf2 -> final.
  VoxelGrid out;
  out.dims = nd;
  out.spacing = {grid.spacing[0] / factor, grid.spacing[1] / factor, grid.spacing[2] / factor};
  out.origin = grid.origin;
  out.data.resize(std::size_t(nd[0]) * nd[1] * nd[2]);
  const std::size_t plane = std::size_t(nd[0]) * nd[1];
  for (int y = 0; y < nd[1]; ++y)
    for (int x = 0; x < nd[0]; ++x) {
      const double* src = buf2.data() + std::size_t(y) * nd[0] + x;
      double* dst = out.data.data() + std::size_t(y) * nd[0] + x;
      for (int i = 0; i < nd[2]; ++i) {
        double u = double(i) / factor;
        int base = int(std::floor(u));
        double t = u - base, w[4];
        catmull_rom_weights(t, w);
        double acc = 0.0;
        for (int k = -1; k <= 2; ++k)
          acc += w[k + 1] * src[std::size_t(std::clamp(base + k, 0, nz - 1)) * plane];
        dst[std::size_t(i) * plane] = acc;
      }
    }
  return out;
}

VoxelGrid flip_axis(const VoxelGrid& grid, int axis) {
  VoxelGrid out = grid;
  const auto [nx, ny, nz] = std::array{grid.dims[0], grid.dims[1], grid.dims[2]};
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        int sx = axis == 0 ? nx - 1 - x : x;
        int sy = axis == 1 ? ny - 1 - y : y;
        int sz = axis == 2 ? nz - 1 - z : z;
        out.at(x, y, z) = grid.at(sx, sy, sz);
      }
  return out;
}

VoxelGrid rotate90(const VoxelGrid& grid, int axis, int quarter_turns) {
  int k = ((quarter_turns % 4) + 4) % 4;
  VoxelGrid cur = grid;
  for (int turn = 0; turn < k; ++turn) {
    const int nx = cur.dims[0], ny = cur.dims[1], nz = cur.dims[2];
    VoxelGrid next;
    next.origin = cur.origin;
    // Right-handed quarter turn about `axis`; the two in-plane dims swap.
    if (axis == 2) {
      next.dims = {ny, nx, nz};
      next.spacing = {cur.spacing[1], cur.spacing[0], cur.spacing[2]};
      next.data.resize(cur.data.size());
      for (int z = 0; z < nz; ++z)
        for (int y = 0; y < nx; ++y)
          for (int x = 0; x < ny; ++x)
            next.at(x, y, z) = cur.at(y, ny - 1 - x, z);
    } else if (axis == 1) {
      next.dims = {nz, ny, nx};
      next.spacing = {cur.spacing[2], cur.spacing[1], cur.spacing[0]};
      next.data.resize(cur.data.size());
      for (int z = 0; z < nx; ++z)
        for (int y = 0; y < ny; ++y)
          for (int x = 0; x < nz; ++x)
            next.at(x, y, z) = cur.at(nx - 1 - z, y, x);
    } else {
      next.dims = {nx, nz, ny};
      next.spacing = {cur.spacing[0], cur.spacing[2], cur.spacing[1]};
      next.data.resize(cur.data.size());
      for (int z = 0; z < ny; ++z)
        for (int y = 0; y < nz; ++y)
          for (int x = 0; x < nx; ++x)
            next.at(x, y, z) = cur.at(x, ny - 1 - z, y);
    }
    cur = std::move(next);
  }
  return cur;
}

CropAugmentResult random_crop_augment(const VoxelGrid& image, const VoxelGrid& label,
                                      const PreprocessConfig& cfg) {
  if (!image.same_geometry(label))
    throw std::invalid_argument("random_crop_augment: image/label geometry mismatch");
  for (int a = 0; a < 3; ++a)
    if (cfg.crop_dims[a] > image.dims[a])
      throw std::invalid_argument("random_crop_augment: crop larger than volume");

  Rng rng = make_rng(cfg.seed);
  std::array<int, 3> corner{};
  for (int a = 0; a < 3; ++a) {
    int span = image.dims[a] - cfg.crop_dims[a];
    corner[a] = span == 0 ? 0 : int(std::uniform_int_distribution<int>(0, span)(rng));
  }

  auto crop = [&](const VoxelGrid& g) {
    VoxelGrid c;
    c.dims = cfg.crop_dims;
    c.spacing = g.spacing;
    c.origin = {g.origin[0] + corner[0] * g.spacing[0], g.origin[1] + corner[1] * g.spacing[1],
                g.origin[2] + corner[2] * g.spacing[2]};
    c.data.resize(std::size_t(c.dims[0]) * c.dims[1] * c.dims[2]);
    for (int z = 0; z < c.dims[2]; ++z)
      for (int y = 0; y < c.dims[1]; ++y)
        for (int x = 0; x < c.dims[0]; ++x)
          c.at(x, y, z) = g.at(x + corner[0], y + corner[1], z + corner[2]);
    return c;
  };

  CropAugmentResult r{crop(image), crop(label)};

  auto coin = [&](bool enabled) {
    // Draw even when disabled so toggling one flag does not reshuffle the rest.
    bool b = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    return enabled && b;
  };
  for (int a = 0; a < 3; ++a) {
    bool enabled = a == 0 ? cfg.flip_x : (a == 1 ? cfg.flip_y : cfg.flip_z);
    if (coin(enabled)) {
      r.image = flip_axis(r.image, a);
      r.label = flip_axis(r.label, a);
    }
  }
  int axis = std::uniform_int_distribution<int>(0, 2)(rng);
  int turns = std::uniform_int_distribution<int>(0, 3)(rng);
  if (cfg.rotate90 && turns > 0) {
    r.image = rotate90(r.image, axis, turns);
    r.label = rotate90(r.label, axis, turns);
  }
  return r;
}

VoxelGrid mask_background(const VoxelGrid& image, const VoxelGrid& label) {
  if (!image.same_geometry(label))
    throw std::invalid_argument("mask_background: geometry mismatch");
  VoxelGrid out = image;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    if (label.data[i] != 1.0) out.data[i] = 0.0;
  return out;
}

namespace {

// d/daxis with central differences inside, one-sided at the borders.
inline double diff_axis(const VoxelGrid& g, int x, int y, int z, int axis) {
  const int n = g.dims[axis];
  const double h = g.spacing[axis];
  auto shifted = [&](int d) {
    int c[3] = {x, y, z};
    c[axis] += d;
    return g.at(c[0], c[1], c[2]);
  };
  int c = axis == 0 ? x : (axis == 1 ? y : z);
  if (c == 0) return (shifted(1) - shifted(0)) / h;
  if (c == n - 1) return (shifted(0) - shifted(-1)) / h;
  return (shifted(1) - shifted(-1)) / (2.0 * h);
}

}  // namespace

GradientField gradient_magnitude_field(const VoxelGrid& image) {
  if (image.dims[0] < 3 || image.dims[1] < 3 || image.dims[2] < 3)
    throw std::invalid_argument("gradient_magnitude_field: dims must be >= 3 per axis");
  GradientField f;
  f.magnitude = image;
  for (int z = 0; z < image.dims[2]; ++z)
    for (int y = 0; y < image.dims[1]; ++y)
      for (int x = 0; x < image.dims[0]; ++x) {
        double gx = diff_axis(image, x, y, z, 0);
        double gy = diff_axis(image, x, y, z, 1);
        double gz = diff_axis(image, x, y, z, 2);
        f.magnitude.at(x, y, z) = std::sqrt(gx * gx + gy * gy + gz * gz);
      }
  f.gradient.dims = image.dims;
  f.gradient.spacing = image.spacing;
  f.gradient.origin = image.origin;
  f.gradient.data.resize(image.size());
  for (int z = 0; z < image.dims[2]; ++z)
    for (int y = 0; y < image.dims[1]; ++y)
      for (int x = 0; x < image.dims[0]; ++x)
        f.gradient.at(x, y, z) = {diff_axis(f.magnitude, x, y, z, 0),
                                  diff_axis(f.magnitude, x, y, z, 1),
                                  diff_axis(f.magnitude, x, y, z, 2)};
  return f;
}

namespace {

struct TrilinearCell {
  int i[3];       // lower corner, clamped to [0, n-2] (or 0 for n == 1)
  double t[3];    // fraction in [0,1]
  bool interior[3];  // false where the query clamped to the border
};

template <typename GridT>
TrilinearCell locate(const GridT& g, const Vec3& p) {
  TrilinearCell c{};
  for (int a = 0; a < 3; ++a) {
    double u = (p[a] - g.origin[a]) / g.spacing[a];
    const int n = g.dims[a];
    if (n == 1) {
      c.i[a] = 0; c.t[a] = 0.0; c.interior[a] = false;
      continue;
    }
    c.interior[a] = (u > 0.0 && u < double(n - 1));
    u = std::clamp(u, 0.0, double(n - 1));
    int base = std::min(int(std::floor(u)), n - 2);
    c.i[a] = base;
    c.t[a] = u - base;
  }
  return c;
}

}  // namespace

double sample_trilinear(const VoxelGrid& field, const Vec3& p) {
  const TrilinearCell c = locate(field, p);
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? c.t[0] : 1 - c.t[0]) * (dy ? c.t[1] : 1 - c.t[1]) *
                   (dz ? c.t[2] : 1 - c.t[2]);
        if (w == 0.0) continue;
        acc += w * field.at(std::min(c.i[0] + dx, field.dims[0] - 1),
                            std::min(c.i[1] + dy, field.dims[1] - 1),
                            std::min(c.i[2] + dz, field.dims[2] - 1));
      }
  return acc;
}

Vec3 sample_trilinear(const VectorGrid& field, const Vec3& p) {
  const TrilinearCell c = locate(field, p);
  Vec3 acc{};
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? c.t[0] : 1 - c.t[0]) * (dy ? c.t[1] : 1 - c.t[1]) *
                   (dz ? c.t[2] : 1 - c.t[2]);
        if (w == 0.0) continue;
        acc += w * field.at(std::min(c.i[0] + dx, field.dims[0] - 1),
                            std::min(c.i[1] + dy, field.dims[1] - 1),
                            std::min(c.i[2] + dz, field.dims[2] - 1));
      }
  return acc;
}

Vec3 sample_trilinear_gradient(const VoxelGrid& field, const Vec3& p) {
  const TrilinearCell c = locate(field, p);
  auto val = [&](int dx, int dy, int dz) {
    return field.at(std::min(c.i[0] + dx, field.dims[0] - 1),
                    std::min(c.i[1] + dy, field.dims[1] - 1),
                    std::min(c.i[2] + dz, field.dims[2] - 1));
  };
  Vec3 g{};
  const double tx = c.t[0], ty = c.t[1], tz = c.t[2];
  // d/dx: difference along x of the bilinear interpolant in (y,z)
  g.x = ((val(1, 0, 0) - val(0, 0, 0)) * (1 - ty) * (1 - tz) +
         (val(1, 1, 0) - val(0, 1, 0)) * ty * (1 - tz) +
         (val(1, 0, 1) - val(0, 0, 1)) * (1 - ty) * tz +
         (val(1, 1, 1) - val(0, 1, 1)) * ty * tz) / field.spacing[0];
  g.y = ((val(0, 1, 0) - val(0, 0, 0)) * (1 - tx) * (1 - tz) +
         (val(1, 1, 0) - val(1, 0, 0)) * tx * (1 - tz) +
         (val(0, 1, 1) - val(0, 0, 1)) * (1 - tx) * tz +
         (val(1, 1, 1) - val(1, 0, 1)) * tx * tz) / field.spacing[1];
  g.z = ((val(0, 0, 1) - val(0, 0, 0)) * (1 - tx) * (1 - ty) +
         (val(1, 0, 1) - val(1, 0, 0)) * tx * (1 - ty) +
         (val(0, 1, 1) - val(0, 1, 0)) * (1 - tx) * ty +
         (val(1, 1, 1) - val(1, 1, 0)) * tx * ty) / field.spacing[2];
  if (!c.interior[0]) g.x = 0.0;
  if (!c.interior[1]) g.y = 0.0;
  if (!c.interior[2]) g.z = 0.0;
  return g;
}

}  // namespace vf::volume
