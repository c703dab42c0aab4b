#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vesselforge/core.hpp"

namespace vf::volume {

/// Axis-aligned scalar field. Voxel (x,y,z) sits at physical position
/// origin + (x*sx, y*sy, z*sz); data is x-fastest.
struct VoxelGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm, center of voxel (0,0,0)
  std::vector<double> data;

  VoxelGrid() = default;
  VoxelGrid(std::array<int, 3> d, std::array<double, 3> sp, std::array<double, 3> org,
            double fill = 0.0);

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return std::size_t(x) + std::size_t(dims[0]) * (std::size_t(y) + std::size_t(dims[1]) * std::size_t(z));
  }
  double& at(int x, int y, int z) { return data[index(x, y, z)]; }
  double at(int x, int y, int z) const { return data[index(x, y, z)]; }

  Vec3 voxel_center(int x, int y, int z) const {
    return {origin[0] + x * spacing[0], origin[1] + y * spacing[1], origin[2] + z * spacing[2]};
  }
  bool same_geometry(const VoxelGrid& o) const {
    return dims == o.dims && spacing == o.spacing && origin == o.origin;
  }

  /// Throws std::invalid_argument when dims/spacing/data violate the invariants.
  void validate() const;
};

/// Same geometry as VoxelGrid with a 3-vector per voxel (e.g. gradients, mm^-1).
struct VectorGrid {
  std::array<int, 3> dims{0, 0, 0};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::array<double, 3> origin{0.0, 0.0, 0.0};
  std::vector<Vec3> data;

  std::size_t index(int x, int y, int z) const {
    return std::size_t(x) + std::size_t(dims[0]) * (std::size_t(y) + std::size_t(dims[1]) * std::size_t(z));
  }
  Vec3& at(int x, int y, int z) { return data[index(x, y, z)]; }
  const Vec3& at(int x, int y, int z) const { return data[index(x, y, z)]; }
};

struct PreprocessConfig {
  double clip_lo = 0.0;
  double clip_hi = 500.0;
  double resample_factor = 1.5;
  std::array<int, 3> crop_dims{64, 64, 64};
  bool flip_x = true, flip_y = true, flip_z = true;
  bool rotate90 = true;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// NRRD subset I/O.
//
// Header: NRRD0004 / type: double / dimension: 3 / sizes / space directions
// (diagonal) / space origin / encoding: raw / endian: little, blank line,
// then little-endian float64 payload, x-fastest. Round trips are bit-exact.
// ---------------------------------------------------------------------------

VoxelGrid load_volume(const std::string& path);
void save_volume(const VoxelGrid& grid, const std::string& path);

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// clamp(v, lo, hi) / hi; output in [0,1]. Idempotent for hi >= 1.
VoxelGrid clip_normalize(const VoxelGrid& grid, const PreprocessConfig& cfg);

/// Separable Catmull-Rom resampling. Output dims = round(dims*factor),
/// spacing divided by factor. Reproduces linear fields exactly.
VoxelGrid resample_cubic(const VoxelGrid& grid, double factor);

/// Axis flip / 90-degree rotation helpers used by the augmenter (and tests).
VoxelGrid flip_axis(const VoxelGrid& grid, int axis);
/// Rotates by 90 degrees about `axis` (right-handed, k quarter turns).
VoxelGrid rotate90(const VoxelGrid& grid, int axis, int quarter_turns);

struct CropAugmentResult {
  VoxelGrid image;
  VoxelGrid label;
};

/// Identical geometric transform applied to image and label; deterministic
/// for a fixed cfg.seed.
CropAugmentResult random_crop_augment(const VoxelGrid& image, const VoxelGrid& label,
                                      const PreprocessConfig& cfg);

/// out[i] = image[i] where label[i] == 1 else 0.
VoxelGrid mask_background(const VoxelGrid& image, const VoxelGrid& label);

struct GradientField {
  VoxelGrid magnitude;   // |∇I| in intensity/mm
  VectorGrid gradient;   // ∇ of the magnitude field
};

/// Central differences in physical units, one-sided at the borders.
/// `gradient` is the central-difference gradient of `magnitude`.
GradientField gradient_magnitude_field(const VoxelGrid& image);

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Trilinear interpolation at a physical point; out-of-grid points clamp to
/// the border value.
double sample_trilinear(const VoxelGrid& field, const Vec3& p);
Vec3 sample_trilinear(const VectorGrid& field, const Vec3& p);

/// Exact spatial gradient of the trilinear interpolant at p (zero where the
/// sample is clamped outside the grid). This is the derivative of
/// sample_trilinear, not a resampling of a precomputed gradient field.
Vec3 sample_trilinear_gradient(const VoxelGrid& field, const Vec3& p);

}  // namespace vf::volume
