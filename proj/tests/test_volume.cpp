#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "test_util.hpp"
#include "vesselforge/volume.hpp"

using namespace vf;
using namespace vf::volume;

namespace {

std::string tmp_file(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("volume");

TEST_CASE("nrrd round trip is bit-exact") {
  VoxelGrid g({5, 4, 3}, {0.5, 1.0, 2.0}, {-1.0, 2.5, 0.125});
  Rng rng(7);
  std::uniform_real_distribution<double> u(-100.0, 100.0);
  for (double& v : g.data) v = u(rng);

  const std::string path = tmp_file("vf_roundtrip.nrrd");
  save_volume(g, path);
  VoxelGrid r = load_volume(path);
  CHECK(r.dims == g.dims);
  CHECK(r.spacing == g.spacing);
  CHECK(r.origin == g.origin);
  REQUIRE(r.data.size() == g.data.size());
  for (std::size_t i = 0; i < g.data.size(); ++i) CHECK(r.data[i] == g.data[i]);
  CHECK(fnv1a64(r.data) == fnv1a64(g.data));
}

TEST_CASE("nrrd byte-count mismatch is an error") {
  const std::string path = tmp_file("vf_badcount.nrrd");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NRRD0004\ntype: double\ndimension: 3\nsizes: 2 2 2\n"
        << "space directions: (1,0,0) (0,1,0) (0,0,1)\nspace origin: (0,0,0)\n"
        << "encoding: raw\nendian: little\n\n";
    double vals[7] = {0, 1, 2, 3, 4, 5, 6};
    out.write(reinterpret_cast<const char*>(vals), sizeof(vals));
  }
  CHECK_THROWS_WITH_AS(load_volume(path), doctest::Contains("byte count"), std::runtime_error);
}

TEST_CASE("nrrd duplicate and missing header fields are errors") {
  const std::string dup = tmp_file("vf_dup.nrrd");
  {
    std::ofstream out(dup, std::ios::binary);
    out << "NRRD0004\ntype: double\ntype: double\ndimension: 3\nsizes: 1 1 1\n"
        << "space directions: (1,0,0) (0,1,0) (0,0,1)\nspace origin: (0,0,0)\n"
        << "encoding: raw\nendian: little\n\n";
    double v = 0;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  CHECK_THROWS_WITH_AS(load_volume(dup), doctest::Contains("duplicate"), std::runtime_error);

  const std::string miss = tmp_file("vf_missing.nrrd");
  {
    std::ofstream out(miss, std::ios::binary);
    out << "NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\n"
        << "space origin: (0,0,0)\nencoding: raw\nendian: little\n\n";
    double v = 0;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  CHECK_THROWS_WITH_AS(load_volume(miss), doctest::Contains("missing"), std::runtime_error);
}

TEST_CASE("unsupported encoding is an error") {
  const std::string path = tmp_file("vf_gzip.nrrd");
  {
    std::ofstream out(path, std::ios::binary);
    out << "NRRD0004\ntype: double\ndimension: 3\nsizes: 1 1 1\n"
        << "space directions: (1,0,0) (0,1,0) (0,0,1)\nspace origin: (0,0,0)\n"
        << "encoding: gzip\nendian: little\n\n";
  }
  CHECK_THROWS_WITH_AS(load_volume(path), doctest::Contains("encoding"), std::runtime_error);
}

TEST_CASE("clip_normalize clamps and scales") {
  PreprocessConfig cfg;
  VoxelGrid g({3, 1, 1}, {1, 1, 1}, {0, 0, 0});
  g.data = {600.0, -50.0, 250.0};
  VoxelGrid out = clip_normalize(g, cfg);
  CHECK(out.data[0] == doctest::Approx(1.0));
  CHECK(out.data[1] == doctest::Approx(0.0));
  CHECK(out.data[2] == doctest::Approx(0.5));

  VoxelGrid zeros({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 0.0);
  VoxelGrid zout = clip_normalize(zeros, cfg);
  for (double v : zout.data) CHECK(v == 0.0);

  // idempotent once the data sits in [0,1]
  VoxelGrid once = clip_normalize(g, cfg);
  PreprocessConfig unit_cfg;
  unit_cfg.clip_hi = 1.0;
  VoxelGrid twice = clip_normalize(once, unit_cfg);
  for (std::size_t i = 0; i < once.data.size(); ++i)
    CHECK(twice.data[i] == doctest::Approx(once.data[i]).epsilon(1e-15));
}

TEST_CASE("resample_cubic dims, constant and linear reproduction") {
  VoxelGrid g({64, 64, 64}, {1, 1, 1}, {0, 0, 0}, 3.25);
  VoxelGrid up = resample_cubic(g, 1.5);
  CHECK(up.dims == std::array<int, 3>{96, 96, 96});
  CHECK(up.spacing[0] == doctest::Approx(1.0 / 1.5));
  for (double v : up.data) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));

  // linear ramp along x reproduced exactly in the interior
  VoxelGrid ramp({16, 8, 8}, {1, 1, 1}, {0, 0, 0});
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 16; ++x) ramp.at(x, y, z) = double(x);
  VoxelGrid rs = resample_cubic(ramp, 1.5);
  for (int z = 2; z < rs.dims[2] - 2; ++z)
    for (int y = 2; y < rs.dims[1] - 2; ++y)
      for (int x = 3; x < rs.dims[0] - 3; ++x) {
        double expect = double(x) / 1.5;
        CHECK(std::abs(rs.at(x, y, z) - expect) < 1e-10);
      }

  // factor 1 returns the grid within 1e-12
  VoxelGrid same = resample_cubic(ramp, 1.0);
  REQUIRE(same.dims == ramp.dims);
  for (std::size_t i = 0; i < ramp.data.size(); ++i)
    CHECK(std::abs(same.data[i] - ramp.data[i]) < 1e-12);

  CHECK_THROWS(resample_cubic(ramp, 0.01));  // output dim < 2
}

TEST_CASE("random_crop_augment determinism and flips") {
  VoxelGrid img({80, 80, 80}, {1, 1, 1}, {0, 0, 0});
  VoxelGrid lab = img;
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    img.data[i] = u(rng);
    lab.data[i] = u(rng) > 0.5 ? 1.0 : 0.0;
  }
  PreprocessConfig cfg;
  cfg.seed = 17;
  auto a = random_crop_augment(img, lab, cfg);
  auto b = random_crop_augment(img, lab, cfg);
  CHECK(a.image.dims == std::array<int, 3>{64, 64, 64});
  CHECK(a.label.dims == std::array<int, 3>{64, 64, 64});
  CHECK(fnv1a64(a.image.data) == fnv1a64(b.image.data));
  CHECK(fnv1a64(a.label.data) == fnv1a64(b.label.data));

  // flip is an involution
  VoxelGrid flipped = flip_axis(a.image, 1);
  VoxelGrid back = flip_axis(flipped, 1);
  CHECK(fnv1a64(back.data) == fnv1a64(a.image.data));

  PreprocessConfig big = cfg;
  big.crop_dims = {128, 64, 64};
  CHECK_THROWS(random_crop_augment(img, lab, big));
}

TEST_CASE("mask_background") {
  VoxelGrid img({4, 4, 4}, {1, 1, 1}, {0, 0, 0}, 7.0);
  VoxelGrid ones = img;
  for (double& v : ones.data) v = 1.0;
  VoxelGrid zeros = img;
  for (double& v : zeros.data) v = 0.0;

  VoxelGrid kept = mask_background(img, ones);
  for (double v : kept.data) CHECK(v == 7.0);
  VoxelGrid gone = mask_background(img, zeros);
  for (double v : gone.data) CHECK(v == 0.0);

  VoxelGrid other({3, 3, 3}, {1, 1, 1}, {0, 0, 0});
  CHECK_THROWS(mask_background(img, other));
}

TEST_CASE("gradient magnitude with physical units") {
  // f(x) = x in mm with spacing 0.5mm: data[i] = 0.5*i, derivative 1 per mm
  VoxelGrid g({9, 5, 5}, {0.5, 0.5, 0.5}, {0, 0, 0});
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 9; ++x) g.at(x, y, z) = 0.5 * x;
  GradientField f = gradient_magnitude_field(g);
  for (int z = 1; z < 4; ++z)
    for (int y = 1; y < 4; ++y)
      for (int x = 1; x < 8; ++x)
        CHECK(f.magnitude.at(x, y, z) == doctest::Approx(1.0).epsilon(1e-12));

  VoxelGrid c({5, 5, 5}, {1, 1, 1}, {0, 0, 0}, 4.0);
  GradientField fc = gradient_magnitude_field(c);
  for (double v : fc.magnitude.data) CHECK(v == 0.0);
  for (const Vec3& v : fc.gradient.data) CHECK(norm(v) == 0.0);
}

TEST_CASE("trilinear sampling: centers, midpoints, clamping, linearity") {
  VoxelGrid g({6, 6, 6}, {2, 2, 2}, {10, 0, -4});
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (double& v : g.data) v = u(rng);

  CHECK(sample_trilinear(g, g.voxel_center(2, 3, 1)) == doctest::Approx(g.at(2, 3, 1)));

  Vec3 mid = 0.5 * (g.voxel_center(1, 2, 3) + g.voxel_center(2, 2, 3));
  CHECK(sample_trilinear(g, mid) == doctest::Approx(0.5 * (g.at(1, 2, 3) + g.at(2, 2, 3))));

  Vec3 far{1e6, 1e6, 1e6};
  CHECK(sample_trilinear(g, far) == doctest::Approx(g.at(5, 5, 5)));
  CHECK(norm(sample_trilinear_gradient(g, far)) == 0.0);

  // linearity in the field at random points
  VoxelGrid h = g;
  for (double& v : h.data) v = u(rng);
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 p{u(rng) * 2 + 8, u(rng) * 2, u(rng) * 2 - 4};
    VoxelGrid combo = g;
    for (std::size_t i = 0; i < combo.data.size(); ++i)
      combo.data[i] = 2.5 * g.data[i] - 1.25 * h.data[i];
    double lhs = sample_trilinear(combo, p);
    double rhs = 2.5 * sample_trilinear(g, p) - 1.25 * sample_trilinear(h, p);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("trilinear gradient matches finite differences inside the grid") {
  VoxelGrid g({8, 8, 8}, {1.5, 1.0, 0.75}, {0, 0, 0});
  Rng rng(23);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  for (double& v : g.data) v = u(rng);

  std::uniform_real_distribution<double> c(1.3, 5.7);
  for (int trial = 0; trial < 30; ++trial) {
    Vec3 p{c(rng) * 1.5, c(rng) * 1.0, c(rng) * 0.75};
    Vec3 grad = sample_trilinear_gradient(g, p);
    const double h = 1e-6;
    for (int axis = 0; axis < 3; ++axis) {
      Vec3 lo = p, hi = p;
      lo[axis] -= h;
      hi[axis] += h;
      double fd = (sample_trilinear(g, hi) - sample_trilinear(g, lo)) / (2 * h);
      CHECK(grad[axis] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_SUITE_END();
