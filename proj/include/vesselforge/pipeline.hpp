#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "vesselforge/logbseg.hpp"

namespace vf::pipeline {

/// Raised for malformed or inconsistent configs (CLI exit code 2); any other
/// exception during a run is a stage failure (exit code 3).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PhantomCaseConfig {
  std::string name;
  std::string kind = "tube";  // tube | branching
  std::string role = "train";  // train | test
  std::array<int, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::string axis = "x";
  bool arc = false;
  double radius_vox = 6.0;        // tube
  double trunk_radius_vox = 6.0;  // branching
  double branch_radius_vox = 2.5;
  int branches = 2;
  double foreground = 400.0;
  double background = 50.0;
  double noise_sd = 10.0;
  double blur_sigma = 1.0;
  double buffer_sigma = 2.0;
};

struct TrainStageConfig {
  int blocks = 2;
  int base_channels = 4;
  int epochs = 200;
  double learning_rate = 1e-3;
  double beta = -1.0;
  double gate_mu = 0.15;
  bool auto_gate_mu = false;  // median split of the pool's V_p values
  bool mask_background = false;
  std::vector<std::pair<int, double>> log_scales{{3, 0.5}, {5, 1.0}, {7, 1.5}, {9, 2.0}, {11, 2.5}};
};

struct SegmentStageConfig {
  std::string checkpoint;  // empty: use the train stage's output
  int ensemble = 0;        // K posterior samples (0: single prediction only)
  int tile = 64;
  int overlap = 16;
};

struct ReconstructStageConfig {
  double iso = 0.5;
  int target_vertices = 2000;
  int smooth_steps = 30;
  double smooth_lr = 0.05;
  double w_normal = 0.2;
  double w_edge = 0.01;
  double w_laplacian = 0.1;
};

struct DeformStageConfig {
  int epochs = 300;
  double learning_rate = 0.05;
  int control_points = 60;
  double kernel_sigma = -1.0;
  int steps = 15;
  std::array<double, 4> weights{1.0, 0.2, 0.01, 0.1};
  double energy_floor = 1e-8;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  std::vector<std::string> stages;
  std::vector<PhantomCaseConfig> phantom_cases;
  TrainStageConfig train;
  SegmentStageConfig segment;
  ReconstructStageConfig reconstruct;
  DeformStageConfig deform;
};

/// Strict parser: unknown or duplicate keys, a missing seed, an empty stage
/// list, or unsatisfied stage dependencies are errors.
PipelineConfig parse_config_text(const std::string& text);
PipelineConfig parse_config(const std::string& path);

/// Runs the configured stages in order, then aggregates reports. Artifacts
/// are written atomically; failures keep a `.partial` file. Returns the list
/// of (path, hash) pairs from the manifest.
struct ManifestEntry {
  std::string path;   // relative to out_dir
  std::string stage;
  std::vector<std::string> inputs;
  std::string hash;   // fnv1a64 hex of the file bytes
};

std::vector<ManifestEntry> run_pipeline(const PipelineConfig& cfg);

/// Runs one stage against an existing output directory (inputs must already
/// be present; missing ones raise a dependency error).
void run_stage(const PipelineConfig& cfg, const std::string& stage);

/// Aggregates metrics.csv / loss_seg.csv / loss_deform.csv / quality.json
/// into the run directory root and writes summary.json noting anything
/// missing.
void emit_reports(const std::string& run_dir);

std::string file_hash_hex(const std::string& path);

}  // namespace vf::pipeline
