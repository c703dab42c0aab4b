#include "vesselforge/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "vesselforge/lddmm.hpp"
#include "vesselforge/mesh.hpp"
#include "vesselforge/metrics.hpp"
#include "vesselforge/phantom.hpp"
#include "vesselforge/volume.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace vf::pipeline {

namespace {

json parse_json_no_duplicates(const std::string& text) {
  std::vector<std::set<std::string>> object_keys;
  json::parser_callback_t cb = [&](int /*depth*/, json::parse_event_t ev, json& parsed) {
    if (ev == json::parse_event_t::object_start) {
      object_keys.emplace_back();
    } else if (ev == json::parse_event_t::object_end) {
      object_keys.pop_back();
    } else if (ev == json::parse_event_t::key) {
      const auto key = parsed.get<std::string>();
      if (!object_keys.back().insert(key).second)
        throw ConfigError("config: duplicate key '" + key + "'");
    }
    return true;
  };
  try {
    return json::parse(text, cb);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  return obj.at(key).get<T>();
}

const std::map<std::string, std::string>& stage_prerequisite() {
  static const std::map<std::string, std::string> deps{
      {"phantom", ""},       {"train", "phantom"},      {"segment", "train"},
      {"reconstruct", "segment"}, {"deform", "reconstruct"}, {"evaluate", "segment"},
  };
  return deps;
}

}  // namespace

PipelineConfig parse_config_text(const std::string& text) {
  json root = parse_json_no_duplicates(text);
  if (!root.is_object()) throw ConfigError("config: root must be an object");
  check_keys(root,
             {"seed", "out_dir", "stages", "phantom", "train", "segment", "reconstruct",
              "deform", "evaluate"},
             "root");

  PipelineConfig cfg;
  if (!root.contains("seed")) throw ConfigError("config: missing seed");
  cfg.seed = root.at("seed").get<std::uint64_t>();
  cfg.out_dir = get_or<std::string>(root, "out_dir", "run");

  if (!root.contains("stages") || !root.at("stages").is_array() || root.at("stages").empty())
    throw ConfigError("config: stages must be a nonempty list");
  for (const auto& s : root.at("stages")) cfg.stages.push_back(s.get<std::string>());

  const auto& deps = stage_prerequisite();
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const std::string& st = cfg.stages[i];
    auto it = deps.find(st);
    if (it == deps.end()) throw ConfigError("config: unknown stage '" + st + "'");
    const std::string& need = it->second;
    bool explicit_checkpoint = st == "segment" && root.contains("segment") &&
                               root.at("segment").contains("checkpoint") &&
                               !root.at("segment").at("checkpoint").get<std::string>().empty();
    if (need.empty() || explicit_checkpoint) continue;
    bool found = false;
    for (std::size_t j = 0; j < i; ++j)
      if (cfg.stages[j] == need) found = true;
    if (!found)
      throw ConfigError("config: stage '" + st + "' requires '" + need + "' output (dependency)");
  }

  if (root.contains("phantom")) {
    const json& ph = root.at("phantom");
    check_keys(ph, {"cases"}, "phantom");
    if (!ph.contains("cases") || !ph.at("cases").is_array())
      throw ConfigError("config: phantom.cases must be a list");
    for (const json& c : ph.at("cases")) {
      check_keys(c,
                 {"name", "kind", "role", "dims", "spacing", "axis", "arc", "radius_vox",
                  "trunk_radius_vox", "branch_radius_vox", "branches", "foreground",
                  "background", "noise_sd", "blur_sigma", "buffer_sigma"},
                 "phantom case");
      PhantomCaseConfig pc;
      if (!c.contains("name")) throw ConfigError("config: phantom case needs a name");
      pc.name = c.at("name").get<std::string>();
      pc.kind = get_or<std::string>(c, "kind", pc.kind);
      pc.role = get_or<std::string>(c, "role", pc.role);
      if (c.contains("dims")) {
        auto v = c.at("dims").get<std::vector<int>>();
        if (v.size() != 3) throw ConfigError("config: dims must have 3 entries");
        pc.dims = {v[0], v[1], v[2]};
      }
      if (c.contains("spacing")) {
        auto v = c.at("spacing").get<std::vector<double>>();
        if (v.size() != 3) throw ConfigError("config: spacing must have 3 entries");
        pc.spacing = {v[0], v[1], v[2]};
      }
      pc.axis = get_or<std::string>(c, "axis", pc.axis);
      pc.arc = get_or<bool>(c, "arc", pc.arc);
      pc.radius_vox = get_or<double>(c, "radius_vox", pc.radius_vox);
      pc.trunk_radius_vox = get_or<double>(c, "trunk_radius_vox", pc.trunk_radius_vox);
      pc.branch_radius_vox = get_or<double>(c, "branch_radius_vox", pc.branch_radius_vox);
      pc.branches = get_or<int>(c, "branches", pc.branches);
      pc.foreground = get_or<double>(c, "foreground", pc.foreground);
      pc.background = get_or<double>(c, "background", pc.background);
      pc.noise_sd = get_or<double>(c, "noise_sd", pc.noise_sd);
      pc.blur_sigma = get_or<double>(c, "blur_sigma", pc.blur_sigma);
      pc.buffer_sigma = get_or<double>(c, "buffer_sigma", pc.buffer_sigma);
      if (pc.kind != "tube" && pc.kind != "branching")
        throw ConfigError("config: phantom kind must be tube or branching");
      if (pc.role != "train" && pc.role != "test")
        throw ConfigError("config: phantom role must be train or test");
      cfg.phantom_cases.push_back(std::move(pc));
    }
  }

  if (root.contains("train")) {
    const json& t = root.at("train");
    check_keys(t,
               {"blocks", "base_channels", "epochs", "learning_rate", "beta", "gate_mu",
                "auto_gate_mu", "mask_background", "log_scales"},
               "train");
    cfg.train.blocks = get_or<int>(t, "blocks", cfg.train.blocks);
    cfg.train.base_channels = get_or<int>(t, "base_channels", cfg.train.base_channels);
    cfg.train.epochs = get_or<int>(t, "epochs", cfg.train.epochs);
    cfg.train.learning_rate = get_or<double>(t, "learning_rate", cfg.train.learning_rate);
    cfg.train.beta = get_or<double>(t, "beta", cfg.train.beta);
    cfg.train.gate_mu = get_or<double>(t, "gate_mu", cfg.train.gate_mu);
    cfg.train.auto_gate_mu = get_or<bool>(t, "auto_gate_mu", cfg.train.auto_gate_mu);
    cfg.train.mask_background = get_or<bool>(t, "mask_background", cfg.train.mask_background);
    if (t.contains("log_scales")) {
      cfg.train.log_scales.clear();
      for (const auto& s : t.at("log_scales")) {
        auto v = s.get<std::vector<double>>();
        if (v.size() != 2) throw ConfigError("config: log_scales entries are [size, sigma]");
        cfg.train.log_scales.emplace_back(int(v[0]), v[1]);
      }
    }
  }

  if (root.contains("segment")) {
    const json& s = root.at("segment");
    check_keys(s, {"checkpoint", "ensemble", "tile", "overlap"}, "segment");
    cfg.segment.checkpoint = get_or<std::string>(s, "checkpoint", cfg.segment.checkpoint);
    cfg.segment.ensemble = get_or<int>(s, "ensemble", cfg.segment.ensemble);
    cfg.segment.tile = get_or<int>(s, "tile", cfg.segment.tile);
    cfg.segment.overlap = get_or<int>(s, "overlap", cfg.segment.overlap);
  }

  if (root.contains("reconstruct")) {
    const json& r = root.at("reconstruct");
    check_keys(r,
               {"iso", "target_vertices", "smooth_steps", "smooth_lr", "w_normal", "w_edge",
                "w_laplacian"},
               "reconstruct");
    cfg.reconstruct.iso = get_or<double>(r, "iso", cfg.reconstruct.iso);
    cfg.reconstruct.target_vertices = get_or<int>(r, "target_vertices", cfg.reconstruct.target_vertices);
    cfg.reconstruct.smooth_steps = get_or<int>(r, "smooth_steps", cfg.reconstruct.smooth_steps);
    cfg.reconstruct.smooth_lr = get_or<double>(r, "smooth_lr", cfg.reconstruct.smooth_lr);
    cfg.reconstruct.w_normal = get_or<double>(r, "w_normal", cfg.reconstruct.w_normal);
    cfg.reconstruct.w_edge = get_or<double>(r, "w_edge", cfg.reconstruct.w_edge);
    cfg.reconstruct.w_laplacian = get_or<double>(r, "w_laplacian", cfg.reconstruct.w_laplacian);
  }

  if (root.contains("deform")) {
    const json& d = root.at("deform");
    check_keys(d,
               {"epochs", "learning_rate", "control_points", "kernel_sigma", "steps", "weights",
                "energy_floor"},
               "deform");
    cfg.deform.epochs = get_or<int>(d, "epochs", cfg.deform.epochs);
    cfg.deform.learning_rate = get_or<double>(d, "learning_rate", cfg.deform.learning_rate);
    cfg.deform.control_points = get_or<int>(d, "control_points", cfg.deform.control_points);
    cfg.deform.kernel_sigma = get_or<double>(d, "kernel_sigma", cfg.deform.kernel_sigma);
    cfg.deform.steps = get_or<int>(d, "steps", cfg.deform.steps);
    if (d.contains("weights")) {
      auto v = d.at("weights").get<std::vector<double>>();
      if (v.size() != 4) throw ConfigError("config: deform.weights must have 4 entries");
      cfg.deform.weights = {v[0], v[1], v[2], v[3]};
    }
    cfg.deform.energy_floor = get_or<double>(d, "energy_floor", cfg.deform.energy_floor);
  }

  if (root.contains("evaluate")) {
    check_keys(root.at("evaluate"), {}, "evaluate");
  }

  return cfg;
}

PipelineConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// ---------------------------------------------------------------------------
// Run machinery
// ---------------------------------------------------------------------------

std::string file_hash_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_hash_hex: cannot open " + path);
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, std::size_t(in.gcount()), h);
  return hex64(h);
}

namespace {

struct RunContext {
  const PipelineConfig& cfg;
  fs::path out;
  std::vector<ManifestEntry> manifest;

  fs::path abs(const std::string& rel) const { return out / rel; }

  void declare(const std::string& stage, const std::string& rel,
               std::vector<std::string> inputs) {
    ManifestEntry e;
    e.path = rel;
    e.stage = stage;
    e.inputs = std::move(inputs);
    e.hash = file_hash_hex(abs(rel).string());
    manifest.push_back(std::move(e));
  }
};

// Atomic writers: write to `<path>.partial`, rename on success.
template <typename WriteFn>
void atomic_artifact(const fs::path& path, WriteFn&& fn) {
  fs::create_directories(path.parent_path());
  fs::path partial = path;
  partial += ".partial";
  fn(partial.string());
  fs::rename(partial, path);
}

void write_text(const fs::path& path, const std::string& text) {
  atomic_artifact(path, [&](const std::string& p) {
    std::ofstream out(p, std::ios::binary);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + p);
  });
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing input: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void require_input(const RunContext& ctx, const std::string& rel, const std::string& stage) {
  if (!fs::exists(ctx.abs(rel)))
    throw std::runtime_error(stage + ": missing input " + rel + " (dependency)");
}

// --- phantom geometry from a case config ------------------------------------

Vec3 axis_unit(const std::string& axis) {
  if (axis == "x") return {1, 0, 0};
  if (axis == "y") return {0, 1, 0};
  if (axis == "z") return {0, 0, 1};
  throw ConfigError("config: axis must be x, y, or z");
}

phantom::PhantomSpec case_spec(const PhantomCaseConfig& c, std::uint64_t run_seed,
                               std::size_t idx) {
  phantom::PhantomSpec spec;
  spec.dims = c.dims;
  spec.spacing = c.spacing;
  spec.origin = {0, 0, 0};
  spec.foreground = c.foreground;
  spec.background = c.background;
  spec.noise_sd = c.noise_sd;
  spec.blur_sigma = c.blur_sigma;
  spec.buffer_sigma = c.buffer_sigma;
  spec.seed = derive_seed(run_seed, 100 + idx);

  const Vec3 ax = axis_unit(c.axis);
  Vec3 center{(c.dims[0] - 1) * c.spacing[0] / 2.0, (c.dims[1] - 1) * c.spacing[1] / 2.0,
              (c.dims[2] - 1) * c.spacing[2] / 2.0};
  const double sp = c.spacing[0];
  const double extent = dot(ax, Vec3{(c.dims[0] - 1) * c.spacing[0], (c.dims[1] - 1) * c.spacing[1],
                                     (c.dims[2] - 1) * c.spacing[2]});

  if (c.kind == "tube") {
    const double r = c.radius_vox * sp;
    const double margin = r + 4.0 * sp;
    Vec3 a = center - ax * (extent / 2.0 - margin);
    Vec3 b = center + ax * (extent / 2.0 - margin);
    if (c.arc) {
      // quarter-ish arc in the plane of the axis and the next coordinate
      Vec3 u = ax;
      Vec3 v = c.axis == "x" ? Vec3{0, 1, 0} : (c.axis == "y" ? Vec3{0, 0, 1} : Vec3{1, 0, 0});
      double arc_r = extent / 2.0 - margin;
      Vec3 arc_center = center - v * (arc_r / 2.0);
      spec.centerlines.push_back(phantom::arc_centerline(arc_center, arc_r, u, v, -0.6, 0.6, r, 41));
    } else {
      spec.centerlines.push_back(phantom::straight_centerline(a, b, r, 9));
    }
  } else {
    const double rt = c.trunk_radius_vox * sp;
    const double rb = c.branch_radius_vox * sp;
    const double margin = rt + 4.0 * sp;
    Vec3 a = center - ax * (extent / 2.0 - margin);
    Vec3 b = center + ax * (extent / 2.0 - margin);
    spec.centerlines.push_back(phantom::straight_centerline(a, b, rt, 9));
    // side branches leaving the trunk at spread stations and angles
    Vec3 n1 = c.axis == "x" ? Vec3{0, 1, 0} : (c.axis == "y" ? Vec3{0, 0, 1} : Vec3{1, 0, 0});
    Vec3 n2 = cross(ax, n1);
    for (int k = 0; k < c.branches; ++k) {
      double along = 0.25 + 0.5 * (c.branches == 1 ? 0.5 : double(k) / double(c.branches - 1));
      double angle = 2.0 * M_PI * double(k) / double(std::max(1, c.branches));
      Vec3 start = a + along * (b - a);
      Vec3 dir = normalized(0.9 * ax + std::cos(angle) * n1 + std::sin(angle) * n2);
      double len = extent / 2.0 - margin;
      // shrink until the branch tip keeps its margin
      Vec3 tip = start + dir * len;
      auto inside = [&](const Vec3& p, double rad) {
        for (int axn = 0; axn < 3; ++axn) {
          double lo = spec.origin[axn] + rad + 4.0 * spec.spacing[axn];
          double hi = spec.origin[axn] + (spec.dims[axn] - 1) * spec.spacing[axn] - rad -
                      4.0 * spec.spacing[axn];
          if (p[axn] < lo || p[axn] > hi) return false;
        }
        return true;
      };
      while (len > 6.0 * sp && !inside(tip, rb)) {
        len *= 0.85;
        tip = start + dir * len;
      }
      spec.centerlines.push_back(phantom::straight_centerline(start, tip, rb, 7));
    }
  }
  return spec;
}

json io_to_json(const phantom::InletOutletSpec& io) {
  json j;
  j["buffer_sigma"] = io.buffer_sigma;
  j["caps"] = json::array();
  for (const auto& c : io.caps) {
    json cap;
    cap["center"] = {c.center.x, c.center.y, c.center.z};
    cap["radius"] = c.radius;
    cap["outward"] = {c.outward.x, c.outward.y, c.outward.z};
    cap["is_inlet"] = c.is_inlet;
    j["caps"].push_back(cap);
  }
  return j;
}

phantom::InletOutletSpec io_from_json(const json& j) {
  phantom::InletOutletSpec io;
  io.buffer_sigma = j.at("buffer_sigma").get<double>();
  for (const auto& cap : j.at("caps")) {
    phantom::Cap c;
    auto ctr = cap.at("center").get<std::vector<double>>();
    auto out = cap.at("outward").get<std::vector<double>>();
    c.center = {ctr[0], ctr[1], ctr[2]};
    c.outward = {out[0], out[1], out[2]};
    c.radius = cap.at("radius").get<double>();
    c.is_inlet = cap.at("is_inlet").get<bool>();
    io.caps.push_back(c);
  }
  return io;
}

// --- stages ------------------------------------------------------------------

void stage_phantom(RunContext& ctx) {
  for (std::size_t i = 0; i < ctx.cfg.phantom_cases.size(); ++i) {
    const PhantomCaseConfig& c = ctx.cfg.phantom_cases[i];
    phantom::PhantomSpec spec = case_spec(c, ctx.cfg.seed, i);
    phantom::PhantomResult r = c.kind == "tube" ? phantom::make_tube_phantom(spec)
                                                : phantom::make_branching_phantom(spec);
    volume::VoxelGrid image = phantom::corrupt(r.image, spec.noise_sd, spec.blur_sigma, spec.seed);

    const std::string base = "phantom/" + c.name;
    atomic_artifact(ctx.abs(base + "_clean.nrrd"),
                    [&](const std::string& p) { volume::save_volume(r.image, p); });
    atomic_artifact(ctx.abs(base + "_image.nrrd"),
                    [&](const std::string& p) { volume::save_volume(image, p); });
    atomic_artifact(ctx.abs(base + "_label.nrrd"),
                    [&](const std::string& p) { volume::save_volume(r.label, p); });
    write_text(ctx.abs(base + "_io.json"), io_to_json(r.io).dump(2) + "\n");
    ctx.declare("phantom", base + "_clean.nrrd", {});
    ctx.declare("phantom", base + "_image.nrrd", {});
    ctx.declare("phantom", base + "_label.nrrd", {});
    ctx.declare("phantom", base + "_io.json", {});

    if (c.kind == "tube") {
      mesh::TriMesh truth = phantom::analytic_surface(spec);
      atomic_artifact(ctx.abs(base + "_truth.obj"),
                      [&](const std::string& p) { mesh::save_obj(truth, p); });
      ctx.declare("phantom", base + "_truth.obj", {});
    } else {
      // region split used by evaluate: trunk occupancy vs branch-only voxels
      phantom::PhantomSpec trunk_only = spec;
      trunk_only.centerlines.resize(1);
      volume::VoxelGrid main_label(spec.dims, spec.spacing, spec.origin, 0.0);
      for (int z = 0; z < spec.dims[2]; ++z)
        for (int y = 0; y < spec.dims[1]; ++y)
          for (int x = 0; x < spec.dims[0]; ++x)
            if (trunk_only.centerlines[0].signed_distance(main_label.voxel_center(x, y, z)) <= 0)
              main_label.at(x, y, z) = 1.0;
      volume::VoxelGrid branch_label = r.label;
      for (std::size_t v = 0; v < branch_label.data.size(); ++v)
        if (main_label.data[v] == 1.0) branch_label.data[v] = 0.0;
      atomic_artifact(ctx.abs(base + "_label_main.nrrd"),
                      [&](const std::string& p) { volume::save_volume(main_label, p); });
      atomic_artifact(ctx.abs(base + "_label_branch.nrrd"),
                      [&](const std::string& p) { volume::save_volume(branch_label, p); });
      ctx.declare("phantom", base + "_label_main.nrrd", {});
      ctx.declare("phantom", base + "_label_branch.nrrd", {});
    }
  }
}

seg::SegNetConfig net_config(const TrainStageConfig& t) {
  seg::SegNetConfig nc;
  nc.blocks = t.blocks;
  nc.base_channels = t.base_channels;
  nc.log_spec.scales = t.log_scales;
  return nc;
}

void stage_train(RunContext& ctx) {
  std::vector<seg::TrainSample> dataset;
  std::vector<std::string> inputs;
  volume::PreprocessConfig pre;
  for (const auto& c : ctx.cfg.phantom_cases) {
    if (c.role != "train") continue;
    const std::string base = "phantom/" + c.name;
    require_input(ctx, base + "_image.nrrd", "train");
    seg::TrainSample s;
    s.image = volume::clip_normalize(volume::load_volume(ctx.abs(base + "_image.nrrd").string()), pre);
    s.label = volume::load_volume(ctx.abs(base + "_label.nrrd").string());
    if (ctx.cfg.train.mask_background) s.image = volume::mask_background(s.image, s.label);
    dataset.push_back(std::move(s));
    inputs.push_back(base + "_image.nrrd");
    inputs.push_back(base + "_label.nrrd");
  }

  seg::SegNetwork net(net_config(ctx.cfg.train), derive_seed(ctx.cfg.seed, 1));
  seg::TrainConfig tc;
  tc.epochs = ctx.cfg.train.epochs;
  tc.learning_rate = ctx.cfg.train.learning_rate;
  tc.beta = ctx.cfg.train.beta;
  tc.seed = derive_seed(ctx.cfg.seed, 2);

  seg::BalancedGate gate;
  gate.mu = ctx.cfg.train.gate_mu;
  if (ctx.cfg.train.auto_gate_mu) {
    // median split of the pool's V_p so both groups are nonempty at desk scale
    std::vector<double> vp;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      auto resp = net.log_response(dataset[i].image, derive_seed(tc.seed, (3ull << 32) + i));
      vp.push_back(seg::voxel_percentage(resp));
    }
    std::vector<double> sorted = vp;
    std::sort(sorted.begin(), sorted.end());
    double lo = sorted[sorted.size() / 2 - 1], hi = sorted[sorted.size() / 2];
    if (lo == hi)
      throw std::runtime_error("train: auto_gate_mu cannot split the pool (tied V_p values)");
    gate.mu = 0.5 * (lo + hi);
  }

  seg::TrainResult res = seg::train(net, dataset, tc, gate);

  atomic_artifact(ctx.abs("train/model.logb"),
                  [&](const std::string& p) { net.save_checkpoint(p); });
  std::ostringstream csv;
  csv << "epoch,total,dice,nll,kl\n";
  for (std::size_t e = 0; e < res.history.size(); ++e)
    csv << e << "," << fmt(res.history[e].total) << "," << fmt(res.history[e].dice) << ","
        << fmt(res.history[e].nll) << "," << fmt(res.history[e].kl) << "\n";
  write_text(ctx.abs("train/loss_seg.csv"), csv.str());
  ctx.declare("train", "train/model.logb", inputs);
  ctx.declare("train", "train/loss_seg.csv", inputs);
}

void stage_segment(RunContext& ctx) {
  std::string ckpt_rel = ctx.cfg.segment.checkpoint.empty() ? "train/model.logb"
                                                            : ctx.cfg.segment.checkpoint;
  fs::path ckpt = ctx.cfg.segment.checkpoint.empty() ? ctx.abs(ckpt_rel) : fs::path(ckpt_rel);
  if (!fs::exists(ckpt))
    throw std::runtime_error("segment: missing checkpoint " + ckpt.string() + " (dependency)");
  seg::SegNetwork net = seg::SegNetwork::load_checkpoint(ckpt.string());

  volume::PreprocessConfig pre;
  for (std::size_t i = 0; i < ctx.cfg.phantom_cases.size(); ++i) {
    const auto& c = ctx.cfg.phantom_cases[i];
    const std::string base = "phantom/" + c.name;
    require_input(ctx, base + "_image.nrrd", "segment");
    volume::VoxelGrid image =
        volume::clip_normalize(volume::load_volume(ctx.abs(base + "_image.nrrd").string()), pre);

    const int div = 1 << net.config().blocks;
    bool direct = image.dims[0] % div == 0 && image.dims[1] % div == 0 && image.dims[2] % div == 0 &&
                  image.dims[0] <= ctx.cfg.segment.tile;
    volume::VoxelGrid prob =
        direct ? net.forward(image, derive_seed(ctx.cfg.seed, 300 + i))
               : seg::stitch_tiles(net, image, ctx.cfg.segment.tile, ctx.cfg.segment.overlap,
                                   derive_seed(ctx.cfg.seed, 300 + i));
    const std::string rel = "segment/" + c.name + "_prob.nrrd";
    atomic_artifact(ctx.abs(rel), [&](const std::string& p) { volume::save_volume(prob, p); });
    ctx.declare("segment", rel, {base + "_image.nrrd", ckpt_rel});

    if (ctx.cfg.segment.ensemble >= 2) {
      seg::EnsembleResult ens = seg::predict_ensemble(net, image, ctx.cfg.segment.ensemble,
                                                      derive_seed(ctx.cfg.seed, 400 + i));
      const std::string mrel = "segment/" + c.name + "_prob_mean.nrrd";
      const std::string srel = "segment/" + c.name + "_prob_std.nrrd";
      atomic_artifact(ctx.abs(mrel), [&](const std::string& p) { volume::save_volume(ens.mean, p); });
      atomic_artifact(ctx.abs(srel), [&](const std::string& p) { volume::save_volume(ens.std, p); });
      ctx.declare("segment", mrel, {base + "_image.nrrd", ckpt_rel});
      ctx.declare("segment", srel, {base + "_image.nrrd", ckpt_rel});
      for (int k = 0; k < ctx.cfg.segment.ensemble; ++k) {
        const std::string brel = "segment/" + c.name + "_sample" + std::to_string(k) + ".nrrd";
        atomic_artifact(ctx.abs(brel),
                        [&](const std::string& p) { volume::save_volume(ens.binaries[k], p); });
        ctx.declare("segment", brel, {base + "_image.nrrd", ckpt_rel});
      }
    }
  }
}

void stage_reconstruct(RunContext& ctx) {
  for (const auto& c : ctx.cfg.phantom_cases) {
    const std::string prob_rel = "segment/" + c.name + "_prob.nrrd";
    require_input(ctx, prob_rel, "reconstruct");
    volume::VoxelGrid prob = volume::load_volume(ctx.abs(prob_rel).string());

    mesh::TriMesh m = mesh::marching_cubes(prob, ctx.cfg.reconstruct.iso);
    if (int(m.vertices.size()) > ctx.cfg.reconstruct.target_vertices)
      m = mesh::remesh_uniform(m, ctx.cfg.reconstruct.target_vertices);
    mesh::SmoothResult sm =
        mesh::smooth_minimize(m, ctx.cfg.reconstruct.w_normal, ctx.cfg.reconstruct.w_edge,
                              ctx.cfg.reconstruct.w_laplacian, ctx.cfg.reconstruct.smooth_steps,
                              ctx.cfg.reconstruct.smooth_lr);

    const std::string mesh_rel = "reconstruct/" + c.name + "_init.obj";
    const std::string q_rel = "reconstruct/" + c.name + "_quality.json";
    atomic_artifact(ctx.abs(mesh_rel), [&](const std::string& p) { mesh::save_obj(sm.mesh, p); });
    write_text(ctx.abs(q_rel), mesh::quality_report_json(mesh::quality_report(sm.mesh)));
    ctx.declare("reconstruct", mesh_rel, {prob_rel});
    ctx.declare("reconstruct", q_rel, {prob_rel});
  }
}

void stage_deform(RunContext& ctx) {
  volume::PreprocessConfig pre;
  for (std::size_t i = 0; i < ctx.cfg.phantom_cases.size(); ++i) {
    const auto& c = ctx.cfg.phantom_cases[i];
    const std::string mesh_rel = "reconstruct/" + c.name + "_init.obj";
    const std::string img_rel = "phantom/" + c.name + "_image.nrrd";
    const std::string io_rel = "phantom/" + c.name + "_io.json";
    require_input(ctx, mesh_rel, "deform");
    require_input(ctx, img_rel, "deform");
    require_input(ctx, io_rel, "deform");

    mesh::TriMesh init = mesh::load_obj(ctx.abs(mesh_rel).string());
    volume::VoxelGrid image =
        volume::clip_normalize(volume::load_volume(ctx.abs(img_rel).string()), pre);
    volume::GradientField gf = volume::gradient_magnitude_field(image);
    phantom::InletOutletSpec io = io_from_json(parse_json_no_duplicates(read_text(ctx.abs(io_rel))));

    lddmm::FlowConfig flow;
    flow.steps = ctx.cfg.deform.steps;
    lddmm::DeformLossConfig lc;
    lc.w_misalign = ctx.cfg.deform.weights[0];
    lc.w_normal = ctx.cfg.deform.weights[1];
    lc.w_edge = ctx.cfg.deform.weights[2];
    lc.w_laplacian = ctx.cfg.deform.weights[3];
    lc.energy_floor = ctx.cfg.deform.energy_floor;
    lddmm::DeformConfig dc;
    dc.epochs = ctx.cfg.deform.epochs;
    dc.learning_rate = ctx.cfg.deform.learning_rate;
    dc.control_points = ctx.cfg.deform.control_points;
    dc.kernel_sigma = ctx.cfg.deform.kernel_sigma;

    lddmm::DeformResult res = lddmm::optimize_momenta(init, gf.magnitude, &io, flow, lc, dc,
                                                      derive_seed(ctx.cfg.seed, 700 + i));

    const std::string out_rel = "deform/" + c.name + "_final.obj";
    atomic_artifact(ctx.abs(out_rel), [&](const std::string& p) { mesh::save_obj(res.mesh, p); });

    std::ostringstream csv;
    csv << "epoch,total,misalign,normal,edge,laplacian\n";
    for (std::size_t e = 0; e < res.history.size(); ++e)
      csv << e << "," << fmt(res.history[e].total) << "," << fmt(res.history[e].misalign) << ","
          << fmt(res.history[e].normal) << "," << fmt(res.history[e].edge) << ","
          << fmt(res.history[e].laplacian) << "\n";
    const std::string csv_rel = "deform/" + c.name + "_loss.csv";
    write_text(ctx.abs(csv_rel), csv.str());

    json state;
    state["kernel_sigma"] = res.state.kernel_sigma;
    state["control_points"] = json::array();
    state["momenta"] = json::array();
    for (const Vec3& p : res.state.points)
      state["control_points"].push_back({p.x, p.y, p.z});
    for (const Vec3& p : res.state.momenta) state["momenta"].push_back({p.x, p.y, p.z});
    state["gate"] = io_to_json(io);
    const std::string st_rel = "deform/" + c.name + "_state.json";
    write_text(ctx.abs(st_rel), state.dump(2) + "\n");

    ctx.declare("deform", out_rel, {mesh_rel, img_rel, io_rel});
    ctx.declare("deform", csv_rel, {mesh_rel, img_rel, io_rel});
    ctx.declare("deform", st_rel, {mesh_rel, img_rel, io_rel});
  }
}

void stage_evaluate(RunContext& ctx) {
  std::ostringstream csv;
  csv << "case,metric,region,value\n";
  for (const auto& c : ctx.cfg.phantom_cases) {
    const std::string label_rel = "phantom/" + c.name + "_label.nrrd";
    const std::string prob_rel = "segment/" + c.name + "_prob.nrrd";
    require_input(ctx, label_rel, "evaluate");
    require_input(ctx, prob_rel, "evaluate");
    volume::VoxelGrid label = volume::load_volume(ctx.abs(label_rel).string());
    volume::VoxelGrid prob = volume::load_volume(ctx.abs(prob_rel).string());
    volume::VoxelGrid bin = prob;
    for (double& v : bin.data) v = v > 0.5 ? 1.0 : 0.0;

    csv << c.name << ",dice,all," << fmt(metrics::dice_voxel(bin, label)) << "\n";
    if (c.kind == "branching") {
      for (const char* region : {"main", "branch"}) {
        const std::string rrel = "phantom/" + c.name + "_label_" + region + ".nrrd";
        if (!fs::exists(ctx.abs(rrel))) continue;
        volume::VoxelGrid rl = volume::load_volume(ctx.abs(rrel).string());
        // dice restricted to the region's voxels
        volume::VoxelGrid bin_r = bin, lab_r = label;
        for (std::size_t v = 0; v < rl.data.size(); ++v)
          if (rl.data[v] == 0.0) { bin_r.data[v] = 0.0; lab_r.data[v] = 0.0; }
        csv << c.name << ",dice," << region << "," << fmt(metrics::dice_voxel(bin_r, lab_r))
            << "\n";
      }
    }

    const std::string truth_rel = "phantom/" + c.name + "_truth.obj";
    if (fs::exists(ctx.abs(truth_rel))) {
      mesh::TriMesh truth = mesh::load_obj(ctx.abs(truth_rel).string());
      auto add_surface_rows = [&](const std::string& rel, const std::string& tag) {
        if (!fs::exists(ctx.abs(rel))) return;
        mesh::TriMesh m = mesh::load_obj(ctx.abs(rel).string());
        csv << c.name << ",asd_" << tag << ",all," << fmt(metrics::asd(m.vertices, truth.vertices))
            << "\n";
        csv << c.name << ",hausdorff_" << tag << ",all,"
            << fmt(metrics::hausdorff(m.vertices, truth.vertices)) << "\n";
      };
      add_surface_rows("reconstruct/" + c.name + "_init.obj", "init");
      add_surface_rows("deform/" + c.name + "_final.obj", "final");
    }

    const std::string std_rel = "segment/" + c.name + "_prob_std.nrrd";
    if (fs::exists(ctx.abs(std_rel))) {
      volume::VoxelGrid sg = volume::load_volume(ctx.abs(std_rel).string());
      double mean_std = 0.0;
      for (double v : sg.data) mean_std += v;
      csv << c.name << ",mean_prob_std,all," << fmt(mean_std / double(sg.data.size())) << "\n";
    }
  }
  write_text(ctx.abs("evaluate/metrics.csv"), csv.str());
  ctx.declare("evaluate", "evaluate/metrics.csv", {});
}

using StageFn = void (*)(RunContext&);

const std::map<std::string, StageFn>& stage_table() {
  static const std::map<std::string, StageFn> table{
      {"phantom", stage_phantom},     {"train", stage_train},
      {"segment", stage_segment},     {"reconstruct", stage_reconstruct},
      {"deform", stage_deform},       {"evaluate", stage_evaluate},
  };
  return table;
}

// Stage caching: a stamp records the stage's config+seed key and artifact
// hashes; a stage whose stamp matches and whose artifacts are intact is
// skipped (its manifest entries are replayed from the stamp).
json stage_key(const PipelineConfig& cfg, const std::string& stage) {
  json j;
  j["seed"] = cfg.seed;
  j["stage"] = stage;
  if (stage == "phantom") {
    j["cases"] = json::array();
    for (const auto& c : cfg.phantom_cases) {
      json cc;
      cc["name"] = c.name; cc["kind"] = c.kind; cc["role"] = c.role;
      cc["dims"] = c.dims; cc["spacing"] = c.spacing; cc["axis"] = c.axis; cc["arc"] = c.arc;
      cc["radius_vox"] = c.radius_vox; cc["trunk_radius_vox"] = c.trunk_radius_vox;
      cc["branch_radius_vox"] = c.branch_radius_vox; cc["branches"] = c.branches;
      cc["foreground"] = c.foreground; cc["background"] = c.background;
      cc["noise_sd"] = c.noise_sd; cc["blur_sigma"] = c.blur_sigma;
      cc["buffer_sigma"] = c.buffer_sigma;
      j["cases"].push_back(cc);
    }
  } else if (stage == "train") {
    j["blocks"] = cfg.train.blocks; j["base_channels"] = cfg.train.base_channels;
    j["epochs"] = cfg.train.epochs; j["learning_rate"] = cfg.train.learning_rate;
    j["beta"] = cfg.train.beta; j["gate_mu"] = cfg.train.gate_mu;
    j["auto_gate_mu"] = cfg.train.auto_gate_mu; j["mask_background"] = cfg.train.mask_background;
    j["log_scales"] = cfg.train.log_scales;
  } else if (stage == "segment") {
    j["checkpoint"] = cfg.segment.checkpoint; j["ensemble"] = cfg.segment.ensemble;
    j["tile"] = cfg.segment.tile; j["overlap"] = cfg.segment.overlap;
  } else if (stage == "reconstruct") {
    j["iso"] = cfg.reconstruct.iso; j["target_vertices"] = cfg.reconstruct.target_vertices;
    j["smooth_steps"] = cfg.reconstruct.smooth_steps; j["smooth_lr"] = cfg.reconstruct.smooth_lr;
    j["w_normal"] = cfg.reconstruct.w_normal; j["w_edge"] = cfg.reconstruct.w_edge;
    j["w_laplacian"] = cfg.reconstruct.w_laplacian;
  } else if (stage == "deform") {
    j["epochs"] = cfg.deform.epochs; j["learning_rate"] = cfg.deform.learning_rate;
    j["control_points"] = cfg.deform.control_points; j["kernel_sigma"] = cfg.deform.kernel_sigma;
    j["steps"] = cfg.deform.steps; j["weights"] = cfg.deform.weights;
    j["energy_floor"] = cfg.deform.energy_floor;
  }
  return j;
}

bool try_replay_stamp(RunContext& ctx, const std::string& stage, const std::string& key) {
  fs::path stamp = ctx.abs("stamps/" + stage + ".json");
  if (!fs::exists(stamp)) return false;
  json j;
  try {
    j = parse_json_no_duplicates(read_text(stamp));
  } catch (...) {
    return false;
  }
  if (j.value("key", "") != key) return false;
  for (const auto& a : j.at("artifacts")) {
    std::string rel = a.at("path").get<std::string>();
    if (!fs::exists(ctx.abs(rel))) return false;
    if (file_hash_hex(ctx.abs(rel).string()) != a.at("hash").get<std::string>()) return false;
  }
  for (const auto& a : j.at("artifacts")) {
    ManifestEntry e;
    e.path = a.at("path").get<std::string>();
    e.stage = stage;
    e.hash = a.at("hash").get<std::string>();
    for (const auto& in : a.at("inputs")) e.inputs.push_back(in.get<std::string>());
    ctx.manifest.push_back(std::move(e));
  }
  return true;
}

void write_stamp(RunContext& ctx, const std::string& stage, const std::string& key,
                 std::size_t first_entry) {
  json j;
  j["key"] = key;
  j["artifacts"] = json::array();
  for (std::size_t i = first_entry; i < ctx.manifest.size(); ++i) {
    const ManifestEntry& e = ctx.manifest[i];
    json a;
    a["path"] = e.path;
    a["hash"] = e.hash;
    a["inputs"] = e.inputs;
    j["artifacts"].push_back(a);
  }
  write_text(ctx.abs("stamps/" + stage + ".json"), j.dump(2) + "\n");
}

void run_one_stage(RunContext& ctx, const std::string& stage) {
  auto it = stage_table().find(stage);
  if (it == stage_table().end()) throw ConfigError("unknown stage '" + stage + "'");
  const std::string key = hex64(fnv1a64(stage_key(ctx.cfg, stage).dump().data(),
                                        stage_key(ctx.cfg, stage).dump().size()));
  if (try_replay_stamp(ctx, stage, key)) return;
  std::size_t first = ctx.manifest.size();
  it->second(ctx);
  write_stamp(ctx, stage, key, first);
}

}  // namespace

void emit_reports(const std::string& run_dir) {
  fs::path out(run_dir);
  json summary;
  summary["present"] = json::array();
  summary["missing"] = json::array();

  auto note = [&](const std::string& name, bool present) {
    summary[present ? "present" : "missing"].push_back(name);
  };

  // metrics.csv
  if (fs::exists(out / "evaluate/metrics.csv")) {
    write_text(out / "metrics.csv", read_text(out / "evaluate/metrics.csv"));
    note("metrics.csv", true);
  } else {
    note("metrics.csv", false);
  }

  // loss_seg.csv
  if (fs::exists(out / "train/loss_seg.csv")) {
    write_text(out / "loss_seg.csv", read_text(out / "train/loss_seg.csv"));
    note("loss_seg.csv", true);
  } else {
    note("loss_seg.csv", false);
  }

  // loss_deform.csv: concatenated per-case histories in sorted order
  std::vector<fs::path> deform_csvs;
  if (fs::exists(out / "deform"))
    for (const auto& e : fs::directory_iterator(out / "deform"))
      if (e.path().extension() == ".csv") deform_csvs.push_back(e.path());
  std::sort(deform_csvs.begin(), deform_csvs.end());
  if (!deform_csvs.empty()) {
    std::ostringstream agg;
    agg << "epoch,total,misalign,normal,edge,laplacian\n";
    for (const fs::path& p : deform_csvs) {
      std::istringstream in(read_text(p));
      std::string line;
      std::getline(in, line);  // drop header
      while (std::getline(in, line))
        if (!line.empty()) agg << line << "\n";
    }
    write_text(out / "loss_deform.csv", agg.str());
    note("loss_deform.csv", true);
  } else {
    note("loss_deform.csv", false);
  }

  // quality.json keyed by case
  json quality = json::object();
  if (fs::exists(out / "reconstruct")) {
    std::vector<fs::path> qfiles;
    for (const auto& e : fs::directory_iterator(out / "reconstruct"))
      if (e.path().extension() == ".json") qfiles.push_back(e.path());
    std::sort(qfiles.begin(), qfiles.end());
    for (const fs::path& p : qfiles) {
      std::string name = p.stem().string();
      const std::string suffix = "_quality";
      if (name.size() > suffix.size() && name.substr(name.size() - suffix.size()) == suffix)
        name = name.substr(0, name.size() - suffix.size());
      quality[name] = parse_json_no_duplicates(read_text(p));
    }
  }
  if (!quality.empty()) {
    write_text(out / "quality.json", quality.dump(2) + "\n");
    note("quality.json", true);
  } else {
    note("quality.json", false);
  }

  write_text(out / "summary.json", summary.dump(2) + "\n");
}

std::vector<ManifestEntry> run_pipeline(const PipelineConfig& cfg) {
  RunContext ctx{cfg, fs::path(cfg.out_dir), {}};
  fs::create_directories(ctx.out);
  for (const std::string& stage : cfg.stages) run_one_stage(ctx, stage);
  emit_reports(cfg.out_dir);

  std::sort(ctx.manifest.begin(), ctx.manifest.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  json j = json::array();
  for (const ManifestEntry& e : ctx.manifest) {
    json a;
    a["path"] = e.path;
    a["stage"] = e.stage;
    a["inputs"] = e.inputs;
    a["hash"] = e.hash;
    j.push_back(a);
  }
  write_text(ctx.out / "manifest.json", j.dump(2) + "\n");
  return ctx.manifest;
}

void run_stage(const PipelineConfig& cfg, const std::string& stage) {
  RunContext ctx{cfg, fs::path(cfg.out_dir), {}};
  fs::create_directories(ctx.out);
  run_one_stage(ctx, stage);
}

}  // namespace vf::pipeline
