#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "vesselforge/pipeline.hpp"

namespace {

int run(const std::string& what, const std::string& config_path, long long seed_override,
        const std::string& out_override) {
  vf::pipeline::PipelineConfig cfg;
  try {
    cfg = vf::pipeline::parse_config(config_path);
    if (seed_override >= 0) cfg.seed = std::uint64_t(seed_override);
    if (!out_override.empty()) cfg.out_dir = out_override;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  try {
    if (what == "pipeline") {
      auto manifest = vf::pipeline::run_pipeline(cfg);
      std::printf("pipeline ok: %zu artifacts in %s\n", manifest.size(), cfg.out_dir.c_str());
    } else {
      vf::pipeline::run_stage(cfg, what);
      std::printf("stage %s ok in %s\n", what.c_str(), cfg.out_dir.c_str());
    }
  } catch (const vf::pipeline::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "stage failure (%s): %s\n", what.c_str(), e.what());
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vesselforge: phantom -> segmentation -> mesh -> deformation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  long long seed = -1;
  std::string out_dir;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "pipeline config JSON")->required();
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out", out_dir, "override the output directory");
  };

  const char* names[] = {"pipeline", "phantom", "train", "segment", "reconstruct", "deform",
                         "evaluate"};
  for (const char* n : names) add_common(app.add_subcommand(n));

  CLI11_PARSE(app, argc, argv);
  for (const char* n : names)
    if (app.got_subcommand(n)) return run(n, config_path, seed, out_dir);
  return 2;
}
