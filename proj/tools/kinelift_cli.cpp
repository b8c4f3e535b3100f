// kinelift command line: pipeline orchestration, single stages, synthetic
// fixture generation, and SVG plotting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kinelift/pipeline.hpp"
#include "kinelift/synthgen.hpp"

namespace fs = std::filesystem;
using namespace kinelift;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string fixtures;
  std::string output_dir;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "pipeline config JSON")->required();
  cmd->add_option("--set", args.overrides, "override config values, e.g. --set sync.seed=5");
  cmd->add_option("--fixtures", args.fixtures,
                  "fixture file or directory (selects the fixture backend)");
  cmd->add_option("-o,--output", args.output_dir, "override output directory");
}

pipeline::PipelineConfig load_config(const ConfigArgs& args) {
  std::ifstream in(args.config_path);
  if (!in) throw config_error("cannot open config: " + args.config_path);
  nlohmann::json j;
  in >> j;
  for (const auto& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw config_error("--set expects key=value, got: " + kv);
    pipeline::apply_override(j, kv.substr(0, eq), kv.substr(eq + 1));
  }
  auto config = pipeline::PipelineConfig::from_json(j, fs::path(args.config_path).parent_path());
  if (!args.fixtures.empty()) {
    config.fixtures_path = fs::is_directory(args.fixtures)
                               ? (fs::path(args.fixtures) / "agent_fixtures.jsonl").string()
                               : args.fixtures;
  }
  if (!args.output_dir.empty()) config.output_dir = args.output_dir;
  return config;
}

int run_stages(const ConfigArgs& args, const std::vector<std::string>& stages, bool resume) {
  try {
    const auto config = load_config(args);
    pipeline::RunOptions options;
    options.stages = stages;
    options.resume = resume;
    pipeline::run(config, options);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

// Writes a fixture directory plus a ready-to-run config.json.
int run_synthgen(const synth::SceneSpec& spec, const std::string& out_dir) {
  try {
    synth::Scene scene(spec);
    scene.write(out_dir);

    pipeline::PipelineConfig config;
    config.video_a.poses_path = "poses_a.jsonl";
    config.video_b.poses_path = "poses_b.jsonl";
    config.video_a.fps = spec.cam_a.fps;
    config.video_b.fps = spec.cam_b.fps;
    config.fixtures_path = "agent_fixtures.jsonl";
    config.output_dir = "out";
    config.lift.image_width = spec.cam_a.width;
    config.lift.image_height = spec.cam_a.height;
    for (const auto& t : synth::default_triples())
      config.references[t.name] = "gt/gt_angles_" + t.name + ".csv";
    std::ofstream out((fs::path(out_dir) / "config.json").string(), std::ios::binary);
    out << config.to_json().dump(2) << '\n';
    std::cout << "fixture directory written to " << out_dir << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kinelift: uncalibrated two-view joint-angle pipeline"};
  app.require_subcommand(1);

  ConfigArgs args;
  std::vector<std::string> stage_filter;
  bool resume = false;

  auto* run_cmd = app.add_subcommand("run", "run the full pipeline");
  add_config_options(run_cmd, args);
  run_cmd->add_option("--stage", stage_filter, "run only the named stages");
  run_cmd->add_flag("--resume", resume, "skip stages whose outputs already validate");

  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const char* name : {"sync", "track", "lift", "angles"}) {
    auto* cmd = app.add_subcommand(name, std::string("run the ") + name + " stage only");
    add_config_options(cmd, args);
    stage_cmds.emplace_back(name, cmd);
  }

  // plot
  std::string plot_est, plot_ref, plot_out = "plot.svg";
  auto* plot_cmd = app.add_subcommand("plot", "render an angle series (and optional reference) as SVG");
  plot_cmd->add_option("--est", plot_est, "estimated angle csv")->required();
  plot_cmd->add_option("--ref", plot_ref, "reference angle csv");
  plot_cmd->add_option("-o,--output", plot_out, "output SVG path");

  // synthgen
  synth::SceneSpec spec;
  std::string synth_out = "fixtures";
  std::vector<std::int64_t> dups_a, dups_b;
  auto* synth_cmd = app.add_subcommand("synthgen", "generate a synthetic fixture directory");
  synth_cmd->add_option("-o,--output", synth_out, "fixture directory");
  synth_cmd->add_option("--duration", spec.duration_s, "seconds");
  synth_cmd->add_option("--fps-a", spec.cam_a.fps, "view A frame rate");
  synth_cmd->add_option("--fps-b", spec.cam_b.fps, "view B frame rate");
  synth_cmd->add_option("--baseline-deg", spec.cam_b.azimuth_deg, "camera B azimuth");
  synth_cmd->add_option("--distractors", spec.distractors, "extra crossing persons");
  synth_cmd->add_option("--noise-px", spec.noise_px, "keypoint noise sigma");
  synth_cmd->add_option("--outliers", spec.outlier_fraction, "outlier joint fraction");
  synth_cmd->add_option("--offset-ms", spec.clock_offset_ms, "clock offset of view B");
  synth_cmd->add_option("--dup-a", dups_a, "duplicated output frames in view A");
  synth_cmd->add_option("--dup-b", dups_b, "duplicated output frames in view B");
  synth_cmd->add_option("--seed", spec.seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  if (run_cmd->parsed()) return run_stages(args, stage_filter, resume);
  for (const auto& [name, cmd] : stage_cmds)
    if (cmd->parsed()) return run_stages(args, {name}, false);
  if (plot_cmd->parsed()) {
    try {
      const auto est = pipeline::load_angles_csv(plot_est);
      std::optional<kin::Series> ref;
      if (!plot_ref.empty()) ref = pipeline::load_angles_csv(plot_ref);
      std::ofstream out(plot_out, std::ios::binary);
      if (!out) throw input_error("cannot open for writing: " + plot_out);
      out << pipeline::plot_svg(est, ref ? &*ref : nullptr);
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  if (synth_cmd->parsed()) {
    spec.cam_a.dup_frames = dups_a;
    spec.cam_b.dup_frames = dups_b;
    return run_synthgen(spec, synth_out);
  }
  return 0;
}
