#include "nvs/cli.hpp"

#include "nvs/hash.hpp"
#include "nvs/scoring.hpp"
#include "nvs/training.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#ifndef NVS_GIT_REVISION
#define NVS_GIT_REVISION "unknown"
#endif

namespace nvs::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

fs::path default_output(const std::string& command) {
  const char* root = std::getenv(kOutputRootEnv);
  return fs::path(root && *root ? root : "runs") / command;
}

void require_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw UsageError("no dataset manifest in " + dir.string());
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw std::runtime_error("invalid JSON in " + p.string() + ": " + e.what());
  }
}

/// Writes the resolved configuration with its fingerprint next to the outputs.
void write_snapshot(const fs::path& out, const std::string& command, const std::vector<std::string>& args,
                    json resolved) {
  // The fingerprint leaves out the raw arguments so the output location does not change it.
  json j = {{"command", command}, {"resolved", resolved}, {"git_revision", NVS_GIT_REVISION}};
  j["fingerprint"] = fingerprint(j.dump());
  j["args"] = args;
  write_text(out / "config.json", j.dump(2) + "\n");
}

json camera_json(const Camera<double>& c) {
  json k = json::array();
  for (int r = 0; r < 3; ++r) k.push_back({c.K(r, 0), c.K(r, 1), c.K(r, 2)});
  return {{"K", k}, {"height", c.height}, {"width", c.width}};
}

Camera<double> camera_from_json(const json& j) {
  Camera<double> c;
  for (int r = 0; r < 3; ++r)
    for (int col = 0; col < 3; ++col) c.K(r, col) = j.at("K").at(r).at(col).get<double>();
  c.height = j.at("height").get<Eigen::Index>();
  c.width = j.at("width").get<Eigen::Index>();
  c.validate();
  return c;
}

std::string numbered(const char* stem, int i, const char* ext) {
  std::ostringstream os;
  os << stem << std::setw(3) << std::setfill('0') << i << ext;
  return os.str();
}

XUNetConfig model_config(const std::string& spec) {
  if (spec == "paper" || spec == "desk" || spec == "tiny") return XUNetConfig::named(spec);
  require_file(spec, "model config");
  auto c = read_json(spec).get<XUNetConfig>();
  c.validate();
  return c;
}

TrainConfig train_config(const std::string& spec) {
  if (spec == "paper" || spec == "desk" || spec == "smoke") return TrainConfig::named(spec);
  require_file(spec, "training config");
  return TrainConfig::from_file(spec, TrainConfig::desk());
}

// A generated set of views: conditioning views first, then sampled frames.
struct SampleSet {
  Camera<double> camera;
  std::vector<PosedImage> conditioning;
  std::vector<PosedImage> frames;
  std::vector<int> target_views;  // dataset view index per frame, -1 for free poses
  json meta;
};

void write_samples(const fs::path& out, const SampleSet& s) {
  json cond = json::array(), frames = json::array();
  for (std::size_t i = 0; i < s.conditioning.size(); ++i) {
    const auto img = numbered("cond_", static_cast<int>(i), ".png");
    const auto pose = numbered("cond_pose_", static_cast<int>(i), ".txt");
    write_png(out / img, to_unit(s.conditioning[i].image));
    write_pose_file(out / pose, s.conditioning[i].pose);
    cond.push_back({{"image", img}, {"pose", pose}});
  }
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    const auto img = numbered("frame_", static_cast<int>(i), ".png");
    const auto pose = numbered("frame_pose_", static_cast<int>(i), ".txt");
    write_png(out / img, to_unit(s.frames[i].image));
    write_pose_file(out / pose, s.frames[i].pose);
    frames.push_back({{"image", img}, {"pose", pose}, {"target_view", s.target_views[i]}});
  }
  json j = {{"format", "nvs-samples"}, {"version", 1},      {"camera", camera_json(s.camera)},
            {"conditioning", cond},     {"frames", frames}, {"meta", s.meta}};
  write_text(out / "samples.json", j.dump(2) + "\n");
}

SampleSet read_samples(const fs::path& dir) {
  const json j = read_json(dir / "samples.json");
  if (j.value("format", "") != "nvs-samples" || j.value("version", 0) != 1) {
    throw std::runtime_error("unsupported samples manifest in " + dir.string());
  }
  SampleSet s;
  s.camera = camera_from_json(j.at("camera"));
  for (const auto& c : j.at("conditioning")) {
    s.conditioning.push_back({to_signed(read_png(dir / c.at("image").get<std::string>())),
                              read_pose_file(dir / c.at("pose").get<std::string>())});
  }
  for (const auto& f : j.at("frames")) {
    s.frames.push_back({to_signed(read_png(dir / f.at("image").get<std::string>())),
                        read_pose_file(dir / f.at("pose").get<std::string>())});
    s.target_views.push_back(f.value("target_view", -1));
  }
  s.meta = j.value("meta", json::object());
  return s;
}

struct SampleOptions {
  std::string mode = "stochastic";
  int steps = 256;
  double guidance = 3.0;
  std::uint64_t seed = 0;

  SamplerConfig resolve() const {
    SamplerConfig c;
    c.mode = sampler_mode_from_string(mode);
    c.num_steps = steps;
    c.guidance_weight = guidance;
    c.seed = seed;
    c.validate();
    return c;
  }
};

void add_sample_options(CLI::App* app, SampleOptions& o) {
  app->add_option("--mode", o.mode, "stochastic, naive or regression")
      ->check(CLI::IsMember({"stochastic", "naive", "regression"}));
  app->add_option("--steps", o.steps, "Denoising steps per frame")->check(CLI::PositiveNumber);
  app->add_option("--guidance", o.guidance, "Guidance weight");
  app->add_option("--seed", o.seed, "Sampling seed");
}

json sample_options_json(const SampleOptions& o) {
  return {{"mode", o.mode}, {"steps", o.steps}, {"guidance", o.guidance}, {"seed", o.seed}};
}

/// Conditions on view `cond` of a scene and generates the views listed in `targets`.
SampleSet generate_for_scene(const LoadedModel& model, const SceneData& scene, int cond,
                             const std::vector<int>& targets, const SamplerConfig& cfg,
                             const std::vector<Pose<double>>& free_poses = {}) {
  if (cond < 0 || cond >= scene.num_views()) {
    throw std::runtime_error("conditioning view " + std::to_string(cond) + " out of range; scene " + scene.id +
                             " has " + std::to_string(scene.num_views()) + " views");
  }
  if (scene.camera.height != model.model->config().image_size) {
    throw std::runtime_error("dataset resolution " + std::to_string(scene.camera.height) +
                             " does not match the model input size " +
                             std::to_string(model.model->config().image_size));
  }
  DenoiserModel eps(*model.model, model.params, model.schedule);
  ConditioningSet set;
  set.camera = scene.camera;
  set.add({scene.images[static_cast<std::size_t>(cond)], scene.poses[static_cast<std::size_t>(cond)]});
  std::vector<Pose<double>> poses = free_poses;
  std::vector<int> target_views(free_poses.size(), -1);
  for (int t : targets) {
    poses.push_back(scene.poses[static_cast<std::size_t>(t)]);
    target_views.push_back(t);
  }
  const PosedImage input = set.views.front();
  const Trajectory traj = generate_trajectory(eps, set, poses, cfg);
  SampleSet s;
  s.camera = scene.camera;
  s.conditioning.push_back(input);
  s.frames = traj.frames;
  s.target_views = target_views;
  return s;
}

std::vector<int> default_targets(const SceneData& scene, int cond, int limit) {
  std::vector<int> t;
  for (int v = 0; v < scene.num_views(); ++v) {
    if (v != cond && (limit <= 0 || static_cast<int>(t.size()) < limit)) t.push_back(v);
  }
  return t;
}

int pick_scene(const Dataset& data, const std::string& split, int index) {
  const auto ids = data.split_indices(split);
  if (ids.empty()) throw std::runtime_error("no scenes in split '" + split + "'");
  if (index < 0 || index >= static_cast<int>(ids.size())) {
    throw std::runtime_error("scene index " + std::to_string(index) + " out of range for split '" + split + "'");
  }
  return ids[static_cast<std::size_t>(index)];
}

std::vector<int> read_indices(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw std::runtime_error("cannot read " + p.string());
  std::vector<int> v;
  std::string tok;
  while (f >> tok) {
    for (char& c : tok)
      if (c == ',' || c == '[' || c == ']') c = ' ';
    std::istringstream is(tok);
    int i;
    while (is >> i) v.push_back(i);
  }
  return v;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pose-conditional diffusion for novel view synthesis", "nvs"};
  app.require_subcommand(1);
  app.fallthrough(false);
  fs::path out_dir;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Render a synthetic multi-view dataset");
  DatasetOptions dopt;
  double test_rmin = 0, test_rmax = 0;
  gen->add_option("--out", out_dir, "Output directory");
  gen->add_option("--scenes", dopt.num_scenes, "Number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--views", dopt.views_per_scene, "Views per scene")->check(CLI::PositiveNumber);
  gen->add_option("--resolution", dopt.resolution, "Image size in pixels")->check(CLI::PositiveNumber);
  gen->add_option("--radius-min", dopt.radius_min, "Smallest camera distance");
  gen->add_option("--radius-max", dopt.radius_max, "Largest camera distance");
  gen->add_option("--test-scenes", dopt.test_scenes, "Trailing scenes put in the test split");
  gen->add_option("--test-radius-min", test_rmin, "Camera distance range for test scenes");
  gen->add_option("--test-radius-max", test_rmax, "Camera distance range for test scenes");
  gen->add_option("--seed", dopt.seed, "Scene seed");

  // train
  auto* train = app.add_subcommand("train", "Train a denoiser on a dataset");
  fs::path data_dir, resume;
  std::string model_name = "desk", config_name = "desk", objective;
  int steps = -1;
  std::int64_t train_seed = -1;
  train->add_option("--data", data_dir, "Dataset directory")->required();
  train->add_option("--out", out_dir, "Output directory");
  train->add_option("--model", model_name, "paper, desk, tiny or a JSON model config");
  train->add_option("--config", config_name, "paper, desk, smoke or a key = value training config file");
  train->add_option("--steps", steps, "Override the number of training steps")->check(CLI::NonNegativeNumber);
  train->add_option("--objective", objective, "diffusion or regression")
      ->check(CLI::IsMember({"diffusion", "regression"}));
  train->add_option("--seed", train_seed, "Override the training seed")->check(CLI::NonNegativeNumber);
  train->add_option("--resume", resume, "Continue from a checkpoint");

  // sample
  auto* sample = app.add_subcommand("sample", "Generate views of one scene from a checkpoint");
  fs::path checkpoint;
  std::string split = "all";
  int scene_index = 0, cond_view = 64, frames = 8, orbit = 0;
  double orbit_elevation = 0.5, orbit_radius = 0.0;
  fs::path pose_list;
  SampleOptions sopt;
  sample->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  sample->add_option("--data", data_dir, "Dataset directory")->required();
  sample->add_option("--out", out_dir, "Output directory");
  sample->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  sample->add_option("--scene", scene_index, "Scene index within the split");
  sample->add_option("--cond", cond_view, "Conditioning view index");
  sample->add_option("--frames", frames, "Dataset views to generate (0 for every other view)")
      ->check(CLI::NonNegativeNumber);
  auto* orbit_opt = sample->add_option("--orbit", orbit, "Generate an orbit of this many poses instead")
                        ->check(CLI::PositiveNumber);
  sample->add_option("--elevation", orbit_elevation, "Orbit elevation in radians");
  sample->add_option("--radius", orbit_radius, "Orbit radius (default: distance of the conditioning camera)");
  auto* poses_opt = sample->add_option("--poses", pose_list, "Text file listing pose files to generate instead");
  orbit_opt->excludes(poses_opt);
  add_sample_options(sample, sopt);

  // eval
  auto* eval = app.add_subcommand("eval", "PSNR/SSIM of generated views against ground truth");
  std::string eval_split = "test";
  int eval_cond = 64, max_scenes = 0, eval_frames = 0;
  bool save_frames = false;
  SampleOptions eopt;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory")->required();
  eval->add_option("--out", out_dir, "Output directory");
  eval->add_option("--split", eval_split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  eval->add_option("--cond", eval_cond, "Conditioning view index");
  eval->add_option("--max-scenes", max_scenes, "Evaluate at most this many scenes (0 for all)")
      ->check(CLI::NonNegativeNumber);
  eval->add_option("--frames", eval_frames, "Generate at most this many views per scene (0 for all)")
      ->check(CLI::NonNegativeNumber);
  eval->add_flag("--save-frames", save_frames, "Write the generated views");
  add_sample_options(eval, eopt);

  // score
  auto* score = app.add_subcommand("score", "3D consistency score of a set of views");
  fs::path samples_dir, holdout_file, field_config;
  double holdout_frac = 0.1;
  std::uint64_t holdout_seed = 0;
  int field_steps = -1, rays = -1;
  bool dump_renders = false;
  score->add_option("--samples", samples_dir, "Directory written by `sample`");
  score->add_option("--data", data_dir, "Score ground-truth views of a dataset scene instead");
  score->add_option("--scene", scene_index, "Scene index with --data");
  score->add_option("--split", split, "Split with --data")->check(CLI::IsMember({"train", "test", "all"}));
  score->add_option("--out", out_dir, "Output directory");
  score->add_option("--holdout-frac", holdout_frac, "Share of views held out")->check(CLI::Range(0.0, 1.0));
  score->add_option("--holdout-seed", holdout_seed, "Seed of the held-out choice");
  score->add_option("--holdout", holdout_file, "File of held-out view indices (overrides the seeded choice)");
  score->add_option("--field-config", field_config, "JSON field training config");
  score->add_option("--field-steps", field_steps, "Override field training steps")->check(CLI::NonNegativeNumber);
  score->add_option("--rays", rays, "Override rays per field step")->check(CLI::PositiveNumber);
  score->add_flag("--dump-renders", dump_renders, "Write renders of the held-out poses");
  score->get_option("--samples")->excludes(score->get_option("--data"));

  std::vector<const char*> argv{"nvs"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "nvs: " << e.what() << "\n" << "Run with --help for usage.\n";
    return kUsageError;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  if (out_dir.empty()) out_dir = default_output(command);

  try {
    // Everything referenced is checked before any output is written.
    if (command == "gen-data") {
      if (test_rmin > 0 || test_rmax > 0) dopt.test_radius = std::make_pair(test_rmin, test_rmax);
      try {
        dopt.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      fs::create_directories(out_dir);
      const auto m = make_dataset(out_dir, dopt);
      write_snapshot(out_dir, command, args, manifest_to_json(m).at("options"));
      out << "wrote " << m.scenes.size() << " scenes to " << out_dir.string() << "\n";
      return kSuccess;
    }

    if (command == "train") {
      require_dataset(data_dir);
      if (!resume.empty()) require_file(resume, "checkpoint");
      XUNetConfig mc;
      TrainConfig tc;
      try {
        mc = model_config(model_name);
        tc = train_config(config_name);
        if (steps >= 0) tc.total_steps = steps;
        if (!objective.empty()) tc.objective = objective == "regression" ? Objective::regression : Objective::diffusion;
        if (train_seed >= 0) tc.seed = static_cast<std::uint64_t>(train_seed);
        tc.validate();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const Dataset data = load_dataset(data_dir);
      if (data.manifest.resolution != mc.image_size) {
        throw std::runtime_error("dataset resolution " + std::to_string(data.manifest.resolution) +
                                 " does not match the model input size " + std::to_string(mc.image_size));
      }
      Trainer trainer = resume.empty() ? Trainer(mc, tc) : Trainer::load(resume);
      if (!resume.empty()) {
        mc = trainer.model_config();
        tc = trainer.config();
      }
      fs::create_directories(out_dir);
      write_snapshot(out_dir, command, args,
                     {{"model", mc}, {"train", tc}, {"data", fs::absolute(data_dir).string()},
                      {"resume", resume.string()}});
      PairSampler sampler(data, "train", tc.seed ^ 0x9e3779b97f4a7c15ULL);
      std::ofstream log(out_dir / "train_log.txt");
      const int remaining = std::max<int>(0, tc.total_steps - static_cast<int>(trainer.state().step));
      const auto losses = train_loop(trainer, sampler, remaining, &log, out_dir / "checkpoint.ckpt");
      if (remaining == 0) trainer.save(out_dir / "checkpoint.ckpt");
      json summary = {{"steps", trainer.state().step}, {"examples_seen", trainer.state().examples_seen}};
      if (!losses.empty()) {
        // Means over the first and last tenth of the run; single steps are too noisy to compare.
        const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
        const auto mean = [&](std::size_t a) {
          return std::accumulate(losses.begin() + a, losses.begin() + a + w, 0.0) / static_cast<double>(w);
        };
        summary["first_loss"] = losses.front();
        summary["last_loss"] = losses.back();
        summary["head_mean_loss"] = mean(0);
        summary["tail_mean_loss"] = mean(losses.size() - w);
        summary["window"] = w;
      }
      write_text(out_dir / "train_summary.json", summary.dump(2) + "\n");
      out << "trained " << trainer.state().step << " steps";
      if (!losses.empty()) out << ", loss " << losses.front() << " -> " << losses.back();
      out << "; checkpoint " << (out_dir / "checkpoint.ckpt").string() << "\n";
      return kSuccess;
    }

    if (command == "sample") {
      require_file(checkpoint, "checkpoint");
      require_dataset(data_dir);
      if (!pose_list.empty()) require_file(pose_list, "pose list");
      SamplerConfig sc;
      try {
        sc = sopt.resolve();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const LoadedModel model = load_model(checkpoint);
      const Dataset data = load_dataset(data_dir);
      const SceneData& scene = data.scenes[static_cast<std::size_t>(pick_scene(data, split, scene_index))];
      if (cond_view < 0 || cond_view >= scene.num_views()) {
        throw UsageError("conditioning view " + std::to_string(cond_view) + " out of range; scene " + scene.id +
                         " has " + std::to_string(scene.num_views()) + " views");
      }
      std::vector<Pose<double>> free_poses;
      if (orbit > 0) {
        const double r = orbit_radius > 0 ? orbit_radius : scene.poses[static_cast<std::size_t>(cond_view)].t.norm();
        free_poses = orbit_trajectory(orbit, orbit_elevation, r);
      } else if (!pose_list.empty()) {
        std::ifstream f(pose_list);
        std::string line;
        while (std::getline(f, line)) {
          if (line.empty()) continue;
          fs::path pf(line);
          if (pf.is_relative()) pf = pose_list.parent_path() / pf;
          free_poses.push_back(read_pose_file(pf));
        }
        if (free_poses.empty()) throw UsageError("no poses listed in " + pose_list.string());
      }
      const auto targets = free_poses.empty() ? default_targets(scene, cond_view, frames) : std::vector<int>{};
      SampleSet s = generate_for_scene(model, scene, cond_view, targets, sc, free_poses);
      s.meta = {{"scene", scene.id}, {"cond_view", cond_view}, {"sampler", sample_options_json(sopt)}};
      fs::create_directories(out_dir);
      write_snapshot(out_dir, command, args,
                     {{"checkpoint", fs::absolute(checkpoint).string()},
                      {"data", fs::absolute(data_dir).string()},
                      {"split", split},
                      {"scene", scene.id},
                      {"cond_view", cond_view},
                      {"frames", frames},
                      {"orbit", {{"count", orbit}, {"elevation", orbit_elevation}, {"radius", orbit_radius}}},
                      {"poses", pose_list.string()},
                      {"sampler", sample_options_json(sopt)}});
      write_samples(out_dir, s);
      out << "generated " << s.frames.size() << " views of " << scene.id << " in " << out_dir.string() << "\n";
      return kSuccess;
    }

    if (command == "eval") {
      require_file(checkpoint, "checkpoint");
      require_dataset(data_dir);
      SamplerConfig sc;
      try {
        sc = eopt.resolve();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      const LoadedModel model = load_model(checkpoint);
      const Dataset data = load_dataset(data_dir);
      auto ids = data.split_indices(eval_split);
      if (ids.empty()) throw std::runtime_error("no scenes in split '" + eval_split + "'");
      if (max_scenes > 0 && static_cast<int>(ids.size()) > max_scenes) ids.resize(static_cast<std::size_t>(max_scenes));
      fs::create_directories(out_dir);
      write_snapshot(out_dir, command, args,
                     {{"checkpoint", fs::absolute(checkpoint).string()},
                      {"data", fs::absolute(data_dir).string()},
                      {"split", eval_split},
                      {"cond_view", eval_cond},
                      {"max_scenes", max_scenes},
                      {"frames", eval_frames},
                      {"sampler", sample_options_json(eopt)}});
      json scenes = json::array();
      double psnr_sum = 0, ssim_sum = 0;
      for (int id : ids) {
        const SceneData& scene = data.scenes[static_cast<std::size_t>(id)];
        const SampleSet s = generate_for_scene(model, scene, eval_cond, default_targets(scene, eval_cond, eval_frames), sc);
        double p = 0, q = 0;
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
          const Image gen = to_unit(s.frames[i].image);
          const Image ref = to_unit(scene.images[static_cast<std::size_t>(s.target_views[i])]);
          p += psnr(gen, ref);
          q += ssim(gen, ref);
        }
        p /= static_cast<double>(s.frames.size());
        q /= static_cast<double>(s.frames.size());
        psnr_sum += p;
        ssim_sum += q;
        scenes.push_back({{"scene", scene.id}, {"psnr", p}, {"ssim", q}, {"frames", s.frames.size()}});
        if (save_frames) {
          fs::create_directories(out_dir / scene.id);
          write_samples(out_dir / scene.id, s);
        }
        out << scene.id << ": PSNR " << p << " dB, SSIM " << q << "\n";
      }
      const double n = static_cast<double>(ids.size());
      json report = {{"format", "nvs-eval-report"}, {"psnr", psnr_sum / n}, {"ssim", ssim_sum / n}, {"scenes", scenes}};
      write_text(out_dir / "eval.json", report.dump(2) + "\n");
      out << "mean PSNR " << psnr_sum / n << " dB, SSIM " << ssim_sum / n << "\n";
      return kSuccess;
    }

    // score
    if (samples_dir.empty() == data_dir.empty()) throw UsageError("score needs exactly one of --samples or --data");
    if (!samples_dir.empty()) require_file(samples_dir / "samples.json", "samples manifest");
    if (!data_dir.empty()) require_dataset(data_dir);
    if (!holdout_file.empty()) require_file(holdout_file, "holdout file");
    if (!field_config.empty()) require_file(field_config, "field config");
    FieldTrainConfig fc;
    try {
      if (!field_config.empty()) fc = read_json(field_config).get<FieldTrainConfig>();
      if (field_steps >= 0) fc.steps = field_steps;
      if (rays > 0) fc.rays_per_step = rays;
      fc.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }

    std::vector<PosedImage> views;
    std::vector<int> conditioning;
    Camera<double> camera;
    std::string scene_id;
    if (!samples_dir.empty()) {
      const SampleSet s = read_samples(samples_dir);
      camera = s.camera;
      views = s.conditioning;
      for (std::size_t i = 0; i < views.size(); ++i) conditioning.push_back(static_cast<int>(i));
      views.insert(views.end(), s.frames.begin(), s.frames.end());
      scene_id = s.meta.value("scene", "samples");
    } else {
      const Dataset data = load_dataset(data_dir);
      const SceneData& scene = data.scenes[static_cast<std::size_t>(pick_scene(data, split, scene_index))];
      camera = scene.camera;
      for (int v = 0; v < scene.num_views(); ++v) {
        views.push_back({scene.images[static_cast<std::size_t>(v)], scene.poses[static_cast<std::size_t>(v)]});
      }
      scene_id = scene.id;
    }
    const std::vector<int> holdout = holdout_file.empty()
                                         ? holdout_indices(static_cast<int>(views.size()), holdout_frac,
                                                           holdout_seed, conditioning)
                                         : read_indices(holdout_file);
    for (int h : holdout) {
      if (std::find(conditioning.begin(), conditioning.end(), h) != conditioning.end()) {
        throw std::runtime_error("held-out view " + std::to_string(h) + " is a conditioning view");
      }
    }
    fs::create_directories(out_dir);
    const json resolved = {{"samples", samples_dir.empty() ? "" : fs::absolute(samples_dir).string()},
                           {"data", data_dir.empty() ? "" : fs::absolute(data_dir).string()},
                           {"scene", scene_id},
                           {"holdout", holdout},
                           {"holdout_frac", holdout_frac},
                           {"holdout_seed", holdout_seed},
                           {"field", fc}};
    write_snapshot(out_dir, command, args, resolved);
    std::vector<Image> renders;
    ConsistencyReport report;
    report.scenes.push_back(score_views(views, camera, holdout, fc, dump_renders ? &renders : nullptr));
    report.scenes.back().id = scene_id;
    report.config = resolved;
    report.finalize();
    write_text(out_dir / "report.json", json(report).dump(2) + "\n");
    std::ostringstream text;
    text << "scene " << scene_id << ": held-out PSNR " << report.psnr << " dB, SSIM " << report.ssim << " ("
         << report.holdout_count << " held out, " << report.scenes.back().train_views << " trained)\n";
    write_text(out_dir / "report.txt", text.str());
    for (std::size_t i = 0; i < renders.size(); ++i) {
      write_png(out_dir / numbered("holdout_", holdout[i], ".png"), renders[i]);
    }
    out << text.str();
    return kSuccess;
  } catch (const UsageError& e) {
    err << "nvs " << command << ": " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    err << "nvs " << command << ": " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace nvs::cli
