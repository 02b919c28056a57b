#include "nvs/sampling.hpp"

#include <cmath>
#include <stdexcept>

namespace nvs {

void ConditioningSet::add(PosedImage v) {
  if (v.image.rank() != 3 || v.image.dim(0) != camera.height || v.image.dim(1) != camera.width) {
    throw std::invalid_argument("conditioning view does not match the camera resolution");
  }
  views.push_back(std::move(v));
}

std::string to_string(SamplerMode m) {
  switch (m) {
    case SamplerMode::stochastic:
      return "stochastic";
    case SamplerMode::naive:
      return "naive";
    case SamplerMode::regression:
      return "regression";
  }
  return "?";
}

SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "stochastic") return SamplerMode::stochastic;
  if (s == "naive") return SamplerMode::naive;
  if (s == "regression") return SamplerMode::regression;
  throw std::invalid_argument("unknown sampler mode '" + s + "' (expected stochastic, naive or regression)");
}

void SamplerConfig::validate() const {
  if (num_steps < 1) throw std::invalid_argument("sampler: num_steps must be at least 1");
  if (!(guidance_weight >= 0)) throw std::invalid_argument("sampler: guidance weight must be nonnegative");
}

Tensor<float> EpsModel::predict(const DenoiserBatch<float>& batch) {
  evaluations_ += batch.size();
  return run(batch);
}

Tensor<float> DenoiserModel::run(const DenoiserBatch<float>& batch) {
  return model_->forward(*params_, batch, nn::ForwardContext{}).value();
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

Image noise_image(Rng& rng, Index h, Index w) { return rng.normal_tensor<float>({h, w, 3}); }

}  // namespace

SamplerStreams SamplerStreams::for_frame(std::uint64_t seed, std::uint64_t frame) {
  const std::uint64_t base = splitmix64(seed ^ splitmix64(frame + 1));
  return {Rng(base), Rng(splitmix64(base ^ 0xA5A5A5A5A5A5A5A5ULL))};
}

PosedImage sample_frame(EpsModel& model, const ConditioningSet& set, const Pose<double>& target,
                        const SamplerConfig& cfg, SamplerStreams& streams, std::vector<int>* chosen) {
  cfg.validate();
  if (set.views.empty()) throw std::invalid_argument("sample_frame: conditioning set is empty");
  const auto schedule = model.schedule();
  const Index h = set.camera.height, w = set.camera.width, frame = h * w * 3;
  const auto grid = schedule.grid(cfg.num_steps);
  const bool guided = cfg.guidance_weight != 1.0;

  Image z = noise_image(streams.noise, h, w);
  Image x_hat;
  for (int j = cfg.num_steps; j >= 1; --j) {
    const double logsnr = grid[j];
    const int i = cfg.mode == SamplerMode::stochastic ? static_cast<int>(streams.index.below(set.size())) : 0;
    if (chosen) chosen->push_back(i);

    // Element 0 is conditional on view i, element 1 is the unconditional override.
    const Index b = guided ? 2 : 1;
    DenoiserBatch<float> batch;
    batch.x = Tensor<float>({b, h, w, 3});
    batch.z = Tensor<float>({b, h, w, 3});
    batch.camera = set.camera;
    for (Index e = 0; e < b; ++e) {
      batch.z.array().segment(e * frame, frame) = z.array();
      batch.logsnr_z.push_back(logsnr);
      batch.pose_x.push_back(set.views[i].pose);
      batch.pose_z.push_back(target);
      batch.logsnr_x.push_back(schedule.logsnr_max);
      batch.cond_mask.push_back(1);
    }
    batch.x.array().head(frame) = set.views[i].image.array();
    if (guided) make_unconditional(batch, 1, streams.noise, schedule.logsnr_min);

    const Tensor<float> eps = model.predict(batch);
    Eigen::ArrayXf eps_hat = eps.array().head(frame);
    if (guided) eps_hat = guide(eps_hat, eps.array().segment(frame, frame).eval(), cfg.guidance_weight);

    x_hat = Image({h, w, 3});
    x_hat.array() = predict_x(z.array(), logsnr, eps_hat);
    if (j > 1) {
      const Eigen::ArrayXf noise = noise_image(streams.noise, h, w).array();
      z.array() = posterior_step(z.array(), x_hat.array(), logsnr, grid[j - 1], &noise);
    }
  }
  return {x_hat, target};
}

PosedImage regression_generate(EpsModel& model, const PosedImage& input, const Camera<double>& camera,
                               const Pose<double>& target, Rng& rng) {
  const auto schedule = model.schedule();
  const Index h = camera.height, w = camera.width;
  DenoiserBatch<float> batch;
  batch.x = input.image.reshaped({1, h, w, 3});
  batch.z = rng.normal_tensor<float>({1, h, w, 3});
  batch.logsnr_x = {schedule.logsnr_max};
  batch.logsnr_z = {schedule.logsnr_min};
  batch.pose_x = {input.pose};
  batch.pose_z = {target};
  batch.camera = camera;
  batch.cond_mask = {1};
  const Tensor<float> eps = model.predict(batch);
  Image out({h, w, 3});
  out.array() = predict_x(batch.z.array(), schedule.logsnr_min, eps.array());
  return {out, target};
}

Trajectory generate_trajectory(EpsModel& model, ConditioningSet& set, const std::vector<Pose<double>>& targets,
                               const SamplerConfig& cfg) {
  cfg.validate();
  if (set.views.empty()) throw std::invalid_argument("generate_trajectory: conditioning set is empty");
  Trajectory out;
  const PosedImage first = set.views.front();
  // A single index stream across the chain so conditioning choices can be replayed.
  Rng index = SamplerStreams::for_frame(cfg.seed, 0).index;
  for (std::size_t f = 0; f < targets.size(); ++f) {
    auto streams = SamplerStreams::for_frame(cfg.seed, f);
    streams.index = index;
    std::vector<int> chosen;
    PosedImage frame;
    if (cfg.mode == SamplerMode::regression) {
      frame = regression_generate(model, first, set.camera, targets[f], streams.noise);
      chosen.push_back(0);
    } else {
      frame = sample_frame(model, set, targets[f], cfg, streams, &chosen);
    }
    index = streams.index;
    set.add(frame);
    out.frames.push_back(std::move(frame));
    out.chosen.push_back(std::move(chosen));
  }
  return out;
}

std::vector<Pose<double>> orbit_trajectory(int count, double elevation, double radius, double start_azimuth) {
  std::vector<Pose<double>> poses;
  for (int i = 0; i < count; ++i) poses.push_back(orbit_pose(start_azimuth + 2 * M_PI * i / count, elevation, radius));
  return poses;
}

}  // namespace nvs
