#pragma once

#include "nvs/diffusion.hpp"
#include "nvs/image.hpp"
#include "nvs/xunet.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace nvs {

struct PosedImage {
  Image image;  // (H, W, 3) in [-1, 1]
  Pose<double> pose;
};

/// Views the sampler may condition on; grows as frames are generated.
struct ConditioningSet {
  Camera<double> camera;
  std::vector<PosedImage> views;

  std::size_t size() const { return views.size(); }
  void add(PosedImage v);
};

enum class SamplerMode { stochastic, naive, regression };

std::string to_string(SamplerMode m);
SamplerMode sampler_mode_from_string(const std::string& s);

struct SamplerConfig {
  int num_steps = 256;
  double guidance_weight = 3.0;
  SamplerMode mode = SamplerMode::stochastic;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Noise predictor used by the samplers; counts evaluated batch elements.
class EpsModel {
 public:
  virtual ~EpsModel() = default;
  /// Predicted noise for every z frame of `batch`.
  Tensor<float> predict(const DenoiserBatch<float>& batch);
  std::int64_t evaluations() const { return evaluations_; }
  virtual NoiseSchedule schedule() const { return {}; }

 protected:
  virtual Tensor<float> run(const DenoiserBatch<float>& batch) = 0;

 private:
  std::int64_t evaluations_ = 0;
};

class DenoiserModel : public EpsModel {
 public:
  DenoiserModel(const Denoiser& model, const ParamStore<float>& params, NoiseSchedule schedule = {})
      : model_(&model), params_(&params), schedule_(schedule) {}
  NoiseSchedule schedule() const override { return schedule_; }

 protected:
  Tensor<float> run(const DenoiserBatch<float>& batch) override;

 private:
  const Denoiser* model_;
  const ParamStore<float>* params_;
  NoiseSchedule schedule_;
};

/// Random streams of one generation: `noise` drives z and posterior noise,
/// `index` only picks conditioning views, so both modes share noise draws.
struct SamplerStreams {
  Rng noise;
  Rng index;

  static SamplerStreams for_frame(std::uint64_t seed, std::uint64_t frame);
};

/// Generates one view at `target`. Chosen conditioning indices (one per
/// step, 0-based) are appended to `chosen` when given.
PosedImage sample_frame(EpsModel& model, const ConditioningSet& set, const Pose<double>& target,
                        const SamplerConfig& cfg, SamplerStreams& streams, std::vector<int>* chosen = nullptr);

/// Single denoising step from white noise at the minimum log-SNR.
PosedImage regression_generate(EpsModel& model, const PosedImage& input, const Camera<double>& camera,
                               const Pose<double>& target, Rng& rng);

struct Trajectory {
  std::vector<PosedImage> frames;
  /// Conditioning indices chosen at every step of every frame.
  std::vector<std::vector<int>> chosen;
};

/// Samples each pose in order, adding every finished frame to `set`.
Trajectory generate_trajectory(EpsModel& model, ConditioningSet& set, const std::vector<Pose<double>>& targets,
                               const SamplerConfig& cfg);

/// Evenly spaced orbit at fixed elevation and radius.
std::vector<Pose<double>> orbit_trajectory(int count, double elevation, double radius, double start_azimuth = 0.0);

}  // namespace nvs
