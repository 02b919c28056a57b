#pragma once

#include "nvs/diffusion.hpp"
#include "nvs/optim.hpp"
#include "nvs/scenes.hpp"
#include "nvs/xunet.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>

namespace nvs {

enum class Objective { diffusion, regression };

struct TrainConfig {
  int batch_size = 128;
  double peak_lr = 1e-4;
  double warmup_examples = 10'000'000;
  double uncond_prob = 0.1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double ema_half_life_examples = 500'000;
  int total_steps = 1000;
  std::uint64_t seed = 0;
  int log_every = 10;
  int checkpoint_every = 0;
  Objective objective = Objective::diffusion;

  static TrainConfig paper();
  /// Desk-scale schedule: short warmup and EMA half-life so a few thousand
  /// steps make progress.
  static TrainConfig desk();
  /// Few-hundred-step runs on the tiny model.
  static TrainConfig smoke();
  static TrainConfig named(const std::string& name);

  /// Parses `key = value` lines (# comments allowed) over a base config.
  static TrainConfig from_text(const std::string& text, TrainConfig base);
  static TrainConfig from_file(const std::filesystem::path& path, TrainConfig base);

  void validate() const;
  double lr_at(double examples_seen) const;
  double ema_decay() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainState {
  std::unique_ptr<ParamStore<float>> params;
  std::vector<Tensor<float>> ema;
  Adam::State adam;
  std::int64_t step = 0;
  double examples_seen = 0;
  Rng rng;
};

struct StepResult {
  double loss = 0;
  double lr = 0;
  int uncond = 0;
};

/// Owns the model, its optimizer state and the randomness of training.
class Trainer {
 public:
  Trainer(XUNetConfig model_config, TrainConfig train_config, NoiseSchedule schedule = {});

  StepResult train_step(const PairBatch& batch);

  const Denoiser& model() const { return *model_; }
  std::shared_ptr<Denoiser> model_shared() const { return model_; }
  const XUNetConfig& model_config() const { return model_->config(); }
  const TrainConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }

  /// Parameter store holding the EMA weights, for sampling.
  ParamStore<float> ema_params() const;

  void save(const std::filesystem::path& path) const;
  static Trainer load(const std::filesystem::path& path);

 private:
  std::shared_ptr<Denoiser> model_;
  TrainConfig config_;
  NoiseSchedule schedule_;
  Adam adam_;
  TrainState state_;
};

/// EMA update with decay d: ema <- d * ema + (1 - d) * params.
void ema_update(std::vector<Tensor<float>>& ema, const ParamStore<float>& params, double decay);

/// Runs `steps` training steps, appending "step loss lr examples_seen" lines
/// to `log` every log_every steps and writing checkpoints to `checkpoint`
/// every checkpoint_every steps (and at the end) when a path is given.
std::vector<double> train_loop(Trainer& trainer, PairSampler& sampler, int steps, std::ostream* log,
                               const std::filesystem::path& checkpoint = {});

/// Sampler-ready model loaded from a checkpoint (EMA weights).
struct LoadedModel {
  std::shared_ptr<Denoiser> model;
  ParamStore<float> params;
  NoiseSchedule schedule;
  TrainConfig train;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

}  // namespace nvs
