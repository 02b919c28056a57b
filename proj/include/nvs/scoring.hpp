#pragma once

#include "nvs/field.hpp"
#include "nvs/metrics.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace nvs {

/// round(fraction * num_views) indices, at least one, drawn once from `seed`
/// and never from `keep`. Sorted.
std::vector<int> holdout_indices(int num_views, double fraction, std::uint64_t seed, const std::vector<int>& keep = {});

struct SceneScore {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  std::vector<int> holdout;
  int train_views = 0;
  double final_loss = 0.0;
};

struct ConsistencyReport {
  std::vector<SceneScore> scenes;
  double psnr = 0.0;  // mean over scenes
  double ssim = 0.0;
  int holdout_count = 0;
  nlohmann::json config;
  std::string fingerprint;

  /// Recomputes the aggregates and the fingerprint of `config`.
  void finalize();
};

void to_json(nlohmann::json& j, const SceneScore& s);
void from_json(const nlohmann::json& j, SceneScore& s);
void to_json(nlohmann::json& j, const ConsistencyReport& r);
void from_json(const nlohmann::json& j, ConsistencyReport& r);

/// Fits a field to every view outside `holdout` and scores its renders at the
/// held-out poses against those views. Only the given views are read.
SceneScore score_views(const std::vector<PosedImage>& views, const Camera<double>& camera,
                       const std::vector<int>& holdout, const FieldTrainConfig& cfg,
                       std::vector<Image>* renders = nullptr);

/// Single-scene report; the conditioning views always stay in the training set.
ConsistencyReport consistency_score(const std::vector<PosedImage>& views, const Camera<double>& camera,
                                    const std::vector<int>& conditioning, double holdout_fraction,
                                    std::uint64_t holdout_seed, const FieldTrainConfig& cfg);

/// Turns the cameras of round(fraction * n) randomly chosen views about a random
/// axis through their centers by `degrees`, leaving the images alone.
std::vector<PosedImage> perturb_poses(std::vector<PosedImage> views, double fraction, double degrees,
                                      std::uint64_t seed);

}  // namespace nvs
