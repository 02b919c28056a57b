#include "nvs/scenes.hpp"
#include "nvs/scoring.hpp"

#include <doctest.h>

#include <set>

using namespace nvs;

namespace {

std::vector<PosedImage> scene_views(const SceneSpec& spec, int count, int res, std::uint64_t seed,
                                    Camera<double>* camera) {
  *camera = Camera<double>::centered(res, res, res);
  Rng rng(seed);
  std::vector<PosedImage> views;
  for (int i = 0; i < count; ++i) {
    const auto pose = orbit_pose(rng.uniform(0, 2 * M_PI), rng.uniform(0.1, 1.2), rng.uniform(2.5, 3.0));
    views.push_back({to_signed(render_scene(spec, pose, *camera)), pose});
  }
  return views;
}

}  // namespace

TEST_CASE("holdout takes ten percent and avoids conditioning views") {
  const auto h = holdout_indices(251, 0.1, 7, {64});
  CHECK(h.size() == 25);
  CHECK(std::is_sorted(h.begin(), h.end()));
  CHECK(std::set<int>(h.begin(), h.end()).size() == 25);
  CHECK(std::find(h.begin(), h.end(), 64) == h.end());
  CHECK(holdout_indices(251, 0.1, 7, {64}) == h);
  CHECK(holdout_indices(251, 0.1, 8, {64}) != h);
  CHECK(holdout_indices(5, 0.1, 0).size() == 1);
  for (int i = 0; i < 50; ++i) {
    const auto k = holdout_indices(10, 0.3, static_cast<std::uint64_t>(i), {0, 1, 2, 3, 4, 5, 6});
    CHECK(k == std::vector<int>{7, 8, 9});
  }
  CHECK_THROWS(holdout_indices(10, 0.3, 0, {0, 1, 2, 3, 4, 5, 6, 7}));
  CHECK_THROWS(holdout_indices(10, 0.0, 0));
}

TEST_CASE("scoring needs two training views") {
  Camera<double> camera;
  const auto views = scene_views(SceneSpec::random(1), 3, 8, 1, &camera);
  FieldTrainConfig cfg;
  cfg.steps = 1;
  CHECK_THROWS_AS(score_views(views, camera, {0, 1}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(score_views(views, camera, {5}, cfg), std::invalid_argument);
  CHECK_THROWS_AS(score_views(views, camera, {}, cfg), std::invalid_argument);
  CHECK_NOTHROW(score_views(views, camera, {2}, cfg));
}

TEST_CASE("pose perturbation touches the requested share of views") {
  Camera<double> camera;
  const auto views = scene_views(SceneSpec::random(2), 20, 8, 2, &camera);
  const auto moved = perturb_poses(views, 0.2, 20.0, 3);
  int changed = 0;
  for (std::size_t i = 0; i < views.size(); ++i) {
    CHECK((moved[i].image.array() == views[i].image.array()).all());
    CHECK(moved[i].pose.is_valid());
    CHECK((moved[i].pose.t.array() == views[i].pose.t.array()).all());
    if (!moved[i].pose.R.isApprox(views[i].pose.R)) {
      ++changed;
      const Eigen::AngleAxisd turn(moved[i].pose.R * views[i].pose.R.transpose());
      CHECK(turn.angle() == doctest::Approx(20.0 * M_PI / 180.0));
    }
  }
  CHECK(changed == 4);
}

TEST_CASE("report json round trip and fingerprint") {
  ConsistencyReport r;
  r.scenes.push_back({"a", 20.0, 0.5, {1, 2}, 8, 0.01});
  r.scenes.push_back({"b", 30.0, 0.7, {3}, 9, 0.02});
  r.config = {{"field", FieldTrainConfig{}}, {"holdout_seed", 3}};
  r.finalize();
  CHECK(r.psnr == 25.0);
  CHECK(r.ssim == doctest::Approx(0.6));
  CHECK(r.holdout_count == 3);
  CHECK(r.fingerprint.size() == 16);
  const nlohmann::json j = r;
  const auto back = j.get<ConsistencyReport>();
  CHECK(back.fingerprint == r.fingerprint);
  CHECK(nlohmann::json(back) == j);
  nlohmann::json tampered = j;
  tampered["config"]["holdout_seed"] = 4;
  CHECK_THROWS(tampered.get<ConsistencyReport>());
}

TEST_CASE("consistent views outscore views with perturbed poses") {
  Camera<double> camera;
  const auto views = scene_views(SceneSpec::random(5), 50, 32, 5, &camera);
  const auto holdout = holdout_indices(50, 0.1, 0);
  FieldTrainConfig cfg;
  const auto clean = score_views(views, camera, holdout, cfg);
  const auto noisy = score_views(perturb_poses(views, 0.2, 10.0, 1), camera, holdout, cfg);
  MESSAGE("consistent " << clean.psnr << " dB / " << clean.ssim << ", perturbed " << noisy.psnr << " dB / "
                        << noisy.ssim);
  CHECK(clean.psnr - noisy.psnr >= 3.0);
}
