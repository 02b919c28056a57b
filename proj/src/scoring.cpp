#include "nvs/scoring.hpp"

#include "nvs/hash.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace nvs {

namespace {

int rounded_count(int n, double fraction) {
  return static_cast<int>(std::lround(fraction * static_cast<double>(n)));
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace

std::vector<int> holdout_indices(int num_views, double fraction, std::uint64_t seed, const std::vector<int>& keep) {
  if (!(fraction > 0 && fraction < 1)) throw std::invalid_argument("holdout fraction must be in (0, 1)");
  const std::set<int> kept(keep.begin(), keep.end());
  std::vector<int> candidates;
  for (int i = 0; i < num_views; ++i) {
    if (!kept.count(i)) candidates.push_back(i);
  }
  const int count = std::max(1, rounded_count(num_views, fraction));
  if (count > static_cast<int>(candidates.size())) throw std::invalid_argument("not enough views to hold out");
  Rng rng(seed);
  shuffle(candidates, rng);
  candidates.resize(static_cast<std::size_t>(count));
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

void ConsistencyReport::finalize() {
  psnr = ssim = 0.0;
  holdout_count = 0;
  for (const auto& s : scenes) {
    psnr += s.psnr;
    ssim += s.ssim;
    holdout_count += static_cast<int>(s.holdout.size());
  }
  if (!scenes.empty()) {
    psnr /= static_cast<double>(scenes.size());
    ssim /= static_cast<double>(scenes.size());
  }
  fingerprint = nvs::fingerprint(config.dump());
}

void to_json(nlohmann::json& j, const SceneScore& s) {
  j = {{"id", s.id},           {"psnr", s.psnr},        {"ssim", s.ssim}, {"holdout", s.holdout},
       {"holdout_count", s.holdout.size()}, {"train_views", s.train_views}, {"final_loss", s.final_loss}};
}

void from_json(const nlohmann::json& j, SceneScore& s) {
  j.at("id").get_to(s.id);
  j.at("psnr").get_to(s.psnr);
  j.at("ssim").get_to(s.ssim);
  j.at("holdout").get_to(s.holdout);
  j.at("train_views").get_to(s.train_views);
  s.final_loss = j.value("final_loss", 0.0);
}

void to_json(nlohmann::json& j, const ConsistencyReport& r) {
  j = {{"format", "nvs-consistency-report"},
       {"psnr", r.psnr},
       {"ssim", r.ssim},
       {"holdout_count", r.holdout_count},
       {"scenes", r.scenes},
       {"config", r.config},
       {"fingerprint", r.fingerprint}};
}

void from_json(const nlohmann::json& j, ConsistencyReport& r) {
  j.at("scenes").get_to(r.scenes);
  r.config = j.at("config");
  r.finalize();
  if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != r.fingerprint) {
    throw std::runtime_error("report fingerprint does not match its config");
  }
}

SceneScore score_views(const std::vector<PosedImage>& views, const Camera<double>& camera,
                       const std::vector<int>& holdout, const FieldTrainConfig& cfg, std::vector<Image>* renders) {
  const std::set<int> held(holdout.begin(), holdout.end());
  if (held.size() != holdout.size()) throw std::invalid_argument("holdout indices repeat");
  std::vector<PosedImage> train;
  for (int i = 0; i < static_cast<int>(views.size()); ++i) {
    if (!held.count(i)) train.push_back(views[static_cast<std::size_t>(i)]);
  }
  for (int i : holdout) {
    if (i < 0 || i >= static_cast<int>(views.size())) throw std::invalid_argument("holdout index out of range");
  }
  if (train.size() < 2) throw std::invalid_argument("consistency scoring needs at least two training views");
  if (holdout.empty()) throw std::invalid_argument("consistency scoring needs at least one held-out view");

  const TrainedField field = train_field(train, camera, cfg);
  SceneScore s;
  s.holdout = holdout;
  s.train_views = static_cast<int>(train.size());
  s.final_loss = field.losses.empty() ? 0.0 : field.losses.back();
  if (renders) renders->clear();
  for (int i : holdout) {
    const auto& v = views[static_cast<std::size_t>(i)];
    const Image rendered = render_field(field, v.pose, camera);
    const Image reference = to_unit(v.image);
    s.psnr += psnr(rendered, reference);
    s.ssim += ssim(rendered, reference);
    if (renders) renders->push_back(rendered);
  }
  s.psnr /= static_cast<double>(holdout.size());
  s.ssim /= static_cast<double>(holdout.size());
  if (!std::isfinite(s.psnr) || !std::isfinite(s.ssim)) throw std::runtime_error("non-finite consistency metrics");
  return s;
}

ConsistencyReport consistency_score(const std::vector<PosedImage>& views, const Camera<double>& camera,
                                    const std::vector<int>& conditioning, double holdout_fraction,
                                    std::uint64_t holdout_seed, const FieldTrainConfig& cfg) {
  ConsistencyReport r;
  const auto holdout = holdout_indices(static_cast<int>(views.size()), holdout_fraction, holdout_seed, conditioning);
  r.scenes.push_back(score_views(views, camera, holdout, cfg));
  r.scenes.back().id = "scene";
  r.config = {{"field", cfg}, {"holdout_fraction", holdout_fraction}, {"holdout_seed", holdout_seed},
              {"conditioning", conditioning}};
  r.finalize();
  return r;
}

std::vector<PosedImage> perturb_poses(std::vector<PosedImage> views, double fraction, double degrees,
                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> order(views.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  const int count = rounded_count(static_cast<int>(views.size()), fraction);
  const double angle = degrees * M_PI / 180.0;
  for (int k = 0; k < count; ++k) {
    Vector3<double> axis(rng.normal(), rng.normal(), rng.normal());
    const Matrix3<double> rot = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
    auto& pose = views[order[static_cast<std::size_t>(k)]].pose;
    pose.R = rot * pose.R;
  }
  return views;
}

}  // namespace nvs
