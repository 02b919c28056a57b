#pragma once

#include "nvs/image.hpp"
#include "nvs/ops.hpp"
#include "nvs/params.hpp"
#include "nvs/sampling.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace nvs {

struct FieldConfig {
  int width = 64;
  int min_deg = 0;
  int max_deg = 10;
  /// Output bias of the density head: softplus(-2) ~ 0.13 starts the field as a
  /// faint haze. At -1 the color head saturates on some scenes; near-empty
  /// starts (-4.6) leave it without gradient.
  double density_bias = -2.0;
};

/// View-independent density and color MLP over frequency-encoded positions.
/// The color head reads the density network's hidden features.
class NeuralField {
 public:
  explicit NeuralField(FieldConfig config = {});

  const FieldConfig& config() const { return config_; }
  const ParamRegistry& registry() const { return registry_; }
  Index input_dim() const { return 3 + 6 * (config_.max_deg - config_.min_deg); }

  template <typename S>
  struct Output {
    ag::Var<S> sigma;     // (N, 1), >= 0
    ag::Var<S> rgb;       // (N, 3), in (0, 1)
    ag::Var<S> gradient;  // (N, 3) d sigma / d x, when requested
  };

  template <typename S>
  Output<S> evaluate(const ParamStore<S>& params, const Points<S>& x, bool with_gradient) const;

  /// Density only, off the tape.
  template <typename S>
  Eigen::Array<S, Eigen::Dynamic, 1> density(const ParamStore<S>& params, const Points<S>& x) const;

 private:
  FieldConfig config_;
  ParamRegistry registry_;
  ParamId w1_{}, b1_{}, w2_{}, b2_{}, wc0_{}, bc0_{}, wc1_{}, bc1_{}, wc2_{}, bc2_{};
};

// Volume rendering over R rays with S samples each.

/// w_i = T_i (1 - exp(-sigma_i delta_i)), T_i = prod_{j<i} exp(-sigma_j delta_j); sigma, delta (R, S).
template <typename S>
ag::Var<S> render_weights(const ag::Var<S>& sigma, const Tensor<S>& delta);

/// sum_i w_i c_i + (1 - sum_i w_i) background; weights (R, S), rgb (R, S, 3) -> (R, 3).
template <typename S>
ag::Var<S> composite(const ag::Var<S>& weights, const ag::Var<S>& rgb, const Vector3<double>& background);

/// Per-ray sum_{i,j} w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i, averaged over rays.
/// Midpoints must be increasing along each ray.
template <typename S>
ag::Var<S> distortion_loss(const ag::Var<S>& weights, const Tensor<S>& midpoints, const Tensor<S>& deltas);

/// Per-ray sum_i w_i max(0, n_i . d)^2 with n_i = -normalize(grad sigma_i), averaged over rays.
/// gradients (R, S, 3), directions (R, 3).
template <typename S>
ag::Var<S> orientation_loss(const ag::Var<S>& weights, const ag::Var<S>& gradients, const Tensor<S>& directions);

/// Coarse occupancy over the cube [-bound, bound]^3; samples in empty cells are skipped.
class OccupancyGrid {
 public:
  OccupancyGrid(double bound, int resolution);

  bool occupied(const Vector3<double>& x) const;
  double occupied_fraction() const;
  /// Re-evaluates the density at one jittered point per cell; cells keep the
  /// decayed running maximum and stay occupied above min(threshold, mean value).
  void update(const NeuralField& field, const ParamStore<float>& params, double decay, double threshold, Rng& rng);

 private:
  double bound_;
  int res_;
  bool primed_ = false;
  std::vector<float> value_;
  std::vector<char> occupied_;
};

struct RenderOptions {
  double t_near = 1.0;
  double t_far = 4.0;
  int n_samples = 128;
  Vector3<double> background = Vector3<double>::Ones();
  /// Half-size of the scene cube; zero disables the bound.
  double bound = 0.0;
};

/// Near and far distances from camera-to-origin distances: 3 r_min / 8 and 3 r_max / 2.
std::pair<double, double> near_far(double r_min, double r_max);

template <typename S>
struct RenderOutput {
  ag::Var<S> color;      // (R, 3)
  ag::Var<S> weights;    // (R, S)
  ag::Var<S> gradients;  // (R, S, 3) when requested
  Tensor<S> midpoints;   // (R, S)
  Tensor<S> deltas;      // (R, S)
  Index evaluated = 0;   // samples sent through the network
};

/// Stratified samples (jittered when `jitter` is given, bin centers otherwise).
template <typename S>
RenderOutput<S> render_rays(const NeuralField& field, const ParamStore<S>& params, const RayBundle<double>& rays,
                            const RenderOptions& options, Rng* jitter, bool with_gradient,
                            const OccupancyGrid* grid = nullptr);

struct FieldTrainConfig {
  int steps = 1000;
  double lr_init = 0.01;
  double lr_final = 0.001;
  int lr_decay_steps = 100;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  double lambda_distortion = 0.01;
  double lambda_orientation = 0.01;
  int n_samples = 128;
  int rays_per_step = 512;
  std::uint64_t seed = 0;
  bool occupancy_grid = true;
  int grid_resolution = 32;
  int grid_update_every = 16;
  int grid_warmup_steps = 50;
  double grid_threshold = 0.5;
  double grid_decay = 0.95;
  /// Scene cube half-size; zero derives r_min / 2 from the cameras.
  double scene_bound = 0.0;
  FieldConfig field;

  void validate() const;
  double lr_at(int step) const;
};

void to_json(nlohmann::json& j, const FieldTrainConfig& c);
void from_json(const nlohmann::json& j, FieldTrainConfig& c);

struct TrainedField {
  NeuralField field;
  ParamStore<float> params;
  RenderOptions render;
  std::optional<OccupancyGrid> grid;
  std::vector<double> losses;
};

/// Fits a field to posed views (images in [-1, 1]) by volume rendering.
TrainedField train_field(const std::vector<PosedImage>& views, const Camera<double>& camera,
                         const FieldTrainConfig& cfg);

/// Deterministic render in [0, 1]; `opacity` receives per-pixel sum of weights when given.
Image render_field(const TrainedField& f, const Pose<double>& pose, const Camera<double>& camera,
                   std::vector<double>* opacity = nullptr);

}  // namespace nvs
