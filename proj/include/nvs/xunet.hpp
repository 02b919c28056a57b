#pragma once

#include "nvs/geometry.hpp"
#include "nvs/nn.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace nvs {

enum class Architecture { xunet, concat };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

/// Hyperparameters of the two-frame denoiser.
struct XUNetConfig {
  int ch = 256;
  std::vector<int> ch_mult{1, 2, 2, 4};
  int emb_ch = 1024;
  int num_res_blocks = 3;
  std::vector<int> attn_resolutions{8, 16, 32};
  int attn_heads = 4;
  double dropout = 0.1;
  bool use_pos_emb = true;
  bool use_ref_pose_emb = true;
  bool cross_attention = true;
  int image_size = 64;
  int max_groups = 32;
  int pos_deg = 15;
  int dir_deg = 8;
  Architecture architecture = Architecture::xunet;

  /// Full-size model (about 471M parameters as an X-UNet).
  static XUNetConfig paper();
  /// Trainable on a desk machine at 32x32.
  static XUNetConfig desk();
  /// Smallest useful model, 16x16 inputs.
  static XUNetConfig tiny();
  static XUNetConfig named(const std::string& name);

  int num_levels() const { return static_cast<int>(ch_mult.size()); }
  int pose_dim() const { return ray_embedding_dim(pos_deg, dir_deg); }
  void validate() const;
};

void to_json(nlohmann::json& j, const XUNetConfig& c);
void from_json(const nlohmann::json& j, XUNetConfig& c);

/// One batch of denoiser inputs. Element b pairs the clean view x[b] with
/// the noisy view z[b]; images are (B, H, W, 3) in [-1, 1].
template <typename S>
struct DenoiserBatch {
  Tensor<S> x;
  Tensor<S> z;
  std::vector<double> logsnr_x;
  std::vector<double> logsnr_z;
  std::vector<Pose<double>> pose_x;
  std::vector<Pose<double>> pose_z;
  Camera<double> camera;
  std::vector<char> cond_mask;

  Index size() const { return x.empty() ? 0 : x.dim(0); }
  void validate() const;
};

/// Pose-conditional epsilon-prediction UNet: the weight-shared two-frame
/// X-UNet, or the single-stream Concat-UNet baseline.
class Denoiser {
 public:
  explicit Denoiser(XUNetConfig config);

  const XUNetConfig& config() const { return config_; }
  const ParamRegistry& registry() const { return registry_; }
  Index parameter_count() const { return registry_.total_size(); }

  /// Predicted noise for the z frames, (B, H, W, 3).
  template <typename S>
  ag::Var<S> forward(const ParamStore<S>& params, const DenoiserBatch<S>& batch, const nn::ForwardContext& ctx) const;

  /// Output head applied to every frame: (2B, H, W, 3) with row 2b for x[b]
  /// and 2b+1 for z[b]. The Concat-UNet has one stream, so this equals forward.
  template <typename S>
  ag::Var<S> forward_frames(const ParamStore<S>& params, const DenoiserBatch<S>& batch,
                            const nn::ForwardContext& ctx) const;

  /// Noise-level and per-level pose embeddings (before activation).
  template <typename S>
  std::pair<ag::Var<S>, std::vector<ag::Var<S>>> condition(const ParamStore<S>& params,
                                                           const DenoiserBatch<S>& batch) const;

 private:
  struct Level {
    std::vector<nn::XUNetBlock> down;
    std::optional<nn::ResnetBlock> downsample;
    std::vector<nn::XUNetBlock> up;
    std::optional<nn::ResnetBlock> upsample;
  };

  XUNetConfig config_;
  ParamRegistry registry_;
  nn::Dense logsnr_dense0_, logsnr_dense1_;
  std::optional<ParamId> pos_emb_, ref_first_, ref_other_;
  std::vector<nn::Conv> pose_convs_;
  nn::Conv conv_in_;
  std::vector<Level> levels_;
  nn::XUNetBlock mid_;
  nn::GroupNorm norm_out_;
  nn::Conv conv_out_;
};

/// Unconditional override for element b: pose rays dropped, clean pixels
/// replaced by unit Gaussian noise, clean-frame log-SNR set to the minimum.
template <typename S>
void make_unconditional(DenoiserBatch<S>& batch, Index b, Rng& rng, double logsnr_min = -20.0);

/// One-step prediction: z is fresh unit noise at the minimum log-SNR and
/// the denoiser output is converted to a clipped x estimate.
template <typename S>
Tensor<S> regression_forward(const Denoiser& model, const ParamStore<S>& params, const Tensor<S>& x,
                             const std::vector<Pose<double>>& pose_x, const std::vector<Pose<double>>& pose_z,
                             const Camera<double>& camera, Rng& rng, double logsnr_min = -20.0);

/// Per-pixel ray features of one view: (H*W, D) rows in pixel order.
Features<double> ray_features(const Pose<double>& pose, const Camera<double>& camera, int pos_deg, int dir_deg);

}  // namespace nvs
