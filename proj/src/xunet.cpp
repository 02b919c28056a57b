#include "nvs/xunet.hpp"

#include "nvs/diffusion.hpp"

#include <algorithm>
#include <stdexcept>

namespace nvs {

using ag::Var;

std::string to_string(Architecture a) { return a == Architecture::xunet ? "xunet" : "concat"; }

Architecture architecture_from_string(const std::string& s) {
  if (s == "xunet") return Architecture::xunet;
  if (s == "concat") return Architecture::concat;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

XUNetConfig XUNetConfig::paper() { return XUNetConfig{}; }

XUNetConfig XUNetConfig::desk() {
  XUNetConfig c;
  c.ch = 32;
  c.ch_mult = {1, 2, 4};
  c.emb_ch = 128;
  c.num_res_blocks = 2;
  c.attn_resolutions = {8, 16};
  c.image_size = 32;
  return c;
}

XUNetConfig XUNetConfig::tiny() {
  XUNetConfig c;
  c.ch = 16;
  c.ch_mult = {1, 2};
  c.emb_ch = 64;
  c.num_res_blocks = 1;
  c.attn_resolutions = {8};
  c.attn_heads = 2;
  c.dropout = 0.0;
  c.image_size = 16;
  return c;
}

XUNetConfig XUNetConfig::named(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  if (name == "tiny") return tiny();
  throw std::invalid_argument("unknown model config '" + name + "' (expected paper, desk or tiny)");
}

void XUNetConfig::validate() const {
  if (ch <= 0 || emb_ch <= 0 || emb_ch % 2 != 0 || num_res_blocks < 0 || attn_heads <= 0 || max_groups <= 0) {
    throw std::invalid_argument("invalid model config: ch, emb_ch (even), attn_heads and max_groups must be positive");
  }
  if (ch_mult.empty()) throw std::invalid_argument("invalid model config: ch_mult is empty");
  for (int m : ch_mult) {
    if (m <= 0) throw std::invalid_argument("invalid model config: ch_mult entries must be positive");
    if ((ch * m) % attn_heads != 0) throw std::invalid_argument("invalid model config: channels not divisible by heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("invalid model config: dropout must be in [0, 1)");
  const int factor = 1 << (num_levels() - 1);
  if (image_size <= 0 || image_size % factor != 0) {
    throw std::invalid_argument("resolution " + std::to_string(image_size) + " is not divisible by 2^" +
                                std::to_string(num_levels() - 1) + " required by " + std::to_string(num_levels()) +
                                " UNet levels");
  }
}

void to_json(nlohmann::json& j, const XUNetConfig& c) {
  j = nlohmann::json{{"ch", c.ch},
                     {"ch_mult", c.ch_mult},
                     {"emb_ch", c.emb_ch},
                     {"num_res_blocks", c.num_res_blocks},
                     {"attn_resolutions", c.attn_resolutions},
                     {"attn_heads", c.attn_heads},
                     {"dropout", c.dropout},
                     {"use_pos_emb", c.use_pos_emb},
                     {"use_ref_pose_emb", c.use_ref_pose_emb},
                     {"cross_attention", c.cross_attention},
                     {"image_size", c.image_size},
                     {"max_groups", c.max_groups},
                     {"pos_deg", c.pos_deg},
                     {"dir_deg", c.dir_deg},
                     {"architecture", to_string(c.architecture)}};
}

void from_json(const nlohmann::json& j, XUNetConfig& c) {
  XUNetConfig d;
  c.ch = j.value("ch", d.ch);
  c.ch_mult = j.value("ch_mult", d.ch_mult);
  c.emb_ch = j.value("emb_ch", d.emb_ch);
  c.num_res_blocks = j.value("num_res_blocks", d.num_res_blocks);
  c.attn_resolutions = j.value("attn_resolutions", d.attn_resolutions);
  c.attn_heads = j.value("attn_heads", d.attn_heads);
  c.dropout = j.value("dropout", d.dropout);
  c.use_pos_emb = j.value("use_pos_emb", d.use_pos_emb);
  c.use_ref_pose_emb = j.value("use_ref_pose_emb", d.use_ref_pose_emb);
  c.cross_attention = j.value("cross_attention", d.cross_attention);
  c.image_size = j.value("image_size", d.image_size);
  c.max_groups = j.value("max_groups", d.max_groups);
  c.pos_deg = j.value("pos_deg", d.pos_deg);
  c.dir_deg = j.value("dir_deg", d.dir_deg);
  c.architecture = architecture_from_string(j.value("architecture", to_string(d.architecture)));
}

template <typename S>
void DenoiserBatch<S>::validate() const {
  const Index b = size();
  if (b == 0 || x.rank() != 4 || x.dim(3) != 3) throw std::invalid_argument("denoiser batch: x must be (B, H, W, 3)");
  require_same_shape(x.shape(), z.shape(), "denoiser batch x/z");
  auto n = static_cast<std::size_t>(b);
  if (logsnr_x.size() != n || logsnr_z.size() != n || pose_x.size() != n || pose_z.size() != n ||
      cond_mask.size() != n) {
    throw std::invalid_argument("denoiser batch: per-element fields must have batch size entries");
  }
  if (camera.height != x.dim(1) || camera.width != x.dim(2)) {
    throw std::invalid_argument("denoiser batch: camera resolution does not match images");
  }
}

template struct DenoiserBatch<float>;
template struct DenoiserBatch<double>;

Features<double> ray_features(const Pose<double>& pose, const Camera<double>& camera, int pos_deg, int dir_deg) {
  const auto rays = make_rays(pose, camera);
  const auto pos = posenc_nerf(rays.origins, 0, pos_deg);
  const auto dir = posenc_nerf(rays.directions, 0, dir_deg);
  Features<double> out(rays.size(), pos.cols() + dir.cols());
  out << pos, dir;
  return out;
}

Denoiser::Denoiser(XUNetConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  auto& reg = registry_;
  const bool xunet = c.architecture == Architecture::xunet;
  const int frames_in_channels = xunet ? 1 : 2;
  const Index d = static_cast<Index>(c.pose_dim()) * frames_in_channels;
  const int levels = c.num_levels();
  const Index hw = c.image_size;
  {
    auto scope = reg.scope("cond");
    logsnr_dense0_ = nn::Dense(reg, "logsnr_dense0", c.emb_ch, c.emb_ch);
    logsnr_dense1_ = nn::Dense(reg, "logsnr_dense1", c.emb_ch, c.emb_ch);
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    if (c.use_pos_emb) pos_emb_ = reg.add("pos_emb", {hw, hw, d}, Init::normal(std));
    if (c.use_ref_pose_emb) {
      const Index per_frame = c.pose_dim();
      ref_first_ = reg.add("ref_pose_emb_first", {per_frame}, Init::normal(std));
      ref_other_ = reg.add("ref_pose_emb_other", {per_frame}, Init::normal(std));
    }
    for (int l = 0; l < levels; ++l) {
      pose_convs_.emplace_back(reg, "pose_conv_" + std::to_string(l), d, c.emb_ch, 3, 1 << l);
    }
  }

  const auto has_attn = [&](Index res) {
    return std::find(c.attn_resolutions.begin(), c.attn_resolutions.end(), res) != c.attn_resolutions.end();
  };
  const bool cross = xunet && c.cross_attention;
  conv_in_ = nn::Conv(reg, "conv_in", xunet ? 3 : 6, c.ch);
  std::vector<Index> skips{c.ch};
  Index ch = c.ch, res = hw;
  levels_.resize(levels);
  for (int l = 0; l < levels; ++l) {
    const Index features = static_cast<Index>(c.ch) * c.ch_mult[l];
    for (int i = 0; i < c.num_res_blocks; ++i) {
      levels_[l].down.emplace_back(reg, "down_" + std::to_string(l) + "_" + std::to_string(i), ch, features,
                                   c.emb_ch, c.max_groups, has_attn(res), cross, c.attn_heads);
      ch = features;
      skips.push_back(ch);
    }
    if (l != levels - 1) {
      levels_[l].downsample = nn::ResnetBlock(reg, "down_" + std::to_string(l) + "_resample", ch, ch, c.emb_ch,
                                              c.max_groups, nn::Resample::down);
      res /= 2;
      skips.push_back(ch);
    }
  }
  mid_ = nn::XUNetBlock(reg, "mid", ch, ch, c.emb_ch, c.max_groups, has_attn(res), cross, c.attn_heads);
  for (int l = levels - 1; l >= 0; --l) {
    const Index features = static_cast<Index>(c.ch) * c.ch_mult[l];
    for (int i = 0; i < c.num_res_blocks + 1; ++i) {
      const Index in = ch + skips.back();
      skips.pop_back();
      levels_[l].up.emplace_back(reg, "up_" + std::to_string(l) + "_" + std::to_string(i), in, features, c.emb_ch,
                                 c.max_groups, has_attn(res), cross, c.attn_heads);
      ch = features;
    }
    if (l != 0) {
      levels_[l].upsample = nn::ResnetBlock(reg, "up_" + std::to_string(l) + "_resample", ch, ch, c.emb_ch,
                                            c.max_groups, nn::Resample::up);
      res *= 2;
    }
  }
  norm_out_ = nn::GroupNorm(reg, "norm_out", ch, c.max_groups);
  conv_out_ = nn::Conv(reg, "conv_out", ch, 3, 3, 1, /*zero_init=*/true);
}

template <typename S>
std::pair<Var<S>, std::vector<Var<S>>> Denoiser::condition(const ParamStore<S>& p,
                                                           const DenoiserBatch<S>& batch) const {
  const auto& c = config_;
  const bool xunet = c.architecture == Architecture::xunet;
  const Index b = batch.size(), hh = batch.x.dim(1), ww = batch.x.dim(2);
  const Index per_frame = c.pose_dim();

  // Noise-level embedding, one row per frame: rows 2b (clean) and 2b+1 (noisy).
  Eigen::ArrayXd unit(2 * b);
  for (Index i = 0; i < b; ++i) {
    unit[2 * i] = logsnr_to_unit(batch.logsnr_x[i]);
    unit[2 * i + 1] = logsnr_to_unit(batch.logsnr_z[i]);
  }
  Tensor<S> posenc({2 * b, c.emb_ch});
  posenc.matrix(c.emb_ch) = posenc_ddpm(unit, c.emb_ch, 1.0).template cast<S>();
  auto logsnr_emb = logsnr_dense1_(p, ag::swish(logsnr_dense0_(p, Var<S>::constant(std::move(posenc)))));
  if (!xunet) {
    std::vector<Index> even(b), odd(b);
    for (Index i = 0; i < b; ++i) {
      even[i] = 2 * i;
      odd[i] = 2 * i + 1;
    }
    logsnr_emb = ag::add(ag::gather_rows(logsnr_emb, even), ag::gather_rows(logsnr_emb, odd));
  }

  // Ray embeddings, zeroed for unconditional elements.
  const Index rows = xunet ? 2 * b : b;
  const Index d = xunet ? per_frame : 2 * per_frame;
  Tensor<S> rays({rows, hh, ww, d});
  for (Index i = 0; i < b; ++i) {
    if (!batch.cond_mask[i]) continue;
    const auto fx = ray_features(batch.pose_x[i], batch.camera, c.pos_deg, c.dir_deg).template cast<S>().eval();
    const auto fz = ray_features(batch.pose_z[i], batch.camera, c.pos_deg, c.dir_deg).template cast<S>().eval();
    if (xunet) {
      Eigen::Map<RowMatrix<S>>(rays.data() + (2 * i) * hh * ww * d, hh * ww, d) = fx;
      Eigen::Map<RowMatrix<S>>(rays.data() + (2 * i + 1) * hh * ww * d, hh * ww, d) = fz;
    } else {
      Eigen::Map<RowMatrix<S>> m(rays.data() + i * hh * ww * d, hh * ww, d);
      m.leftCols(per_frame) = fx;
      m.rightCols(per_frame) = fz;
    }
  }
  auto pose_emb = Var<S>::constant(std::move(rays));
  if (pos_emb_) {
    if (hh != c.image_size || ww != c.image_size) {
      throw std::invalid_argument("learned position embedding expects " + std::to_string(c.image_size) + "x" +
                                  std::to_string(c.image_size) + " inputs");
    }
    pose_emb = ag::add_broadcast(pose_emb, p[*pos_emb_]);
  }
  if (ref_first_) {
    auto first = ag::reshape(p[*ref_first_], {1, per_frame});
    auto other = ag::reshape(p[*ref_other_], {1, per_frame});
    if (xunet) {
      std::vector<Index> frame(2 * b);
      for (Index i = 0; i < 2 * b; ++i) frame[i] = i % 2;
      pose_emb = ag::add_spatial(pose_emb, ag::gather_rows(ag::concat_rows<S>({first, other}), frame));
    } else {
      auto both = ag::reshape(ag::concat_last(first, other), {2 * per_frame});
      pose_emb = ag::reshape(ag::add_broadcast(ag::reshape(pose_emb, {b * hh * ww, d}), both), {b, hh, ww, d});
    }
  }
  std::vector<Var<S>> per_level;
  for (const auto& conv : pose_convs_) per_level.push_back(conv(p, pose_emb));
  return {logsnr_emb, per_level};
}

template <typename S>
Var<S> Denoiser::forward(const ParamStore<S>& p, const DenoiserBatch<S>& batch, const nn::ForwardContext& ctx) const {
  auto h = forward_frames(p, batch, ctx);
  if (config_.architecture != Architecture::xunet) return h;
  const Index b = batch.size();
  std::vector<Index> noisy(b);
  for (Index i = 0; i < b; ++i) noisy[i] = 2 * i + 1;
  return ag::gather_rows(h, noisy);
}

template <typename S>
Var<S> Denoiser::forward_frames(const ParamStore<S>& p, const DenoiserBatch<S>& batch,
                                const nn::ForwardContext& ctx_in) const {
  batch.validate();
  const auto& c = config_;
  if (batch.x.dim(1) != c.image_size || batch.x.dim(2) != c.image_size) {
    throw std::invalid_argument("input resolution " + std::to_string(batch.x.dim(1)) + "x" +
                                std::to_string(batch.x.dim(2)) + " does not match model resolution " +
                                std::to_string(c.image_size));
  }
  const bool xunet = c.architecture == Architecture::xunet;
  nn::ForwardContext ctx = ctx_in;
  ctx.dropout = c.dropout;
  const Index b = batch.size(), hw = c.image_size;

  auto [logsnr_emb, pose_embs] = condition(p, batch);
  std::vector<Var<S>> emb_act(pose_embs.size());
  auto emb = [&](int level) -> const Var<S>& {
    if (!emb_act[level]) emb_act[level] = ag::swish(ag::add_spatial(pose_embs[level], logsnr_emb));
    return emb_act[level];
  };

  Tensor<S> input;
  if (xunet) {
    input = Tensor<S>({2 * b, hw, hw, 3});
    const Index frame = hw * hw * 3;
    for (Index i = 0; i < b; ++i) {
      input.array().segment(2 * i * frame, frame) = batch.x.array().segment(i * frame, frame);
      input.array().segment((2 * i + 1) * frame, frame) = batch.z.array().segment(i * frame, frame);
    }
  } else {
    input = Tensor<S>({b, hw, hw, 6});
    auto m = input.matrix(6);
    m.leftCols(3) = batch.x.matrix(3);
    m.rightCols(3) = batch.z.matrix(3);
  }

  auto h = conv_in_(p, Var<S>::constant(std::move(input)));
  std::vector<Var<S>> hs{h};
  const int levels = c.num_levels();
  for (int l = 0; l < levels; ++l) {
    for (const auto& block : levels_[l].down) {
      h = block(p, h, emb(l), ctx);
      hs.push_back(h);
    }
    if (levels_[l].downsample) {
      h = (*levels_[l].downsample)(p, h, emb(l + 1), ctx);
      hs.push_back(h);
    }
  }
  h = mid_(p, h, emb(levels - 1), ctx);
  for (int l = levels - 1; l >= 0; --l) {
    for (const auto& block : levels_[l].up) {
      h = block(p, ag::concat_last(h, hs.back()), emb(l), ctx);
      hs.pop_back();
    }
    if (levels_[l].upsample) h = (*levels_[l].upsample)(p, h, emb(l - 1), ctx);
  }
  return conv_out_(p, ag::swish(norm_out_(p, h)));
}

template <typename S>
void make_unconditional(DenoiserBatch<S>& batch, Index b, Rng& rng, double logsnr_min) {
  const Index frame = batch.x.size() / batch.size();
  for (Index i = 0; i < frame; ++i) batch.x[b * frame + i] = static_cast<S>(rng.normal());
  batch.logsnr_x[b] = logsnr_min;
  batch.cond_mask[b] = 0;
}

template <typename S>
Tensor<S> regression_forward(const Denoiser& model, const ParamStore<S>& params, const Tensor<S>& x,
                             const std::vector<Pose<double>>& pose_x, const std::vector<Pose<double>>& pose_z,
                             const Camera<double>& camera, Rng& rng, double logsnr_min) {
  DenoiserBatch<S> batch;
  batch.x = x;
  batch.z = rng.normal_tensor<S>(x.shape());
  const auto n = static_cast<std::size_t>(x.dim(0));
  batch.logsnr_x.assign(n, NoiseSchedule{}.logsnr_max);
  batch.logsnr_z.assign(n, logsnr_min);
  batch.pose_x = pose_x;
  batch.pose_z = pose_z;
  batch.camera = camera;
  batch.cond_mask.assign(n, 1);
  auto eps = model.forward(params, batch, nn::ForwardContext{});
  Tensor<S> out(x.shape());
  out.array() = predict_x(batch.z.array(), logsnr_min, eps.value().array());
  return out;
}

template std::pair<Var<float>, std::vector<Var<float>>> Denoiser::condition(const ParamStore<float>&,
                                                                            const DenoiserBatch<float>&) const;
template std::pair<Var<double>, std::vector<Var<double>>> Denoiser::condition(const ParamStore<double>&,
                                                                              const DenoiserBatch<double>&) const;
template Var<float> Denoiser::forward_frames(const ParamStore<float>&, const DenoiserBatch<float>&,
                                             const nn::ForwardContext&) const;
template Var<double> Denoiser::forward_frames(const ParamStore<double>&, const DenoiserBatch<double>&,
                                              const nn::ForwardContext&) const;
template void make_unconditional(DenoiserBatch<float>&, Index, Rng&, double);
template void make_unconditional(DenoiserBatch<double>&, Index, Rng&, double);
template Tensor<float> regression_forward(const Denoiser&, const ParamStore<float>&, const Tensor<float>&,
                                          const std::vector<Pose<double>>&, const std::vector<Pose<double>>&,
                                          const Camera<double>&, Rng&, double);
template Tensor<double> regression_forward(const Denoiser&, const ParamStore<double>&, const Tensor<double>&,
                                           const std::vector<Pose<double>>&, const std::vector<Pose<double>>&,
                                           const Camera<double>&, Rng&, double);
template Var<float> Denoiser::forward(const ParamStore<float>&, const DenoiserBatch<float>&,
                                      const nn::ForwardContext&) const;
template Var<double> Denoiser::forward(const ParamStore<double>&, const DenoiserBatch<double>&,
                                       const nn::ForwardContext&) const;

}  // namespace nvs
