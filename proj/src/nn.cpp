#include "nvs/nn.hpp"

#include <cmath>

namespace nvs::nn {

using ag::Var;

int group_count(Index channels, int max_groups) {
  for (int g = std::min<Index>(max_groups, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

std::vector<Index> frame_swap_index(Index rows) {
  std::vector<Index> idx(rows);
  for (Index i = 0; i < rows; ++i) idx[i] = i ^ 1;
  return idx;
}

Dense::Dense(ParamRegistry& reg, const std::string& name, Index in, Index out, bool zero_init, bool bias)
    : has_bias(bias) {
  auto scope = reg.scope(name);
  kernel = reg.add("kernel", {in, out}, zero_init ? Init::zeros() : Init::lecun(in));
  if (has_bias) this->bias = reg.add("bias", {out}, Init::zeros());
}

template <typename S>
Var<S> Dense::operator()(const ParamStore<S>& p, const Var<S>& x) const {
  return ag::dense(x, p[kernel], has_bias ? p[bias] : Var<S>());
}

Conv::Conv(ParamRegistry& reg, const std::string& name, Index in, Index out, int kernel_size, int stride_,
           bool zero_init)
    : stride(stride_) {
  auto scope = reg.scope(name);
  kernel = reg.add("kernel", {kernel_size, kernel_size, in, out},
                   zero_init ? Init::zeros() : Init::lecun(kernel_size * kernel_size * in));
  bias = reg.add("bias", {out}, Init::zeros());
}

template <typename S>
Var<S> Conv::operator()(const ParamStore<S>& p, const Var<S>& x) const {
  return ag::conv2d(x, p[kernel], p[bias], stride);
}

GroupNorm::GroupNorm(ParamRegistry& reg, const std::string& name, Index channels, int max_groups)
    : groups(group_count(channels, max_groups)) {
  auto scope = reg.scope(name);
  scale = reg.add("scale", {channels}, Init::ones());
  bias = reg.add("bias", {channels}, Init::zeros());
}

template <typename S>
Var<S> GroupNorm::operator()(const ParamStore<S>& p, const Var<S>& x) const {
  return ag::group_norm(x, p[scale], p[bias], groups);
}

FiLM::FiLM(ParamRegistry& reg, const std::string& name, Index emb_ch, Index features_)
    : proj(reg, name + "/dense", emb_ch, 2 * features_), features(features_) {}

template <typename S>
Var<S> FiLM::operator()(const ParamStore<S>& p, const Var<S>& h, const Var<S>& emb_act) const {
  auto emb = proj(p, emb_act);
  auto scale = ag::slice_last(emb, 0, features);
  auto shift = ag::slice_last(emb, features, features);
  return ag::add(ag::mul(h, ag::add_scalar(scale, S(1))), shift);
}

ResnetBlock::ResnetBlock(ParamRegistry& reg, const std::string& name, Index in, Index features, Index emb_ch,
                         int max_groups, Resample resample_)
    : resample(resample_) {
  auto scope = reg.scope(name);
  norm1 = GroupNorm(reg, "norm1", in, max_groups);
  conv1 = Conv(reg, "conv1", in, features);
  norm2 = GroupNorm(reg, "norm2", features, max_groups);
  film = FiLM(reg, "film", emb_ch, features);
  conv2 = Conv(reg, "conv2", features, features, 3, 1, /*zero_init=*/true);
  if (in != features) skip = Dense(reg, "skip", in, features);
}

template <typename S>
Var<S> ResnetBlock::operator()(const ParamStore<S>& p, const Var<S>& h_in_, const Var<S>& emb_act,
                               const ForwardContext& ctx) const {
  Var<S> h_in = h_in_;
  Var<S> h = ag::swish(norm1(p, h_in));
  if (resample == Resample::down) {
    h = ag::avg_pool2(h);
    h_in = ag::avg_pool2(h_in);
  } else if (resample == Resample::up) {
    h = ag::upsample2(h);
    h_in = ag::upsample2(h_in);
  }
  h = conv1(p, h);
  h = ag::swish(film(p, norm2(p, h), emb_act));
  if (ctx.train && ctx.dropout > 0.0) {
    if (!ctx.rng) throw std::invalid_argument("dropout requires an rng");
    Tensor<S> mask(h.shape());
    const S keep_scale = S(1) / S(1 - ctx.dropout);
    for (Index i = 0; i < mask.size(); ++i) mask[i] = ctx.rng->bernoulli(ctx.dropout) ? S(0) : keep_scale;
    h = ag::mul_const(h, mask);
  }
  h = conv2(p, h);
  if (skip) h_in = (*skip)(p, h_in);
  return ag::scale(ag::add(h, h_in), S(1.0 / std::sqrt(2.0)));
}

AttnBlock::AttnBlock(ParamRegistry& reg, const std::string& name, Index channels, int heads_, int max_groups,
                     AttnType type_)
    : type(type_), heads(heads_) {
  auto scope = reg.scope(name);
  norm = GroupNorm(reg, "norm", channels, max_groups);
  q = Dense(reg, "query", channels, channels);
  k = Dense(reg, "key", channels, channels);
  v = Dense(reg, "value", channels, channels);
  out = Dense(reg, "out", channels, channels, /*zero_init=*/true);
}

template <typename S>
Var<S> AttnBlock::operator()(const ParamStore<S>& p, const Var<S>& h_in) const {
  const Index n = h_in.dim(0), hh = h_in.dim(1), ww = h_in.dim(2), c = h_in.dim(3);
  auto h = ag::reshape(norm(p, h_in), {n, hh * ww, c});
  auto kv = type == AttnType::cross ? ag::gather_rows(h, frame_swap_index(n)) : h;
  auto a = ag::attention(q(p, h), k(p, kv), v(p, kv), heads);
  auto o = ag::reshape(out(p, a), {n, hh, ww, c});
  return ag::scale(ag::add(o, h_in), S(1.0 / std::sqrt(2.0)));
}

XUNetBlock::XUNetBlock(ParamRegistry& reg, const std::string& name, Index in, Index features, Index emb_ch,
                       int max_groups, bool use_attn, bool use_cross, int heads) {
  auto scope = reg.scope(name);
  res = ResnetBlock(reg, "res", in, features, emb_ch, max_groups);
  if (use_attn) {
    self_attn = AttnBlock(reg, "self_attn", features, heads, max_groups, AttnType::self);
    if (use_cross) cross_attn = AttnBlock(reg, "cross_attn", features, heads, max_groups, AttnType::cross);
  }
}

template <typename S>
Var<S> XUNetBlock::operator()(const ParamStore<S>& p, const Var<S>& x, const Var<S>& emb_act,
                              const ForwardContext& ctx) const {
  auto h = res(p, x, emb_act, ctx);
  if (self_attn) h = (*self_attn)(p, h);
  if (cross_attn) h = (*cross_attn)(p, h);
  return h;
}

#define NVS_INSTANTIATE_NN(S)                                                                                 \
  template Var<S> Dense::operator()(const ParamStore<S>&, const Var<S>&) const;                               \
  template Var<S> Conv::operator()(const ParamStore<S>&, const Var<S>&) const;                                \
  template Var<S> GroupNorm::operator()(const ParamStore<S>&, const Var<S>&) const;                           \
  template Var<S> FiLM::operator()(const ParamStore<S>&, const Var<S>&, const Var<S>&) const;                 \
  template Var<S> ResnetBlock::operator()(const ParamStore<S>&, const Var<S>&, const Var<S>&,                 \
                                          const ForwardContext&) const;                                       \
  template Var<S> AttnBlock::operator()(const ParamStore<S>&, const Var<S>&) const;                           \
  template Var<S> XUNetBlock::operator()(const ParamStore<S>&, const Var<S>&, const Var<S>&,                  \
                                         const ForwardContext&) const;

NVS_INSTANTIATE_NN(float)
NVS_INSTANTIATE_NN(double)

}  // namespace nvs::nn
