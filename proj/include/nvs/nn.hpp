#pragma once

#include "nvs/ops.hpp"
#include "nvs/params.hpp"

#include <optional>
#include <string>

/// Building blocks of the denoisers. Each layer registers its parameters
/// at construction and evaluates against a matching ParamStore.
namespace nvs::nn {

/// Largest divisor of `channels` not exceeding `max_groups`.
int group_count(Index channels, int max_groups);

struct Dense {
  ParamId kernel{}, bias{};
  bool has_bias = true;

  Dense() = default;
  Dense(ParamRegistry& reg, const std::string& name, Index in, Index out, bool zero_init = false, bool bias = true);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& x) const;
};

struct Conv {
  ParamId kernel{}, bias{};
  int stride = 1;

  Conv() = default;
  Conv(ParamRegistry& reg, const std::string& name, Index in, Index out, int kernel_size = 3, int stride = 1,
       bool zero_init = false);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& x) const;
};

struct GroupNorm {
  ParamId scale{}, bias{};
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamRegistry& reg, const std::string& name, Index channels, int max_groups);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& x) const;
};

/// Feature-wise linear modulation h (1 + scale) + shift, with scale and
/// shift a dense projection of an already activated embedding.
struct FiLM {
  Dense proj;
  Index features = 0;

  FiLM() = default;
  FiLM(ParamRegistry& reg, const std::string& name, Index emb_ch, Index features);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& h, const ag::Var<S>& emb_act) const;
};

/// Per-call randomness and mode for layers with dropout.
struct ForwardContext {
  bool train = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
};

enum class Resample { none, up, down };

/// BigGAN-style residual block with FiLM conditioning.
struct ResnetBlock {
  GroupNorm norm1, norm2;
  Conv conv1, conv2;
  FiLM film;
  std::optional<Dense> skip;
  Resample resample = Resample::none;

  ResnetBlock() = default;
  ResnetBlock(ParamRegistry& reg, const std::string& name, Index in, Index features, Index emb_ch, int max_groups,
              Resample resample = Resample::none);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& h_in, const ag::Var<S>& emb_act,
                        const ForwardContext& ctx) const;
};

enum class AttnType { self, cross };

/// Multi-head attention block. Cross attention lets each frame query the
/// other frame of its pair (rows 2b and 2b+1 of the batch).
struct AttnBlock {
  GroupNorm norm;
  Dense q, k, v, out;
  AttnType type = AttnType::self;
  int heads = 4;

  AttnBlock() = default;
  AttnBlock(ParamRegistry& reg, const std::string& name, Index channels, int heads, int max_groups, AttnType type);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& h_in) const;
};

/// Residual block optionally followed by self- and cross-attention.
struct XUNetBlock {
  ResnetBlock res;
  std::optional<AttnBlock> self_attn, cross_attn;

  XUNetBlock() = default;
  XUNetBlock(ParamRegistry& reg, const std::string& name, Index in, Index features, Index emb_ch, int max_groups,
             bool use_attn, bool use_cross, int heads);
  template <typename S>
  ag::Var<S> operator()(const ParamStore<S>& p, const ag::Var<S>& h, const ag::Var<S>& emb_act,
                        const ForwardContext& ctx) const;
};

/// Row permutation exchanging the two frames of every pair.
std::vector<Index> frame_swap_index(Index rows);

}  // namespace nvs::nn
