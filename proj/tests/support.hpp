#pragma once

#include "nvs/diffusion.hpp"
#include "nvs/xunet.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace nvs::testing {

inline Pose<double> hemisphere_pose(Rng& rng, double radius = 2.7) {
  const double phi = rng.uniform(0, 2 * M_PI), cz = rng.uniform(0.1, 0.9);
  const double sz = std::sqrt(1 - cz * cz);
  return Pose<double>::look_at(radius * Vector3<double>(sz * std::cos(phi), sz * std::sin(phi), cz),
                               Vector3<double>::Zero());
}

/// Random denoiser inputs at the model resolution.
template <typename S>
DenoiserBatch<S> random_batch(const XUNetConfig& c, Index b, Rng& rng) {
  DenoiserBatch<S> batch;
  const Index n = c.image_size;
  batch.x = Tensor<S>({b, n, n, 3});
  batch.z = rng.normal_tensor<S>({b, n, n, 3});
  for (Index i = 0; i < batch.x.size(); ++i) batch.x[i] = static_cast<S>(rng.uniform(-1, 1));
  for (Index i = 0; i < b; ++i) {
    batch.logsnr_x.push_back(20.0);
    batch.logsnr_z.push_back(rng.uniform(-20, 20));
    batch.pose_x.push_back(hemisphere_pose(rng));
    batch.pose_z.push_back(hemisphere_pose(rng));
    batch.cond_mask.push_back(1);
  }
  batch.camera = Camera<double>::centered(static_cast<double>(n), n, n);
  return batch;
}

/// Perturbs every parameter so zero-initialized layers become active.
template <typename S>
void randomize(ParamStore<S>& params, Rng& rng, double scale = 0.2) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].mutable_value();
    for (Index j = 0; j < t.size(); ++j) t[j] += static_cast<S>(scale * rng.normal());
  }
}

/// Largest relative error |a - n| / max(|a|, |n|, floor) between tape and
/// central-difference gradients over `count` randomly chosen parameter entries.
inline double sampled_gradient_error(ParamStore<double>& params, const std::function<ag::Var<double>()>& loss,
                                     Rng& rng, int count, double step = 1e-5, double floor = 1e-6) {
  params.zero_grad();
  ag::backward(loss());
  const Index total = params.total_size();
  double worst = 0.0;
  for (int k = 0; k < count; ++k) {
    Index flat = static_cast<Index>(rng.below(static_cast<std::uint64_t>(total)));
    std::size_t id = 0;
    while (flat >= params[id].size()) flat -= params[id++].size();
    auto& leaf = params[id];
    const double analytic = leaf.grad()[flat];
    const double orig = leaf.value()[flat];
    leaf.mutable_value()[flat] = orig + step;
    const double up = loss().value()[0];
    leaf.mutable_value()[flat] = orig - step;
    const double down = loss().value()[0];
    leaf.mutable_value()[flat] = orig;
    const double numeric = (up - down) / (2 * step);
    worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor}));
  }
  return worst;
}

/// ch=8, a single level, 8x8 inputs.
inline XUNetConfig gradcheck_config() {
  XUNetConfig c;
  c.ch = 8;
  c.ch_mult = {1};
  c.emb_ch = 16;
  c.num_res_blocks = 1;
  c.attn_resolutions = {8};
  c.attn_heads = 2;
  c.dropout = 0.0;
  c.image_size = 8;
  c.pos_deg = 4;
  c.dir_deg = 2;
  return c;
}

}  // namespace nvs::testing

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <unistd.h>

namespace nvs::testing {

/// Scratch directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("nvs_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

/// True when both trees hold the same relative paths with identical bytes.
inline bool same_tree(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::vector<std::filesystem::path> fa, fb;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(std::filesystem::relative(e.path(), a));
  for (const auto& e : std::filesystem::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(std::filesystem::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& f : fa)
    if (read_bytes(a / f) != read_bytes(b / f)) return false;
  return true;
}

}  // namespace nvs::testing

namespace nvs::testing {

/// Smallest configuration that still exercises every pathway; used where a
/// test needs thousands of optimizer steps.
inline XUNetConfig micro_config() {
  XUNetConfig c;
  c.ch = 4;
  c.ch_mult = {1};
  c.emb_ch = 8;
  c.num_res_blocks = 1;
  c.attn_resolutions = {4};
  c.attn_heads = 1;
  c.dropout = 0.0;
  c.image_size = 4;
  c.pos_deg = 1;
  c.dir_deg = 1;
  return c;
}

}  // namespace nvs::testing
