#include "support.hpp"

#include <doctest.h>

using namespace nvs;
using namespace nvs::testing;

namespace {

template <typename S>
double max_abs(const Tensor<S>& t) {
  return t.size() == 0 ? 0.0 : static_cast<double>(t.array().abs().maxCoeff());
}

template <typename S>
Tensor<S> frame_rows(const Tensor<S>& t, Index row) {
  const Index frame = t.size() / t.dim(0);
  Tensor<S> out({frame});
  out.array() = t.array().segment(row * frame, frame);
  return out;
}

}  // namespace

TEST_CASE("output is exactly zero at initialization for both architectures") {
  for (auto arch : {Architecture::xunet, Architecture::concat}) {
    auto c = XUNetConfig::tiny();
    c.architecture = arch;
    Denoiser model(c);
    ParamStore<float> params(model.registry());
    Rng rng(1);
    params.initialize(rng);
    auto batch = random_batch<float>(c, 2, rng);
    auto out = model.forward(params, batch, {});
    CHECK(out.shape() == Shape{2, 16, 16, 3});
    CHECK(max_abs(out.value()) == 0.0);
  }
}

TEST_CASE("parameter counts of the full-size preset") {
  auto c = XUNetConfig::paper();
  const double xunet = static_cast<double>(Denoiser(c).parameter_count());
  c.architecture = Architecture::concat;
  const double concat = static_cast<double>(Denoiser(c).parameter_count());
  CHECK(std::abs(xunet / 471e6 - 1.0) <= 0.05);
  CHECK(std::abs(concat / 421e6 - 1.0) <= 0.05);
  CHECK(concat < xunet);
}

TEST_CASE("desk and tiny presets build and validate") {
  CHECK(Denoiser(XUNetConfig::desk()).parameter_count() > 0);
  CHECK(Denoiser(XUNetConfig::tiny()).parameter_count() > 0);
  auto bad = XUNetConfig::desk();
  bad.image_size = 30;
  CHECK_THROWS_WITH_AS(Denoiser{bad}, doctest::Contains("not divisible"), std::invalid_argument);
  CHECK_THROWS_AS(XUNetConfig::named("huge"), std::invalid_argument);
}

TEST_CASE("config JSON round trip") {
  auto c = XUNetConfig::desk();
  c.architecture = Architecture::concat;
  c.cross_attention = false;
  nlohmann::json j = c;
  auto back = j.get<XUNetConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.ch_mult == c.ch_mult);
  CHECK(back.architecture == Architecture::concat);
}

TEST_CASE("mismatched input resolution is rejected") {
  auto c = XUNetConfig::tiny();
  Denoiser model(c);
  ParamStore<float> params(model.registry());
  Rng rng(2);
  auto other = c;
  other.image_size = 8;
  auto batch = random_batch<float>(other, 1, rng);
  CHECK_THROWS_AS(model.forward(params, batch, {}), std::invalid_argument);
}

TEST_CASE("parameter gradients match central differences") {
  auto c = gradcheck_config();
  Denoiser model(c);
  ParamStore<double> params(model.registry());
  Rng rng(3);
  params.initialize(rng);
  randomize(params, rng);
  auto batch = random_batch<double>(c, 2, rng);
  Tensor<double> eps = rng.normal_tensor<double>(batch.z.shape());
  auto loss = [&] { return ag::mse(model.forward(params, batch, {}), eps); };
  CHECK(sampled_gradient_error(params, loss, rng, 100) < 1e-3);
}

TEST_CASE("the clean frame reaches the noisy output only through cross-attention") {
  for (bool cross : {true, false}) {
    auto c = XUNetConfig::tiny();
    c.cross_attention = cross;
    Denoiser model(c);
    ParamStore<double> params(model.registry());
    Rng rng(4);
    params.initialize(rng);
    randomize(params, rng);
    auto batch = random_batch<double>(c, 1, rng);
    auto base = model.forward(params, batch, {}).value();
    batch.x.array().setZero();
    auto changed = model.forward(params, batch, {}).value();
    const double diff = (base.array() - changed.array()).abs().maxCoeff();
    if (cross) {
      CHECK(diff > 1e-4);
    } else {
      CHECK(diff == 0.0);
    }
  }
}

TEST_CASE("the returned slice belongs to the frame carrying the noisy log-SNR") {
  auto c = XUNetConfig::tiny();
  c.use_ref_pose_emb = false;
  Denoiser model(c);
  ParamStore<double> params(model.registry());
  Rng rng(5);
  params.initialize(rng);
  randomize(params, rng);
  auto a = random_batch<double>(c, 1, rng);
  a.x.array().setConstant(-0.5);
  a.z.array().setConstant(0.5);
  a.logsnr_z[0] = -3.0;
  auto b = a;
  std::swap(b.x, b.z);
  std::swap(b.pose_x, b.pose_z);
  std::swap(b.logsnr_x, b.logsnr_z);

  auto frames_a = model.forward_frames(params, a, {}).value();
  auto frames_b = model.forward_frames(params, b, {}).value();
  auto out_a = model.forward(params, a, {}).value();
  // Weight sharing makes the network symmetric in the two slots.
  CHECK((frame_rows(frames_a, 1).array() - frame_rows(frames_b, 0).array()).abs().maxCoeff() < 1e-10);
  CHECK((frame_rows(frames_a, 1).array() - out_a.array()).abs().maxCoeff() == 0.0);
  CHECK((out_a.array() - model.forward(params, b, {}).value().array()).abs().maxCoeff() > 1e-4);
}

TEST_CASE("log-SNR inputs above the clip point behave like the clip point") {
  auto c = XUNetConfig::tiny();
  Denoiser model(c);
  ParamStore<double> params(model.registry());
  Rng rng(6);
  params.initialize(rng);
  randomize(params, rng);
  auto batch = random_batch<double>(c, 1, rng);
  batch.logsnr_z[0] = 20.0;
  auto at20 = model.forward(params, batch, {}).value();
  batch.logsnr_z[0] = 25.0;
  auto at25 = model.forward(params, batch, {}).value();
  CHECK((at20.array() - at25.array()).abs().maxCoeff() == 0.0);
  batch.logsnr_z[0] = 0.0;
  CHECK((at20.array() - model.forward(params, batch, {}).value().array()).abs().maxCoeff() > 0.0);
}

TEST_CASE("unconditional elements ignore the poses") {
  for (auto arch : {Architecture::xunet, Architecture::concat}) {
    auto c = XUNetConfig::tiny();
    c.architecture = arch;
    Denoiser model(c);
    ParamStore<double> params(model.registry());
    Rng rng(7);
    params.initialize(rng);
    randomize(params, rng);
    auto batch = random_batch<double>(c, 1, rng);
    make_unconditional(batch, 0, rng);
    CHECK(batch.logsnr_x[0] == -20.0);
    CHECK(batch.cond_mask[0] == 0);
    auto base = model.forward(params, batch, {}).value();
    batch.pose_x[0] = hemisphere_pose(rng);
    batch.pose_z[0] = hemisphere_pose(rng);
    CHECK((base.array() - model.forward(params, batch, {}).value().array()).abs().maxCoeff() == 0.0);
    batch.cond_mask[0] = 1;
    CHECK((base.array() - model.forward(params, batch, {}).value().array()).abs().maxCoeff() > 0.0);
  }
}

TEST_CASE("residual blocks do not amplify unit-Gaussian inputs at initialization") {
  ParamRegistry reg;
  nn::XUNetBlock block(reg, "b", 32, 32, 16, 32, true, true, 4);
  ParamStore<float> params(reg);
  Rng rng(8);
  params.initialize(rng);
  auto h = ag::Var<float>::constant(rng.normal_tensor<float>({2, 8, 8, 32}));
  auto emb = ag::Var<float>::constant(rng.normal_tensor<float>({2, 8, 8, 16}));
  auto out = block(params, h, emb, {});
  auto stddev = [](const Tensor<float>& t) {
    const double m = t.array().template cast<double>().mean();
    return std::sqrt((t.array().template cast<double>() - m).square().mean());
  };
  CHECK(stddev(out.value()) <= 1.1 * stddev(h.value()));
}

TEST_CASE("regression mode with an untrained network saturates and is seeded") {
  auto c = XUNetConfig::tiny();
  Denoiser model(c);
  ParamStore<float> params(model.registry());
  Rng init(9);
  params.initialize(init);
  auto batch = random_batch<float>(c, 2, init);
  Rng r1(10), r2(10);
  auto a = regression_forward(model, params, batch.x, batch.pose_x, batch.pose_z, batch.camera, r1);
  auto b = regression_forward(model, params, batch.x, batch.pose_x, batch.pose_z, batch.camera, r2);
  CHECK((a.array() == b.array()).all());
  CHECK(max_abs(a) <= 1.0);
  const double saturated = (a.array().abs() == 1.0f).template cast<double>().mean();
  CHECK(saturated > 0.99);
}
