#include "nvs/field.hpp"
#include "nvs/metrics.hpp"
#include "nvs/scenes.hpp"

#include "gradcheck.hpp"
#include "support.hpp"

#include <doctest.h>

#include <chrono>
#include <cmath>
#include <iostream>

using namespace nvs;
using nvs::testing::VarD;

namespace {

VarD constant_sigma(Index rays, Index samples, double value) {
  return VarD::constant(Tensor<double>::constant({rays, samples}, value));
}

/// sum_{i,j} w_i w_j |m_i - m_j| + 1/3 sum w_i^2 delta_i, evaluated literally.
double distortion_oracle(const std::vector<double>& w, const std::vector<double>& m, const std::vector<double>& d) {
  double s = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t j = 0; j < w.size(); ++j) s += w[i] * w[j] * std::abs(m[i] - m[j]);
    s += w[i] * w[i] * d[i] / 3;
  }
  return s;
}

std::vector<PosedImage> sphere_views(int count, int res, double radius, std::uint64_t seed, Camera<double>* camera) {
  SceneSpec spec;
  spec.primitives.push_back(Primitive::sphere(Vector3<double>::Zero(), 0.6, Vector3<double>(0.9, 0.35, 0.2)));
  *camera = Camera<double>::centered(res, res, res);
  Rng rng(seed);
  std::vector<PosedImage> views;
  for (int i = 0; i < count; ++i) {
    const auto pose = orbit_pose(rng.uniform(0, 2 * M_PI), rng.uniform(0.1, 1.2), radius);
    views.push_back({to_signed(render_scene(spec, pose, *camera)), pose});
  }
  return views;
}

}  // namespace

TEST_CASE("zero density renders the background with no opacity") {
  auto w = render_weights(constant_sigma(3, 16, 0.0), Tensor<double>::constant({3, 16}, 0.1));
  CHECK(w.value().array().abs().maxCoeff() == 0.0);
  auto rgb = VarD::constant(Tensor<double>::constant({3, 16, 3}, 0.3));
  auto c = composite(w, rgb, Vector3<double>(1.0, 0.5, 0.25));
  for (Index i = 0; i < 3; ++i) {
    CHECK(c.value()[i * 3 + 0] == 1.0);
    CHECK(c.value()[i * 3 + 1] == 0.5);
    CHECK(c.value()[i * 3 + 2] == 0.25);
  }
}

TEST_CASE("uniform density accumulates 1 - exp(-sigma d)") {
  // ln 2 over the segment gives opacity one half.
  const double length = 2.25, n = 128;
  for (double optical : {std::log(2.0), 0.1, 1.0, 3.0}) {
    const double sigma = optical / length;
    auto w = render_weights(constant_sigma(1, 128, sigma), Tensor<double>::constant({1, 128}, length / n));
    CHECK(std::abs(w.value().array().sum() - (1 - std::exp(-optical))) <= 1e-2);
  }
}

TEST_CASE("opaque near slab shows its color") {
  const Index n = 128;
  Tensor<double> sigma({1, n});
  Tensor<double> rgb({1, n, 3});
  const Vector3<double> slab(0.2, 0.7, 0.4);
  for (Index k = 0; k < n; ++k) {
    sigma[k] = k < 8 ? 500.0 : 2.0;
    for (int c = 0; c < 3; ++c) rgb[k * 3 + c] = k < 8 ? slab[c] : 0.95;
  }
  auto w = render_weights(VarD::constant(sigma), Tensor<double>::constant({1, n}, 0.02));
  auto c = composite(w, VarD::constant(rgb), Vector3<double>::Ones());
  for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(c.value()[ch] - slab[ch]) <= 1e-3);
}

TEST_CASE("accumulated weights stay within [0, 1]") {
  Rng rng(3);
  Tensor<double> sigma({64, 128});
  for (Index i = 0; i < sigma.size(); ++i) sigma[i] = std::exp(rng.uniform(-8, 8));
  Tensor<double> delta({64, 128});
  for (Index i = 0; i < delta.size(); ++i) delta[i] = rng.uniform(0, 0.2);
  auto w = render_weights(VarD::constant(sigma), delta);
  for (Index r = 0; r < 64; ++r) {
    const double s = w.value().matrix(128).row(r).sum();
    CHECK(s >= 0.0);
    CHECK(s <= 1.0 + 1e-6);
  }
  CHECK(w.value().array().minCoeff() >= 0.0);
}

TEST_CASE("render weight and composite gradients") {
  Rng rng(5);
  auto sigma = testing::random_leaf(rng, {2, 6});
  sigma.mutable_value().array() = sigma.value().array().abs() * 3;
  auto rgb = testing::random_leaf(rng, {2, 6, 3});
  Tensor<double> delta({2, 6});
  for (Index i = 0; i < delta.size(); ++i) delta[i] = rng.uniform(0.05, 0.3);
  const double err = testing::max_gradient_error({sigma, rgb}, [&](const std::vector<VarD>& v) {
    return testing::project(composite(render_weights(v[0], delta), v[1], Vector3<double>(1, 0.5, 0)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("distortion loss examples") {
  auto zero = VarD::constant(Tensor<double>({1, 4}));
  Tensor<double> mids({1, 4}, Eigen::ArrayXd::LinSpaced(4, 0.1, 0.7));
  Tensor<double> deltas = Tensor<double>::constant({1, 4}, 0.2);
  CHECK(distortion_loss(zero, mids, deltas).value()[0] == 0.0);

  Tensor<double> w({1, 2}, Eigen::Array2d(0.5, 0.5));
  Tensor<double> m({1, 2}, Eigen::Array2d(0.2, 0.8));
  Tensor<double> d = Tensor<double>::constant({1, 2}, 0.1);
  const double intra = (0.25 * 0.1 + 0.25 * 0.1) / 3;
  CHECK(distortion_loss(VarD::constant(w), m, d).value()[0] == doctest::Approx(0.3 + intra).epsilon(1e-12));
}

TEST_CASE("distortion loss matches the quadratic double sum and its gradient") {
  Rng rng(8);
  const Index r = 3, n = 10;
  auto w = testing::random_leaf(rng, {r, n});
  w.mutable_value().array() = w.value().array().abs() * 0.2;
  Tensor<double> m({r, n}), d({r, n});
  double oracle = 0;
  for (Index i = 0; i < r; ++i) {
    double t = 0;
    std::vector<double> wi, mi, di;
    for (Index k = 0; k < n; ++k) {
      d[i * n + k] = rng.uniform(0.05, 0.2);
      m[i * n + k] = t + d[i * n + k] / 2;
      t += d[i * n + k];
      wi.push_back(w.value()[i * n + k]);
      mi.push_back(m[i * n + k]);
      di.push_back(d[i * n + k]);
    }
    oracle += distortion_oracle(wi, mi, di) / r;
  }
  CHECK(distortion_loss(w, m, d).value()[0] == doctest::Approx(oracle).epsilon(1e-12));
  const double err = testing::max_gradient_error(
      {w}, [&](const std::vector<VarD>& v) { return distortion_loss(v[0], m, d); });
  CHECK(err < 1e-6);
}

TEST_CASE("concentrated weights have lower distortion than split weights") {
  const Index n = 32;
  Tensor<double> m({1, n}), d = Tensor<double>::constant({1, n}, 1.0 / n);
  for (Index k = 0; k < n; ++k) m[k] = (k + 0.5) / n;
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const double mass = rng.uniform(0.1, 1.0);
    const Index a = static_cast<Index>(rng.below(n / 4)), b = n - 1 - static_cast<Index>(rng.below(n / 4));
    Tensor<double> one({1, n}), two({1, n});
    one[a] = mass;
    two[a] = mass / 2;
    two[b] = mass / 2;
    CHECK(distortion_loss(VarD::constant(one), m, d).value()[0] < distortion_loss(VarD::constant(two), m, d).value()[0]);
  }
}

TEST_CASE("orientation loss examples") {
  Tensor<double> dir({1, 3}, Eigen::Array3d(0, 0, 1));
  auto weight = [](double v) { return VarD::constant(Tensor<double>::constant({1, 1}, v)); };
  auto normal_grad = [](Vector3<double> n) {  // density gradient whose normal is n
    return VarD::constant(Tensor<double>({1, 1, 3}, Eigen::Array3d(-2 * n[0], -2 * n[1], -2 * n[2])));
  };
  CHECK(orientation_loss(weight(1.0), normal_grad({0, 0, 1}), dir).value()[0] == doctest::Approx(1.0));
  CHECK(orientation_loss(weight(0.4), normal_grad({std::sqrt(0.75), 0, 0.5}), dir).value()[0] ==
        doctest::Approx(0.1));
  CHECK(orientation_loss(weight(1.0), normal_grad({0, 0.6, -0.8}), dir).value()[0] == 0.0);
  CHECK(orientation_loss(weight(1.0), VarD::constant(Tensor<double>({1, 1, 3})), dir).value()[0] == 0.0);
}

TEST_CASE("orientation loss gradient") {
  Rng rng(4);
  auto w = testing::random_leaf(rng, {2, 5});
  w.mutable_value().array() = w.value().array().abs();
  auto g = testing::random_leaf(rng, {2, 5, 3});
  Tensor<double> dirs({2, 3});
  dirs.matrix(3).row(0) = Vector3<double>(0.3, -0.2, 0.9).normalized().transpose();
  dirs.matrix(3).row(1) = Vector3<double>(-0.5, 0.1, 0.4).normalized().transpose();
  const double err = testing::max_gradient_error(
      {w, g}, [&](const std::vector<VarD>& v) { return orientation_loss(v[0], v[1], dirs); });
  CHECK(err < 1e-6);
}

TEST_CASE("field density gradient matches finite differences in position") {
  FieldConfig fc;
  fc.width = 8;
  NeuralField field(fc);
  ParamStore<double> p(field.registry());
  Rng rng(6);
  p.initialize(rng);
  testing::randomize(p, rng, 0.3);
  Points<double> x(5, 3);
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-0.5, 0.5);
  const auto out = field.evaluate(p, x, true);
  const double h = 1e-6;
  for (Index i = 0; i < 5; ++i) {
    for (int a = 0; a < 3; ++a) {
      Points<double> up = x.row(i), down = x.row(i);
      up(0, a) += h;
      down(0, a) -= h;
      const double fd = (field.density(p, up)[0] - field.density(p, down)[0]) / (2 * h);
      CHECK(out.gradient.value()[i * 3 + a] == doctest::Approx(fd).epsilon(1e-5).scale(1e-3));
    }
  }
  CHECK((out.sigma.value().array() >= 0).all());
  CHECK((out.rgb.value().array() > 0).all());
  CHECK((out.rgb.value().array() < 1).all());
  CHECK((out.sigma.value().matrix(1).col(0).array() - field.density(p, x)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("width-8 field training loss gradient check") {
  FieldConfig fc;
  fc.width = 8;
  NeuralField field(fc);
  ParamStore<double> p(field.registry());
  Rng rng(7);
  p.initialize(rng);
  testing::randomize(p, rng, 0.3);

  Camera<double> camera = Camera<double>::centered(4, 4, 4);
  auto rays = make_rays(orbit_pose(0.4, 0.5, 2.0), camera);
  RenderOptions opt;
  opt.t_near = 0.75;
  opt.t_far = 3.0;
  opt.n_samples = 16;
  Tensor<double> target({rays.size(), 3});
  for (Index i = 0; i < target.size(); ++i) target[i] = rng.uniform();
  Tensor<double> dirs({rays.size(), 3});
  dirs.matrix(3) = rays.directions;
  auto loss = [&] {
    auto r = render_rays(field, p, rays, opt, nullptr, true);
    auto l = ag::mse(r.color, target);
    l = ag::add(l, ag::scale(distortion_loss(r.weights, r.midpoints, r.deltas), 0.5));
    return ag::add(l, ag::scale(orientation_loss(r.weights, r.gradients, dirs), 0.5));
  };
  CHECK(testing::sampled_gradient_error(p, loss, rng, 60) < 1e-3);
}

TEST_CASE("near and far bounds") {
  const auto [tn, tf] = near_far(2.0, 2.0);
  CHECK(tn == 0.75);
  CHECK(tf == 3.0);
  CHECK_THROWS(near_far(0.0, 1.0));
}

TEST_CASE("untrained field is a uniform haze") {
  Camera<double> camera;
  auto views = sphere_views(4, 16, 2.5, 1, &camera);
  FieldTrainConfig cfg;
  cfg.steps = 0;
  auto f = train_field(views, camera, cfg);
  Points<float> x = Points<float>::Random(50, 3);
  const auto out = f.field.evaluate(f.params, x, false);
  CHECK(out.sigma.value().array().maxCoeff() == out.sigma.value().array().minCoeff());
  CHECK((out.rgb.value().array() == 0.5f).all());
  // Without the scene cube every ray crosses the same haze.
  f.render.bound = 0;
  f.grid.reset();
  const Image img = render_field(f, orbit_pose(1.0, 0.4, 2.5), camera);
  CHECK(img.array().maxCoeff() - img.array().minCoeff() < 1e-5);
}

TEST_CASE("renders are deterministic") {
  Camera<double> camera;
  auto views = sphere_views(6, 16, 2.5, 2, &camera);
  FieldTrainConfig cfg;
  cfg.steps = 20;
  cfg.rays_per_step = 64;
  cfg.n_samples = 32;
  cfg.grid_warmup_steps = 10;
  const auto f = train_field(views, camera, cfg);
  const auto pose = orbit_pose(1.0, 0.4, 2.5);
  const Image a = render_field(f, pose, camera);
  const Image b = render_field(f, pose, camera);
  CHECK((a.array() == b.array()).all());
  const auto g = train_field(views, camera, cfg);
  CHECK((render_field(g, pose, camera).array() == a.array()).all());
}

TEST_CASE("field config validation and round trip") {
  FieldTrainConfig c;
  c.steps = 12;
  c.lambda_distortion = 0.5;
  c.field.width = 16;
  nlohmann::json j = c;
  const auto back = j.get<FieldTrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(c.lr_at(0) == 0.01);
  CHECK(c.lr_at(50) == doctest::Approx(0.0055));
  CHECK(c.lr_at(100) == 0.001);
  CHECK(c.lr_at(900) == 0.001);
  c.rays_per_step = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("field fits a single sphere well enough to predict held-out views") {
  Camera<double> camera;
  auto views = sphere_views(44, 32, 2.5, 11, &camera);
  std::vector<PosedImage> train(views.begin(), views.begin() + 40);
  FieldTrainConfig cfg;
  cfg.seed = 1;
  const auto start = std::chrono::steady_clock::now();
  const auto f = train_field(train, camera, cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  double total = 0;
  for (std::size_t i = 40; i < views.size(); ++i) total += psnr(render_field(f, views[i].pose, camera), to_unit(views[i].image));
  const double held_out = total / 4;
  MESSAGE("held-out PSNR " << held_out << " dB, " << secs << " s, final loss " << f.losses.back()
                           << ", occupied " << (f.grid ? f.grid->occupied_fraction() : 1.0));
  CHECK(held_out > 25.0);
}
