#include "nvs/diffusion.hpp"
#include "nvs/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace nvs;

namespace {

// Scalar oracles evaluated independently of the library helpers.
double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Eigen::ArrayXd scalar(double v) { return Eigen::ArrayXd::Constant(1, v); }

}  // namespace

TEST_CASE("cosine log-SNR schedule endpoints and midpoint") {
  CHECK(std::abs(logsnr_cosine(0.0) - 20.0) < 1e-6);
  CHECK(std::abs(logsnr_cosine(1.0) + 20.0) < 1e-6);
  CHECK(std::abs(logsnr_cosine(0.5)) < 1e-3);
  CHECK_THROWS_AS(logsnr_cosine(-0.01), std::invalid_argument);
  CHECK_THROWS_AS(logsnr_cosine(1.01), std::invalid_argument);
}

TEST_CASE("schedule is strictly decreasing on a 1000-point grid") {
  NoiseSchedule schedule;
  auto grid = schedule.grid(999);
  for (std::size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] < grid[i - 1]);
}

TEST_CASE("forward process examples") {
  Eigen::ArrayXd x(3), eps(3);
  x << 0.5, -1.0, 0.25;
  eps << 5.0, -5.0, 1.0;
  // The noise scale at log-SNR 20 is sqrt(sigmoid(-20)) ~ 4.54e-5.
  const double tiny = std::sqrt(sig(-20.0));
  CHECK((q_sample(x, 20.0, eps) - x).abs().maxCoeff() <= 5.0 * tiny + 1e-9);
  Eigen::ArrayXd small = eps.cwiseMax(-2.0).cwiseMin(2.0);
  CHECK((q_sample(x, 20.0, small) - x).abs().maxCoeff() < 1e-4);
  CHECK((q_sample(x, 0.0, eps) - (x + eps) / std::sqrt(2.0)).abs().maxCoeff() < 1e-12);
  const double z = std::sqrt(sig(2.0)) * 0.5 - std::sqrt(sig(-2.0));
  CHECK(z == doctest::Approx(0.1240).epsilon(1e-3));
  CHECK(q_sample(scalar(0.5), 2.0, scalar(-1.0))[0] == doctest::Approx(z).epsilon(1e-12));
  CHECK_THROWS_AS(q_sample(x, 0.0, Eigen::ArrayXd(2)), std::invalid_argument);
}

TEST_CASE("x prediction inverts the forward process") {
  const double z = std::sqrt(sig(2.0)) * 0.5 - std::sqrt(sig(-2.0));
  CHECK(std::abs(predict_x(scalar(z), 2.0, scalar(-1.0))[0] - 0.5) < 1e-6);
  Eigen::ArrayXd zz(2);
  zz << 0.3, -0.7;
  CHECK((predict_x(zz, 20.0, Eigen::ArrayXd::Zero(2)) - zz).abs().maxCoeff() < 1e-4);
  CHECK(predict_x(scalar(5.0), 0.0, scalar(0.0))[0] == 1.0);
}

TEST_CASE("round trip predict_x(q_sample(x)) over random triples") {
  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-1, 1), eps = rng.normal(), l = rng.uniform(-20, 20);
    const double back = predict_x(q_sample(scalar(x), l, scalar(eps)), l, scalar(eps))[0];
    CHECK(std::abs(back - x) < 1e-5);
  }
}

TEST_CASE("posterior step examples") {
  Eigen::ArrayXd z(2), xh(2);
  z << 0.4, -0.9;
  xh << 0.1, 0.2;
  auto c0 = posterior_coefficients(1.5, 1.5);
  CHECK(c0.variance == 0.0);
  CHECK((posterior_step(z, xh, 1.5, 1.5) - z).abs().maxCoeff() == 0.0);

  CHECK((posterior_step(z, xh, -20.0, 20.0) - xh).abs().maxCoeff() < 1e-4);

  // Scalar case evaluated directly from the closed form.
  const double e = std::exp(-2.0);
  const double mean = std::sqrt(sig(2.0)) / std::sqrt(sig(0.0)) * e * 1.0 + std::sqrt(sig(2.0)) * (1 - e) * 0.5;
  const double var = sig(-2.0) * (1 - e);
  CHECK(mean == doctest::Approx(0.5855).epsilon(2e-4));
  CHECK(var == doctest::Approx(0.1031).epsilon(5e-4));
  CHECK(posterior_step(scalar(1.0), scalar(0.5), 0.0, 2.0)[0] == doctest::Approx(mean).epsilon(1e-12));
  CHECK(posterior_coefficients(0.0, 2.0).variance == doctest::Approx(var).epsilon(1e-12));
  Eigen::ArrayXd noise = scalar(1.0);
  CHECK(posterior_step(scalar(1.0), scalar(0.5), 0.0, 2.0, &noise)[0] ==
        doctest::Approx(mean + std::sqrt(var)).epsilon(1e-12));
  CHECK_THROWS_AS(posterior_coefficients(2.0, 1.0), std::invalid_argument);
}

TEST_CASE("ancestral chain with an oracle denoiser converges to the target") {
  Rng rng(22);
  const int n = 16 * 16 * 3;
  Eigen::ArrayXf target(n);
  for (int i = 0; i < n; ++i) target[i] = static_cast<float>(rng.uniform(-1, 1));
  NoiseSchedule schedule;
  const auto grid = schedule.grid(256);
  Eigen::ArrayXf z(n);
  for (int i = 0; i < n; ++i) z[i] = static_cast<float>(rng.normal());
  Eigen::ArrayXf x_hat;
  for (int j = 256; j >= 1; --j) {
    const auto s = forward_scales(grid[j]);
    Eigen::ArrayXf eps_hat = (z - target * float(s.signal)) / float(s.noise);
    x_hat = predict_x(z, grid[j], eps_hat);
    if (j > 1) {
      Eigen::ArrayXf noise(n);
      for (int i = 0; i < n; ++i) noise[i] = static_cast<float>(rng.normal());
      z = posterior_step(z, x_hat, grid[j], grid[j - 1], &noise);
    }
  }
  CHECK((x_hat - target).abs().maxCoeff() <= 1e-2);
}

TEST_CASE("posterior steps preserve the forward marginal of the true x") {
  // z_s = mean + stdev * noise with x known must be distributed as
  // q(z_s | x): residual (z_s - alpha_s x) / sigma_s is unit Gaussian.
  Rng rng(23);
  const int n = 20000;
  Eigen::ArrayXd x(n), z(n), noise(n);
  const double lt = -1.0, ls = 1.5;
  const auto st = forward_scales(lt), ss = forward_scales(ls);
  for (int i = 0; i < n; ++i) {
    x[i] = rng.uniform(-1, 1);
    z[i] = st.signal * x[i] + st.noise * rng.normal();
    noise[i] = rng.normal();
  }
  Eigen::ArrayXd zs = posterior_step(z, x, lt, ls, &noise);
  Eigen::ArrayXd r = (zs - ss.signal * x) / ss.noise;
  const double mean = r.mean();
  const double var = (r - mean).square().mean();
  CHECK(std::abs(mean) < 3.0 / std::sqrt(n));
  CHECK(std::abs(var - 1.0) < 3.0 * std::sqrt(2.0 / n));
}

TEST_CASE("classifier-free guidance") {
  Eigen::ArrayXd c(2), u(2);
  c << 0.2, -1.0;
  u << 0.1, 0.5;
  CHECK((guide(c, u, 1.0) - c).abs().maxCoeff() == 0.0);
  CHECK((guide(c, u, 0.0) - u).abs().maxCoeff() == 0.0);
  CHECK(guide(c, u, 3.0)[0] == doctest::Approx(0.4));
  const double w1 = 1.5, w2 = 2.5;
  Eigen::ArrayXd lhs = guide(c, u, w1 + w2) - u;
  Eigen::ArrayXd rhs = (w1 + w2) / w1 * (guide(c, u, w1) - u);
  CHECK((lhs - rhs).abs().maxCoeff() < 1e-15);
}

TEST_CASE("epsilon loss") {
  Rng rng(24);
  const int n = 4096;
  Eigen::ArrayXd eps(n);
  for (int i = 0; i < n; ++i) eps[i] = rng.normal();
  CHECK(eps_loss(eps, eps) == 0.0);
  CHECK(std::abs(eps_loss(Eigen::ArrayXd::Zero(n), eps) - 1.0) < 3.0 * std::sqrt(2.0 / n));
  CHECK(eps_loss(scalar(1.0), scalar(0.0)) == 1.0);
}

TEST_CASE("noise-level embedding input") {
  CHECK(logsnr_to_unit(0.0) == doctest::Approx(0.5));
  CHECK(logsnr_to_unit(20.0) == doctest::Approx(2.0 * std::exp(-10.0) / M_PI).epsilon(1e-6));
  CHECK(logsnr_to_unit(25.0) == logsnr_to_unit(20.0));
}
