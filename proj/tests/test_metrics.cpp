#include "nvs/metrics.hpp"
#include "nvs/rng.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>

using namespace nvs;

namespace {

Image random_image(Rng& rng, Index h, Index w) {
  Image img({h, w, 3});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<float>(rng.uniform());
  return img;
}

class MeanColor : public FeatureExtractor {
 public:
  Features<double> extract(const std::vector<Image>& images) const override {
    Features<double> f(static_cast<Index>(images.size()), 3);
    for (std::size_t i = 0; i < images.size(); ++i) {
      f.row(static_cast<Index>(i)) = images[i].matrix(3).cast<double>().colwise().mean();
    }
    return f;
  }
};

}  // namespace

TEST_CASE("psnr closed form and cap") {
  const Image a = Image::constant({8, 8, 3}, 0.5f);
  CHECK(psnr(a, a) == kPsnrCap);
  CHECK(psnr(a, Image::constant({8, 8, 3}, 0.75f)) == doctest::Approx(10 * std::log10(16.0)).epsilon(1e-12));
  CHECK(std::abs(psnr(Image::constant({4, 4, 3}, 0.0f), Image::constant({4, 4, 3}, 0.1f)) - 20.0) < 1e-5);
}

TEST_CASE("psnr of an exact 0.01 mean squared error is 20 dB") {
  // 192 of 300 entries off by 0.125: 192 * 0.015625 / 300 = 0.01, all exact in binary.
  Image a = Image::constant({10, 10, 3}, 0.25f), b = a;
  for (Index i = 0; i < 192; ++i) b[i] += 0.125f;
  CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("ssim identity, symmetry and constant images") {
  Rng rng(1);
  const Image a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
  CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  CHECK(psnr(a, b) == psnr(b, a));
  CHECK(ssim(a, b) < 0.5);
  const double c1 = 1e-4;
  const double s = ssim(Image::constant({16, 16, 3}, 0.0f), Image::constant({16, 16, 3}, 1.0f));
  CHECK(s == doctest::Approx(c1 / (1 + c1)).epsilon(1e-9));
}

TEST_CASE("ssim falls back to a smaller window on tiny images") {
  Rng rng(2);
  const Image a = random_image(rng, 6, 9);
  CHECK(ssim(a, a) == doctest::Approx(1.0));
  Image noisy = a;
  for (Index i = 0; i < noisy.size(); ++i) noisy[i] = std::clamp(noisy[i] + 0.05f * static_cast<float>(rng.normal()), 0.f, 1.f);
  const double s = ssim(a, noisy);
  CHECK(s < 1.0);
  CHECK(s > 0.5);
}

TEST_CASE("ssim decreases with noise") {
  Rng rng(3);
  Image base({32, 32, 3});
  for (Index y = 0; y < 32; ++y)
    for (Index x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) base[(y * 32 + x) * 3 + c] = static_cast<float>(0.5 + 0.4 * std::sin(0.3 * x + c) * std::cos(0.2 * y));
  double last = 1.0;
  for (double sigma : {0.01, 0.05, 0.2}) {
    Image noisy = base;
    for (Index i = 0; i < noisy.size(); ++i) noisy[i] += static_cast<float>(sigma * rng.normal());
    const double s = ssim(base, noisy);
    CHECK(s < last);
    last = s;
  }
}

TEST_CASE("metric shape errors") {
  CHECK_THROWS_AS(psnr(Image({4, 4, 3}), Image({4, 5, 3})), std::invalid_argument);
  CHECK_THROWS_AS(ssim(Image({4, 4, 3}), Image({5, 4, 3})), std::invalid_argument);
}

TEST_CASE("frechet distance of Gaussian fits") {
  Rng rng(4);
  Features<double> a(200, 4);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  CHECK(std::abs(frechet_distance(a, a)) < 1e-9);
  Eigen::RowVector4d shift(1, -2, 0.5, 3);
  Features<double> b = a.rowwise() + shift;
  CHECK(frechet_distance(a, b) == doctest::Approx(shift.squaredNorm()).epsilon(1e-9));
  Features<double> c = a * 2.0;
  // Mean doubles and covariance scales by 4: |mu|^2 + trace(S + 4S - 2 * 2S).
  Eigen::MatrixXd centered = a.rowwise() - a.colwise().mean();
  const double trace = (centered.transpose() * centered).trace() / (a.rows() - 1);
  CHECK(frechet_distance(a, c) == doctest::Approx(trace + a.colwise().mean().squaredNorm()).epsilon(1e-6));
}

TEST_CASE("feature distance goes through the extractor") {
  Rng rng(5);
  std::vector<Image> a, b;
  for (int i = 0; i < 6; ++i) a.push_back(random_image(rng, 4, 4));
  for (const auto& img : a) b.push_back(img);
  CHECK(std::abs(feature_distance(MeanColor(), a, b)) < 1e-9);
}
