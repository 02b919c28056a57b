#include "nvs/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

namespace nvs {

namespace {

void check_pair(const Image& a, const Image& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  if (a.rank() != 3 || a.dim(2) != 3) throw std::invalid_argument(std::string(what) + ": expected (H, W, 3) images");
}

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Separable valid-mode filtering with a normalized 1D kernel.
Plane filter_valid(const Plane& x, const Eigen::ArrayXd& k) {
  const Index n = k.size(), h = x.rows() - n + 1, w = x.cols() - n + 1;
  Plane rows(x.rows(), w);
  for (Index c = 0; c < w; ++c) {
    rows.col(c).setZero();
    for (Index i = 0; i < n; ++i) rows.col(c) += k[i] * x.col(c + i);
  }
  Plane out(h, w);
  for (Index r = 0; r < h; ++r) {
    out.row(r).setZero();
    for (Index i = 0; i < n; ++i) out.row(r) += k[i] * rows.row(r + i);
  }
  return out;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  check_pair(a, b, "psnr");
  const double mse = (a.array().cast<double>() - b.array().cast<double>()).square().mean();
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  check_pair(a, b, "ssim");
  const Index h = a.dim(0), w = a.dim(1);
  Index size = std::min<Index>({11, h, w});
  if (size % 2 == 0) --size;
  const double sigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  Eigen::ArrayXd k(size);
  for (Index i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(size - 1) / 2.0;
    k[i] = std::exp(-d * d / (2 * sigma * sigma));
  }
  k /= k.sum();
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    Plane x(h, w), y(h, w);
    for (Index i = 0; i < h * w; ++i) {
      x(i / w, i % w) = a[i * 3 + c];
      y(i / w, i % w) = b[i * 3 + c];
    }
    const Plane mx = filter_valid(x, k), my = filter_valid(y, k);
    const Plane sxx = filter_valid(x * x, k) - mx * mx;
    const Plane syy = filter_valid(y * y, k) - my * my;
    const Plane sxy = filter_valid(x * y, k) - mx * my;
    const Plane map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
    total += map.mean();
  }
  return total / 3.0;
}

double frechet_distance(const Features<double>& a, const Features<double>& b) {
  if (a.cols() != b.cols() || a.rows() < 2 || b.rows() < 2) {
    throw std::invalid_argument("frechet_distance: need at least two rows of equal width per set");
  }
  auto stats = [](const Features<double>& f) {
    const Eigen::RowVectorXd mu = f.colwise().mean();
    const Eigen::MatrixXd centered = f.rowwise() - mu;
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(f.rows() - 1);
    return std::pair{mu, cov};
  };
  const auto [mu1, s1] = stats(a);
  const auto [mu2, s2] = stats(b);
  // Tr sqrt(S1 S2) = Tr sqrt(S1^1/2 S2 S1^1/2), which is symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> e1(s1);
  const Eigen::MatrixXd root = e1.eigenvectors() * e1.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                               e1.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(root * s2 * root, Eigen::EigenvaluesOnly);
  const double cross = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return (mu1 - mu2).squaredNorm() + s1.trace() + s2.trace() - 2.0 * cross;
}

double feature_distance(const FeatureExtractor& extractor, const std::vector<Image>& a, const std::vector<Image>& b) {
  return frechet_distance(extractor.extract(a), extractor.extract(b));
}

}  // namespace nvs
