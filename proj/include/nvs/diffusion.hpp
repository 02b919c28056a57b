#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <string>
#include <optional>
#include <stdexcept>
#include <vector>

namespace nvs {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return x >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

/// Cosine-shaped log-SNR schedule, decreasing from logsnr_max at t = 0 to
/// logsnr_min at t = 1.
struct NoiseSchedule {
  double logsnr_min = -20.0;
  double logsnr_max = 20.0;

  double operator()(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("logsnr schedule: t must lie in [0, 1]");
    const double b = std::atan(std::exp(-0.5 * logsnr_max));
    const double a = std::atan(std::exp(-0.5 * logsnr_min)) - b;
    return -2.0 * std::log(std::tan(a * t + b));
  }

  /// Log-SNR at t_j = j / steps for j = 0..steps; entry `steps` is the
  /// noisiest level.
  std::vector<double> grid(int steps) const {
    if (steps < 1) throw std::invalid_argument("schedule grid needs at least one step");
    std::vector<double> out(steps + 1);
    for (int j = 0; j <= steps; ++j) out[j] = (*this)(static_cast<double>(j) / steps);
    return out;
  }
};

inline double logsnr_cosine(double t, double logsnr_min = -20.0, double logsnr_max = 20.0) {
  return NoiseSchedule{logsnr_min, logsnr_max}(t);
}

/// Signal and noise scales of the forward process at log-SNR `logsnr`.
struct ForwardScales {
  double signal;  // sigma(logsnr)^(1/2)
  double noise;   // sigma(-logsnr)^(1/2)
};

inline ForwardScales forward_scales(double logsnr) {
  return {std::sqrt(sigmoid(logsnr)), std::sqrt(sigmoid(-logsnr))};
}

namespace detail {
template <typename A, typename B>
void require_same_size(const Eigen::DenseBase<A>& a, const Eigen::DenseBase<B>& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}
}  // namespace detail

/// z = sigma(l)^(1/2) x + sigma(-l)^(1/2) eps.
template <typename X, typename E>
typename X::PlainObject q_sample(const Eigen::ArrayBase<X>& x, double logsnr, const Eigen::ArrayBase<E>& eps) {
  detail::require_same_size(x, eps, "q_sample");
  using S = typename X::Scalar;
  const auto s = forward_scales(logsnr);
  return x * S(s.signal) + eps * S(s.noise);
}

/// x-hat recovered from an epsilon prediction, clipped to [-1, 1].
template <typename Z, typename E>
typename Z::PlainObject predict_x(const Eigen::ArrayBase<Z>& z, double logsnr, const Eigen::ArrayBase<E>& eps_hat) {
  detail::require_same_size(z, eps_hat, "predict_x");
  using S = typename Z::Scalar;
  const auto s = forward_scales(logsnr);
  return ((z - eps_hat * S(s.noise)) / S(s.signal)).cwiseMax(S(-1)).cwiseMin(S(1));
}

/// Coefficients of q(z_s | z_t, x): mean = z_coef z_t + x_coef x,
/// variance as given, for log-SNRs logsnr_s >= logsnr_t.
struct PosteriorCoefficients {
  double z_coef;
  double x_coef;
  double variance;
};

inline PosteriorCoefficients posterior_coefficients(double logsnr_t, double logsnr_s) {
  if (logsnr_s < logsnr_t) throw std::invalid_argument("posterior step requires logsnr_s >= logsnr_t");
  const double alpha_t = std::sqrt(sigmoid(logsnr_t));
  const double alpha_s = std::sqrt(sigmoid(logsnr_s));
  const double e = std::exp(logsnr_t - logsnr_s);
  const double one_minus_e = -std::expm1(logsnr_t - logsnr_s);
  return {alpha_s / alpha_t * e, alpha_s * one_minus_e, sigmoid(-logsnr_s) * one_minus_e};
}

/// One ancestral step z_t -> z_s. Without `noise` the posterior mean is
/// returned.
template <typename Z, typename X, typename N = Z>
typename Z::PlainObject posterior_step(const Eigen::ArrayBase<Z>& z_t, const Eigen::ArrayBase<X>& x_hat,
                                       double logsnr_t, double logsnr_s,
                                       const Eigen::ArrayBase<N>* noise = nullptr) {
  detail::require_same_size(z_t, x_hat, "posterior_step");
  using S = typename Z::Scalar;
  const auto c = posterior_coefficients(logsnr_t, logsnr_s);
  typename Z::PlainObject out = z_t * S(c.z_coef) + x_hat * S(c.x_coef);
  if (noise) {
    detail::require_same_size(z_t, *noise, "posterior_step noise");
    out += *noise * S(std::sqrt(c.variance));
  }
  return out;
}

/// Classifier-free guidance: eps_uncond + w (eps_cond - eps_uncond).
template <typename A, typename B>
typename A::PlainObject guide(const Eigen::ArrayBase<A>& eps_cond, const Eigen::ArrayBase<B>& eps_uncond, double w) {
  detail::require_same_size(eps_cond, eps_uncond, "guide");
  using S = typename A::Scalar;
  return eps_uncond + (eps_cond - eps_uncond) * S(w);
}

/// Mean squared error over all elements.
template <typename A, typename B>
double eps_loss(const Eigen::ArrayBase<A>& eps_hat, const Eigen::ArrayBase<B>& eps) {
  detail::require_same_size(eps_hat, eps, "eps_loss");
  return static_cast<double>((eps_hat - eps).square().sum()) / static_cast<double>(eps.size());
}

/// Maps log-SNR to the (0, 1) input of the noise-level embedding,
/// after clipping to [-20, 20].
inline double logsnr_to_unit(double logsnr) {
  const double l = std::clamp(logsnr, -20.0, 20.0);
  return 2.0 * std::atan(std::exp(-l / 2.0)) / M_PI;
}

}  // namespace nvs
