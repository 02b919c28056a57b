#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nvs {

template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Points = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
template <typename Scalar>
using Features = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Rigid world-from-camera transform. Columns of `R` are the camera's
/// right, down and forward axes expressed in world coordinates; `t` is the
/// camera position.
template <typename Scalar>
struct Pose {
  Matrix3<Scalar> R = Matrix3<Scalar>::Identity();
  Vector3<Scalar> t = Vector3<Scalar>::Zero();

  static Pose identity() { return {}; }

  /// Camera at `eye` looking at `target`, with `up` roughly opposite the
  /// image's downward axis.
  static Pose look_at(const Vector3<Scalar>& eye, const Vector3<Scalar>& target,
                      Vector3<Scalar> up = Vector3<Scalar>::UnitZ()) {
    Vector3<Scalar> forward = (target - eye).normalized();
    if (forward.cross(up).norm() < Scalar(1e-6)) up = Vector3<Scalar>::UnitY();
    Vector3<Scalar> right = forward.cross(up).normalized();
    Vector3<Scalar> down = forward.cross(right);
    Pose p;
    p.R.col(0) = right;
    p.R.col(1) = down;
    p.R.col(2) = forward;
    p.t = eye;
    return p;
  }

  Pose inverse() const {
    Pose p;
    p.R = R.transpose();
    p.t = -(p.R * t);
    return p;
  }
  Pose operator*(const Pose& other) const {
    Pose p;
    p.R = R * other.R;
    p.t = R * other.t + t;
    return p;
  }
  Vector3<Scalar> apply(const Vector3<Scalar>& x) const { return R * x + t; }

  bool is_valid(Scalar tol = Scalar(1e-5)) const {
    return (R.transpose() * R - Matrix3<Scalar>::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - Scalar(1)) <= tol && t.allFinite();
  }

  template <typename Other>
  Pose<Other> cast() const {
    return {R.template cast<Other>(), t.template cast<Other>()};
  }
};

/// Pinhole intrinsics plus pixel resolution.
template <typename Scalar>
struct Camera {
  Matrix3<Scalar> K = Matrix3<Scalar>::Identity();
  Eigen::Index height = 0;
  Eigen::Index width = 0;

  static Camera pinhole(Scalar fx, Scalar fy, Scalar cx, Scalar cy, Eigen::Index height, Eigen::Index width) {
    Camera c;
    c.K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
    c.height = height;
    c.width = width;
    return c;
  }
  /// Square pixels, principal point at the image center.
  static Camera centered(Scalar focal, Eigen::Index height, Eigen::Index width) {
    return pinhole(focal, focal, Scalar(width) / 2, Scalar(height) / 2, height, width);
  }

  Scalar fx() const { return K(0, 0); }
  Scalar fy() const { return K(1, 1); }
  Scalar cx() const { return K(0, 2); }
  Scalar cy() const { return K(1, 2); }

  void validate() const {
    if (height <= 0 || width <= 0) throw std::invalid_argument("camera resolution must be positive");
    const bool upper = K(1, 0) == 0 && K(2, 0) == 0 && K(2, 1) == 0;
    if (!upper || K(2, 2) != Scalar(1) || !(fx() > 0) || !(fy() > 0) || !K.allFinite()) {
      throw std::invalid_argument("degenerate intrinsics");
    }
  }

  template <typename Other>
  Camera<Other> cast() const {
    return {K.template cast<Other>(), height, width};
  }
};

/// Per-pixel rays; row `v * width + u` holds pixel (u, v).
template <typename Scalar>
struct RayBundle {
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  Points<Scalar> origins;
  Points<Scalar> directions;

  Eigen::Index size() const { return origins.rows(); }
};

/// Unit-direction rays through pixel centers (u + 0.5, v + 0.5); the
/// camera looks along +z of its own frame.
template <typename Scalar>
RayBundle<Scalar> make_rays(const Pose<Scalar>& pose, const Camera<Scalar>& camera) {
  camera.validate();
  if (std::abs(camera.K.determinant()) < std::numeric_limits<Scalar>::epsilon()) {
    throw std::invalid_argument("degenerate intrinsics");
  }
  const Matrix3<Scalar> to_world = pose.R * camera.K.inverse();
  RayBundle<Scalar> rays;
  rays.height = camera.height;
  rays.width = camera.width;
  const Eigen::Index n = camera.height * camera.width;
  rays.origins = pose.t.transpose().replicate(n, 1);
  rays.directions.resize(n, 3);
  for (Eigen::Index v = 0; v < camera.height; ++v) {
    for (Eigen::Index u = 0; u < camera.width; ++u) {
      Vector3<Scalar> pixel(Scalar(u) + Scalar(0.5), Scalar(v) + Scalar(0.5), Scalar(1));
      rays.directions.row(v * camera.width + u) = (to_world * pixel).normalized().transpose();
    }
  }
  return rays;
}

/// Input concatenated with sin(x 2^k) and sin(x 2^k + pi/2) for
/// k in [min_deg, max_deg). Encoded columns are ordered degree-major.
template <typename Derived>
Features<typename Derived::Scalar> posenc_nerf(const Eigen::MatrixBase<Derived>& x, int min_deg, int max_deg) {
  using Scalar = typename Derived::Scalar;
  if (min_deg > max_deg) throw std::invalid_argument("posenc_nerf: min_deg > max_deg");
  const Eigen::Index n = x.rows(), d = x.cols(), degrees = max_deg - min_deg;
  Features<Scalar> out(n, d + 2 * degrees * d);
  out.leftCols(d) = x;
  for (int k = 0; k < degrees; ++k) {
    const Scalar scale = std::ldexp(Scalar(1), min_deg + k);
    for (Eigen::Index j = 0; j < d; ++j) {
      auto xb = (x.col(j).array() * scale).eval();
      out.col(d + k * d + j) = xb.sin().matrix();
      out.col(d + degrees * d + k * d + j) = (xb + std::numbers::pi_v<Scalar> / 2).sin().matrix();
    }
  }
  return out;
}

/// Column-wise derivative d posenc_nerf / d x for each encoded column, and
/// the input coordinate each column depends on.
template <typename Derived>
Features<typename Derived::Scalar> posenc_nerf_derivative(const Eigen::MatrixBase<Derived>& x, int min_deg,
                                                          int max_deg, std::vector<int>* coordinate_of = nullptr) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = x.rows(), d = x.cols(), degrees = max_deg - min_deg;
  Features<Scalar> out(n, d + 2 * degrees * d);
  out.leftCols(d).setOnes();
  if (coordinate_of) coordinate_of->assign(out.cols(), 0);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (coordinate_of) (*coordinate_of)[j] = static_cast<int>(j);
  }
  for (int k = 0; k < degrees; ++k) {
    const Scalar scale = std::ldexp(Scalar(1), min_deg + k);
    for (Eigen::Index j = 0; j < d; ++j) {
      auto xb = (x.col(j).array() * scale).eval();
      out.col(d + k * d + j) = (scale * xb.cos()).matrix();
      out.col(d + degrees * d + k * d + j) = (-scale * xb.sin()).matrix();
      if (coordinate_of) {
        (*coordinate_of)[d + k * d + j] = static_cast<int>(j);
        (*coordinate_of)[d + degrees * d + k * d + j] = static_cast<int>(j);
      }
    }
  }
  return out;
}

/// Sinusoidal embedding of scalar times rescaled by 1000 / max_time, with
/// emb_ch / 2 log-spaced frequencies; sin half first, then cos.
template <typename Derived>
Features<typename Derived::Scalar> posenc_ddpm(const Eigen::DenseBase<Derived>& timesteps, int emb_ch,
                                               typename Derived::Scalar max_time = 1000) {
  using Scalar = typename Derived::Scalar;
  if (emb_ch <= 0 || emb_ch % 2 != 0) throw std::invalid_argument("posenc_ddpm: emb_ch must be positive and even");
  const int half = emb_ch / 2;
  // A single frequency degenerates the log spacing; it is then just 1.
  const Scalar step = half > 1 ? std::log(Scalar(10000)) / Scalar(half - 1) : Scalar(0);
  const Eigen::Index n = timesteps.size();
  Features<Scalar> out(n, emb_ch);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar t = timesteps.derived().coeff(i) * (Scalar(1000) / max_time);
    for (int j = 0; j < half; ++j) {
      const Scalar arg = t * std::exp(-step * Scalar(j));
      out(i, j) = std::sin(arg);
      out(i, half + j) = std::cos(arg);
    }
  }
  return out;
}

/// Number of channels of the ray embedding: position at degrees [0, pos_deg)
/// and direction at degrees [0, dir_deg).
constexpr int ray_embedding_dim(int pos_deg, int dir_deg) { return 3 + 6 * pos_deg + 3 + 6 * dir_deg; }

/// Camera at distance `radius` with the given azimuth and elevation (z up),
/// looking at the origin.
inline Pose<double> orbit_pose(double azimuth, double elevation, double radius) {
  const Vector3<double> eye = radius * Vector3<double>(std::cos(elevation) * std::cos(azimuth),
                                                       std::cos(elevation) * std::sin(azimuth), std::sin(elevation));
  return Pose<double>::look_at(eye, Vector3<double>::Zero());
}

}  // namespace nvs
