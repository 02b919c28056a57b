#include "nvs/field.hpp"

#include "nvs/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nvs {

using ag::Var;

NeuralField::NeuralField(FieldConfig config) : config_(config) {
  if (config_.width <= 0) throw std::invalid_argument("field width must be positive");
  if (config_.min_deg < 0 || config_.max_deg < config_.min_deg) throw std::invalid_argument("bad field encoding degrees");
  const Index in = input_dim(), w = config_.width;
  {
    auto s = registry_.scope("density");
    w1_ = registry_.add("hidden/w", {in, w}, Init::lecun(in));
    b1_ = registry_.add("hidden/b", {w}, Init::zeros());
    w2_ = registry_.add("out/w", {w, 1}, Init::zeros());
    b2_ = registry_.add("out/b", {1}, Init::constant(config_.density_bias));
  }
  {
    auto s = registry_.scope("color");
    wc0_ = registry_.add("hidden0/w", {w, w}, Init::lecun(w));
    bc0_ = registry_.add("hidden0/b", {w}, Init::zeros());
    wc1_ = registry_.add("hidden1/w", {w, w}, Init::lecun(w));
    bc1_ = registry_.add("hidden1/b", {w}, Init::zeros());
    wc2_ = registry_.add("out/w", {w, 3}, Init::zeros());
    bc2_ = registry_.add("out/b", {3}, Init::zeros());
  }
}

template <typename S>
NeuralField::Output<S> NeuralField::evaluate(const ParamStore<S>& p, const Points<S>& x, bool with_gradient) const {
  const Index n = x.rows(), in = input_dim(), w = config_.width;
  Tensor<S> enc({n, in});
  enc.matrix(in) = posenc_nerf(x, config_.min_deg, config_.max_deg);
  auto encv = Var<S>::constant(std::move(enc));

  Output<S> out;
  auto pre1 = ag::dense(encv, p[w1_], p[b1_]);
  auto h = ag::relu(pre1);
  auto raw = ag::dense(h, p[w2_], p[b2_]);
  out.sigma = ag::softplus(raw);
  auto c = ag::relu(ag::dense(h, p[wc0_], p[bc0_]));
  c = ag::relu(ag::dense(c, p[wc1_], p[bc1_]));
  out.rgb = ag::sigmoid(ag::dense(c, p[wc2_], p[bc2_]));

  if (with_gradient) {
    // d sigma / d x = sigmoid(raw) * (relu'(pre1) * w2)^T W1^T J_enc, kept on the tape.
    Tensor<S> mask({n, w});
    mask.array() = (pre1.value().array() > S(0)).template cast<S>();
    auto u = ag::mul_row(Var<S>::constant(std::move(mask)), ag::reshape(p[w2_], {w}));
    auto v = ag::matmul(u, p[w1_], true);
    std::vector<int> coord;
    Tensor<S> jac({n, in});
    jac.matrix(in) = posenc_nerf_derivative(x, config_.min_deg, config_.max_deg, &coord);
    auto q = ag::group_sum_cols(ag::mul_const(v, jac), coord, 3);
    auto s = ag::sigmoid(raw);
    out.gradient = ag::mul(q, ag::concat_last(ag::concat_last(s, s), s));
  }
  return out;
}

template <typename S>
Eigen::Array<S, Eigen::Dynamic, 1> NeuralField::density(const ParamStore<S>& p, const Points<S>& x) const {
  const Index w = config_.width;
  const Features<S> enc = posenc_nerf(x, config_.min_deg, config_.max_deg);
  const auto w1 = p[w1_].value().matrix(w);
  const auto b1 = p[b1_].value().matrix(w);
  Features<S> h = (enc * w1).rowwise() + b1.row(0);
  h = h.cwiseMax(S(0));
  const Eigen::Matrix<S, Eigen::Dynamic, 1> raw =
      h * p[w2_].value().matrix(1).col(0) + Eigen::Matrix<S, Eigen::Dynamic, 1>::Constant(x.rows(), p[b2_].value()[0]);
  // Stable softplus.
  return raw.array().max(S(0)) + (-raw.array().abs()).exp().log1p();
}

template <typename S>
Var<S> render_weights(const Var<S>& sigma, const Tensor<S>& delta) {
  require_same_shape(sigma.shape(), delta.shape(), "render_weights");
  if (sigma.value().rank() != 2) throw std::invalid_argument("render_weights expects (rays, samples)");
  const Index r = sigma.dim(0), n = sigma.dim(1);
  Tensor<S> w({r, n});
  const auto& sv = sigma.value();
  for (Index i = 0; i < r; ++i) {
    S trans = 1;
    for (Index k = 0; k < n; ++k) {
      const S e = std::exp(-sv[i * n + k] * delta[i * n + k]);
      w[i * n + k] = trans * (S(1) - e);
      trans *= e;
    }
  }
  Tensor<S> wv = w;
  return ag::make_op<S>(std::move(w), {sigma}, [sigma, delta, wv, r, n](const Tensor<S>& g) {
    if (!sigma.requires_grad()) return;
    // d w_i / d sigma_k = delta_k (T_{k+1} [i == k] - w_i [i > k]).
    const auto& sv = sigma.value();
    auto& gs = sigma.node()->grad_buffer();
    std::vector<S> trans_next(n);
    for (Index i = 0; i < r; ++i) {
      S trans = 1;
      for (Index k = 0; k < n; ++k) {
        trans *= std::exp(-sv[i * n + k] * delta[i * n + k]);
        trans_next[k] = trans;
      }
      S tail = 0;  // sum_{j > k} g_j w_j
      for (Index k = n - 1; k >= 0; --k) {
        gs[i * n + k] += delta[i * n + k] * (g[i * n + k] * trans_next[k] - tail);
        tail += g[i * n + k] * wv[i * n + k];
      }
    }
  });
}

template <typename S>
Var<S> composite(const Var<S>& weights, const Var<S>& rgb, const Vector3<double>& background) {
  const Index r = weights.dim(0), n = weights.dim(1);
  require_same_shape(rgb.shape(), {r, n, 3}, "composite");
  Tensor<S> out({r, 3});
  const auto& w = weights.value();
  const auto& c = rgb.value();
  for (Index i = 0; i < r; ++i) {
    S total = 0;
    for (Index k = 0; k < n; ++k) {
      const S wk = w[i * n + k];
      total += wk;
      for (int ch = 0; ch < 3; ++ch) out[i * 3 + ch] += wk * c[(i * n + k) * 3 + ch];
    }
    for (int ch = 0; ch < 3; ++ch) out[i * 3 + ch] += (S(1) - total) * static_cast<S>(background[ch]);
  }
  return ag::make_op<S>(std::move(out), {weights, rgb}, [weights, rgb, background, r, n](const Tensor<S>& g) {
    const auto& w = weights.value();
    const auto& c = rgb.value();
    if (weights.requires_grad()) {
      auto& gw = weights.node()->grad_buffer();
      for (Index i = 0; i < r; ++i) {
        for (Index k = 0; k < n; ++k) {
          S acc = 0;
          for (int ch = 0; ch < 3; ++ch) acc += g[i * 3 + ch] * (c[(i * n + k) * 3 + ch] - static_cast<S>(background[ch]));
          gw[i * n + k] += acc;
        }
      }
    }
    if (rgb.requires_grad()) {
      auto& gc = rgb.node()->grad_buffer();
      for (Index i = 0; i < r; ++i) {
        for (Index k = 0; k < n; ++k) {
          for (int ch = 0; ch < 3; ++ch) gc[(i * n + k) * 3 + ch] += g[i * 3 + ch] * w[i * n + k];
        }
      }
    }
  });
}

template <typename S>
Var<S> distortion_loss(const Var<S>& weights, const Tensor<S>& mid, const Tensor<S>& delta) {
  require_same_shape(weights.shape(), mid.shape(), "distortion_loss");
  require_same_shape(weights.shape(), delta.shape(), "distortion_loss");
  const Index r = weights.dim(0), n = weights.dim(1);
  const auto& w = weights.value();
  // sum_{i,j} w_i w_j |m_i - m_j| = 2 sum_i w_i (m_i W_{<i} - M_{<i}) for increasing m.
  double total = 0;
  for (Index i = 0; i < r; ++i) {
    double wsum = 0, msum = 0, cross = 0, intra = 0;
    for (Index k = 0; k < n; ++k) {
      const double wk = w[i * n + k], mk = mid[i * n + k];
      cross += wk * (mk * wsum - msum);
      wsum += wk;
      msum += wk * mk;
      intra += wk * wk * delta[i * n + k];
    }
    total += 2 * cross + intra / 3;
  }
  Tensor<S> out = Tensor<S>::constant({}, static_cast<S>(total / static_cast<double>(r)));
  return ag::make_op<S>(std::move(out), {weights}, [weights, mid, delta, r, n](const Tensor<S>& g) {
    if (!weights.requires_grad()) return;
    const auto& w = weights.value();
    auto& gw = weights.node()->grad_buffer();
    const double scale = static_cast<double>(g[0]) / static_cast<double>(r);
    std::vector<double> wpre(n + 1), mpre(n + 1);
    for (Index i = 0; i < r; ++i) {
      wpre[0] = mpre[0] = 0;
      for (Index k = 0; k < n; ++k) {
        wpre[k + 1] = wpre[k] + w[i * n + k];
        mpre[k + 1] = mpre[k] + w[i * n + k] * mid[i * n + k];
      }
      for (Index k = 0; k < n; ++k) {
        const double mk = mid[i * n + k];
        const double before = mk * wpre[k] - mpre[k];
        const double after = (mpre[n] - mpre[k + 1]) - mk * (wpre[n] - wpre[k + 1]);
        const double d = 2 * (before + after) + 2.0 / 3.0 * w[i * n + k] * delta[i * n + k];
        gw[i * n + k] += static_cast<S>(scale * d);
      }
    }
  });
}

namespace {

// u = n . d with n = -g / |g|; zero where the gradient vanishes.
template <typename S>
double normal_cosine(const Tensor<S>& gr, const Tensor<S>& dirs, Index i, Index n, Index k, double* norm) {
  const Index o = (i * n + k) * 3;
  double gd = 0, gg = 0;
  for (int c = 0; c < 3; ++c) {
    gd += gr[o + c] * dirs[i * 3 + c];
    gg += gr[o + c] * gr[o + c];
  }
  *norm = std::sqrt(gg);
  return *norm < 1e-12 ? 0.0 : -gd / *norm;
}

}  // namespace

template <typename S>
Var<S> orientation_loss(const Var<S>& weights, const Var<S>& gradients, const Tensor<S>& dirs) {
  const Index r = weights.dim(0), n = weights.dim(1);
  require_same_shape(gradients.shape(), {r, n, 3}, "orientation_loss");
  require_same_shape(dirs.shape(), {r, 3}, "orientation_loss");
  const auto& w = weights.value();
  const auto& gr = gradients.value();
  auto cosine = [n](const Tensor<S>& gr, const Tensor<S>& dirs, Index i, Index k, double* norm) {
    return normal_cosine(gr, dirs, i, n, k, norm);
  };
  double total = 0;
  for (Index i = 0; i < r; ++i) {
    for (Index k = 0; k < n; ++k) {
      double norm;
      const double u = std::max(0.0, cosine(gr, dirs, i, k, &norm));
      total += w[i * n + k] * u * u;
    }
  }
  Tensor<S> out = Tensor<S>::constant({}, static_cast<S>(total / static_cast<double>(r)));
  return ag::make_op<S>(std::move(out), {weights, gradients}, [weights, gradients, dirs, r, n, cosine](const Tensor<S>& g) {
    const double scale = static_cast<double>(g[0]) / static_cast<double>(r);
    const auto& w = weights.value();
    const auto& gr = gradients.value();
    for (Index i = 0; i < r; ++i) {
      for (Index k = 0; k < n; ++k) {
        double norm;
        const double u = std::max(0.0, cosine(gr, dirs, i, k, &norm));
        if (weights.requires_grad()) weights.node()->grad_buffer()[i * n + k] += static_cast<S>(scale * u * u);
        if (u <= 0 || !gradients.requires_grad()) continue;
        // du/dg = -(d - (g^ . d) g^) / |g|, and g^ . d = -u.
        const Index o = (i * n + k) * 3;
        auto& gg = gradients.node()->grad_buffer();
        const double coef = scale * w[i * n + k] * 2 * u;
        for (int c = 0; c < 3; ++c) {
          const double ghat = gr[o + c] / norm;
          const double du = -(dirs[i * 3 + c] + u * ghat) / norm;
          gg[o + c] += static_cast<S>(coef * du);
        }
      }
    }
  });
}

OccupancyGrid::OccupancyGrid(double bound, int resolution) : bound_(bound), res_(resolution) {
  if (!(bound > 0) || resolution <= 0) throw std::invalid_argument("occupancy grid needs a positive bound and resolution");
  const std::size_t cells = static_cast<std::size_t>(res_) * res_ * res_;
  value_.assign(cells, 0.0f);
  occupied_.assign(cells, 1);
}

bool OccupancyGrid::occupied(const Vector3<double>& x) const {
  int idx[3];
  for (int a = 0; a < 3; ++a) {
    const double u = (x[a] + bound_) / (2 * bound_);
    if (!(u >= 0 && u <= 1)) return false;
    idx[a] = std::min(res_ - 1, static_cast<int>(u * res_));
  }
  return occupied_[(static_cast<std::size_t>(idx[0]) * res_ + idx[1]) * res_ + idx[2]] != 0;
}

double OccupancyGrid::occupied_fraction() const {
  return static_cast<double>(std::count(occupied_.begin(), occupied_.end(), 1)) / static_cast<double>(occupied_.size());
}

void OccupancyGrid::update(const NeuralField& field, const ParamStore<float>& params, double decay, double threshold,
                           Rng& rng) {
  const std::size_t cells = value_.size();
  Points<float> x(static_cast<Index>(cells), 3);
  const double cell = 2 * bound_ / res_;
  std::size_t c = 0;
  for (int i = 0; i < res_; ++i) {
    for (int j = 0; j < res_; ++j) {
      for (int k = 0; k < res_; ++k, ++c) {
        const int ijk[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) x(c, a) = static_cast<float>(-bound_ + (ijk[a] + rng.uniform()) * cell);
      }
    }
  }
  const auto sigma = field.density(params, x);
  double mean = 0;
  for (c = 0; c < cells; ++c) {
    const float s = sigma[static_cast<Index>(c)];
    value_[c] = primed_ ? std::max(static_cast<float>(decay) * value_[c], s) : s;
    mean += value_[c];
  }
  // Capping at the mean keeps the densest cells even while the field is still faint.
  const double cut = std::min(threshold, mean / static_cast<double>(cells));
  for (c = 0; c < cells; ++c) occupied_[c] = value_[c] > cut ? 1 : 0;
  primed_ = true;
}

std::pair<double, double> near_far(double r_min, double r_max) {
  if (!(r_min > 0) || r_max < r_min) throw std::invalid_argument("near_far: need 0 < r_min <= r_max");
  return {3.0 * r_min / 8.0, 3.0 * r_max / 2.0};
}

template <typename S>
RenderOutput<S> render_rays(const NeuralField& field, const ParamStore<S>& params, const RayBundle<double>& rays,
                            const RenderOptions& opt, Rng* jitter, bool with_gradient, const OccupancyGrid* grid) {
  if (opt.n_samples <= 0 || !(opt.t_far > opt.t_near)) throw std::invalid_argument("render_rays: bad sampling range");
  const Index r = rays.size(), n = opt.n_samples;
  const double bin = (opt.t_far - opt.t_near) / static_cast<double>(n);
  RenderOutput<S> out;
  out.midpoints = Tensor<S>({r, n});
  out.deltas = Tensor<S>::constant({r, n}, static_cast<S>(bin));

  std::vector<Index> active;
  active.reserve(static_cast<std::size_t>(r * n));
  std::vector<Vector3<double>> points;
  points.reserve(static_cast<std::size_t>(r * n));
  for (Index i = 0; i < r; ++i) {
    const Vector3<double> o = rays.origins.row(i).transpose();
    const Vector3<double> d = rays.directions.row(i).transpose();
    for (Index k = 0; k < n; ++k) {
      const double t = opt.t_near + (static_cast<double>(k) + (jitter ? jitter->uniform() : 0.5)) * bin;
      out.midpoints[i * n + k] = static_cast<S>(t);
      const Vector3<double> x = o + t * d;
      if (opt.bound > 0 && x.cwiseAbs().maxCoeff() > opt.bound) continue;
      if (grid && !grid->occupied(x)) continue;
      active.push_back(i * n + k);
      points.push_back(x);
    }
  }
  out.evaluated = static_cast<Index>(active.size());

  const Index total = r * n;
  Var<S> sigma, rgb;
  if (active.empty()) {
    sigma = Var<S>::constant(Tensor<S>({r, n}));
    rgb = Var<S>::constant(Tensor<S>({r, n, 3}));
    if (with_gradient) out.gradients = Var<S>::constant(Tensor<S>({r, n, 3}));
  } else {
    Points<S> x(out.evaluated, 3);
    for (Index a = 0; a < out.evaluated; ++a) x.row(a) = points[static_cast<std::size_t>(a)].template cast<S>().transpose();
    auto f = field.evaluate(params, x, with_gradient);
    sigma = ag::reshape(ag::scatter_rows(f.sigma, active, total), {r, n});
    rgb = ag::reshape(ag::scatter_rows(f.rgb, active, total), {r, n, 3});
    if (with_gradient) out.gradients = ag::reshape(ag::scatter_rows(f.gradient, active, total), {r, n, 3});
  }
  out.weights = render_weights(sigma, out.deltas);
  out.color = composite(out.weights, rgb, opt.background);
  return out;
}

void FieldTrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("field config: " + m); };
  if (steps < 0) fail("steps must be non-negative");
  if (!(lr_init > 0) || !(lr_final > 0)) fail("learning rates must be positive");
  if (lr_decay_steps < 0) fail("lr_decay_steps must be non-negative");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1) || !(adam_eps > 0)) {
    fail("invalid Adam parameters");
  }
  if (weight_decay < 0 || !(clip_norm > 0)) fail("weight_decay must be >= 0 and clip_norm > 0");
  if (lambda_distortion < 0 || lambda_orientation < 0) fail("loss weights must be non-negative");
  if (n_samples <= 0 || rays_per_step <= 0) fail("n_samples and rays_per_step must be positive");
  if (grid_resolution <= 0 || grid_update_every <= 0 || grid_warmup_steps < 0) fail("invalid occupancy grid schedule");
  if (!(grid_decay > 0 && grid_decay <= 1) || grid_threshold < 0) fail("invalid occupancy grid decay or threshold");
  if (scene_bound < 0) fail("scene_bound must be non-negative");
  if (field.width <= 0 || field.min_deg < 0 || field.max_deg < field.min_deg) fail("invalid field architecture");
}

double FieldTrainConfig::lr_at(int step) const {
  if (lr_decay_steps == 0 || step >= lr_decay_steps) return lr_final;
  const double f = static_cast<double>(step) / static_cast<double>(lr_decay_steps);
  return lr_init + (lr_final - lr_init) * f;
}

void to_json(nlohmann::json& j, const FieldTrainConfig& c) {
  j = {{"steps", c.steps},
       {"lr_init", c.lr_init},
       {"lr_final", c.lr_final},
       {"lr_decay_steps", c.lr_decay_steps},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"lambda_distortion", c.lambda_distortion},
       {"lambda_orientation", c.lambda_orientation},
       {"n_samples", c.n_samples},
       {"rays_per_step", c.rays_per_step},
       {"seed", c.seed},
       {"occupancy_grid", c.occupancy_grid},
       {"grid_resolution", c.grid_resolution},
       {"grid_update_every", c.grid_update_every},
       {"grid_warmup_steps", c.grid_warmup_steps},
       {"grid_threshold", c.grid_threshold},
       {"grid_decay", c.grid_decay},
       {"scene_bound", c.scene_bound},
       {"field",
        {{"width", c.field.width},
         {"min_deg", c.field.min_deg},
         {"max_deg", c.field.max_deg},
         {"density_bias", c.field.density_bias}}}};
}

void from_json(const nlohmann::json& j, FieldTrainConfig& c) {
  FieldTrainConfig d;
  auto get = [&](const char* key, auto& dst) {
    if (j.contains(key)) j.at(key).get_to(dst);
  };
  get("steps", d.steps);
  get("lr_init", d.lr_init);
  get("lr_final", d.lr_final);
  get("lr_decay_steps", d.lr_decay_steps);
  get("adam_beta1", d.adam_beta1);
  get("adam_beta2", d.adam_beta2);
  get("adam_eps", d.adam_eps);
  get("weight_decay", d.weight_decay);
  get("clip_norm", d.clip_norm);
  get("lambda_distortion", d.lambda_distortion);
  get("lambda_orientation", d.lambda_orientation);
  get("n_samples", d.n_samples);
  get("rays_per_step", d.rays_per_step);
  get("seed", d.seed);
  get("occupancy_grid", d.occupancy_grid);
  get("grid_resolution", d.grid_resolution);
  get("grid_update_every", d.grid_update_every);
  get("grid_warmup_steps", d.grid_warmup_steps);
  get("grid_threshold", d.grid_threshold);
  get("grid_decay", d.grid_decay);
  get("scene_bound", d.scene_bound);
  if (j.contains("field")) {
    const auto& f = j.at("field");
    if (f.contains("width")) f.at("width").get_to(d.field.width);
    if (f.contains("min_deg")) f.at("min_deg").get_to(d.field.min_deg);
    if (f.contains("max_deg")) f.at("max_deg").get_to(d.field.max_deg);
    if (f.contains("density_bias")) f.at("density_bias").get_to(d.field.density_bias);
  }
  d.validate();
  c = d;
}

namespace {

struct RayPool {
  Points<double> origins, directions;
  Features<float> colors;  // (N, 3) in [0, 1]
};

RayPool pool_rays(const std::vector<PosedImage>& views, const Camera<double>& camera) {
  RayPool pool;
  const Index per = camera.height * camera.width;
  const Index total = per * static_cast<Index>(views.size());
  pool.origins.resize(total, 3);
  pool.directions.resize(total, 3);
  pool.colors.resize(total, 3);
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto& img = views[v].image;
    if (img.rank() != 3 || img.dim(0) != camera.height || img.dim(1) != camera.width || img.dim(2) != 3) {
      throw std::invalid_argument("train_field: view " + std::to_string(v) + " does not match the camera resolution");
    }
    const auto rays = make_rays(views[v].pose, camera);
    const Index off = static_cast<Index>(v) * per;
    pool.origins.middleRows(off, per) = rays.origins;
    pool.directions.middleRows(off, per) = rays.directions;
    pool.colors.middleRows(off, per) = ((img.matrix(3).array() + 1.0f) * 0.5f).cwiseMax(0.0f).cwiseMin(1.0f).matrix();
  }
  return pool;
}

}  // namespace

TrainedField train_field(const std::vector<PosedImage>& views, const Camera<double>& camera,
                         const FieldTrainConfig& cfg) {
  cfg.validate();
  camera.validate();
  if (views.empty()) throw std::invalid_argument("train_field: no views");

  double r_min = std::numeric_limits<double>::infinity(), r_max = 0;
  for (const auto& v : views) {
    const double r = v.pose.t.norm();
    r_min = std::min(r_min, r);
    r_max = std::max(r_max, r);
  }
  const auto [t_near, t_far] = near_far(r_min, r_max);

  TrainedField out{NeuralField(cfg.field), {}, {}, std::nullopt, {}};
  out.params = ParamStore<float>(out.field.registry());
  Rng rng(cfg.seed);
  out.params.initialize(rng);
  out.render.t_near = t_near;
  out.render.t_far = t_far;
  out.render.n_samples = cfg.n_samples;
  out.render.bound = cfg.scene_bound > 0 ? cfg.scene_bound : r_min / 2;
  if (cfg.occupancy_grid) out.grid.emplace(out.render.bound, cfg.grid_resolution);

  const RayPool pool = pool_rays(views, camera);
  const Index pool_size = pool.origins.rows();
  const Adam adam{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay};
  auto state = adam.init(out.params);
  const bool need_gradient = cfg.lambda_orientation > 0;
  RayBundle<double> batch;
  Tensor<float> target({cfg.rays_per_step, 3});
  Tensor<float> dirs({cfg.rays_per_step, 3});

  for (int step = 0; step < cfg.steps; ++step) {
    if (out.grid && step >= cfg.grid_warmup_steps && (step - cfg.grid_warmup_steps) % cfg.grid_update_every == 0) {
      out.grid->update(out.field, out.params, cfg.grid_decay, cfg.grid_threshold, rng);
    }
    batch.origins.resize(cfg.rays_per_step, 3);
    batch.directions.resize(cfg.rays_per_step, 3);
    for (Index i = 0; i < cfg.rays_per_step; ++i) {
      const Index k = static_cast<Index>(rng.below(static_cast<std::uint64_t>(pool_size)));
      batch.origins.row(i) = pool.origins.row(k);
      batch.directions.row(i) = pool.directions.row(k);
      target.matrix(3).row(i) = pool.colors.row(k);
      dirs.matrix(3).row(i) = pool.directions.row(k).cast<float>();
    }
    const OccupancyGrid* grid = out.grid && step >= cfg.grid_warmup_steps ? &*out.grid : nullptr;
    auto r = render_rays(out.field, out.params, batch, out.render, &rng, need_gradient, grid);
    auto loss = ag::mse(r.color, target);
    if (cfg.lambda_distortion > 0) {
      loss = ag::add(loss, ag::scale(distortion_loss(r.weights, r.midpoints, r.deltas),
                                     static_cast<float>(cfg.lambda_distortion)));
    }
    if (need_gradient) {
      loss = ag::add(loss, ag::scale(orientation_loss(r.weights, r.gradients, dirs),
                                     static_cast<float>(cfg.lambda_orientation)));
    }
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw std::runtime_error("field training diverged at step " + std::to_string(step));
    out.losses.push_back(value);
    out.params.zero_grad();
    ag::backward(loss);
    const double norm = gradient_norm(out.params);
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    adam.update(out.params, state, cfg.lr_at(step), clip);
  }
  return out;
}

Image render_field(const TrainedField& f, const Pose<double>& pose, const Camera<double>& camera,
                   std::vector<double>* opacity) {
  const auto rays = make_rays(pose, camera);
  const Index total = rays.size();
  constexpr Index kChunk = 1024;
  Image img({camera.height, camera.width, 3});
  if (opacity) opacity->assign(static_cast<std::size_t>(total), 0.0);
  const OccupancyGrid* grid = f.grid ? &*f.grid : nullptr;
  RayBundle<double> chunk;
  for (Index begin = 0; begin < total; begin += kChunk) {
    const Index count = std::min(kChunk, total - begin);
    chunk.origins = rays.origins.middleRows(begin, count);
    chunk.directions = rays.directions.middleRows(begin, count);
    const auto r = render_rays(f.field, f.params, chunk, f.render, nullptr, false, grid);
    img.matrix(3).middleRows(begin, count) = r.color.value().matrix(3).cwiseMax(0.0f).cwiseMin(1.0f);
    if (opacity) {
      const auto w = r.weights.value().matrix(f.render.n_samples);
      for (Index i = 0; i < count; ++i) (*opacity)[static_cast<std::size_t>(begin + i)] = w.row(i).sum();
    }
  }
  return img;
}

#define NVS_INSTANTIATE_FIELD(S)                                                                             \
  template NeuralField::Output<S> NeuralField::evaluate(const ParamStore<S>&, const Points<S>&, bool) const; \
  template Eigen::Array<S, Eigen::Dynamic, 1> NeuralField::density(const ParamStore<S>&, const Points<S>&)   \
      const;                                                                                                 \
  template Var<S> render_weights(const Var<S>&, const Tensor<S>&);                                          \
  template Var<S> composite(const Var<S>&, const Var<S>&, const Vector3<double>&);                          \
  template Var<S> distortion_loss(const Var<S>&, const Tensor<S>&, const Tensor<S>&);                       \
  template Var<S> orientation_loss(const Var<S>&, const Var<S>&, const Tensor<S>&);                         \
  template RenderOutput<S> render_rays(const NeuralField&, const ParamStore<S>&, const RayBundle<double>&,  \
                                       const RenderOptions&, Rng*, bool, const OccupancyGrid*);

NVS_INSTANTIATE_FIELD(float)
NVS_INSTANTIATE_FIELD(double)

}  // namespace nvs
