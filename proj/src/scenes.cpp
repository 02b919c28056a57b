#include "nvs/scenes.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace nvs {

namespace fs = std::filesystem;
using nlohmann::json;
using V3 = Vector3<double>;

Primitive Primitive::sphere(const V3& center, double radius, const V3& albedo) {
  Primitive p;
  p.kind = Kind::sphere;
  p.center = center;
  p.radius = radius;
  p.albedo = albedo;
  return p;
}

Primitive Primitive::box(const V3& lo, const V3& hi, const V3& albedo) {
  Primitive p;
  p.kind = Kind::box;
  p.lo = lo;
  p.hi = hi;
  p.albedo = albedo;
  return p;
}

SceneSpec SceneSpec::random(std::uint64_t seed) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  const int count = 1 + static_cast<int>(rng.below(3));
  auto color = [&] { return V3(rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0), rng.uniform(0.1, 1.0)); };
  for (int i = 0; i < count; ++i) {
    // Place the primitive's bounding sphere inside the unit ball.
    const double size = rng.uniform(0.2, 0.45);
    V3 offset(rng.normal(), rng.normal(), rng.normal());
    offset = offset.normalized() * rng.uniform(0.0, 1.0 - size * std::sqrt(3.0));
    if (rng.bernoulli(0.5)) {
      s.primitives.push_back(Primitive::sphere(offset, size, color()));
    } else {
      s.primitives.push_back(Primitive::box(offset - V3::Constant(size), offset + V3::Constant(size), color()));
    }
  }
  const double phi = rng.uniform(0, 2 * M_PI), cz = rng.uniform(0.3, 1.0);
  const double sz = std::sqrt(1 - cz * cz);
  s.light_direction = -V3(sz * std::cos(phi), sz * std::sin(phi), cz);
  s.light_intensity = rng.uniform(0.8, 1.2);
  return s;
}

void SceneSpec::validate() const {
  if (primitives.size() > 3) throw std::invalid_argument("scene: at most three primitives");
  if (std::abs(light_direction.norm() - 1.0) > 1e-6) throw std::invalid_argument("scene: light direction must be unit");
  for (const auto& p : primitives) {
    if ((p.albedo.array() < 0).any() || (p.albedo.array() > 1).any()) {
      throw std::invalid_argument("scene: albedo outside [0, 1]");
    }
    const bool inside = p.kind == Primitive::Kind::sphere
                            ? p.radius > 0 && p.center.norm() + p.radius <= 1.0 + 1e-9
                            : (p.hi.array() > p.lo.array()).all() && p.lo.cwiseAbs().cwiseMax(p.hi.cwiseAbs()).norm() <= 1.0 + 1e-9;
    if (!inside) throw std::invalid_argument("scene: primitive does not fit in the unit ball");
  }
}

namespace {

json vec(const V3& v) { return json::array({v.x(), v.y(), v.z()}); }
V3 vec(const json& j) { return V3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()); }

json pose_json(const Pose<double>& p) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back(json::array({p.R(r, 0), p.R(r, 1), p.R(r, 2), p.t(r)}));
  return rows;
}

Pose<double> pose_from_json(const json& j) {
  Pose<double> p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.R(r, c) = j.at(r).at(c).get<double>();
    p.t(r) = j.at(r).at(3).get<double>();
  }
  return p;
}

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  V3 normal = V3::Zero();
  const Primitive* prim = nullptr;
};

void intersect(const Primitive& p, const V3& o, const V3& d, Hit& best) {
  constexpr double eps = 1e-9;
  if (p.kind == Primitive::Kind::sphere) {
    const V3 oc = o - p.center;
    const double b = oc.dot(d), c = oc.squaredNorm() - p.radius * p.radius;
    const double disc = b * b - c;
    if (disc < 0) return;
    const double sq = std::sqrt(disc);
    double t = -b - sq;
    if (t <= eps) t = -b + sq;
    if (t <= eps || t >= best.t) return;
    best.t = t;
    best.normal = (o + t * d - p.center) / p.radius;
    best.prim = &p;
    return;
  }
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int axis0 = 0, axis1 = 0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < p.lo[a] || o[a] > p.hi[a]) return;
      continue;
    }
    double ta = (p.lo[a] - o[a]) / d[a], tb = (p.hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    if (ta > t0) {
      t0 = ta;
      axis0 = a;
    }
    if (tb < t1) {
      t1 = tb;
      axis1 = a;
    }
  }
  if (t0 > t1) return;
  double t = t0;
  int axis = axis0;
  if (t <= eps) {
    t = t1;
    axis = axis1;
  }
  if (t <= eps || t >= best.t) return;
  best.t = t;
  best.normal = V3::Zero();
  best.normal[axis] = d[axis] > 0 ? (t == t0 ? -1.0 : 1.0) : (t == t0 ? 1.0 : -1.0);
  best.prim = &p;
}

}  // namespace

void to_json(json& j, const SceneSpec& s) {
  json prims = json::array();
  for (const auto& p : s.primitives) {
    if (p.kind == Primitive::Kind::sphere) {
      prims.push_back({{"type", "sphere"}, {"center", vec(p.center)}, {"radius", p.radius}, {"albedo", vec(p.albedo)}});
    } else {
      prims.push_back({{"type", "box"}, {"min", vec(p.lo)}, {"max", vec(p.hi)}, {"albedo", vec(p.albedo)}});
    }
  }
  j = json{{"primitives", prims},
           {"light_direction", vec(s.light_direction)},
           {"light_intensity", s.light_intensity},
           {"background", vec(s.background)},
           {"seed", s.seed}};
}

void from_json(const json& j, SceneSpec& s) {
  s = SceneSpec{};
  for (const auto& p : j.at("primitives")) {
    const auto type = p.at("type").get<std::string>();
    if (type == "sphere") {
      s.primitives.push_back(Primitive::sphere(vec(p.at("center")), p.at("radius").get<double>(), vec(p.at("albedo"))));
    } else if (type == "box") {
      s.primitives.push_back(Primitive::box(vec(p.at("min")), vec(p.at("max")), vec(p.at("albedo"))));
    } else {
      throw std::runtime_error("unknown primitive type '" + type + "'");
    }
  }
  s.light_direction = vec(j.at("light_direction"));
  s.light_intensity = j.at("light_intensity").get<double>();
  s.background = vec(j.at("background"));
  s.seed = j.at("seed").get<std::uint64_t>();
}

Image render_scene(const SceneSpec& spec, const Pose<double>& pose, const Camera<double>& camera) {
  const auto rays = make_rays(pose, camera);
  Image img({camera.height, camera.width, 3});
  const V3 to_light = -spec.light_direction;
  for (Index r = 0; r < rays.size(); ++r) {
    const V3 o = rays.origins.row(r).transpose(), d = rays.directions.row(r).transpose();
    Hit hit;
    for (const auto& p : spec.primitives) intersect(p, o, d, hit);
    V3 color = spec.background;
    if (hit.prim) {
      const double shade = std::max(0.0, hit.normal.dot(to_light)) * spec.light_intensity + 0.1;
      color = (hit.prim->albedo * shade).cwiseMin(1.0).cwiseMax(0.0);
    }
    for (int c = 0; c < 3; ++c) img[r * 3 + c] = static_cast<float>(color[c]);
  }
  return img;
}

void DatasetOptions::validate() const {
  if (num_scenes <= 0 || views_per_scene < 2 || resolution <= 0) {
    throw std::invalid_argument("dataset: need positive scene count and resolution and at least 2 views per scene");
  }
  if (!(radius_min > 1.0 && radius_max >= radius_min)) {
    throw std::invalid_argument("dataset: radius range must satisfy 1 < min <= max");
  }
  if (test_scenes < 0 || test_scenes > num_scenes) throw std::invalid_argument("dataset: invalid test scene count");
  if (test_radius && !(test_radius->first > 1.0 && test_radius->second >= test_radius->first)) {
    throw std::invalid_argument("dataset: invalid test radius range");
  }
}

json manifest_to_json(const DatasetManifest& m) {
  const auto& o = m.options;
  json scenes = json::array();
  for (const auto& s : m.scenes) {
    json views = json::array();
    for (const auto& v : s.views) views.push_back({{"image", v.image}, {"pose_file", v.pose_file}, {"pose", pose_json(v.pose)}});
    scenes.push_back({{"id", s.id}, {"split", s.split}, {"spec", s.spec}, {"views", views}});
  }
  json k = json::array();
  for (int r = 0; r < 3; ++r) k.push_back(json::array({m.camera.K(r, 0), m.camera.K(r, 1), m.camera.K(r, 2)}));
  json options{{"num_scenes", o.num_scenes},
               {"views_per_scene", o.views_per_scene},
               {"resolution", o.resolution},
               {"radius_range", {o.radius_min, o.radius_max}},
               {"test_scenes", o.test_scenes},
               {"seed", o.seed}};
  options["test_radius_range"] = o.test_radius ? json{o.test_radius->first, o.test_radius->second} : json(nullptr);
  return json{{"format", "nvs-dataset"},
              {"version", m.version},
              {"resolution", m.resolution},
              {"camera", {{"K", k}, {"height", m.camera.height}, {"width", m.camera.width}}},
              {"options", options},
              {"scenes", scenes}};
}

DatasetManifest manifest_from_json(const json& j) {
  if (j.value("format", "") != "nvs-dataset") throw std::runtime_error("not a dataset manifest");
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  if (m.version != DatasetManifest::kVersion) {
    throw std::runtime_error("unsupported dataset layout version " + std::to_string(m.version));
  }
  m.resolution = j.at("resolution").get<int>();
  const auto& cam = j.at("camera");
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m.camera.K(r, c) = cam.at("K").at(r).at(c).get<double>();
  m.camera.height = cam.at("height").get<Index>();
  m.camera.width = cam.at("width").get<Index>();
  const auto& o = j.at("options");
  m.options.num_scenes = o.at("num_scenes").get<int>();
  m.options.views_per_scene = o.at("views_per_scene").get<int>();
  m.options.resolution = o.at("resolution").get<int>();
  m.options.radius_min = o.at("radius_range").at(0).get<double>();
  m.options.radius_max = o.at("radius_range").at(1).get<double>();
  m.options.test_scenes = o.at("test_scenes").get<int>();
  m.options.seed = o.at("seed").get<std::uint64_t>();
  if (!o.at("test_radius_range").is_null()) {
    m.options.test_radius = {o.at("test_radius_range").at(0).get<double>(), o.at("test_radius_range").at(1).get<double>()};
  }
  for (const auto& s : j.at("scenes")) {
    SceneRecord rec;
    rec.id = s.at("id").get<std::string>();
    rec.split = s.at("split").get<std::string>();
    rec.spec = s.at("spec").get<SceneSpec>();
    for (const auto& v : s.at("views")) {
      rec.views.push_back({v.at("image").get<std::string>(), v.at("pose_file").get<std::string>(), pose_from_json(v.at("pose"))});
    }
    m.scenes.push_back(std::move(rec));
  }
  return m;
}

void write_manifest(const fs::path& dir, const DatasetManifest& m) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest_to_json(m).dump(2) << "\n";
}

DatasetManifest read_manifest(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset manifest not found: " + path.string());
  try {
    return manifest_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt manifest " + path.string() + ": " + e.what());
  }
}

void write_pose_file(const fs::path& path, const Pose<double>& pose) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  char buf[64];
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", c < 3 ? pose.R(r, c) : pose.t(r));
      out << buf << (c < 3 ? " " : "\n");
    }
  }
}

namespace {

std::vector<double> read_numbers(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing file " + path.string());
  std::vector<double> v;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw std::runtime_error("corrupt file " + path.string() + ": bad number '" + tok + "'");
    }
  }
  return v;
}

std::string numbered(const char* fmt, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, fmt, i);
  return buf;
}

}  // namespace

Pose<double> read_pose_file(const fs::path& path) {
  const auto v = read_numbers(path);
  if (v.size() != 12 && v.size() != 16) throw std::runtime_error("corrupt pose file " + path.string());
  Pose<double> p;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) p.R(r, c) = v[r * 4 + c];
    p.t(r) = v[r * 4 + 3];
  }
  if (!p.is_valid(1e-4)) throw std::runtime_error("invalid pose in " + path.string());
  return p;
}

DatasetManifest make_dataset(const fs::path& dir, const DatasetOptions& options) {
  options.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.resolution = options.resolution;
  m.camera = Camera<double>::centered(options.resolution, options.resolution, options.resolution);
  m.options = options;
  Rng rng(options.seed);
  for (int s = 0; s < options.num_scenes; ++s) {
    SceneRecord rec;
    rec.id = numbered("scene_%04d", s);
    const bool test = s >= options.num_scenes - options.test_scenes;
    rec.split = test ? "test" : "train";
    rec.spec = SceneSpec::random(rng.next_u64());
    auto [rmin, rmax] = test && options.test_radius ? *options.test_radius
                                                    : std::pair{options.radius_min, options.radius_max};
    const auto sdir = dir / rec.id;
    fs::create_directories(sdir, ec);
    if (ec) throw std::runtime_error("cannot create " + sdir.string() + ": " + ec.message());
    {
      std::ofstream k(sdir / "intrinsics.txt");
      if (!k) throw std::runtime_error("cannot write " + (sdir / "intrinsics.txt").string());
      char buf[64];
      for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) {
          std::snprintf(buf, sizeof buf, "%.17g", m.camera.K(r, c));
          k << buf << (c < 2 ? " " : "\n");
        }
      }
      k << m.camera.height << " " << m.camera.width << "\n";
    }
    for (int v = 0; v < options.views_per_scene; ++v) {
      // Uniform on the upper hemisphere: z = cos(polar) uniform in [0, 1).
      const double azimuth = rng.uniform(0, 2 * M_PI);
      const double elevation = std::asin(rng.uniform(0.0, 1.0));
      const double radius = rng.uniform(rmin, rmax);
      ViewRecord view{numbered("view_%03d.png", v), numbered("pose_%03d.txt", v), orbit_pose(azimuth, elevation, radius)};
      write_png(sdir / view.image, render_scene(rec.spec, view.pose, m.camera));
      write_pose_file(sdir / view.pose_file, view.pose);
      rec.views.push_back(std::move(view));
    }
    m.scenes.push_back(std::move(rec));
  }
  write_manifest(dir, m);
  return m;
}

std::vector<int> Dataset::split_indices(const std::string& split) const {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(scenes.size()); ++i)
    if (split == "all" || scenes[i].split == split) out.push_back(i);
  return out;
}

namespace {

Camera<double> read_intrinsics(const fs::path& path) {
  const auto v = read_numbers(path);
  if (v.size() != 11) throw std::runtime_error("corrupt intrinsics file " + path.string());
  Camera<double> cam;
  for (int i = 0; i < 9; ++i) cam.K(i / 3, i % 3) = v[i];
  cam.height = static_cast<Index>(v[9]);
  cam.width = static_cast<Index>(v[10]);
  return cam;
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  Dataset data;
  data.root = dir;
  data.manifest = read_manifest(dir);
  for (const auto& rec : data.manifest.scenes) {
    SceneData scene;
    scene.id = rec.id;
    scene.split = rec.split;
    const auto sdir = dir / rec.id;
    scene.camera = read_intrinsics(sdir / "intrinsics.txt");
    if ((scene.camera.K - data.manifest.camera.K).norm() > 1e-9) {
      throw std::runtime_error("intrinsics of " + rec.id + " disagree with the manifest");
    }
    for (const auto& v : rec.views) {
      const auto ipath = sdir / v.image;
      if (!fs::exists(ipath)) throw std::runtime_error("missing file " + ipath.string());
      Image img = read_png(ipath);
      if (img.dim(0) != scene.camera.height || img.dim(1) != scene.camera.width) {
        throw std::runtime_error("image " + ipath.string() + " does not match the camera resolution");
      }
      scene.images.push_back(to_signed(img));
      scene.poses.push_back(read_pose_file(sdir / v.pose_file));
    }
    data.scenes.push_back(std::move(scene));
  }
  return data;
}

SceneData load_srn_scene(const fs::path& dir, const std::string& split) {
  SceneData scene;
  scene.id = dir.filename().string();
  scene.split = split;
  // SRN intrinsics.txt: "f cx cy 0", origin line, near plane, scale, "H W".
  const auto v = read_numbers(dir / "intrinsics.txt");
  if (v.size() < 9) throw std::runtime_error("corrupt intrinsics file " + (dir / "intrinsics.txt").string());
  const auto h = static_cast<Index>(v[v.size() - 2]), w = static_cast<Index>(v[v.size() - 1]);
  std::vector<fs::path> images;
  for (const auto& e : fs::directory_iterator(dir / "rgb"))
    if (e.path().extension() == ".png") images.push_back(e.path());
  std::sort(images.begin(), images.end());
  if (images.empty()) throw std::runtime_error("no images under " + (dir / "rgb").string());
  for (const auto& p : images) {
    Image img = read_png(p);
    scene.images.push_back(to_signed(img));
    scene.poses.push_back(read_pose_file(dir / "pose" / (p.stem().string() + ".txt")));
  }
  const Index ih = scene.images.front().dim(0), iw = scene.images.front().dim(1);
  // Focal length and principal point are given at the H x W resolution; rescale to the stored images.
  const double sx = static_cast<double>(iw) / static_cast<double>(w), sy = static_cast<double>(ih) / static_cast<double>(h);
  scene.camera = Camera<double>::pinhole(v[0] * sx, v[0] * sy, v[1] * sx, v[2] * sy, ih, iw);
  return scene;
}

PairSampler::PairSampler(const Dataset& data, const std::string& split, std::uint64_t seed)
    : data_(&data), scenes_(data.split_indices(split)), rng_(seed) {
  if (scenes_.empty()) throw std::invalid_argument("no scenes in split '" + split + "'");
  for (int s : scenes_) {
    if (data.scenes[s].num_views() < 2) throw std::invalid_argument("scene " + data.scenes[s].id + " has fewer than 2 views");
  }
}

PairBatch PairSampler::next(int batch_size) {
  const auto& first = data_->scenes[scenes_.front()];
  const Index h = first.camera.height, w = first.camera.width, frame = h * w * 3;
  PairBatch b;
  b.camera = first.camera;
  b.x1 = Tensor<float>({batch_size, h, w, 3});
  b.x2 = Tensor<float>({batch_size, h, w, 3});
  for (int i = 0; i < batch_size; ++i) {
    const int s = scenes_[rng_.below(scenes_.size())];
    const auto& scene = data_->scenes[s];
    const auto n = static_cast<std::uint64_t>(scene.num_views());
    const int v1 = static_cast<int>(rng_.below(n));
    int v2 = static_cast<int>(rng_.below(n - 1));
    if (v2 >= v1) ++v2;
    b.x1.array().segment(i * frame, frame) = scene.images[v1].array();
    b.x2.array().segment(i * frame, frame) = scene.images[v2].array();
    b.p1.push_back(scene.poses[v1]);
    b.p2.push_back(scene.poses[v2]);
    b.scene.push_back(s);
    b.view1.push_back(v1);
    b.view2.push_back(v2);
  }
  return b;
}

}  // namespace nvs
