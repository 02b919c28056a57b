#pragma once

#include "nvs/geometry.hpp"
#include "nvs/image.hpp"
#include "nvs/rng.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nvs {

struct Primitive {
  enum class Kind { sphere, box };
  Kind kind = Kind::sphere;
  Vector3<double> center = Vector3<double>::Zero();  // sphere
  double radius = 0.5;
  Vector3<double> lo = Vector3<double>::Constant(-0.3);  // box corners
  Vector3<double> hi = Vector3<double>::Constant(0.3);
  Vector3<double> albedo = Vector3<double>::Constant(0.8);

  static Primitive sphere(const Vector3<double>& center, double radius, const Vector3<double>& albedo);
  static Primitive box(const Vector3<double>& lo, const Vector3<double>& hi, const Vector3<double>& albedo);
};

struct SceneSpec {
  std::vector<Primitive> primitives;
  /// Direction the light travels in (unit length).
  Vector3<double> light_direction = Vector3<double>(0.3, 0.2, -1.0).normalized();
  double light_intensity = 1.0;
  Vector3<double> background = Vector3<double>::Ones();
  std::uint64_t seed = 0;

  /// One to three random primitives inside the unit ball.
  static SceneSpec random(std::uint64_t seed);
  void validate() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

/// Ray-traced Lambertian render in [0, 1].
Image render_scene(const SceneSpec& spec, const Pose<double>& pose, const Camera<double>& camera);

struct DatasetOptions {
  int num_scenes = 8;
  int views_per_scene = 50;
  int resolution = 32;
  double radius_min = 2.5;
  double radius_max = 3.0;
  /// Trailing scenes assigned to the test split.
  int test_scenes = 0;
  /// Camera distances for test scenes; defaults to the train range.
  std::optional<std::pair<double, double>> test_radius;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ViewRecord {
  std::string image;
  std::string pose_file;
  Pose<double> pose;
};

struct SceneRecord {
  std::string id;
  std::string split;
  SceneSpec spec;
  std::vector<ViewRecord> views;
};

struct DatasetManifest {
  static constexpr int kVersion = 1;
  int version = kVersion;
  int resolution = 0;
  Camera<double> camera;
  DatasetOptions options;
  std::vector<SceneRecord> scenes;

  int views_per_scene() const { return scenes.empty() ? 0 : static_cast<int>(scenes.front().views.size()); }
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& dir, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& dir);

/// Renders and writes a dataset under `dir`, returning its manifest.
DatasetManifest make_dataset(const std::filesystem::path& dir, const DatasetOptions& options);

/// All views of one scene in memory; images are in [-1, 1].
struct SceneData {
  std::string id;
  std::string split;
  Camera<double> camera;
  std::vector<Image> images;
  std::vector<Pose<double>> poses;

  int num_views() const { return static_cast<int>(images.size()); }
};

struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::vector<SceneData> scenes;

  std::vector<int> split_indices(const std::string& split) const;
};

/// Loads and validates a dataset written by make_dataset.
Dataset load_dataset(const std::filesystem::path& dir);

/// Reads one scene in the SRN ShapeNet layout (rgb/*.png, pose/*.txt with
/// 4x4 camera-to-world matrices, intrinsics.txt).
SceneData load_srn_scene(const std::filesystem::path& dir, const std::string& split = "test");

Pose<double> read_pose_file(const std::filesystem::path& path);
void write_pose_file(const std::filesystem::path& path, const Pose<double>& pose);

struct PairBatch {
  Tensor<float> x1, x2;  // (B, H, W, 3) in [-1, 1]
  std::vector<Pose<double>> p1, p2;
  Camera<double> camera;
  std::vector<int> scene, view1, view2;
};

/// Infinite seeded stream of same-scene view pairs with distinct indices.
class PairSampler {
 public:
  PairSampler(const Dataset& data, const std::string& split, std::uint64_t seed);

  PairBatch next(int batch_size);
  Rng& rng() { return rng_; }

 private:
  const Dataset* data_;
  std::vector<int> scenes_;
  Rng rng_;
};

}  // namespace nvs
