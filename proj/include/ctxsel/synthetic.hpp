#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ctxsel/scene.hpp"
#include "json.hpp"

namespace ctxsel {

struct Gaussian {
  double mu = 0.0;
  double sigma = 1.0;

  bool operator==(const Gaussian&) const = default;
};

// Where a class sits when it is the anchor of a scene. Pixel units; the
// jitters are a pixel sigma for the center and a log sigma for the size.
struct AnchorPrior {
  double cx = 0.0;
  double cy = 0.0;
  double w = 1.0;
  double h = 1.0;
  double pos_jitter = 0.0;
  double size_jitter = 0.0;

  bool operator==(const AnchorPrior&) const = default;
};

// Pairwise tables are M x M, row-major, indexed [anchor][object]. Scale is
// log(sqrt(area_anchor / area_object)); offsets are object center minus
// anchor center over the image width / height.
struct WorldSpec {
  ClassVocab vocab;
  int width = 64;
  int height = 48;
  std::vector<double> cooccur;
  std::vector<Gaussian> scale;
  std::vector<Gaussian> offset_x;
  std::vector<Gaussian> offset_y;
  std::vector<AnchorPrior> anchors;
  std::size_t min_objects = 2;
  std::size_t max_objects = 5;
  std::uint64_t seed = 0;
  // Scene draws that get stuck below min_objects are restarted at most this often.
  std::size_t max_restarts = 1000;

  std::size_t num_classes() const { return vocab.size(); }
  double co(ClassId a, ClassId b) const { return cooccur[a * num_classes() + b]; }
  const Gaussian& scale_of(ClassId a, ClassId o) const { return scale[a * num_classes() + o]; }
  const Gaussian& dx_of(ClassId a, ClassId o) const { return offset_x[a * num_classes() + o]; }
  const Gaussian& dy_of(ClassId a, ClassId o) const { return offset_y[a * num_classes() + o]; }

  void validate() const;
  nlohmann::json to_json() const;
  static WorldSpec from_json(const nlohmann::json& j);
  static WorldSpec load(const std::filesystem::path& path);
  bool operator==(const WorldSpec&) const = default;
};

// Canonical box per class plus per-class placement noise; the pairwise
// tables are derived from it so that every pair agrees with one layout.
struct LayoutClass {
  std::string name;
  BBox box;
  double offset_sigma = 0.02;
  double scale_sigma = 0.05;
};

WorldSpec layout_world(const std::vector<LayoutClass>& classes, std::vector<double> cooccur,
                       int width, int height, std::size_t min_objects, std::size_t max_objects);

// Bedroom-and-office world with a noise class ("box") that co-occurs with
// everything and lands anywhere.
WorldSpec default_world();
// Two groups of three classes, full co-occurrence inside a group and none
// across, each class in its own horizontal band.
WorldSpec deterministic_world();
WorldSpec world_preset(const std::string& name);

struct BetaParams {
  double a = 1.0;
  double b = 1.0;

  double mean() const { return a / (a + b); }
  bool operator==(const BetaParams&) const = default;
};

struct DetectorSpec {
  std::vector<double> tp_rate;       // per class recall
  std::vector<double> fp_per_scene;  // per class Poisson rate
  BetaParams tp_score{4.0, 2.0};
  BetaParams fp_score{2.0, 4.0};
  double localization_jitter = 1.0;  // pixel sigma on every box coordinate
  std::uint64_t seed = 0;

  void validate(std::size_t num_classes) const;
  nlohmann::json to_json() const;
  // Scalars in tp_rate / fp_per_scene are broadcast to every class.
  static DetectorSpec from_json(const nlohmann::json& j, std::size_t num_classes);
  static DetectorSpec load(const std::filesystem::path& path, std::size_t num_classes);
  bool operator==(const DetectorSpec&) const = default;
};

// 0.7 recall and three false positives per scene spread over the classes.
DetectorSpec noisy_detector(std::size_t num_classes);
DetectorSpec perfect_detector(std::size_t num_classes);

// Scene `index` of the world, from its own RNG stream.
Scene generate_scene(const WorldSpec& world, std::size_t index);

// Scenes first_index .. first_index + n - 1, ground truth only.
std::vector<Scene> generate(const WorldSpec& world, std::size_t n, std::size_t first_index = 0,
                            std::size_t workers = 1);

// Fills dets from the ground truth. The stream of each scene is keyed on its
// image id, so a scene gets the same detections wherever it appears.
std::vector<Scene> simulate_detector(std::vector<Scene> scenes, const WorldSpec& world,
                                     const DetectorSpec& spec, std::size_t workers = 1);

}  // namespace ctxsel
