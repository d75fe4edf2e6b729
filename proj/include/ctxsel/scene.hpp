#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ctxsel {

using ClassId = std::size_t;

// Axis aligned box, top-left origin, pixel units.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  bool operator==(const BBox&) const = default;
};

// Intersection over union; 0 for disjoint boxes.
double iou(const BBox& a, const BBox& b);

// Ordered list of object class names (background is not a class).
class ClassVocab {
 public:
  ClassVocab() = default;
  explicit ClassVocab(std::vector<std::string> names);

  std::size_t size() const { return names_.size(); }
  const std::string& name(ClassId id) const { return names_.at(id); }
  const std::vector<std::string>& names() const { return names_; }

  std::optional<ClassId> find(std::string_view name) const;

  bool operator==(const ClassVocab& other) const { return names_ == other.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, ClassId> index_;
};

// Parses "a,b,c" or a file with one class name per line.
ClassVocab parse_vocab_list(std::string_view comma_separated);
ClassVocab load_vocab_file(const std::filesystem::path& path);

struct GtObject {
  ClassId class_id = 0;
  BBox box;

  bool operator==(const GtObject&) const = default;
};

struct Detection {
  ClassId class_id = 0;
  double score = 1.0;
  BBox box;

  bool operator==(const Detection&) const = default;
};

struct Scene {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<GtObject> gts;
  std::vector<Detection> dets;

  bool operator==(const Scene&) const = default;
};

inline constexpr double kMinScore = 1e-6;

struct LoadOptions {
  // Detector files carry probabilities and are clamped into [kMinScore, 1].
  // Re-scored files carry unbounded margins and must be read raw.
  bool clamp_scores = true;
};

Scene parse_scene(std::string_view line, const ClassVocab& vocab,
                  std::size_t line_no = 0, const LoadOptions& options = {});
std::vector<Scene> read_dataset(std::istream& in, const ClassVocab& vocab,
                                const LoadOptions& options = {});
std::vector<Scene> load_dataset(const std::filesystem::path& path,
                                const ClassVocab& vocab,
                                const LoadOptions& options = {});

std::string scene_to_json_line(const Scene& scene, const ClassVocab& vocab);
void write_dataset(std::ostream& out, const std::vector<Scene>& scenes,
                   const ClassVocab& vocab);
void save_dataset(const std::filesystem::path& path,
                  const std::vector<Scene>& scenes, const ClassVocab& vocab);

// Greedy one-to-one matching of the scene's detections to same-class
// ground truth. Detections are visited in descending score order (ties by
// input order); each takes the unmatched GT with the highest IoU >= thresh.
// Returns one true-positive flag per detection, in input order.
std::vector<bool> match_detections(const Scene& scene, double iou_thresh = 0.5);

}  // namespace ctxsel
