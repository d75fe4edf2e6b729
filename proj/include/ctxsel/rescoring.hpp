#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxsel/context_stats.hpp"
#include "ctxsel/scene.hpp"

namespace ctxsel {

enum class Side { For, Against };
const char* side_name(Side side);

// Weight vector in the feature-map layout
//   [w0 | w_co(0..M-1) | w_sc | w_spx | w_spy | w_Ac | b]   (length 5M + 2).
// The per-class w_Ac entries are constrained to be nonnegative.
class RescoreWeights {
 public:
  enum Cue : std::size_t { co = 0, sc = 1, spx = 2, spy = 3, ac = 4 };
  static constexpr std::size_t kNumCues = 5;

  RescoreWeights() = default;
  explicit RescoreWeights(std::size_t num_classes);

  // w0 = 1, everything else 0: reproduces the raw detector ranking.
  static RescoreWeights initial(std::size_t num_classes);
  static std::size_t size_for(std::size_t num_classes) { return kNumCues * num_classes + 2; }

  std::size_t num_classes() const { return num_classes_; }
  std::size_t size() const { return data_.size(); }

  double& w0() { return data_.front(); }
  double w0() const { return data_.front(); }
  double& b() { return data_.back(); }
  double b() const { return data_.back(); }
  double& cue(Cue c, ClassId i) { return data_[index(c, i)]; }
  double cue(Cue c, ClassId i) const { return data_[index(c, i)]; }
  std::size_t index(Cue c, ClassId i) const { return 1 + c * num_classes_ + i; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  // Clamp w_Ac into [0, inf).
  void project();
  bool feasible() const;

  nlohmann::json to_json() const;
  static RescoreWeights from_json(const nlohmann::json& j, std::size_t num_classes);

  bool operator==(const RescoreWeights&) const = default;

 private:
  std::size_t num_classes_ = 0;
  std::vector<double> data_;
};

// A target detection of class T and its candidate context regions.
struct RescoreSample {
  Detection target;
  std::vector<Detection> contexts;
  double width = 0.0;
  double height = 0.0;
  std::optional<int> label;  // +1 / -1 when training

  // Provenance, used for traces and re-scored output.
  std::size_t scene_index = 0;
  std::size_t target_index = 0;
  std::vector<std::size_t> context_indices;
};

// Per-region log features, in cue order (co, sc, spx, spy, log A_c).
struct RegionFeatures {
  ClassId context_class = 0;
  std::array<double, RescoreWeights::kNumCues> logs{};
};

// A sample with its likelihood lookups done once; training and scoring run on this.
struct FeaturizedSample {
  ClassId target_class = 0;
  double log_target_score = 0.0;
  std::vector<RegionFeatures> regions;
  int label = 0;
};

RegionFeatures region_features(ClassId target_class, const Detection& target,
                               const Detection& context, const ContextStats& stats,
                               double width, double height);
FeaturizedSample featurize(const RescoreSample& sample, ClassId target_class,
                           const ContextStats& stats);

double region_contribution(const RegionFeatures& region, const RescoreWeights& weights);
double region_contribution(ClassId target_class, const Detection& target, const Detection& context,
                           const RescoreWeights& weights, const ContextStats& stats, double width,
                           double height);

struct SelectionTrace {
  std::vector<bool> indicators;
  std::vector<double> contributions;
  Side side = Side::For;
};

struct ScoredSelection {
  double score = 0.0;
  SelectionTrace trace;
};

// Maximizes the additive score over all indicator vectors. Because the
// context sum is separable, the optimum turns region j on iff c_j > 0.
ScoredSelection select_and_score(const FeaturizedSample& sample, const RescoreWeights& weights,
                                 Side side = Side::For);

// w0 log A + sum_{l_j = 1} c_j + b for a fixed indicator vector.
double score_with_indicators(const FeaturizedSample& sample, const RescoreWeights& weights,
                             const std::vector<bool>& indicators);

std::vector<double> feature_vector(const FeaturizedSample& sample,
                                   const std::vector<bool>& indicators, std::size_t num_classes);

// Adds scale * phi(x, l) into `out` without materializing phi.
void accumulate_feature(const FeaturizedSample& sample, const std::vector<bool>& indicators,
                        double scale, std::span<double> out);

struct RescoreModel {
  ClassId target_class = 0;
  ContextStats stats;
  RescoreWeights for_weights;
  RescoreWeights against_weights;
  // Select-all baseline trained with indicators fixed to 1, when available.
  std::optional<RescoreWeights> select_all_weights;
  // Context eligibility used at training time; reused when scoring.
  std::vector<double> thresholds;
  double precision = 0.0;
  bool oracle = false;

  nlohmann::json to_json() const;
  static RescoreModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static RescoreModel load(const std::filesystem::path& path);
};

struct MarginResult {
  double margin = 0.0;
  double for_score = 0.0;
  double against_score = 0.0;
  SelectionTrace for_trace;
  SelectionTrace against_trace;
};

MarginResult margin_score(const RescoreModel& model, const FeaturizedSample& sample);
MarginResult margin_score(const RescoreModel& model, const RescoreSample& sample);

// Which detections of each scene may serve as context.
using ContextPool = std::vector<std::vector<bool>>;

// Context eligible iff score > threshold of its class (strict).
ContextPool threshold_pool(const std::vector<Scene>& scenes, std::span<const double> thresholds);
// Context eligible iff the detection is a true positive (same-class GT at IoU >= 0.5).
ContextPool oracle_pool(const std::vector<Scene>& scenes);

// One sample per class-T detection; contexts are the other eligible
// detections of any class. Labels come from greedy IoU >= 0.5 matching.
std::vector<RescoreSample> build_samples(const std::vector<Scene>& scenes, ClassId target_class,
                                         const ContextPool& pool);
std::vector<RescoreSample> build_samples(const std::vector<Scene>& scenes, ClassId target_class,
                                         std::span<const double> thresholds);

}  // namespace ctxsel
