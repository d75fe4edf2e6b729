#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctxsel/scene.hpp"
#include "json.hpp"

namespace ctxsel {

struct HistConfig {
  std::size_t n_scale_bins = 10;
  std::size_t n_spatial_bins = 10;
  double scale_lo = -3.0;
  double scale_hi = 3.0;
  double laplace_alpha = 1.0;

  void validate() const;
  bool operator==(const HistConfig&) const = default;
};

enum class LikelihoodKind { co = 0, sc = 1, spx = 2, spy = 3 };
inline constexpr std::size_t kNumLikelihoodKinds = 4;

// Half-open bins [lo, hi) over [range_lo, range_hi], last bin closed.
// Values outside the range fall into the end bins.
std::size_t bin_index(double value, double range_lo, double range_hi, std::size_t n_bins);

// log(sqrt(area_target / area_context)), clipped into [cfg.scale_lo, cfg.scale_hi].
double scale_ratio(const BBox& target, const BBox& context, const HistConfig& cfg);

struct Offset {
  double x = 0.0;
  double y = 0.0;
};

// Signed center-to-center offset of `context` relative to `target`, normalized
// by the image width / height and clamped to [-1, 1].
Offset spatial_offsets(const BBox& target, const BBox& context, double width, double height);

// Log-likelihood of one (target, context) pair for each of the four cues.
struct PairLogLikelihood {
  double co = 0.0;
  double sc = 0.0;
  double spx = 0.0;
  double spy = 0.0;
};

class ContextStats {
 public:
  ContextStats() = default;
  ContextStats(ClassVocab vocab, HistConfig config);

  const ClassVocab& vocab() const { return vocab_; }
  const HistConfig& config() const { return config_; }
  std::size_t num_classes() const { return vocab_.size(); }
  std::size_t num_images() const { return num_images_; }

  std::size_t num_bins(LikelihoodKind kind) const;

  // Smoothed, normalized histogram for the ordered pair (target T, context i).
  std::span<const double> histogram(LikelihoodKind kind, ClassId target, ClassId context) const;

  // Bin probability containing `value`. For `co` the value is the binary event
  // "a context object of class i is present" (nonzero = present).
  double lookup(LikelihoodKind kind, ClassId target, ClassId context, double value) const;

  PairLogLikelihood pair_log_likelihood(ClassId target_class, const BBox& target,
                                        ClassId context_class, const BBox& context,
                                        double width, double height) const;

  nlohmann::json to_json() const;
  static ContextStats from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static ContextStats load(const std::filesystem::path& path);

  bool operator==(const ContextStats&) const = default;

 private:
  friend class StatsAccumulator;

  std::vector<double>& table(LikelihoodKind kind) { return tables_[static_cast<std::size_t>(kind)]; }
  const std::vector<double>& table(LikelihoodKind kind) const {
    return tables_[static_cast<std::size_t>(kind)];
  }
  std::size_t offset(LikelihoodKind kind, ClassId target, ClassId context) const {
    return (target * num_classes() + context) * num_bins(kind);
  }

  ClassVocab vocab_;
  HistConfig config_;
  std::size_t num_images_ = 0;
  std::array<std::vector<double>, kNumLikelihoodKinds> tables_;
};

// Additive raw counts; partial accumulators from separate workers merge by
// summation, so the fitted statistics do not depend on how scenes are split.
class StatsAccumulator {
 public:
  StatsAccumulator(ClassVocab vocab, HistConfig config);

  void add(const Scene& scene);
  void merge(const StatsAccumulator& other);
  ContextStats finalize() const;

  std::size_t num_images() const { return counts_.num_images_; }
  std::span<const double> counts(LikelihoodKind kind, ClassId target, ClassId context) const;

 private:
  ContextStats counts_;
};

// Fits d_co, d_sc, d_spx, d_spy from the scenes' ground truth.
ContextStats fit_stats(const std::vector<Scene>& scenes, const ClassVocab& vocab,
                       const HistConfig& config = {}, std::size_t workers = 1);

}  // namespace ctxsel
