#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <vector>

#include "ctxsel/context_stats.hpp"
#include "ctxsel/scene.hpp"

namespace ctxsel {

// Context classes whose contributions are dropped at inference time.
struct ClassMask {
  std::set<ClassId> excluded;

  bool masks(ClassId c) const { return excluded.count(c) > 0; }
};

// Feature layout for one candidate label T: block i holds the four summed
// log-likelihoods (co, sc, spx, spy) over context objects of class i, at
// index 4*i + cue; the final entry is the constant bias feature.
std::size_t pure_feature_size(std::size_t num_classes);

std::vector<double> pure_feature(const Scene& scene, std::size_t target_idx, ClassId candidate,
                                 const ContextStats& stats, const ClassMask& mask = {});

class PureContextModel {
 public:
  PureContextModel() = default;
  explicit PureContextModel(ContextStats stats);

  const ClassVocab& vocab() const { return stats_.vocab(); }
  const ContextStats& stats() const { return stats_; }
  std::size_t num_classes() const { return stats_.num_classes(); }
  std::size_t feature_size() const { return pure_feature_size(num_classes()); }

  // Weight row for candidate class T (w_co(T,i), w_sc(T,i), w_spx(T,i),
  // w_spy(T,i) per context class i, then b_T).
  std::span<double> row(ClassId candidate);
  std::span<const double> row(ClassId candidate) const;
  double w_co(ClassId t, ClassId i) const { return row(t)[4 * i + 0]; }
  double w_sc(ClassId t, ClassId i) const { return row(t)[4 * i + 1]; }
  double w_spx(ClassId t, ClassId i) const { return row(t)[4 * i + 2]; }
  double w_spy(ClassId t, ClassId i) const { return row(t)[4 * i + 3]; }
  double bias(ClassId t) const { return row(t)[4 * num_classes()]; }

  const std::vector<double>& weights() const { return weights_; }
  std::vector<double>& weights() { return weights_; }

  nlohmann::json to_json() const;
  static PureContextModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static PureContextModel load(const std::filesystem::path& path);

  bool operator==(const PureContextModel&) const = default;

 private:
  ContextStats stats_;
  std::vector<double> weights_;
};

struct Prediction {
  ClassId label = 0;
  std::vector<double> scores;
};

// argmax over candidate labels; ties go to the lowest class index.
Prediction predict_label(const PureContextModel& model, const Scene& scene,
                         std::size_t target_idx, const ClassMask& mask = {});

struct PureTrainConfig {
  double reg_lambda = 1e-3;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

struct PureTrainResult {
  PureContextModel model;
  // Multiclass hinge objective of the returned (averaged) iterate after each epoch.
  std::vector<double> objective_per_epoch;
  double initial_objective = 0.0;
};

// One training example: every GT object, with all other GT objects as context.
struct PureExample {
  ClassId label = 0;
  std::vector<std::vector<double>> features;  // one feature vector per candidate
};

std::vector<PureExample> pure_examples(const std::vector<Scene>& scenes, const ContextStats& stats,
                                       std::size_t workers = 1);

double pure_objective(const std::vector<PureExample>& examples, std::span<const double> weights,
                      std::size_t num_classes, double reg_lambda);

PureTrainResult train_pure(const std::vector<Scene>& scenes, const ContextStats& stats,
                           const PureTrainConfig& config = {});

struct AccuracyReport {
  std::vector<std::size_t> correct;  // per target class
  std::vector<std::size_t> total;    // per target class
  double mean = 0.0;                 // macro average over classes with total > 0

  std::optional<double> class_accuracy(ClassId c) const;
};

AccuracyReport accuracy(const PureContextModel& model, const std::vector<Scene>& scenes,
                        const ClassMask& mask = {}, std::size_t workers = 1);

// (Acc_{C-i}(T) - Acc_C(T)) / Acc_C(T), masking class i at inference. The
// literal signed value is returned; a drop in accuracy gives a negative RAL.
double ral(const PureContextModel& model, const std::vector<Scene>& scenes, ClassId target,
           ClassId context, std::size_t workers = 1);
double ral_from_accuracies(double acc_full, double acc_masked);

struct RalRow {
  ClassId target = 0;
  ClassId context = 0;
  double acc_full = 0.0;
  double acc_masked = 0.0;
  std::optional<double> ral;  // empty when acc_full == 0
};

std::vector<RalRow> ral_table(const PureContextModel& model, const std::vector<Scene>& scenes,
                              std::size_t workers = 1);

void write_accuracy_csv(std::ostream& out, const ClassVocab& vocab, const AccuracyReport& report);
void write_ral_csv(std::ostream& out, const ClassVocab& vocab, const std::vector<RalRow>& rows);

}  // namespace ctxsel
