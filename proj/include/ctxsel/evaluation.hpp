#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ctxsel/latent_svm.hpp"
#include "ctxsel/rescoring.hpp"
#include "ctxsel/scene.hpp"

namespace ctxsel {

enum class Method { ST, SA, FUB, AUB, CS, SA_O, CS_O };

const char* method_name(Method m);
Method parse_method(std::string_view name);
bool is_oracle(Method m);

enum class ApMode { AllPoint, ElevenPoint };

struct PrCurve {
  std::vector<double> scores;  // descending
  std::vector<bool> is_tp;
  std::vector<double> precision;
  std::vector<double> recall;
  std::size_t num_gt = 0;
  double ap = 0.0;
};

struct ScoredMatch {
  double score = 0.0;
  bool is_tp = false;
};

// Sorts by descending score (stable, so input order breaks ties) and
// integrates the precision envelope over recall.
PrCurve average_precision(std::vector<ScoredMatch> detections, std::size_t num_gt,
                          ApMode mode = ApMode::AllPoint);

// PR curve of one class over a dataset, matching at IoU >= iou_thresh.
PrCurve class_pr_curve(const std::vector<Scene>& scenes, ClassId cls,
                       ApMode mode = ApMode::AllPoint, double iou_thresh = 0.5);

struct EvalReport {
  std::string method;
  std::vector<std::optional<double>> ap;  // empty when the class has no GT
  double map = 0.0;
};

EvalReport evaluate(const std::vector<Scene>& scenes, std::size_t num_classes,
                    const std::string& method, ApMode mode = ApMode::AllPoint);

// Per-class cutoff: the lowest cutoff whose surviving detections
// (score > cutoff) reach precision >= p. +inf when no cutoff does.
std::vector<double> precision_thresholds(const std::vector<Scene>& scenes,
                                         std::size_t num_classes, double p);

using ClassModels = std::vector<std::optional<RescoreModel>>;

struct TraceContext {
  Detection det;
  std::size_t det_index = 0;
  double contribution = 0.0;
  bool selected = false;
};

struct TraceRecord {
  std::string image_id;
  std::size_t scene_index = 0;
  std::size_t target_index = 0;
  Detection target;
  Side side = Side::For;
  double score = 0.0;
  std::vector<TraceContext> contexts;
};

struct RescoreOutput {
  std::vector<Scene> scenes;
  std::vector<TraceRecord> traces;
};

// Replaces the score of every detection whose class has a model with the
// method's score. Classes without a model keep their detector scores
// unless `require_all` is set, in which case they are an error.
RescoreOutput rescore(const std::vector<Scene>& scenes, const ClassModels& models, Method method,
                      bool with_traces = false, bool require_all = true, std::size_t workers = 1);

EvalReport run_baseline(Method method, const ClassModels& models, const std::vector<Scene>& scenes,
                        ApMode mode = ApMode::AllPoint, std::size_t workers = 1);

struct ClassReports {
  ClassId target_class = 0;
  TrainReport for_report;
  TrainReport against_report;
  TrainReport select_all_report;
};

struct TrainedModels {
  ClassModels models;
  std::vector<ClassReports> reports;
};

// Trains For / Against / select-all models for every class (or only `only`).
// Context pools come from the thresholds, or from ground truth when `oracle`.
TrainedModels train_all_classes(const std::vector<Scene>& train, const ContextStats& stats,
                                std::span<const double> thresholds, double precision, bool oracle,
                                const TrainConfig& config,
                                std::optional<ClassId> only = std::nullopt);

struct SelectingRatioRow {
  ClassId target_class = 0;
  ClassId context_class = 0;
  Side side = Side::For;
  std::size_t selected = 0;
  std::size_t total = 0;
  double ratio() const { return total > 0 ? static_cast<double>(selected) / static_cast<double>(total) : 0.0; }
};

struct SelectingRatioTable {
  ClassId target_class = 0;
  // Denominator convention, recorded with the report.
  std::string pool = "oracle";
  std::vector<SelectingRatioRow> rows;  // For rows then Against rows, by context class

  const SelectingRatioRow& row(Side side, ClassId context) const;
};

SelectingRatioTable selecting_ratios(const RescoreModel& model, const std::vector<Scene>& scenes);

struct ExperimentConfig {
  double precision = 0.4;
  TrainConfig train;
  ApMode ap_mode = ApMode::AllPoint;
};

struct ExperimentResult {
  std::vector<double> thresholds;
  TrainedModels models;
  TrainedModels oracle_models;  // trained only when an oracle method is requested
  std::vector<EvalReport> reports;  // same order as the requested methods
};

ExperimentResult run_experiment(const std::vector<Scene>& train, const std::vector<Scene>& test,
                                const ContextStats& stats, const ExperimentConfig& config,
                                const std::vector<Method>& methods);

struct SweepRow {
  double precision = 0.0;
  std::string method;
  double map = 0.0;
};

// Retrains and evaluates at every precision threshold.
std::vector<SweepRow> sweep_precision_threshold(const std::vector<Scene>& train,
                                                const std::vector<Scene>& test,
                                                const ContextStats& stats,
                                                const std::vector<double>& p_values,
                                                const std::vector<Method>& methods,
                                                const ExperimentConfig& config);

void write_ap_csv(std::ostream& out, const ClassVocab& vocab, const std::vector<EvalReport>& reports);
nlohmann::json reports_to_json(const ClassVocab& vocab, const std::vector<EvalReport>& reports);
void write_selecting_ratio_csv(std::ostream& out, const ClassVocab& vocab,
                               const std::vector<SelectingRatioTable>& tables);
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

std::string trace_to_json_line(const TraceRecord& trace, const ClassVocab& vocab);
TraceRecord parse_trace(std::string_view line, const ClassVocab& vocab, std::size_t line_no = 0);
std::vector<TraceRecord> load_traces(const std::filesystem::path& path, const ClassVocab& vocab);

}  // namespace ctxsel
