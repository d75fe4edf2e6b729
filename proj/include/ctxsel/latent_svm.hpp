#pragma once

#include <cstdint>
#include <vector>

#include "ctxsel/rescoring.hpp"

namespace ctxsel {

struct TrainConfig {
  double reg_lambda = 1e-2;
  std::size_t outer_iters = 10;
  std::size_t inner_epochs = 20;
  std::uint64_t seed = 0;
  double tol = 1e-4;
  std::size_t workers = 1;

  void validate() const;
  nlohmann::json to_json() const;
};

struct TrainReport {
  double initial_objective = 0.0;
  std::vector<double> objective_per_outer_iter;
  std::vector<std::size_t> relabel_change_counts;
  // Whether the convex step improved on its warm start, per outer iteration.
  std::vector<bool> step_accepted;
  bool converged = false;

  nlohmann::json to_json() const;
};

// Select: latent indicators are maximized per sample.
// SelectAll: every indicator fixed to 1 (the select-all baseline).
enum class LatentMode { Select, SelectAll };

// Per sample indicator vectors; only meaningful for positives.
using Latents = std::vector<std::vector<bool>>;

// (1/n) sum hinge(1 - y f_w(x)) + lambda/2 |w|^2 with f_w the max over indicators
// (or the all-ones score in SelectAll mode).
double latent_objective(const std::vector<FeaturizedSample>& samples, const RescoreWeights& w,
                        double reg_lambda, LatentMode mode = LatentMode::Select);

// Same loss with the positives' indicators held fixed; convex in w.
// In SelectAll mode the negatives' indicators are held fixed as well.
double fixed_latent_objective(const std::vector<FeaturizedSample>& samples, const Latents& latents,
                              const RescoreWeights& w, double reg_lambda,
                              LatentMode mode = LatentMode::Select);

// argmax_l <w, phi(x, l)> for every positive sample (empty vectors for negatives).
Latents relabel_positives(const std::vector<FeaturizedSample>& samples, const RescoreWeights& w,
                          std::size_t workers = 1);

// Stochastic subgradient on the fixed-latent objective, eta_t = 1/(lambda t),
// projecting w_Ac >= 0 after every update and averaging the final quarter of
// iterates. Negatives re-maximize their indicators at every visit.
RescoreWeights convex_step(const std::vector<FeaturizedSample>& samples, const Latents& latents,
                           std::size_t num_classes, const TrainConfig& config,
                           std::uint64_t step_seed, LatentMode mode = LatentMode::Select);

struct LatentTrainResult {
  RescoreWeights weights;
  TrainReport report;
};

LatentTrainResult train_latent(const std::vector<FeaturizedSample>& samples,
                               std::size_t num_classes, const TrainConfig& config,
                               LatentMode mode = LatentMode::Select);

std::vector<FeaturizedSample> featurize_all(const std::vector<RescoreSample>& samples,
                                            ClassId target_class, const ContextStats& stats,
                                            std::size_t workers = 1);

// Flips every training label, turning a For problem into an Against problem.
std::vector<FeaturizedSample> flip_labels(std::vector<FeaturizedSample> samples);

struct ClassTrainResult {
  RescoreModel model;
  TrainReport for_report;
  TrainReport against_report;
  TrainReport select_all_report;
};

// Trains the For model (labels as-is), the Against model (labels negated) and
// the select-all baseline for one target class.
ClassTrainResult train_for_against(const std::vector<Scene>& scenes, ClassId target_class,
                                   const ContextPool& pool, const ContextStats& stats,
                                   const TrainConfig& config);
ClassTrainResult train_for_against(const std::vector<Scene>& scenes, ClassId target_class,
                                   std::span<const double> thresholds, const ContextStats& stats,
                                   const TrainConfig& config);

}  // namespace ctxsel
