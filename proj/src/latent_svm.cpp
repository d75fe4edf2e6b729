#include "ctxsel/latent_svm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ctxsel/error.hpp"
#include "ctxsel/parallel.hpp"
#include "ctxsel/random.hpp"

namespace ctxsel {

namespace {

double hinge(double margin) { return std::max(0.0, 1.0 - margin); }

double squared_norm(std::span<const double> w) {
  double s = 0.0;
  for (double v : w) s += v * v;
  return s;
}

std::vector<bool> all_on(const FeaturizedSample& s) { return std::vector<bool>(s.regions.size(), true); }

// Score used by the convex step: positives (and, in SelectAll mode, every
// sample) use their fixed indicators; everything else is re-maximized.
double step_score(const FeaturizedSample& s, const RescoreWeights& w, const std::vector<bool>& fixed,
                  bool use_fixed, std::vector<bool>* chosen) {
  if (use_fixed) {
    if (chosen) *chosen = fixed;
    return score_with_indicators(s, w, fixed);
  }
  // Same rule as select_and_score, without building a trace.
  if (chosen) chosen->assign(s.regions.size(), false);
  double score = w.w0() * s.log_target_score;
  for (std::size_t j = 0; j < s.regions.size(); ++j) {
    const double c = region_contribution(s.regions[j], w);
    if (c > 0.0) {
      score += c;
      if (chosen) (*chosen)[j] = true;
    }
  }
  return score + w.b();
}

void check_samples(const std::vector<FeaturizedSample>& samples) {
  for (const auto& s : samples) {
    if (s.label != 1 && s.label != -1) throw Error("train", "training samples need labels of +1 or -1");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(reg_lambda > 0.0) || !std::isfinite(reg_lambda)) throw Error("config", "reg_lambda must be positive");
  if (outer_iters < 1) throw Error("config", "outer_iters must be >= 1");
  if (inner_epochs < 1) throw Error("config", "inner_epochs must be >= 1");
  if (!(tol > 0.0)) throw Error("config", "tol must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"reg_lambda", reg_lambda},
          {"outer_iters", outer_iters},
          {"inner_epochs", inner_epochs},
          {"seed", seed},
          {"tol", tol}};
}

nlohmann::json TrainReport::to_json() const {
  return {{"initial_objective", initial_objective},
          {"objective_per_outer_iter", objective_per_outer_iter},
          {"relabel_change_counts", relabel_change_counts},
          {"step_accepted", step_accepted},
          {"converged", converged}};
}

double latent_objective(const std::vector<FeaturizedSample>& samples, const RescoreWeights& w,
                        double reg_lambda, LatentMode mode) {
  double loss = 0.0;
  for (const auto& s : samples) {
    const double f = mode == LatentMode::SelectAll ? score_with_indicators(s, w, all_on(s))
                                                   : step_score(s, w, {}, false, nullptr);
    loss += hinge(s.label * f);
  }
  loss /= static_cast<double>(std::max<std::size_t>(1, samples.size()));
  return loss + 0.5 * reg_lambda * squared_norm(w.data());
}

double fixed_latent_objective(const std::vector<FeaturizedSample>& samples, const Latents& latents,
                              const RescoreWeights& w, double reg_lambda, LatentMode mode) {
  double loss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const bool use_fixed = s.label > 0 || mode == LatentMode::SelectAll;
    loss += hinge(s.label * step_score(s, w, latents[i], use_fixed, nullptr));
  }
  loss /= static_cast<double>(std::max<std::size_t>(1, samples.size()));
  return loss + 0.5 * reg_lambda * squared_norm(w.data());
}

Latents relabel_positives(const std::vector<FeaturizedSample>& samples, const RescoreWeights& w,
                          std::size_t workers) {
  Latents latents(samples.size());
  parallel_for(samples.size(), workers, [&](std::size_t i) {
    if (samples[i].label > 0) latents[i] = select_and_score(samples[i], w).trace.indicators;
  });
  return latents;
}

RescoreWeights convex_step(const std::vector<FeaturizedSample>& samples, const Latents& latents,
                           std::size_t num_classes, const TrainConfig& config,
                           std::uint64_t step_seed, LatentMode mode) {
  config.validate();
  const std::size_t n = samples.size();
  if (n == 0) throw Error("train", "convex step needs at least one sample");
  const double lambda = config.reg_lambda;
  const std::size_t total = config.inner_epochs * n;
  const std::size_t tail_start = total - std::max<std::size_t>(1, total / 4);
  const double radius = std::sqrt(2.0 / lambda);

  // The iterate is kept as w = a * v so the per-step shrink is O(1). The
  // tail average S = sum_t a_t v_t is kept lazily as a_sum * v - u, with u
  // absorbing every change to v.
  RescoreWeights v(num_classes);
  auto vd = v.data();
  double a = 1.0;
  std::vector<double> u(v.size(), 0.0);
  double a_sum = 0.0;
  std::size_t avg_count = 0;
  const auto change_v = [&](std::size_t k, double delta) {
    vd[k] += delta;
    u[k] += a_sum * delta;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(step_seed);
  std::vector<bool> chosen;
  std::vector<double> phi(v.size());
  std::size_t t = 0;
  const std::size_t m = num_classes;
  for (std::size_t epoch = 0; epoch < config.inner_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      ++t;
      const auto& s = samples[i];
      const bool use_fixed = s.label > 0 || mode == LatentMode::SelectAll;
      // a > 0, so selecting on v is selecting on w.
      const double f = a * step_score(s, v, latents[i], use_fixed, use_fixed ? nullptr : &chosen);
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      const double shrink = 1.0 - eta * lambda;
      if (shrink <= 0.0) {
        for (std::size_t k = 0; k < vd.size(); ++k) change_v(k, -vd[k]);
        a = 1.0;
      } else {
        a *= shrink;
      }
      // A pure shrink keeps w feasible, so only a hinge update needs projecting.
      if (s.label * f < 1.0) {
        std::fill(phi.begin(), phi.end(), 0.0);
        accumulate_feature(s, use_fixed ? latents[i] : chosen, eta * s.label / a, phi);
        for (std::size_t k = 0; k < phi.size(); ++k) {
          if (phi[k] != 0.0) change_v(k, phi[k]);
        }
        // Clamp w_Ac at 0, then scale into |w| <= radius. The minimizer lies
        // in that ball (lambda/2 |w|^2 cannot exceed the objective at w = 0,
        // which is 1), and for a cone meeting an origin-centered ball the two
        // stages compose to the exact projection.
        for (ClassId c = 0; c < m; ++c) {
          const std::size_t k = v.index(RescoreWeights::ac, c);
          if (vd[k] < 0.0) change_v(k, -vd[k]);
        }
        const double norm = a * std::sqrt(squared_norm(vd));
        if (norm > radius) a *= radius / norm;
      }
      if (t > tail_start) {
        a_sum += a;
        ++avg_count;
      }
    }
    if (!std::isfinite(a) || !std::all_of(vd.begin(), vd.end(), [](double x) { return std::isfinite(x); })) {
      throw Error("divergence", "convex step diverged at inner epoch " + std::to_string(epoch + 1));
    }
  }
  RescoreWeights w(num_classes);
  auto data = w.data();
  for (std::size_t k = 0; k < data.size(); ++k) {
    data[k] = (a_sum * vd[k] - u[k]) / static_cast<double>(avg_count);
  }
  w.project();
  return w;
}

LatentTrainResult train_latent(const std::vector<FeaturizedSample>& samples,
                               std::size_t num_classes, const TrainConfig& config,
                               LatentMode mode) {
  config.validate();
  check_samples(samples);
  const auto n_pos = std::count_if(samples.begin(), samples.end(),
                                   [](const FeaturizedSample& s) { return s.label > 0; });
  if (n_pos == 0) throw Error("train", "no positive samples");
  if (static_cast<std::size_t>(n_pos) == samples.size()) throw Error("train", "no negative samples");

  LatentTrainResult r{RescoreWeights::initial(num_classes), {}};
  const double lambda = config.reg_lambda;
  double prev = latent_objective(samples, r.weights, lambda, mode);
  if (!std::isfinite(prev)) throw Error("divergence", "initial objective is not finite");
  r.report.initial_objective = prev;

  Latents prev_latents;
  for (std::size_t k = 1; k <= config.outer_iters; ++k) {
    Latents latents;
    // With the initial weights every contribution is 0, so an exact relabel
    // would switch every region off and the cue weights would never receive
    // a subgradient. The first step therefore starts from all regions on.
    if (mode == LatentMode::SelectAll || k == 1) {
      latents.resize(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (mode == LatentMode::SelectAll || samples[i].label > 0) latents[i] = all_on(samples[i]);
      }
    } else {
      latents = relabel_positives(samples, r.weights, config.workers);
    }
    std::size_t changes = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].label <= 0) continue;
      if (prev_latents.empty() || prev_latents[i] != latents[i]) ++changes;
    }
    r.report.relabel_change_counts.push_back(changes);

    // The step solves the fixed-latent problem approximately; it replaces the
    // current weights only when it lowers that objective, so the outer loop
    // is a descent method.
    auto candidate = convex_step(samples, latents, num_classes, config,
                                 derive_seed(config.seed, {k}), mode);
    const double current = fixed_latent_objective(samples, latents, r.weights, lambda, mode);
    const double stepped = fixed_latent_objective(samples, latents, candidate, lambda, mode);
    if (!std::isfinite(stepped)) {
      throw Error("divergence", "objective not finite at outer iteration " + std::to_string(k));
    }
    const bool accepted = stepped < current;
    if (accepted) r.weights = std::move(candidate);
    r.report.step_accepted.push_back(accepted);

    const double obj = latent_objective(samples, r.weights, lambda, mode);
    r.report.objective_per_outer_iter.push_back(obj);
    prev_latents = std::move(latents);

    if (changes == 0 || std::abs(prev - obj) < config.tol * std::abs(prev)) {
      r.report.converged = true;
      break;
    }
    prev = obj;
  }
  return r;
}

std::vector<FeaturizedSample> featurize_all(const std::vector<RescoreSample>& samples,
                                            ClassId target_class, const ContextStats& stats,
                                            std::size_t workers) {
  std::vector<FeaturizedSample> out(samples.size());
  parallel_for(samples.size(), workers,
               [&](std::size_t i) { out[i] = featurize(samples[i], target_class, stats); });
  return out;
}

std::vector<FeaturizedSample> flip_labels(std::vector<FeaturizedSample> samples) {
  for (auto& s : samples) s.label = -s.label;
  return samples;
}

ClassTrainResult train_for_against(const std::vector<Scene>& scenes, ClassId target_class,
                                   const ContextPool& pool, const ContextStats& stats,
                                   const TrainConfig& config) {
  const auto& name = stats.vocab().name(target_class);
  const auto samples =
      featurize_all(build_samples(scenes, target_class, pool), target_class, stats, config.workers);
  const auto n_pos = std::count_if(samples.begin(), samples.end(),
                                   [](const FeaturizedSample& s) { return s.label > 0; });
  if (n_pos == 0) {
    throw Error("train", "class '" + name + "': no true-positive detections, For model has no positives");
  }
  if (static_cast<std::size_t>(n_pos) == samples.size()) {
    throw Error("train", "class '" + name +
                             "': every detection is a true positive, Against model has no positives");
  }
  const std::size_t m = stats.num_classes();

  auto for_run = train_latent(samples, m, config, LatentMode::Select);
  TrainConfig against_cfg = config;
  against_cfg.seed = derive_seed(config.seed, {1});
  auto against_run = train_latent(flip_labels(samples), m, against_cfg, LatentMode::Select);
  TrainConfig sa_cfg = config;
  sa_cfg.seed = derive_seed(config.seed, {2});
  auto sa_run = train_latent(samples, m, sa_cfg, LatentMode::SelectAll);

  ClassTrainResult out;
  out.model.target_class = target_class;
  out.model.stats = stats;
  out.model.for_weights = std::move(for_run.weights);
  out.model.against_weights = std::move(against_run.weights);
  out.model.select_all_weights = std::move(sa_run.weights);
  out.for_report = std::move(for_run.report);
  out.against_report = std::move(against_run.report);
  out.select_all_report = std::move(sa_run.report);
  return out;
}

ClassTrainResult train_for_against(const std::vector<Scene>& scenes, ClassId target_class,
                                   std::span<const double> thresholds, const ContextStats& stats,
                                   const TrainConfig& config) {
  auto r = train_for_against(scenes, target_class, threshold_pool(scenes, thresholds), stats, config);
  r.model.thresholds.assign(thresholds.begin(), thresholds.end());
  return r;
}

}  // namespace ctxsel
