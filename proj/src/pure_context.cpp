#include "ctxsel/pure_context.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

#include "ctxsel/error.hpp"
#include "ctxsel/parallel.hpp"

namespace ctxsel {

namespace {

constexpr const char* kPureFormat = "ctxsel.pure_model/1";

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double squared_norm(std::span<const double> w) { return dot(w, w); }

// Multiclass margin loss of one example and the most violating wrong label.
std::pair<double, ClassId> example_loss(const PureExample& ex, std::span<const double> weights,
                                        std::size_t m) {
  const std::size_t d = pure_feature_size(m);
  const double own = dot(weights.subspan(ex.label * d, d), ex.features[ex.label]);
  double worst = -std::numeric_limits<double>::infinity();
  ClassId worst_label = ex.label;
  for (ClassId t = 0; t < m; ++t) {
    if (t == ex.label) continue;
    const double s = dot(weights.subspan(t * d, d), ex.features[t]);
    if (s > worst) {
      worst = s;
      worst_label = t;
    }
  }
  return {std::max(0.0, 1.0 + worst - own), worst_label};
}

}  // namespace

std::size_t pure_feature_size(std::size_t num_classes) { return 4 * num_classes + 1; }

std::vector<double> pure_feature(const Scene& scene, std::size_t target_idx, ClassId candidate,
                                 const ContextStats& stats, const ClassMask& mask) {
  const std::size_t m = stats.num_classes();
  std::vector<double> f(pure_feature_size(m), 0.0);
  const BBox& target = scene.gts.at(target_idx).box;
  for (std::size_t j = 0; j < scene.gts.size(); ++j) {
    if (j == target_idx) continue;
    const auto& ctx = scene.gts[j];
    if (mask.masks(ctx.class_id)) continue;
    const auto ll = stats.pair_log_likelihood(candidate, target, ctx.class_id, ctx.box,
                                              scene.width, scene.height);
    double* block = f.data() + 4 * ctx.class_id;
    block[0] += ll.co;
    block[1] += ll.sc;
    block[2] += ll.spx;
    block[3] += ll.spy;
  }
  f[4 * m] = 1.0;
  return f;
}

PureContextModel::PureContextModel(ContextStats stats)
    : stats_(std::move(stats)), weights_(num_classes() * feature_size(), 0.0) {}

std::span<double> PureContextModel::row(ClassId candidate) {
  return std::span<double>(weights_).subspan(candidate * feature_size(), feature_size());
}

std::span<const double> PureContextModel::row(ClassId candidate) const {
  return std::span<const double>(weights_).subspan(candidate * feature_size(), feature_size());
}

nlohmann::json PureContextModel::to_json() const {
  nlohmann::json j;
  j["format"] = kPureFormat;
  j["stats"] = stats_.to_json();
  nlohmann::json rows = nlohmann::json::array();
  for (ClassId t = 0; t < num_classes(); ++t) {
    auto r = row(t);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  j["weights"] = std::move(rows);
  return j;
}

PureContextModel PureContextModel::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kPureFormat) {
      throw Error("parse", "unsupported pure model format");
    }
    PureContextModel model(ContextStats::from_json(j.at("stats")));
    const auto& rows = j.at("weights");
    if (rows.size() != model.num_classes()) throw Error("parse", "bad weight table size");
    for (ClassId t = 0; t < model.num_classes(); ++t) {
      auto values = rows[t].get<std::vector<double>>();
      if (values.size() != model.feature_size()) throw Error("parse", "bad weight row size");
      std::copy(values.begin(), values.end(), model.row(t).begin());
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", std::string("pure model: ") + e.what());
  }
}

void PureContextModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

PureContextModel PureContextModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", path.string() + ": " + e.what());
  }
  return from_json(j);
}

Prediction predict_label(const PureContextModel& model, const Scene& scene,
                         std::size_t target_idx, const ClassMask& mask) {
  Prediction p;
  p.scores.resize(model.num_classes());
  for (ClassId t = 0; t < model.num_classes(); ++t) {
    const auto f = pure_feature(scene, target_idx, t, model.stats(), mask);
    p.scores[t] = dot(model.row(t), f);
    if (p.scores[t] > p.scores[p.label]) p.label = t;
  }
  return p;
}

std::vector<PureExample> pure_examples(const std::vector<Scene>& scenes, const ContextStats& stats,
                                       std::size_t workers) {
  std::vector<std::vector<PureExample>> per_scene(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t s) {
    const Scene& scene = scenes[s];
    for (std::size_t g = 0; g < scene.gts.size(); ++g) {
      PureExample ex;
      ex.label = scene.gts[g].class_id;
      for (ClassId t = 0; t < stats.num_classes(); ++t) {
        ex.features.push_back(pure_feature(scene, g, t, stats));
      }
      per_scene[s].push_back(std::move(ex));
    }
  });
  std::vector<PureExample> out;
  for (auto& v : per_scene) {
    for (auto& ex : v) out.push_back(std::move(ex));
  }
  return out;
}

double pure_objective(const std::vector<PureExample>& examples, std::span<const double> weights,
                      std::size_t num_classes, double reg_lambda) {
  double loss = 0.0;
  for (const auto& ex : examples) loss += example_loss(ex, weights, num_classes).first;
  loss /= static_cast<double>(std::max<std::size_t>(1, examples.size()));
  return loss + 0.5 * reg_lambda * squared_norm(weights);
}

PureTrainResult train_pure(const std::vector<Scene>& scenes, const ContextStats& stats,
                           const PureTrainConfig& config) {
  if (!(config.reg_lambda > 0.0)) throw Error("config", "reg_lambda must be positive");
  if (config.epochs == 0) throw Error("config", "epochs must be >= 1");
  const auto examples = pure_examples(scenes, stats, config.workers);
  if (examples.empty()) throw Error("empty_dataset", "no ground-truth targets to train on");

  const std::size_t m = stats.num_classes();
  const std::size_t d = pure_feature_size(m);
  const std::size_t n = examples.size();
  const double lambda = config.reg_lambda;

  PureTrainResult result{PureContextModel(stats), {}, 0.0};
  std::vector<double> w(m * d, 0.0);
  result.initial_objective = pure_objective(examples, w, m, lambda);

  // Pegasos-style steps eta_t = 1 / (lambda t). The reported model after
  // epoch e is the mean iterate over the trailing quarter of epochs.
  std::vector<std::vector<double>> epoch_sums;
  std::vector<double> sum(m * d, 0.0);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);
  std::size_t t = 0;
  std::vector<double> averaged(m * d, 0.0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::fill(sum.begin(), sum.end(), 0.0);
    for (std::size_t idx : order) {
      ++t;
      const double eta = 1.0 / (lambda * static_cast<double>(t));
      const auto& ex = examples[idx];
      const auto [loss, worst] = example_loss(ex, w, m);
      const double shrink = 1.0 - eta * lambda;
      for (double& v : w) v *= shrink;
      if (loss > 0.0) {
        const auto& fy = ex.features[ex.label];
        const auto& fw = ex.features[worst];
        for (std::size_t k = 0; k < d; ++k) {
          w[ex.label * d + k] += eta * fy[k];
          w[worst * d + k] -= eta * fw[k];
        }
      }
      for (std::size_t k = 0; k < w.size(); ++k) sum[k] += w[k];
    }
    epoch_sums.push_back(sum);

    const std::size_t window = std::max<std::size_t>(1, (epoch + 3) / 4);
    std::fill(averaged.begin(), averaged.end(), 0.0);
    for (std::size_t e = epoch - window; e < epoch; ++e) {
      for (std::size_t k = 0; k < averaged.size(); ++k) averaged[k] += epoch_sums[e][k];
    }
    const double steps = static_cast<double>(window * n);
    for (double& v : averaged) v /= steps;
    const double obj = pure_objective(examples, averaged, m, lambda);
    if (!std::isfinite(obj)) {
      throw Error("divergence", "pure-context objective diverged at epoch " + std::to_string(epoch));
    }
    result.objective_per_epoch.push_back(obj);
  }
  result.model.weights() = averaged;
  return result;
}

std::optional<double> AccuracyReport::class_accuracy(ClassId c) const {
  if (total.at(c) == 0) return std::nullopt;
  return static_cast<double>(correct[c]) / static_cast<double>(total[c]);
}

AccuracyReport accuracy(const PureContextModel& model, const std::vector<Scene>& scenes,
                        const ClassMask& mask, std::size_t workers) {
  const std::size_t m = model.num_classes();
  std::vector<std::vector<std::pair<ClassId, bool>>> per_scene(scenes.size());
  parallel_for(scenes.size(), workers, [&](std::size_t s) {
    for (std::size_t g = 0; g < scenes[s].gts.size(); ++g) {
      const auto p = predict_label(model, scenes[s], g, mask);
      per_scene[s].emplace_back(scenes[s].gts[g].class_id, p.label == scenes[s].gts[g].class_id);
    }
  });
  AccuracyReport r{std::vector<std::size_t>(m, 0), std::vector<std::size_t>(m, 0), 0.0};
  for (const auto& v : per_scene) {
    for (auto [cls, ok] : v) {
      ++r.total[cls];
      if (ok) ++r.correct[cls];
    }
  }
  double acc_sum = 0.0;
  std::size_t classes = 0;
  for (ClassId c = 0; c < m; ++c) {
    if (auto a = r.class_accuracy(c)) {
      acc_sum += *a;
      ++classes;
    }
  }
  r.mean = classes > 0 ? acc_sum / static_cast<double>(classes) : 0.0;
  return r;
}

double ral_from_accuracies(double acc_full, double acc_masked) {
  if (!(acc_full > 0.0)) {
    throw Error("undefined", "RAL undefined: full-context accuracy is zero");
  }
  return (acc_masked - acc_full) / acc_full;
}

double ral(const PureContextModel& model, const std::vector<Scene>& scenes, ClassId target,
           ClassId context, std::size_t workers) {
  const auto full = accuracy(model, scenes, {}, workers).class_accuracy(target);
  const auto masked = accuracy(model, scenes, ClassMask{{context}}, workers).class_accuracy(target);
  if (!full) throw Error("undefined", "RAL undefined: no targets of class " + model.vocab().name(target));
  return ral_from_accuracies(*full, *masked);
}

std::vector<RalRow> ral_table(const PureContextModel& model, const std::vector<Scene>& scenes,
                              std::size_t workers) {
  const std::size_t m = model.num_classes();
  const auto full = accuracy(model, scenes, {}, workers);
  std::vector<RalRow> rows;
  for (ClassId i = 0; i < m; ++i) {
    const auto masked = accuracy(model, scenes, ClassMask{{i}}, workers);
    for (ClassId t = 0; t < m; ++t) {
      const auto af = full.class_accuracy(t);
      if (!af) continue;
      RalRow row{t, i, *af, masked.class_accuracy(t).value_or(0.0), std::nullopt};
      if (*af > 0.0) row.ral = ral_from_accuracies(row.acc_full, row.acc_masked);
      rows.push_back(row);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const RalRow& a, const RalRow& b) {
    return a.target < b.target;
  });
  return rows;
}

void write_accuracy_csv(std::ostream& out, const ClassVocab& vocab, const AccuracyReport& report) {
  out << "class,correct,total,accuracy\n";
  for (ClassId c = 0; c < vocab.size(); ++c) {
    out << vocab.name(c) << ',' << report.correct[c] << ',' << report.total[c] << ',';
    if (auto a = report.class_accuracy(c)) out << *a;
    out << '\n';
  }
}

void write_ral_csv(std::ostream& out, const ClassVocab& vocab, const std::vector<RalRow>& rows) {
  out << "target_class,context_class,acc_full,acc_masked,ral\n";
  for (const auto& r : rows) {
    out << vocab.name(r.target) << ',' << vocab.name(r.context) << ',' << r.acc_full << ','
        << r.acc_masked << ',';
    if (r.ral) out << *r.ral;
    out << '\n';
  }
}

}  // namespace ctxsel
