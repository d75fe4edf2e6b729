#include "ctxsel/rescoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "ctxsel/error.hpp"

namespace ctxsel {

namespace {

constexpr const char* kModelFormat = "ctxsel.rescore_model/1";

nlohmann::json threshold_json(double t) {
  return std::isinf(t) ? nlohmann::json(nullptr) : nlohmann::json(t);
}

double threshold_from_json(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

const char* side_name(Side side) { return side == Side::For ? "For" : "Against"; }

RescoreWeights::RescoreWeights(std::size_t num_classes)
    : num_classes_(num_classes), data_(size_for(num_classes), 0.0) {}

RescoreWeights RescoreWeights::initial(std::size_t num_classes) {
  RescoreWeights w(num_classes);
  w.w0() = 1.0;
  return w;
}

void RescoreWeights::project() {
  for (ClassId i = 0; i < num_classes_; ++i) {
    double& v = cue(ac, i);
    if (v < 0.0) v = 0.0;
  }
}

bool RescoreWeights::feasible() const {
  for (ClassId i = 0; i < num_classes_; ++i) {
    if (cue(ac, i) < 0.0) return false;
  }
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

nlohmann::json RescoreWeights::to_json() const { return data_; }

RescoreWeights RescoreWeights::from_json(const nlohmann::json& j, std::size_t num_classes) {
  RescoreWeights w(num_classes);
  auto values = j.get<std::vector<double>>();
  if (values.size() != w.size()) throw Error("parse", "weight vector has wrong length");
  w.data_ = std::move(values);
  return w;
}

RegionFeatures region_features(ClassId target_class, const Detection& target,
                               const Detection& context, const ContextStats& stats, double width,
                               double height) {
  const auto ll = stats.pair_log_likelihood(target_class, target.box, context.class_id,
                                            context.box, width, height);
  return {context.class_id, {ll.co, ll.sc, ll.spx, ll.spy, std::log(context.score)}};
}

FeaturizedSample featurize(const RescoreSample& sample, ClassId target_class,
                           const ContextStats& stats) {
  FeaturizedSample fs;
  fs.target_class = target_class;
  fs.log_target_score = std::log(sample.target.score);
  fs.label = sample.label.value_or(0);
  fs.regions.reserve(sample.contexts.size());
  for (const auto& ctx : sample.contexts) {
    fs.regions.push_back(
        region_features(target_class, sample.target, ctx, stats, sample.width, sample.height));
  }
  return fs;
}

double region_contribution(const RegionFeatures& region, const RescoreWeights& weights) {
  double c = 0.0;
  for (std::size_t k = 0; k < RescoreWeights::kNumCues; ++k) {
    c += weights.cue(static_cast<RescoreWeights::Cue>(k), region.context_class) * region.logs[k];
  }
  return c;
}

double region_contribution(ClassId target_class, const Detection& target, const Detection& context,
                           const RescoreWeights& weights, const ContextStats& stats, double width,
                           double height) {
  return region_contribution(region_features(target_class, target, context, stats, width, height),
                             weights);
}

ScoredSelection select_and_score(const FeaturizedSample& sample, const RescoreWeights& weights,
                                 Side side) {
  ScoredSelection out;
  out.trace.side = side;
  out.trace.indicators.resize(sample.regions.size());
  out.trace.contributions.resize(sample.regions.size());
  double score = weights.w0() * sample.log_target_score;
  for (std::size_t j = 0; j < sample.regions.size(); ++j) {
    const double c = region_contribution(sample.regions[j], weights);
    out.trace.contributions[j] = c;
    const bool on = c > 0.0;
    out.trace.indicators[j] = on;
    if (on) score += c;
  }
  out.score = score + weights.b();
  return out;
}

double score_with_indicators(const FeaturizedSample& sample, const RescoreWeights& weights,
                             const std::vector<bool>& indicators) {
  if (indicators.size() != sample.regions.size()) {
    throw Error("config", "indicator vector length does not match the context count");
  }
  double score = weights.w0() * sample.log_target_score;
  for (std::size_t j = 0; j < sample.regions.size(); ++j) {
    if (indicators[j]) score += region_contribution(sample.regions[j], weights);
  }
  return score + weights.b();
}

void accumulate_feature(const FeaturizedSample& sample, const std::vector<bool>& indicators,
                        double scale, std::span<double> out) {
  const std::size_t m = (out.size() - 2) / RescoreWeights::kNumCues;
  out[0] += scale * sample.log_target_score;
  for (std::size_t j = 0; j < sample.regions.size(); ++j) {
    if (!indicators[j]) continue;
    const auto& r = sample.regions[j];
    for (std::size_t k = 0; k < RescoreWeights::kNumCues; ++k) {
      out[1 + k * m + r.context_class] += scale * r.logs[k];
    }
  }
  out[out.size() - 1] += scale;
}

std::vector<double> feature_vector(const FeaturizedSample& sample,
                                   const std::vector<bool>& indicators, std::size_t num_classes) {
  if (indicators.size() != sample.regions.size()) {
    throw Error("config", "indicator vector length does not match the context count");
  }
  std::vector<double> phi(RescoreWeights::size_for(num_classes), 0.0);
  accumulate_feature(sample, indicators, 1.0, phi);
  return phi;
}

nlohmann::json RescoreModel::to_json() const {
  nlohmann::json j;
  j["format"] = kModelFormat;
  j["target_class"] = stats.vocab().name(target_class);
  j["precision"] = precision;
  j["oracle"] = oracle;
  nlohmann::json th = nlohmann::json::array();
  for (double t : thresholds) th.push_back(threshold_json(t));
  j["thresholds"] = std::move(th);
  j["for"] = for_weights.to_json();
  j["against"] = against_weights.to_json();
  j["select_all"] = select_all_weights ? select_all_weights->to_json() : nlohmann::json(nullptr);
  j["stats"] = stats.to_json();
  return j;
}

RescoreModel RescoreModel::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kModelFormat) {
      throw Error("parse", "unsupported rescore model format");
    }
    RescoreModel m;
    m.stats = ContextStats::from_json(j.at("stats"));
    const std::size_t nc = m.stats.num_classes();
    const auto name = j.at("target_class").get<std::string>();
    auto id = m.stats.vocab().find(name);
    if (!id) throw Error("unknown_class", "model target class '" + name + "' not in vocab");
    m.target_class = *id;
    m.precision = j.at("precision").get<double>();
    m.oracle = j.at("oracle").get<bool>();
    for (const auto& t : j.at("thresholds")) m.thresholds.push_back(threshold_from_json(t));
    if (m.thresholds.size() != nc) throw Error("parse", "threshold count does not match vocab");
    m.for_weights = RescoreWeights::from_json(j.at("for"), nc);
    m.against_weights = RescoreWeights::from_json(j.at("against"), nc);
    if (!j.at("select_all").is_null()) {
      m.select_all_weights = RescoreWeights::from_json(j.at("select_all"), nc);
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", std::string("rescore model: ") + e.what());
  }
}

void RescoreModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

RescoreModel RescoreModel::load(const std::filesystem::path& path) {
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

MarginResult margin_score(const RescoreModel& model, const FeaturizedSample& sample) {
  auto f = select_and_score(sample, model.for_weights, Side::For);
  auto a = select_and_score(sample, model.against_weights, Side::Against);
  MarginResult r;
  r.for_score = f.score;
  r.against_score = a.score;
  r.margin = f.score - a.score;
  r.for_trace = std::move(f.trace);
  r.against_trace = std::move(a.trace);
  return r;
}

MarginResult margin_score(const RescoreModel& model, const RescoreSample& sample) {
  return margin_score(model, featurize(sample, model.target_class, model.stats));
}

ContextPool threshold_pool(const std::vector<Scene>& scenes, std::span<const double> thresholds) {
  ContextPool pool(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    pool[s].resize(scenes[s].dets.size());
    for (std::size_t d = 0; d < scenes[s].dets.size(); ++d) {
      const auto& det = scenes[s].dets[d];
      pool[s][d] = det.score > thresholds[det.class_id];
    }
  }
  return pool;
}

ContextPool oracle_pool(const std::vector<Scene>& scenes) {
  ContextPool pool(scenes.size());
  for (std::size_t s = 0; s < scenes.size(); ++s) pool[s] = match_detections(scenes[s]);
  return pool;
}

std::vector<RescoreSample> build_samples(const std::vector<Scene>& scenes, ClassId target_class,
                                         const ContextPool& pool) {
  std::vector<RescoreSample> samples;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    const auto tp = match_detections(scene);
    for (std::size_t d = 0; d < scene.dets.size(); ++d) {
      if (scene.dets[d].class_id != target_class) continue;
      RescoreSample sample;
      sample.target = scene.dets[d];
      sample.width = scene.width;
      sample.height = scene.height;
      sample.label = tp[d] ? 1 : -1;
      sample.scene_index = s;
      sample.target_index = d;
      for (std::size_t c = 0; c < scene.dets.size(); ++c) {
        if (c == d || !pool[s][c]) continue;
        sample.contexts.push_back(scene.dets[c]);
        sample.context_indices.push_back(c);
      }
      samples.push_back(std::move(sample));
    }
  }
  return samples;
}

std::vector<RescoreSample> build_samples(const std::vector<Scene>& scenes, ClassId target_class,
                                         std::span<const double> thresholds) {
  return build_samples(scenes, target_class, threshold_pool(scenes, thresholds));
}

}  // namespace ctxsel
