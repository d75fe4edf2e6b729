#include "ctxsel/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

#include "ctxsel/error.hpp"
#include "ctxsel/parallel.hpp"

namespace ctxsel {

namespace {

constexpr std::array<Method, 7> kAllMethods = {Method::ST,  Method::SA,   Method::FUB, Method::AUB,
                                               Method::CS,  Method::SA_O, Method::CS_O};

nlohmann::ordered_json det_json(const Detection& d, const ClassVocab& vocab) {
  nlohmann::ordered_json j;
  j["class"] = vocab.name(d.class_id);
  j["score"] = d.score;
  j["bbox"] = {d.box.x, d.box.y, d.box.w, d.box.h};
  return j;
}

Detection det_from_json(const nlohmann::json& j, const ClassVocab& vocab, std::size_t line_no) {
  const auto name = j.at("class").get<std::string>();
  auto id = vocab.find(name);
  if (!id) {
    throw Error("unknown_class", "line " + std::to_string(line_no) + ": unknown class '" + name + "'");
  }
  const auto& b = j.at("bbox");
  return {*id, j.at("score").get<double>(),
          BBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
               b.at(3).get<double>()}};
}

TraceRecord make_trace(const Scene& scene, const RescoreSample& sample, const SelectionTrace& sel,
                       double score) {
  TraceRecord t;
  t.image_id = scene.image_id;
  t.scene_index = sample.scene_index;
  t.target_index = sample.target_index;
  t.target = sample.target;
  t.side = sel.side;
  t.score = score;
  for (std::size_t j = 0; j < sample.contexts.size(); ++j) {
    t.contexts.push_back({sample.contexts[j], sample.context_indices[j], sel.contributions[j],
                          static_cast<bool>(sel.indicators[j])});
  }
  return t;
}

}  // namespace

const char* method_name(Method m) {
  switch (m) {
    case Method::ST: return "ST";
    case Method::SA: return "SA";
    case Method::FUB: return "FUB";
    case Method::AUB: return "AUB";
    case Method::CS: return "CS";
    case Method::SA_O: return "SA-O";
    case Method::CS_O: return "CS-O";
  }
  return "?";
}

Method parse_method(std::string_view name) {
  for (Method m : kAllMethods) {
    if (name == method_name(m)) return m;
  }
  throw Error("config", "unknown method '" + std::string(name) + "'");
}

bool is_oracle(Method m) { return m == Method::SA_O || m == Method::CS_O; }

PrCurve average_precision(std::vector<ScoredMatch> detections, std::size_t num_gt, ApMode mode) {
  std::stable_sort(detections.begin(), detections.end(),
                   [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  PrCurve c;
  c.num_gt = num_gt;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < detections.size(); ++k) {
    c.scores.push_back(detections[k].score);
    c.is_tp.push_back(detections[k].is_tp);
    if (detections[k].is_tp) ++tp;
    c.precision.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    c.recall.push_back(num_gt > 0 ? static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0);
  }
  if (num_gt == 0 || detections.empty()) return c;

  // Precision envelope: best precision at any recall >= r.
  std::vector<double> envelope = c.precision;
  for (std::size_t k = envelope.size() - 1; k > 0; --k) {
    envelope[k - 1] = std::max(envelope[k - 1], envelope[k]);
  }
  if (mode == ApMode::AllPoint) {
    double prev_recall = 0.0;
    double ap = 0.0;
    for (std::size_t k = 0; k < envelope.size(); ++k) {
      if (c.recall[k] > prev_recall) {
        ap += (c.recall[k] - prev_recall) * envelope[k];
        prev_recall = c.recall[k];
      }
    }
    c.ap = ap;
  } else {
    double ap = 0.0;
    for (int step = 0; step <= 10; ++step) {
      const double r = step / 10.0;
      double best = 0.0;
      for (std::size_t k = 0; k < envelope.size(); ++k) {
        if (c.recall[k] >= r) {
          best = envelope[k];
          break;
        }
      }
      ap += best;
    }
    c.ap = ap / 11.0;
  }
  return c;
}

PrCurve class_pr_curve(const std::vector<Scene>& scenes, ClassId cls, ApMode mode,
                       double iou_thresh) {
  std::vector<ScoredMatch> dets;
  std::size_t num_gt = 0;
  for (const auto& scene : scenes) {
    for (const auto& g : scene.gts) {
      if (g.class_id == cls) ++num_gt;
    }
    const auto tp = match_detections(scene, iou_thresh);
    for (std::size_t d = 0; d < scene.dets.size(); ++d) {
      if (scene.dets[d].class_id == cls) dets.push_back({scene.dets[d].score, tp[d]});
    }
  }
  return average_precision(std::move(dets), num_gt, mode);
}

EvalReport evaluate(const std::vector<Scene>& scenes, std::size_t num_classes,
                    const std::string& method, ApMode mode) {
  EvalReport r;
  r.method = method;
  r.ap.resize(num_classes);
  double sum = 0.0;
  std::size_t counted = 0;
  for (ClassId c = 0; c < num_classes; ++c) {
    const auto curve = class_pr_curve(scenes, c, mode);
    if (curve.num_gt == 0) continue;
    r.ap[c] = curve.ap;
    sum += curve.ap;
    ++counted;
  }
  r.map = counted > 0 ? sum / static_cast<double>(counted) : 0.0;
  return r;
}

std::vector<double> precision_thresholds(const std::vector<Scene>& scenes,
                                         std::size_t num_classes, double p) {
  if (!(p > 0.0 && p < 1.0)) throw Error("config", "precision target must lie in (0, 1)");
  std::vector<std::vector<ScoredMatch>> per_class(num_classes);
  for (const auto& scene : scenes) {
    const auto tp = match_detections(scene);
    for (std::size_t d = 0; d < scene.dets.size(); ++d) {
      per_class.at(scene.dets[d].class_id).push_back({scene.dets[d].score, tp[d]});
    }
  }
  std::vector<double> cutoffs(num_classes, std::numeric_limits<double>::infinity());
  for (ClassId c = 0; c < num_classes; ++c) {
    auto& dets = per_class[c];
    std::stable_sort(dets.begin(), dets.end(),
                     [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
    std::size_t tp = 0;
    std::size_t best_k = 0;
    for (std::size_t k = 1; k <= dets.size(); ++k) {
      if (dets[k - 1].is_tp) ++tp;
      // Only prefixes ending at a score boundary are realizable with "score > cutoff".
      const bool boundary = k == dets.size() || dets[k].score < dets[k - 1].score;
      if (boundary && static_cast<double>(tp) >= p * static_cast<double>(k)) best_k = k;
    }
    if (best_k == 0) continue;
    cutoffs[c] = best_k == dets.size() ? 0.0 : dets[best_k].score;
  }
  return cutoffs;
}

RescoreOutput rescore(const std::vector<Scene>& scenes, const ClassModels& models, Method method,
                      bool with_traces, bool require_all, std::size_t workers) {
  RescoreOutput out;
  out.scenes = scenes;
  if (method == Method::ST) return out;

  std::optional<ContextPool> oracle;
  for (ClassId t = 0; t < models.size(); ++t) {
    if (!models[t]) {
      if (require_all) {
        throw Error("missing_model", std::string("no model for class index ") + std::to_string(t) +
                                         " (method " + method_name(method) + ")");
      }
      continue;
    }
    const RescoreModel& model = *models[t];
    if (model.oracle != is_oracle(method)) {
      throw Error("config", std::string("method ") + method_name(method) +
                                (model.oracle ? " cannot use an oracle-trained model"
                                              : " needs an oracle-trained model"));
    }
    const bool select_all = method == Method::SA || method == Method::SA_O;
    if (select_all && !model.select_all_weights) {
      throw Error("missing_model", "model for class '" + model.stats.vocab().name(t) +
                                       "' has no select-all weights");
    }
    ContextPool pool;
    if (model.oracle) {
      if (!oracle) oracle = oracle_pool(scenes);
      pool = *oracle;
    } else {
      pool = threshold_pool(scenes, model.thresholds);
    }
    const auto samples = build_samples(scenes, t, pool);
    std::vector<double> scores(samples.size());
    std::vector<std::vector<TraceRecord>> traces(samples.size());
    parallel_for(samples.size(), workers, [&](std::size_t k) {
      const auto fs = featurize(samples[k], t, model.stats);
      const Scene& scene = scenes[samples[k].scene_index];
      if (select_all) {
        const std::vector<bool> on(fs.regions.size(), true);
        scores[k] = score_with_indicators(fs, *model.select_all_weights, on);
        if (with_traces) {
          SelectionTrace sel{on, {}, Side::For};
          for (const auto& r : fs.regions) {
            sel.contributions.push_back(region_contribution(r, *model.select_all_weights));
          }
          traces[k].push_back(make_trace(scene, samples[k], sel, scores[k]));
        }
        return;
      }
      const auto m = margin_score(model, fs);
      switch (method) {
        case Method::FUB: scores[k] = m.for_score; break;
        case Method::AUB: scores[k] = -m.against_score; break;
        default: scores[k] = m.margin; break;
      }
      if (with_traces) {
        if (method != Method::AUB) {
          traces[k].push_back(make_trace(scene, samples[k], m.for_trace, m.for_score));
        }
        if (method != Method::FUB) {
          traces[k].push_back(make_trace(scene, samples[k], m.against_trace, m.against_score));
        }
      }
    });
    for (std::size_t k = 0; k < samples.size(); ++k) {
      out.scenes[samples[k].scene_index].dets[samples[k].target_index].score = scores[k];
      for (auto& tr : traces[k]) out.traces.push_back(std::move(tr));
    }
  }
  std::stable_sort(out.traces.begin(), out.traces.end(), [](const TraceRecord& a, const TraceRecord& b) {
    return std::tie(a.scene_index, a.target_index) < std::tie(b.scene_index, b.target_index);
  });
  return out;
}

EvalReport run_baseline(Method method, const ClassModels& models, const std::vector<Scene>& scenes,
                        ApMode mode, std::size_t workers) {
  const std::size_t m = models.size();
  auto rescored = rescore(scenes, models, method, false, true, workers);
  return evaluate(rescored.scenes, m, method_name(method), mode);
}

TrainedModels train_all_classes(const std::vector<Scene>& train, const ContextStats& stats,
                                std::span<const double> thresholds, double precision, bool oracle,
                                const TrainConfig& config, std::optional<ClassId> only) {
  const std::size_t m = stats.num_classes();
  TrainedModels out;
  out.models.resize(m);
  const ContextPool pool = oracle ? oracle_pool(train) : threshold_pool(train, thresholds);
  for (ClassId t = 0; t < m; ++t) {
    if (only && *only != t) continue;
    auto r = train_for_against(train, t, pool, stats, config);
    r.model.thresholds.assign(thresholds.begin(), thresholds.end());
    r.model.precision = precision;
    r.model.oracle = oracle;
    out.models[t] = std::move(r.model);
    out.reports.push_back({t, std::move(r.for_report), std::move(r.against_report),
                           std::move(r.select_all_report)});
  }
  return out;
}

const SelectingRatioRow& SelectingRatioTable::row(Side side, ClassId context) const {
  for (const auto& r : rows) {
    if (r.side == side && r.context_class == context) return r;
  }
  throw Error("config", "no selecting-ratio row for the requested class");
}

SelectingRatioTable selecting_ratios(const RescoreModel& model, const std::vector<Scene>& scenes) {
  const std::size_t m = model.stats.num_classes();
  SelectingRatioTable table;
  table.target_class = model.target_class;
  table.pool = model.oracle ? "oracle" : "threshold";
  for (Side side : {Side::For, Side::Against}) {
    for (ClassId i = 0; i < m; ++i) table.rows.push_back({model.target_class, i, side, 0, 0});
  }
  const ContextPool pool = model.oracle ? oracle_pool(scenes) : threshold_pool(scenes, model.thresholds);
  for (const auto& sample : build_samples(scenes, model.target_class, pool)) {
    const auto fs = featurize(sample, model.target_class, model.stats);
    const auto r = margin_score(model, fs);
    for (std::size_t j = 0; j < fs.regions.size(); ++j) {
      const ClassId i = fs.regions[j].context_class;
      auto& f = table.rows[i];
      auto& a = table.rows[m + i];
      ++f.total;
      ++a.total;
      if (r.for_trace.indicators[j]) ++f.selected;
      if (r.against_trace.indicators[j]) ++a.selected;
    }
  }
  return table;
}

ExperimentResult run_experiment(const std::vector<Scene>& train, const std::vector<Scene>& test,
                                const ContextStats& stats, const ExperimentConfig& config,
                                const std::vector<Method>& methods) {
  const std::size_t m = stats.num_classes();
  ExperimentResult out;
  out.thresholds = precision_thresholds(train, m, config.precision);
  const bool need_plain = std::any_of(methods.begin(), methods.end(), [](Method x) {
    return x != Method::ST && !is_oracle(x);
  });
  const bool need_oracle = std::any_of(methods.begin(), methods.end(), is_oracle);
  if (need_plain) {
    out.models = train_all_classes(train, stats, out.thresholds, config.precision, false, config.train);
  }
  if (need_oracle) {
    out.oracle_models = train_all_classes(train, stats, out.thresholds, config.precision, true, config.train);
  }
  for (Method method : methods) {
    if (method == Method::ST) {
      out.reports.push_back(evaluate(test, m, method_name(method), config.ap_mode));
    } else {
      const auto& models = is_oracle(method) ? out.oracle_models.models : out.models.models;
      out.reports.push_back(run_baseline(method, models, test, config.ap_mode, config.train.workers));
    }
  }
  return out;
}

std::vector<SweepRow> sweep_precision_threshold(const std::vector<Scene>& train,
                                                const std::vector<Scene>& test,
                                                const ContextStats& stats,
                                                const std::vector<double>& p_values,
                                                const std::vector<Method>& methods,
                                                const ExperimentConfig& config) {
  std::vector<SweepRow> rows;
  for (double p : p_values) {
    ExperimentConfig cfg = config;
    cfg.precision = p;
    const auto result = run_experiment(train, test, stats, cfg, methods);
    for (const auto& report : result.reports) rows.push_back({p, report.method, report.map});
  }
  return rows;
}

void write_ap_csv(std::ostream& out, const ClassVocab& vocab, const std::vector<EvalReport>& reports) {
  out << "method";
  for (const auto& name : vocab.names()) out << ',' << name;
  out << ",mAP\n";
  for (const auto& r : reports) {
    out << r.method;
    for (const auto& ap : r.ap) {
      out << ',';
      if (ap) out << *ap;
    }
    out << ',' << r.map << '\n';
  }
}

nlohmann::json reports_to_json(const ClassVocab& vocab, const std::vector<EvalReport>& reports) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json per_class = nlohmann::json::object();
    for (ClassId c = 0; c < r.ap.size(); ++c) {
      per_class[vocab.name(c)] = r.ap[c] ? nlohmann::json(*r.ap[c]) : nlohmann::json(nullptr);
    }
    arr.push_back({{"method", r.method}, {"ap", per_class}, {"mAP", r.map}});
  }
  return arr;
}

void write_selecting_ratio_csv(std::ostream& out, const ClassVocab& vocab,
                               const std::vector<SelectingRatioTable>& tables) {
  out << "target_class,context_class,side,selected,total,ratio,pool\n";
  for (const auto& t : tables) {
    for (const auto& r : t.rows) {
      out << vocab.name(r.target_class) << ',' << vocab.name(r.context_class) << ','
          << side_name(r.side) << ',' << r.selected << ',' << r.total << ',' << r.ratio() << ','
          << t.pool << '\n';
    }
  }
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "precision,method,mAP\n";
  for (const auto& r : rows) out << r.precision << ',' << r.method << ',' << r.map << '\n';
}

std::string trace_to_json_line(const TraceRecord& trace, const ClassVocab& vocab) {
  nlohmann::ordered_json j;
  j["image_id"] = trace.image_id;
  j["scene_index"] = trace.scene_index;
  j["target_index"] = trace.target_index;
  j["side"] = side_name(trace.side);
  j["score"] = trace.score;
  j["target"] = det_json(trace.target, vocab);
  j["contexts"] = nlohmann::ordered_json::array();
  for (const auto& c : trace.contexts) {
    auto o = det_json(c.det, vocab);
    o["index"] = c.det_index;
    o["contribution"] = c.contribution;
    o["selected"] = c.selected;
    j["contexts"].push_back(std::move(o));
  }
  return j.dump();
}

TraceRecord parse_trace(std::string_view line, const ClassVocab& vocab, std::size_t line_no) {
  try {
    const auto j = nlohmann::json::parse(line);
    TraceRecord t;
    t.image_id = j.at("image_id").get<std::string>();
    t.scene_index = j.at("scene_index").get<std::size_t>();
    t.target_index = j.at("target_index").get<std::size_t>();
    const auto side = j.at("side").get<std::string>();
    if (side != "For" && side != "Against") throw Error("parse", "bad trace side '" + side + "'");
    t.side = side == "For" ? Side::For : Side::Against;
    t.score = j.at("score").get<double>();
    t.target = det_from_json(j.at("target"), vocab, line_no);
    for (const auto& c : j.at("contexts")) {
      t.contexts.push_back({det_from_json(c, vocab, line_no), c.at("index").get<std::size_t>(),
                            c.at("contribution").get<double>(), c.at("selected").get<bool>()});
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", "line " + std::to_string(line_no) + ": " + e.what());
  }
}

std::vector<TraceRecord> load_traces(const std::filesystem::path& path, const ClassVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_trace(line, vocab, line_no));
  }
  return out;
}

}  // namespace ctxsel
