#include "ctxsel/context_stats.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ctxsel/error.hpp"
#include "ctxsel/parallel.hpp"

namespace ctxsel {

namespace {

constexpr const char* kStatsFormat = "ctxsel.context_stats/1";

constexpr std::array<LikelihoodKind, kNumLikelihoodKinds> kAllKinds = {
    LikelihoodKind::co, LikelihoodKind::sc, LikelihoodKind::spx, LikelihoodKind::spy};

const char* kind_name(LikelihoodKind kind) {
  switch (kind) {
    case LikelihoodKind::co: return "co";
    case LikelihoodKind::sc: return "sc";
    case LikelihoodKind::spx: return "spx";
    case LikelihoodKind::spy: return "spy";
  }
  return "?";
}

}  // namespace

void HistConfig::validate() const {
  if (n_scale_bins < 2) throw Error("config", "n_scale_bins must be >= 2");
  if (n_spatial_bins < 2) throw Error("config", "n_spatial_bins must be >= 2");
  if (!(scale_lo < scale_hi)) throw Error("config", "scale_log_range needs lo < hi");
  if (!(laplace_alpha >= 0.0) || !std::isfinite(laplace_alpha)) {
    throw Error("config", "laplace_alpha must be >= 0");
  }
}

std::size_t bin_index(double value, double range_lo, double range_hi, std::size_t n_bins) {
  if (!(value > range_lo)) return 0;
  if (value >= range_hi) return n_bins - 1;
  const double n = static_cast<double>(n_bins);
  const auto edge = [&](std::size_t k) {
    return range_lo + (range_hi - range_lo) * static_cast<double>(k) / n;
  };
  const double t = (value - range_lo) / (range_hi - range_lo);
  auto b = std::min(static_cast<std::size_t>(std::floor(t * n)), n_bins - 1);
  // The division can land one ulp on the wrong side of an edge.
  if (b + 1 < n_bins && value >= edge(b + 1)) ++b;
  if (b > 0 && value < edge(b)) --b;
  return b;
}

double scale_ratio(const BBox& target, const BBox& context, const HistConfig& cfg) {
  const double r = 0.5 * std::log(target.area() / context.area());
  return std::clamp(r, cfg.scale_lo, cfg.scale_hi);
}

Offset spatial_offsets(const BBox& target, const BBox& context, double width, double height) {
  return {std::clamp((context.cx() - target.cx()) / width, -1.0, 1.0),
          std::clamp((context.cy() - target.cy()) / height, -1.0, 1.0)};
}

ContextStats::ContextStats(ClassVocab vocab, HistConfig config)
    : vocab_(std::move(vocab)), config_(config) {
  config_.validate();
  const std::size_t pairs = num_classes() * num_classes();
  for (auto kind : kAllKinds) table(kind).assign(pairs * num_bins(kind), 0.0);
}

std::size_t ContextStats::num_bins(LikelihoodKind kind) const {
  switch (kind) {
    case LikelihoodKind::co: return 2;
    case LikelihoodKind::sc: return config_.n_scale_bins;
    case LikelihoodKind::spx:
    case LikelihoodKind::spy: return config_.n_spatial_bins;
  }
  return 0;
}

std::span<const double> ContextStats::histogram(LikelihoodKind kind, ClassId target,
                                                ClassId context) const {
  const auto& t = table(kind);
  return std::span<const double>(t).subspan(offset(kind, target, context), num_bins(kind));
}

double ContextStats::lookup(LikelihoodKind kind, ClassId target, ClassId context,
                            double value) const {
  const auto hist = histogram(kind, target, context);
  switch (kind) {
    case LikelihoodKind::co: return hist[value != 0.0 ? 1 : 0];
    case LikelihoodKind::sc:
      return hist[bin_index(value, config_.scale_lo, config_.scale_hi, hist.size())];
    case LikelihoodKind::spx:
    case LikelihoodKind::spy: return hist[bin_index(value, -1.0, 1.0, hist.size())];
  }
  return 0.0;
}

PairLogLikelihood ContextStats::pair_log_likelihood(ClassId target_class, const BBox& target,
                                                    ClassId context_class, const BBox& context,
                                                    double width, double height) const {
  const double r = scale_ratio(target, context, config_);
  const Offset off = spatial_offsets(target, context, width, height);
  return {std::log(lookup(LikelihoodKind::co, target_class, context_class, 1.0)),
          std::log(lookup(LikelihoodKind::sc, target_class, context_class, r)),
          std::log(lookup(LikelihoodKind::spx, target_class, context_class, off.x)),
          std::log(lookup(LikelihoodKind::spy, target_class, context_class, off.y))};
}

nlohmann::json ContextStats::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = kStatsFormat;
  j["vocab"] = vocab_.names();
  j["config"] = {{"n_scale_bins", config_.n_scale_bins},
                 {"n_spatial_bins", config_.n_spatial_bins},
                 {"scale_log_range", {config_.scale_lo, config_.scale_hi}},
                 {"laplace_alpha", config_.laplace_alpha}};
  j["num_images"] = num_images_;
  for (auto kind : kAllKinds) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (ClassId t = 0; t < num_classes(); ++t) {
      nlohmann::ordered_json row = nlohmann::ordered_json::array();
      for (ClassId i = 0; i < num_classes(); ++i) {
        const auto h = histogram(kind, t, i);
        row.push_back(std::vector<double>(h.begin(), h.end()));
      }
      rows.push_back(std::move(row));
    }
    j[kind_name(kind)] = std::move(rows);
  }
  // Round-trip through the plain json type so callers can embed it anywhere.
  return nlohmann::json::parse(j.dump());
}

ContextStats ContextStats::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kStatsFormat) {
      throw Error("parse", "unsupported context stats format '" +
                               j.at("format").get<std::string>() + "'");
    }
    HistConfig cfg;
    const auto& c = j.at("config");
    cfg.n_scale_bins = c.at("n_scale_bins").get<std::size_t>();
    cfg.n_spatial_bins = c.at("n_spatial_bins").get<std::size_t>();
    cfg.scale_lo = c.at("scale_log_range").at(0).get<double>();
    cfg.scale_hi = c.at("scale_log_range").at(1).get<double>();
    cfg.laplace_alpha = c.at("laplace_alpha").get<double>();
    ContextStats stats(ClassVocab(j.at("vocab").get<std::vector<std::string>>()), cfg);
    stats.num_images_ = j.at("num_images").get<std::size_t>();
    const std::size_t m = stats.num_classes();
    for (auto kind : kAllKinds) {
      const auto& rows = j.at(kind_name(kind));
      if (rows.size() != m) throw Error("parse", std::string("bad table size for ") + kind_name(kind));
      auto& table = stats.table(kind);
      for (ClassId t = 0; t < m; ++t) {
        if (rows[t].size() != m) throw Error("parse", "bad table row size");
        for (ClassId i = 0; i < m; ++i) {
          const auto values = rows[t][i].get<std::vector<double>>();
          if (values.size() != stats.num_bins(kind)) throw Error("parse", "bad histogram size");
          std::copy(values.begin(), values.end(),
                    table.begin() + static_cast<std::ptrdiff_t>(stats.offset(kind, t, i)));
        }
      }
    }
    return stats;
  } catch (const nlohmann::json::exception& e) {
    throw Error("parse", std::string("context stats: ") + e.what());
  }
}

void ContextStats::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out << to_json().dump(1) << '\n';
}

ContextStats ContextStats::load(const std::filesystem::path& path) {
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

StatsAccumulator::StatsAccumulator(ClassVocab vocab, HistConfig config)
    : counts_(std::move(vocab), config) {}

void StatsAccumulator::add(const Scene& scene) {
  const std::size_t m = counts_.num_classes();
  const HistConfig& cfg = counts_.config();
  ++counts_.num_images_;

  std::vector<std::size_t> per_class(m, 0);
  for (const auto& g : scene.gts) ++per_class.at(g.class_id);

  // Image-level co-occurrence. For T == i the context must be a second
  // instance, since the target itself is not its own context.
  auto& co = counts_.table(LikelihoodKind::co);
  for (ClassId t = 0; t < m; ++t) {
    if (per_class[t] == 0) continue;
    for (ClassId i = 0; i < m; ++i) {
      const bool present = (i == t) ? per_class[i] >= 2 : per_class[i] >= 1;
      co[counts_.offset(LikelihoodKind::co, t, i) + (present ? 1 : 0)] += 1.0;
    }
  }

  auto& sc = counts_.table(LikelihoodKind::sc);
  auto& spx = counts_.table(LikelihoodKind::spx);
  auto& spy = counts_.table(LikelihoodKind::spy);
  for (std::size_t a = 0; a < scene.gts.size(); ++a) {
    for (std::size_t b = 0; b < scene.gts.size(); ++b) {
      if (a == b) continue;
      const auto& tgt = scene.gts[a];
      const auto& ctx = scene.gts[b];
      const double r = scale_ratio(tgt.box, ctx.box, cfg);
      const Offset off = spatial_offsets(tgt.box, ctx.box, scene.width, scene.height);
      sc[counts_.offset(LikelihoodKind::sc, tgt.class_id, ctx.class_id) +
         bin_index(r, cfg.scale_lo, cfg.scale_hi, cfg.n_scale_bins)] += 1.0;
      spx[counts_.offset(LikelihoodKind::spx, tgt.class_id, ctx.class_id) +
          bin_index(off.x, -1.0, 1.0, cfg.n_spatial_bins)] += 1.0;
      spy[counts_.offset(LikelihoodKind::spy, tgt.class_id, ctx.class_id) +
          bin_index(off.y, -1.0, 1.0, cfg.n_spatial_bins)] += 1.0;
    }
  }
}

void StatsAccumulator::merge(const StatsAccumulator& other) {
  if (!(other.counts_.vocab() == counts_.vocab()) || !(other.counts_.config() == counts_.config())) {
    throw Error("config", "cannot merge accumulators with different vocab or config");
  }
  counts_.num_images_ += other.counts_.num_images_;
  for (auto kind : kAllKinds) {
    auto& dst = counts_.table(kind);
    const auto& src = other.counts_.table(kind);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
}

std::span<const double> StatsAccumulator::counts(LikelihoodKind kind, ClassId target,
                                                 ClassId context) const {
  return counts_.histogram(kind, target, context);
}

ContextStats StatsAccumulator::finalize() const {
  ContextStats out = counts_;
  const double alpha = out.config().laplace_alpha;
  for (auto kind : kAllKinds) {
    const std::size_t n = out.num_bins(kind);
    auto& table = out.table(kind);
    for (std::size_t start = 0; start < table.size(); start += n) {
      double total = 0.0;
      for (std::size_t b = 0; b < n; ++b) total += table[start + b] + alpha;
      for (std::size_t b = 0; b < n; ++b) {
        table[start + b] = total > 0.0 ? (table[start + b] + alpha) / total
                                       : 1.0 / static_cast<double>(n);
      }
    }
  }
  return out;
}

ContextStats fit_stats(const std::vector<Scene>& scenes, const ClassVocab& vocab,
                       const HistConfig& config, std::size_t workers) {
  if (scenes.empty()) throw Error("empty_dataset", "cannot fit context statistics on zero scenes");
  workers = std::max<std::size_t>(1, std::min(workers, scenes.size()));
  std::vector<StatsAccumulator> partial(workers, StatsAccumulator(vocab, config));
  const std::size_t chunk = (scenes.size() + workers - 1) / workers;
  parallel_for(workers, workers, [&](std::size_t w) {
    const std::size_t end = std::min(scenes.size(), (w + 1) * chunk);
    for (std::size_t k = w * chunk; k < end; ++k) partial[w].add(scenes[k]);
  });
  for (std::size_t w = 1; w < workers; ++w) partial[0].merge(partial[w]);
  return partial[0].finalize();
}

}  // namespace ctxsel
