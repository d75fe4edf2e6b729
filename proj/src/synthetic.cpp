#include "ctxsel/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "ctxsel/error.hpp"
#include "ctxsel/parallel.hpp"
#include "ctxsel/random.hpp"

namespace ctxsel {

namespace {

constexpr const char* kWorldFormat = "ctxsel.world/1";
constexpr const char* kDetectorFormat = "ctxsel.detector/1";
constexpr int kPlacementTries = 100;

using Rng = std::mt19937_64;

nlohmann::json matrix_json(const std::vector<double>& flat, std::size_t m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < m; ++a) {
    rows.push_back(std::vector<double>(flat.begin() + a * m, flat.begin() + (a + 1) * m));
  }
  return rows;
}

nlohmann::json gaussians_json(const std::vector<Gaussian>& flat, std::size_t m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t a = 0; a < m; ++a) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t o = 0; o < m; ++o) row.push_back({flat[a * m + o].mu, flat[a * m + o].sigma});
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<double> matrix_from_json(const nlohmann::json& j, std::size_t m, const char* what) {
  if (j.size() != m) throw Error("config", std::string(what) + ": expected " + std::to_string(m) + " rows");
  std::vector<double> flat;
  for (const auto& row : j) {
    if (row.size() != m) throw Error("config", std::string(what) + ": row has wrong length");
    for (const auto& v : row) flat.push_back(v.get<double>());
  }
  return flat;
}

std::vector<Gaussian> gaussians_from_json(const nlohmann::json& j, std::size_t m, const char* what) {
  if (j.size() != m) throw Error("config", std::string(what) + ": expected " + std::to_string(m) + " rows");
  std::vector<Gaussian> flat;
  for (const auto& row : j) {
    if (row.size() != m) throw Error("config", std::string(what) + ": row has wrong length");
    for (const auto& v : row) flat.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
  }
  return flat;
}

std::vector<double> per_class(const nlohmann::json& j, std::size_t m, const char* what) {
  if (j.is_number()) return std::vector<double>(m, j.get<double>());
  auto v = j.get<std::vector<double>>();
  if (v.size() != m) throw Error("config", std::string(what) + ": expected " + std::to_string(m) + " values");
  return v;
}

double sample_beta(const BetaParams& p, Rng& rng) {
  const double x = std::gamma_distribution<double>(p.a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(p.b, 1.0)(rng);
  return x + y > 0.0 ? x / (x + y) : p.mean();
}

BBox clip_to_image(BBox b, int width, int height) {
  const double x0 = std::clamp(b.x, 0.0, static_cast<double>(width));
  const double y0 = std::clamp(b.y, 0.0, static_cast<double>(height));
  const double x1 = std::clamp(b.right(), 0.0, static_cast<double>(width));
  const double y1 = std::clamp(b.bottom(), 0.0, static_cast<double>(height));
  return {x0, y0, x1 - x0, y1 - y0};
}

bool inside(double cx, double cy, int width, int height) {
  return cx > 0.0 && cx < width && cy > 0.0 && cy < height;
}

// Box of the given size around a center, redrawing the center while it
// falls outside the image.
template <typename CenterFn>
BBox place(double w, double h, int width, int height, Rng& rng, CenterFn draw_center) {
  double cx = 0.0;
  double cy = 0.0;
  for (int k = 0; k < kPlacementTries; ++k) {
    std::tie(cx, cy) = draw_center(rng);
    if (inside(cx, cy, width, height)) break;
  }
  cx = std::clamp(cx, 0.5, width - 0.5);
  cy = std::clamp(cy, 0.5, height - 0.5);
  return clip_to_image({cx - 0.5 * w, cy - 0.5 * h, w, h}, width, height);
}

// Class multiset by pairwise acceptance. Empty when the draw got stuck
// below min_objects.
std::vector<ClassId> draw_classes(const WorldSpec& world, Rng& rng) {
  const std::size_t m = world.num_classes();
  const std::size_t k = std::uniform_int_distribution<std::size_t>(world.min_objects, world.max_objects)(rng);
  std::vector<ClassId> classes;
  std::vector<bool> present(m, false);
  std::vector<double> accept(m);
  while (classes.size() < k) {
    double total = 0.0;
    for (ClassId c = 0; c < m; ++c) {
      double a = 1.0;
      for (ClassId s = 0; s < m; ++s) {
        if (present[s]) a *= world.co(c, s);
      }
      accept[c] = a;
      total += a;
    }
    if (total <= 0.0) {
      if (classes.size() >= world.min_objects) break;
      return {};
    }
    const ClassId c = std::discrete_distribution<ClassId>(accept.begin(), accept.end())(rng);
    classes.push_back(c);
    present[c] = true;
  }
  return classes;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void WorldSpec::validate() const {
  const std::size_t m = num_classes();
  if (m < 2) throw Error("config", "world needs at least two classes");
  if (width <= 0 || height <= 0) throw Error("config", "world image size must be positive");
  if (cooccur.size() != m * m || scale.size() != m * m || offset_x.size() != m * m ||
      offset_y.size() != m * m || anchors.size() != m) {
    throw Error("config", "world tables do not match the class count");
  }
  for (ClassId a = 0; a < m; ++a) {
    for (ClassId b = 0; b < m; ++b) {
      const double p = co(a, b);
      if (!(p >= 0.0 && p <= 1.0)) throw Error("config", "co-occurrence values must lie in [0, 1]");
      if (p != co(b, a)) throw Error("config", "co-occurrence table must be symmetric");
      for (const Gaussian* g : {&scale_of(a, b), &dx_of(a, b), &dy_of(a, b)}) {
        if (!(g->sigma > 0.0) || !std::isfinite(g->mu)) throw Error("config", "Gaussian sigmas must be positive");
      }
    }
  }
  for (const auto& p : anchors) {
    if (!(p.w > 0.0 && p.h > 0.0) || p.pos_jitter < 0.0 || p.size_jitter < 0.0) {
      throw Error("config", "anchor priors need positive sizes and non-negative jitter");
    }
  }
  if (min_objects < 1 || min_objects > max_objects) throw Error("config", "objects_per_scene range is invalid");
  if (max_restarts < 1) throw Error("config", "max_restarts must be >= 1");
}

nlohmann::json WorldSpec::to_json() const {
  const std::size_t m = num_classes();
  nlohmann::ordered_json j;
  j["format"] = kWorldFormat;
  j["classes"] = vocab.names();
  j["width"] = width;
  j["height"] = height;
  j["objects_per_scene"] = {min_objects, max_objects};
  j["seed"] = seed;
  j["max_restarts"] = max_restarts;
  j["cooccur"] = matrix_json(cooccur, m);
  j["scale"] = gaussians_json(scale, m);
  j["offset_x"] = gaussians_json(offset_x, m);
  j["offset_y"] = gaussians_json(offset_y, m);
  nlohmann::json anchors_j = nlohmann::json::array();
  for (const auto& p : anchors) {
    anchors_j.push_back({{"cx", p.cx}, {"cy", p.cy}, {"w", p.w}, {"h", p.h},
                         {"pos_jitter", p.pos_jitter}, {"size_jitter", p.size_jitter}});
  }
  j["anchors"] = std::move(anchors_j);
  return j;
}

WorldSpec WorldSpec::from_json(const nlohmann::json& j) {
  try {
    if (j.value("format", std::string(kWorldFormat)) != kWorldFormat) {
      throw Error("config", "unsupported world format");
    }
    WorldSpec w;
    w.vocab = ClassVocab(j.at("classes").get<std::vector<std::string>>());
    const std::size_t m = w.num_classes();
    w.width = j.value("width", 64);
    w.height = j.value("height", 48);
    if (j.contains("objects_per_scene")) {
      w.min_objects = j["objects_per_scene"].at(0).get<std::size_t>();
      w.max_objects = j["objects_per_scene"].at(1).get<std::size_t>();
    }
    w.seed = j.value("seed", std::uint64_t{0});
    w.max_restarts = j.value("max_restarts", std::size_t{1000});
    w.cooccur = matrix_from_json(j.at("cooccur"), m, "cooccur");
    w.scale = gaussians_from_json(j.at("scale"), m, "scale");
    w.offset_x = gaussians_from_json(j.at("offset_x"), m, "offset_x");
    w.offset_y = gaussians_from_json(j.at("offset_y"), m, "offset_y");
    for (const auto& p : j.at("anchors")) {
      w.anchors.push_back({p.at("cx").get<double>(), p.at("cy").get<double>(), p.at("w").get<double>(),
                           p.at("h").get<double>(), p.value("pos_jitter", 0.0), p.value("size_jitter", 0.0)});
    }
    w.validate();
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config", std::string("world spec: ") + e.what());
  }
}

WorldSpec WorldSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("parse", path.string() + ": " + e.what());
  }
}

WorldSpec layout_world(const std::vector<LayoutClass>& classes, std::vector<double> cooccur,
                       int width, int height, std::size_t min_objects, std::size_t max_objects) {
  const std::size_t m = classes.size();
  std::vector<std::string> names;
  for (const auto& c : classes) names.push_back(c.name);
  WorldSpec w;
  w.vocab = ClassVocab(std::move(names));
  w.width = width;
  w.height = height;
  w.cooccur = std::move(cooccur);
  w.min_objects = min_objects;
  w.max_objects = max_objects;
  for (ClassId a = 0; a < m; ++a) {
    const BBox& ba = classes[a].box;
    for (ClassId o = 0; o < m; ++o) {
      const BBox& bo = classes[o].box;
      w.scale.push_back({0.5 * std::log(ba.area() / bo.area()), classes[o].scale_sigma});
      w.offset_x.push_back({(bo.cx() - ba.cx()) / width, classes[o].offset_sigma});
      w.offset_y.push_back({(bo.cy() - ba.cy()) / height, classes[o].offset_sigma});
    }
    w.anchors.push_back({ba.cx(), ba.cy(), ba.w, ba.h, 1.0, 0.05});
  }
  w.validate();
  return w;
}

WorldSpec default_world() {
  const std::vector<LayoutClass> classes = {
      {"bed", {10, 26, 24, 12}, 0.02, 0.05},
      {"pillow", {12, 22, 8, 4}, 0.02, 0.05},
      {"night_stand", {37, 27, 6, 6}, 0.02, 0.05},
      {"desk", {41, 9, 14, 6}, 0.02, 0.05},
      {"chair", {45, 17, 6, 8}, 0.02, 0.05},
      {"box", {29, 21, 6, 6}, 0.35, 0.4},
  };
  // bed pillow night_stand desk chair box
  std::vector<double> co = {
      0.0, 1.0, 0.8, 0.3, 0.3, 0.6,
      1.0, 0.0, 0.8, 0.2, 0.2, 0.6,
      0.8, 0.8, 0.0, 0.3, 0.3, 0.6,
      0.3, 0.2, 0.3, 0.0, 1.0, 0.6,
      0.3, 0.2, 0.3, 1.0, 0.0, 0.6,
      0.6, 0.6, 0.6, 0.6, 0.6, 0.0,
  };
  return layout_world(classes, std::move(co), 64, 48, 2, 5);
}

WorldSpec deterministic_world() {
  std::vector<LayoutClass> classes;
  const char* names[] = {"a0", "a1", "a2", "b0", "b1", "b2"};
  for (int k = 0; k < 6; ++k) {
    classes.push_back({names[k], {28.0, 1.0 + 8.0 * k, 8.0, 6.0}, 0.01, 0.05});
  }
  std::vector<double> co(36, 0.0);
  for (int a = 0; a < 6; ++a) {
    for (int b = 0; b < 6; ++b) {
      if (a != b && a / 3 == b / 3) co[a * 6 + b] = 1.0;
    }
  }
  return layout_world(classes, std::move(co), 64, 48, 2, 3);
}

WorldSpec world_preset(const std::string& name) {
  if (name == "default") return default_world();
  if (name == "deterministic") return deterministic_world();
  throw Error("config", "unknown world preset '" + name + "'");
}

void DetectorSpec::validate(std::size_t num_classes) const {
  if (tp_rate.size() != num_classes || fp_per_scene.size() != num_classes) {
    throw Error("config", "detector rates do not match the class count");
  }
  for (double r : tp_rate) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("config", "tp_rate must lie in [0, 1]");
  }
  for (double r : fp_per_scene) {
    if (!(r >= 0.0) || !std::isfinite(r)) throw Error("config", "fp_per_scene must be >= 0");
  }
  for (const BetaParams* p : {&tp_score, &fp_score}) {
    if (!(p->a > 0.0 && p->b > 0.0)) throw Error("config", "Beta parameters must be positive");
  }
  if (!(tp_score.mean() > 0.5)) throw Error("config", "tp_score Beta mean must exceed 0.5");
  if (!(fp_score.mean() < 0.5)) throw Error("config", "fp_score Beta mean must be below 0.5");
  if (!(localization_jitter >= 0.0)) throw Error("config", "localization_jitter must be >= 0");
}

nlohmann::json DetectorSpec::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = kDetectorFormat;
  j["tp_rate"] = tp_rate;
  j["fp_per_scene"] = fp_per_scene;
  j["tp_score_beta"] = {tp_score.a, tp_score.b};
  j["fp_score_beta"] = {fp_score.a, fp_score.b};
  j["localization_jitter"] = localization_jitter;
  j["seed"] = seed;
  return j;
}

DetectorSpec DetectorSpec::from_json(const nlohmann::json& j, std::size_t num_classes) {
  try {
    if (j.value("format", std::string(kDetectorFormat)) != kDetectorFormat) {
      throw Error("config", "unsupported detector format");
    }
    DetectorSpec d;
    d.tp_rate = per_class(j.at("tp_rate"), num_classes, "tp_rate");
    d.fp_per_scene = per_class(j.at("fp_per_scene"), num_classes, "fp_per_scene");
    if (j.contains("tp_score_beta")) d.tp_score = {j["tp_score_beta"].at(0), j["tp_score_beta"].at(1)};
    if (j.contains("fp_score_beta")) d.fp_score = {j["fp_score_beta"].at(0), j["fp_score_beta"].at(1)};
    d.localization_jitter = j.value("localization_jitter", 1.0);
    d.seed = j.value("seed", std::uint64_t{0});
    d.validate(num_classes);
    return d;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config", std::string("detector spec: ") + e.what());
  }
}

DetectorSpec DetectorSpec::load(const std::filesystem::path& path, std::size_t num_classes) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return from_json(nlohmann::json::parse(in), num_classes);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("parse", path.string() + ": " + e.what());
  }
}

DetectorSpec noisy_detector(std::size_t num_classes) {
  DetectorSpec d;
  d.tp_rate.assign(num_classes, 0.7);
  d.fp_per_scene.assign(num_classes, 3.0 / static_cast<double>(num_classes));
  return d;
}

DetectorSpec perfect_detector(std::size_t num_classes) {
  DetectorSpec d;
  d.tp_rate.assign(num_classes, 1.0);
  d.fp_per_scene.assign(num_classes, 0.0);
  d.localization_jitter = 0.0;
  return d;
}

Scene generate_scene(const WorldSpec& world, std::size_t index) {
  Rng rng(derive_seed(world.seed, {index}));
  std::vector<ClassId> classes;
  for (std::size_t attempt = 0; attempt <= world.max_restarts && classes.empty(); ++attempt) {
    classes = draw_classes(world, rng);
  }
  if (classes.empty()) {
    throw Error("infeasible", "scene " + std::to_string(index) + ": no draw reached " +
                                  std::to_string(world.min_objects) + " objects after " +
                                  std::to_string(world.max_restarts) + " restarts");
  }

  Scene scene;
  scene.image_id = "synth_" + std::to_string(index);
  scene.width = world.width;
  scene.height = world.height;
  const int W = world.width;
  const int H = world.height;
  std::normal_distribution<double> unit(0.0, 1.0);

  const std::size_t anchor_pos =
      static_cast<std::size_t>(std::min_element(classes.begin(), classes.end()) - classes.begin());
  const ClassId a = classes[anchor_pos];
  const AnchorPrior& pa = world.anchors[a];
  const double size_factor = std::exp(pa.size_jitter * unit(rng));
  const double aw = pa.w * size_factor;
  const double ah = pa.h * size_factor;
  double acx = 0.0;
  double acy = 0.0;
  const BBox anchor_box = place(aw, ah, W, H, rng, [&](Rng& r) {
    acx = pa.cx + pa.pos_jitter * unit(r);
    acy = pa.cy + pa.pos_jitter * unit(r);
    return std::pair{acx, acy};
  });
  acx = anchor_box.cx();
  acy = anchor_box.cy();
  // Object sizes follow from the anchor's unclipped size.
  const double anchor_size = std::sqrt(aw * ah);

  scene.gts.resize(classes.size());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const ClassId o = classes[k];
    if (k == anchor_pos) {
      scene.gts[k] = {o, anchor_box};
      continue;
    }
    const Gaussian& gs = world.scale_of(a, o);
    const double size = anchor_size * std::exp(-(gs.mu + gs.sigma * unit(rng)));
    const double aspect = world.anchors[o].h / world.anchors[o].w;
    const double w = size / std::sqrt(aspect);
    const double h = size * std::sqrt(aspect);
    const Gaussian& gx = world.dx_of(a, o);
    const Gaussian& gy = world.dy_of(a, o);
    scene.gts[k] = {o, place(w, h, W, H, rng, [&](Rng& r) {
                      const double cx = acx + W * (gx.mu + gx.sigma * unit(r));
                      const double cy = acy + H * (gy.mu + gy.sigma * unit(r));
                      return std::pair{cx, cy};
                    })};
  }
  return scene;
}

std::vector<Scene> generate(const WorldSpec& world, std::size_t n, std::size_t first_index,
                            std::size_t workers) {
  world.validate();
  std::vector<Scene> scenes(n);
  parallel_for(n, workers, [&](std::size_t i) { scenes[i] = generate_scene(world, first_index + i); });
  return scenes;
}

std::vector<Scene> simulate_detector(std::vector<Scene> scenes, const WorldSpec& world,
                                     const DetectorSpec& spec, std::size_t workers) {
  const std::size_t m = world.num_classes();
  spec.validate(m);
  parallel_for(scenes.size(), workers, [&](std::size_t s) {
    Scene& scene = scenes[s];
    Rng rng(derive_seed(spec.seed, {fnv1a(scene.image_id)}));
    std::normal_distribution<double> unit(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto clamp_score = [](double v) { return std::clamp(v, kMinScore, 1.0); };
    scene.dets.clear();
    for (const auto& g : scene.gts) {
      if (u01(rng) >= spec.tp_rate[g.class_id]) continue;
      const double j = spec.localization_jitter;
      BBox b = g.box;
      b.x += j * unit(rng);
      b.y += j * unit(rng);
      b.w = std::max(1.0, b.w + j * unit(rng));
      b.h = std::max(1.0, b.h + j * unit(rng));
      b = place(b.w, b.h, scene.width, scene.height, rng,
                [&](Rng&) { return std::pair{b.cx(), b.cy()}; });
      scene.dets.push_back({g.class_id, clamp_score(sample_beta(spec.tp_score, rng)), b});
    }
    for (ClassId c = 0; c < m; ++c) {
      if (spec.fp_per_scene[c] <= 0.0) continue;
      const int count = std::poisson_distribution<int>(spec.fp_per_scene[c])(rng);
      const AnchorPrior& prior = world.anchors[c];
      for (int k = 0; k < count; ++k) {
        const double f = std::exp(0.2 * unit(rng));
        // A false positive must not land on a same-class object, or it would
        // count as a hit.
        BBox b;
        for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
          b = place(prior.w * f, prior.h * f, scene.width, scene.height, rng, [&](Rng& r) {
            return std::pair{u01(r) * scene.width, u01(r) * scene.height};
          });
          const bool hits = std::any_of(scene.gts.begin(), scene.gts.end(), [&](const GtObject& g) {
            return g.class_id == c && iou(g.box, b) >= 0.5;
          });
          if (!hits) break;
        }
        scene.dets.push_back({c, clamp_score(sample_beta(spec.fp_score, rng)), b});
      }
    }
  });
  return scenes;
}

}  // namespace ctxsel
