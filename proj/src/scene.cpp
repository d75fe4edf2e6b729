#include "ctxsel/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ctxsel/error.hpp"
#include "json.hpp"

namespace ctxsel {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string at_line(std::size_t line_no) {
  return line_no > 0 ? "line " + std::to_string(line_no) + ": " : std::string();
}

BBox parse_bbox(const json& j, const Scene& scene, std::size_t line_no) {
  if (!j.is_array() || j.size() != 4) {
    throw Error("parse", at_line(line_no) + "bbox must be [x,y,w,h]");
  }
  BBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!std::isfinite(b.x) || !std::isfinite(b.y) || !std::isfinite(b.w) ||
      !std::isfinite(b.h)) {
    throw Error("invalid_box", at_line(line_no) + "non-finite bbox coordinate");
  }
  if (b.w <= 0.0 || b.h <= 0.0) {
    throw Error("invalid_box", at_line(line_no) + "non-positive box dimensions");
  }
  const double x0 = std::clamp(b.x, 0.0, static_cast<double>(scene.width));
  const double y0 = std::clamp(b.y, 0.0, static_cast<double>(scene.height));
  const double x1 = std::clamp(b.right(), 0.0, static_cast<double>(scene.width));
  const double y1 = std::clamp(b.bottom(), 0.0, static_cast<double>(scene.height));
  if (x1 <= x0 || y1 <= y0) {
    throw Error("invalid_box", at_line(line_no) + "box lies outside the image");
  }
  if (x0 != b.x || y0 != b.y || x1 != b.right() || y1 != b.bottom()) {
    b = BBox{x0, y0, x1 - x0, y1 - y0};
  }
  return b;
}

ClassId parse_class(const json& j, const ClassVocab& vocab, std::size_t line_no) {
  const auto name = j.at("class").get<std::string>();
  auto id = vocab.find(name);
  if (!id) {
    throw Error("unknown_class",
                at_line(line_no) + "unknown class '" + name + "'");
  }
  return *id;
}

ordered_json bbox_json(const BBox& b) { return ordered_json::array({b.x, b.y, b.w, b.h}); }

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

ClassVocab::ClassVocab(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.size() < 2) {
    throw Error("config", "class vocabulary needs at least 2 classes");
  }
  for (ClassId i = 0; i < names_.size(); ++i) {
    if (names_[i].empty()) throw Error("config", "empty class name in vocabulary");
    if (!index_.emplace(names_[i], i).second) {
      throw Error("config", "duplicate class name '" + names_[i] + "'");
    }
  }
}

std::optional<ClassId> ClassVocab::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

ClassVocab parse_vocab_list(std::string_view comma_separated) {
  std::vector<std::string> names;
  std::string current;
  for (char c : comma_separated) {
    if (c == ',') {
      names.push_back(current);
      current.clear();
    } else if (c != ' ') {
      current.push_back(c);
    }
  }
  if (!current.empty() || !names.empty()) names.push_back(current);
  return ClassVocab(std::move(names));
}

ClassVocab load_vocab_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open vocab file " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    names.push_back(line.substr(first, last - first + 1));
  }
  return ClassVocab(std::move(names));
}

Scene parse_scene(std::string_view line, const ClassVocab& vocab, std::size_t line_no,
                  const LoadOptions& options) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw Error("parse", at_line(line_no) + e.what());
  }
  Scene s;
  try {
    s.image_id = j.at("image_id").get<std::string>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    if (s.width <= 0 || s.height <= 0) {
      throw Error("parse", at_line(line_no) + "image dimensions must be positive");
    }
    for (const auto& g : j.value("gts", json::array())) {
      s.gts.push_back({parse_class(g, vocab, line_no), parse_bbox(g.at("bbox"), s, line_no)});
    }
    for (const auto& d : j.value("dets", json::array())) {
      Detection det;
      det.class_id = parse_class(d, vocab, line_no);
      det.score = d.at("score").get<double>();
      if (!std::isfinite(det.score)) {
        throw Error("parse", at_line(line_no) + "non-finite detection score");
      }
      if (options.clamp_scores) det.score = std::clamp(det.score, kMinScore, 1.0);
      det.box = parse_bbox(d.at("bbox"), s, line_no);
      s.dets.push_back(det);
    }
  } catch (const json::exception& e) {
    throw Error("parse", at_line(line_no) + e.what());
  }
  return s;
}

std::vector<Scene> read_dataset(std::istream& in, const ClassVocab& vocab,
                                const LoadOptions& options) {
  std::vector<Scene> scenes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    scenes.push_back(parse_scene(line, vocab, line_no, options));
  }
  return scenes;
}

std::vector<Scene> load_dataset(const std::filesystem::path& path, const ClassVocab& vocab,
                                const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open dataset " + path.string());
  return read_dataset(in, vocab, options);
}

std::string scene_to_json_line(const Scene& scene, const ClassVocab& vocab) {
  ordered_json j;
  j["image_id"] = scene.image_id;
  j["width"] = scene.width;
  j["height"] = scene.height;
  j["gts"] = ordered_json::array();
  for (const auto& g : scene.gts) {
    ordered_json o;
    o["class"] = vocab.name(g.class_id);
    o["bbox"] = bbox_json(g.box);
    j["gts"].push_back(std::move(o));
  }
  j["dets"] = ordered_json::array();
  for (const auto& d : scene.dets) {
    ordered_json o;
    o["class"] = vocab.name(d.class_id);
    o["score"] = d.score;
    o["bbox"] = bbox_json(d.box);
    j["dets"].push_back(std::move(o));
  }
  return j.dump();
}

void write_dataset(std::ostream& out, const std::vector<Scene>& scenes,
                   const ClassVocab& vocab) {
  for (const auto& s : scenes) out << scene_to_json_line(s, vocab) << '\n';
}

void save_dataset(const std::filesystem::path& path, const std::vector<Scene>& scenes,
                  const ClassVocab& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  write_dataset(out, scenes, vocab);
  if (!out) throw Error("io", "write failed for " + path.string());
}

std::vector<bool> match_detections(const Scene& scene, double iou_thresh) {
  std::vector<std::size_t> order(scene.dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scene.dets[a].score > scene.dets[b].score;
  });
  std::vector<bool> gt_used(scene.gts.size(), false);
  std::vector<bool> tp(scene.dets.size(), false);
  for (std::size_t di : order) {
    const auto& det = scene.dets[di];
    double best = -1.0;
    std::size_t best_gt = scene.gts.size();
    for (std::size_t gi = 0; gi < scene.gts.size(); ++gi) {
      if (gt_used[gi] || scene.gts[gi].class_id != det.class_id) continue;
      const double o = iou(det.box, scene.gts[gi].box);
      if (o >= iou_thresh && o > best) {
        best = o;
        best_gt = gi;
      }
    }
    if (best_gt < scene.gts.size()) {
      gt_used[best_gt] = true;
      tp[di] = true;
    }
  }
  return tp;
}

}  // namespace ctxsel
