// ctxsel: context statistics, pure-context study, For/Against re-scoring,
// evaluation and synthetic data from one executable.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "ctxsel/context_stats.hpp"
#include "ctxsel/error.hpp"
#include "ctxsel/evaluation.hpp"
#include "ctxsel/latent_svm.hpp"
#include "ctxsel/manifest.hpp"
#include "ctxsel/pure_context.hpp"
#include "ctxsel/rescoring.hpp"
#include "ctxsel/svg.hpp"
#include "ctxsel/synthetic.hpp"

namespace fs = std::filesystem;
using namespace ctxsel;
using ojson = nlohmann::ordered_json;

namespace {

std::size_t default_workers() {
  if (const char* env = std::getenv("CTXSEL_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw Error("usage", "CTXSEL_WORKERS must be a positive integer");
  }
  return 1;
}

ClassVocab resolve_vocab(const std::string& spec) {
  if (spec.empty()) throw Error("usage", "vocab is empty");
  if (fs::is_regular_file(spec)) return load_vocab_file(spec);
  return parse_vocab_list(spec);
}

std::vector<double> parse_doubles(const std::string& list) {
  std::vector<double> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw Error("usage", "not a number: '" + item + "'");
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

ojson read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io", "cannot open " + path.string());
  try {
    return ojson::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("parse", path.string() + ": " + e.what());
  }
}

// Optional config file; its keys are the long flag names without dashes.
// Values only fill options the user did not pass on the command line.
class ConfigFile {
 public:
  void load(const std::string& path) {
    if (path.empty()) return;
    data_ = read_json_file(path);
    if (!data_.is_object()) throw Error("config", "config file must hold a JSON object");
  }

  template <typename T>
  void fill(const CLI::App& app, const std::string& name, T& value) const {
    if (app.count("--" + name) > 0 || !data_.contains(name)) return;
    try {
      value = data_[name].get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw Error("config", "config key '" + name + "': " + e.what());
    }
  }

 private:
  ojson data_ = ojson::object();
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw Error("io", "cannot create directory " + dir.string());
}

template <typename Fn>
void write_text(const fs::path& path, Fn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io", "cannot write " + path.string());
  out.precision(10);
  fn(out);
  if (!out) throw Error("io", "write failed for " + path.string());
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' ? c : '_');
  return out;
}

ojson hist_json(const HistConfig& h) {
  return {{"n_scale_bins", h.n_scale_bins}, {"n_spatial_bins", h.n_spatial_bins},
          {"scale_lo", h.scale_lo},         {"scale_hi", h.scale_hi},
          {"laplace_alpha", h.laplace_alpha}};
}

ClassModels load_models(const std::string& where, std::size_t* num_classes, ClassVocab* vocab) {
  std::vector<fs::path> files;
  if (fs::is_directory(where)) {
    for (const auto& e : fs::directory_iterator(where)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && name.rfind("model_", 0) == 0 && e.path().extension() == ".json") {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
  } else {
    for (const auto& f : split(where)) files.emplace_back(f);
  }
  if (files.empty()) throw Error("missing_model", "no model files found in " + where);
  ClassModels models;
  for (const auto& f : files) {
    auto m = RescoreModel::load(f);
    if (models.empty()) {
      *vocab = m.stats.vocab();
      *num_classes = vocab->size();
      models.resize(*num_classes);
    } else if (!(m.stats.vocab() == *vocab)) {
      throw Error("config", f.string() + ": vocab differs from the other models");
    }
    if (models[m.target_class]) throw Error("config", "two models for class '" + vocab->name(m.target_class) + "'");
    models[m.target_class] = std::move(m);
  }
  return models;
}

struct Common {
  std::string out;
  std::string config;
  std::size_t workers = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-o,--out", c.out, "Output directory")->required();
  sub->add_option("--config", c.config, "JSON file with option defaults");
  sub->add_option("--workers", c.workers, "Worker threads (default: CTXSEL_WORKERS or 1)")
      ->check(CLI::PositiveNumber);
}

RunManifest start_manifest(const std::string& command, const std::vector<std::string>& argv,
                           const Common& c) {
  RunManifest m;
  m.command = command;
  m.argv = argv;
  m.set_config("workers", c.workers);
  ensure_dir(c.out);
  return m;
}

void finish(RunManifest& m, const fs::path& out_dir, const std::vector<fs::path>& outputs) {
  for (const auto& p : outputs) m.add_output(p);
  m.save(out_dir / "manifest.json");
}

// ---------------------------------------------------------------------------

struct FitStatsArgs {
  Common c;
  std::string train, vocab;
  HistConfig hist;
};

void run_fit_stats(const FitStatsArgs& a, const ConfigFile& cfg, const CLI::App& app,
                   const std::vector<std::string>& argv) {
  HistConfig h = a.hist;
  cfg.fill(app, "scale-bins", h.n_scale_bins);
  cfg.fill(app, "spatial-bins", h.n_spatial_bins);
  cfg.fill(app, "scale-lo", h.scale_lo);
  cfg.fill(app, "scale-hi", h.scale_hi);
  cfg.fill(app, "alpha", h.laplace_alpha);
  h.validate();
  const auto vocab = resolve_vocab(a.vocab);
  auto m = start_manifest("fit-stats", argv, a.c);
  m.set_config("hist", hist_json(h));
  m.set_config("vocab", vocab.names());
  m.add_input(a.train);
  const auto scenes = load_dataset(a.train, vocab);
  const auto stats = fit_stats(scenes, vocab, h, a.c.workers);
  const fs::path out = fs::path(a.c.out) / "stats.json";
  stats.save(out);
  finish(m, a.c.out, {out});
}

struct PureArgs {
  Common c;
  std::string train, test, stats, mask;
  bool ral = false;
  PureTrainConfig train_cfg;
};

void run_pure(PureArgs a, const ConfigFile& cfg, const CLI::App& app, const std::vector<std::string>& argv) {
  cfg.fill(app, "lambda", a.train_cfg.reg_lambda);
  cfg.fill(app, "epochs", a.train_cfg.epochs);
  cfg.fill(app, "seed", a.train_cfg.seed);
  a.train_cfg.workers = a.c.workers;
  if (!(a.train_cfg.reg_lambda > 0.0)) throw Error("config", "lambda must be positive");
  const auto stats = ContextStats::load(a.stats);
  const auto& vocab = stats.vocab();
  ClassMask mask;
  for (const auto& name : split(a.mask)) {
    auto id = vocab.find(name);
    if (!id) throw Error("unknown_class", "mask class '" + name + "' not in vocab");
    mask.excluded.insert(*id);
  }
  auto m = start_manifest("pure", argv, a.c);
  m.set_config("train", {{"reg_lambda", a.train_cfg.reg_lambda}, {"epochs", a.train_cfg.epochs}});
  m.set_config("mask", split(a.mask));
  m.set_config("ral", a.ral);
  m.seeds["train"] = a.train_cfg.seed;
  for (const auto& f : {a.train, a.test, a.stats}) m.add_input(f);

  const auto train = load_dataset(a.train, vocab);
  const auto test = load_dataset(a.test, vocab);
  const auto result = train_pure(train, stats, a.train_cfg);
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs = {dir / "pure_model.json", dir / "accuracy.csv", dir / "pure_report.json"};
  result.model.save(outputs[0]);
  const auto acc = accuracy(result.model, test, mask, a.c.workers);
  write_text(outputs[1], [&](std::ostream& o) { write_accuracy_csv(o, vocab, acc); });
  write_text(outputs[2], [&](std::ostream& o) {
    ojson j;
    j["initial_objective"] = result.initial_objective;
    j["objective_per_epoch"] = result.objective_per_epoch;
    j["mean_accuracy"] = acc.mean;
    o << j.dump(2) << '\n';
  });
  if (a.ral) {
    outputs.push_back(dir / "ral.csv");
    const auto rows = ral_table(result.model, test, a.c.workers);
    write_text(outputs.back(), [&](std::ostream& o) { write_ral_csv(o, vocab, rows); });
  }
  finish(m, dir, outputs);
}

struct TrainArgs {
  Common c;
  std::string train, stats, cls;
  double precision = 0.4;
  bool oracle = false;
  TrainConfig cfg;
};

void run_train(TrainArgs a, const ConfigFile& cfg, const CLI::App& app, const std::vector<std::string>& argv) {
  cfg.fill(app, "precision", a.precision);
  cfg.fill(app, "lambda", a.cfg.reg_lambda);
  cfg.fill(app, "outer-iters", a.cfg.outer_iters);
  cfg.fill(app, "inner-epochs", a.cfg.inner_epochs);
  cfg.fill(app, "tol", a.cfg.tol);
  cfg.fill(app, "seed", a.cfg.seed);
  a.cfg.workers = a.c.workers;
  a.cfg.validate();
  const auto stats = ContextStats::load(a.stats);
  const auto& vocab = stats.vocab();
  std::optional<ClassId> only;
  if (!a.cls.empty()) {
    only = vocab.find(a.cls);
    if (!only) throw Error("unknown_class", "class '" + a.cls + "' not in vocab");
  }
  auto m = start_manifest("train", argv, a.c);
  m.set_config("train", a.cfg.to_json());
  m.set_config("precision", a.precision);
  m.set_config("oracle", a.oracle);
  m.set_config("class", a.cls);
  m.seeds["train"] = a.cfg.seed;
  m.add_input(a.train);
  m.add_input(a.stats);

  const auto train = load_dataset(a.train, vocab);
  const auto thresholds = precision_thresholds(train, vocab.size(), a.precision);
  const auto trained = train_all_classes(train, stats, thresholds, a.precision, a.oracle, a.cfg, only);
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs;
  ojson reports = ojson::array();
  for (const auto& r : trained.reports) {
    const fs::path p = dir / ("model_" + safe_name(vocab.name(r.target_class)) + ".json");
    trained.models[r.target_class]->save(p);
    outputs.push_back(p);
    reports.push_back({{"class", vocab.name(r.target_class)},
                       {"for", r.for_report.to_json()},
                       {"against", r.against_report.to_json()},
                       {"select_all", r.select_all_report.to_json()}});
  }
  outputs.push_back(dir / "train_report.json");
  write_text(outputs.back(), [&](std::ostream& o) { o << reports.dump(2) << '\n'; });
  finish(m, dir, outputs);
}

struct RescoreArgs {
  Common c;
  std::string test, models, method = "CS", vocab;
  bool no_traces = false;
};

void run_rescore(RescoreArgs a, const ConfigFile& cfg, const CLI::App& app, const std::vector<std::string>& argv) {
  cfg.fill(app, "method", a.method);
  const Method method = parse_method(a.method);
  ClassVocab vocab;
  std::size_t m_classes = 0;
  ClassModels models;
  if (!a.models.empty()) {
    models = load_models(a.models, &m_classes, &vocab);
  } else if (method == Method::ST && !a.vocab.empty()) {
    vocab = resolve_vocab(a.vocab);
    models.resize(vocab.size());
  } else {
    throw Error("usage", "--models is required (ST also accepts --vocab)");
  }
  auto m = start_manifest("rescore", argv, a.c);
  m.set_config("method", a.method);
  m.add_input(a.test);
  if (fs::is_directory(a.models)) {
    for (std::size_t t = 0; t < models.size(); ++t) {
      if (models[t]) m.add_input(fs::path(a.models) / ("model_" + safe_name(vocab.name(t)) + ".json"));
    }
  } else {
    for (const auto& f : split(a.models)) m.add_input(f);
  }
  const auto test = load_dataset(a.test, vocab);
  const auto out = rescore(test, models, method, !a.no_traces, true, a.c.workers);
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs = {dir / "rescored.jsonl"};
  save_dataset(outputs[0], out.scenes, vocab);
  if (!a.no_traces) {
    outputs.push_back(dir / "traces.jsonl");
    write_text(outputs.back(), [&](std::ostream& o) {
      for (const auto& t : out.traces) o << trace_to_json_line(t, vocab) << '\n';
    });
  }
  finish(m, dir, outputs);
}

struct EvalArgs {
  Common c;
  std::string rescored, gt, vocab, label = "rescored";
  std::string train, test, stats, sweep, methods;
  double precision = 0.4;
  bool oracle = false;
  bool eleven_point = false;
  TrainConfig cfg;
};

void attach_gt(std::vector<Scene>& scenes, const std::vector<Scene>& gt) {
  std::map<std::string, const Scene*> by_id;
  for (const auto& s : gt) by_id[s.image_id] = &s;
  for (auto& s : scenes) {
    auto it = by_id.find(s.image_id);
    if (it == by_id.end()) throw Error("parse", "no ground truth for image '" + s.image_id + "'");
    s.gts = it->second->gts;
  }
}

void write_pr_svgs(const std::vector<Scene>& scenes, const ClassVocab& vocab, ApMode mode,
                   const std::string& label, const fs::path& dir, std::vector<fs::path>& outputs) {
  for (ClassId c = 0; c < vocab.size(); ++c) {
    const auto curve = class_pr_curve(scenes, c, mode);
    if (curve.num_gt == 0) continue;
    const fs::path p = dir / ("pr_" + safe_name(label) + "_" + safe_name(vocab.name(c)) + ".svg");
    write_text(p, [&](std::ostream& o) { o << pr_curves_svg({{label, curve}}, vocab.name(c)); });
    outputs.push_back(p);
  }
}

void run_eval(EvalArgs a, const ConfigFile& cfg, const CLI::App& app, const std::vector<std::string>& argv) {
  cfg.fill(app, "precision", a.precision);
  cfg.fill(app, "methods", a.methods);
  cfg.fill(app, "sweep", a.sweep);
  cfg.fill(app, "lambda", a.cfg.reg_lambda);
  cfg.fill(app, "outer-iters", a.cfg.outer_iters);
  cfg.fill(app, "inner-epochs", a.cfg.inner_epochs);
  cfg.fill(app, "tol", a.cfg.tol);
  cfg.fill(app, "seed", a.cfg.seed);
  a.cfg.workers = a.c.workers;
  a.cfg.validate();
  const ApMode mode = a.eleven_point ? ApMode::ElevenPoint : ApMode::AllPoint;
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs;

  if (!a.rescored.empty()) {
    if (!a.train.empty() || !a.sweep.empty()) throw Error("usage", "--rescored cannot be combined with --train / --sweep");
    const auto vocab = !a.vocab.empty() ? resolve_vocab(a.vocab)
                       : !a.stats.empty() ? ContextStats::load(a.stats).vocab()
                                          : throw Error("usage", "--rescored needs --vocab or --stats");
    auto m = start_manifest("eval", argv, a.c);
    m.set_config("ap_mode", a.eleven_point ? "11-point" : "all-point");
    m.set_config("label", a.label);
    m.add_input(a.rescored);
    auto scenes = load_dataset(a.rescored, vocab, LoadOptions{false});
    if (!a.gt.empty()) {
      m.add_input(a.gt);
      attach_gt(scenes, load_dataset(a.gt, vocab));
    }
    const std::vector<EvalReport> reports = {evaluate(scenes, vocab.size(), a.label, mode)};
    outputs.push_back(dir / "ap.csv");
    write_text(outputs.back(), [&](std::ostream& o) { write_ap_csv(o, vocab, reports); });
    outputs.push_back(dir / "report.json");
    write_text(outputs.back(), [&](std::ostream& o) { o << reports_to_json(vocab, reports).dump(2) << '\n'; });
    write_pr_svgs(scenes, vocab, mode, a.label, dir, outputs);
    finish(m, dir, outputs);
    return;
  }

  if (a.train.empty() || a.test.empty() || a.stats.empty()) {
    throw Error("usage", "eval needs --rescored, or --train, --test and --stats");
  }
  const auto stats = ContextStats::load(a.stats);
  const auto& vocab = stats.vocab();
  std::vector<Method> methods;
  const std::string default_methods = !a.sweep.empty() ? "SA,CS" : "ST,SA,FUB,AUB,CS";
  for (const auto& name : split(a.methods.empty() ? default_methods : a.methods)) {
    methods.push_back(parse_method(name));
  }
  if (a.oracle) {
    for (Method x : {Method::SA_O, Method::CS_O}) {
      if (std::find(methods.begin(), methods.end(), x) == methods.end()) methods.push_back(x);
    }
  }
  auto m = start_manifest("eval", argv, a.c);
  m.set_config("train", a.cfg.to_json());
  m.set_config("ap_mode", a.eleven_point ? "11-point" : "all-point");
  ojson method_names = ojson::array();
  for (Method x : methods) method_names.push_back(method_name(x));
  m.set_config("methods", method_names);
  m.seeds["train"] = a.cfg.seed;
  for (const auto& f : {a.train, a.test, a.stats}) m.add_input(f);
  const auto train = load_dataset(a.train, vocab);
  const auto test = load_dataset(a.test, vocab);
  ExperimentConfig ecfg;
  ecfg.precision = a.precision;
  ecfg.train = a.cfg;
  ecfg.ap_mode = mode;

  if (!a.sweep.empty()) {
    const auto ps = parse_doubles(a.sweep);
    for (double p : ps) {
      if (!(p > 0.0 && p < 1.0)) throw Error("usage", "sweep values must lie in (0, 1)");
    }
    m.set_config("sweep", ps);
    const auto rows = sweep_precision_threshold(train, test, stats, ps, methods, ecfg);
    outputs.push_back(dir / "sweep.csv");
    write_text(outputs.back(), [&](std::ostream& o) { write_sweep_csv(o, rows); });
    outputs.push_back(dir / "sweep.svg");
    write_text(outputs.back(), [&](std::ostream& o) { o << sweep_svg(rows); });
    finish(m, dir, outputs);
    return;
  }

  m.set_config("precision", a.precision);
  const auto result = run_experiment(train, test, stats, ecfg, methods);
  outputs.push_back(dir / "ap.csv");
  write_text(outputs.back(), [&](std::ostream& o) { write_ap_csv(o, vocab, result.reports); });
  outputs.push_back(dir / "report.json");
  write_text(outputs.back(), [&](std::ostream& o) {
    ojson j;
    j["precision"] = a.precision;
    ojson th = ojson::array();
    for (double t : result.thresholds) th.push_back(std::isinf(t) ? ojson(nullptr) : ojson(t));
    j["thresholds"] = th;
    j["reports"] = reports_to_json(vocab, result.reports);
    o << j.dump(2) << '\n';
  });
  const bool has_oracle = std::any_of(methods.begin(), methods.end(), is_oracle);
  if (has_oracle) {
    std::vector<SelectingRatioTable> tables;
    for (const auto& model : result.oracle_models.models) {
      if (model) tables.push_back(selecting_ratios(*model, test));
    }
    outputs.push_back(dir / "selecting_ratios.csv");
    write_text(outputs.back(), [&](std::ostream& o) { write_selecting_ratio_csv(o, vocab, tables); });
  }
  for (Method x : methods) {
    const auto& models = is_oracle(x) ? result.oracle_models.models : result.models.models;
    const auto scenes = x == Method::ST ? test : rescore(test, models, x, false, true, a.c.workers).scenes;
    write_pr_svgs(scenes, vocab, mode, method_name(x), dir, outputs);
  }
  finish(m, dir, outputs);
}

struct SynthArgs {
  Common c;
  std::string preset = "default", world, detector, detector_preset = "noisy";
  std::size_t n_train = 500, n_test = 200;
  std::uint64_t seed = 0;
};

void run_synth(SynthArgs a, const ConfigFile& cfg, const CLI::App& app, const std::vector<std::string>& argv) {
  cfg.fill(app, "n-train", a.n_train);
  cfg.fill(app, "n-test", a.n_test);
  cfg.fill(app, "preset", a.preset);
  cfg.fill(app, "detector-preset", a.detector_preset);
  WorldSpec world = a.world.empty() ? world_preset(a.preset) : WorldSpec::load(a.world);
  const std::size_t m_classes = world.num_classes();
  DetectorSpec det;
  if (!a.detector.empty()) {
    det = DetectorSpec::load(a.detector, m_classes);
  } else if (a.detector_preset == "noisy") {
    det = noisy_detector(m_classes);
  } else if (a.detector_preset == "perfect") {
    det = perfect_detector(m_classes);
  } else {
    throw Error("config", "unknown detector preset '" + a.detector_preset + "'");
  }
  // An explicit --seed wins over seeds stored in the spec files.
  if (app.count("--seed") > 0) {
    world.seed = a.seed;
    det.seed = a.seed;
  } else {
    std::uint64_t s = 0;
    cfg.fill(app, "seed", s);
    if (a.world.empty()) world.seed = s;
    if (a.detector.empty()) det.seed = s;
  }
  auto m = start_manifest("synth", argv, a.c);
  m.set_config("world", world.to_json());
  m.set_config("detector", det.to_json());
  m.set_config("n_train", a.n_train);
  m.set_config("n_test", a.n_test);
  m.seeds["world"] = world.seed;
  m.seeds["detector"] = det.seed;
  if (!a.world.empty()) m.add_input(a.world);
  if (!a.detector.empty()) m.add_input(a.detector);

  const auto train = simulate_detector(generate(world, a.n_train, 0, a.c.workers), world, det, a.c.workers);
  const auto test = simulate_detector(generate(world, a.n_test, a.n_train, a.c.workers), world, det, a.c.workers);
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs = {dir / "train.jsonl", dir / "test.jsonl", dir / "vocab.txt",
                                   dir / "world.json", dir / "detector.json"};
  save_dataset(outputs[0], train, world.vocab);
  save_dataset(outputs[1], test, world.vocab);
  write_text(outputs[2], [&](std::ostream& o) {
    for (const auto& n : world.vocab.names()) o << n << '\n';
  });
  write_text(outputs[3], [&](std::ostream& o) { o << world.to_json().dump(2) << '\n'; });
  write_text(outputs[4], [&](std::ostream& o) { o << det.to_json().dump(2) << '\n'; });
  finish(m, dir, outputs);
}

struct VizArgs {
  Common c;
  std::string scenes, traces, vocab;
};

void run_viz(const VizArgs& a, const std::vector<std::string>& argv) {
  const auto vocab = resolve_vocab(a.vocab);
  auto m = start_manifest("viz", argv, a.c);
  m.add_input(a.scenes);
  m.add_input(a.traces);
  const auto scenes = load_dataset(a.scenes, vocab, LoadOptions{false});
  const auto traces = load_traces(a.traces, vocab);
  std::map<std::string, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.image_id] = &s;
  const fs::path dir = a.c.out;
  std::vector<fs::path> outputs;
  for (std::size_t k = 0; k < traces.size(); ++k) {
    const auto& t = traces[k];
    auto it = by_id.find(t.image_id);
    if (it == by_id.end()) throw Error("parse", "trace " + std::to_string(k + 1) + ": unknown image '" + t.image_id + "'");
    char idx[16];
    std::snprintf(idx, sizeof idx, "%06zu", k);
    const fs::path p = dir / ("trace_" + std::string(idx) + "_" + safe_name(t.image_id) + "_" +
                              std::to_string(t.target_index) + "_" + side_name(t.side) + ".svg");
    write_text(p, [&](std::ostream& o) { o << trace_svg(t, it->second->width, it->second->height, vocab); });
    outputs.push_back(p);
  }
  finish(m, dir, outputs);
}

void print_error(const std::string& code, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  args[0] = "ctxsel";
  CLI::App app{"Context selection for object detection re-scoring"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::size_t workers = 1;
  try {
    workers = default_workers();
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return 2;
  }

  FitStatsArgs fsa;
  fsa.c.workers = workers;
  auto* fit = app.add_subcommand("fit-stats", "Fit co-occurrence / scale / spatial histograms");
  add_common(fit, fsa.c);
  fit->add_option("--train", fsa.train, "Training scenes (JSONL)")->required()->check(CLI::ExistingFile);
  fit->add_option("--vocab", fsa.vocab, "Comma-separated class names or a file with one per line")->required();
  fit->add_option("--scale-bins", fsa.hist.n_scale_bins);
  fit->add_option("--spatial-bins", fsa.hist.n_spatial_bins);
  fit->add_option("--scale-lo", fsa.hist.scale_lo);
  fit->add_option("--scale-hi", fsa.hist.scale_hi);
  fit->add_option("--alpha", fsa.hist.laplace_alpha, "Laplace smoothing pseudo-count");

  PureArgs pa;
  pa.c.workers = workers;
  auto* pure = app.add_subcommand("pure", "Train and test the pure-context label predictor");
  add_common(pure, pa.c);
  pure->add_option("--train", pa.train)->required()->check(CLI::ExistingFile);
  pure->add_option("--test", pa.test)->required()->check(CLI::ExistingFile);
  pure->add_option("--stats", pa.stats)->required()->check(CLI::ExistingFile);
  pure->add_flag("--ral", pa.ral, "Also write the relative accuracy loss table");
  pure->add_option("--mask", pa.mask, "Context classes to ignore at test time (comma-separated)");
  pure->add_option("--lambda", pa.train_cfg.reg_lambda);
  pure->add_option("--epochs", pa.train_cfg.epochs);
  pure->add_option("--seed", pa.train_cfg.seed);

  TrainArgs ta;
  ta.c.workers = workers;
  auto* train = app.add_subcommand("train", "Train For / Against / select-all re-scoring models");
  add_common(train, ta.c);
  train->add_option("--train", ta.train)->required()->check(CLI::ExistingFile);
  train->add_option("--stats", ta.stats)->required()->check(CLI::ExistingFile);
  train->add_option("--class", ta.cls, "Train only this target class");
  train->add_option("--precision", ta.precision, "Context precision threshold");
  train->add_flag("--oracle", ta.oracle, "Restrict contexts to true positives");
  train->add_option("--lambda", ta.cfg.reg_lambda);
  train->add_option("--outer-iters", ta.cfg.outer_iters);
  train->add_option("--inner-epochs", ta.cfg.inner_epochs);
  train->add_option("--tol", ta.cfg.tol);
  train->add_option("--seed", ta.cfg.seed);

  RescoreArgs ra;
  ra.c.workers = workers;
  auto* resc = app.add_subcommand("rescore", "Re-score detections with trained models");
  add_common(resc, ra.c);
  resc->add_option("--test", ra.test)->required()->check(CLI::ExistingFile);
  resc->add_option("--models", ra.models, "Directory of model_*.json files or a comma-separated list");
  resc->add_option("--method", ra.method, "ST, SA, FUB, AUB, CS, SA-O or CS-O");
  resc->add_option("--vocab", ra.vocab, "Class list, only needed for ST without models");
  resc->add_flag("--no-traces", ra.no_traces, "Skip the selection trace sidecar");

  EvalArgs ea;
  ea.c.workers = workers;
  auto* eval = app.add_subcommand("eval", "AP / mAP reports, method comparison and threshold sweeps");
  add_common(eval, ea.c);
  eval->add_option("--rescored", ea.rescored, "Re-scored scenes to evaluate")->check(CLI::ExistingFile);
  eval->add_option("--gt", ea.gt, "Ground truth scenes, matched by image_id")->check(CLI::ExistingFile);
  eval->add_option("--vocab", ea.vocab);
  eval->add_option("--label", ea.label, "Method label for a --rescored report");
  eval->add_option("--train", ea.train)->check(CLI::ExistingFile);
  eval->add_option("--test", ea.test)->check(CLI::ExistingFile);
  eval->add_option("--stats", ea.stats)->check(CLI::ExistingFile);
  eval->add_option("--methods", ea.methods, "Comma-separated methods");
  eval->add_option("--sweep", ea.sweep, "Comma-separated precision thresholds");
  eval->add_option("--precision", ea.precision);
  eval->add_flag("--oracle", ea.oracle, "Add SA-O and CS-O and write selecting ratios");
  eval->add_flag("--11point", ea.eleven_point, "11-point interpolated AP");
  eval->add_option("--lambda", ea.cfg.reg_lambda);
  eval->add_option("--outer-iters", ea.cfg.outer_iters);
  eval->add_option("--inner-epochs", ea.cfg.inner_epochs);
  eval->add_option("--tol", ea.cfg.tol);
  eval->add_option("--seed", ea.cfg.seed);

  SynthArgs sa;
  sa.c.workers = workers;
  auto* synth = app.add_subcommand("synth", "Generate synthetic scenes and detections");
  add_common(synth, sa.c);
  synth->add_option("--preset", sa.preset, "World preset: default or deterministic");
  synth->add_option("--world", sa.world, "World spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--detector", sa.detector, "Detector spec JSON")->check(CLI::ExistingFile);
  synth->add_option("--detector-preset", sa.detector_preset, "noisy or perfect");
  synth->add_option("--n-train", sa.n_train);
  synth->add_option("--n-test", sa.n_test);
  synth->add_option("--seed", sa.seed);

  VizArgs va;
  va.c.workers = workers;
  auto* viz = app.add_subcommand("viz", "Draw one SVG overlay per selection trace");
  add_common(viz, va.c);
  viz->add_option("--scenes", va.scenes)->required()->check(CLI::ExistingFile);
  viz->add_option("--traces", va.traces)->required()->check(CLI::ExistingFile);
  viz->add_option("--vocab", va.vocab)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what());
    return 2;
  }

  try {
    ConfigFile cfg;
    if (fit->parsed()) {
      cfg.load(fsa.c.config);
      run_fit_stats(fsa, cfg, *fit, args);
    } else if (pure->parsed()) {
      cfg.load(pa.c.config);
      run_pure(pa, cfg, *pure, args);
    } else if (train->parsed()) {
      cfg.load(ta.c.config);
      run_train(ta, cfg, *train, args);
    } else if (resc->parsed()) {
      cfg.load(ra.c.config);
      run_rescore(ra, cfg, *resc, args);
    } else if (eval->parsed()) {
      cfg.load(ea.c.config);
      run_eval(ea, cfg, *eval, args);
    } else if (synth->parsed()) {
      cfg.load(sa.c.config);
      run_synth(sa, cfg, *synth, args);
    } else if (viz->parsed()) {
      run_viz(va, args);
    }
  } catch (const Error& e) {
    print_error(e.code(), e.what());
    return e.code() == "usage" ? 2 : 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}
