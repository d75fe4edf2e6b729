// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <sys/wait.h>

#include "ctxsel/context_stats.hpp"
#include "ctxsel/evaluation.hpp"
#include "ctxsel/latent_svm.hpp"
#include "ctxsel/pure_context.hpp"
#include "ctxsel/rescoring.hpp"
#include "ctxsel/synthetic.hpp"

using namespace ctxsel;
namespace fs = std::filesystem;

namespace {

constexpr int kSeeds = 10;

std::size_t workers() { return std::max(1u, std::thread::hardware_concurrency()); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// Noisy-detector world for one seed.
struct SeedData {
  WorldSpec world;
  std::vector<Scene> train;
  std::vector<Scene> test;
  ContextStats stats;
};

SeedData noisy_data(int seed) {
  SeedData d;
  d.world = default_world();
  d.world.seed = static_cast<std::uint64_t>(seed);
  auto det = noisy_detector(d.world.num_classes());
  det.seed = static_cast<std::uint64_t>(seed);
  d.train = simulate_detector(generate(d.world, 500, 0, workers()), d.world, det, workers());
  d.test = simulate_detector(generate(d.world, 200, 500, workers()), d.world, det, workers());
  d.stats = fit_stats(d.train, d.world.vocab, {}, workers());
  return d;
}

ExperimentConfig experiment_config(int seed) {
  ExperimentConfig cfg;
  cfg.precision = 0.4;
  cfg.train.seed = static_cast<std::uint64_t>(seed);
  cfg.train.workers = workers();
  return cfg;
}

// ---------------------------------------------------------------------------

Outcome selection_oracle() {
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  const std::size_t m = 4;
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 12)(rng);
    FeaturizedSample s;
    s.target_class = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
    s.log_target_score = std::log(std::uniform_real_distribution<double>(0.01, 1.0)(rng));
    for (std::size_t j = 0; j < n; ++j) {
      RegionFeatures r;
      r.context_class = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
      for (auto& v : r.logs) v = -std::abs(u(rng)) * 3.0;
      s.regions.push_back(r);
    }
    RescoreWeights w(m);
    for (auto& v : w.data()) v = u(rng);
    w.project();

    double best = -INFINITY;
    std::vector<bool> best_l;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
      std::vector<bool> l(n);
      for (std::size_t j = 0; j < n; ++j) l[j] = (mask >> j) & 1u;
      const double v = score_with_indicators(s, w, l);
      if (v > best) {
        best = v;
        best_l = l;
      }
    }
    const auto got = select_and_score(s, w);
    if (std::abs(got.score - best) > 1e-12 || got.trace.indicators != best_l) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu/1000 mismatches", mismatches)};
}

Outcome monotonicity() {
  std::size_t violations = 0;
  std::size_t runs = 0;
  double worst = 0.0;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto d = noisy_data(seed);
    const auto th = precision_thresholds(d.train, d.world.num_classes(), 0.4);
    TrainConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.workers = workers();
    for (ClassId c = 0; c < d.world.num_classes(); ++c) {
      const auto samples = featurize_all(build_samples(d.train, c, th), c, d.stats, workers());
      for (const auto& set : {samples, flip_labels(samples)}) {
        const auto r = train_latent(set, d.world.num_classes(), cfg).report;
        ++runs;
        double prev = r.initial_objective;
        for (double v : r.objective_per_outer_iter) {
          const double rise = (v - prev) / std::max(std::abs(prev), 1e-300);
          worst = std::max(worst, rise);
          if (rise > 1e-6) ++violations;
          prev = v;
        }
      }
    }
  }
  return {violations == 0, fmt("%zu violations over %zu runs, worst relative rise %.3g", violations, runs, worst)};
}

Outcome planted_recovery() {
  int good = 0;
  std::string accs;
  for (int seed = 0; seed < kSeeds; ++seed) {
    auto w = deterministic_world();
    w.seed = static_cast<std::uint64_t>(seed);
    const auto train = generate(w, 500, 0, workers());
    const auto test = generate(w, 200, 500, workers());
    const auto stats = fit_stats(train, w.vocab, {}, workers());
    PureTrainConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.workers = workers();
    const double acc = accuracy(train_pure(train, stats, cfg).model, test, {}, workers()).mean;
    if (acc >= 0.90) ++good;
    accs += fmt(" %.3f", acc);
  }
  return {good >= 9, fmt("%d/10 seeds >= 0.90 (accuracy%s)", good, accs.c_str())};
}

// Exact class-presence distribution of the generator's sequential acceptance
// draw. Returns P(T present, context present) / P(T present) for every pair,
// where for T == i the context is a second instance.
std::vector<double> cooccurrence_oracle(const WorldSpec& w) {
  const std::size_t m = w.num_classes();
  struct State {
    std::uint32_t present = 0;
    std::uint32_t twice = 0;
    bool operator<(const State& o) const { return std::tie(present, twice) < std::tie(o.present, o.twice); }
  };
  std::map<State, double> final_mass;
  const double pk = 1.0 / static_cast<double>(w.max_objects - w.min_objects + 1);
  for (std::size_t k = w.min_objects; k <= w.max_objects; ++k) {
    std::map<State, double> frontier = {{State{}, pk}};
    for (std::size_t n = 0; n < k; ++n) {
      std::map<State, double> next;
      for (const auto& [st, p] : frontier) {
        std::vector<double> accept(m, 1.0);
        double total = 0.0;
        for (ClassId c = 0; c < m; ++c) {
          for (ClassId s = 0; s < m; ++s) {
            if ((st.present >> s) & 1u) accept[c] *= w.co(c, s);
          }
          total += accept[c];
        }
        if (total <= 0.0) {
          // Stuck: a short scene if it is long enough, otherwise a restart.
          if (n >= w.min_objects) final_mass[st] += p;
          continue;
        }
        for (ClassId c = 0; c < m; ++c) {
          if (accept[c] <= 0.0) continue;
          State s2 = st;
          if ((s2.present >> c) & 1u) s2.twice |= 1u << c;
          s2.present |= 1u << c;
          next[s2] += p * accept[c] / total;
        }
      }
      frontier = std::move(next);
    }
    for (const auto& [st, p] : frontier) final_mass[st] += p;
  }
  std::vector<double> joint(m * m, 0.0);
  std::vector<double> marginal(m, 0.0);
  for (const auto& [st, p] : final_mass) {
    for (ClassId t = 0; t < m; ++t) {
      if (!((st.present >> t) & 1u)) continue;
      marginal[t] += p;
      for (ClassId i = 0; i < m; ++i) {
        const bool has = i == t ? ((st.twice >> i) & 1u) : ((st.present >> i) & 1u);
        if (has) joint[t * m + i] += p;
      }
    }
  }
  for (ClassId t = 0; t < m; ++t) {
    for (ClassId i = 0; i < m; ++i) joint[t * m + i] = marginal[t] > 0.0 ? joint[t * m + i] / marginal[t] : 0.0;
  }
  return joint;
}

std::size_t argmax_bin(std::span<const double> h) {
  return static_cast<std::size_t>(std::max_element(h.begin(), h.end()) - h.begin());
}

// Distance from v to the nearest interior bin edge, in units of bin width.
double edge_distance(double v, double lo, double hi, std::size_t n) {
  const double width = (hi - lo) / static_cast<double>(n);
  const double pos = (v - lo) / width;
  return std::abs(pos - std::round(pos));
}

Outcome statistics_calibration() {
  const auto w = default_world();
  const auto scenes = generate(w, 10000, 0, workers());
  const HistConfig h;
  const auto stats = fit_stats(scenes, w.vocab, h, workers());
  const auto oracle = cooccurrence_oracle(w);
  const std::size_t m = w.num_classes();
  double worst = 0.0;
  for (ClassId t = 0; t < m; ++t) {
    for (ClassId i = 0; i < m; ++i) {
      worst = std::max(worst, std::abs(stats.lookup(LikelihoodKind::co, t, i, 1.0) - oracle[t * m + i]));
    }
  }

  // Modes are checked for tightly planted pairs whose mean sits well inside a bin.
  std::size_t checked = 0;
  std::size_t wrong = 0;
  for (ClassId t = 0; t < m; ++t) {
    for (ClassId i = 0; i < m; ++i) {
      if (t == i || oracle[t * m + i] <= 0.0) continue;
      const bool tight = w.dx_of(t, i).sigma <= 0.05 && w.dx_of(i, t).sigma <= 0.05 &&
                         w.scale_of(t, i).sigma <= 0.1 && w.scale_of(i, t).sigma <= 0.1;
      if (!tight) continue;
      const struct {
        LikelihoodKind kind;
        double mu;
        double lo, hi;
        std::size_t n;
      } cues[] = {
          {LikelihoodKind::sc, w.scale_of(t, i).mu, h.scale_lo, h.scale_hi, h.n_scale_bins},
          {LikelihoodKind::spx, w.dx_of(t, i).mu, -1.0, 1.0, h.n_spatial_bins},
          {LikelihoodKind::spy, w.dy_of(t, i).mu, -1.0, 1.0, h.n_spatial_bins},
      };
      for (const auto& c : cues) {
        if (edge_distance(c.mu, c.lo, c.hi, c.n) < 0.25) continue;
        ++checked;
        if (argmax_bin(stats.histogram(c.kind, t, i)) != bin_index(c.mu, c.lo, c.hi, c.n)) ++wrong;
      }
    }
  }
  return {worst <= 0.03 && wrong == 0 && checked > 0,
          fmt("max |co - oracle| %.4f, %zu/%zu modes in the planted bin", worst, checked - wrong, checked)};
}

// Shared by the method-comparison criteria.
struct MethodMaps {
  double st, sa, fub, aub, cs, sa_o, cs_o;
};

const std::vector<MethodMaps>& method_maps() {
  static const std::vector<MethodMaps> maps = [] {
    std::vector<MethodMaps> out;
    const std::vector<Method> ms = {Method::ST, Method::SA,   Method::FUB, Method::AUB,
                                    Method::CS, Method::SA_O, Method::CS_O};
    for (int seed = 0; seed < kSeeds; ++seed) {
      const auto d = noisy_data(seed);
      const auto r = run_experiment(d.train, d.test, d.stats, experiment_config(seed), ms);
      out.push_back({r.reports[0].map, r.reports[1].map, r.reports[2].map, r.reports[3].map, r.reports[4].map,
                     r.reports[5].map, r.reports[6].map});
    }
    return out;
  }();
  return maps;
}

Outcome gain_direction() {
  int cs_sa = 0, cs_st = 0, fub_between = 0, aub_between = 0;
  for (const auto& m : method_maps()) {
    cs_sa += m.cs >= m.sa;
    cs_st += m.cs >= m.st;
    fub_between += m.st <= m.fub && m.fub <= m.cs;
    aub_between += m.st <= m.aub && m.aub <= m.cs;
  }
  return {cs_sa >= 8 && cs_st >= 8 && fub_between >= 6 && aub_between >= 6,
          fmt("CS>=SA %d/10, CS>=ST %d/10, ST<=FUB<=CS %d/10, ST<=AUB<=CS %d/10", cs_sa, cs_st, fub_between,
              aub_between)};
}

Outcome margin_gain() {
  int good = 0;
  double gain = 0.0;
  for (const auto& m : method_maps()) {
    good += m.cs > std::max(m.fub, m.aub);
    gain += m.cs - std::max(m.fub, m.aub);
  }
  return {good >= 6, fmt("CS>max(FUB,AUB) %d/10, mean gain %.4f", good, gain / kSeeds)};
}

Outcome oracle_ordering() {
  int good = 0;
  for (const auto& m : method_maps()) good += m.cs_o >= m.sa_o && m.sa_o >= m.sa;
  return {good >= 7, fmt("CS-O>=SA-O>=SA %d/10", good)};
}

Outcome sweep_shape() {
  const std::vector<double> ps = {0.1, 0.2, 0.3, 0.4, 0.5, 0.9};
  int good = 0;
  std::string notes;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto d = noisy_data(seed);
    const auto rows =
        sweep_precision_threshold(d.train, d.test, d.stats, ps, {Method::ST, Method::SA, Method::CS}, experiment_config(seed));
    std::map<std::pair<double, std::string>, double> at;
    for (const auto& r : rows) at[{r.precision, r.method}] = r.map;
    bool above = true;
    for (double p : ps) {
      if (p < 0.55 && at.at({p, "CS"}) < at.at({p, "SA"})) above = false;
    }
    const double starve = std::abs(at.at({0.9, "CS"}) - at.at({0.9, "ST"}));
    const bool ok = above && starve <= 0.01;
    good += ok;
    notes += fmt(" %c%.3f", above ? '+' : '-', starve);
  }
  return {good > kSeeds / 2, fmt("%d/10 seeds (CS>=SA on 0.1..0.5, |CS-ST| at 0.9:%s)", good, notes.c_str())};
}

Outcome ap_fixtures() {
  const auto perfect = average_precision({{0.9, true}, {0.8, true}, {0.7, true}}, 3);
  const auto fp_above = average_precision({{0.9, false}, {0.8, true}}, 1);
  return {std::abs(perfect.ap - 1.0) <= 1e-12 && std::abs(fp_above.ap - 0.5) <= 1e-12,
          fmt("perfect %.15f, FP above TP %.15f", perfect.ap, fp_above.ap)};
}

// --- CLI determinism -------------------------------------------------------

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CTXSEL_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    files[fs::relative(e.path(), dir).string()] = ss.str();
  }
  return files;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "ctxsel_acceptance_cli";
  const auto d = [&](const char* sub) { return (root / sub).string(); };
  const std::vector<std::string> steps = {
      "synth -o " + d("data") + " --n-train 200 --n-test 80 --seed 5",
      "fit-stats -o " + d("stats") + " --train " + d("data/train.jsonl") + " --vocab " + d("data/vocab.txt"),
      "pure -o " + d("pure") + " --train " + d("data/train.jsonl") + " --test " + d("data/test.jsonl") +
          " --stats " + d("stats/stats.json") + " --ral --epochs 10",
      "train -o " + d("models") + " --train " + d("data/train.jsonl") + " --stats " + d("stats/stats.json") +
          " --inner-epochs 5 --outer-iters 3",
      "rescore -o " + d("rescored") + " --test " + d("data/test.jsonl") + " --models " + d("models") + " --method CS",
      "eval -o " + d("eval") + " --train " + d("data/train.jsonl") + " --test " + d("data/test.jsonl") + " --stats " +
          d("stats/stats.json") + " --oracle --inner-epochs 5 --outer-iters 3",
      "eval -o " + d("sweep") + " --train " + d("data/train.jsonl") + " --test " + d("data/test.jsonl") +
          " --stats " + d("stats/stats.json") + " --sweep 0.3,0.6 --inner-epochs 3 --outer-iters 2",
      "viz -o " + d("viz") + " --scenes " + d("rescored/rescored.jsonl") + " --traces " + d("rescored/traces.jsonl") +
          " --vocab " + d("data/vocab.txt"),
  };
  std::map<std::string, std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    fs::remove_all(root);
    for (const auto& s : steps) {
      if (run_cli(s) != 0) return {false, "command failed: " + s};
    }
    auto snap = snapshot(root);
    if (pass == 0) {
      first = std::move(snap);
      continue;
    }
    if (snap.size() != first.size()) return {false, fmt("file count %zu vs %zu", snap.size(), first.size())};
    for (const auto& [name, bytes] : first) {
      auto it = snap.find(name);
      if (it == snap.end() || it->second != bytes) return {false, "differs: " + name};
    }
  }
  fs::remove_all(root);
  return {true, fmt("%zu files byte-identical across two runs", first.size())};
}

Outcome selecting_ratio_gap() {
  // bed is the target; pillow is planted next to every bed, box lands anywhere.
  const auto vocab = default_world().vocab;
  const ClassId bed = *vocab.find("bed");
  const ClassId pillow = *vocab.find("pillow");
  const ClassId box = *vocab.find("box");
  int good = 0;
  std::string gaps;
  for (int seed = 0; seed < kSeeds; ++seed) {
    const auto d = noisy_data(seed);
    auto cfg = experiment_config(seed).train;
    const auto trained = train_for_against(d.train, bed, oracle_pool(d.train), d.stats, cfg);
    auto model = trained.model;
    model.oracle = true;
    const auto table = selecting_ratios(model, d.test);
    const double gap = table.row(Side::For, pillow).ratio() - table.row(Side::For, box).ratio();
    good += gap >= 0.2;
    gaps += fmt(" %.2f", gap);
  }
  return {good >= 8, fmt("%d/10 seeds with gap >= 0.2 (gaps%s)", good, gaps.c_str())};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"selection oracle equivalence", selection_oracle},
      {"coordinate descent monotonicity", monotonicity},
      {"planted context recovery", planted_recovery},
      {"statistics calibration", statistics_calibration},
      {"re-scoring gain direction", gain_direction},
      {"for-and-against margin gain", margin_gain},
      {"oracle ordering", oracle_ordering},
      {"threshold sweep shape", sweep_shape},
      {"AP fixture exactness", ap_fixtures},
      {"CLI determinism", cli_determinism},
      {"selecting ratio discrimination", selecting_ratio_gap},
  };
  int failed = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %2zu %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
