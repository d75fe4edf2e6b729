#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "ctxsel/error.hpp"
#include "ctxsel/evaluation.hpp"
#include "ctxsel/synthetic.hpp"
#include "doctest.h"

using namespace ctxsel;

namespace {

// Reference AP straight from the definition: precision envelope summed over
// the recall steps of each true positive.
double reference_ap(std::vector<ScoredMatch> d, std::size_t num_gt) {
  std::stable_sort(d.begin(), d.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  std::vector<double> prec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (d[k].is_tp) ++tp;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (!d[k].is_tp) continue;
    const double env = *std::max_element(prec.begin() + static_cast<long>(k), prec.end());
    ap += env / static_cast<double>(num_gt);
  }
  return ap;
}

double reference_ap11(std::vector<ScoredMatch> d, std::size_t num_gt) {
  std::stable_sort(d.begin(), d.end(), [](const ScoredMatch& a, const ScoredMatch& b) { return a.score > b.score; });
  std::vector<double> prec;
  std::vector<double> rec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < d.size(); ++k) {
    if (d[k].is_tp) ++tp;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (int r = 0; r <= 10; ++r) {
    double best = 0.0;
    for (std::size_t k = 0; k < d.size(); ++k) {
      if (rec[k] >= r / 10.0 - 1e-12) best = std::max(best, prec[k]);
    }
    ap += best / 11.0;
  }
  return ap;
}

// Lowest cutoff in {0} and the distinct scores whose survivors (score > cutoff)
// reach precision p.
double reference_cutoff(const std::vector<ScoredMatch>& d, double p) {
  std::vector<double> candidates = {0.0};
  for (const auto& x : d) candidates.push_back(x.score);
  std::sort(candidates.begin(), candidates.end());
  for (double c : candidates) {
    std::size_t kept = 0;
    std::size_t tp = 0;
    for (const auto& x : d) {
      if (x.score > c) {
        ++kept;
        if (x.is_tp) ++tp;
      }
    }
    if (kept > 0 && static_cast<double>(tp) >= p * static_cast<double>(kept)) return c;
  }
  return std::numeric_limits<double>::infinity();
}

Scene scored_scene(const std::vector<ScoredMatch>& d) {
  // Class 0 only; every TP gets its own GT box, FPs sit in empty space.
  Scene s{"hand", 1000, 100, {}, {}};
  for (std::size_t k = 0; k < d.size(); ++k) {
    const BBox box{10.0 * static_cast<double>(k), 0, 8, 8};
    if (d[k].is_tp) {
      s.gts.push_back({0, box});
      s.dets.push_back({0, d[k].score, box});
    } else {
      s.dets.push_back({0, d[k].score, {box.x, 50, 8, 8}});
    }
  }
  return s;
}

struct SmallWorld {
  WorldSpec world;
  std::vector<Scene> train;
  std::vector<Scene> test;
  ContextStats stats;
};

const SmallWorld& small_world() {
  static const SmallWorld w = [] {
    SmallWorld out;
    out.world = default_world();
    const auto det = noisy_detector(out.world.vocab.size());
    out.train = simulate_detector(generate(out.world, 200, 0, 1), out.world, det, 1);
    out.test = simulate_detector(generate(out.world, 80, 200, 1), out.world, det, 1);
    out.stats = fit_stats(out.train, out.world.vocab);
    return out;
  }();
  return w;
}

ExperimentConfig quick_config() {
  ExperimentConfig c;
  c.train.inner_epochs = 5;
  c.train.outer_iters = 3;
  return c;
}

}  // namespace

TEST_CASE("method names") {
  for (auto m : {Method::ST, Method::SA, Method::FUB, Method::AUB, Method::CS, Method::SA_O, Method::CS_O}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK(std::string(method_name(Method::CS_O)) == "CS-O");
  CHECK(is_oracle(Method::SA_O));
  CHECK_FALSE(is_oracle(Method::CS));
  CHECK_THROWS_AS(parse_method("XX"), Error);
}

TEST_CASE("hand AP fixtures") {
  CHECK(average_precision({{0.9, true}}, 1).ap == 1.0);
  // The higher-scored detection is the false positive.
  const auto c = average_precision({{0.9, false}, {0.8, true}}, 1);
  CHECK(c.ap == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(c.precision == std::vector<double>{0.0, 0.5});
  CHECK(c.recall == std::vector<double>{0.0, 1.0});
  CHECK(average_precision({}, 0).ap == 0.0);
  CHECK(average_precision({{0.9, false}}, 3).ap == 0.0);

  Scene one{"a", 100, 100, {{0, {10, 10, 20, 20}}}, {{0, 0.7, {11, 10, 20, 20}}}};
  CHECK(class_pr_curve({one}, 0).ap == 1.0);
}

TEST_CASE("AP matches the reference on random rankings") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::bernoulli_distribution coin(0.4);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<ScoredMatch> d(static_cast<std::size_t>(trial % 25 + 1));
    std::size_t tps = 0;
    for (auto& x : d) {
      x = {std::round(u(rng) * 20) / 20, coin(rng)};
      tps += x.is_tp;
    }
    const std::size_t num_gt = tps + static_cast<std::size_t>(trial % 3);
    if (num_gt == 0) continue;
    const auto curve = average_precision(d, num_gt);
    CHECK(curve.ap == doctest::Approx(reference_ap(d, num_gt)).epsilon(1e-12));
    CHECK(average_precision(d, num_gt, ApMode::ElevenPoint).ap ==
          doctest::Approx(reference_ap11(d, num_gt)).epsilon(1e-12));
    CHECK(curve.ap >= 0.0);
    CHECK(curve.ap <= 1.0);
    CHECK(std::is_sorted(curve.recall.begin(), curve.recall.end()));

    // Strictly monotone transforms leave AP unchanged.
    auto t = d;
    for (auto& x : t) x.score = std::exp(3.0 * x.score) - 7.0;
    CHECK(average_precision(t, num_gt).ap == curve.ap);
  }
}

TEST_CASE("classes without ground truth are excluded from mAP") {
  Scene s{"m", 100, 100, {{0, {0, 0, 10, 10}}, {1, {50, 50, 10, 10}}}, {}};
  s.dets = {{0, 0.9, {0, 0, 10, 10}}, {1, 0.9, {0, 0, 10, 10}}, {1, 0.8, {50, 50, 10, 10}}};
  const auto r = evaluate({s}, 3, "ST");
  CHECK(*r.ap[0] == 1.0);
  CHECK(*r.ap[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_FALSE(r.ap[2]);
  CHECK(r.map == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("precision thresholds") {
  const std::vector<ScoredMatch> hand = {{0.9, true}, {0.8, false}, {0.7, true}};
  const auto s = scored_scene(hand);
  CHECK(precision_thresholds({s}, 1, 0.6)[0] == 0.0);
  CHECK(precision_thresholds({s}, 1, 0.7)[0] == 0.8);

  const auto all_tp = scored_scene({{0.9, true}, {0.3, true}});
  for (double p : {0.1, 0.5, 0.99}) CHECK(precision_thresholds({all_tp}, 1, p)[0] == 0.0);

  // Best achievable precision 0.3 cannot meet 0.4.
  std::vector<ScoredMatch> weak;
  for (int k = 0; k < 10; ++k) weak.push_back({0.05 + 0.09 * k, k < 3});  // lowest scores are the only TPs
  CHECK(std::isinf(precision_thresholds({scored_scene(weak)}, 1, 0.4)[0]));
  CHECK_THROWS_AS(precision_thresholds({s}, 1, 1.0), Error);

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ScoredMatch> d(static_cast<std::size_t>(trial % 12 + 1));
    for (auto& x : d) x = {std::round(u(rng) * 10) / 10 + 0.01, coin(rng)};
    const double p = 0.1 + 0.8 * u(rng);
    const double got = precision_thresholds({scored_scene(d)}, 1, p)[0];
    CHECK(got == reference_cutoff(d, p));
  }
}

TEST_CASE("oracle pool edge cases") {
  Scene none{"n", 100, 100, {{0, {0, 0, 10, 10}}}, {{0, 0.9, {50, 50, 10, 10}}, {1, 0.5, {0, 0, 10, 10}}}};
  CHECK(oracle_pool({none})[0] == std::vector<bool>{false, false});
  Scene all{"a", 100, 100, {{0, {0, 0, 10, 10}}, {1, {50, 50, 10, 10}}}, {{0, 0.9, {0, 0, 10, 10}}, {1, 0.5, {50, 50, 10, 10}}}};
  CHECK(oracle_pool({all})[0] == std::vector<bool>{true, true});
}

TEST_CASE("ST reproduces the detector ranking") {
  const auto& w = small_world();
  const auto out = rescore(w.test, ClassModels(w.world.vocab.size()), Method::ST);
  CHECK(out.scenes == w.test);
  CHECK(out.traces.empty());
  const auto direct = evaluate(w.test, w.world.vocab.size(), "ST");
  for (ClassId c = 0; c < w.world.vocab.size(); ++c) {
    CHECK(*direct.ap[c] == class_pr_curve(w.test, c).ap);
  }
}

TEST_CASE("baseline family on a small experiment") {
  const auto& w = small_world();
  const auto cfg = quick_config();
  const std::vector<Method> methods = {Method::ST, Method::SA, Method::FUB, Method::AUB, Method::CS};
  const auto exp = run_experiment(w.train, w.test, w.stats, cfg, methods);
  REQUIRE(exp.reports.size() == methods.size());
  CHECK(exp.reports[0].map == evaluate(w.test, w.world.vocab.size(), "ST").map);
  CHECK(exp.thresholds == precision_thresholds(w.train, w.world.vocab.size(), cfg.precision));

  const auto& models = exp.models.models;
  const auto fub = rescore(w.test, models, Method::FUB, true);
  const auto aub = rescore(w.test, models, Method::AUB, true);
  const auto cs = rescore(w.test, models, Method::CS, true);
  for (std::size_t s = 0; s < w.test.size(); ++s) {
    for (std::size_t d = 0; d < w.test[s].dets.size(); ++d) {
      CHECK(cs.scenes[s].dets[d].score ==
            doctest::Approx(fub.scenes[s].dets[d].score + aub.scenes[s].dets[d].score).epsilon(1e-12));
    }
  }
  for (const auto& tr : fub.traces) CHECK(tr.side == Side::For);
  for (const auto& tr : aub.traces) CHECK(tr.side == Side::Against);
  CHECK(cs.traces.size() == fub.traces.size() + aub.traces.size());
  for (const auto& tr : cs.traces) {
    for (const auto& c : tr.contexts) CHECK(c.selected == (c.contribution > 0.0));
  }

  // Missing models and oracle mismatches are errors.
  ClassModels partial = models;
  partial[2].reset();
  try {
    rescore(w.test, partial, Method::CS);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "missing_model");
  }
  CHECK_NOTHROW(rescore(w.test, partial, Method::CS, false, false));
  CHECK_THROWS_AS(rescore(w.test, models, Method::CS_O), Error);

  // A one-point sweep reproduces the experiment.
  const auto sweep = sweep_precision_threshold(w.train, w.test, w.stats, {cfg.precision},
                                               {Method::SA, Method::CS}, cfg);
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].method == "SA");
  CHECK(sweep[0].map == exp.reports[1].map);
  CHECK(sweep[1].method == "CS");
  CHECK(sweep[1].map == exp.reports[4].map);
}

TEST_CASE("selecting ratios") {
  const auto& w = small_world();
  auto cfg = quick_config();
  const auto exp = run_experiment(w.train, w.test, w.stats, cfg, {Method::CS_O});
  const std::size_t m = w.world.vocab.size();
  for (ClassId t = 0; t < m; ++t) {
    const auto& model = *exp.oracle_models.models[t];
    CHECK(model.oracle);
    const auto table = selecting_ratios(model, w.test);
    CHECK(table.pool == "oracle");
    REQUIRE(table.rows.size() == 2 * m);
    for (const auto& r : table.rows) {
      CHECK(r.selected <= r.total);
      CHECK(r.ratio() >= 0.0);
      CHECK(r.ratio() <= 1.0);
    }
    CHECK(table.row(Side::For, 0).total == table.row(Side::Against, 0).total);

    // Zeroing every context weight switches all regions off.
    RescoreModel silent = model;
    silent.for_weights = RescoreWeights::initial(m);
    silent.against_weights = RescoreWeights::initial(m);
    for (const auto& r : selecting_ratios(silent, w.test).rows) CHECK(r.selected == 0);
  }
}

TEST_CASE("report writers") {
  const auto vocab = parse_vocab_list("bed,pillow");
  std::vector<EvalReport> reports = {{"ST", {0.5, std::nullopt}, 0.5}, {"CS", {0.75, 0.25}, 0.5}};
  std::ostringstream csv;
  write_ap_csv(csv, vocab, reports);
  CHECK(csv.str() == "method,bed,pillow,mAP\nST,0.5,,0.5\nCS,0.75,0.25,0.5\n");

  const auto j = reports_to_json(vocab, reports);
  CHECK(j.dump().find("\"CS\"") != std::string::npos);

  std::ostringstream sw;
  write_sweep_csv(sw, {{0.1, "SA", 0.25}, {0.1, "CS", 0.5}});
  CHECK(sw.str() == "precision,method,mAP\n0.1,SA,0.25\n0.1,CS,0.5\n");

  SelectingRatioTable table;
  table.rows = {{0, 1, Side::For, 1, 4}, {0, 1, Side::Against, 0, 0}};
  std::ostringstream sr;
  write_selecting_ratio_csv(sr, vocab, {table});
  CHECK(sr.str() ==
        "target_class,context_class,side,selected,total,ratio,pool\n"
        "bed,pillow,For,1,4,0.25,oracle\n"
        "bed,pillow,Against,0,0,0,oracle\n");
}

TEST_CASE("trace json round trip") {
  const auto vocab = parse_vocab_list("bed,pillow");
  TraceRecord t;
  t.image_id = "img";
  t.scene_index = 3;
  t.target_index = 1;
  t.target = {1, 0.625, {1.5, 2, 3, 4}};
  t.side = Side::Against;
  t.score = -0.1;
  t.contexts = {{{0, 0.5, {10, 10, 5, 5}}, 0, 0.3, true}, {{1, 0.25, {20, 20, 6, 6}}, 2, -0.2, false}};
  const auto line = trace_to_json_line(t, vocab);
  const auto back = parse_trace(line, vocab);
  CHECK(back.image_id == t.image_id);
  CHECK(back.scene_index == 3);
  CHECK(back.target_index == 1);
  CHECK(back.target == t.target);
  CHECK(back.side == Side::Against);
  CHECK(back.score == t.score);
  REQUIRE(back.contexts.size() == 2);
  CHECK(back.contexts[1].det == t.contexts[1].det);
  CHECK(back.contexts[1].det_index == 2);
  CHECK(back.contexts[0].selected);
  CHECK(trace_to_json_line(back, vocab) == line);
  CHECK_THROWS_AS(parse_trace("{", vocab), Error);
}
