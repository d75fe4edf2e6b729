#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "ctxsel/error.hpp"
#include "ctxsel/pure_context.hpp"
#include "ctxsel/synthetic.hpp"
#include "doctest.h"

using namespace ctxsel;

namespace {

ClassVocab bedroom() { return parse_vocab_list("bed,pillow,lamp"); }

std::vector<Scene> random_scenes(std::uint64_t seed, std::size_t n, std::size_t m) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(0.0, 70.0);
  std::uniform_real_distribution<double> len(1.0, 30.0);
  std::uniform_int_distribution<std::size_t> cls(0, m - 1);
  std::uniform_int_distribution<int> count(1, 6);
  std::vector<Scene> out;
  for (std::size_t k = 0; k < n; ++k) {
    Scene s{"r" + std::to_string(k), 100, 100, {}, {}};
    const int c = count(rng);
    for (int j = 0; j < c; ++j) s.gts.push_back({cls(rng), {pos(rng), pos(rng), len(rng), len(rng)}});
    out.push_back(s);
  }
  return out;
}

double dot(std::span<const double> a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < b.size(); ++k) s += a[k] * b[k];
  return s;
}

}  // namespace

TEST_CASE("feature of a lone target is the bias only") {
  const auto stats = fit_stats(random_scenes(1, 50, 3), bedroom());
  const Scene s{"lone", 100, 100, {{0, {10, 10, 20, 20}}}, {}};
  const auto f = pure_feature(s, 0, 1, stats);
  REQUIRE(f.size() == pure_feature_size(3));
  CHECK(f.size() == 13);
  for (std::size_t k = 0; k + 1 < f.size(); ++k) CHECK(f[k] == 0.0);
  CHECK(f.back() == 1.0);
}

TEST_CASE("one context object fills exactly its own block") {
  const auto stats = fit_stats(random_scenes(2, 80, 3), bedroom());
  const Scene s{"pair", 100, 100, {{0, {10, 10, 20, 20}}, {2, {50, 40, 10, 12}}}, {}};
  const auto f = pure_feature(s, 0, 0, stats);
  for (std::size_t k = 0; k < 12; ++k) {
    if (k >= 8) {
      CHECK(f[k] != 0.0);
    } else {
      CHECK(f[k] == 0.0);
    }
  }
  const auto ll = stats.pair_log_likelihood(0, s.gts[0].box, 2, s.gts[1].box, 100, 100);
  CHECK(f[8] == ll.co);
  CHECK(f[9] == ll.sc);
  CHECK(f[10] == ll.spx);
  CHECK(f[11] == ll.spy);
}

TEST_CASE("two same-class context objects sum their blocks") {
  const auto stats = fit_stats(random_scenes(3, 80, 3), bedroom());
  const GtObject target{1, {30, 30, 10, 10}};
  const GtObject a{0, {5, 50, 30, 20}};
  const GtObject b{0, {60, 10, 25, 15}};
  const auto fa = pure_feature(Scene{"a", 100, 100, {target, a}, {}}, 0, 1, stats);
  const auto fb = pure_feature(Scene{"b", 100, 100, {target, b}, {}}, 0, 1, stats);
  const auto fab = pure_feature(Scene{"ab", 100, 100, {target, a, b}, {}}, 0, 1, stats);
  for (std::size_t k = 0; k < 4; ++k) CHECK(fab[k] == doctest::Approx(fa[k] + fb[k]).epsilon(1e-14));
}

TEST_CASE("zero weights predict the lowest class index") {
  const auto stats = fit_stats(random_scenes(4, 30, 3), bedroom());
  const PureContextModel model(stats);
  for (const auto& s : random_scenes(5, 20, 3)) {
    for (std::size_t g = 0; g < s.gts.size(); ++g) CHECK(predict_label(model, s, g).label == 0);
  }
}

TEST_CASE("hand-built weights favor pillow next to a bed") {
  const auto stats = fit_stats(random_scenes(6, 100, 3), bedroom());
  PureContextModel model(stats);
  // log d_co(pillow | bed present) < 0, so a negative weight makes its term positive.
  model.row(1)[4 * 0 + 0] = -1.0;
  const Scene s{"tb", 100, 100, {{2, {40, 40, 10, 10}}, {0, {10, 60, 40, 20}}}, {}};
  const auto p = predict_label(model, s, 0);
  CHECK(p.label == 1);
  for (ClassId t = 0; t < 3; ++t) CHECK(p.scores[t] == dot(model.row(t), pure_feature(s, 0, t, stats)));
  CHECK(p.scores[1] > 0.0);
  CHECK(p.scores[0] == 0.0);
  CHECK(p.scores[2] == 0.0);
}

TEST_CASE("masking a class equals deleting its objects") {
  const auto scenes = random_scenes(7, 120, 3);
  const auto stats = fit_stats(scenes, bedroom());
  const auto trained = train_pure(scenes, stats, {1e-3, 5, 0, 1}).model;
  for (const auto& s : random_scenes(8, 40, 3)) {
    for (ClassId masked = 0; masked < 3; ++masked) {
      for (std::size_t g = 0; g < s.gts.size(); ++g) {
        Scene pruned = s;
        pruned.gts.clear();
        std::size_t new_idx = 0;
        for (std::size_t j = 0; j < s.gts.size(); ++j) {
          if (j == g) new_idx = pruned.gts.size();
          if (j == g || s.gts[j].class_id != masked) pruned.gts.push_back(s.gts[j]);
        }
        const auto a = predict_label(trained, s, g, ClassMask{{masked}});
        const auto b = predict_label(trained, pruned, new_idx);
        CHECK(a.scores == b.scores);
        CHECK(a.label == b.label);
      }
    }
  }
}

TEST_CASE("prediction ignores context order") {
  const auto scenes = random_scenes(9, 100, 3);
  const auto stats = fit_stats(scenes, bedroom());
  const auto model = train_pure(scenes, stats, {1e-3, 5, 0, 1}).model;
  std::mt19937_64 rng(2);
  for (const auto& s : random_scenes(10, 30, 3)) {
    Scene shuffled = s;
    std::shuffle(shuffled.gts.begin() + 1, shuffled.gts.end(), rng);
    const auto a = predict_label(model, s, 0);
    const auto b = predict_label(model, shuffled, 0);
    CHECK(a.label == b.label);
    for (std::size_t t = 0; t < 3; ++t) CHECK(a.scores[t] == doctest::Approx(b.scores[t]).epsilon(1e-12));
  }
}

TEST_CASE("separable planted data is learned exactly") {
  // Each class occupies its own row of the image, so the vertical offset to
  // any context object identifies the target.
  std::vector<Scene> scenes;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> pick(0, 2);
  for (int k = 0; k < 90; ++k) {
    Scene s{"sep" + std::to_string(k), 60, 60, {}, {}};
    const int first = pick(rng);
    const int second = (first + 1 + k % 2) % 3;
    for (int c : {first, second}) s.gts.push_back({static_cast<ClassId>(c), {25, 5.0 + 20.0 * c, 8, 6}});
    scenes.push_back(s);
  }
  const auto stats = fit_stats(scenes, bedroom());
  const auto result = train_pure(scenes, stats, {1e-3, 50, 0, 1});
  const auto acc = accuracy(result.model, scenes);
  CHECK(acc.mean == 1.0);
}

TEST_CASE("a huge regularizer drives weights to zero") {
  const auto scenes = random_scenes(11, 60, 3);
  const auto stats = fit_stats(scenes, bedroom());
  const auto model = train_pure(scenes, stats, {1e6, 5, 0, 1}).model;
  double biggest = 0.0;
  for (double w : model.weights()) biggest = std::max(biggest, std::abs(w));
  CHECK(biggest < 1e-4);
}

TEST_CASE("objective tracking") {
  const auto world = default_world();
  const auto scenes = generate(world, 300, 0, 1);
  const auto stats = fit_stats(scenes, world.vocab);
  const auto result = train_pure(scenes, stats, {1e-3, 50, 0, 1});
  REQUIRE(result.objective_per_epoch.size() == 50);
  CHECK(result.objective_per_epoch.back() <= result.initial_objective);
  const auto& obj = result.objective_per_epoch;
  for (std::size_t e = 0; e + 5 < obj.size(); ++e) {
    CHECK(obj[e + 5] <= obj[e] * (1.0 + 1e-6));
  }
  const auto examples = pure_examples(scenes, stats);
  CHECK(pure_objective(examples, result.model.weights(), world.vocab.size(), 1e-3) == obj.back());
}

TEST_CASE("pure training is deterministic and worker independent") {
  const auto scenes = random_scenes(13, 100, 3);
  const auto stats = fit_stats(scenes, bedroom());
  const auto a = train_pure(scenes, stats, {1e-3, 10, 5, 1}).model;
  const auto b = train_pure(scenes, stats, {1e-3, 10, 5, 3}).model;
  CHECK(a == b);
  CHECK(PureContextModel::from_json(a.to_json()) == a);
}

TEST_CASE("training errors") {
  const auto stats = fit_stats(random_scenes(14, 10, 3), bedroom());
  try {
    train_pure({}, stats);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == "empty_dataset");
  }
  CHECK_THROWS_AS(train_pure(random_scenes(1, 5, 3), stats, {0.0, 5, 0, 1}), Error);
}

TEST_CASE("accuracy macro average") {
  // Zero weights always answer class 0: balanced two-class data gives 0.5.
  std::vector<Scene> scenes;
  for (int k = 0; k < 10; ++k) scenes.push_back({"b" + std::to_string(k), 50, 50, {{0, {1, 1, 5, 5}}, {1, {20, 20, 5, 5}}}, {}});
  const auto vocab = parse_vocab_list("a,b");
  const PureContextModel model(fit_stats(scenes, vocab));
  const auto acc = accuracy(model, scenes);
  CHECK(*acc.class_accuracy(0) == 1.0);
  CHECK(*acc.class_accuracy(1) == 0.0);
  CHECK(acc.mean == 0.5);

  std::ostringstream csv;
  write_accuracy_csv(csv, vocab, acc);
  CHECK(csv.str() == "class,correct,total,accuracy\na,10,10,1\nb,0,10,0\n");
}

TEST_CASE("relative accuracy loss") {
  CHECK(ral_from_accuracies(0.5, 0.6) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(ral_from_accuracies(0.5, 0.4) == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK_THROWS_AS(ral_from_accuracies(0.0, 0.3), Error);

  // Lamp never appears, so masking it changes nothing.
  const auto scenes = random_scenes(15, 80, 2);
  const auto stats = fit_stats(scenes, bedroom());
  const auto model = train_pure(scenes, stats, {1e-3, 10, 0, 1}).model;
  const auto full = accuracy(model, scenes);
  if (full.class_accuracy(0).value_or(0.0) > 0.0) CHECK(ral(model, scenes, 0, 2) == 0.0);

  const auto rows = ral_table(model, scenes);
  for (const auto& r : rows) {
    if (r.ral) CHECK(*r.ral == doctest::Approx((r.acc_masked - r.acc_full) / r.acc_full).epsilon(1e-15));
  }
  std::ostringstream csv;
  write_ral_csv(csv, bedroom(), rows);
  const std::string text = csv.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == static_cast<long>(rows.size() + 1));
}
