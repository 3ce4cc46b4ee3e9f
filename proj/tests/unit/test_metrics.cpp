#include "dfd/metrics.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <random>

using namespace dfd;

namespace {

std::vector<ScoredPrediction> make(const std::vector<Label>& labels, const std::vector<double>& scores) {
  std::vector<ScoredPrediction> out;
  for (std::size_t i = 0; i < labels.size(); ++i) out.push_back({"p" + std::to_string(i), scores[i], labels[i]});
  return out;
}

constexpr Label F = Label::fake;
constexpr Label R = Label::real;

std::vector<ScoredPrediction> random_instance(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<int> level(0, 10);  // coarse grid forces duplicate scores
  std::vector<ScoredPrediction> out;
  for (int i = 0; i < n; ++i) out.push_back({"p" + std::to_string(i), level(rng) / 10.0, coin(rng) ? F : R});
  out[0].label = F;
  out[1].label = R;
  return out;
}

}  // namespace

TEST_CASE("perfect separation") {
  const auto r = evaluate(make({F, F, R, R}, {0.9, 0.8, 0.2, 0.1}));
  CHECK(*r.roc_auc == 1.0);
  CHECK(*r.average_precision == 1.0);
  CHECK(*r.recall_at_precision_1 == 1.0);
  CHECK(r.accuracy == 1.0);
}

TEST_CASE("inverted pair") {
  const auto r = evaluate(make({F, R}, {0.4, 0.6}));
  CHECK(*r.roc_auc == 0.0);
}

TEST_CASE("six-item example") {
  const auto preds = make({F, F, F, R, R, R}, {0.9, 0.8, 0.35, 0.7, 0.3, 0.1});
  const auto r = evaluate(preds, 0.5);
  CHECK(*r.roc_auc == doctest::Approx(8.0 / 9.0).epsilon(1e-12));
  CHECK(oracle::auc(preds) == doctest::Approx(8.0 / 9.0).epsilon(1e-12));
  CHECK(*r.average_precision == doctest::Approx(oracle::average_precision(preds)).epsilon(1e-12));
  // fakes >= 0.5: 0.9, 0.8 correct; 0.35 missed. reals: 0.7 wrong; 0.3, 0.1 correct.
  CHECK(r.accuracy == doctest::Approx(4.0 / 6.0));
  CHECK(r.accuracy == doctest::Approx(oracle::accuracy(preds, 0.5)));
  CHECK(r.confusion.tp == 2);
  CHECK(r.confusion.fn == 1);
  CHECK(r.confusion.fp == 1);
  CHECK(r.confusion.tn == 2);
}

TEST_CASE("metrics match the oracles on random instances with ties") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(2, 50);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto preds = random_instance(rng, size(rng));
    const auto r = evaluate(preds, 0.5);
    REQUIRE(r.roc_auc.has_value());
    CHECK(std::abs(*r.roc_auc - oracle::auc(preds)) <= 1e-9);
    CHECK(std::abs(*r.average_precision - oracle::average_precision(preds)) <= 1e-12);
    CHECK(std::abs(*r.recall_at_precision_1 - oracle::recall_at_zero_fp(preds)) <= 1e-12);
    CHECK(r.accuracy == doctest::Approx(oracle::accuracy(preds, 0.5)));
    CHECK(r.confusion.tp + r.confusion.fn == r.n_fake);
    CHECK(r.confusion.tn + r.confusion.fp == r.n_real);
    CHECK(*r.roc_auc >= 0.0);
    CHECK(*r.roc_auc <= 1.0);
  }
}

TEST_CASE("monotone transforms and label swap") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto preds = random_instance(rng, 30);
    const auto base = evaluate(preds);
    auto squashed = preds;
    for (auto& p : squashed) p.score = std::pow(p.score, 3.0) * 0.5 + 0.25;
    const auto t = evaluate(squashed);
    CHECK(*t.roc_auc == doctest::Approx(*base.roc_auc).epsilon(1e-12));
    CHECK(*t.average_precision == doctest::Approx(*base.average_precision).epsilon(1e-12));
    REQUIRE(t.roc.size() == base.roc.size());
    for (std::size_t i = 0; i < t.roc.size(); ++i) {
      CHECK(t.roc[i].fpr == base.roc[i].fpr);
      CHECK(t.roc[i].tpr == base.roc[i].tpr);
    }
    REQUIRE(t.pr.size() == base.pr.size());
    for (std::size_t i = 0; i < t.pr.size(); ++i) {
      CHECK(t.pr[i].recall == base.pr[i].recall);
      CHECK(t.pr[i].precision == base.pr[i].precision);
    }

    auto swapped = preds;
    for (auto& p : swapped) {
      p.label = p.label == F ? R : F;
      p.score = 1.0 - p.score;
    }
    CHECK(*evaluate(swapped).roc_auc == doctest::Approx(*base.roc_auc).epsilon(1e-12));
  }
}

TEST_CASE("single-class input leaves curves undefined") {
  const auto r = evaluate(make({F, F, F}, {0.2, 0.6, 0.9}));
  CHECK_FALSE(r.roc_auc.has_value());
  CHECK_FALSE(r.average_precision.has_value());
  CHECK(r.accuracy == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("invalid input") {
  CHECK_THROWS_AS(evaluate({}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(make({F}, {1.5})), std::invalid_argument);
}

TEST_CASE("threshold boundary counts as fake") {
  const auto r = evaluate(make({F, R}, {0.5, 0.49}), 0.5);
  CHECK(r.accuracy == 1.0);
}

TEST_CASE("bootstrap intervals") {
  SUBCASE("all correct") {
    const auto preds = make({F, F, R, R}, {0.9, 0.8, 0.1, 0.2});
    const Interval iv = bootstrap_ci(preds, MetricKind::accuracy, 200, 1);
    CHECK(iv.low == 1.0);
    CHECK(iv.high == 1.0);
  }
  SUBCASE("deterministic") {
    std::mt19937_64 rng(4);
    const auto preds = random_instance(rng, 40);
    const Interval a = bootstrap_ci(preds, MetricKind::roc_auc, 300, 77);
    const Interval b = bootstrap_ci(preds, MetricKind::roc_auc, 300, 77);
    CHECK(a.low == b.low);
    CHECK(a.high == b.high);
  }
  SUBCASE("binomial width at n=116, p=0.85") {
    std::vector<ScoredPrediction> preds;
    for (int i = 0; i < 116; ++i) {
      const bool correct = i < 99;  // 99/116 = 0.853
      const Label l = i % 2 ? F : R;
      preds.push_back({"p" + std::to_string(i), (l == F) == correct ? 0.9 : 0.1, l});
    }
    const Interval iv = bootstrap_ci(preds, MetricKind::accuracy, 2000, 5);
    const double se = std::sqrt(0.85 * 0.15 / 116.0);
    CHECK(iv.high - iv.low == doctest::Approx(2 * 1.96 * se).epsilon(0.2));
  }
  CHECK_THROWS(bootstrap_ci(make({F, R}, {0.9, 0.1}), MetricKind::accuracy, 50, 1));
}

TEST_CASE("predictions and eval outputs round-trip") {
  const auto dir = test::scratch_dir("metrics_io");
  const auto preds = make({F, R, F}, {0.75, 0.125, 0.3});
  write_predictions_csv(preds, dir / "predictions.csv");
  const auto back = read_predictions_csv(dir / "predictions.csv");
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == preds[i].id);
    CHECK(back[i].score == preds[i].score);
    CHECK(back[i].label == preds[i].label);
  }
  write_eval_outputs(evaluate(preds), dir);
  CHECK(std::filesystem::exists(dir / "eval.json"));
  CHECK(std::filesystem::exists(dir / "roc.csv"));
  CHECK(std::filesystem::exists(dir / "pr.csv"));
  const auto j = nlohmann::json::parse(read_file(dir / "eval.json"));
  CHECK(j.contains("accuracy"));
}
