#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <numbers>
#include <set>

#include "eegssm/datagen.hpp"
#include "eegssm/errors.hpp"
#include "eegssm/evaluation.hpp"
#include "eegssm/log.hpp"

using namespace eegssm;
using namespace eegssm::evaluation;

namespace {

Matrix columns(std::initializer_list<std::initializer_list<double>> cols) {
  Matrix m(static_cast<Index>(cols.begin()->size()), static_cast<Index>(cols.size()));
  Index j = 0;
  for (const auto& c : cols) {
    Index i = 0;
    for (double v : c) m(i++, j) = v;
    ++j;
  }
  return m;
}

// Two-sided binomial tail by explicit enumeration of all 2^n outcomes.
double enumerated_mcnemar_p(int b, int c) {
  const int n = b + c;
  const int k = std::min(b, c);
  long hits = 0;
  for (long mask = 0; mask < (1L << n); ++mask)
    if (__builtin_popcountl(static_cast<unsigned long>(mask)) <= k) ++hits;
  return std::min(1.0, 2.0 * static_cast<double>(hits) / static_cast<double>(1L << n));
}

std::vector<double> with_moments(int n, double mean, double sd) {
  std::vector<double> v(static_cast<std::size_t>(n));
  double m = 0.0;
  for (int i = 0; i < n; ++i) m += v[static_cast<std::size_t>(i)] = std::sin(1.7 * i) + 0.1 * i;
  m /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  const double s = std::sqrt(ss / (n - 1));
  for (double& x : v) x = mean + sd * (x - m) / s;
  return v;
}

struct QuietWarnings {
  QuietWarnings() { set_warning_handler(nullptr); }
  ~QuietWarnings() { set_warning_handler({}); }
};

std::vector<Recording> small_dataset(int subjects, double duration, std::uint64_t seed) {
  datagen::SynthConfig cfg;
  cfg.n_subjects = subjects;
  cfg.n_channels = 4;
  cfg.n_sources = 2;
  cfg.sample_rate = 50.0;
  cfg.duration_s = duration;
  cfg.tasks = {{"movie1", 6.0, 8.0}, {"movie2", 12.0, 10.0}, {"movie3", 18.0, 12.0}, {"resting", 0.0, 0.0}};
  cfg.ood_tasks = {{"ood_task:symbol_search", 9.0, 8.0}};
  cfg.snr_db = 10.0;
  return datagen::generate(cfg, seed);
}

models::ModelSpec tiny_s5(Index channels) {
  auto spec = models::ModelSpec::tiny(models::Kind::s5);
  spec.in_channels = channels;
  spec.num_classes = 4;
  spec.dropout = 0.0;
  return spec;
}

}  // namespace

TEST_CASE("accuracy and macro F1") {
  SUBCASE("all correct") {
    const auto s = accuracy_macro_f1({0, 1, 2, 3, 1}, {0, 1, 2, 3, 1}, 4);
    CHECK(s.accuracy == 1.0);
    CHECK(s.macro_f1 == 1.0);
  }
  SUBCASE("half right, two classes") {
    const auto s = accuracy_macro_f1({0, 1, 0, 1}, {0, 0, 1, 1}, 2);
    CHECK(s.accuracy == 0.5);
    CHECK(s.macro_f1 == doctest::Approx(0.5));
  }
  SUBCASE("constant prediction over balanced labels") {
    const auto s = accuracy_macro_f1({0, 0, 0, 0, 0, 0, 0, 0}, {0, 1, 2, 3, 0, 1, 2, 3}, 4);
    CHECK(s.accuracy == 0.25);
    CHECK(s.macro_f1 == doctest::Approx(0.1));
    CHECK(s.f1[0] == doctest::Approx(0.4));
  }
  SUBCASE("absent class counts as zero") {
    const auto s = accuracy_macro_f1({0, 1}, {0, 1}, 4);
    CHECK(s.macro_f1 == doctest::Approx(0.5));
  }
  CHECK_THROWS_AS(accuracy_macro_f1({}, {}, 4), DataError);
  CHECK_THROWS_AS(accuracy_macro_f1({0}, {0, 1}, 4), ShapeError);
  CHECK_THROWS_AS(accuracy_macro_f1({5}, {0}, 4), DataError);
}

TEST_CASE("confusion matrix invariants") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> preds, labels;
    long streaming = 0;
    const int n = 1 + static_cast<int>(rng.uniform(0, 200));
    for (int i = 0; i < n; ++i) {
      labels.push_back(static_cast<int>(rng.uniform(0, 4)));
      preds.push_back(static_cast<int>(rng.uniform(0, 4)));
      streaming += preds.back() == labels.back();
    }
    const auto m = confusion_matrix(preds, labels, 4);
    CHECK(m.sum() == n);
    for (int k = 0; k < 4; ++k) CHECK(m.row(k).sum() == std::count(labels.begin(), labels.end(), k));
    CHECK(accuracy_macro_f1(preds, labels, 4).accuracy == static_cast<double>(streaming) / n);
    CHECK(static_cast<double>(m.trace()) / n == static_cast<double>(streaming) / n);
  }
}

TEST_CASE("movie confusion rate") {
  Counts diag = Counts::Zero(4, 4);
  diag.diagonal() << 5, 5, 5, 5;
  CHECK(movie_confusion_rate(diag) == 0.0);

  Counts m = Counts::Zero(4, 4);
  m.topLeftCorner(3, 3) << 8, 1, 1, 0, 10, 0, 0, 0, 10;
  CHECK(movie_confusion_rate(m) == doctest::Approx(100.0 * 2.0 / 30.0));

  Counts r = Counts::Zero(4, 4);
  r.topLeftCorner(3, 3) << 9, 0, 0, 0, 10, 0, 0, 0, 10;
  r(0, 3) = 1;
  CHECK(movie_confusion_rate(r) == 0.0);

  Counts none = Counts::Zero(4, 4);
  none(3, 3) = 4;
  CHECK_THROWS_AS(movie_confusion_rate(none), DataError);
}

TEST_CASE("calibration anchors") {
  SUBCASE("perfect one-hot") {
    const auto c = calibration(columns({{1, 0, 0, 0}, {0, 0, 1, 0}}), {0, 2});
    CHECK(c.nll == 0.0);
    CHECK(c.brier == 0.0);
    CHECK(c.ece == 0.0);
  }
  SUBCASE("uniform") {
    const Matrix u = Matrix::Constant(4, 6, 0.25);
    const auto c = calibration(u, {0, 1, 2, 3, 1, 2});
    CHECK(std::abs(c.nll - std::log(4.0)) <= 1e-9);
    CHECK(std::abs(c.brier - 0.75) <= 1e-9);
    // Ties predict class 0, so accuracy is 1/6.
    CHECK(c.ece == doctest::Approx(std::abs(1.0 / 6.0 - 0.25) * 100.0));
  }
  SUBCASE("two-sample single bin") {
    const auto c = calibration(columns({{0.6, 0.4}, {0.6, 0.4}}), {0, 1});
    CHECK(std::abs(c.ece - 10.0) <= 1e-12);
  }
  SUBCASE("zero probability uses the floor") {
    const auto c = calibration(columns({{1.0, 0.0}}), {1});
    CHECK(c.nll == doctest::Approx(-std::log(1e-12)));
  }
  CHECK_THROWS_AS(calibration(columns({{0.5, 0.6}}), {0}), DataError);
}

TEST_CASE("ECE vanishes when every bin is calibrated") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    // Random bins at confidence j/10 holding 10m samples of which exactly j*m are right.
    std::vector<int> labels;
    std::vector<double> conf;
    for (int j = 2; j <= 10; ++j) {
      if (rng.uniform() < 0.5) continue;
      const int m = 1 + static_cast<int>(rng.uniform(0, 4));
      for (int i = 0; i < 10 * m; ++i) {
        conf.push_back(j / 10.0);
        labels.push_back(i < j * m ? 0 : 1);
      }
    }
    if (conf.empty()) continue;
    Matrix probs(10, static_cast<Index>(conf.size()));
    for (std::size_t i = 0; i < conf.size(); ++i) {
      probs.col(static_cast<Index>(i)).setConstant((1.0 - conf[i]) / 9.0);
      probs(0, static_cast<Index>(i)) = conf[i];
    }
    CHECK(calibration(probs, labels).ece == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
  }
}

TEST_CASE("NLL and Brier vanish together") {
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    const bool perfect = trial % 2 == 0;
    Matrix p = Matrix::Zero(4, 5);
    std::vector<int> labels;
    for (Index j = 0; j < 5; ++j) {
      const int y = static_cast<int>(rng.uniform(0, 4));
      labels.push_back(y);
      if (perfect) {
        p(y, j) = 1.0;
      } else {
        p.col(j) = rng.uniform_matrix(4, 1, 0.01, 1.0);
        p.col(j) /= p.col(j).sum();
      }
    }
    const auto c = calibration(p, labels);
    CHECK((c.nll == 0.0) == (c.brier == 0.0));
    CHECK((c.nll == 0.0) == perfect);
  }
}

TEST_CASE("incomplete beta and t cdf against Boost") {
  for (double df : {1.0, 2.0, 5.0, 19.0, 100.0}) {
    boost::math::students_t_distribution<double> dist(df);
    for (double t : {-6.0, -3.13, -1.0, -0.1, 0.0, 0.4, 2.0, 3.13, 8.0}) {
      const double want = boost::math::cdf(dist, t);
      CHECK(student_t_cdf(t, df) == doctest::Approx(want).epsilon(1e-10));
    }
  }
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  // I_x(1, 1) = x
  CHECK(incomplete_beta(1.0, 1.0, 0.37) == doctest::Approx(0.37).epsilon(1e-13));
}

TEST_CASE("paired t test") {
  SUBCASE("zero mean") {
    const auto r = paired_t_test({-1.0, 2.0, -1.0});
    CHECK(r.t == doctest::Approx(0.0));
    CHECK(r.p == doctest::Approx(1.0));
  }
  SUBCASE("two differences") {
    const auto r = paired_t_test({1.0, 3.0});
    CHECK(r.t == doctest::Approx(2.0));
    // df = 1 is Cauchy: two-sided p = 1 - 2 atan(t) / pi.
    CHECK(r.p == doctest::Approx(1.0 - 2.0 * std::atan(2.0) / std::numbers::pi).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(0.295).epsilon(1e-3));
  }
  SUBCASE("published fold statistics") {
    const auto diffs = with_moments(20, 10.6, 15.1);
    const auto r = paired_t_test(diffs);
    CHECK(std::abs(r.t - 3.13) <= 0.01);
    CHECK(std::abs(r.p - 0.0055) <= 0.0005);
    CHECK(r.df == 19.0);
    const auto s = t_test_from_summary(10.6, 15.1, 20);
    CHECK(s.t == doctest::Approx(r.t).epsilon(1e-12));
    CHECK(s.p == doctest::Approx(r.p).epsilon(1e-9));
  }
  CHECK_THROWS_WITH_AS(paired_t_test({2.0, 2.0, 2.0}), doctest::Contains("degenerate: constant differences"), DataError);
  CHECK_THROWS_AS(paired_t_test({1.0}), DataError);
}

TEST_CASE("mcnemar") {
  const auto r = mcnemar(12, 0);
  CHECK(r.chi2 == 12.0);
  CHECK(r.exact_p == doctest::Approx(enumerated_mcnemar_p(12, 0)).epsilon(1e-12));
  CHECK(r.exact_p >= 4.8e-4);
  CHECK(r.exact_p <= 5.0e-4);
  CHECK(mcnemar(5, 5).chi2 == 0.0);
  CHECK(mcnemar(5, 5).exact_p == 1.0);
  for (int b = 0; b <= 9; ++b)
    for (int c = 0; c <= 9; ++c)
      if (b + c > 0) CHECK(mcnemar(b, c).exact_p == doctest::Approx(enumerated_mcnemar_p(b, c)).epsilon(1e-12));
  CHECK_THROWS_WITH_AS(mcnemar(0, 0), doctest::Contains("no discordant pairs"), DataError);

  const auto [b, c] = discordant_counts({true, true, false, false, true}, {false, true, true, false, false});
  CHECK(b == 2);
  CHECK(c == 1);
}

TEST_CASE("evaluate report") {
  const Matrix p = columns({{0.7, 0.1, 0.1, 0.1}, {0.2, 0.5, 0.2, 0.1}, {0.1, 0.6, 0.2, 0.1}, {0.1, 0.1, 0.1, 0.7}});
  const auto r = evaluate(p, {0, 1, 2, 3});
  CHECK(r.n_samples == 4);
  CHECK(r.accuracy == 0.75);
  CHECK(r.confusion(2, 1) == 1);
  CHECK(r.movie_confusion_rate == doctest::Approx(100.0 / 3.0));
  const nlohmann::json j = r;
  CHECK(j.at("confusion")[2][1] == 1);
  const auto rest = evaluate(columns({{0.1, 0.1, 0.1, 0.7}}), {3});
  CHECK(nlohmann::json(rest).at("movie_confusion_rate").is_null());
}

TEST_CASE("loso folds exclude the held-out subject") {
  QuietWarnings quiet;
  const auto recs = small_dataset(3, 40.0, 5);
  training::TrainConfig train;
  train.max_epochs = 2;
  train.batch_size = 8;
  const LosoConfig cfg{4.0, 0.5, 0.2};
  const auto result = loso_protocol(recs, tiny_s5(4), train, cfg, 1);
  REQUIRE(result.folds.size() == 3);
  std::set<std::string> held;
  for (const auto& f : result.folds) {
    CHECK_FALSE(f.skipped);
    held.insert(f.held_out_subject);
    CHECK(f.train_subjects.size() == 2);
    CHECK(std::find(f.train_subjects.begin(), f.train_subjects.end(), f.held_out_subject) == f.train_subjects.end());
    // Whole 40 s recordings at 4 s windows with 2 s hop: 19 windows x 4 tasks.
    CHECK(f.n_test_segments == 76);
    CHECK(f.probs.cols() == f.n_test_segments);
    CHECK(f.accuracy >= 0.0);
    CHECK(f.accuracy <= 1.0);
  }
  CHECK(held.size() == 3);
  CHECK(result.min <= result.mean);
  CHECK(result.mean <= result.max);

  // Folds are independent of the worker count.
  const auto parallel = loso_protocol(recs, tiny_s5(4), train, cfg, 1, 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(parallel.folds[i].probs == result.folds[i].probs);

  std::vector<Recording> one(recs.begin(), recs.begin() + 4);
  CHECK_THROWS_AS(loso_protocol(one, tiny_s5(4), train, cfg, 1), DataError);

  // A unit too short for one window is skipped with a note.
  auto shortened = recs;
  for (auto& r : shortened)
    if (r.subject_id == "sub-03") r.samples = r.samples.leftCols(100).eval();
  const auto partial = loso_protocol(shortened, tiny_s5(4), train, cfg, 1);
  CHECK(partial.folds[2].skipped);
  CHECK_FALSE(partial.folds[2].note.empty());
}

TEST_CASE("cross-frequency protocol") {
  QuietWarnings quiet;
  const auto recs = small_dataset(1, 40.0, 6);
  auto model = models::make_model(tiny_s5(4));
  const preprocess::SegmentConfig seg{{0.6, 0.2, 0.2}, 4.0, 0.5};

  const auto rows = cross_frequency_protocol(*model, recs, seg, {50.0, 25.0});
  REQUIRE(rows.size() == 2);
  const auto direct = preprocess::segment_all(
      std::vector<Recording>(recs.begin(), recs.begin() + 4), seg)[2];
  const Matrix want = training::predict_proba(*model, direct);
  CHECK(rows[0].probs == want);
  CHECK(rows[0].accuracy == accuracy_macro_f1(argmax_columns(want), direct.labels, 4).accuracy);
  CHECK(rows[0].window == 200);
  CHECK(rows[1].window == 100);
  CHECK(rows[1].labels == direct.labels);

  // Window seconds are preserved: 32 s at 128 Hz spans 4096 samples.
  Recording r = recs[0];
  r.samples = Matrix::Zero(2, 250 * 160);
  r.sample_rate = 250.0;
  const auto down = preprocess::resample(r, 128.0);
  CHECK(preprocess::segment_all({down}, {{0.6, 0.2, 0.2}, 32.0, 0.5})[2].window == 4096);

  auto cnn_spec = models::ModelSpec::tiny(models::Kind::cnn);
  cnn_spec.in_channels = 4;
  cnn_spec.num_classes = 4;
  auto cnn = models::make_model(cnn_spec);
  CHECK_THROWS_AS(cross_frequency_protocol(*cnn, recs, {{0.6, 0.2, 0.2}, 1.0, 0.5}, {10.0}), ShapeError);
}

TEST_CASE("cross-task protocol") {
  QuietWarnings quiet;
  SUBCASE("uniform model") {
    auto model = models::make_model(tiny_s5(3));
    model->params().at("head.weight").value.setZero();
    model->params().at("head.bias").value.setZero();
    preprocess::SegmentSet ood;
    ood.channels = 3;
    ood.window = 16;
    ood.sample_rate = 16;
    Rng rng(2);
    for (int i = 0; i < 6; ++i) {
      ood.segments.push_back(rng.normal_matrix(3, 16).cast<float>());
      ood.labels.push_back(-1);
      ood.tasks.push_back(i < 4 ? "ood_task:a" : "ood_task:b");
    }
    const auto rows = cross_task_protocol(*model, ood, preprocess::SegmentSet{});
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].task == "ood_task:a");
    CHECK(rows[0].n_segments == 4);
    CHECK(rows[1].n_segments == 2);
    for (const auto& row : rows) {
      CHECK(row.mean_confidence == doctest::Approx(0.25));
      CHECK(row.dominant_class == 0);
    }
    CHECK_THROWS_WITH_AS(cross_task_protocol(*model, preprocess::SegmentSet{}, ood), doctest::Contains("empty task set"),
                         DataError);
  }
  SUBCASE("control rows follow the training distribution") {
    const auto recs = small_dataset(1, 60.0, 8);
    std::vector<Recording> in_dist, ood_recs;
    for (const auto& r : recs) (is_ood(r.task_label) ? ood_recs : in_dist).push_back(r);
    const preprocess::SegmentConfig seg{{0.8, 0.2, 0.0}, 4.0, 0.5};
    const auto sets = preprocess::segment_all(in_dist, seg);
    auto spec = models::ModelSpec::desk(models::Kind::s5);
    spec.in_channels = 4;
    auto model = models::make_model(spec);
    training::TrainConfig cfg;
    cfg.max_epochs = 40;
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    training::fit(*model, sets[0], sets[1], cfg, 0);
    const auto ood = preprocess::segment_all(ood_recs, {{1.0, 0.0, 0.0}, 4.0, 0.5})[0];
    const auto rows = cross_task_protocol(*model, ood, sets[0]);
    REQUIRE(rows.size() == 5);
    CHECK(rows[0].task == "ood_task:symbol_search");
    CHECK_FALSE(rows[0].control);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(rows[k + 1].control);
      CHECK(rows[k + 1].task == class_labels[k]);
      CHECK(rows[k + 1].dominant_class == static_cast<int>(k));
    }
  }
}

TEST_CASE("summarize_task ties go to the lowest class") {
  const auto row = summarize_task("t", columns({{0.1, 0.6, 0.2, 0.1}, {0.1, 0.1, 0.7, 0.1}}));
  CHECK(row.dominant_class == 1);
  CHECK(row.class_fractions[2] == 0.5);
  CHECK(row.mean_confidence == doctest::Approx(0.65));
}
