#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "eegssm/errors.hpp"
#include "eegssm/ops.hpp"
#include "eegssm/training.hpp"

using namespace eegssm;
using namespace eegssm::training;

namespace {

double ce(const std::vector<double>& logits, int label) {
  ad::Graph g;
  Matrix z(static_cast<Index>(logits.size()), 1);
  for (std::size_t i = 0; i < logits.size(); ++i) z(static_cast<Index>(i), 0) = logits[i];
  return ad::cross_entropy(g.input(z, false), {label}).value()(0, 0);
}

// Two classes separated by the sign of a slow drift on channel 0.
preprocess::SegmentSet toy_set(std::size_t n, std::uint64_t seed) {
  preprocess::SegmentSet s;
  s.sample_rate = 32.0;
  s.channels = 3;
  s.window = 32;
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    Eigen::MatrixXf seg = rng.normal_matrix(3, 32, 0.3).cast<float>();
    seg.row(0).array() += label ? 1.0f : -1.0f;
    s.segments.push_back(seg);
    s.labels.push_back(label);
    s.tasks.push_back(label ? "movie2" : "movie1");
    s.subjects.push_back("sub-01");
    s.sessions.push_back(0);
    s.starts.push_back(0);
    s.recordings.push_back(0);
  }
  return s;
}

models::ModelSpec toy_spec(double dropout = 0.0) {
  auto spec = models::ModelSpec::tiny(models::Kind::s5);
  spec.in_channels = 3;
  spec.num_classes = 2;
  spec.dropout = dropout;
  spec.seed = 4;
  return spec;
}

TrainConfig toy_config() {
  TrainConfig c;
  c.max_epochs = 20;
  c.batch_size = 10;
  c.lr = 1e-2;
  return c;
}

}  // namespace

TEST_CASE("cross entropy closed forms") {
  CHECK(ce({0.3, 0.3, 0.3, 0.3}, 2) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(ce({0.0, -800.0, -800.0}, 0) == doctest::Approx(0.0));
  CHECK(ce({std::log(0.5), std::log(0.25), std::log(0.25)}, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(ce({0.0, 1.0}, 2), DataError);
  CHECK_THROWS_AS(ce({0.0, 1.0}, -1), DataError);
}

TEST_CASE("adamw single steps") {
  Matrix w = Matrix::Constant(1, 1, 1.0);
  AdamState st;
  adamw_step(w, Matrix::Constant(1, 1, 1.0), st, 1, 0.1, 0.0);
  CHECK(w(0, 0) == doctest::Approx(0.9).epsilon(1e-6));

  w.setConstant(1.0);
  st = {};
  adamw_step(w, Matrix::Constant(1, 1, 1.0), st, 1, 0.1, 0.1);
  CHECK(w(0, 0) == doctest::Approx(0.89).epsilon(1e-6));

  w.setConstant(1.0);
  st = {};
  adamw_step(w, Matrix::Zero(1, 1), st, 1, 0.1, 0.0);
  CHECK(w(0, 0) == 1.0);

  CHECK_THROWS_AS(adamw_step(w, Matrix::Zero(2, 1), st, 2, 0.1, 0.0), ShapeError);
}

TEST_CASE("adamw without decay matches a scalar Adam trace") {
  const std::vector<double> grads{1.0, -0.5, 2.0, 0.0, 0.3};
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double p = 0.7, m = 0.0, v = 0.0;
  Matrix w = Matrix::Constant(1, 1, 0.7);
  AdamState st;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
    adamw_step(w, Matrix::Constant(1, 1, g), st, static_cast<long>(t), lr, 0.0, b1, b2, eps);
    CHECK(w(0, 0) == doctest::Approx(p).epsilon(1e-12));
  }
  // Hand-evaluated first step: m_hat = v_hat = 1 so the move is exactly lr.
  Matrix w1 = Matrix::Constant(1, 1, 0.7);
  AdamState s1;
  adamw_step(w1, Matrix::Constant(1, 1, 1.0), s1, 1, lr, 0.0);
  CHECK(w1(0, 0) == doctest::Approx(0.65).epsilon(1e-9));
}

TEST_CASE("clip_grad_norm") {
  ParameterSet ps;
  ps.add("a", Matrix::Zero(1, 2));
  ps.add("b", Matrix::Zero(2, 1));
  ps.add("buf", Matrix::Zero(1, 1), false);
  ps.at("a").grad = (Matrix(1, 2) << 1.2, 0.0).finished();
  ps.at("b").grad = (Matrix(2, 1) << 0.0, 1.6).finished();
  ps.at("buf").grad = Matrix::Constant(1, 1, 100.0);

  SUBCASE("norm 2 halves") {
    CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(2.0));
    CHECK(ps.at("a").grad(0, 0) == doctest::Approx(0.6));
    CHECK(ps.at("b").grad(1, 0) == doctest::Approx(0.8));
  }
  SUBCASE("below threshold unchanged") {
    ps.at("a").grad *= 0.25;
    ps.at("b").grad *= 0.25;
    CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(0.5));
    CHECK(ps.at("a").grad(0, 0) == 0.3);
    CHECK(ps.at("b").grad(1, 0) == 0.4);
  }
  SUBCASE("zero gradients") {
    ps.zero_grad();
    CHECK(clip_grad_norm(ps, 1.0) == 0.0);
    CHECK(ps.at("a").grad.allFinite());
    CHECK(ps.at("a").grad.isZero());
  }
  SUBCASE("infinite threshold disables clipping") {
    clip_grad_norm(ps, std::numeric_limits<double>::infinity());
    CHECK(ps.at("a").grad(0, 0) == 1.2);
  }
}

TEST_CASE("ema update") {
  Matrix shadow = Matrix::Zero(1, 1);
  ema_update(shadow, Matrix::Ones(1, 1), 0.9);
  CHECK(shadow(0, 0) == doctest::Approx(0.1));

  Matrix keep = Matrix::Constant(2, 2, 3.0);
  ema_update(keep, Matrix::Zero(2, 2), 1.0);
  CHECK(keep.isApprox(Matrix::Constant(2, 2, 3.0)));

  // decay = 0 tracks the parameter exactly at every step.
  Rng rng(1);
  Matrix s = rng.normal_matrix(3, 4);
  for (int step = 1; step <= 50; ++step) {
    const Matrix p = rng.normal_matrix(3, 4);
    ema_update(s, p, ema_effective_decay(0.0, step, true));
    CHECK(s == p);
  }

  CHECK(ema_effective_decay(0.999, 0, true) == doctest::Approx(0.1));
  CHECK(ema_effective_decay(0.999, 100000, true) == 0.999);
  CHECK(ema_effective_decay(0.999, 0, false) == 0.999);
}

TEST_CASE("plateau scheduler") {
  PlateauConfig cfg;
  SUBCASE("six equal losses halve once at epoch 6") {
    PlateauScheduler s(1e-3, cfg);
    for (int e = 1; e <= 5; ++e) CHECK(s.step(1.0) == 1e-3);
    CHECK(s.step(1.0) == doctest::Approx(5e-4));
    for (int e = 7; e <= 10; ++e) CHECK(s.step(1.0) == doctest::Approx(5e-4));
    CHECK(s.step(1.0) == doctest::Approx(2.5e-4));
  }
  SUBCASE("strictly decreasing keeps lr") {
    PlateauScheduler s(1e-3, cfg);
    for (int e = 0; e < 30; ++e) CHECK(s.step(2.0 - 0.01 * e) == 1e-3);
  }
  SUBCASE("improvement below threshold does not count") {
    PlateauScheduler s(1e-3, cfg);
    double lr = 0.0;
    for (int e = 0; e < 6; ++e) lr = s.step(1.0 - 1e-5 * e);
    CHECK(lr == doctest::Approx(5e-4));
  }
  SUBCASE("floor") {
    PlateauScheduler s(1e-6, cfg);
    for (int e = 0; e < 40; ++e) CHECK(s.step(1.0) == 1e-6);
    PlateauScheduler t(1.5e-6, cfg);
    for (int e = 0; e < 40; ++e) CHECK(t.step(1.0) >= 1e-6);
    CHECK(t.lr() == 1e-6);
  }
}

TEST_CASE("early stopper on a flat loss stops at epoch 11") {
  EarlyStopper stop(10);
  int epoch = 0;
  bool done = false;
  while (!done && epoch < 100) done = stop.step(0.7), ++epoch;
  CHECK(epoch == 11);
}

TEST_CASE("fit early-stops on a flat validation loss") {
  auto train = toy_set(20, 1);
  auto val = toy_set(10, 2);
  auto cfg = toy_config();
  cfg.max_epochs = 50;
  cfg.lr = 1e-12;  // far too small to move the loss by the threshold
  cfg.plateau.min_lr = 1e-13;
  auto model = models::make_model(toy_spec());
  const auto r = fit(*model, train, val, cfg, 0);
  CHECK(r.early_stopped);
  CHECK(r.history.size() == 11);
  CHECK(r.best_epoch == 1);
}

TEST_CASE("fit is seed-deterministic") {
  auto train = toy_set(40, 1);
  auto val = toy_set(10, 2);
  auto cfg = toy_config();
  cfg.max_epochs = 4;
  auto run = [&](std::uint64_t seed) {
    auto model = models::make_model(toy_spec(0.2));
    auto r = fit(*model, train, val, cfg, seed);
    return std::pair{r.history, model->params()};
  };
  const auto [h1, p1] = run(3);
  const auto [h2, p2] = run(3);
  REQUIRE(h1.size() == h2.size());
  for (std::size_t i = 0; i < h1.size(); ++i) {
    CHECK(h1[i].train_loss == h2[i].train_loss);
    CHECK(h1[i].val_loss == h2[i].val_loss);
    CHECK(h1[i].val_acc == h2[i].val_acc);
    CHECK(h1[i].lr == h2[i].lr);
  }
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].value == p2[i].value);

  const auto [h3, p3] = run(4);
  CHECK(h3[0].train_loss != h1[0].train_loss);
}

TEST_CASE("fit separates a linearly separable toy set") {
  auto train = toy_set(100, 11);
  auto val = toy_set(20, 12);
  auto model = models::make_model(toy_spec());
  const auto r = fit(*model, train, val, toy_config(), 0);
  CHECK(r.history.size() <= 20);
  const auto [loss, acc] = loss_and_accuracy(predict_proba(*model, train, 16), train.labels);
  CHECK(acc == 1.0);
  CHECK(loss < std::log(2.0));
  // The model ends on the recorded best weights.
  for (std::size_t i = 0; i < r.best.size(); ++i) CHECK(model->params()[i].value == r.best[i].value);
  CHECK(r.best_val_loss == doctest::Approx(r.history[static_cast<std::size_t>(r.best_epoch - 1)].val_loss));
}

TEST_CASE("fit error paths") {
  auto train = toy_set(10, 1);
  auto val = toy_set(4, 2);
  auto cfg = toy_config();
  cfg.max_epochs = 1;
  auto model = models::make_model(toy_spec());

  preprocess::SegmentSet empty = val;
  empty.segments.clear();
  empty.labels.clear();
  CHECK_THROWS_AS(fit(*model, train, empty, cfg, 0), DataError);

  auto bad = train;
  bad.segments[3](0, 5) = std::numeric_limits<float>::quiet_NaN();
  try {
    fit(*model, bad, val, cfg, 0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const auto j = nlohmann::json::parse(e.what());
    CHECK(j.at("epoch") == 1);
    CHECK(j.contains("batch"));
    CHECK(j.at("parameters").size() == model->params().size());
  }
}

TEST_CASE("history csv and summaries") {
  const auto path = std::filesystem::temp_directory_path() / "eegssm_history.csv";
  write_history_csv(path, {{1, 0.9, 0.8, 0.5, 1e-3}, {2, 0.7, 0.6, 0.75, 1e-3}});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "epoch,train_loss,val_loss,val_acc,lr");
  CHECK(row == "1,0.9,0.8,0.5,0.001");
  std::filesystem::remove(path);

  const auto s = summarize({0.5, 0.6, 0.7});
  CHECK(s.mean == doctest::Approx(0.6));
  CHECK(s.std == doctest::Approx(std::sqrt(0.02 / 3.0)));
  CHECK(summarize({0.4}).std == 0.0);
  CHECK_THROWS_AS(summarize({}), DataError);
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.lr = 3e-3;
  c.seeds = {5, 6};
  const TrainConfig back = nlohmann::json(c).get<TrainConfig>();
  CHECK(back.lr == 3e-3);
  CHECK(back.seeds == std::vector<std::uint64_t>{5, 6});
  CHECK(nlohmann::json::object().get<TrainConfig>().max_epochs == 100);
  CHECK_THROWS_AS(nlohmann::json({{"learning_rate", 1.0}}).get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"seeds", nlohmann::json::array()}}).get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"batch_size", 0}}).get<TrainConfig>(), ConfigError);
  CHECK_THROWS_AS(nlohmann::json({{"ema_decay", 1.5}}).get<TrainConfig>(), ConfigError);
}
