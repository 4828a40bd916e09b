#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "eegssm/errors.hpp"
#include "eegssm/log.hpp"
#include "eegssm/preprocess.hpp"
#include "eegssm/rng.hpp"
#include "oracles.hpp"

using namespace eegssm;
using namespace eegssm::preprocess;

namespace {

Recording make_recording(const Matrix& samples, double rate, const std::string& task = "movie1") {
  Recording r;
  r.subject_id = "s0";
  r.task_label = task;
  r.sample_rate = rate;
  r.samples = samples;
  return r;
}

Matrix tone_row(double f, double rate, Index n) { return oracle::tone(f, rate, n).transpose(); }

// Captures warnings for the lifetime of the object.
struct WarningCapture {
  std::vector<std::string> messages;
  WarningCapture() { set_warning_handler([this](const std::string& m) { messages.push_back(m); }); }
  ~WarningCapture() { set_warning_handler([](const std::string& m) { fprintf(stderr, "warning: %s\n", m.c_str()); }); }
};

}  // namespace

TEST_CASE("default band-pass design") {
  const Vector k = design_fir_bandpass(1.0, 50.0, 250.0, 1001);
  REQUIRE(k.size() == 1001);
  for (Index i = 0; i < k.size(); ++i) CHECK(k[i] == k[k.size() - 1 - i]);
  for (double f = 5.0; f <= 45.0; f += 0.5) {
    CAPTURE(f);
    CHECK(std::abs(oracle::fir_gain_db(k, f, 250.0)) <= 1.0);
  }
  CHECK(std::abs(oracle::fir_gain_db(k, 25.0, 250.0)) <= 1.0);
  CHECK(oracle::fir_gain_db(k, 60.0, 250.0) <= -40.0);
  CHECK(oracle::fir_gain_db(k, 0.2, 250.0) <= -40.0);
  CHECK_THROWS_AS(design_fir_bandpass(50.0, 1.0, 250.0, 1001), ConfigError);
  CHECK_THROWS_AS(design_fir_bandpass(0.0, 50.0, 250.0, 1001), ConfigError);
  CHECK_THROWS_AS(design_fir_bandpass(1.0, 125.0, 250.0, 1001), ConfigError);
  CHECK_THROWS_AS(design_fir_bandpass(1.0, 50.0, 250.0, 1000), ConfigError);
}

TEST_CASE("apply_fir") {
  Rng rng(1);
  const Matrix x = rng.normal_matrix(3, 400);
  CHECK((apply_fir(make_recording(x, 250.0), Vector::Ones(1)).samples - x).cwiseAbs().maxCoeff() <= 1e-12);

  Vector delta = Vector::Zero(5);
  delta[2] = 1.0;
  const Recording shifted = apply_fir(make_recording(x, 250.0), delta);
  CHECK(shifted.length() == 396);
  CHECK((shifted.samples - x.middleCols(2, 396)).cwiseAbs().maxCoeff() <= 1e-12);

  const Vector k = design_fir_bandpass(1.0, 50.0, 250.0, 1001);
  const Index n = 5000;
  const Matrix in25 = tone_row(25.0, 250.0, n);
  const Recording out25 = apply_fir(make_recording(in25, 250.0), k);
  CHECK(out25.length() == n - 1000);
  CHECK(oracle::correlation(out25.samples.row(0).transpose(), in25.row(0).segment(500, n - 1000).transpose()) >= 0.99);
  const Matrix in80 = tone_row(80.0, 250.0, n);
  const Recording out80 = apply_fir(make_recording(in80, 250.0), k);
  CHECK(oracle::rms(out80.samples.row(0).transpose()) <= 0.01 * oracle::rms(in80.row(0).transpose()));

  CHECK_THROWS_AS(apply_fir(make_recording(rng.normal_matrix(2, 500), 250.0), k), DataError);
}

TEST_CASE("common average reference") {
  Matrix two(2, 1);
  two << 1, 3;
  const Matrix r = common_average_reference(make_recording(two, 250.0)).samples;
  CHECK(r(0, 0) == -1.0);
  CHECK(r(1, 0) == 1.0);
  CHECK(common_average_reference(make_recording(r, 250.0)).samples == r);
  Rng rng(2);
  const Matrix car = common_average_reference(make_recording(rng.normal_matrix(64, 1000), 250.0)).samples;
  CHECK(car.colwise().mean().cwiseAbs().maxCoeff() <= 1e-12);
  CHECK_THROWS_AS(common_average_reference(make_recording(Matrix::Ones(1, 4), 250.0)), DataError);
}

TEST_CASE("resampling") {
  Rng rng(3);
  CHECK(resample(make_recording(rng.normal_matrix(2, 1000), 250.0), 128.0).length() == 512);
  CHECK(resample(make_recording(rng.normal_matrix(1, 1000), 250.0), 128.0).sample_rate == 128.0);
  CHECK_THROWS_AS(resample(make_recording(Matrix::Ones(1, 100), 250.0), 250.0), ConfigError);
  CHECK_THROWS_AS(resample(make_recording(Matrix::Ones(1, 100), 250.0), 300.0), ConfigError);

  const Index n = 2500;
  const Matrix y10 = resample_signal(tone_row(10.0, 250.0, n), 250.0, 128.0);
  CHECK(oracle::correlation(y10.row(0).transpose(), oracle::tone(10.0, 128.0, y10.cols())) >= 0.99);

  const Matrix in100 = tone_row(100.0, 250.0, n);
  const Matrix y100 = resample_signal(in100, 250.0, 128.0);
  const double db = 20.0 * std::log10(oracle::rms(y100.row(0).transpose()) / oracle::rms(in100.row(0).transpose()));
  CHECK(db <= -20.0);

  for (double f : {3.0, 7.0, 12.0, 20.0}) {
    CAPTURE(f);
    const Matrix x = tone_row(f, 250.0, n);
    const Matrix cascade = resample_signal(resample_signal(x, 250.0, 128.0), 128.0, 64.0);
    const Matrix direct = resample_signal(x, 250.0, 64.0);
    REQUIRE(cascade.cols() == direct.cols());
    CHECK(oracle::correlation(cascade.row(0).transpose(), direct.row(0).transpose()) >= 0.99);
  }
}

TEST_CASE("zscore") {
  Matrix x(3, 3);
  x << 1, 2, 3, 5, 5, 5, 0, 0, 1e-9;
  const Matrix z = zscore(x);
  CHECK(z(0, 0) == doctest::Approx(-1.2247448714).epsilon(1e-9));
  CHECK(z(0, 1) == doctest::Approx(0.0));
  CHECK(z(0, 2) == doctest::Approx(1.2247448714).epsilon(1e-9));
  CHECK(z.row(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(z.row(2).cwiseAbs().maxCoeff() == 0.0);
  Rng rng(4);
  for (int i = 0; i < 20; ++i) {
    const Matrix r = zscore(rng.normal_matrix(4, 200) * rng.uniform(0.1, 50.0) + Matrix::Constant(4, 200, rng.uniform(-9, 9)));
    CHECK(r.rowwise().mean().cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(((r.array().square().rowwise().mean()) - 1.0).abs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("split then segment") {
  Rng rng(5);
  SUBCASE("reference counts") {
    const auto sets = split_then_segment(make_recording(rng.normal_matrix(2, 15000), 250.0), SegmentConfig{});
    CHECK(sets[0].size() == 8);
    CHECK(sets[1].size() == 2);
    CHECK(sets[2].size() == 2);
    CHECK(sets[0].window == 2000);
    CHECK(sets[2].window_seconds() == 8.0);
  }
  SUBCASE("no overlap tiles") {
    SegmentConfig c;
    c.overlap = 0.0;
    const auto sets = split_then_segment(make_recording(rng.normal_matrix(1, 15000), 250.0), c);
    for (const auto& s : sets)
      for (std::size_t i = 1; i < s.size(); ++i) CHECK(s.starts[i] - s.starts[i - 1] == s.window);
  }
  SUBCASE("short split is empty with a warning") {
    WarningCapture w;
    const auto sets = split_then_segment(make_recording(rng.normal_matrix(1, 5000), 250.0), SegmentConfig{});
    CHECK(sets[0].size() == 2);
    CHECK(sets[1].size() == 0);
    CHECK(sets[2].size() == 0);
    CHECK(w.messages.size() == 2);
  }
  SUBCASE("segments are the standardized source windows") {
    const Matrix x = rng.normal_matrix(3, 6000);
    SegmentConfig c;
    c.window_s = 2.0;
    const auto sets = split_then_segment(make_recording(x, 250.0), c);
    const auto& s = sets[1];
    REQUIRE(s.size() > 0);
    const Matrix want = zscore(x.middleCols(s.starts[0], s.window)).cast<float>().cast<double>();
    CHECK(s.segments[0].cast<double>() == want);
  }
}

TEST_CASE("window counting and leakage over random configurations") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const double rate = std::vector<double>{64, 128, 250}[trial % 3];
    const Index n = static_cast<Index>(rng.uniform(200, 8000));
    SegmentConfig c;
    c.window_s = rng.uniform(0.1, 10.0);
    c.overlap = rng.uniform(0.0, 0.9);
    const double a = rng.uniform(0.2, 0.8);
    c.ratios = {a, (1 - a) / 2, (1 - a) / 2};
    WarningCapture quiet;
    const auto sets = split_then_segment(make_recording(Matrix::Zero(1, n), rate), c);
    const auto spans = split_spans(n, c.ratios);
    std::array<std::set<Index>, 3> used;
    for (std::size_t s = 0; s < 3; ++s) {
      const Index window = std::llround(c.window_s * rate);
      CHECK(static_cast<Index>(sets[s].size()) ==
            oracle::enumerate_windows(spans[s].size(), window, hop_length(window, c.overlap)));
      for (Index start : sets[s].starts) {
        CHECK(start >= spans[s].begin);
        CHECK(start + sets[s].window <= spans[s].end);
        for (Index i = start; i < start + sets[s].window; ++i) used[s].insert(i);
      }
    }
    for (Index i : used[0]) CHECK_FALSE(used[2].contains(i));
    for (Index i : used[1]) CHECK_FALSE(used[2].contains(i));
    CHECK(spans[0].end <= spans[1].begin);
    CHECK(spans[1].end <= spans[2].begin);
  }
}

TEST_CASE("pipeline determinism and archives") {
  Rng rng(7);
  std::vector<Recording> recs;
  for (int i = 0; i < 3; ++i) {
    Recording r = make_recording(rng.normal_matrix(4, 6000), 250.0, class_labels[i]);
    r.subject_id = "s" + std::to_string(i);
    recs.push_back(r);
  }
  PipelineConfig cfg;
  cfg.segment.window_s = 2.0;
  const auto a = build_segments(recs, cfg, 1);
  const auto b = build_segments(recs, cfg, 3);
  for (std::size_t s = 0; s < 3; ++s) {
    REQUIRE(a[s].size() == b[s].size());
    for (std::size_t i = 0; i < a[s].size(); ++i) CHECK(a[s].segments[i] == b[s].segments[i]);
    CHECK(a[s].labels == b[s].labels);
  }

  const auto dir = std::filesystem::temp_directory_path() / "eegssm_test_segments";
  std::filesystem::create_directories(dir);
  save_segments(a[0], dir / "train");
  const SegmentSet back = load_segments(dir / "train");
  REQUIRE(back.size() == a[0].size());
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back.segments[i] == a[0].segments[i]);
  CHECK(back.labels == a[0].labels);
  CHECK(back.subjects == a[0].subjects);
  CHECK(back.starts == a[0].starts);
  CHECK(back.sample_rate == a[0].sample_rate);
  std::filesystem::resize_file(dir / "train.f32", std::filesystem::file_size(dir / "train.f32") - 4);
  CHECK_THROWS_AS(load_segments(dir / "train"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("pipeline config validation") {
  PipelineConfig c = nlohmann::json({{"window_s", 16.0}}).get<PipelineConfig>();
  CHECK(c.segment.window_s == 16.0);
  CHECK(c.num_taps == 1001);
  try {
    (void)nlohmann::json({{"ratios", {0.6, 0.2, 0.3}}}).get<PipelineConfig>();
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("ratios must sum to 1") != std::string::npos);
  }
  try {
    (void)nlohmann::json({{"windows", 16.0}}).get<PipelineConfig>();
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("window_s") != std::string::npos);
  }
}
