#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "eegssm/models.hpp"
#include "eegssm/preprocess.hpp"
#include "eegssm/training.hpp"

namespace eegssm::evaluation {

using Counts = Eigen::Matrix<long, Eigen::Dynamic, Eigen::Dynamic>;

// Column-wise argmax of a (classes x samples) probability matrix; ties go to
// the lowest class index.
std::vector<int> argmax_columns(const Matrix& probs);

// Rows are true classes, columns predictions.
Counts confusion_matrix(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes);

struct Scores {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
  std::vector<double> f1;
};
// Classes absent from both labels and predictions score F1 = 0 and still
// count in the macro average.
Scores accuracy_macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes);

// Percentage of true-movie segments predicted as a different movie. Movies
// occupy the leading `movie_classes` rows and columns.
double movie_confusion_rate(const Counts& confusion, int movie_classes = 3);

struct Calibration {
  double nll = 0.0;
  double brier = 0.0;  // summed over classes, averaged over samples
  double ece = 0.0;    // percent
};
// probs is (classes x samples); each column must sum to 1 within 1e-6.
Calibration calibration(const Matrix& probs, const std::vector<int>& labels, int bins = 15);

struct EvalReport {
  Index n_samples = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Counts confusion;
  double movie_confusion_rate = 0.0;  // NaN when no movie segments are present
  double nll = 0.0;
  double brier = 0.0;
  double ece = 0.0;
  std::vector<double> precision;
  std::vector<double> recall;
};
EvalReport evaluate(const Matrix& probs, const std::vector<int>& labels);
void to_json(nlohmann::json& j, const EvalReport& r);

// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};
TTest paired_t_test(const std::vector<double>& diffs);
// Same statistic from summary values (sample standard deviation).
TTest t_test_from_summary(double mean, double sd, int n);

struct McNemar {
  double chi2 = 0.0;   // uncorrected
  double exact_p = 1.0;  // two-sided binomial, capped at 1
};
McNemar mcnemar(long b, long c);
// Discordant counts over paired per-segment correctness: b = only A right,
// c = only B right.
std::pair<long, long> discordant_counts(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct);

// ---------------------------------------------------------------- protocols

struct FoldResult {
  std::string held_out_subject;
  int session = 0;
  bool skipped = false;
  std::string note;
  std::vector<std::string> train_subjects;
  Index n_train_segments = 0;
  Index n_test_segments = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  int best_epoch = 0;
  Matrix probs;
  std::vector<int> labels;
};

struct LosoResult {
  std::vector<FoldResult> folds;
  double mean = 0.0;
  double std = 0.0;  // population
  double min = 0.0;
  double max = 0.0;
};

struct LosoConfig {
  double window_s = 32.0;
  double overlap = 0.5;
  double val_fraction = 0.2;  // internal split of training recordings for early stopping
};

// One fold per (subject, session) unit of `cleaned`; each fold trains on every
// other subject's in-distribution recordings and tests on the whole held-out
// unit. Folds run on up to `workers` threads.
LosoResult loso_protocol(const std::vector<Recording>& cleaned, const models::ModelSpec& spec,
                         const training::TrainConfig& train, const LosoConfig& config, std::uint64_t seed,
                         int workers = 1);

struct RateResult {
  double rate = 0.0;
  Index window = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  Matrix probs;
  std::vector<int> labels;
};

// Resamples each cleaned recording to every rate, re-splits and re-windows at
// the same window seconds, and evaluates the test split zero-shot. A rate equal
// to the recordings' rate skips resampling.
std::vector<RateResult> cross_frequency_protocol(models::SequenceClassifier& model, const std::vector<Recording>& cleaned,
                                                 const preprocess::SegmentConfig& segment,
                                                 const std::vector<double>& rates, int workers = 1);

struct TaskRow {
  std::string task;
  bool control = false;
  Index n_segments = 0;
  int dominant_class = 0;
  double mean_confidence = 0.0;
  std::vector<double> class_fractions;
};

// One row per OOD task in `ood` plus one control row per true class of
// `control` (which may be empty). Dominant-class ties go to the lowest index.
std::vector<TaskRow> cross_task_protocol(models::SequenceClassifier& model, const preprocess::SegmentSet& ood,
                                         const preprocess::SegmentSet& control, int batch_size = 32);
// Same summary from precomputed probabilities.
TaskRow summarize_task(const std::string& task, const Matrix& probs);

}  // namespace eegssm::evaluation
