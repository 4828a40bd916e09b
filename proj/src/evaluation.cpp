#include "eegssm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "eegssm/errors.hpp"
#include "eegssm/parallel.hpp"
#include "eegssm/recording.hpp"

namespace eegssm::evaluation {

std::vector<int> argmax_columns(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.cols()));
  for (Index j = 0; j < probs.cols(); ++j) {
    int best = 0;
    for (Index k = 1; k < probs.rows(); ++k)
      if (probs(k, j) > probs(best, j)) best = static_cast<int>(k);
    out[static_cast<std::size_t>(j)] = best;
  }
  return out;
}

Counts confusion_matrix(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes) {
  if (preds.size() != labels.size()) throw ShapeError("confusion_matrix: prediction and label counts differ");
  Counts m = Counts::Zero(num_classes, num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes)
      throw DataError("confusion_matrix: class index out of range");
    ++m(labels[i], preds[i]);
  }
  return m;
}

Scores accuracy_macro_f1(const std::vector<int>& preds, const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw DataError("accuracy_macro_f1: no samples");
  const Counts m = confusion_matrix(preds, labels, num_classes);
  Scores s;
  s.accuracy = static_cast<double>(m.trace()) / static_cast<double>(labels.size());
  for (int k = 0; k < num_classes; ++k) {
    const double tp = static_cast<double>(m(k, k));
    const double predicted = static_cast<double>(m.col(k).sum());
    const double actual = static_cast<double>(m.row(k).sum());
    const double p = predicted > 0 ? tp / predicted : 0.0;
    const double r = actual > 0 ? tp / actual : 0.0;
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(p + r > 0 ? 2 * p * r / (p + r) : 0.0);
  }
  for (double f : s.f1) s.macro_f1 += f;
  s.macro_f1 /= num_classes;
  return s;
}

double movie_confusion_rate(const Counts& confusion, int movie_classes) {
  if (confusion.rows() < movie_classes || confusion.cols() < movie_classes)
    throw ShapeError("movie_confusion_rate: confusion matrix smaller than the movie block");
  long movies = 0;
  long swapped = 0;
  for (int i = 0; i < movie_classes; ++i) {
    movies += confusion.row(i).sum();
    for (int j = 0; j < movie_classes; ++j)
      if (i != j) swapped += confusion(i, j);
  }
  if (movies == 0) throw DataError("movie_confusion_rate: no movie segments");
  return 100.0 * static_cast<double>(swapped) / static_cast<double>(movies);
}

Calibration calibration(const Matrix& probs, const std::vector<int>& labels, int bins) {
  const Index n = probs.cols();
  if (n == 0) throw DataError("calibration: no samples");
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("calibration: label count mismatch");
  if (bins < 1) throw ConfigError("calibration: bins must be positive");
  std::vector<double> bin_conf(static_cast<std::size_t>(bins), 0.0), bin_correct(static_cast<std::size_t>(bins), 0.0);
  Calibration c;
  for (Index j = 0; j < n; ++j) {
    const auto col = probs.col(j);
    if (std::abs(col.sum() - 1.0) > 1e-6) throw DataError("calibration: probabilities do not sum to 1");
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= probs.rows()) throw DataError("calibration: label out of range");
    c.nll -= std::log(std::max(col(y), 1e-12));
    for (Index k = 0; k < probs.rows(); ++k) {
      const double d = col(k) - (k == y ? 1.0 : 0.0);
      c.brier += d * d;
    }
    Index pred = 0;
    for (Index k = 1; k < probs.rows(); ++k)
      if (col(k) > col(pred)) pred = k;
    const double conf = col(pred);
    const auto b = static_cast<std::size_t>(std::clamp(static_cast<int>(conf * bins), 0, bins - 1));
    bin_conf[b] += conf;
    bin_correct[b] += pred == y ? 1.0 : 0.0;
  }
  const double nd = static_cast<double>(n);
  c.nll /= nd;
  c.brier /= nd;
  for (int b = 0; b < bins; ++b) c.ece += std::abs(bin_correct[static_cast<std::size_t>(b)] - bin_conf[static_cast<std::size_t>(b)]);
  c.ece = 100.0 * c.ece / nd;
  return c;
}

EvalReport evaluate(const Matrix& probs, const std::vector<int>& labels) {
  const int k = static_cast<int>(probs.rows());
  const auto preds = argmax_columns(probs);
  const Scores s = accuracy_macro_f1(preds, labels, k);
  const Calibration c = calibration(probs, labels);
  EvalReport r;
  r.n_samples = static_cast<Index>(labels.size());
  r.accuracy = s.accuracy;
  r.macro_f1 = s.macro_f1;
  r.confusion = confusion_matrix(preds, labels, k);
  r.movie_confusion_rate = std::numeric_limits<double>::quiet_NaN();
  if (k >= 3 && r.confusion.topRows(3).sum() > 0) r.movie_confusion_rate = movie_confusion_rate(r.confusion);
  r.nll = c.nll;
  r.brier = c.brier;
  r.ece = c.ece;
  r.precision = s.precision;
  r.recall = s.recall;
  return r;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json confusion = nlohmann::json::array();
  for (Index i = 0; i < r.confusion.rows(); ++i) {
    std::vector<long> row(r.confusion.cols());
    for (Index c = 0; c < r.confusion.cols(); ++c) row[static_cast<std::size_t>(c)] = r.confusion(i, c);
    confusion.push_back(row);
  }
  j = {{"n_samples", r.n_samples}, {"accuracy", r.accuracy}, {"macro_f1", r.macro_f1},
       {"confusion", confusion},   {"nll", r.nll},           {"brier", r.brier},
       {"ece", r.ece},             {"precision", r.precision}, {"recall", r.recall}};
  j["movie_confusion_rate"] = std::isnan(r.movie_confusion_rate) ? nlohmann::json() : nlohmann::json(r.movie_confusion_rate);
}

namespace {

// Continued fraction for the incomplete beta (modified Lentz).
double beta_fraction(double a, double b, double x) {
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-15;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 10000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < eps) return h;
  }
  throw NumericError("incomplete_beta: continued fraction did not converge");
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw ConfigError("incomplete_beta: parameters must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_fraction(a, b, x) / a;
  return 1.0 - front * beta_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (df <= 0.0) throw ConfigError("student_t_cdf: degrees of freedom must be positive");
  if (t == 0.0) return 0.5;
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

TTest t_test_from_summary(double mean, double sd, int n) {
  if (n < 2) throw DataError("paired_t_test: need at least two differences");
  if (!(sd > 0.0)) throw DataError("paired_t_test: degenerate: constant differences");
  TTest r;
  r.df = n - 1.0;
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  // Two-sided tail straight from the incomplete beta keeps precision for large |t|.
  r.p = r.t == 0.0 ? 1.0 : incomplete_beta(0.5 * r.df, 0.5, r.df / (r.df + r.t * r.t));
  return r;
}

TTest paired_t_test(const std::vector<double>& diffs) {
  const auto n = diffs.size();
  if (n < 2) throw DataError("paired_t_test: need at least two differences");
  double mean = 0.0;
  for (double d : diffs) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (sd <= 1e-15 * std::max(1.0, std::abs(mean))) throw DataError("paired_t_test: degenerate: constant differences");
  return t_test_from_summary(mean, sd, static_cast<int>(n));
}

McNemar mcnemar(long b, long c) {
  if (b < 0 || c < 0) throw ConfigError("mcnemar: counts must be non-negative");
  if (b + c == 0) throw DataError("mcnemar: no discordant pairs");
  const double n = static_cast<double>(b + c);
  McNemar r;
  r.chi2 = static_cast<double>((b - c) * (b - c)) / n;
  const long k = std::min(b, c);
  double tail = 0.0;
  for (long i = 0; i <= k; ++i) {
    const double di = static_cast<double>(i);
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(di + 1.0) - std::lgamma(n - di + 1.0) - n * std::log(2.0));
  }
  r.exact_p = std::min(1.0, 2.0 * tail);
  return r;
}

std::pair<long, long> discordant_counts(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct) {
  if (a_correct.size() != b_correct.size()) throw ShapeError("discordant_counts: length mismatch");
  long b = 0, c = 0;
  for (std::size_t i = 0; i < a_correct.size(); ++i) {
    b += a_correct[i] && !b_correct[i];
    c += !a_correct[i] && b_correct[i];
  }
  return {b, c};
}

// ---------------------------------------------------------------- protocols

LosoResult loso_protocol(const std::vector<Recording>& cleaned, const models::ModelSpec& spec,
                         const training::TrainConfig& train, const LosoConfig& config, std::uint64_t seed,
                         int workers) {
  if (config.val_fraction <= 0.0 || config.val_fraction >= 1.0) throw ConfigError("loso: val_fraction must lie in (0, 1)");
  std::vector<const Recording*> usable;
  std::vector<std::pair<std::string, int>> units;
  std::set<std::string> subjects;
  for (const auto& rec : cleaned) {
    if (is_ood(rec.task_label)) continue;
    usable.push_back(&rec);
    subjects.insert(rec.subject_id);
    const std::pair unit{rec.subject_id, rec.session};
    if (std::find(units.begin(), units.end(), unit) == units.end()) units.push_back(unit);
  }
  if (subjects.size() < 2) throw DataError("loso: need at least two subjects");

  const preprocess::SegmentConfig fit_split{{1.0 - config.val_fraction, config.val_fraction, 0.0}, config.window_s,
                                            config.overlap};
  const preprocess::SegmentConfig whole{{0.0, 0.0, 1.0}, config.window_s, config.overlap};

  LosoResult result;
  result.folds.resize(units.size());
  parallel_for(units.size(), workers, [&](std::size_t u) {
    FoldResult& fold = result.folds[u];
    fold.held_out_subject = units[u].first;
    fold.session = units[u].second;
    std::vector<Recording> train_recs, test_recs;
    std::set<std::string> train_subjects;
    for (const Recording* r : usable) {
      if (r->subject_id != fold.held_out_subject) {
        train_recs.push_back(*r);
        train_subjects.insert(r->subject_id);
      } else if (r->session == fold.session) {
        test_recs.push_back(*r);
      }
    }
    fold.train_subjects.assign(train_subjects.begin(), train_subjects.end());
    const auto test = preprocess::segment_all(test_recs, whole)[2];
    const auto fit_sets = preprocess::segment_all(train_recs, fit_split);
    fold.n_test_segments = static_cast<Index>(test.size());
    fold.n_train_segments = static_cast<Index>(fit_sets[0].size());
    if (test.size() == 0 || fit_sets[0].size() == 0 || fit_sets[1].size() == 0) {
      fold.skipped = true;
      fold.note = test.size() == 0 ? "held-out unit yields no segments" : "training subjects yield no train/val segments";
      return;
    }
    auto model = models::make_model(spec);
    const auto fitted = training::fit(*model, fit_sets[0], fit_sets[1], train, seed);
    fold.best_epoch = fitted.best_epoch;
    fold.probs = training::predict_proba(*model, test, train.batch_size);
    fold.labels = test.labels;
    const auto s = accuracy_macro_f1(argmax_columns(fold.probs), fold.labels, static_cast<int>(spec.num_classes));
    fold.accuracy = s.accuracy;
    fold.macro_f1 = s.macro_f1;
  });

  std::vector<double> acc;
  for (const auto& f : result.folds)
    if (!f.skipped) acc.push_back(f.accuracy);
  if (!acc.empty()) {
    const auto summary = training::summarize(acc);
    result.mean = summary.mean;
    result.std = summary.std;
    result.min = *std::min_element(acc.begin(), acc.end());
    result.max = *std::max_element(acc.begin(), acc.end());
  }
  return result;
}

std::vector<RateResult> cross_frequency_protocol(models::SequenceClassifier& model, const std::vector<Recording>& cleaned,
                                                 const preprocess::SegmentConfig& segment,
                                                 const std::vector<double>& rates, int workers) {
  if (cleaned.empty()) throw DataError("crossfreq: no recordings");
  std::vector<Recording> usable;
  for (const auto& r : cleaned)
    if (!is_ood(r.task_label)) usable.push_back(r);
  std::vector<RateResult> out;
  for (double rate : rates) {
    std::vector<Recording> at_rate(usable.size());
    parallel_for(usable.size(), workers, [&](std::size_t i) {
      at_rate[i] = usable[i].sample_rate == rate ? usable[i] : preprocess::resample(usable[i], rate);
    });
    const auto test = preprocess::segment_all(at_rate, segment)[2];
    if (test.size() == 0) throw DataError("crossfreq: no test segments at " + std::to_string(rate) + " Hz");
    if (test.window < model.min_length())
      throw ShapeError("crossfreq: " + std::to_string(test.window) + "-sample windows at " + std::to_string(rate) +
                       " Hz are shorter than the model's minimum input of " + std::to_string(model.min_length()));
    RateResult r;
    r.rate = rate;
    r.window = test.window;
    r.probs = training::predict_proba(model, test);
    r.labels = test.labels;
    const auto s = accuracy_macro_f1(argmax_columns(r.probs), r.labels, static_cast<int>(r.probs.rows()));
    r.accuracy = s.accuracy;
    r.macro_f1 = s.macro_f1;
    out.push_back(std::move(r));
  }
  return out;
}

TaskRow summarize_task(const std::string& task, const Matrix& probs) {
  if (probs.cols() == 0) throw DataError("crosstask: task '" + task + "' has no segments");
  TaskRow row;
  row.task = task;
  row.n_segments = probs.cols();
  row.class_fractions.assign(static_cast<std::size_t>(probs.rows()), 0.0);
  for (int p : argmax_columns(probs)) row.class_fractions[static_cast<std::size_t>(p)] += 1.0;
  for (auto& f : row.class_fractions) f /= static_cast<double>(probs.cols());
  row.dominant_class = static_cast<int>(std::max_element(row.class_fractions.begin(), row.class_fractions.end()) -
                                        row.class_fractions.begin());
  row.mean_confidence = probs.colwise().maxCoeff().mean();
  return row;
}

namespace {

Matrix select_columns(const Matrix& m, const std::vector<Index>& cols) {
  Matrix out(m.rows(), static_cast<Index>(cols.size()));
  for (std::size_t i = 0; i < cols.size(); ++i) out.col(static_cast<Index>(i)) = m.col(cols[i]);
  return out;
}

}  // namespace

std::vector<TaskRow> cross_task_protocol(models::SequenceClassifier& model, const preprocess::SegmentSet& ood,
                                         const preprocess::SegmentSet& control, int batch_size) {
  if (ood.size() == 0) throw DataError("crosstask: empty task set");
  std::vector<TaskRow> rows;
  const Matrix ood_probs = training::predict_proba(model, ood, batch_size);
  std::vector<std::string> order;
  std::map<std::string, std::vector<Index>> groups;
  for (std::size_t i = 0; i < ood.size(); ++i) {
    if (!groups.contains(ood.tasks[i])) order.push_back(ood.tasks[i]);
    groups[ood.tasks[i]].push_back(static_cast<Index>(i));
  }
  for (const auto& task : order) rows.push_back(summarize_task(task, select_columns(ood_probs, groups[task])));

  if (control.size() > 0) {
    const Matrix ctl_probs = training::predict_proba(model, control, batch_size);
    std::map<int, std::vector<Index>> by_class;
    for (std::size_t i = 0; i < control.size(); ++i) by_class[control.labels[i]].push_back(static_cast<Index>(i));
    for (const auto& [label, cols] : by_class) {
      const std::string name = label >= 0 && label < num_classes ? class_labels[static_cast<std::size_t>(label)] : "unknown";
      TaskRow row = summarize_task(name, select_columns(ctl_probs, cols));
      row.control = true;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

}  // namespace eegssm::evaluation
