#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

#include <json.hpp>

#include "eegssm/models.hpp"
#include "eegssm/preprocess.hpp"

namespace eegssm::training {

struct PlateauConfig {
  double factor = 0.5;
  int patience = 5;
  double min_lr = 1e-6;
  double threshold = 1e-4;  // minimum drop in validation loss that counts as improvement
};

struct TrainConfig {
  int max_epochs = 100;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 or infinity disables clipping
  double ema_decay = 0.999;
  // Effective decay min(ema_decay, (1 + step) / (10 + step)) so that short
  // runs do not evaluate near-initial weights.
  bool ema_warmup = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  PlateauConfig plateau;
  int early_stop_patience = 10;
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct AdamState {
  Matrix m;
  Matrix v;
};

// One decoupled-weight-decay Adam update at 1-based `step`:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p.
void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, long step, double lr, double weight_decay,
                double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Scales all trainable gradients by max_norm / norm when the global L2 norm
// exceeds max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterSet& params, double max_norm);

// shadow <- decay * shadow + (1 - decay) * param.
void ema_update(Matrix& shadow, const Matrix& param, double decay);
double ema_effective_decay(double decay, long step, bool warmup);

// Halves (by `factor`) the learning rate once the validation loss has failed
// to improve by `threshold` for `patience` consecutive epochs.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, PlateauConfig config) : lr_(lr), config_(config) {}
  double step(double val_loss);
  double lr() const { return lr_; }

 private:
  double lr_;
  PlateauConfig config_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
};

// Signals a stop after `patience` consecutive epochs without improvement.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience, double threshold = 1e-4) : patience_(patience), threshold_(threshold) {}
  // Returns true when training should stop after this epoch.
  bool step(double val_loss);
  bool improved() const { return improved_; }

 private:
  int patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_epochs_ = 0;
  bool improved_ = false;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct FitResult {
  ParameterSet best;  // EMA weights (and buffers) at the best validation loss
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool early_stopped = false;
};

// Class probabilities (classes x segments) in inference mode.
Matrix predict_proba(models::SequenceClassifier& model, const preprocess::SegmentSet& set, int batch_size = 32);
// Mean cross-entropy and accuracy of probabilities against labels.
std::pair<double, double> loss_and_accuracy(const Matrix& probs, const std::vector<int>& labels);

// Mini-batch training with seeded shuffling, gradient clipping, AdamW, EMA
// shadow weights evaluated on `val` each epoch, plateau scheduling and early
// stopping on validation loss. The model ends holding the best EMA weights.
// A non-finite loss aborts with NumericError carrying a JSON diagnostic.
FitResult fit(models::SequenceClassifier& model, const preprocess::SegmentSet& train, const preprocess::SegmentSet& val,
              const TrainConfig& config, std::uint64_t seed);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};
Summary summarize(const std::vector<double>& values);

}  // namespace eegssm::training
