#include "eegssm/training.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "eegssm/array_ops.hpp"
#include "eegssm/config_util.hpp"
#include "eegssm/errors.hpp"

namespace eegssm::training {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"max_epochs", c.max_epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"ema_decay", c.ema_decay},
       {"ema_warmup", c.ema_warmup},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"plateau_factor", c.plateau.factor},
       {"plateau_patience", c.plateau.patience},
       {"min_lr", c.plateau.min_lr},
       {"improvement_threshold", c.plateau.threshold},
       {"early_stop_patience", c.early_stop_patience},
       {"seeds", c.seeds}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const nlohmann::json full = merge_checked(j, nlohmann::json(c), "train");
  const std::string w = "train";
  c.max_epochs = get_field<int>(full, "max_epochs", w);
  c.batch_size = get_field<int>(full, "batch_size", w);
  c.lr = get_field<double>(full, "lr", w);
  c.weight_decay = get_field<double>(full, "weight_decay", w);
  c.clip_norm = get_field<double>(full, "clip_norm", w);
  c.ema_decay = get_field<double>(full, "ema_decay", w);
  c.ema_warmup = get_field<bool>(full, "ema_warmup", w);
  c.beta1 = get_field<double>(full, "beta1", w);
  c.beta2 = get_field<double>(full, "beta2", w);
  c.eps = get_field<double>(full, "eps", w);
  c.plateau.factor = get_field<double>(full, "plateau_factor", w);
  c.plateau.patience = get_field<int>(full, "plateau_patience", w);
  c.plateau.min_lr = get_field<double>(full, "min_lr", w);
  c.plateau.threshold = get_field<double>(full, "improvement_threshold", w);
  c.early_stop_patience = get_field<int>(full, "early_stop_patience", w);
  c.seeds = get_field<std::vector<std::uint64_t>>(full, "seeds", w);
  if (c.max_epochs < 1 || c.batch_size < 1 || c.lr <= 0.0 || c.eps <= 0.0 || c.plateau.patience < 1 ||
      c.early_stop_patience < 1 || c.plateau.min_lr <= 0.0)
    throw ConfigError("train: epochs, batch size, lr, eps, patience and min_lr must be positive");
  if (c.weight_decay < 0.0 || c.plateau.threshold < 0.0) throw ConfigError("train: weight_decay and threshold must be non-negative");
  if (c.ema_decay < 0.0 || c.ema_decay > 1.0) throw ConfigError("train: ema_decay must lie in [0, 1]");
  if (c.plateau.factor <= 0.0 || c.plateau.factor >= 1.0) throw ConfigError("train: plateau_factor must lie in (0, 1)");
  if (c.seeds.empty()) throw ConfigError("train: seeds must be non-empty");
}

void adamw_step(Matrix& param, const Matrix& grad, AdamState& state, long step, double lr, double weight_decay,
                double beta1, double beta2, double eps) {
  if (grad.rows() != param.rows() || grad.cols() != param.cols()) throw ShapeError("adamw_step: gradient shape mismatch");
  if (state.m.size() == 0) {
    state.m = Matrix::Zero(param.rows(), param.cols());
    state.v = Matrix::Zero(param.rows(), param.cols());
  }
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  const Matrix update = (state.m / c1).array() / ((state.v / c2).array().sqrt() + eps);
  param = param - lr * update - lr * weight_decay * param;
}

double clip_grad_norm(ParameterSet& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.trainable && p.grad.size() > 0) sq += p.grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && std::isfinite(max_norm) && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      if (p.trainable && p.grad.size() > 0) p.grad *= s;
  }
  return norm;
}

void ema_update(Matrix& shadow, const Matrix& param, double decay) {
  if (decay == 0.0)
    shadow = param;
  else if (decay != 1.0)
    shadow = decay * shadow + (1.0 - decay) * param;
}

double ema_effective_decay(double decay, long step, bool warmup) {
  if (!warmup) return decay;
  return std::min(decay, (1.0 + static_cast<double>(step)) / (10.0 + static_cast<double>(step)));
}

double PlateauScheduler::step(double val_loss) {
  if (val_loss < best_ - config_.threshold) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else if (++bad_epochs_ >= config_.patience) {
    lr_ = std::max(config_.min_lr, lr_ * config_.factor);
    bad_epochs_ = 0;
  }
  return lr_;
}

bool EarlyStopper::step(double val_loss) {
  improved_ = val_loss < best_ - threshold_;
  if (improved_) {
    best_ = val_loss;
    bad_epochs_ = 0;
  } else {
    ++bad_epochs_;
  }
  return bad_epochs_ >= patience_;
}

Matrix predict_proba(models::SequenceClassifier& model, const preprocess::SegmentSet& set, int batch_size) {
  Matrix probs(model.spec().num_classes, static_cast<Index>(set.size()));
  for (std::size_t start = 0; start < set.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(set.size(), start + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    probs.middleCols(static_cast<Index>(start), static_cast<Index>(idx.size())) =
        model.predict_proba(set.batch(idx), static_cast<Index>(idx.size()));
  }
  return probs;
}

std::pair<double, double> loss_and_accuracy(const Matrix& probs, const std::vector<int>& labels) {
  if (labels.empty()) throw DataError("loss_and_accuracy: no samples");
  double loss = 0.0;
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const Index col = static_cast<Index>(i);
    loss -= std::log(std::max(probs(labels[i], col), 1e-12));
    Index arg = 0;
    probs.col(col).maxCoeff(&arg);
    correct += arg == labels[i];
  }
  const double n = static_cast<double>(labels.size());
  return {loss / n, correct / n};
}

namespace {

// JSON has no inf or nan, so those are spelled out.
nlohmann::json number(double v) {
  if (std::isfinite(v)) return v;
  return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
}

nlohmann::json nan_diagnostic(int epoch, std::size_t batch, double loss, const ParameterSet& params) {
  nlohmann::json norms = nlohmann::json::object();
  for (const auto& p : params) {
    norms[p.name] = {{"value_norm", number(p.value.norm())},
                     {"grad_norm", number(p.grad.size() ? p.grad.norm() : 0.0)},
                     {"finite", p.value.allFinite()}};
  }
  return {{"event", "non-finite loss"}, {"epoch", epoch}, {"batch", batch},
          {"loss", number(loss)}, {"parameters", norms}};
}

}  // namespace

FitResult fit(models::SequenceClassifier& model, const preprocess::SegmentSet& train, const preprocess::SegmentSet& val,
              const TrainConfig& config, std::uint64_t seed) {
  if (train.size() == 0) throw DataError("fit: empty training set");
  if (val.size() == 0) throw DataError("fit: empty validation set");
  for (int l : train.labels)
    if (l < 0 || l >= model.spec().num_classes) throw DataError("fit: training label outside the model's classes");

  ParameterSet& params = model.params();
  Rng shuffle_rng(derive_seed(seed, {hash_string("shuffle")}));
  Rng dropout_rng(derive_seed(seed, {hash_string("dropout")}));
  std::vector<AdamState> adam(params.size());
  ParameterSet shadow = params;
  PlateauScheduler scheduler(config.lr, config.plateau);
  EarlyStopper stopper(config.early_stop_patience, config.plateau.threshold);
  FitResult result;
  long step = 0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const double lr = scheduler.lr();
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += bs, ++batch_no) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + bs)));
      std::vector<int> labels;
      for (auto i : idx) labels.push_back(train.labels[i]);
      params.zero_grad();
      ad::Graph g;
      ad::Var logits = model.forward(g, train.batch(idx), static_cast<Index>(idx.size()), ad::Mode{true, &dropout_rng});
      if (!logits.value().allFinite()) {
        throw NumericError(nan_diagnostic(epoch, batch_no, std::numeric_limits<double>::quiet_NaN(), params).dump());
      }
      ad::Var loss = ad::cross_entropy(logits, labels);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) throw NumericError(nan_diagnostic(epoch, batch_no, value, params).dump());
      g.backward(loss);
      clip_grad_norm(params, config.clip_norm);
      ++step;
      const double decay = ema_effective_decay(config.ema_decay, step, config.ema_warmup);
      for (std::size_t p = 0; p < params.size(); ++p) {
        if (params[p].trainable) {
          adamw_step(params[p].value, params[p].grad, adam[p], step, lr, config.weight_decay, config.beta1, config.beta2,
                     config.eps);
          ema_update(shadow[p].value, params[p].value, decay);
        } else {
          shadow[p].value = params[p].value;
        }
      }
      loss_sum += value * static_cast<double>(idx.size());
      seen += idx.size();
    }

    // Validate on the shadow weights.
    ParameterSet live = params;
    params.assign_values(shadow);
    const auto [val_loss, val_acc] = loss_and_accuracy(predict_proba(model, val, config.batch_size), val.labels);
    params.assign_values(live);
    if (!std::isfinite(val_loss)) throw NumericError(nan_diagnostic(epoch, 0, val_loss, params).dump());

    result.history.push_back({epoch, loss_sum / static_cast<double>(seen), val_loss, val_acc, lr});
    const bool stop = stopper.step(val_loss);
    if (stopper.improved()) {
      result.best = shadow;
      result.best_epoch = epoch;
      result.best_val_loss = val_loss;
    }
    scheduler.step(val_loss);
    if (stop) {
      result.early_stopped = true;
      break;
    }
  }
  if (result.best_epoch == 0) result.best = shadow;
  params.assign_values(result.best);
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(10);
  out << "epoch,train_loss,val_loss,val_acc,lr\n";
  for (const auto& r : history) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_acc << ',' << r.lr << '\n';
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw DataError("summarize: no values");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / n)};
}

}  // namespace eegssm::training
