#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "eegssm/ops.hpp"
#include "eegssm/parameters.hpp"

// The five sequence classifiers. Every model maps a batch of multichannel
// windows, laid out as (channels x batch*T), to class logits (classes x batch).
namespace eegssm::models {

enum class Kind { s5, s4, cnn, lstm, eegxf };

Kind parse_kind(const std::string& name);
std::string kind_name(Kind kind);

struct ModelSpec {
  Kind kind = Kind::s5;
  Index in_channels = 64;
  Index num_classes = 4;
  // s5/s4: model dim H; lstm: hidden units per direction; eegxf: model dim d.
  Index hidden = 192;
  // s5/s4: complex states per direction.
  Index state = 32;
  // s5/s4 blocks, lstm layers, eegxf encoder layers.
  Index layers = 3;
  // eegxf only.
  Index heads = 4;
  Index feedforward = 256;
  Index patch = 8;
  double input_gain = 2.0;
  // cnn only: output channels of each conv stage and the (odd) kernel size.
  std::vector<Index> channels{256, 512, 512};
  Index kernel = 11;
  double dropout = 0.1;
  std::uint64_t seed = 0;

  // Full-size configuration of each architecture.
  static ModelSpec paper(Kind kind);
  // Reduced configuration trainable on one CPU core.
  static ModelSpec desk(Kind kind);
  // Smallest configuration exercising every code path (gradient checks).
  static ModelSpec tiny(Kind kind);
};

void to_json(nlohmann::json& j, const ModelSpec& spec);
void from_json(const nlohmann::json& j, ModelSpec& spec);

class SequenceClassifier {
 public:
  explicit SequenceClassifier(ModelSpec spec) : spec_(std::move(spec)) {}
  virtual ~SequenceClassifier() = default;
  SequenceClassifier(const SequenceClassifier&) = delete;
  SequenceClassifier& operator=(const SequenceClassifier&) = delete;

  // x is (in_channels x batch*T). Returns logits (num_classes x batch).
  virtual ad::Var forward(ad::Graph& g, const Matrix& x, Index batch, const ad::Mode& mode) = 0;
  // Shortest admissible window in samples.
  virtual Index min_length() const { return 1; }

  // Inference-mode logits and class probabilities (num_classes x batch).
  Matrix logits(const Matrix& x, Index batch);
  Matrix predict_proba(const Matrix& x, Index batch);

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  const ModelSpec& spec() const { return spec_; }
  Index count_params() const { return params_.count_trainable(); }

 protected:
  ModelSpec spec_;
  ParameterSet params_;
};

std::unique_ptr<SequenceClassifier> make_model(const ModelSpec& spec);

// Registration helpers shared by the model implementations.
namespace detail {

// Weight (out x in) ~ N(0, gain / fan_in) and zero bias (out x 1).
void add_linear(ParameterSet& ps, Rng& rng, const std::string& name, Index in, Index out, double gain = 1.0);
ad::Var linear(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x);
void add_norm(ParameterSet& ps, const std::string& name, Index dim, bool running_stats);
ad::Var layer_norm(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x);
ad::Var batch_norm(ad::Graph& g, ParameterSet& ps, const std::string& name, ad::Var x, const ad::Mode& mode);

}  // namespace detail

}  // namespace eegssm::models
