#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "eegssm/ndarray.hpp"

namespace eegssm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// A named real64 tensor stored as a matrix. Buffers (trainable == false) are
// state such as batch-norm running statistics: checkpointed, never optimized.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other) { *this = other; }
  ParameterSet& operator=(const ParameterSet& other);
  ParameterSet(ParameterSet&&) = default;
  ParameterSet& operator=(ParameterSet&&) = default;

  Parameter& add(std::string name, Matrix value, bool trainable = true);

  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad();
  // Number of trainable scalars.
  Index count_trainable() const;
  // Copies values (not gradients) from a set with identical names and shapes.
  void assign_values(const ParameterSet& other);

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Checkpoint = `<stem>.bin` (concatenated little-endian float64 arrays) plus
// `<stem>.json` manifest listing name, shape, dtype, offset, trainable.
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& stem);
// Loads values into an existing set; names and shapes must match exactly.
void load_checkpoint(ParameterSet& params, const std::filesystem::path& stem);

}  // namespace eegssm
