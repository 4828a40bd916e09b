#pragma once

#include <string>

#include "eegssm/parameters.hpp"

namespace eegssm {

// In-distribution task labels in class-index order; anything else is an
// out-of-distribution task written as "ood_task:<name>".
inline constexpr const char* class_labels[] = {"movie1", "movie2", "movie3", "resting"};
inline constexpr int num_classes = 4;

// Class index of a task label, or -1 for out-of-distribution tasks.
int class_index(const std::string& task_label);
std::string ood_label(const std::string& task_name);
bool is_ood(const std::string& task_label);

// One continuous multichannel signal (channels x samples).
struct Recording {
  std::string subject_id;
  std::string task_label;
  int session = 0;
  double sample_rate = 0.0;
  Matrix samples;

  Index channels() const { return samples.rows(); }
  Index length() const { return samples.cols(); }
  double duration() const { return static_cast<double>(length()) / sample_rate; }
};

}  // namespace eegssm
