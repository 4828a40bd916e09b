#include "eegssm/recording.hpp"

namespace eegssm {

namespace {
constexpr const char* ood_prefix = "ood_task:";
}

int class_index(const std::string& task_label) {
  for (int i = 0; i < num_classes; ++i)
    if (task_label == class_labels[i]) return i;
  return -1;
}

std::string ood_label(const std::string& task_name) { return ood_prefix + task_name; }

bool is_ood(const std::string& task_label) { return class_index(task_label) < 0; }

}  // namespace eegssm
