#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "eegssm/recording.hpp"
#include "eegssm/rng.hpp"

// Synthetic multichannel recordings with known class structure, and the
// recording file format.
namespace eegssm::datagen {

// A task: a narrow-band oscillation at `freq_hz` gated by a slow raised-cosine
// envelope of period `envelope_s`. freq_hz == 0 means background noise only.
struct TaskSpec {
  std::string label;
  double freq_hz = 0.0;
  double envelope_s = 0.0;
};

struct SynthConfig {
  int n_subjects = 8;
  int n_sessions = 1;
  int n_channels = 64;
  int n_sources = 4;
  double sample_rate = 250.0;
  double duration_s = 360.0;
  std::vector<TaskSpec> tasks{{"movie1", 6.0, 16.0}, {"movie2", 10.0, 24.0}, {"movie3", 20.0, 48.0}, {"resting", 0.0, 0.0}};
  std::vector<TaskSpec> ood_tasks{{"ood_task:symbol_search", 14.0, 20.0},
                                  {"ood_task:contrast_change", 25.0, 32.0},
                                  {"ood_task:spatial_memory", 8.0, 12.0}};
  double snr_db = 3.0;                // oscillation RMS over unit pink-noise RMS
  double envelope_sharpness = 6.0;    // exponent on the raised cosine
  double subject_variability = 0.6;   // subject mixing deviation relative to the shared pattern
  double sensor_noise = 0.2;          // white sensor noise std relative to unit source noise
};

void to_json(nlohmann::json& j, const TaskSpec& t);
void from_json(const nlohmann::json& j, TaskSpec& t);
void to_json(nlohmann::json& j, const SynthConfig& c);
// Validates band frequencies (< 0.45 x rate) and envelope periods (< duration).
void from_json(const nlohmann::json& j, SynthConfig& c);
void validate(const SynthConfig& c);

// Subject-specific (channels x sources) mixing matrix.
Matrix mixing_matrix(const SynthConfig& config, int subject, std::uint64_t seed);
// Unit-RMS noise with power spectrum proportional to 1/f.
Vector pink_noise(Index length, Rng& rng);
// Raised-cosine envelope ((1 + cos(2 pi t / period + phase)) / 2)^sharpness.
double envelope(double t, double period, double phase, double sharpness);

std::string subject_name(int subject);

// One recording per (subject, session, task), ordered subject-major then
// session then task (in-distribution tasks before OOD tasks). Each recording
// draws from its own stream derived from (seed, subject, task, session), so the
// output does not depend on `workers`.
std::vector<Recording> generate(const SynthConfig& config, std::uint64_t seed, int workers = 1);
Recording generate_one(const SynthConfig& config, std::uint64_t seed, int subject, int session, const TaskSpec& task);

// One JSON header line, then little-endian float32 samples, channel-major.
void write_recording(const std::filesystem::path& path, const Recording& rec);
Recording read_recording(const std::filesystem::path& path);

struct ManifestEntry {
  std::string file;  // relative to the dataset directory
  std::string subject_id;
  std::string task_label;
  int session = 0;
  double sample_rate = 0.0;
  Index n_channels = 0;
  Index n_samples = 0;
};

inline constexpr const char* manifest_name = "manifest.jsonl";

// Writes every recording plus manifest.jsonl into `dir`.
void write_dataset(const std::filesystem::path& dir, const std::vector<Recording>& recordings);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
std::vector<Recording> read_dataset(const std::filesystem::path& dir);

}  // namespace eegssm::datagen
