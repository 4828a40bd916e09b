#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "eegssm/recording.hpp"

// Band-pass filtering, resampling, re-referencing, split-then-segment and
// per-channel standardization of recordings.
namespace eegssm::preprocess {

// Hamming-windowed sinc low-pass with unit DC gain; cutoff in Hz.
Vector design_fir_lowpass(double cutoff_hz, double sample_rate, Index num_taps);
// Difference of two windowed-sinc low-passes, scaled to unit gain at the band
// centre. Symmetric (linear phase).
Vector design_fir_bandpass(double low_hz, double high_hz, double sample_rate, Index num_taps);

// Per-channel valid-mode filtering: (N-1)/2 samples are dropped from each end
// so the output stays aligned with the input timeline.
Recording apply_fir(const Recording& rec, const Vector& kernel);
// Per-row filtering keeping the input length (edges padded by even reflection).
Matrix filter_same(const Matrix& x, const Vector& kernel);

Recording common_average_reference(const Recording& rec);

// Anti-alias low-pass at 0.45 x target (255 taps), then rational polyphase
// interpolation (Hamming-windowed sinc, renormalized per output sample).
// Output length is round(T * target / source).
Recording resample(const Recording& rec, double target_rate);
Matrix resample_signal(const Matrix& x, double source_rate, double target_rate);

// Per channel: zero mean and unit population variance; flat channels map to
// zeros.
Matrix zscore(const Matrix& segment);

struct Span {
  Index begin = 0;
  Index end = 0;
  Index size() const { return end - begin; }
};

// Contiguous, ordered spans with boundaries at round(cumulative_ratio * n).
std::array<Span, 3> split_spans(Index n, const std::array<double, 3>& ratios);
// Start offsets of every window of `window` samples fitting in `span` samples.
std::vector<Index> window_starts(Index span, Index window, Index hop);
Index hop_length(Index window, double overlap);

enum class Split { train = 0, val = 1, test = 2 };
std::string split_name(Split s);

// Windowed, normalized examples. Segments are stored in float32.
struct SegmentSet {
  Split split = Split::train;
  double sample_rate = 0.0;
  Index channels = 0;
  Index window = 0;  // samples per segment
  std::vector<Eigen::MatrixXf> segments;
  std::vector<int> labels;                 // class index, -1 for OOD tasks
  std::vector<std::string> tasks;          // task label of the source recording
  std::vector<std::string> subjects;
  std::vector<int> sessions;
  std::vector<Index> starts;               // first sample in the source recording
  std::vector<int> recordings;             // index of the source recording

  std::size_t size() const { return segments.size(); }
  double window_seconds() const { return static_cast<double>(window) / sample_rate; }
  // Appends every segment of `other` (same split, rate and shape).
  void append(const SegmentSet& other);
  // The selected segments as (channels x indices.size()*window) doubles.
  Matrix batch(const std::vector<std::size_t>& indices) const;
};

struct SegmentConfig {
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  double window_s = 8.0;
  double overlap = 0.5;
};

// Splits one recording into contiguous train/val/test spans, then windows each
// span independently and standardizes every window. A span shorter than one
// window yields an empty set and a warning.
std::array<SegmentSet, 3> split_then_segment(const Recording& rec, const SegmentConfig& config, int recording_index = 0);

struct PipelineConfig {
  double low_hz = 1.0;
  double high_hz = 50.0;
  Index num_taps = 1001;
  double target_rate = 0.0;  // 0 keeps the source rate
  bool rereference = true;
  SegmentConfig segment;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

// filter -> (resample) -> re-reference, on one recording.
Recording clean(const Recording& rec, const PipelineConfig& config);
// clean, then split and segment; returns the three merged splits.
std::array<SegmentSet, 3> build_segments(const std::vector<Recording>& recordings, const PipelineConfig& config,
                                         int workers = 1);
// Segments already cleaned recordings.
std::array<SegmentSet, 3> segment_all(const std::vector<Recording>& cleaned, const SegmentConfig& config);

// `<stem>.f32` (little-endian float32, segment-major, channel-major within a
// segment) and `<stem>.json` sidecar with shape, labels, subjects, split, rate.
void save_segments(const SegmentSet& set, const std::filesystem::path& stem);
SegmentSet load_segments(const std::filesystem::path& stem);

}  // namespace eegssm::preprocess
