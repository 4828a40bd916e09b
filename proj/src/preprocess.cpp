#include "eegssm/preprocess.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "eegssm/config_util.hpp"
#include "eegssm/errors.hpp"
#include "eegssm/fft.hpp"
#include "eegssm/log.hpp"
#include "eegssm/parallel.hpp"

namespace eegssm::preprocess {

static_assert(std::endian::native == std::endian::little, "segment archives assume a little-endian host");

namespace {

double hamming(Index i, Index n) {
  return 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
}

double sinc(double x) { return x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x); }

// Windowed ideal low-pass with cutoff `fc` in cycles per sample, not normalized.
Vector windowed_sinc(double fc, Index num_taps) {
  Vector h(num_taps);
  const double centre = static_cast<double>(num_taps - 1) / 2.0;
  // Build the leading half and mirror it so the kernel is exactly symmetric.
  for (Index i = 0; i <= (num_taps - 1) / 2; ++i) {
    h[i] = 2.0 * fc * sinc(2.0 * fc * (static_cast<double>(i) - centre)) * hamming(i, num_taps);
    h[num_taps - 1 - i] = h[i];
  }
  return h;
}

double response_magnitude(const Vector& h, double f_cycles) {
  std::complex<double> acc = 0.0;
  for (Index i = 0; i < h.size(); ++i) acc += h[i] * std::polar(1.0, -2.0 * std::numbers::pi * f_cycles * static_cast<double>(i));
  return std::abs(acc);
}

// Full linear convolution of each row with a real kernel, through FFTs sized
// once for all rows.
Matrix convolve_rows(const Matrix& x, const Vector& kernel) {
  const Index len = x.cols();
  const Index k = kernel.size();
  const Index n = next_pow2(len + k - 1);
  const auto kf = fft_padded(kernel, n);
  Matrix out(x.rows(), len + k - 1);
  // Two real rows share one complex transform: the kernel is real, so the
  // real and imaginary parts of the product stay separate.
  for (Index r = 0; r < x.rows(); r += 2) {
    VectorX<std::complex<double>> f = VectorX<std::complex<double>>::Zero(n);
    f.head(len).real() = x.row(r).transpose();
    if (r + 1 < x.rows()) f.head(len).imag() = x.row(r + 1).transpose();
    fft_inplace(f);
    f.array() *= kf.array();
    fft_inplace(f, true);
    out.row(r) = f.head(len + k - 1).real().transpose();
    if (r + 1 < x.rows()) out.row(r + 1) = f.head(len + k - 1).imag().transpose();
  }
  return out;
}

Index integer_rate(double rate) {
  const double r = std::round(rate);
  if (r < 1.0 || std::abs(rate - r) > 1e-9) throw ConfigError("sample rates must be positive integers in Hz");
  return static_cast<Index>(r);
}

}  // namespace

Vector design_fir_lowpass(double cutoff_hz, double sample_rate, Index num_taps) {
  if (num_taps < 1 || num_taps % 2 == 0) throw ConfigError("FIR length must be odd and positive");
  if (!(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0))
    throw ConfigError("low-pass cutoff must lie in (0, sample_rate / 2)");
  Vector h = windowed_sinc(cutoff_hz / sample_rate, num_taps);
  return h / h.sum();
}

Vector design_fir_bandpass(double low_hz, double high_hz, double sample_rate, Index num_taps) {
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < sample_rate / 2.0))
    throw ConfigError("band edges must satisfy 0 < low < high < sample_rate / 2");
  if (num_taps < 3 || num_taps % 2 == 0) throw ConfigError("FIR length must be odd and at least 3");
  const Vector h = windowed_sinc(high_hz / sample_rate, num_taps) - windowed_sinc(low_hz / sample_rate, num_taps);
  return h / response_magnitude(h, 0.5 * (low_hz + high_hz) / sample_rate);
}

Recording apply_fir(const Recording& rec, const Vector& kernel) {
  const Index n = kernel.size();
  if (n % 2 == 0) throw ConfigError("apply_fir: kernel length must be odd");
  if (rec.length() < n)
    throw DataError("apply_fir: recording of " + std::to_string(rec.length()) + " samples is shorter than the " +
                    std::to_string(n) + "-tap kernel");
  Recording out = rec;
  // Correlation with the kernel; for the symmetric designs this equals convolution.
  out.samples = convolve_rows(rec.samples, kernel.reverse()).middleCols(n - 1, rec.length() - n + 1);
  return out;
}

Matrix filter_same(const Matrix& x, const Vector& kernel) {
  const Index half = (kernel.size() - 1) / 2;
  const Index len = x.cols();
  if (len <= half) throw DataError("filter_same: signal shorter than half the kernel");
  // Even reflection about the end samples keeps tones continuous at the edges.
  Matrix padded(x.rows(), len + 2 * half);
  padded.middleCols(half, len) = x;
  for (Index i = 0; i < half; ++i) {
    padded.col(half - 1 - i) = x.col(i + 1);
    padded.col(half + len + i) = x.col(len - 2 - i);
  }
  return convolve_rows(padded, kernel.reverse()).middleCols(2 * half, len);
}

Recording common_average_reference(const Recording& rec) {
  if (rec.channels() < 2) throw DataError("common average reference needs at least two channels");
  Recording out = rec;
  out.samples.rowwise() -= rec.samples.colwise().mean();
  return out;
}

Matrix resample_signal(const Matrix& x, double source_rate, double target_rate) {
  const Index src = integer_rate(source_rate);
  const Index dst = integer_rate(target_rate);
  if (dst >= src) throw ConfigError("resample: target rate must be below the source rate");
  const Index g = std::gcd(src, dst);
  const Index up = dst / g;
  const Index down = src / g;

  const Matrix smooth = filter_same(x, design_fir_lowpass(0.45 * target_rate, source_rate, 255));

  // Interpolator on the virtual up-sampled grid, normalized per phase.
  constexpr Index zero_crossings = 10;
  const Index span = std::max(up, down);
  const Index taps = 2 * zero_crossings * span + 1;
  const Index centre = taps / 2;
  const Vector h = windowed_sinc(0.5 / static_cast<double>(span), taps);

  // Each output is a weighted sum of the input samples the interpolator
  // covers, with the weights renormalized to sum to one.
  const Index len = x.cols();
  const Index out_len = static_cast<Index>(std::llround(static_cast<double>(len) * static_cast<double>(up) / static_cast<double>(down)));
  Matrix y = Matrix::Zero(x.rows(), out_len);
  for (Index m = 0; m < out_len; ++m) {
    const Index pos = m * down + centre;  // input n meets interpolator tap pos - n*up
    const Index n_lo = std::max<Index>(0, (pos - taps + up) / up);
    const Index n_hi = std::min<Index>(len - 1, pos / up);
    double norm = 0.0;
    for (Index n = n_lo; n <= n_hi; ++n)
      if (const Index k = pos - n * up; k >= 0 && k < taps) norm += h[k];
    for (Index n = n_lo; n <= n_hi; ++n)
      if (const Index k = pos - n * up; k >= 0 && k < taps) y.col(m) += (h[k] / norm) * smooth.col(n);
  }
  return y;
}

Recording resample(const Recording& rec, double target_rate) {
  if (target_rate >= rec.sample_rate) throw ConfigError("resample: target rate must be below the source rate");
  Recording out = rec;
  out.samples = resample_signal(rec.samples, rec.sample_rate, target_rate);
  out.sample_rate = target_rate;
  return out;
}

Matrix zscore(const Matrix& segment) {
  if (segment.cols() < 2) throw ShapeError("zscore: segment needs at least two samples");
  Matrix out(segment.rows(), segment.cols());
  for (Index c = 0; c < segment.rows(); ++c) {
    const double mean = segment.row(c).mean();
    const auto centred = segment.row(c).array() - mean;
    const double var = centred.square().mean();
    if (var < 1e-12)
      out.row(c).setZero();
    else
      out.row(c) = centred / std::sqrt(var);
  }
  return out;
}

std::array<Span, 3> split_spans(Index n, const std::array<double, 3>& ratios) {
  std::array<Span, 3> spans;
  double cum = 0.0;
  Index begin = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    cum += ratios[i];
    const Index end = i == 2 ? n : std::min<Index>(n, static_cast<Index>(std::llround(cum * static_cast<double>(n))));
    spans[i] = {begin, std::max(begin, end)};
    begin = spans[i].end;
  }
  return spans;
}

Index hop_length(Index window, double overlap) {
  return std::max<Index>(1, static_cast<Index>(std::llround(static_cast<double>(window) * (1.0 - overlap))));
}

std::vector<Index> window_starts(Index span, Index window, Index hop) {
  std::vector<Index> starts;
  if (span < window) return starts;
  const Index count = (span - window) / hop + 1;
  for (Index i = 0; i < count; ++i) starts.push_back(i * hop);
  return starts;
}

std::string split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void SegmentSet::append(const SegmentSet& other) {
  if (other.size() == 0) return;
  if (size() == 0 && segments.empty()) {
    sample_rate = other.sample_rate;
    channels = other.channels;
    window = other.window;
  }
  if (other.channels != channels || other.window != window || other.sample_rate != sample_rate)
    throw ShapeError("SegmentSet::append: segment shape or rate mismatch");
  segments.insert(segments.end(), other.segments.begin(), other.segments.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  tasks.insert(tasks.end(), other.tasks.begin(), other.tasks.end());
  subjects.insert(subjects.end(), other.subjects.begin(), other.subjects.end());
  sessions.insert(sessions.end(), other.sessions.begin(), other.sessions.end());
  starts.insert(starts.end(), other.starts.begin(), other.starts.end());
  recordings.insert(recordings.end(), other.recordings.begin(), other.recordings.end());
}

Matrix SegmentSet::batch(const std::vector<std::size_t>& indices) const {
  Matrix out(channels, static_cast<Index>(indices.size()) * window);
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.middleCols(static_cast<Index>(i) * window, window) = segments.at(indices[i]).cast<double>();
  return out;
}

std::array<SegmentSet, 3> split_then_segment(const Recording& rec, const SegmentConfig& config, int recording_index) {
  const Index window = static_cast<Index>(std::llround(config.window_s * rec.sample_rate));
  if (window < 2) throw ConfigError("window must span at least two samples");
  const Index hop = hop_length(window, config.overlap);
  const auto spans = split_spans(rec.length(), config.ratios);
  std::array<SegmentSet, 3> out;
  for (std::size_t s = 0; s < 3; ++s) {
    SegmentSet& set = out[s];
    set.split = static_cast<Split>(s);
    set.sample_rate = rec.sample_rate;
    set.channels = rec.channels();
    set.window = window;
    const auto starts = window_starts(spans[s].size(), window, hop);
    if (starts.empty() && config.ratios[s] > 0.0)
      warn(rec.subject_id + "/" + rec.task_label + ": " + split_name(set.split) + " span of " +
           std::to_string(spans[s].size()) + " samples is shorter than one " + std::to_string(window) +
           "-sample window; split left empty");
    for (Index start : starts) {
      const Index abs = spans[s].begin + start;
      set.segments.push_back(zscore(rec.samples.middleCols(abs, window)).cast<float>());
      set.labels.push_back(class_index(rec.task_label));
      set.tasks.push_back(rec.task_label);
      set.subjects.push_back(rec.subject_id);
      set.sessions.push_back(rec.session);
      set.starts.push_back(abs);
      set.recordings.push_back(recording_index);
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"low_hz", c.low_hz},
       {"high_hz", c.high_hz},
       {"num_taps", c.num_taps},
       {"target_rate", c.target_rate},
       {"rereference", c.rereference},
       {"ratios", c.segment.ratios},
       {"window_s", c.segment.window_s},
       {"overlap", c.segment.overlap}};
}

void from_json(const nlohmann::json& j, PipelineConfig& c) {
  const nlohmann::json full = merge_checked(j, nlohmann::json(c), "preprocess");
  const std::string what = "preprocess";
  c.low_hz = get_field<double>(full, "low_hz", what);
  c.high_hz = get_field<double>(full, "high_hz", what);
  c.num_taps = get_field<Index>(full, "num_taps", what);
  c.target_rate = get_field<double>(full, "target_rate", what);
  c.rereference = get_field<bool>(full, "rereference", what);
  c.segment.ratios = get_field<std::array<double, 3>>(full, "ratios", what);
  c.segment.window_s = get_field<double>(full, "window_s", what);
  c.segment.overlap = get_field<double>(full, "overlap", what);
  double total = 0.0;
  for (double r : c.segment.ratios) {
    if (r < 0.0) throw ConfigError("ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("ratios must sum to 1");
  if (c.segment.window_s <= 0.0) throw ConfigError("window_s must be positive");
  if (c.segment.overlap < 0.0 || c.segment.overlap >= 1.0) throw ConfigError("overlap must lie in [0, 1)");
  if (c.target_rate < 0.0) throw ConfigError("target_rate must be non-negative");
}

Recording clean(const Recording& rec, const PipelineConfig& config) {
  Recording out = apply_fir(rec, design_fir_bandpass(config.low_hz, config.high_hz, rec.sample_rate, config.num_taps));
  if (config.target_rate > 0.0 && config.target_rate != rec.sample_rate) out = resample(out, config.target_rate);
  if (config.rereference) out = common_average_reference(out);
  return out;
}

std::array<SegmentSet, 3> segment_all(const std::vector<Recording>& cleaned, const SegmentConfig& config) {
  std::array<SegmentSet, 3> out;
  for (std::size_t s = 0; s < 3; ++s) out[s].split = static_cast<Split>(s);
  for (std::size_t i = 0; i < cleaned.size(); ++i) {
    const auto parts = split_then_segment(cleaned[i], config, static_cast<int>(i));
    for (std::size_t s = 0; s < 3; ++s) out[s].append(parts[s]);
  }
  return out;
}

std::array<SegmentSet, 3> build_segments(const std::vector<Recording>& recordings, const PipelineConfig& config,
                                         int workers) {
  std::vector<Recording> cleaned(recordings.size());
  parallel_for(recordings.size(), workers, [&](std::size_t i) { cleaned[i] = clean(recordings[i], config); });
  return segment_all(cleaned, config.segment);
}

void save_segments(const SegmentSet& set, const std::filesystem::path& stem) {
  std::filesystem::path bin = stem, meta = stem;
  bin += ".f32";
  meta += ".json";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw DataError("cannot write " + bin.string());
  for (const auto& seg : set.segments) {
    const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = seg;
    out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(float)));
  }
  nlohmann::json j = {{"byte_order", "little"},
                      {"dtype", "float32"},
                      {"shape", {set.size(), set.channels, set.window}},
                      {"split", split_name(set.split)},
                      {"sample_rate", set.sample_rate},
                      {"window_seconds", set.sample_rate > 0 ? set.window_seconds() : 0.0},
                      {"labels", set.labels},
                      {"tasks", set.tasks},
                      {"subjects", set.subjects},
                      {"sessions", set.sessions},
                      {"starts", set.starts},
                      {"recordings", set.recordings}};
  std::ofstream(meta) << j.dump(1) << '\n';
}

SegmentSet load_segments(const std::filesystem::path& stem) {
  std::filesystem::path bin = stem, meta = stem;
  bin += ".f32";
  meta += ".json";
  std::ifstream mf(meta);
  if (!mf) throw DataError("missing segment sidecar " + meta.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed segment sidecar " + meta.string() + ": " + e.what());
  }
  SegmentSet set;
  const auto shape = j.at("shape").get<std::array<Index, 3>>();
  const std::string split = j.at("split").get<std::string>();
  set.split = split == "train" ? Split::train : split == "val" ? Split::val : Split::test;
  set.sample_rate = j.at("sample_rate").get<double>();
  set.channels = shape[1];
  set.window = shape[2];
  set.labels = j.at("labels").get<std::vector<int>>();
  set.tasks = j.at("tasks").get<std::vector<std::string>>();
  set.subjects = j.at("subjects").get<std::vector<std::string>>();
  set.sessions = j.at("sessions").get<std::vector<int>>();
  set.starts = j.at("starts").get<std::vector<Index>>();
  set.recordings = j.at("recordings").get<std::vector<int>>();
  const auto per = static_cast<std::uintmax_t>(shape[1] * shape[2]) * sizeof(float);
  const auto expected = per * static_cast<std::uintmax_t>(shape[0]);
  if (!std::filesystem::exists(bin) || std::filesystem::file_size(bin) != expected)
    throw DataError("segment archive " + bin.string() + " does not hold " + std::to_string(expected) + " bytes");
  std::ifstream in(bin, std::ios::binary);
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(shape[1], shape[2]);
  for (Index i = 0; i < shape[0]; ++i) {
    in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(per));
    set.segments.emplace_back(rm);
  }
  return set;
}

}  // namespace eegssm::preprocess
