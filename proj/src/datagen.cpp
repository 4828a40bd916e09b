#include "eegssm/datagen.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "eegssm/config_util.hpp"
#include "eegssm/errors.hpp"
#include "eegssm/fft.hpp"
#include "eegssm/parallel.hpp"

namespace eegssm::datagen {

static_assert(std::endian::native == std::endian::little, "recording I/O assumes a little-endian host");

void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"label", t.label}, {"freq_hz", t.freq_hz}, {"envelope_s", t.envelope_s}};
}

void from_json(const nlohmann::json& j, TaskSpec& t) {
  const nlohmann::json full = merge_checked(j, nlohmann::json(TaskSpec{}), "task");
  t.label = get_field<std::string>(full, "label", "task");
  t.freq_hz = get_field<double>(full, "freq_hz", "task");
  t.envelope_s = get_field<double>(full, "envelope_s", "task");
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_subjects", c.n_subjects},
       {"n_sessions", c.n_sessions},
       {"n_channels", c.n_channels},
       {"n_sources", c.n_sources},
       {"sample_rate", c.sample_rate},
       {"duration_s", c.duration_s},
       {"tasks", c.tasks},
       {"ood_tasks", c.ood_tasks},
       {"snr_db", c.snr_db},
       {"envelope_sharpness", c.envelope_sharpness},
       {"subject_variability", c.subject_variability},
       {"sensor_noise", c.sensor_noise}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  const nlohmann::json full = merge_checked(j, nlohmann::json(c), "synth");
  const std::string w = "synth";
  c.n_subjects = get_field<int>(full, "n_subjects", w);
  c.n_sessions = get_field<int>(full, "n_sessions", w);
  c.n_channels = get_field<int>(full, "n_channels", w);
  c.n_sources = get_field<int>(full, "n_sources", w);
  c.sample_rate = get_field<double>(full, "sample_rate", w);
  c.duration_s = get_field<double>(full, "duration_s", w);
  c.tasks = get_field<std::vector<TaskSpec>>(full, "tasks", w);
  c.ood_tasks = get_field<std::vector<TaskSpec>>(full, "ood_tasks", w);
  c.snr_db = get_field<double>(full, "snr_db", w);
  c.envelope_sharpness = get_field<double>(full, "envelope_sharpness", w);
  c.subject_variability = get_field<double>(full, "subject_variability", w);
  c.sensor_noise = get_field<double>(full, "sensor_noise", w);
  validate(c);
}

void validate(const SynthConfig& c) {
  if (c.n_subjects < 1 || c.n_sessions < 1 || c.n_channels < 2 || c.n_sources < 1)
    throw ConfigError("synth: counts must be positive (at least two channels)");
  if (c.sample_rate <= 0.0 || c.duration_s <= 0.0) throw ConfigError("synth: rate and duration must be positive");
  if (c.tasks.size() != static_cast<std::size_t>(num_classes))
    throw ConfigError("synth: exactly " + std::to_string(num_classes) + " in-distribution tasks are required");
  for (std::size_t i = 0; i < c.tasks.size(); ++i)
    if (c.tasks[i].label != class_labels[i])
      throw ConfigError("synth: task " + std::to_string(i) + " must be labelled '" + class_labels[i] + "'");
  for (const auto& t : c.ood_tasks)
    if (!is_ood(t.label)) throw ConfigError("synth: OOD task '" + t.label + "' reuses an in-distribution label");
  auto check = [&](const TaskSpec& t) {
    if (t.freq_hz < 0.0 || t.freq_hz >= 0.45 * c.sample_rate)
      throw ConfigError("synth: band frequency of '" + t.label + "' must lie in [0, 0.45 x sample_rate)");
    if (t.freq_hz > 0.0 && (t.envelope_s <= 0.0 || t.envelope_s >= c.duration_s))
      throw ConfigError("synth: envelope period of '" + t.label + "' must lie in (0, duration_s)");
  };
  for (const auto& t : c.tasks) check(t);
  for (const auto& t : c.ood_tasks) check(t);
  if (c.envelope_sharpness < 0.0 || c.subject_variability < 0.0 || c.sensor_noise < 0.0)
    throw ConfigError("synth: sharpness, variability and noise must be non-negative");
}

std::string subject_name(int subject) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%02d", subject + 1);
  return buf;
}

Matrix mixing_matrix(const SynthConfig& config, int subject, std::uint64_t seed) {
  Rng shared(derive_seed(seed, {hash_string("mixing-shared")}));
  Rng own(derive_seed(seed, {hash_string("mixing-subject"), static_cast<std::uint64_t>(subject)}));
  const Matrix base = shared.normal_matrix(config.n_channels, config.n_sources);
  Matrix m = base + config.subject_variability * own.normal_matrix(config.n_channels, config.n_sources);
  // Unit-norm columns keep every source at the same sensor-level power.
  for (Index k = 0; k < m.cols(); ++k) m.col(k) *= std::sqrt(static_cast<double>(config.n_channels)) / m.col(k).norm();
  return m;
}

Vector pink_noise(Index length, Rng& rng) {
  const Index n = next_pow2(length);
  VectorX<std::complex<double>> f(n);
  for (Index i = 0; i < n; ++i) f[i] = rng.normal();
  fft_inplace(f);
  f[0] = 0.0;
  for (Index k = 1; k < n; ++k) {
    const Index freq = std::min(k, n - k);
    f[k] /= std::sqrt(static_cast<double>(freq));
  }
  fft_inplace(f, true);
  Vector x = f.head(length).real();
  x.array() -= x.mean();
  return x / std::sqrt(x.squaredNorm() / static_cast<double>(length));
}

double envelope(double t, double period, double phase, double sharpness) {
  return std::pow(0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * t / period + phase)), sharpness);
}

Recording generate_one(const SynthConfig& config, std::uint64_t seed, int subject, int session, const TaskSpec& task) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(subject), hash_string(task.label), static_cast<std::uint64_t>(session)}));
  const Index len = static_cast<Index>(std::llround(config.duration_s * config.sample_rate));
  Matrix sources(config.n_sources, len);
  for (Index k = 0; k < config.n_sources; ++k) sources.row(k) = pink_noise(len, rng).transpose();
  if (task.freq_hz > 0.0) {
    const double amp = std::sqrt(2.0) * std::pow(10.0, config.snr_db / 20.0);
    const double carrier_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double env_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (Index t = 0; t < len; ++t) {
      const double time = static_cast<double>(t) / config.sample_rate;
      sources(0, t) += amp * envelope(time, task.envelope_s, env_phase, config.envelope_sharpness) *
                       std::sin(2.0 * std::numbers::pi * task.freq_hz * time + carrier_phase);
    }
  }
  Recording rec;
  rec.subject_id = subject_name(subject);
  rec.task_label = task.label;
  rec.session = session;
  rec.sample_rate = config.sample_rate;
  rec.samples = mixing_matrix(config, subject, seed) * sources / std::sqrt(static_cast<double>(config.n_sources)) +
                rng.normal_matrix(config.n_channels, len, config.sensor_noise);
  // Stored as float32 on disk; quantize here so files round-trip exactly.
  rec.samples = rec.samples.cast<float>().cast<double>();
  return rec;
}

std::vector<Recording> generate(const SynthConfig& config, std::uint64_t seed, int workers) {
  validate(config);
  struct Job {
    int subject, session;
    const TaskSpec* task;
  };
  std::vector<Job> jobs;
  for (int s = 0; s < config.n_subjects; ++s)
    for (int e = 0; e < config.n_sessions; ++e) {
      for (const auto& t : config.tasks) jobs.push_back({s, e, &t});
      for (const auto& t : config.ood_tasks) jobs.push_back({s, e, &t});
    }
  std::vector<Recording> out(jobs.size());
  parallel_for(jobs.size(), workers,
               [&](std::size_t i) { out[i] = generate_one(config, seed, jobs[i].subject, jobs[i].session, *jobs[i].task); });
  return out;
}

void write_recording(const std::filesystem::path& path, const Recording& rec) {
  const nlohmann::json header = {{"subject_id", rec.subject_id},   {"task_label", rec.task_label},
                                 {"session", rec.session},         {"sample_rate", rec.sample_rate},
                                 {"n_channels", rec.channels()},   {"n_samples", rec.length()},
                                 {"byte_order", "little"},         {"dtype", "float32"}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write recording " + path.string());
  out << header.dump() << '\n';
  const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> body = rec.samples.cast<float>();
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size() * sizeof(float)));
  if (!out) throw DataError("failed writing recording " + path.string());
}

Recording read_recording(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open recording " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("corrupt recording " + path.string() + ": missing header line");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt recording " + path.string() + ": unreadable header (" + e.what() + ")");
  }
  Recording rec;
  Index channels = 0, samples = 0;
  try {
    rec.subject_id = h.at("subject_id").get<std::string>();
    rec.task_label = h.at("task_label").get<std::string>();
    rec.session = h.value("session", 0);
    rec.sample_rate = h.at("sample_rate").get<double>();
    channels = h.at("n_channels").get<Index>();
    samples = h.at("n_samples").get<Index>();
    if (h.value("byte_order", "little") != "little" || h.value("dtype", "float32") != "float32")
      throw DataError("corrupt recording " + path.string() + ": only little-endian float32 bodies are supported");
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt recording " + path.string() + ": incomplete header (" + e.what() + ")");
  }
  const auto body_offset = static_cast<std::uintmax_t>(line.size() + 1);
  const auto expected = static_cast<std::uintmax_t>(channels * samples) * sizeof(float);
  const auto file_size = std::filesystem::file_size(path);
  const auto actual = file_size >= body_offset ? file_size - body_offset : 0;
  if (actual != expected)
    throw DataError("corrupt recording " + path.string() + ": header declares " + std::to_string(expected) +
                    " body bytes at offset " + std::to_string(body_offset) + ", found " + std::to_string(actual) +
                    " (file ends at byte " + std::to_string(file_size) + ")");
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> body(channels, samples);
  in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(expected));
  rec.samples = body.cast<double>();
  if (!rec.samples.allFinite()) throw DataError("recording " + path.string() + " contains non-finite samples");
  return rec;
}

namespace {

std::string file_name(const Recording& r) {
  std::string task = r.task_label;
  for (char& c : task)
    if (c == ':') c = '-';
  return r.subject_id + "_ses-" + std::to_string(r.session) + "_" + task + ".rec";
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const std::vector<Recording>& recordings) {
  std::filesystem::create_directories(dir);
  std::string manifest;
  for (const auto& r : recordings) {
    const std::string name = file_name(r);
    write_recording(dir / name, r);
    manifest += nlohmann::json{{"file", name},
                               {"subject_id", r.subject_id},
                               {"task_label", r.task_label},
                               {"session", r.session},
                               {"sample_rate", r.sample_rate},
                               {"n_channels", r.channels()},
                               {"n_samples", r.length()}}
                    .dump() +
                '\n';
  }
  std::ofstream(dir / manifest_name) << manifest;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / manifest_name);
  if (!in) throw DataError("no dataset at " + dir.string() + " (missing " + manifest_name + "); run `synth` first");
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("file").get<std::string>(), j.at("subject_id").get<std::string>(),
                     j.at("task_label").get<std::string>(), j.value("session", 0), j.at("sample_rate").get<double>(),
                     j.at("n_channels").get<Index>(), j.at("n_samples").get<Index>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError("malformed manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Recording> read_dataset(const std::filesystem::path& dir) {
  std::vector<Recording> out;
  for (const auto& e : read_manifest(dir)) out.push_back(read_recording(dir / e.file));
  return out;
}

}  // namespace eegssm::datagen
