#include "eegssm/cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>

#include "eegssm/config_util.hpp"
#include "eegssm/datagen.hpp"
#include "eegssm/errors.hpp"
#include "eegssm/evaluation.hpp"
#include "eegssm/log.hpp"
#include "eegssm/parallel.hpp"
#include "eegssm/recording.hpp"
#include "eegssm/rng.hpp"
#include "eegssm/training.hpp"

namespace eegssm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ------------------------------------------------------------------ config

training::TrainConfig desk_train_defaults() {
  training::TrainConfig t;
  t.max_epochs = 30;
  t.batch_size = 16;
  t.lr = 3e-3;
  return t;
}

preprocess::PipelineConfig desk_pipeline_defaults() {
  preprocess::PipelineConfig p;
  p.target_rate = 64.0;
  return p;
}

models::ModelSpec preset_spec(const std::string& preset, models::Kind kind) {
  if (preset == "paper") return models::ModelSpec::paper(kind);
  if (preset == "desk") return models::ModelSpec::desk(kind);
  if (preset == "tiny") return models::ModelSpec::tiny(kind);
  throw ConfigError("unknown preset '" + preset + "' (valid: paper, desk, tiny)");
}

json section(const json& user, const json& defaults, const std::string& name) {
  return user.contains(name) ? merge_checked(user.at(name), defaults.at(name), name) : defaults.at(name);
}

std::vector<models::Kind> model_kinds(const json& config) {
  std::vector<models::Kind> kinds;
  for (const auto& name : config.at("models")) kinds.push_back(models::parse_kind(name.get<std::string>()));
  return kinds;
}

models::ModelSpec model_spec(const json& config, models::Kind kind, Index channels, std::uint64_t seed) {
  json base = preset_spec(config.at("preset").get<std::string>(), kind);
  const auto& overrides = config.at("model_overrides");
  const std::string name = models::kind_name(kind);
  if (overrides.contains(name)) base = merge_checked(overrides.at(name), base, "model_overrides." + name);
  auto spec = base.get<models::ModelSpec>();
  spec.in_channels = channels;
  spec.num_classes = num_classes;
  spec.seed = seed;
  return spec;
}

std::uint64_t run_seed(const json& config, std::uint64_t train_seed) {
  return derive_seed(config.at("seed").get<std::uint64_t>(), {hash_string("train"), train_seed});
}

// ----------------------------------------------------------------- hashing

std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", md[i]);
    hex += buf;
  }
  return hex;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << content;
  }
  fs::rename(tmp, path);
}

// Per-file blob hashes plus a combined hash over the sorted listing.
json hash_inputs(const std::vector<fs::path>& files, const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> entries;
  for (const auto& f : files) entries.emplace_back(fs::relative(f, root).generic_string(), git_blob_hash(read_file(f)));
  std::sort(entries.begin(), entries.end());
  std::string listing;
  json per_file = json::object();
  for (const auto& [name, hash] : entries) {
    listing += hash + "  " + name + "\n";
    per_file[name] = hash;
  }
  return {{"content_hash", git_blob_hash(listing)}, {"files", per_file}};
}

// -------------------------------------------------------------------- data

struct Dataset {
  std::vector<Recording> cleaned;
  json inputs;
};

Dataset load_cleaned(const json& config, double target_rate, int workers) {
  const fs::path dir = config.at("data_dir").get<std::string>();
  const auto manifest = datagen::read_manifest(dir);
  std::vector<fs::path> files{dir / datagen::manifest_name};
  for (const auto& e : manifest) files.push_back(dir / e.file);
  Dataset d;
  d.inputs = hash_inputs(files, dir);
  const auto raw = datagen::read_dataset(dir);
  auto pipeline = config.at("pipeline").get<preprocess::PipelineConfig>();
  pipeline.target_rate = target_rate;
  d.cleaned.resize(raw.size());
  parallel_for(raw.size(), workers, [&](std::size_t i) { d.cleaned[i] = preprocess::clean(raw[i], pipeline); });
  return d;
}

std::pair<std::vector<Recording>, std::vector<Recording>> split_ood(const std::vector<Recording>& recs) {
  std::vector<Recording> in, ood;
  for (const auto& r : recs) (is_ood(r.task_label) ? ood : in).push_back(r);
  if (in.empty()) throw DataError("dataset holds no in-distribution recordings");
  return {in, ood};
}

// --------------------------------------------------------------- run store

json probs_json(const Matrix& probs) {
  json out = json::array();
  for (Index j = 0; j < probs.cols(); ++j) {
    std::vector<double> col(probs.col(j).data(), probs.col(j).data() + probs.rows());
    out.push_back(col);
  }
  return out;
}

Matrix probs_matrix(const json& rows) {
  if (rows.empty()) return Matrix(num_classes, 0);
  Matrix m(static_cast<Index>(rows.at(0).size()), static_cast<Index>(rows.size()));
  for (std::size_t j = 0; j < rows.size(); ++j)
    for (std::size_t k = 0; k < rows[j].size(); ++k) m(static_cast<Index>(k), static_cast<Index>(j)) = rows[j][k].get<double>();
  return m;
}

struct Job {
  models::Kind kind;
  std::uint64_t seed;  // entry of train.seeds
};

struct Fitted {
  std::unique_ptr<models::SequenceClassifier> model;
  training::FitResult fit;
};

Fitted train_model(const json& config, const Job& job, const preprocess::SegmentSet& train,
                   const preprocess::SegmentSet& val) {
  const auto seed = run_seed(config, job.seed);
  Fitted f;
  f.model = models::make_model(model_spec(config, job.kind, train.channels, seed));
  f.fit = training::fit(*f.model, train, val, config.at("train").get<training::TrainConfig>(), seed);
  return f;
}

json run_record(const Job& job, const Fitted& f, const Matrix& probs, const std::vector<int>& labels) {
  return {{"model", models::kind_name(job.kind)},
          {"seed", job.seed},
          {"params", f.model->count_params()},
          {"best_epoch", f.fit.best_epoch},
          {"epochs_run", f.fit.history.size()},
          {"labels", labels},
          {"probs", probs_json(probs)}};
}

std::vector<Job> jobs_for(const json& config) {
  std::vector<Job> jobs;
  for (auto kind : model_kinds(config))
    for (auto s : config.at("train").at("seeds")) jobs.push_back({kind, s.get<std::uint64_t>()});
  return jobs;
}

std::string history_name(const Job& job, const std::string& suffix = "") {
  return "history_" + models::kind_name(job.kind) + "_seed" + std::to_string(job.seed) + suffix + ".csv";
}

void require_sets(const std::array<preprocess::SegmentSet, 3>& sets, double window_s) {
  static const char* names[] = {"train", "val", "test"};
  for (std::size_t s = 0; s < 3; ++s)
    if (sets[s].size() == 0)
      throw DataError(std::string("no ") + names[s] + " segments at a " + std::to_string(window_s) +
                      " s window; use longer recordings or a shorter window");
}

// ----------------------------------------------------------------- tables

// Compact form for file names and grouping keys.
std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct Csv {
  std::ostringstream out;
  explicit Csv(const std::string& header) { out << header << '\n'; }
  template <class... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out << (first ? "" : ",") << cells, first = false), ...);
    out << '\n';
  }
  std::string str() const { return out.str(); }
};

// Runs grouped by key in order of first appearance.
template <class KeyFn>
std::vector<std::pair<std::string, std::vector<const json*>>> group_runs(const json& runs, KeyFn key) {
  std::vector<std::pair<std::string, std::vector<const json*>>> groups;
  for (const auto& r : runs) {
    const std::string k = key(r);
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == k; });
    if (it == groups.end()) {
      groups.push_back({k, {}});
      it = groups.end() - 1;
    }
    it->second.push_back(&r);
  }
  return groups;
}

evaluation::EvalReport report_of(const json& run) {
  return evaluation::evaluate(probs_matrix(run.at("probs")), run.at("labels").get<std::vector<int>>());
}

std::string mean_std(const std::vector<double>& v) {
  const auto s = training::summarize(v);
  return num(s.mean) + "," + num(s.std);
}

void accuracy_tables(const json& runs, const std::string& prefix, bool with_window, std::map<std::string, std::string>& out) {
  Csv t1(std::string(with_window ? "window_s," : "") +
         "model,params,seeds,accuracy_pct_mean,accuracy_pct_std,macro_f1_mean,macro_f1_std");
  Csv t2(std::string(with_window ? "window_s," : "") + "model,movie_confusion_pct_mean,movie_confusion_pct_std");
  Csv t5(std::string(with_window ? "window_s," : "") +
         "model,nll_mean,nll_std,brier_mean,brier_std,ece_pct_mean,ece_pct_std");
  const auto groups = group_runs(runs, [&](const json& r) {
    return (with_window ? label(r.at("window_s").get<double>()) + "," : std::string()) + r.at("model").get<std::string>();
  });
  for (const auto& [key, members] : groups) {
    std::vector<double> acc, f1, movie, nll, brier, ece;
    evaluation::Counts confusion;
    for (const json* r : members) {
      const auto rep = report_of(*r);
      acc.push_back(100.0 * rep.accuracy);
      f1.push_back(rep.macro_f1);
      if (!std::isnan(rep.movie_confusion_rate)) movie.push_back(rep.movie_confusion_rate);
      nll.push_back(rep.nll);
      brier.push_back(rep.brier);
      ece.push_back(rep.ece);
      confusion = confusion.size() ? (confusion + rep.confusion).eval() : rep.confusion;
    }
    const auto params = members.front()->at("params").get<long>();
    t1.row(key, params, members.size(), mean_std(acc), mean_std(f1));
    t2.row(key, movie.empty() ? std::string(",") : mean_std(movie));
    t5.row(key, mean_std(nll), mean_std(brier), mean_std(ece));
    Csv c("true\\predicted," + [] {
      std::string h;
      for (int k = 0; k < num_classes; ++k) h += std::string(k ? "," : "") + class_labels[k];
      return h;
    }());
    for (Index i = 0; i < confusion.rows(); ++i) {
      std::ostringstream row;
      row << class_labels[i];
      for (Index j = 0; j < confusion.cols(); ++j) row << ',' << confusion(i, j);
      c.out << row.str() << '\n';
    }
    std::string file = key;
    std::replace(file.begin(), file.end(), ',', '_');
    out["tables/" + prefix + "confusion_" + file + ".csv"] = c.str();
  }
  out["tables/" + prefix + "table1_accuracy.csv"] = t1.str();
  out["tables/" + prefix + "table2_movie_confusion.csv"] = t2.str();
  out["tables/" + prefix + "table5_calibration.csv"] = t5.str();
}

void segcurve_tables(const json& runs, std::map<std::string, std::string>& out) {
  accuracy_tables(runs, "", true, out);
  Csv curve("model,x,y,yerr");
  const auto by_model = group_runs(runs, [](const json& r) { return r.at("model").get<std::string>(); });
  for (const auto& [model, members] : by_model) {
    std::vector<double> windows;
    for (const json* r : members) {
      const double w = r->at("window_s").get<double>();
      if (std::find(windows.begin(), windows.end(), w) == windows.end()) windows.push_back(w);
    }
    std::sort(windows.begin(), windows.end());
    for (double w : windows) {
      std::vector<double> acc;
      for (const json* r : members)
        if (r->at("window_s").get<double>() == w) acc.push_back(100.0 * report_of(*r).accuracy);
      const auto s = training::summarize(acc);
      curve.row(model, label(w), num(s.mean), num(s.std));
    }
  }
  out["curves/accuracy_vs_segment.csv"] = curve.str();
}

void loso_tables(const json& runs, std::map<std::string, std::string>& out) {
  Csv folds("model,fold,held_out_subject,session,n_test,accuracy_pct,macro_f1,skipped,note");
  Csv summary("model,folds,accuracy_pct_mean,accuracy_pct_std,accuracy_pct_min,accuracy_pct_max");
  const auto by_model = group_runs(runs, [](const json& r) { return r.at("model").get<std::string>(); });
  std::vector<std::vector<double>> fold_acc;
  std::vector<std::vector<bool>> correct;
  for (const auto& [model, members] : by_model) {
    std::vector<double> acc;
    std::vector<bool> right;
    for (const json* r : members) {
      const bool skipped = r->at("skipped").get<bool>();
      double a = std::nan("");
      double f1 = std::nan("");
      if (!skipped) {
        const Matrix p = probs_matrix(r->at("probs"));
        const auto labels = r->at("labels").get<std::vector<int>>();
        const auto preds = evaluation::argmax_columns(p);
        const auto s = evaluation::accuracy_macro_f1(preds, labels, static_cast<int>(p.rows()));
        a = 100.0 * s.accuracy;
        f1 = s.macro_f1;
        acc.push_back(a);
        for (std::size_t i = 0; i < labels.size(); ++i) right.push_back(preds[i] == labels[i]);
      }
      folds.row(model, r->at("fold").get<int>(), r->at("held_out_subject").get<std::string>(), r->at("session").get<int>(),
                r->at("labels").size(), num(a), num(f1), skipped ? "true" : "false", r->at("note").get<std::string>());
    }
    if (!acc.empty())
      summary.row(model, acc.size(), mean_std(acc), num(*std::min_element(acc.begin(), acc.end())),
                  num(*std::max_element(acc.begin(), acc.end())));
    fold_acc.push_back(acc);
    correct.push_back(right);
  }
  out["tables/loso_folds.csv"] = folds.str();
  out["tables/loso_summary.csv"] = summary.str();

  Csv stats("model_a,model_b,t,df,p,mcnemar_b,mcnemar_c,chi2,exact_p,note");
  for (std::size_t a = 0; a < by_model.size(); ++a)
    for (std::size_t b = a + 1; b < by_model.size(); ++b) {
      std::string t = ",,", m = ",,,", note;
      if (fold_acc[a].size() == fold_acc[b].size()) {
        std::vector<double> diffs;
        for (std::size_t i = 0; i < fold_acc[a].size(); ++i) diffs.push_back(fold_acc[a][i] - fold_acc[b][i]);
        try {
          const auto r = evaluation::paired_t_test(diffs);
          t = num(r.t) + "," + num(r.df) + "," + num(r.p);
        } catch (const DataError& e) {
          note += e.what();
        }
      } else {
        note += "fold sets differ; ";
      }
      if (correct[a].size() == correct[b].size()) {
        const auto [nb, nc] = evaluation::discordant_counts(correct[a], correct[b]);
        try {
          const auto r = evaluation::mcnemar(nb, nc);
          m = std::to_string(nb) + "," + std::to_string(nc) + "," + num(r.chi2) + "," + num(r.exact_p);
        } catch (const DataError& e) {
          m = std::to_string(nb) + "," + std::to_string(nc) + ",,";
          note += e.what();
        }
      }
      std::replace(note.begin(), note.end(), ',', ';');
      stats.row(by_model[a].first, by_model[b].first, t, m, note);
    }
  out["tables/loso_stats.csv"] = stats.str();
}

void crossfreq_tables(const json& runs, std::map<std::string, std::string>& out) {
  Csv t3("model,rate_hz,window,accuracy_pct_mean,accuracy_pct_std,macro_f1_mean,drop_pct_mean");
  const auto by_model = group_runs(runs, [](const json& r) { return r.at("model").get<std::string>(); });
  for (const auto& [model, members] : by_model) {
    std::vector<double> rates;
    for (const json* r : members)
      for (const auto& row : r->at("rates"))
        if (std::find(rates.begin(), rates.end(), row.at("rate").get<double>()) == rates.end())
          rates.push_back(row.at("rate").get<double>());
    for (double rate : rates) {
      std::vector<double> acc, f1, drop;
      Index window = 0;
      for (const json* r : members) {
        double base = std::nan("");
        double here = std::nan("");
        for (const auto& row : r->at("rates")) {
          const Matrix p = probs_matrix(row.at("probs"));
          const auto s = evaluation::accuracy_macro_f1(evaluation::argmax_columns(p),
                                                       row.at("labels").get<std::vector<int>>(), static_cast<int>(p.rows()));
          if (row.at("rate").get<double>() == r->at("train_rate").get<double>()) base = 100.0 * s.accuracy;
          if (row.at("rate").get<double>() == rate) {
            here = 100.0 * s.accuracy;
            f1.push_back(s.macro_f1);
            window = row.at("window").get<Index>();
          }
        }
        acc.push_back(here);
        drop.push_back(base - here);
      }
      t3.row(model, label(rate), window, mean_std(acc), num(training::summarize(f1).mean), num(training::summarize(drop).mean));
    }
  }
  out["tables/table3_cross_frequency.csv"] = t3.str();
}

void crosstask_tables(const json& runs, std::map<std::string, std::string>& out) {
  std::string header = "model,task,control,n_segments,dominant_class,mean_confidence";
  for (int k = 0; k < num_classes; ++k) header += std::string(",frac_") + class_labels[k];
  Csv t4(header);
  const auto by_model = group_runs(runs, [](const json& r) { return r.at("model").get<std::string>(); });
  for (const auto& [model, members] : by_model) {
    // Pool predictions over seeds, then summarize per task.
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::vector<double>>> pooled;
    std::map<std::string, bool> is_control;
    auto add = [&](const std::string& task, const json& probs, bool control) {
      if (!pooled.contains(task)) order.push_back(task);
      is_control[task] = control;
      for (const auto& p : probs) pooled[task].push_back(p.get<std::vector<double>>());
    };
    for (const json* r : members) {
      const auto& ood = r->at("ood");
      for (std::size_t i = 0; i < ood.at("tasks").size(); ++i)
        add(ood.at("tasks")[i].get<std::string>(), json::array({ood.at("probs")[i]}), false);
      const auto& ctl = r->at("control");
      for (std::size_t i = 0; i < ctl.at("labels").size(); ++i)
        add(std::string("control:") + class_labels[ctl.at("labels")[i].get<int>()], json::array({ctl.at("probs")[i]}), true);
    }
    std::stable_partition(order.begin(), order.end(), [&](const std::string& t) { return !is_control[t]; });
    for (const auto& task : order) {
      const auto row = evaluation::summarize_task(task, probs_matrix(json(pooled[task])));
      std::string fractions;
      for (double f : row.class_fractions) fractions += "," + num(f);
      t4.out << model << ',' << task << ',' << (row.control || is_control[task] ? "true" : "false") << ','
             << row.n_segments << ',' << class_labels[row.dominant_class] << ',' << num(row.mean_confidence) << fractions
             << '\n';
    }
  }
  out["tables/table4_cross_task.csv"] = t4.str();
}

// ---------------------------------------------------------------- commands

struct Context {
  json config;
  fs::path out;
  int workers = 1;
  json inputs = json::object();
  std::mutex log_mutex;
  std::vector<std::string> warnings;
};

json results_header(const Context& ctx, const std::string& command) {
  json config = ctx.config;
  config.erase("workers");
  return {{"command", command},
          {"seed", ctx.config.at("seed")},
          {"config", config},
          {"config_hash", sha1_hex(config.dump())}};
}

json cmd_synth(Context& ctx) {
  const auto synth = ctx.config.at("synth").get<datagen::SynthConfig>();
  const auto recs = datagen::generate(synth, ctx.config.at("seed").get<std::uint64_t>(), ctx.workers);
  const fs::path dir = ctx.config.at("data_dir").get<std::string>();
  datagen::write_dataset(dir, recs);
  json results = results_header(ctx, "synth");
  std::map<std::string, int> per_task;
  for (const auto& r : recs) ++per_task[r.task_label];
  results["recordings"] = recs.size();
  results["per_task"] = per_task;
  results["data_dir"] = dir.generic_string();
  return results;
}

json cmd_prep(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  auto data = load_cleaned(ctx.config, pipeline.target_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto sets = preprocess::segment_all(data.cleaned, pipeline.segment);
  json results = results_header(ctx, "prep");
  for (const auto& set : sets) {
    const std::string name = preprocess::split_name(set.split);
    fs::create_directories(ctx.out / "segments");
    preprocess::save_segments(set, ctx.out / "segments" / name);
    std::map<std::string, int> per_task;
    for (const auto& t : set.tasks) ++per_task[t];
    results["splits"][name] = {{"segments", set.size()}, {"window", set.window}, {"per_task", per_task}};
  }
  results["sample_rate"] = sets[0].sample_rate;
  return results;
}

json cmd_train(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  auto data = load_cleaned(ctx.config, pipeline.target_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto sets = preprocess::segment_all(split_ood(data.cleaned).first, pipeline.segment);
  require_sets(sets, pipeline.segment.window_s);
  const auto jobs = jobs_for(ctx.config);
  fs::create_directories(ctx.out / "checkpoints");
  std::vector<json> runs(jobs.size());
  parallel_for(jobs.size(), ctx.workers, [&](std::size_t i) {
    const auto f = train_model(ctx.config, jobs[i], sets[0], sets[1]);
    const Matrix probs = training::predict_proba(*f.model, sets[2]);
    runs[i] = run_record(jobs[i], f, probs, sets[2].labels);
    const std::string stem = models::kind_name(jobs[i].kind) + "_seed" + std::to_string(jobs[i].seed);
    training::write_history_csv(ctx.out / "logs" / history_name(jobs[i]), f.fit.history);
    save_checkpoint(f.model->params(), ctx.out / "checkpoints" / stem);
  });
  json results = results_header(ctx, "train");
  results["runs"] = runs;
  return results;
}

json cmd_segcurve(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  auto data = load_cleaned(ctx.config, pipeline.target_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto in_dist = split_ood(data.cleaned).first;
  const auto jobs = jobs_for(ctx.config);
  json all = json::array();
  for (const auto& w : ctx.config.at("segcurve").at("windows_s")) {
    auto segment = pipeline.segment;
    segment.window_s = w.get<double>();
    const auto sets = preprocess::segment_all(in_dist, segment);
    require_sets(sets, segment.window_s);
    std::vector<json> runs(jobs.size());
    parallel_for(jobs.size(), ctx.workers, [&](std::size_t i) {
      const auto f = train_model(ctx.config, jobs[i], sets[0], sets[1]);
      runs[i] = run_record(jobs[i], f, training::predict_proba(*f.model, sets[2]), sets[2].labels);
      runs[i]["window_s"] = segment.window_s;
      runs[i]["window"] = sets[2].window;
      training::write_history_csv(ctx.out / "logs" / history_name(jobs[i], "_w" + label(segment.window_s)), f.fit.history);
    });
    for (auto& r : runs) all.push_back(std::move(r));
  }
  json results = results_header(ctx, "segcurve");
  results["runs"] = all;
  return results;
}

json cmd_loso(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  auto data = load_cleaned(ctx.config, pipeline.target_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto& lc = ctx.config.at("loso");
  const evaluation::LosoConfig cfg{lc.at("window_s").get<double>(), lc.at("overlap").get<double>(),
                                   lc.at("val_fraction").get<double>()};
  const auto train = ctx.config.at("train").get<training::TrainConfig>();
  const std::uint64_t train_seed = train.seeds.front();
  json runs = json::array();
  for (auto kind : model_kinds(ctx.config)) {
    const auto seed = run_seed(ctx.config, train_seed);
    const auto spec = model_spec(ctx.config, kind, data.cleaned.front().channels(), seed);
    const auto result = evaluation::loso_protocol(data.cleaned, spec, train, cfg, seed, ctx.workers);
    for (std::size_t f = 0; f < result.folds.size(); ++f) {
      const auto& fold = result.folds[f];
      runs.push_back({{"model", models::kind_name(kind)},
                      {"seed", train_seed},
                      {"fold", f},
                      {"held_out_subject", fold.held_out_subject},
                      {"session", fold.session},
                      {"train_subjects", fold.train_subjects},
                      {"n_train", fold.n_train_segments},
                      {"skipped", fold.skipped},
                      {"note", fold.note},
                      {"best_epoch", fold.best_epoch},
                      {"labels", fold.labels},
                      {"probs", probs_json(fold.probs)}});
    }
  }
  json results = results_header(ctx, "loso");
  results["runs"] = runs;
  return results;
}

json cmd_crossfreq(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  const double train_rate = ctx.config.at("crossfreq").at("train_rate").get<double>();
  auto data = load_cleaned(ctx.config, train_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto in_dist = split_ood(data.cleaned).first;
  const auto sets = preprocess::segment_all(in_dist, pipeline.segment);
  require_sets(sets, pipeline.segment.window_s);
  std::vector<double> rates{train_rate};
  for (const auto& r : ctx.config.at("crossfreq").at("rates"))
    if (r.get<double>() != train_rate) rates.push_back(r.get<double>());
  const auto jobs = jobs_for(ctx.config);
  std::vector<json> runs(jobs.size());
  parallel_for(jobs.size(), ctx.workers, [&](std::size_t i) {
    const auto f = train_model(ctx.config, jobs[i], sets[0], sets[1]);
    const Matrix standard = training::predict_proba(*f.model, sets[2]);
    const auto rows = evaluation::cross_frequency_protocol(*f.model, in_dist, pipeline.segment, rates);
    runs[i] = run_record(jobs[i], f, standard, sets[2].labels);
    runs[i]["train_rate"] = train_rate;
    runs[i]["rates"] = json::array();
    for (const auto& row : rows)
      runs[i]["rates"].push_back(
          {{"rate", row.rate}, {"window", row.window}, {"labels", row.labels}, {"probs", probs_json(row.probs)}});
  });
  json results = results_header(ctx, "crossfreq");
  results["runs"] = runs;
  return results;
}

json cmd_crosstask(Context& ctx) {
  const auto pipeline = ctx.config.at("pipeline").get<preprocess::PipelineConfig>();
  auto data = load_cleaned(ctx.config, pipeline.target_rate, ctx.workers);
  ctx.inputs = data.inputs;
  const auto [in_dist, ood_recs] = split_ood(data.cleaned);
  if (ood_recs.empty()) throw DataError("crosstask: dataset holds no OOD recordings (synth.ood_tasks is empty)");
  const auto sets = preprocess::segment_all(in_dist, pipeline.segment);
  require_sets(sets, pipeline.segment.window_s);
  auto whole = pipeline.segment;
  whole.ratios = {0.0, 0.0, 1.0};
  const auto ood = preprocess::segment_all(ood_recs, whole)[2];
  const auto jobs = jobs_for(ctx.config);
  std::vector<json> runs(jobs.size());
  parallel_for(jobs.size(), ctx.workers, [&](std::size_t i) {
    const auto f = train_model(ctx.config, jobs[i], sets[0], sets[1]);
    const Matrix control = training::predict_proba(*f.model, sets[2]);
    runs[i] = run_record(jobs[i], f, control, sets[2].labels);
    runs[i].erase("labels");
    runs[i].erase("probs");
    runs[i]["ood"] = {{"tasks", ood.tasks}, {"probs", probs_json(training::predict_proba(*f.model, ood))}};
    runs[i]["control"] = {{"labels", sets[2].labels}, {"probs", probs_json(control)}};
  });
  json results = results_header(ctx, "crosstask");
  results["runs"] = runs;
  return results;
}

json cmd_report(Context& ctx, const std::vector<fs::path>& inputs) {
  if (inputs.empty()) throw ConfigError("report: no inputs (pass results.json paths or set report.inputs)");
  json results = results_header(ctx, "report");
  results["inputs"] = json::array();
  std::vector<fs::path> files;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const fs::path path = fs::is_directory(inputs[i]) ? inputs[i] / "results.json" : inputs[i];
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw DataError("report: " + path.string() + " is not valid JSON: " + e.what());
    }
    files.push_back(path);
    const std::string command = doc.at("command").get<std::string>();
    const std::string prefix = inputs.size() > 1 ? std::to_string(i) + "_" + command + "/" : "";
    for (const auto& [name, text] : derive_tables(doc)) {
      const auto slash = name.find('/');
      write_file(ctx.out / (name.substr(0, slash + 1) + prefix + name.substr(slash + 1)), text);
    }
    results["inputs"].push_back({{"command", command}, {"config_hash", doc.at("config_hash")}, {"prefix", prefix}});
  }
  ctx.inputs = {{"content_hash", ""}, {"files", json::object()}};
  std::string listing;
  for (const auto& f : files) {
    const auto h = git_blob_hash(read_file(f));
    ctx.inputs["files"][f.generic_string()] = h;
    listing += h + "  " + f.generic_string() + "\n";
  }
  ctx.inputs["content_hash"] = git_blob_hash(listing);
  return results;
}

}  // namespace

// -------------------------------------------------------------- public API

std::string git_blob_hash(const std::string& content) {
  return sha1_hex("blob " + std::to_string(content.size()) + '\0' + content);
}

json default_config() {
  return {{"seed", 0},
          {"workers", 1},
          {"data_dir", "data/synth"},
          {"preset", "desk"},
          {"models", {"s5", "cnn"}},
          {"model_overrides", json::object()},
          {"synth", datagen::SynthConfig{}},
          {"pipeline", desk_pipeline_defaults()},
          {"train", desk_train_defaults()},
          {"segcurve", {{"windows_s", {8.0, 16.0, 32.0, 64.0}}}},
          {"loso", {{"window_s", 32.0}, {"overlap", 0.5}, {"val_fraction", 0.2}}},
          {"crossfreq", {{"train_rate", 128.0}, {"rates", {64.0, 32.0}}}},
          {"report", {{"inputs", json::array()}}}};
}

json resolve_config(const json& user) {
  const json defaults = default_config();
  json c = merge_checked(user, defaults, "config");
  for (const char* name : {"synth", "pipeline", "train", "segcurve", "loso", "crossfreq", "report"})
    c[name] = section(user, defaults, name);

  c["synth"] = c["synth"].get<datagen::SynthConfig>();
  c["pipeline"] = c["pipeline"].get<preprocess::PipelineConfig>();
  c["train"] = c["train"].get<training::TrainConfig>();
  const std::string what = "config";
  get_field<std::uint64_t>(c, "seed", what);
  if (get_field<int>(c, "workers", what) < 1) throw ConfigError("workers must be at least 1");
  get_field<std::string>(c, "data_dir", what);
  const auto preset = get_field<std::string>(c, "preset", what);
  const auto names = get_field<std::vector<std::string>>(c, "models", what);
  if (names.empty()) throw ConfigError("models must list at least one of s5, s4, cnn, lstm, eegxf");
  std::set<std::string> seen;
  for (const auto& n : names) {
    models::parse_kind(n);
    if (!seen.insert(n).second) throw ConfigError("models lists '" + n + "' twice");
  }
  if (!c["model_overrides"].is_object()) throw ConfigError("model_overrides must be an object keyed by model name");
  for (auto& [name, override_spec] : c["model_overrides"].items()) {
    const auto kind = models::parse_kind(name);
    merge_checked(override_spec, json(preset_spec(preset, kind)), "model_overrides." + name).get<models::ModelSpec>();
  }
  preset_spec(preset, models::Kind::s5);

  const auto windows = get_field<std::vector<double>>(c["segcurve"], "windows_s", "segcurve");
  if (windows.empty() || std::any_of(windows.begin(), windows.end(), [](double w) { return !(w > 0.0); }))
    throw ConfigError("segcurve.windows_s must be a non-empty list of positive durations");
  const auto& lc = c["loso"];
  if (!(get_field<double>(lc, "window_s", "loso") > 0.0)) throw ConfigError("loso.window_s must be positive");
  const double overlap = get_field<double>(lc, "overlap", "loso");
  if (overlap < 0.0 || overlap >= 1.0) throw ConfigError("loso.overlap must lie in [0, 1)");
  const double vf = get_field<double>(lc, "val_fraction", "loso");
  if (vf <= 0.0 || vf >= 1.0) throw ConfigError("loso.val_fraction must lie in (0, 1)");
  if (!(get_field<double>(c["crossfreq"], "train_rate", "crossfreq") > 0.0))
    throw ConfigError("crossfreq.train_rate must be positive");
  for (double r : get_field<std::vector<double>>(c["crossfreq"], "rates", "crossfreq"))
    if (!(r > 0.0)) throw ConfigError("crossfreq.rates must be positive");
  get_field<std::vector<std::string>>(c["report"], "inputs", "report");
  return c;
}

std::map<std::string, std::string> derive_tables(const json& results) {
  std::map<std::string, std::string> out;
  const auto command = results.at("command").get<std::string>();
  if (!results.contains("runs")) return out;
  const auto& runs = results.at("runs");
  if (command == "train") accuracy_tables(runs, "", false, out);
  else if (command == "segcurve") segcurve_tables(runs, out);
  else if (command == "loso") loso_tables(runs, out);
  else if (command == "crossfreq") crossfreq_tables(runs, out);
  else if (command == "crosstask") crosstask_tables(runs, out);
  return out;
}

json run_command(const std::string& command, const json& config, const fs::path& out,
                 const std::vector<fs::path>& report_inputs) {
  if (std::find(commands.begin(), commands.end(), command) == commands.end())
    throw ConfigError("unknown command '" + command + "'");
  Context ctx;
  ctx.config = config;
  ctx.out = out;
  ctx.workers = config.at("workers").get<int>();
  fs::create_directories(out / "logs");
  set_warning_handler([&ctx](const std::string& msg) {
    std::lock_guard lock(ctx.log_mutex);
    std::cerr << "warning: " << msg << '\n';
    ctx.warnings.push_back(msg);
  });
  struct Restore {
    ~Restore() {
      set_warning_handler([](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; });
    }
  } restore;

  json results;
  if (command == "synth") results = cmd_synth(ctx);
  else if (command == "prep") results = cmd_prep(ctx);
  else if (command == "train") results = cmd_train(ctx);
  else if (command == "segcurve") results = cmd_segcurve(ctx);
  else if (command == "loso") results = cmd_loso(ctx);
  else if (command == "crossfreq") results = cmd_crossfreq(ctx);
  else if (command == "crosstask") results = cmd_crosstask(ctx);
  else {
    std::vector<fs::path> inputs = report_inputs;
    for (const auto& p : config.at("report").at("inputs")) inputs.emplace_back(p.get<std::string>());
    results = cmd_report(ctx, inputs);
  }

  if (command != "report") {
    for (const auto& [name, text] : derive_tables(results)) write_file(out / name, text);
    if (results.contains("runs")) {
      for (auto& run : results["runs"]) {
        if (run.contains("probs") && run.contains("labels") && !run["probs"].empty())
          run["metrics"] = report_of(run);
      }
    }
  }
  write_file(out / "results.json", results.dump(1) + "\n");
  const json log = {{"command", command},
                    {"seed", config.at("seed")},
                    {"workers", ctx.workers},
                    {"config_hash", results.at("config_hash")},
                    {"inputs", ctx.inputs}};
  write_file(out / "logs" / "run.json", log.dump(2) + "\n");
  std::string warnings;
  for (const auto& w : ctx.warnings) warnings += w + "\n";
  write_file(out / "logs" / "warnings.log", warnings);
  return results;
}

int main(int argc, char** argv) {
  CLI::App app{"Long-context EEG classification experiments on synthetic recordings"};
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
  int workers = 1;
  bool print_config = false;
  auto* config_opt = app.add_option("--config", config_path, "JSON config file");
  auto* seed_opt = app.add_option("--seed", seed, "root seed (overrides the config)");
  app.add_option("--out", out, "artifact directory (default runs/<command>)");
  auto* workers_opt = app.add_option("--workers", workers, "worker threads (overrides the config)");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
  config_opt->check(CLI::ExistingFile);
  app.fallthrough();
  app.require_subcommand(0, 1);
  std::vector<std::string> report_inputs;
  const std::map<std::string, std::string> help{
      {"synth", "generate a synthetic dataset into data_dir"},
      {"prep", "filter, resample and segment data_dir into segment archives"},
      {"train", "train each model for every seed and evaluate on the test split"},
      {"segcurve", "accuracy versus segment length"},
      {"loso", "leave-one-subject-out evaluation"},
      {"crossfreq", "zero-shot evaluation at other sampling rates"},
      {"crosstask", "predictions on unseen tasks"},
      {"report", "recompute tables from stored results"}};
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name, help.at(name));
    if (name == "report") sub->add_option("inputs", report_inputs, "results.json files or run directories");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    json user = json::object();
    if (config_opt->count()) {
      try {
        user = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
    }
    if (seed_opt->count()) user["seed"] = seed;
    if (workers_opt->count()) user["workers"] = workers;
    const json config = resolve_config(user);
    if (print_config) {
      std::cout << config.dump(2) << '\n';
      return 0;
    }
    const auto subs = app.get_subcommands();
    if (subs.empty()) {
      std::cerr << app.help();
      return 2;
    }
    const std::string command = subs.front()->get_name();
    const fs::path dir = out.empty() ? fs::path("runs") / command : fs::path(out);
    std::vector<fs::path> inputs(report_inputs.begin(), report_inputs.end());
    run_command(command, config, dir, inputs);
    std::cout << command << ": wrote " << dir.string() << '\n';
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace eegssm::cli
