// SPDX-License-Identifier: Apache-2.0
//
// Command drivers behind the CLI: dataset generation, training dispatch,
// model evaluation with report/compare artifacts, and the six-row ablation
// pipeline. Everything here is deterministic given (config, seed).

#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mlkd/eval.hpp"
#include "mlkd/train.hpp"

namespace mlkd {

struct GenSummary {
  int train_sequences = 0;
  int train_frames = 0;
  int eval_sequences = 0;
  int eval_frames = 0;
};

namespace detail {

inline std::string sequence_dir_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "seq-%04d", index + 1);
  return buf;
}

// Streaming write: one sequence in memory at a time. Regeneration with the
// same seed rewrites identical bytes, so reruns are idempotent.
inline int write_split(const std::filesystem::path& dir, const GenConfig& cfg) {
  validate(cfg);
  std::filesystem::create_directories(dir);
  for (int i = 0; i < cfg.num_sequences; ++i) {
    SequenceData seq = generate_sequence(cfg, i);
    save_sequence(dir / sequence_dir_name(i), seq, DarkModel{});
  }
  return cfg.num_sequences * cfg.frames_per_sequence;
}

}  // namespace detail

// Generates the train and eval splits under the configured data directories.
// The two splits draw from disjoint seed streams so eval content never
// repeats training content.
inline GenSummary cmd_gen_data(const RunConfig& cfg, std::ostream& log = std::cout) {
  validate(cfg);
  GenSummary s;
  GenConfig train;
  train.num_sequences = cfg.data.num_train_sequences;
  train.frames_per_sequence = cfg.data.train_frames;
  train.image_size = cfg.data.image_size;
  train.attribute_mix = cfg.data.attribute_mix;
  train.seed = mix_seed(cfg.seed, 1);
  s.train_sequences = train.num_sequences;
  s.train_frames = detail::write_split(train_data_dir(cfg), train);

  GenConfig eval = train;
  eval.num_sequences = cfg.data.num_eval_sequences;
  eval.frames_per_sequence = cfg.data.eval_frames;
  eval.seed = mix_seed(cfg.seed, 2);
  s.eval_sequences = eval.num_sequences;
  s.eval_frames = detail::write_split(eval_data_dir(cfg), eval);

  log << "gen-data: " << s.train_sequences << " train sequences (" << s.train_frames
      << " frames) -> " << train_data_dir(cfg) << "\n";
  log << "gen-data: " << s.eval_sequences << " eval sequences (" << s.eval_frames
      << " frames) -> " << eval_data_dir(cfg) << "\n";
  return s;
}

// Validates preconditions a user can get wrong (missing dataset, missing
// teacher) before handing off to the training loop.
inline TrainingResult cmd_train(const RunConfig& cfg, std::ostream& log = std::cout) {
  validate(cfg);
  const std::string data = train_data_dir(cfg);
  if (!std::filesystem::is_directory(data))
    throw std::invalid_argument("train: dataset not found at " + data + "; run gen-data first");
  if (cfg.mode != "teacher-pretrain") {
    if (cfg.teacher_checkpoint.empty())
      throw std::invalid_argument("train: mode " + cfg.mode + " requires teacher_checkpoint");
    if (!std::filesystem::exists(cfg.teacher_checkpoint))
      throw std::invalid_argument("train: teacher checkpoint not found: " +
                                  cfg.teacher_checkpoint);
  }
  log << "train: mode=" << cfg.mode << " out=" << cfg.out << " seed=" << cfg.seed << "\n";
  TrainingResult res = run_training(cfg);
  for (const auto& p : res.checkpoint_paths) log << "train: wrote " << p << "\n";
  return res;
}

struct EvalOutcome {
  std::vector<std::pair<std::string, EvalReport>> reports;
  std::string mlkd_name;  // best non-enhancer model by success AUC; empty if none
};

namespace detail {

// Checkpoints cmd_eval looks for when the config lists no models explicitly,
// in fixed report order.
inline std::vector<EvalModelRef> discover_models(const std::string& out) {
  const std::vector<EvalModelRef> known = {
      {"teacher", out + "/teacher.ckpt", true},
      {"student-no-crl", out + "/student-no-crl.ckpt", false},
      {"student-l2", out + "/student-l2.ckpt", false},
      {"student-spatial", out + "/student-spatial.ckpt", false},
      {"student-response", out + "/student-response.ckpt", false},
  };
  std::vector<EvalModelRef> found;
  for (const auto& m : known)
    if (std::filesystem::exists(m.path)) found.push_back(m);
  return found;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct EvalModelArtifacts {
  EvalReport report;
  std::vector<std::pair<std::string, std::vector<BBox>>> predictions;  // per sequence
};

// One-pass evaluation of a single model over loaded sequences. Predictions
// come from the first pass; speed is the median over fps_runs timed passes
// (deterministic forward, so repeats produce identical boxes). fps_runs = 0
// leaves track_ms at zero, pinning reported speed to 0.0 for byte-stable
// artifacts.
inline EvalModelArtifacts eval_model(const TrackerModel& model, bool enhancer,
                                     const std::vector<LoadedSequence>& seqs, int fps_runs) {
  EvalModelArtifacts art;
  std::vector<EvalSequence> inputs;
  for (const auto& seq : seqs) {
    EvalSequence in;
    in.name = seq.name;
    in.gt = seq.boxes;
    in.attributes = seq.attributes;
    std::vector<double> run_ms;
    const int runs = std::max(1, fps_runs);
    for (int r = 0; r < runs; ++r) {
      TrackResult tr = track_sequence(model, seq.frames, seq.boxes[0], enhancer, seq.model);
      if (r == 0) in.pred = tr.boxes;
      double ms = 0.0;
      for (double m : tr.latencies_ms) ms += m;
      run_ms.push_back(ms);
    }
    in.track_ms = fps_runs > 0 ? median(run_ms) : 0.0;
    art.predictions.emplace_back(in.name, in.pred);
    inputs.push_back(std::move(in));
  }
  art.report = evaluate(inputs);
  return art;
}

inline void write_predictions(const std::filesystem::path& dir,
                              const std::vector<std::pair<std::string, std::vector<BBox>>>& preds) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, boxes] : preds) {
    std::ofstream f(dir / (name + ".txt"));
    for (const auto& b : boxes) f << format_box_line(b) << "\n";
  }
}

inline TrackerModel load_checkpoint_or_user_error(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw std::invalid_argument("eval: cannot load checkpoint " + path + ": " + e.what());
  }
}

}  // namespace detail

// Evaluates every configured (or discovered) model on the eval split, writes
// per-model predictions and reports plus the comparison table, and names the
// best student. cfg.attributes restricts to sequences tagged with any of the
// listed attributes.
inline EvalOutcome cmd_eval(const RunConfig& cfg, std::ostream& log = std::cout) {
  validate(cfg);
  std::vector<EvalModelRef> models =
      cfg.eval_models.empty() ? detail::discover_models(cfg.out) : cfg.eval_models;
  if (models.empty())
    throw std::invalid_argument("eval: no checkpoints under " + cfg.out +
                                "; train first or set eval_models");

  const std::string data = eval_data_dir(cfg);
  if (!std::filesystem::is_directory(data))
    throw std::invalid_argument("eval: dataset not found at " + data + "; run gen-data first");
  std::vector<LoadedSequence> seqs;
  for (const auto& dir : list_sequences(data)) {
    LoadedSequence seq = load_sequence(dir);
    if (!cfg.attributes.empty()) {
      const bool tagged = std::any_of(seq.attributes.begin(), seq.attributes.end(),
                                      [&](const std::string& a) {
                                        return std::find(cfg.attributes.begin(),
                                                         cfg.attributes.end(),
                                                         a) != cfg.attributes.end();
                                      });
      if (!tagged) continue;
    }
    seqs.push_back(std::move(seq));
  }
  if (seqs.empty())
    throw std::invalid_argument("eval: no sequences in " + data + " match the attribute filter");

  const std::filesystem::path eval_dir = std::filesystem::path(cfg.out) / "eval";
  std::filesystem::create_directories(eval_dir);

  EvalOutcome out;
  std::string csv = "model,succ,norm,prec,speed\n";
  for (const auto& ref : models) {
    TrackerModel model = detail::load_checkpoint_or_user_error(ref.path);
    detail::EvalModelArtifacts art = detail::eval_model(model, ref.enhancer, seqs, cfg.fps_runs);
    detail::write_predictions(eval_dir / "predictions" / ref.name, art.predictions);
    std::ofstream rj(eval_dir / ("report-" + ref.name + ".json"));
    rj << report_json(art.report).dump(2) << "\n";
    csv += report_csv_row(ref.name, art.report);
    out.reports.emplace_back(ref.name, art.report);
    log << "eval: " << ref.name << " success_auc=" << art.report.success_auc << "\n";
  }
  {
    std::ofstream rc(eval_dir / "report.csv");
    rc << csv;
  }
  if (out.reports.size() >= 2) {
    CompareTable table = compare(out.reports);
    std::ofstream ct(eval_dir / "compare.txt");
    ct << table.to_text();
    log << table.to_text();
  }

  // the deployed tracker is the best student (no enhancer at inference)
  double best = -1.0;
  for (size_t i = 0; i < models.size(); ++i) {
    if (models[i].enhancer) continue;
    if (out.reports[i].second.success_auc > best) {
      best = out.reports[i].second.success_auc;
      out.mlkd_name = models[i].name;
    }
  }
  if (!out.mlkd_name.empty()) log << "MLKD-Track: " << out.mlkd_name << "\n";
  return out;
}

struct AblateOutcome {
  std::vector<std::pair<std::string, EvalReport>> rows;  // the six table rows
  std::string mlkd_source;                               // mutual student behind MLKD-Track
  std::string csv_path;
};

// Full ablation: teacher pretraining, the no-CRL baseline, three independent
// CRL students, and the mutual cohort, all trained on one shared dataset and
// compared on the eval split. The best mutual student (highest success AUC,
// earliest on a tie) enters the table as MLKD-Track.
inline AblateOutcome cmd_ablate(const RunConfig& cfg, std::ostream& log = std::cout) {
  validate(cfg);
  RunConfig base = cfg;
  // phases share one dataset regardless of their own out dirs
  base.data.train_dir = train_data_dir(cfg);
  base.data.eval_dir = eval_data_dir(cfg);

  log << "[1/6] data\n";
  cmd_gen_data(base, log);

  auto phase = [&](const std::string& mode, const std::string& subdir,
                   const std::vector<std::string>& students) {
    RunConfig p = base;
    p.mode = mode;
    p.out = cfg.out + "/" + subdir;
    p.students = students;
    if (mode != "teacher-pretrain") p.teacher_checkpoint = cfg.out + "/teacher/teacher.ckpt";
    return cmd_train(p, log);
  };

  log << "[2/6] teacher pretraining\n";
  phase("teacher-pretrain", "teacher", {"l2"});
  log << "[3/6] student without correlation distillation\n";
  phase("student-no-crl", "no_crl", {"l2"});
  log << "[4/6] independent students\n";
  phase("students-independent", "independent", {"l2", "spatial", "response"});
  log << "[5/6] mutual cohort\n";
  phase("students-mutual", "mutual", {"l2", "spatial", "response"});

  log << "[6/6] evaluation\n";
  std::vector<LoadedSequence> seqs;
  for (const auto& dir : list_sequences(eval_data_dir(cfg))) seqs.push_back(load_sequence(dir));

  struct Entry {
    std::string row;
    std::string path;
    bool enhancer;
  };
  const std::vector<Entry> fixed = {
      {"Teacher", cfg.out + "/teacher/teacher.ckpt", true},
      {"Student w/o CRL", cfg.out + "/no_crl/student-no-crl.ckpt", false},
      {"Student 1 (l2)", cfg.out + "/independent/student-l2.ckpt", false},
      {"Student 2 (spatial)", cfg.out + "/independent/student-spatial.ckpt", false},
      {"Student 3 (response)", cfg.out + "/independent/student-response.ckpt", false},
  };

  AblateOutcome out;
  for (const auto& e : fixed) {
    TrackerModel model = detail::load_checkpoint_or_user_error(e.path);
    out.rows.emplace_back(e.row,
                          detail::eval_model(model, e.enhancer, seqs, cfg.fps_runs).report);
    log << "ablate: " << e.row << " success_auc=" << out.rows.back().second.success_auc << "\n";
  }

  EvalReport mlkd;
  double best = -1.0;
  for (const std::string kind : {"l2", "spatial", "response"}) {
    TrackerModel model = detail::load_checkpoint_or_user_error(cfg.out + "/mutual/student-" +
                                                               kind + ".ckpt");
    EvalReport r = detail::eval_model(model, false, seqs, cfg.fps_runs).report;
    log << "ablate: mutual " << kind << " success_auc=" << r.success_auc << "\n";
    if (r.success_auc > best) {
      best = r.success_auc;
      mlkd = r;
      out.mlkd_source = kind;
    }
  }
  out.rows.emplace_back("MLKD-Track", mlkd);

  std::string csv = "model,succ,norm,prec,speed\n";
  for (const auto& [name, r] : out.rows) csv += report_csv_row(name, r);
  out.csv_path = cfg.out + "/ablation.csv";
  std::ofstream f(out.csv_path);
  f << csv;

  CompareTable table = compare(out.rows);
  std::ofstream ct(cfg.out + "/ablation.txt");
  ct << table.to_text();
  log << table.to_text();
  log << "MLKD-Track: mutual student " << out.mlkd_source << "\n";
  return out;
}

}  // namespace mlkd
