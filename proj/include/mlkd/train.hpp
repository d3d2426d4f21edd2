// SPDX-License-Identifier: Apache-2.0
//
// Training orchestration: crop-based dataset assembly from stored nighttime
// sequences, the per-batch distillation step with best-student election, and
// the epoch loop with checkpoints, resume, and an ndjson component log.

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlkd/config.hpp"
#include "mlkd/darkroom.hpp"
#include "mlkd/losses.hpp"
#include "mlkd/mutual.hpp"
#include "mlkd/optim.hpp"
#include "mlkd/tracker.hpp"

namespace mlkd {

// One training sample: a 64 px nighttime search crop around the (jittered)
// target center, with the ground-truth box re-expressed in window
// coordinates. The 32 px template crop is shared per sequence.
struct TrainSample {
  int seq = 0;
  int frame = 0;
  ImageF search_dark{0, 0};
  BBox gt_window;
};

struct TrainDataset {
  std::vector<ImageF> templates_dark;  // one per sequence, frame-1 target crop
  std::vector<TrainSample> samples;
  DarkModel model;  // darkening parameters shared by the stored sequences
};

// The jitter offset is a pure function of (seed, sequence, frame), so every
// epoch and every rerun sees identical windows.
inline TrainDataset assemble_training_data(const std::string& dir, uint64_t seed,
                                           double jitter_px) {
  TrainDataset ds;
  const auto dirs = list_sequences(dir);
  if (dirs.empty())
    throw std::invalid_argument("training data: no sequences under " + dir);
  for (size_t s = 0; s < dirs.size(); ++s) {
    LoadedSequence seq = load_sequence(dirs[s]);
    if (s == 0) ds.model = seq.model;
    const BBox& gt0 = seq.boxes[0];
    ds.templates_dark.push_back(crop_window(seq.frames[0], gt0.cx, gt0.cy, 32));
    for (size_t t = 1; t < seq.frames.size(); ++t) {
      Rng jit(mix_seed(mix_seed(seed, static_cast<uint64_t>(s)), static_cast<uint64_t>(t)));
      const BBox& gt = seq.boxes[t];
      const double cx = gt.cx + jit.uniform(-jitter_px, jitter_px);
      const double cy = gt.cy + jit.uniform(-jitter_px, jitter_px);
      TrainSample sample;
      sample.seq = static_cast<int>(s);
      sample.frame = static_cast<int>(t);
      sample.search_dark = crop_window(seq.frames[t], cx, cy, 64);
      const double ox = std::lround(cx) - 32.0, oy = std::lround(cy) - 32.0;
      sample.gt_window = BBox{gt.cx - ox, gt.cy - oy, gt.w, gt.h};
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

// Teacher outputs per sample, computed once on the enhanced crops and reused
// across students and epochs (the teacher never moves).
struct TeacherCache {
  std::vector<Tensor> corr, cls, reg;     // indexed by sample
  std::vector<Tensor> templates;          // enhanced template tensors per sequence

  void ensure(const TrackerModel& teacher, const TrainDataset& ds, int idx) {
    if (corr.empty()) {
      corr.resize(ds.samples.size());
      cls.resize(ds.samples.size());
      reg.resize(ds.samples.size());
      templates.resize(ds.templates_dark.size());
    }
    if (corr[static_cast<size_t>(idx)].defined()) return;
    const TrainSample& s = ds.samples[static_cast<size_t>(idx)];
    Tensor& tmpl = templates[static_cast<size_t>(s.seq)];
    if (!tmpl.defined())
      tmpl = image_tensor(enhance(ds.templates_dark[static_cast<size_t>(s.seq)], ds.model));
    TrackOutputs out = forward(teacher, tmpl, image_tensor(enhance(s.search_dark, ds.model)));
    corr[static_cast<size_t>(idx)] = out.corr;
    cls[static_cast<size_t>(idx)] = out.cls;
    reg[static_cast<size_t>(idx)] = out.reg;
  }
};

// Per-student loss component means over a step's batch.
struct StepStats {
  double cls = 0, reg = 0, kdc = 0, kdr = 0, crl = 0, ml = 0, total = 0;
  double grad_norm = 0;
};

struct DistillStepResult {
  std::vector<StepStats> per_student;
  std::vector<int> elected;  // per batch sample, 1-based student id (mutual only)
};

// One optimization step over a batch: teacher forwards the enhanced crops
// (cached, no graph), students forward the nighttime crops, the best student
// per sample is elected on its softmaxed foreground scores, and each student
// takes one SGD step on its backbone. The elected student's map enters the
// others' mutual term as a constant.
inline DistillStepResult distill_step(const TrackerModel& teacher,
                                      std::vector<StudentSpec>& students,
                                      const TrainDataset& ds, const std::vector<int>& batch,
                                      TeacherCache& cache, const LossWeights& w, bool mutual,
                                      bool ml_div_u_minus_1, const OptimConfig& opt) {
  const int u = static_cast<int>(students.size());
  if (u == 0) throw std::invalid_argument("distill_step: no students");
  if (mutual && u < 2) throw std::invalid_argument("distill_step: mutual mode needs >= 2 students");
  if (batch.empty()) throw std::invalid_argument("distill_step: empty batch");
  const double bn = static_cast<double>(batch.size());

  DistillStepResult res;
  res.per_student.resize(static_cast<size_t>(u));

  // student forwards, one graph per (student, sample)
  std::vector<std::vector<TrackOutputs>> outs(static_cast<size_t>(u));
  for (int n = 0; n < u; ++n) outs[static_cast<size_t>(n)].resize(batch.size());
  for (size_t b = 0; b < batch.size(); ++b) {
    const int idx = batch[b];
    cache.ensure(teacher, ds, idx);
    const TrainSample& s = ds.samples[static_cast<size_t>(idx)];
    Tensor tmpl = image_tensor(ds.templates_dark[static_cast<size_t>(s.seq)]);
    Tensor search = image_tensor(s.search_dark);
    for (int n = 0; n < u; ++n)
      outs[static_cast<size_t>(n)][b] = forward(students[static_cast<size_t>(n)].model, tmpl, search);
  }

  // per-sample election on softmaxed foreground scores
  if (mutual) {
    res.elected.resize(batch.size());
    for (size_t b = 0; b < batch.size(); ++b) {
      std::vector<std::vector<double>> fgs;
      fgs.reserve(static_cast<size_t>(u));
      for (int n = 0; n < u; ++n)
        fgs.push_back(foreground_plane(softmax(outs[static_cast<size_t>(n)][b].cls.detach(), 0, 1.0)));
      res.elected[b] = elect(fgs, 9, 9).best_id;
    }
  }

  const double ml_denom = ml_div_u_minus_1 ? static_cast<double>(u - 1) : static_cast<double>(u);
  for (int n = 0; n < u; ++n) {
    StudentSpec& spec = students[static_cast<size_t>(n)];
    Tensor total = Tensor::scalar(0.0);
    StepStats& st = res.per_student[static_cast<size_t>(n)];
    for (size_t b = 0; b < batch.size(); ++b) {
      const int idx = batch[b];
      const TrainSample& s = ds.samples[static_cast<size_t>(idx)];
      const TrackOutputs& o = outs[static_cast<size_t>(n)][b];
      // zero-weighted terms are skipped outright: no graph, logged as 0
      LossComponents c;
      HardLoss hard = loss_hard(o.cls, o.reg, s.gt_window);
      c.cls = hard.cls;
      c.reg = hard.reg;
      if (w.lambda2 != 0.0) {
        c.kdc = loss_kdc(o.cls, cache.cls[static_cast<size_t>(idx)], w.tau, w.kl_tau_squared);
        c.kdr = loss_kdr(o.reg, cache.reg[static_cast<size_t>(idx)], w.tau);
      } else {
        c.kdc = Tensor::scalar(0.0);
        c.kdr = Tensor::scalar(0.0);
      }
      if (w.lambda3 != 0.0) {
        switch (spec.loss_kind) {
          case CrlKind::L2:
            c.crl = loss_crl_l2(o.corr, cache.corr[static_cast<size_t>(idx)]);
            break;
          case CrlKind::Spatial:
            c.crl = loss_crl_spatial(o.corr, cache.corr[static_cast<size_t>(idx)]);
            break;
          case CrlKind::Response:
            c.crl = loss_crl_response(o.corr, cache.corr[static_cast<size_t>(idx)],
                                      w.soft_binarize_beta);
            break;
        }
      } else {
        c.crl = Tensor::scalar(0.0);
      }
      if (w.lambda4 != 0.0 && mutual && res.elected[b] != spec.id) {
        const int best = res.elected[b];
        int best_slot = -1;
        for (int k = 0; k < u; ++k)
          if (students[static_cast<size_t>(k)].id == best) best_slot = k;
        c.ml = scalar_mul(mse(o.corr, outs[static_cast<size_t>(best_slot)][b].corr.detach()),
                          1.0 / ml_denom);
      } else {
        c.ml = Tensor::scalar(0.0);  // elected for this sample (or not mutual)
      }
      Tensor sample_total;
      try {
        sample_total = loss_total(c, w);
      } catch (const std::exception& e) {
        throw std::runtime_error("distill_step: student " + std::to_string(spec.id) + " (" +
                                 crl_kind_name(spec.loss_kind) + "), sample seq " +
                                 std::to_string(s.seq) + " frame " + std::to_string(s.frame) +
                                 ": " + e.what());
      }
      total = add(total, sample_total);
      st.cls += c.cls.item() / bn;
      st.reg += c.reg.item() / bn;
      st.kdc += c.kdc.item() / bn;
      st.kdr += c.kdr.item() / bn;
      st.crl += c.crl.item() / bn;
      st.ml += c.ml.item() / bn;
    }
    total = scalar_mul(total, 1.0 / bn);
    st.total = total.item();
    backward(total);
    auto params = spec.model.params();
    st.grad_norm = clip_grad_norm(params, opt.clip_norm);
    Sgd{opt.lr}.step(params);
    Sgd::zero_grad(params);
  }
  return res;
}

// Plain supervised step on the enhanced (daylight-like) crops; used for
// teacher pretraining where every parameter trains.
inline StepStats teacher_step(TrackerModel& model, const TrainDataset& ds,
                              const std::vector<int>& batch, const LossWeights& w,
                              const OptimConfig& opt) {
  const double bn = static_cast<double>(batch.size());
  Tensor total = Tensor::scalar(0.0);
  StepStats st;
  std::vector<Tensor> enhanced_templates(ds.templates_dark.size());
  for (int idx : batch) {
    const TrainSample& s = ds.samples[static_cast<size_t>(idx)];
    Tensor& tmpl = enhanced_templates[static_cast<size_t>(s.seq)];
    if (!tmpl.defined())
      tmpl = image_tensor(enhance(ds.templates_dark[static_cast<size_t>(s.seq)], ds.model));
    TrackOutputs o = forward(model, tmpl, image_tensor(enhance(s.search_dark, ds.model)));
    HardLoss hard = loss_hard(o.cls, o.reg, s.gt_window);
    Tensor sample_total = scalar_mul(add(hard.cls, hard.reg), w.lambda1);
    if (!std::isfinite(sample_total.item()))
      throw std::runtime_error("teacher_step: non-finite supervised loss at sample seq " +
                               std::to_string(s.seq) + " frame " + std::to_string(s.frame));
    total = add(total, sample_total);
    st.cls += hard.cls.item() / bn;
    st.reg += hard.reg.item() / bn;
  }
  total = scalar_mul(total, 1.0 / bn);
  st.total = total.item();
  backward(total);
  auto params = model.params();
  st.grad_norm = clip_grad_norm(params, opt.clip_norm);
  Sgd{opt.lr}.step(params);
  Sgd::zero_grad(params);
  return st;
}

struct TrainingResult {
  TrackerModel teacher;                   // teacher-pretrain mode only
  std::vector<StudentSpec> students;      // distillation modes
  std::vector<long> election_histogram;   // per student id, mutual mode only
  long total_samples_seen = 0;
  std::string log_path;
  std::vector<std::string> checkpoint_paths;
};

namespace detail {

inline std::string student_checkpoint_name(const std::string& mode, CrlKind kind) {
  if (mode == "student-no-crl") return "student-no-crl.ckpt";
  return std::string("student-") + crl_kind_name(kind) + ".ckpt";
}

inline void log_step(std::ofstream& log, int epoch, int step, int student_id,
                     const StepStats& st, int elected_id) {
  nlohmann::json rec{{"epoch", epoch},       {"step", step}, {"student_id", student_id},
                     {"cls", st.cls},        {"reg", st.reg}, {"kdc", st.kdc},
                     {"kdr", st.kdr},        {"crl", st.crl}, {"ml", st.ml},
                     {"total", st.total},    {"grad_norm", st.grad_norm},
                     {"elected_id", elected_id}};
  log << rec.dump() << "\n";
}

}  // namespace detail

// Epoch loop for all four modes. Checkpoints are written after every epoch
// (with the finished epoch recorded in the header), so an interrupted run
// resumes from the last completed epoch when cfg.resume is set.
inline TrainingResult run_training(const RunConfig& cfg) {
  validate(cfg);
  const bool teacher_mode = cfg.mode == "teacher-pretrain";
  const bool mutual = cfg.mode == "students-mutual";
  TrainDataset ds = assemble_training_data(train_data_dir(cfg), cfg.seed, cfg.jitter_px);

  std::filesystem::create_directories(cfg.out);
  save_run_config(cfg, cfg.out + "/config.json");

  TrainingResult res;
  res.log_path = cfg.out + "/train_log.ndjson";

  LossWeights w = cfg.weights;
  if (cfg.mode == "student-no-crl") w.lambda3 = w.lambda4 = 0.0;
  if (cfg.mode == "students-independent") w.lambda4 = 0.0;

  TrackerModel teacher;
  std::vector<StudentSpec> students;
  std::vector<std::string> ckpt_paths;
  int start_epoch = 0;

  if (teacher_mode) {
    ckpt_paths.push_back(cfg.out + "/teacher.ckpt");
    if (cfg.resume && std::filesystem::exists(ckpt_paths[0])) {
      teacher = load_checkpoint(ckpt_paths[0]);
      start_epoch = checkpoint_meta(ckpt_paths[0]).value("epoch", 0);
    } else {
      teacher = TrackerModel::init(mix_seed(cfg.seed, 0x7EAC));
    }
  } else {
    if (cfg.teacher_checkpoint.empty())
      throw std::invalid_argument("config: teacher_checkpoint required for mode " + cfg.mode);
    teacher = load_checkpoint(cfg.teacher_checkpoint);
    teacher.freeze_all();
    for (size_t n = 0; n < cfg.students.size(); ++n) {
      StudentSpec spec;
      spec.id = static_cast<int>(n) + 1;
      spec.loss_kind = parse_crl_kind(cfg.students[n]);
      ckpt_paths.push_back(cfg.out + "/" +
                           detail::student_checkpoint_name(cfg.mode, spec.loss_kind));
      students.push_back(std::move(spec));
    }
    // Resume only when every student checkpoint is present; a partial set
    // would mix half-trained and fresh students.
    const bool all_present =
        cfg.resume && std::all_of(ckpt_paths.begin(), ckpt_paths.end(), [](const std::string& p) {
          return std::filesystem::exists(p);
        });
    for (size_t n = 0; n < students.size(); ++n) {
      if (all_present) {
        students[n].model = load_checkpoint(ckpt_paths[n]);
        const int e = checkpoint_meta(ckpt_paths[n]).value("epoch", 0);
        start_epoch = n == 0 ? e : std::min(start_epoch, e);
      } else {
        students[n].model = load_checkpoint(cfg.teacher_checkpoint);
      }
      students[n].model.freeze_heads();
    }
  }

  std::ofstream log(res.log_path, start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("run_training: cannot write " + res.log_path);

  TeacherCache cache;
  res.election_histogram.assign(students.empty() ? 0 : students.size(), 0);

  std::vector<int> order(ds.samples.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = start_epoch; epoch < cfg.optim.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, 0x5457FF1Eu), static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    int step = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.optim.batch), ++step) {
      const size_t end = std::min(order.size(), off + static_cast<size_t>(cfg.optim.batch));
      std::vector<int> batch(order.begin() + static_cast<long>(off),
                             order.begin() + static_cast<long>(end));
      if (teacher_mode) {
        StepStats st = teacher_step(teacher, ds, batch, w, cfg.optim);
        detail::log_step(log, epoch, step, 0, st, 0);
      } else {
        DistillStepResult r = distill_step(teacher, students, ds, batch, cache, w, mutual,
                                           cfg.ml_divide_by_u_minus_1, cfg.optim);
        int modal = 0;
        if (mutual) {
          std::vector<int> counts(students.size() + 1, 0);
          for (int e : r.elected) {
            ++counts[static_cast<size_t>(e)];
            ++res.election_histogram[static_cast<size_t>(e - 1)];
          }
          for (size_t k = 1; k < counts.size(); ++k)
            if (counts[k] > counts[static_cast<size_t>(modal)]) modal = static_cast<int>(k);
        }
        for (size_t n = 0; n < students.size(); ++n)
          detail::log_step(log, epoch, step, students[n].id, r.per_student[n], modal);
      }
      res.total_samples_seen += static_cast<long>(batch.size());
    }
    // checkpoint the finished epoch
    const nlohmann::json meta{{"epoch", epoch + 1}, {"mode", cfg.mode}, {"seed", cfg.seed}};
    if (teacher_mode) {
      save_checkpoint(teacher, ckpt_paths[0], meta);
    } else {
      for (size_t n = 0; n < students.size(); ++n) {
        nlohmann::json m = meta;
        m["loss_kind"] = crl_kind_name(students[n].loss_kind);
        save_checkpoint(students[n].model, ckpt_paths[n], m);
      }
    }
  }

  if (mutual) {
    nlohmann::json hist;
    for (size_t n = 0; n < students.size(); ++n)
      hist[std::string("student_") + std::to_string(students[n].id)] =
          res.election_histogram[n];
    std::ofstream hf(cfg.out + "/election_histogram.json");
    hf << hist.dump(2) << "\n";
  }

  res.teacher = teacher;
  res.students = std::move(students);
  res.checkpoint_paths = std::move(ckpt_paths);
  return res;
}

}  // namespace mlkd
