// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: one JSON document covering data generation, training,
// and evaluation. Command-line flags override file fields; the resolved
// config is written into the output directory for provenance.

#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mlkd/darkroom.hpp"
#include "mlkd/losses.hpp"
#include "mlkd/mutual.hpp"

namespace mlkd {

struct DataConfig {
  std::string train_dir;  // resolved against out/ when empty
  std::string eval_dir;
  int num_train_sequences = 60;
  int train_frames = 40;
  int num_eval_sequences = 20;
  int eval_frames = 100;
  int image_size = 96;
  std::vector<std::string> attribute_mix = {kAttributes.begin(), kAttributes.end()};
};

struct OptimConfig {
  double lr = 0.005;
  int batch = 16;
  int epochs = 10;
  double clip_norm = 5.0;
};

// A model entry for evaluation: checkpoint path plus whether its inputs go
// through the oracle enhancer (the teacher's configuration).
struct EvalModelRef {
  std::string name;
  std::string path;
  bool enhancer = false;
};

struct RunConfig {
  std::string mode = "students-mutual";
  std::string out = "runs/out";
  uint64_t seed = 1;
  DataConfig data;
  LossWeights weights;
  bool ml_divide_by_u_minus_1 = false;
  OptimConfig optim;
  std::vector<std::string> students = {"l2", "spatial", "response"};
  std::string teacher_checkpoint;
  bool resume = false;
  int fps_runs = 3;  // timing repeats per model; 0 pins reported speed to 0.0
  double jitter_px = 8.0;
  std::vector<EvalModelRef> eval_models;
  std::vector<std::string> attributes;  // eval restriction; empty = all sequences
};

inline const std::vector<std::string> kTrainingModes = {
    "teacher-pretrain", "student-no-crl", "students-independent", "students-mutual"};

inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw std::invalid_argument("config: " + field + " " + why);
  };
  if (std::find(kTrainingModes.begin(), kTrainingModes.end(), c.mode) == kTrainingModes.end())
    fail("mode", "must be one of teacher-pretrain | student-no-crl | students-independent | "
                 "students-mutual, got " + c.mode);
  if (c.out.empty()) fail("out", "must not be empty");
  if (c.data.num_train_sequences < 1) fail("data.num_train_sequences", "must be >= 1");
  if (c.data.train_frames < 2) fail("data.train_frames", "must be >= 2");
  if (c.data.num_eval_sequences < 1) fail("data.num_eval_sequences", "must be >= 1");
  if (c.data.eval_frames < 2) fail("data.eval_frames", "must be >= 2");
  if (c.data.image_size < 72) fail("data.image_size", "must be >= 72 (64 px window + margin)");
  for (const auto& a : c.data.attribute_mix)
    if (std::find(kAttributes.begin(), kAttributes.end(), a) == kAttributes.end())
      fail("data.attribute_mix", "contains unknown attribute " + a);
  if (c.data.attribute_mix.empty()) fail("data.attribute_mix", "must not be empty");
  if (!(c.optim.lr > 0.0)) fail("optim.lr", "must be positive");
  if (c.optim.batch < 1) fail("optim.batch", "must be >= 1");
  if (c.optim.epochs < 1) fail("optim.epochs", "must be >= 1");
  if (!(c.optim.clip_norm > 0.0)) fail("optim.clip_norm", "must be positive");
  if (c.students.empty()) fail("students", "must list at least one loss kind");
  for (const auto& s : c.students) parse_crl_kind(s);  // throws on unknown kinds
  if (c.mode == "students-mutual" && c.students.size() < 2)
    fail("students", "students-mutual needs at least 2 students");
  if (c.mode == "student-no-crl" && c.students.size() != 1)
    fail("students", "student-no-crl trains exactly one student");
  if (!(c.weights.tau > 0.0)) fail("weights.tau", "must be positive");
  if (!(c.weights.soft_binarize_beta > 0.0)) fail("weights.soft_binarize_beta", "must be positive");
  if (c.fps_runs < 0) fail("fps_runs", "must be >= 0");
  if (c.jitter_px < 0.0) fail("jitter_px", "must be >= 0");
  for (const auto& a : c.attributes)
    if (std::find(kAttributes.begin(), kAttributes.end(), a) == kAttributes.end())
      fail("attributes", "contains unknown attribute " + a);
}

// Paths derived from the output directory when not set explicitly.
inline std::string train_data_dir(const RunConfig& c) {
  return c.data.train_dir.empty() ? c.out + "/data/train" : c.data.train_dir;
}
inline std::string eval_data_dir(const RunConfig& c) {
  return c.data.eval_dir.empty() ? c.out + "/data/eval" : c.data.eval_dir;
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["mode"] = c.mode;
  j["out"] = c.out;
  j["seed"] = c.seed;
  j["data"] = {{"train_dir", c.data.train_dir},
               {"eval_dir", c.data.eval_dir},
               {"num_train_sequences", c.data.num_train_sequences},
               {"train_frames", c.data.train_frames},
               {"num_eval_sequences", c.data.num_eval_sequences},
               {"eval_frames", c.data.eval_frames},
               {"image_size", c.data.image_size},
               {"attribute_mix", c.data.attribute_mix}};
  j["weights"] = {{"lambda1", c.weights.lambda1},
                  {"lambda2", c.weights.lambda2},
                  {"lambda3", c.weights.lambda3},
                  {"lambda4", c.weights.lambda4},
                  {"tau", c.weights.tau},
                  {"kl_tau_squared", c.weights.kl_tau_squared},
                  {"soft_binarize_beta", c.weights.soft_binarize_beta}};
  j["ml_divide_by_u_minus_1"] = c.ml_divide_by_u_minus_1;
  j["optim"] = {{"lr", c.optim.lr},
                {"batch", c.optim.batch},
                {"epochs", c.optim.epochs},
                {"clip_norm", c.optim.clip_norm}};
  j["students"] = c.students;
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  j["resume"] = c.resume;
  j["fps_runs"] = c.fps_runs;
  j["jitter_px"] = c.jitter_px;
  j["attributes"] = c.attributes;
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : c.eval_models)
    models.push_back({{"name", m.name}, {"path", m.path}, {"enhancer", m.enhancer}});
  j["eval_models"] = models;
  return j;
}

// Applies only the fields present in j, leaving the rest at their current
// values; unknown keys are an error (they are always typos in practice).
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "mode", "out",     "seed",   "data",   "weights",  "ml_divide_by_u_minus_1",
      "optim", "students", "teacher_checkpoint", "resume", "fps_runs", "jitter_px",
      "attributes", "eval_models"};
  for (const auto& [key, _] : j.items())
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw std::invalid_argument("config: unknown key " + key);
  auto get = [](const nlohmann::json& o, const char* k, auto& dst) {
    if (o.contains(k)) dst = o.at(k).get<std::decay_t<decltype(dst)>>();
  };
  get(j, "mode", c.mode);
  get(j, "out", c.out);
  get(j, "seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    get(d, "train_dir", c.data.train_dir);
    get(d, "eval_dir", c.data.eval_dir);
    get(d, "num_train_sequences", c.data.num_train_sequences);
    get(d, "train_frames", c.data.train_frames);
    get(d, "num_eval_sequences", c.data.num_eval_sequences);
    get(d, "eval_frames", c.data.eval_frames);
    get(d, "image_size", c.data.image_size);
    get(d, "attribute_mix", c.data.attribute_mix);
  }
  if (j.contains("weights")) {
    const auto& w = j.at("weights");
    get(w, "lambda1", c.weights.lambda1);
    get(w, "lambda2", c.weights.lambda2);
    get(w, "lambda3", c.weights.lambda3);
    get(w, "lambda4", c.weights.lambda4);
    get(w, "tau", c.weights.tau);
    get(w, "kl_tau_squared", c.weights.kl_tau_squared);
    get(w, "soft_binarize_beta", c.weights.soft_binarize_beta);
  }
  get(j, "ml_divide_by_u_minus_1", c.ml_divide_by_u_minus_1);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    get(o, "lr", c.optim.lr);
    get(o, "batch", c.optim.batch);
    get(o, "epochs", c.optim.epochs);
    get(o, "clip_norm", c.optim.clip_norm);
  }
  get(j, "students", c.students);
  get(j, "teacher_checkpoint", c.teacher_checkpoint);
  get(j, "resume", c.resume);
  get(j, "fps_runs", c.fps_runs);
  get(j, "jitter_px", c.jitter_px);
  get(j, "attributes", c.attributes);
  if (j.contains("eval_models")) {
    c.eval_models.clear();
    for (const auto& m : j.at("eval_models")) {
      EvalModelRef r;
      r.name = m.at("name").get<std::string>();
      r.path = m.at("path").get<std::string>();
      if (m.contains("enhancer")) r.enhancer = m.at("enhancer").get<bool>();
      c.eval_models.push_back(std::move(r));
    }
  }
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw std::invalid_argument("config: " + path + " is not valid JSON: " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

inline void save_run_config(const RunConfig& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("config: cannot write " + path);
  f << to_json(c).dump(2) << "\n";
}

}  // namespace mlkd
