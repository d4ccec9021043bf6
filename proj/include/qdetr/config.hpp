#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "qdetr/data_synth.hpp"
#include "qdetr/drd.hpp"
#include "qdetr/model.hpp"
#include "qdetr/quant.hpp"

namespace qdetr {

enum class Stage { kTeacher, kStudentStage1, kStudentStage2 };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct OptimConfig {
  float lr = 1e-4f;
  int batch_size = 16;
  int epochs = 0;  // 0: default by stage (30 teacher / 40 student)
  int lr_decay_epoch = 0;  // 0: 2/3 of epochs
  float lr_decay_factor = 0.1f;
  float weight_decay = 1e-4f;
  float grad_clip = 0.1f;  // <=0 disables
};

struct DrdRunConfig {
  IBTerms terms;                 // tau, lambda, selection quantifier
  std::vector<int> align_layers; // default: every decoder layer
  bool enabled_stage1 = true;
  std::string teacher_checkpoint;
  std::string stage1_checkpoint;
};

struct DataRunConfig {
  SceneSpec scene;
  int train_count = 3000;
  int val_count = 300;
  std::string dir = "data/default";
};

struct RunConfig {
  ModelConfig model;
  ModelConfig teacher_model;  // defaults to `model`
  QuantSiteConfig quant;
  OptimConfig optim;
  DrdRunConfig drd;
  DataRunConfig data;
  std::uint64_t seed = 1;
  Stage stage = Stage::kTeacher;
  std::string out_dir = "runs/out";
  int checkpoint_every = 0;  // also keep ckpt_epoch_N.qdtr every N epochs
  int ablate_epochs = 4;

  int epochs_effective() const;
  int lr_decay_epoch_effective() const;
};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace qdetr
