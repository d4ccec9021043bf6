#pragma once

#include <string>
#include <vector>

#include "qdetr/config.hpp"
#include "qdetr/data_synth.hpp"
#include "qdetr/model.hpp"

namespace qdetr {

struct EpochRow {
  int epoch = 0;
  double l_gt = 0.0;
  double l_drd = 0.0;
  double ap = 0.0;
  double ap50 = 0.0;
  double ap75 = 0.0;
  double kept_ratio = 0.0;
  double ixe_proxy = 0.0;  // linear-probe reconstruction L1 on val tokens
};

struct TrainResult {
  std::vector<EpochRow> log;
  std::string checkpoint_path;
  std::string metrics_csv_path;
  ApResult final_val;
};

// Writes <data.dir>/train and <data.dir>/val; val indices continue after the
// train range so the splits never share a scene stream.
void generate_dataset(const RunConfig& cfg, bool force = false);

// One stage of the protocol: teacher (all real, lambda 0), student-stage1
// (backbone quantized, transformer real), student-stage2 (fully quantized,
// initialized from the stage-1 checkpoint).
TrainResult run_training(const RunConfig& cfg);

struct EvalRow {
  std::string dataset;
  std::string bits;
  ApResult ap;
};
EvalRow evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint,
                            const std::string& split);

struct AblateRow {
  std::string modules;  // "none" or "backbone+encoder+..."
  double ap50 = 0.0;
  double drop = 0.0;
};
// Finetunes the real-valued teacher with each prefix of `modules` quantized
// and reports the AP50 drop per prefix.
std::vector<AblateRow> run_ablation(const RunConfig& cfg, const std::vector<std::string>& modules);

struct InfoPlaneRow {
  std::string checkpoint;
  int epoch = -1;
  double recon_l1 = 0.0;  // I(X;E) proxy: lower error, higher information
  double ap50 = 0.0;
};
// Trains a reconstruction decoder per checkpoint (frozen encoder, 5 epochs)
// and pairs the final L1 error with the checkpoint's val AP50.
std::vector<InfoPlaneRow> run_info_plane(const RunConfig& cfg,
                                         std::vector<std::string> checkpoints);

std::string bits_string(const QuantSiteConfig& qc);
void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& rows);
QuantSiteConfig quant_for_stage(const RunConfig& cfg);

}  // namespace qdetr
