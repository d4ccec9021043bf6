#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qdetr/checkpoint.hpp"
#include "qdetr/size_report.hpp"
#include "qdetr/train.hpp"

using namespace qdetr;

namespace {

RunConfig config_from(const std::string& path, const std::string& out_override) {
  RunConfig cfg = load_run_config(path);
  if (!out_override.empty()) cfg.out_dir = out_override;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qdetr: low-bit quantization-aware training for a toy detection transformer"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, split = "val";
  std::vector<std::string> checkpoints;
  std::string modules_csv = "backbone,encoder,decoder-mha,heads";
  bool force = false;

  long long real_params = -1, quant_params = -1, real_macs = 0, quant_macs = 0;
  int quant_bits = 4;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run config")->required();
    sub->add_option("--out", out_dir, "output directory override");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic shapes dataset");
  add_common(gen);
  gen->add_flag("--force", force, "regenerate even if the dataset exists");

  CLI::App* train = app.add_subcommand("train", "train one stage (teacher / student-stage1 / student-stage2)");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint (AP/AP50/AP75 CSV)");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint, "QDTR checkpoint")->required();
  eval->add_option("--split", split, "train|val");

  CLI::App* ablate = app.add_subcommand("ablate", "AP50 drop per progressively quantized module set");
  add_common(ablate);
  ablate->add_option("--modules", modules_csv, "comma list from backbone,encoder,decoder-mha,heads");

  CLI::App* info = app.add_subcommand("info-plane", "reconstruction-L1 vs AP50 for a checkpoint series");
  add_common(info);
  info->add_option("--checkpoints", checkpoints, "two or more checkpoints of one run")->required();

  CLI::App* size = app.add_subcommand("size-report", "model size (MB) and OPs (G)");
  add_common(size);
  size->add_option("--checkpoint", checkpoint, "report for this checkpoint's model");
  size->add_option("--real-params", real_params, "closed-form mode: real-valued weight count");
  size->add_option("--quant-params", quant_params, "closed-form mode: quantized weight count");
  size->add_option("--quant-bits", quant_bits, "closed-form mode: bit-width of quantized weights");
  size->add_option("--real-macs", real_macs, "closed-form mode: real-valued multiply-accumulates");
  size->add_option("--quant-macs", quant_macs, "closed-form mode: quantized multiply-accumulates");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      generate_dataset(cfg, force);
      std::cout << "dataset ready at " << cfg.data.dir << "\n";
    } else if (train->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      TrainResult res = run_training(cfg);
      std::cout << "checkpoint " << res.checkpoint_path << "\nmetrics " << res.metrics_csv_path
                << "\nfinal ap50 " << res.final_val.ap50 << "\n";
    } else if (eval->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      EvalRow row = evaluate_checkpoint(cfg, checkpoint, split);
      std::printf("%s,%s,%.6f,%.6f,%.6f\n", row.dataset.c_str(), row.bits.c_str(), row.ap.ap,
                  row.ap.ap50, row.ap.ap75);
      if (row.ap.empty_gt_warning) std::cerr << "warning: dataset has no ground truth; AP reported as 0\n";
    } else if (ablate->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      std::vector<std::string> modules;
      std::string cur;
      for (char c : modules_csv + ",") {
        if (c == ',') {
          if (!cur.empty()) modules.push_back(cur);
          cur.clear();
        } else {
          cur += c;
        }
      }
      for (const AblateRow& r : run_ablation(cfg, modules)) {
        std::printf("%s,%.6f,%.6f\n", r.modules.c_str(), r.ap50, r.drop);
      }
    } else if (info->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      for (const InfoPlaneRow& r : run_info_plane(cfg, checkpoints)) {
        std::printf("%s,%d,%.6f,%.6f\n", r.checkpoint.c_str(), r.epoch, r.recon_l1, r.ap50);
      }
    } else if (size->parsed()) {
      RunConfig cfg = config_from(config_path, out_dir);
      SizeReport rep;
      if (real_params >= 0 || quant_params >= 0) {
        std::vector<std::pair<int, std::uint64_t>> params, macs;
        if (real_params > 0) params.emplace_back(32, static_cast<std::uint64_t>(real_params));
        if (quant_params > 0) params.emplace_back(quant_bits, static_cast<std::uint64_t>(quant_params));
        if (real_macs > 0) macs.emplace_back(32, static_cast<std::uint64_t>(real_macs));
        if (quant_macs > 0) macs.emplace_back(quant_bits, static_cast<std::uint64_t>(quant_macs));
        rep = size_report_from_counts(params, macs);
      } else {
        if (!checkpoint.empty()) {
          // surface named-tensor errors early if the checkpoint mismatches
          const bool has_align = cfg.stage != Stage::kTeacher && cfg.drd.terms.lambda > 0.0f;
          DetrModel model(cfg.model, quant_for_stage(cfg), cfg.seed,
                          has_align ? cfg.drd.align_layers : std::vector<int>{});
          load_checkpoint(model.params(), checkpoint);
        }
        rep = size_report_for_model(cfg.model, quant_for_stage(cfg));
      }
      nlohmann::json j{{"size_MB", rep.size_mb},
                       {"OPs_G", rep.ops_g},
                       {"real_params", rep.real_params},
                       {"quant_params", rep.quant_params},
                       {"size_bits", rep.size_bits}};
      std::cout << j.dump(2) << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
