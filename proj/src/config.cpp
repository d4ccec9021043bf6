#include "qdetr/config.hpp"

#include <fstream>

namespace qdetr {

using nlohmann::json;

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kTeacher: return "teacher";
    case Stage::kStudentStage1: return "student-stage1";
    case Stage::kStudentStage2: return "student-stage2";
  }
  return "teacher";
}

Stage stage_from_name(const std::string& name) {
  if (name == "teacher") return Stage::kTeacher;
  if (name == "student-stage1") return Stage::kStudentStage1;
  if (name == "student-stage2") return Stage::kStudentStage2;
  throw contract_error("unknown stage '" + name + "'");
}

int RunConfig::epochs_effective() const {
  if (optim.epochs > 0) return optim.epochs;
  return stage == Stage::kTeacher ? 30 : 40;
}

int RunConfig::lr_decay_epoch_effective() const {
  if (optim.lr_decay_epoch > 0) return optim.lr_decay_epoch;
  return (2 * epochs_effective()) / 3;
}

namespace {

template <typename T>
void read_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ModelConfig parse_model(const json& j, ModelConfig base = {}) {
  ModelConfig m = base;
  read_if(j, "image_h", m.image_h);
  read_if(j, "image_w", m.image_w);
  if (j.contains("image_size")) {
    m.image_h = j.at("image_size").get<int>();
    m.image_w = m.image_h;
  }
  read_if(j, "d_model", m.d_model);
  read_if(j, "n_heads", m.n_heads);
  read_if(j, "enc_layers", m.enc_layers);
  read_if(j, "dec_layers", m.dec_layers);
  read_if(j, "num_queries", m.num_queries);
  read_if(j, "num_classes", m.num_classes);
  if (j.contains("backbone_channels"))
    m.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  m.ffn_dim = 4 * m.d_model;
  read_if(j, "ffn_dim", m.ffn_dim);
  return m;
}

json model_to_json(const ModelConfig& m) {
  return json{{"image_h", m.image_h},   {"image_w", m.image_w},
              {"d_model", m.d_model},   {"n_heads", m.n_heads},
              {"enc_layers", m.enc_layers}, {"dec_layers", m.dec_layers},
              {"num_queries", m.num_queries}, {"num_classes", m.num_classes},
              {"backbone_channels", m.backbone_channels}, {"ffn_dim", m.ffn_dim}};
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  if (j.contains("model")) c.model = parse_model(j.at("model"));
  c.teacher_model = j.contains("teacher_model") ? parse_model(j.at("teacher_model"), c.model)
                                                : c.model;

  if (j.contains("quant")) {
    const json& q = j.at("quant");
    read_if(q, "weight_bits", c.quant.weight_bits);
    read_if(q, "activation_bits", c.quant.activation_bits);
    read_if(q, "attention_bits", c.quant.attention_bits);
    read_if(q, "quantize_backbone", c.quant.quantize_backbone);
    read_if(q, "quantize_encoder", c.quant.quantize_encoder);
    read_if(q, "quantize_decoder_mha", c.quant.quantize_decoder_mha);
    read_if(q, "quantize_heads", c.quant.quantize_heads);
  }

  if (j.contains("optim")) {
    const json& o = j.at("optim");
    read_if(o, "lr", c.optim.lr);
    read_if(o, "batch_size", c.optim.batch_size);
    read_if(o, "epochs", c.optim.epochs);
    read_if(o, "lr_decay_epoch", c.optim.lr_decay_epoch);
    read_if(o, "lr_decay_factor", c.optim.lr_decay_factor);
    read_if(o, "weight_decay", c.optim.weight_decay);
    read_if(o, "grad_clip", c.optim.grad_clip);
  }

  if (j.contains("drd")) {
    const json& d = j.at("drd");
    read_if(d, "tau", c.drd.terms.tau);
    read_if(d, "lambda", c.drd.terms.lambda);
    read_if(d, "universal_selection", c.drd.terms.universal_selection);
    if (d.contains("align_layers"))
      c.drd.align_layers = d.at("align_layers").get<std::vector<int>>();
    read_if(d, "enabled_stage1", c.drd.enabled_stage1);
    read_if(d, "teacher_checkpoint", c.drd.teacher_checkpoint);
    read_if(d, "stage1_checkpoint", c.drd.stage1_checkpoint);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    read_if(d, "seed", c.data.scene.seed);
    read_if(d, "min_shapes", c.data.scene.min_shapes);
    read_if(d, "max_shapes", c.data.scene.max_shapes);
    read_if(d, "min_size", c.data.scene.min_size);
    read_if(d, "max_size", c.data.scene.max_size);
    read_if(d, "color_jitter", c.data.scene.color_jitter);
    read_if(d, "noise_amplitude", c.data.scene.noise_amplitude);
    read_if(d, "train_count", c.data.train_count);
    read_if(d, "val_count", c.data.val_count);
    read_if(d, "dir", c.data.dir);
    c.data.scene.image_h = c.model.image_h;
    c.data.scene.image_w = c.model.image_w;
    c.data.scene.num_classes = c.model.num_classes;
  } else {
    c.data.scene.image_h = c.model.image_h;
    c.data.scene.image_w = c.model.image_w;
    c.data.scene.num_classes = c.model.num_classes;
  }

  read_if(j, "seed", c.seed);
  if (j.contains("stage")) c.stage = stage_from_name(j.at("stage").get<std::string>());
  read_if(j, "out_dir", c.out_dir);
  read_if(j, "checkpoint_every", c.checkpoint_every);
  read_if(j, "ablate_epochs", c.ablate_epochs);

  if (c.drd.align_layers.empty()) {
    for (int i = 0; i < c.model.dec_layers; ++i) c.drd.align_layers.push_back(i);
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw io_error("cannot open config " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw io_error("config " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  json j;
  j["model"] = model_to_json(c.model);
  j["teacher_model"] = model_to_json(c.teacher_model);
  j["quant"] = json{{"weight_bits", c.quant.weight_bits},
                    {"activation_bits", c.quant.activation_bits},
                    {"attention_bits", c.quant.attention_bits},
                    {"quantize_backbone", c.quant.quantize_backbone},
                    {"quantize_encoder", c.quant.quantize_encoder},
                    {"quantize_decoder_mha", c.quant.quantize_decoder_mha},
                    {"quantize_heads", c.quant.quantize_heads}};
  j["optim"] = json{{"lr", c.optim.lr},
                    {"batch_size", c.optim.batch_size},
                    {"epochs", c.optim.epochs},
                    {"lr_decay_epoch", c.optim.lr_decay_epoch},
                    {"lr_decay_factor", c.optim.lr_decay_factor},
                    {"weight_decay", c.optim.weight_decay},
                    {"grad_clip", c.optim.grad_clip}};
  j["drd"] = json{{"tau", c.drd.terms.tau},
                  {"lambda", c.drd.terms.lambda},
                  {"universal_selection", c.drd.terms.universal_selection},
                  {"align_layers", c.drd.align_layers},
                  {"enabled_stage1", c.drd.enabled_stage1},
                  {"teacher_checkpoint", c.drd.teacher_checkpoint},
                  {"stage1_checkpoint", c.drd.stage1_checkpoint}};
  j["data"] = json{{"seed", c.data.scene.seed},
                   {"min_shapes", c.data.scene.min_shapes},
                   {"max_shapes", c.data.scene.max_shapes},
                   {"min_size", c.data.scene.min_size},
                   {"max_size", c.data.scene.max_size},
                   {"color_jitter", c.data.scene.color_jitter},
                   {"noise_amplitude", c.data.scene.noise_amplitude},
                   {"train_count", c.data.train_count},
                   {"val_count", c.data.val_count},
                   {"dir", c.data.dir}};
  j["seed"] = c.seed;
  j["stage"] = stage_name(c.stage);
  j["out_dir"] = c.out_dir;
  j["checkpoint_every"] = c.checkpoint_every;
  j["ablate_epochs"] = c.ablate_epochs;
  return j;
}

}  // namespace qdetr
