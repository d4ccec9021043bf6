#include "qdetr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>

#include "qdetr/checkpoint.hpp"
#include "qdetr/ops.hpp"
#include "qdetr/optim.hpp"

namespace qdetr {

namespace fs = std::filesystem;

namespace {

struct TeacherOut {
  std::vector<Tensor> d_feats;  // per decoder layer [N, d_teacher]
  DetectionSet dets;
};

std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::vector<Scene> load_split(const RunConfig& cfg, const std::string& split) {
  const std::string dir = cfg.data.dir + "/" + split;
  if (!fs::exists(fs::path(dir) / "annotations.jsonl")) {
    throw io_error("dataset split missing: " + dir + " (run gen-data first)");
  }
  std::vector<Scene> scenes = read_dataset(dir);
  for (const Scene& s : scenes) {
    if (static_cast<int>(s.gt.size()) > cfg.model.num_queries) {
      throw contract_error("dataset has more objects than num_queries");
    }
  }
  return scenes;
}

// Ridge linear probe from encoder tokens to per-patch mean color; the mean
// absolute residual stands in for I(X;E) between checkpoints of one run.
double token_probe_l1(DetrModel& model, const std::vector<Scene>& val, int max_images) {
  NoGradGuard ng;
  const ModelConfig& mc = model.config();
  const int t = mc.tokens(), d = mc.d_model;
  const int fh = mc.feat_h(), fw = mc.feat_w();
  const int py = mc.image_h / fh, px = mc.image_w / fw;
  const int k = d + 1;
  const int n_img = std::min<int>(max_images, static_cast<int>(val.size()));
  if (n_img == 0) return 0.0;

  std::vector<double> xtx(static_cast<std::size_t>(k) * k, 0.0);
  std::vector<double> xty(static_cast<std::size_t>(k) * 3, 0.0);
  std::vector<std::vector<float>> feats;
  std::vector<std::vector<double>> targets;

  ForwardOptions opts;
  opts.keep_tokens = true;
  for (int i = 0; i < n_img; ++i) {
    const Scene& sc = val[static_cast<std::size_t>(i)];
    ForwardTrace tr = model.forward(sc.image_tensor(), opts);
    for (int tok = 0; tok < t; ++tok) {
      std::vector<float> x(static_cast<std::size_t>(k), 1.0f);  // bias last
      std::copy(tr.enc_tokens.data() + static_cast<std::size_t>(tok) * d,
                tr.enc_tokens.data() + static_cast<std::size_t>(tok + 1) * d, x.begin());
      const int ty = tok / fw, tx = tok % fw;
      std::vector<double> y(3, 0.0);
      int cnt = 0;
      for (int yy = ty * py; yy < std::min((ty + 1) * py, mc.image_h); ++yy) {
        for (int xx = tx * px; xx < std::min((tx + 1) * px, mc.image_w); ++xx) {
          const std::size_t p = (static_cast<std::size_t>(yy) * mc.image_w + xx) * 3;
          for (int c = 0; c < 3; ++c) y[static_cast<std::size_t>(c)] += sc.rgb[p + static_cast<std::size_t>(c)] / 255.0;
          ++cnt;
        }
      }
      for (int c = 0; c < 3; ++c) y[static_cast<std::size_t>(c)] /= std::max(1, cnt);
      for (int a = 0; a < k; ++a) {
        for (int b = 0; b < k; ++b) xtx[static_cast<std::size_t>(a) * k + b] += static_cast<double>(x[a]) * x[b];
        for (int c = 0; c < 3; ++c) xty[static_cast<std::size_t>(a) * 3 + c] += static_cast<double>(x[a]) * y[static_cast<std::size_t>(c)];
      }
      feats.push_back(std::move(x));
      targets.push_back(std::move(y));
    }
  }
  for (int a = 0; a < k; ++a) xtx[static_cast<std::size_t>(a) * k + a] += 1e-3;

  // Gaussian elimination with partial pivoting, 3 right-hand sides.
  std::vector<double> w = xty;
  for (int col = 0; col < k; ++col) {
    int piv = col;
    for (int r = col + 1; r < k; ++r) {
      if (std::abs(xtx[static_cast<std::size_t>(r) * k + col]) >
          std::abs(xtx[static_cast<std::size_t>(piv) * k + col]))
        piv = r;
    }
    if (piv != col) {
      for (int c = col; c < k; ++c)
        std::swap(xtx[static_cast<std::size_t>(col) * k + c], xtx[static_cast<std::size_t>(piv) * k + c]);
      for (int c = 0; c < 3; ++c)
        std::swap(w[static_cast<std::size_t>(col) * 3 + c], w[static_cast<std::size_t>(piv) * 3 + c]);
    }
    const double diag = xtx[static_cast<std::size_t>(col) * k + col];
    for (int r = col + 1; r < k; ++r) {
      const double f = xtx[static_cast<std::size_t>(r) * k + col] / diag;
      if (f == 0.0) continue;
      for (int c = col; c < k; ++c)
        xtx[static_cast<std::size_t>(r) * k + c] -= f * xtx[static_cast<std::size_t>(col) * k + c];
      for (int c = 0; c < 3; ++c)
        w[static_cast<std::size_t>(r) * 3 + c] -= f * w[static_cast<std::size_t>(col) * 3 + c];
    }
  }
  for (int col = k - 1; col >= 0; --col) {
    for (int c = 0; c < 3; ++c) {
      double acc = w[static_cast<std::size_t>(col) * 3 + c];
      for (int r = col + 1; r < k; ++r)
        acc -= xtx[static_cast<std::size_t>(col) * k + r] * w[static_cast<std::size_t>(r) * 3 + c];
      w[static_cast<std::size_t>(col) * 3 + c] = acc / xtx[static_cast<std::size_t>(col) * k + col];
    }
  }

  double err = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      double pred = 0.0;
      for (int a = 0; a < k; ++a) pred += feats[i][static_cast<std::size_t>(a)] * w[static_cast<std::size_t>(a) * 3 + c];
      err += std::abs(pred - targets[i][static_cast<std::size_t>(c)]);
      ++cnt;
    }
  }
  return cnt ? err / static_cast<double>(cnt) : 0.0;
}

ApResult validate(DetrModel& model, const std::vector<Scene>& val, int batch_size) {
  NoGradGuard ng;
  std::vector<DetectionSet> preds, gts;
  preds.reserve(val.size());
  gts.reserve(val.size());
  for (std::size_t i = 0; i < val.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<Tensor> imgs;
    for (std::size_t b = i; b < std::min(val.size(), i + static_cast<std::size_t>(batch_size)); ++b)
      imgs.push_back(val[b].image_tensor());
    for (ForwardTrace& tr : model.forward_batch(imgs)) preds.push_back(std::move(tr.detections));
  }
  for (const Scene& s : val) gts.push_back(s.gt);
  return ap_eval(preds, gts);
}

std::unique_ptr<DetrModel> build_teacher(const RunConfig& cfg) {
  if (cfg.drd.teacher_checkpoint.empty()) {
    throw contract_error("student stage requires drd.teacher_checkpoint");
  }
  auto teacher = std::make_unique<DetrModel>(cfg.teacher_model, QuantSiteConfig::real_valued(),
                                             cfg.seed + 101);
  load_checkpoint(teacher->params(), cfg.drd.teacher_checkpoint);
  teacher->sync_quantizers_after_load();
  return teacher;
}

std::vector<TeacherOut> cache_teacher_outputs(DetrModel& teacher, const std::vector<Scene>& train,
                                              int batch_size) {
  NoGradGuard ng;
  std::vector<TeacherOut> cache(train.size());
  for (std::size_t i = 0; i < train.size(); i += static_cast<std::size_t>(batch_size)) {
    std::vector<Tensor> imgs;
    const std::size_t hi = std::min(train.size(), i + static_cast<std::size_t>(batch_size));
    for (std::size_t b = i; b < hi; ++b) imgs.push_back(train[b].image_tensor());
    std::vector<ForwardTrace> traces = teacher.forward_batch(imgs);
    for (std::size_t b = i; b < hi; ++b) {
      TeacherOut& out = cache[b];
      ForwardTrace& tr = traces[b - i];
      for (QueryBundle& qb : tr.bundles) out.d_feats.push_back(qb.d_feat);
      out.dets = std::move(tr.detections);
    }
  }
  return cache;
}

}  // namespace

QuantSiteConfig quant_for_stage(const RunConfig& cfg) {
  switch (cfg.stage) {
    case Stage::kTeacher:
      return QuantSiteConfig::real_valued();
    case Stage::kStudentStage1: {
      QuantSiteConfig qc = cfg.quant;
      qc.quantize_encoder = false;
      qc.quantize_decoder_mha = false;
      qc.quantize_heads = false;
      return qc;
    }
    case Stage::kStudentStage2:
      return cfg.quant;
  }
  return cfg.quant;
}

std::string bits_string(const QuantSiteConfig& qc) {
  const bool any = qc.quantize_backbone || qc.quantize_encoder || qc.quantize_decoder_mha ||
                   qc.quantize_heads;
  if (!any) return "32-32-32";
  return std::to_string(qc.weight_bits) + "-" + std::to_string(qc.activation_bits) + "-" +
         std::to_string(qc.attention_bits);
}

void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& rows) {
  std::ofstream f(path);
  if (!f) throw io_error("cannot write metrics csv " + path);
  f << "epoch,l_gt,l_drd,ap,ap50,ap75,kept_ratio,ixe_proxy\n";
  for (const EpochRow& r : rows) {
    f << r.epoch << "," << csv_num(r.l_gt) << "," << csv_num(r.l_drd) << "," << csv_num(r.ap)
      << "," << csv_num(r.ap50) << "," << csv_num(r.ap75) << "," << csv_num(r.kept_ratio) << ","
      << csv_num(r.ixe_proxy) << "\n";
  }
}

void generate_dataset(const RunConfig& cfg, bool force) {
  if (cfg.data.scene.max_shapes > cfg.model.num_queries) {
    throw contract_error("data.max_shapes exceeds model num_queries");
  }
  const fs::path root(cfg.data.dir);
  const bool have = fs::exists(root / "train" / "annotations.jsonl") &&
                    fs::exists(root / "val" / "annotations.jsonl");
  if (have && !force) return;
  write_dataset(cfg.data.scene, cfg.data.train_count, (root / "train").string(), 0);
  write_dataset(cfg.data.scene, cfg.data.val_count, (root / "val").string(),
                static_cast<std::uint64_t>(cfg.data.train_count));
}

TrainResult run_training(const RunConfig& cfg) {
  fs::create_directories(cfg.out_dir);
  const std::vector<Scene> train = load_split(cfg, "train");
  const std::vector<Scene> val = load_split(cfg, "val");
  if (train.empty() || val.empty()) throw io_error("empty dataset in " + cfg.data.dir);

  const bool is_student = cfg.stage != Stage::kTeacher;
  const bool drd_loss_active =
      is_student && cfg.drd.terms.lambda > 0.0f &&
      (cfg.stage == Stage::kStudentStage2 || cfg.drd.enabled_stage1);
  const bool has_align = is_student && cfg.drd.terms.lambda > 0.0f;

  DetrModel model(cfg.model, quant_for_stage(cfg), cfg.seed,
                  has_align ? cfg.drd.align_layers : std::vector<int>{});

  std::unique_ptr<DetrModel> teacher;
  if (is_student) teacher = build_teacher(cfg);

  if (cfg.stage == Stage::kStudentStage1) {
    if (cfg.teacher_model.d_model == cfg.model.d_model &&
        cfg.teacher_model.enc_layers == cfg.model.enc_layers &&
        cfg.teacher_model.dec_layers == cfg.model.dec_layers &&
        cfg.teacher_model.backbone_channels == cfg.model.backbone_channels &&
        cfg.teacher_model.ffn_dim == cfg.model.ffn_dim) {
      // same-architecture warm start from the teacher
      load_checkpoint(model.params(), cfg.drd.teacher_checkpoint, true);
      model.sync_quantizers_after_load();
    }
  } else if (cfg.stage == Stage::kStudentStage2) {
    if (cfg.drd.stage1_checkpoint.empty()) {
      throw contract_error("student-stage2 requires drd.stage1_checkpoint");
    }
    load_checkpoint(model.params(), cfg.drd.stage1_checkpoint, false);
    model.sync_quantizers_after_load();
  }

  Tensor proj_w;
  bool use_proj = false;
  if (drd_loss_active && cfg.teacher_model.d_model != cfg.model.d_model) {
    Rng prng(cfg.seed ^ 0x517cc1b727220a95ULL);
    proj_w = model.params().add(
        "drd.proj.w",
        xavier_uniform({cfg.model.d_model, cfg.teacher_model.d_model}, cfg.model.d_model,
                       cfg.teacher_model.d_model, prng),
        true, true);
    use_proj = true;
  }

  std::vector<TeacherOut> tcache;
  if (drd_loss_active) tcache = cache_teacher_outputs(*teacher, train, cfg.optim.batch_size);

  AdamW opt(model.params(), cfg.optim.weight_decay);
  Rng shuffle_rng(cfg.seed * 7919ULL + 13ULL);
  const int epochs = cfg.epochs_effective();
  const int decay_epoch = cfg.lr_decay_epoch_effective();
  const int n = cfg.model.num_queries;

  TrainResult result;
  const std::string csv_path = cfg.out_dir + "/metrics.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw io_error("cannot write " + csv_path);
  csv << "epoch,l_gt,l_drd,ap,ap50,ap75,kept_ratio,ixe_proxy\n";

  std::vector<int> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const float lr = cfg.optim.lr * (epoch >= decay_epoch ? cfg.optim.lr_decay_factor : 1.0f);
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }

    double sum_lgt = 0.0, sum_ldrd = 0.0, kept_sum = 0.0, kept_den = 0.0;
    int images_seen = 0, step = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.optim.batch_size), ++step) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.optim.batch_size));
      Graph::tape().clear();
      model.params().zero_grad();

      std::vector<Tensor> imgs;
      imgs.reserve(stop - start);
      for (std::size_t b = start; b < stop; ++b)
        imgs.push_back(train[static_cast<std::size_t>(order[b])].image_tensor());
      std::vector<ForwardTrace> traces = model.forward_batch(imgs);

      Tensor loss;
      for (std::size_t b = start; b < stop; ++b) {
        const Scene& sc = train[static_cast<std::size_t>(order[b])];
        ForwardTrace& tr = traces[b - start];
        MatchPlan plan;
        {
          NoGradGuard ng;
          plan = hungarian(match_cost(tr.detections, sc.gt));
        }
        Tensor lgt = detection_loss(tr.detections, sc.gt, plan);
        sum_lgt += lgt.item();
        Tensor limg = lgt;
        if (drd_loss_active && sc.gt.size() > 0) {
          const TeacherOut& to = tcache[static_cast<std::size_t>(order[b])];
          const std::vector<double> g = foreground_coincidence(sc.gt, tr.detections);
          const std::vector<int> kept =
              select_queries(sc.gt, tr.detections, g, cfg.drd.terms.tau,
                             cfg.drd.terms.universal_selection);
          kept_sum += static_cast<double>(kept.size());
          kept_den += static_cast<double>(n);
          if (!kept.empty()) {
            const std::vector<DistillPair> pairs = match_to_teacher(kept, tr.detections, to.dets);
            std::vector<Tensor> student_d;
            student_d.reserve(tr.bundles.size());
            for (QueryBundle& qb : tr.bundles) student_d.push_back(qb.d_feat);
            Tensor ldrd = drd_loss(pairs, student_d, to.d_feats, use_proj ? &proj_w : nullptr);
            sum_ldrd += ldrd.item();
            limg = total_loss(lgt, ldrd, cfg.drd.terms.lambda);
          }
        }
        loss = loss.defined() ? add(loss, limg) : limg;
        ++images_seen;
      }
      loss = scale(loss, 1.0f / static_cast<float>(stop - start));

      if (!loss.all_finite()) {
        const std::string where = Graph::tape().first_nonfinite();
        throw std::runtime_error("NaN loss at epoch " + std::to_string(epoch) + " step " +
                                 std::to_string(step) + "; first non-finite tensor: " +
                                 (where.empty() ? "loss" : where));
      }
      Graph::tape().backward(loss);
      clip_grad_norm(model.params(), cfg.optim.grad_clip);
      opt.step(model.params(), lr);
    }
    Graph::tape().clear();

    EpochRow row;
    row.epoch = epoch;
    row.l_gt = sum_lgt / std::max(1, images_seen);
    row.l_drd = sum_ldrd / std::max(1, images_seen);
    const ApResult ap = validate(model, val, cfg.optim.batch_size);
    row.ap = ap.ap;
    row.ap50 = ap.ap50;
    row.ap75 = ap.ap75;
    row.kept_ratio = kept_den > 0.0 ? kept_sum / kept_den : 0.0;
    row.ixe_proxy = token_probe_l1(model, val, 64);
    result.log.push_back(row);
    result.final_val = ap;

    csv << row.epoch << "," << csv_num(row.l_gt) << "," << csv_num(row.l_drd) << ","
        << csv_num(row.ap) << "," << csv_num(row.ap50) << "," << csv_num(row.ap75) << ","
        << csv_num(row.kept_ratio) << "," << csv_num(row.ixe_proxy) << "\n";
    csv.flush();

    if (cfg.checkpoint_every > 0 &&
        ((epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == epochs)) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%03d.qdtr", epoch);
      save_checkpoint(model.params(), cfg.out_dir + "/" + name);
    }
  }

  result.checkpoint_path = cfg.out_dir + "/checkpoint.qdtr";
  result.metrics_csv_path = csv_path;
  save_checkpoint(model.params(), result.checkpoint_path);

  std::ofstream summary(cfg.out_dir + "/summary.txt");
  summary << "stage " << stage_name(cfg.stage) << "\nbits " << bits_string(quant_for_stage(cfg))
          << "\nepochs " << epochs << "\nfinal_ap " << csv_num(result.final_val.ap)
          << "\nfinal_ap50 " << csv_num(result.final_val.ap50) << "\nfinal_ap75 "
          << csv_num(result.final_val.ap75) << "\n";
  return result;
}

EvalRow evaluate_checkpoint(const RunConfig& cfg, const std::string& checkpoint,
                            const std::string& split) {
  const std::vector<Scene> data = load_split(cfg, split);
  const bool has_align = cfg.stage != Stage::kTeacher && cfg.drd.terms.lambda > 0.0f;
  DetrModel model(cfg.model, quant_for_stage(cfg), cfg.seed,
                  has_align ? cfg.drd.align_layers : std::vector<int>{});
  load_checkpoint(model.params(), checkpoint);
  model.sync_quantizers_after_load();

  EvalRow row;
  row.dataset = cfg.data.dir + "/" + split;
  row.bits = bits_string(quant_for_stage(cfg));
  row.ap = validate(model, data, cfg.optim.batch_size);

  fs::create_directories(cfg.out_dir);
  const std::string path = cfg.out_dir + "/eval.csv";
  const bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  if (fresh) f << "dataset,bits,ap,ap50,ap75\n";
  f << row.dataset << "," << row.bits << "," << csv_num(row.ap.ap) << "," << csv_num(row.ap.ap50)
    << "," << csv_num(row.ap.ap75) << "\n";
  return row;
}

namespace {

// Plain detection finetuning used by the ablation sweep.
void finetune_detection(DetrModel& model, const std::vector<Scene>& train, const OptimConfig& oc,
                        std::uint64_t seed, int epochs) {
  AdamW opt(model.params(), oc.weight_decay);
  Rng shuffle_rng(seed * 7919ULL + 13ULL);
  std::vector<int> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(shuffle_rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(oc.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(oc.batch_size));
      Graph::tape().clear();
      model.params().zero_grad();
      std::vector<Tensor> imgs;
      for (std::size_t b = start; b < stop; ++b)
        imgs.push_back(train[static_cast<std::size_t>(order[b])].image_tensor());
      std::vector<ForwardTrace> traces = model.forward_batch(imgs);
      Tensor loss;
      for (std::size_t b = start; b < stop; ++b) {
        const Scene& sc = train[static_cast<std::size_t>(order[b])];
        MatchPlan plan;
        {
          NoGradGuard ng;
          plan = hungarian(match_cost(traces[b - start].detections, sc.gt));
        }
        Tensor lgt = detection_loss(traces[b - start].detections, sc.gt, plan);
        loss = loss.defined() ? add(loss, lgt) : lgt;
      }
      loss = scale(loss, 1.0f / static_cast<float>(stop - start));
      if (!loss.all_finite()) {
        throw std::runtime_error("NaN loss in ablation finetune; first non-finite tensor: " +
                                 Graph::tape().first_nonfinite());
      }
      Graph::tape().backward(loss);
      clip_grad_norm(model.params(), oc.grad_clip);
      opt.step(model.params(), oc.lr);
    }
    Graph::tape().clear();
  }
}

}  // namespace

std::vector<AblateRow> run_ablation(const RunConfig& cfg, const std::vector<std::string>& modules) {
  for (const std::string& m : modules) {
    if (m != "backbone" && m != "encoder" && m != "decoder-mha" && m != "heads") {
      throw contract_error("unknown module name '" + m + "'");
    }
  }
  if (cfg.drd.teacher_checkpoint.empty()) {
    throw contract_error("ablation requires drd.teacher_checkpoint (trained real-valued model)");
  }
  const std::vector<Scene> train = load_split(cfg, "train");
  const std::vector<Scene> val = load_split(cfg, "val");

  std::vector<AblateRow> rows;
  double real_ap50 = 0.0;
  for (std::size_t k = 0; k <= modules.size(); ++k) {
    QuantSiteConfig qc = QuantSiteConfig::real_valued();
    std::string label = "none";
    if (k > 0) {
      qc = cfg.quant;
      qc.quantize_backbone = qc.quantize_encoder = qc.quantize_decoder_mha = qc.quantize_heads =
          false;
      label.clear();
      for (std::size_t i = 0; i < k; ++i) {
        const std::string& m = modules[i];
        if (m == "backbone") qc.quantize_backbone = true;
        if (m == "encoder") qc.quantize_encoder = true;
        if (m == "decoder-mha") qc.quantize_decoder_mha = true;
        if (m == "heads") qc.quantize_heads = true;
        label += (i ? "+" : "") + m;
      }
    }
    DetrModel model(cfg.teacher_model, qc, cfg.seed);
    load_checkpoint(model.params(), cfg.drd.teacher_checkpoint);
    model.sync_quantizers_after_load();
    if (k > 0) finetune_detection(model, train, cfg.optim, cfg.seed + k, cfg.ablate_epochs);

    AblateRow row;
    row.modules = label;
    row.ap50 = validate(model, val, cfg.optim.batch_size).ap50;
    if (k == 0) real_ap50 = row.ap50;
    row.drop = real_ap50 - row.ap50;
    rows.push_back(row);
  }

  fs::create_directories(cfg.out_dir);
  std::ofstream f(cfg.out_dir + "/ablation.csv");
  f << "modules,ap50,ap50_drop\n";
  for (const AblateRow& r : rows)
    f << r.modules << "," << csv_num(r.ap50) << "," << csv_num(r.drop) << "\n";
  return rows;
}

std::vector<InfoPlaneRow> run_info_plane(const RunConfig& cfg,
                                         std::vector<std::string> checkpoints) {
  if (checkpoints.size() < 2) {
    throw contract_error("info-plane needs at least two checkpoints from one run");
  }
  const std::vector<Scene> train = load_split(cfg, "train");
  const std::vector<Scene> val = load_split(cfg, "val");

  auto epoch_of = [](const std::string& path) {
    const std::size_t pos = path.rfind("epoch_");
    if (pos == std::string::npos) return -1;
    return std::atoi(path.c_str() + pos + 6);
  };
  std::stable_sort(checkpoints.begin(), checkpoints.end(),
                   [&](const std::string& a, const std::string& b) { return epoch_of(a) < epoch_of(b); });

  const bool has_align = cfg.stage != Stage::kTeacher && cfg.drd.terms.lambda > 0.0f;
  const int n_train = std::min<int>(512, static_cast<int>(train.size()));
  const int n_val = std::min<int>(256, static_cast<int>(val.size()));

  std::vector<InfoPlaneRow> rows;
  for (const std::string& ckpt : checkpoints) {
    DetrModel model(cfg.model, quant_for_stage(cfg), cfg.seed,
                    has_align ? cfg.drd.align_layers : std::vector<int>{});
    load_checkpoint(model.params(), ckpt);
    model.sync_quantizers_after_load();

    const ModelConfig& mc = cfg.model;
    const int fh = mc.feat_h(), fw = mc.feat_w();

    // encoder tokens are frozen: compute them once per probe image
    std::vector<Tensor> e_train, e_val;
    std::vector<std::vector<float>> img_train, img_val;
    {
      NoGradGuard ng;
      ForwardOptions opts;
      opts.keep_tokens = true;
      for (int i = 0; i < n_train; ++i) {
        const Tensor img = train[static_cast<std::size_t>(i)].image_tensor();
        e_train.push_back(model.forward(img, opts).enc_tokens);
        img_train.push_back(*img.values);
      }
      for (int i = 0; i < n_val; ++i) {
        const Tensor img = val[static_cast<std::size_t>(i)].image_tensor();
        e_val.push_back(model.forward(img, opts).enc_tokens);
        img_val.push_back(*img.values);
      }
    }

    // three transpose-conv blocks back to image resolution
    ParamStore rp;
    Rng rrng(cfg.seed + 4243);
    Tensor w1 = rp.add("recon.w1", xavier_uniform({mc.d_model, 32, 4, 4}, mc.d_model * 16, 32 * 16, rrng), true, true);
    Tensor b1 = rp.add("recon.b1", Tensor::zeros({32}), true);
    Tensor w2 = rp.add("recon.w2", xavier_uniform({32, 16, 4, 4}, 32 * 16, 16 * 16, rrng), true, true);
    Tensor b2 = rp.add("recon.b2", Tensor::zeros({16}), true);
    Tensor w3 = rp.add("recon.w3", xavier_uniform({16, 3, 4, 4}, 16 * 16, 3 * 16, rrng), true, true);
    Tensor b3 = rp.add("recon.b3", Tensor::zeros({3}), true);

    auto decode = [&](const Tensor& tokens) {
      Tensor x = rows_to_chw(tokens, fh, fw);
      x = relu(conv_transpose2d(x, w1, b1, 2, 1));
      x = relu(conv_transpose2d(x, w2, b2, 2, 1));
      return sigmoid(conv_transpose2d(x, w3, b3, 2, 1));
    };

    AdamW opt(rp, 0.0f);
    for (int epoch = 0; epoch < 5; ++epoch) {
      for (int i = 0; i < n_train; ++i) {
        Graph::tape().clear();
        rp.zero_grad();
        Tensor out = decode(e_train[static_cast<std::size_t>(i)]);
        Tensor loss = scale(sum_abs_diff(out, img_train[static_cast<std::size_t>(i)]),
                            1.0f / static_cast<float>(out.numel()));
        Graph::tape().backward(loss);
        opt.step(rp, 1e-3f);
      }
      Graph::tape().clear();
    }

    double l1 = 0.0;
    {
      NoGradGuard ng;
      for (int i = 0; i < n_val; ++i) {
        Tensor out = decode(e_val[static_cast<std::size_t>(i)]);
        double acc = 0.0;
        for (std::size_t p = 0; p < out.numel(); ++p)
          acc += std::abs(out.data()[p] - img_val[static_cast<std::size_t>(i)][p]);
        l1 += acc / static_cast<double>(out.numel());
      }
      l1 /= std::max(1, n_val);
    }

    InfoPlaneRow row;
    row.checkpoint = ckpt;
    row.epoch = epoch_of(ckpt);
    row.recon_l1 = l1;
    row.ap50 = validate(model, val, cfg.optim.batch_size).ap50;
    rows.push_back(row);
  }

  fs::create_directories(cfg.out_dir);
  std::ofstream f(cfg.out_dir + "/info_plane.csv");
  f << "checkpoint,epoch,recon_l1,ap50\n";
  for (const InfoPlaneRow& r : rows)
    f << r.checkpoint << "," << r.epoch << "," << csv_num(r.recon_l1) << "," << csv_num(r.ap50)
      << "\n";
  return rows;
}

}  // namespace qdetr
