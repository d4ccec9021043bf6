#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qdetr/checkpoint.hpp"
#include "qdetr/config.hpp"
#include "qdetr/data_synth.hpp"
#include "qdetr/size_report.hpp"
#include "qdetr/train.hpp"

using namespace qdetr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("qdetr_test_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("gen_scene: determinism, labels inside the image, positive area") {
  SceneSpec spec;
  spec.seed = 7;
  Scene a = gen_scene(spec, 3);
  Scene b = gen_scene(spec, 3);
  CHECK(a.rgb == b.rgb);
  REQUIRE(a.gt.size() == b.gt.size());
  for (std::size_t i = 0; i < a.gt.size(); ++i) {
    CHECK(a.gt.classes[i] == b.gt.classes[i]);
    CHECK(a.gt.boxes[i].cx == b.gt.boxes[i].cx);
  }

  for (int idx = 0; idx < 40; ++idx) {
    Scene s = gen_scene(spec, static_cast<std::uint64_t>(idx));
    CHECK(s.gt.size() >= 1);
    CHECK(s.gt.size() <= 4);
    for (const Box& box : s.gt.boxes) {
      CHECK(box.w > 0.0f);
      CHECK(box.h > 0.0f);
      const auto c = box.corners();
      CHECK(c[0] >= 0.0f);
      CHECK(c[1] >= 0.0f);
      CHECK(c[2] <= 1.0f);
      CHECK(c[3] <= 1.0f);
    }
  }

  Scene c = gen_scene(spec, 4);
  CHECK(a.rgb != c.rgb);  // different scene stream
}

TEST_CASE("gen_scene: zero shapes and a full-size rectangle") {
  SceneSpec spec;
  spec.min_shapes = 0;
  spec.max_shapes = 0;
  Scene empty = gen_scene(spec, 0);
  CHECK(empty.gt.size() == 0);

  SceneSpec full;
  full.min_shapes = full.max_shapes = 1;
  full.num_classes = 1;  // rectangles only
  full.min_size = 0.98;
  full.max_size = 0.98;
  Scene rect = gen_scene(full, 0);
  REQUIRE(rect.gt.size() == 1);
  CHECK(rect.gt.classes[0] == 0);
  CHECK(rect.gt.boxes[0].w == doctest::Approx(0.98).epsilon(0.03));
  CHECK(rect.gt.boxes[0].h == doctest::Approx(0.98).epsilon(0.03));
  CHECK(rect.gt.boxes[0].cx == doctest::Approx(0.5).epsilon(0.05));
  CHECK(rect.gt.boxes[0].cy == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("dataset round trip is exact") {
  const fs::path dir = temp_dir("roundtrip");
  SceneSpec spec;
  spec.seed = 21;
  write_dataset(spec, 10, dir.string(), 5);
  std::vector<Scene> loaded = read_dataset(dir.string());
  REQUIRE(loaded.size() == 10);
  for (int i = 0; i < 10; ++i) {
    Scene want = gen_scene(spec, static_cast<std::uint64_t>(5 + i));
    CHECK(loaded[static_cast<std::size_t>(i)].rgb == want.rgb);
    REQUIRE(loaded[static_cast<std::size_t>(i)].gt.size() == want.gt.size());
    for (std::size_t k = 0; k < want.gt.size(); ++k) {
      CHECK(loaded[static_cast<std::size_t>(i)].gt.classes[k] == want.gt.classes[k]);
      CHECK(loaded[static_cast<std::size_t>(i)].gt.boxes[k].cx == want.gt.boxes[k].cx);
      CHECK(loaded[static_cast<std::size_t>(i)].gt.boxes[k].cy == want.gt.boxes[k].cy);
      CHECK(loaded[static_cast<std::size_t>(i)].gt.boxes[k].w == want.gt.boxes[k].w);
      CHECK(loaded[static_cast<std::size_t>(i)].gt.boxes[k].h == want.gt.boxes[k].h);
    }
    Tensor ta = loaded[static_cast<std::size_t>(i)].image_tensor();
    Tensor tb = want.image_tensor();
    for (std::size_t p = 0; p < ta.numel(); ++p) CHECK(ta.data()[p] == tb.data()[p]);
  }
}

TEST_CASE("truncated image and malformed annotation line raise named errors") {
  const fs::path dir = temp_dir("corrupt");
  SceneSpec spec;
  write_dataset(spec, 3, dir.string());

  // truncate the second image
  const fs::path img = dir / "images" / "000001.ppm";
  fs::resize_file(img, fs::file_size(img) - 100);
  try {
    read_dataset(dir.string());
    FAIL("expected io_error");
  } catch (const io_error& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("000001.ppm") != std::string::npos);
  }

  // restore and corrupt annotation line 2
  write_dataset(spec, 3, dir.string());
  {
    std::ifstream in(dir / "annotations.jsonl");
    std::string l1, l2, l3;
    std::getline(in, l1);
    std::getline(in, l2);
    std::getline(in, l3);
    in.close();
    std::ofstream out(dir / "annotations.jsonl");
    out << l1 << "\n{not json\n" << l3 << "\n";
  }
  try {
    read_dataset(dir.string());
    FAIL("expected io_error");
  } catch (const io_error& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("checkpoint round trip, named mismatches, strict mode") {
  const fs::path dir = temp_dir("ckpt");
  ParamStore a;
  Rng rng(91);
  Tensor w = a.add("block.w", Tensor::zeros({3, 4}), true);
  Tensor b = a.add("block.b", Tensor::zeros({4}), true);
  for (std::size_t i = 0; i < w.numel(); ++i) w.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  for (std::size_t i = 0; i < b.numel(); ++i) b.data()[i] = static_cast<float>(rng.uniform(-1, 1));
  const std::string path = (dir / "a.qdtr").string();
  save_checkpoint(a, path);

  ParamStore same;
  Tensor w2 = same.add("block.w", Tensor::zeros({3, 4}), true);
  Tensor b2 = same.add("block.b", Tensor::zeros({4}), true);
  load_checkpoint(same, path);
  for (std::size_t i = 0; i < w.numel(); ++i) CHECK(w2.data()[i] == w.data()[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(b2.data()[i] == b.data()[i]);

  ParamStore renamed;
  renamed.add("block.w", Tensor::zeros({3, 4}), true);
  renamed.add("other.b", Tensor::zeros({4}), true);
  try {
    load_checkpoint(renamed, path);
    FAIL("expected io_error");
  } catch (const io_error& e) {
    CHECK(std::string(e.what()).find("block.b") != std::string::npos);
  }

  ParamStore wrong_shape;
  wrong_shape.add("block.w", Tensor::zeros({4, 3}), true);
  wrong_shape.add("block.b", Tensor::zeros({4}), true);
  CHECK_THROWS_AS(load_checkpoint(wrong_shape, path), io_error);

  // extra model parameter: rejected strictly, allowed in warm-start mode
  ParamStore extra;
  extra.add("block.w", Tensor::zeros({3, 4}), true);
  extra.add("block.b", Tensor::zeros({4}), true);
  extra.add("align.gamma", Tensor::full({4}, 1.0f), true);
  CHECK_THROWS_AS(load_checkpoint(extra, path, false), io_error);
  load_checkpoint(extra, path, true);

  CHECK_THROWS_AS(load_checkpoint(same, (dir / "missing.qdtr").string()), io_error);
}

TEST_CASE("checkpoint format details: magic and truncation") {
  const fs::path dir = temp_dir("ckptfmt");
  ParamStore a;
  a.add("x", Tensor::full({8}, 2.0f), true);
  const std::string path = (dir / "x.qdtr").string();
  save_checkpoint(a, path);

  std::ifstream f(path, std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  CHECK(std::string(magic, 4) == "QDTR");

  fs::resize_file(path, fs::file_size(path) - 8);
  ParamStore b;
  b.add("x", Tensor::zeros({8}), true);
  CHECK_THROWS_AS(load_checkpoint(b, path), io_error);
}

TEST_CASE("run config: spec keys, defaults, stage round trip") {
  nlohmann::json j = nlohmann::json::parse(R"({
    "model": {"image_size": 48, "d_model": 64, "num_classes": 3},
    "quant": {"weight_bits": 4, "activation_bits": 4, "attention_bits": 8,
              "quantize_backbone": true, "quantize_encoder": true,
              "quantize_decoder_mha": true, "quantize_heads": false},
    "optim": {"lr": 1e-4, "batch_size": 16},
    "drd": {"tau": 0.6, "lambda": 2.5},
    "data": {"train_count": 3000, "val_count": 300, "dir": "data/x"},
    "seed": 5,
    "stage": "student-stage2"
  })");
  RunConfig c = parse_run_config(j);
  CHECK(c.quant.weight_bits == 4);
  CHECK(c.quant.attention_bits == 8);
  CHECK_FALSE(c.quant.quantize_heads);
  CHECK(c.drd.terms.tau == 0.6f);
  CHECK(c.drd.terms.lambda == 2.5f);
  CHECK(c.seed == 5);
  CHECK(c.stage == Stage::kStudentStage2);
  CHECK(c.epochs_effective() == 40);            // student default
  CHECK(c.lr_decay_epoch_effective() == 26);    // 2/3 of epochs
  CHECK(c.drd.align_layers == std::vector<int>{0, 1});
  CHECK(c.data.scene.num_classes == 3);

  RunConfig teacher = c;
  teacher.stage = Stage::kTeacher;
  CHECK(teacher.epochs_effective() == 30);

  nlohmann::json round = run_config_to_json(c);
  RunConfig c2 = parse_run_config(round);
  CHECK(c2.stage == Stage::kStudentStage2);
  CHECK(c2.quant.weight_bits == c.quant.weight_bits);
  CHECK(c2.drd.terms.tau == c.drd.terms.tau);

  CHECK_THROWS_AS(stage_from_name("bogus"), contract_error);
}

TEST_CASE("size report: paper headline number and closed-form cases") {
  // 39.8M real-valued parameters -> 159.2 MB
  SizeReport full = size_report_from_counts({{32, 39800000ULL}}, {});
  CHECK(full.size_mb == doctest::Approx(159.2).epsilon(1e-9));
  CHECK(std::abs(full.size_mb - 159.0) < 1.0);

  // 1M at 4 bits + 1M real -> 36M bits = 4.5 MB exactly
  SizeReport mixed = size_report_from_counts({{32, 1000000ULL}, {4, 1000000ULL}}, {});
  CHECK(mixed.size_bits == 36000000ULL);
  CHECK(mixed.size_mb == doctest::Approx(4.5).epsilon(1e-12));
  CHECK(mixed.real_params == 1000000ULL);
  CHECK(mixed.quant_params == 1000000ULL);

  // zero quantized macs: OPs equals plain FLOPs (2 per MAC)
  SizeReport flops = size_report_from_counts({}, {{32, 500ULL}});
  CHECK(flops.ops == doctest::Approx(1000.0));

  // 4-bit macs cost 1/8 of a multiplication each
  SizeReport q = size_report_from_counts({}, {{4, 800ULL}});
  CHECK(q.ops == doctest::Approx(100.0));

  CHECK_THROWS_AS(size_report_from_counts({{5, 10ULL}}, {}), contract_error);
}

TEST_CASE("model-based size report tracks the quantization config") {
  ModelConfig mc;
  QuantSiteConfig real = QuantSiteConfig::real_valued();
  QuantSiteConfig q4;  // default 4-4-8 everywhere
  SizeReport r32 = size_report_for_model(mc, real);
  SizeReport r4 = size_report_for_model(mc, q4);
  CHECK(r32.quant_params == 0);
  CHECK(r4.quant_params > 0);
  CHECK(r4.size_mb < r32.size_mb);
  CHECK(r4.ops_g < r32.ops_g);
  CHECK(r32.real_params + r32.quant_params == r4.real_params + r4.quant_params);
}

TEST_CASE("bits_string reflects the configured sites") {
  QuantSiteConfig q;
  CHECK(bits_string(q) == "4-4-8");
  CHECK(bits_string(QuantSiteConfig::real_valued()) == "32-32-32");
}
