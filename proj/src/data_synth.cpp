#include "qdetr/data_synth.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "qdetr/rng.hpp"

namespace qdetr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct ShapeMask {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // tight pixel bounds,半-open
  std::vector<std::uint8_t> bits;      // w*h within the candidate box
  int bw = 0, bh = 0, bx = 0, by = 0;  // candidate box the bits refer to
  bool empty = true;
};

ShapeMask rasterize(int cls, int bx, int by, int bw, int bh) {
  ShapeMask m;
  m.bx = bx;
  m.by = by;
  m.bw = bw;
  m.bh = bh;
  m.bits.assign(static_cast<std::size_t>(bw) * bh, 0);

  auto set = [&](int x, int y) { m.bits[static_cast<std::size_t>(y) * bw + x] = 1; };

  if (cls == 0) {
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) set(x, y);
  } else if (cls == 1) {
    const std::int64_t w = bw, h = bh;
    for (int y = 0; y < bh; ++y) {
      const std::int64_t v = 2 * y + 1 - h;
      for (int x = 0; x < bw; ++x) {
        const std::int64_t u = 2 * x + 1 - w;
        if (u * u * h * h + v * v * w * w <= w * w * h * h) set(x, y);
      }
    }
  } else {
    // isoceles triangle: apex top-center, base bottom edge; doubled integer
    // coordinates keep the half-plane tests exact
    const std::int64_t v0x = bw, v0y = 1;                   // apex
    const std::int64_t v1x = 1, v1y = 2 * bh - 1;           // bottom-left
    const std::int64_t v2x = 2 * bw - 1, v2y = 2 * bh - 1;  // bottom-right
    auto edge = [](std::int64_t axp, std::int64_t ayp, std::int64_t bxp, std::int64_t byp,
                   std::int64_t px, std::int64_t py) {
      return (bxp - axp) * (py - ayp) - (byp - ayp) * (px - axp);
    };
    for (int y = 0; y < bh; ++y) {
      for (int x = 0; x < bw; ++x) {
        const std::int64_t px = 2 * x + 1, py = 2 * y + 1;
        const std::int64_t e0 = edge(v0x, v0y, v1x, v1y, px, py);
        const std::int64_t e1 = edge(v1x, v1y, v2x, v2y, px, py);
        const std::int64_t e2 = edge(v2x, v2y, v0x, v0y, px, py);
        if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) set(x, y);
      }
    }
  }

  int xmin = bw, ymin = bh, xmax = -1, ymax = -1;
  for (int y = 0; y < bh; ++y)
    for (int x = 0; x < bw; ++x)
      if (m.bits[static_cast<std::size_t>(y) * bw + x]) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
  if (xmax < 0) return m;
  m.empty = false;
  m.x0 = bx + xmin;
  m.x1 = bx + xmax + 1;
  m.y0 = by + ymin;
  m.y1 = by + ymax + 1;
  return m;
}

double box_iou_px(int ax0, int ay0, int ax1, int ay1, int bx0, int by0, int bx1, int by1) {
  const int iw = std::min(ax1, bx1) - std::max(ax0, bx0);
  const int ih = std::min(ay1, by1) - std::max(ay0, by0);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = static_cast<double>(iw) * ih;
  const double uni = static_cast<double>(ax1 - ax0) * (ay1 - ay0) +
                     static_cast<double>(bx1 - bx0) * (by1 - by0) - inter;
  return inter / uni;
}

std::string image_name(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06llu.ppm", static_cast<unsigned long long>(index));
  return buf;
}

void write_ppm(const fs::path& path, const Scene& s) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot write " + path.string());
  f << "P6\n" << s.width << " " << s.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(s.rgb.data()), static_cast<std::streamsize>(s.rgb.size()));
}

void read_ppm(const fs::path& path, Scene& s) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) {
    throw io_error("malformed PPM header in " + path.string());
  }
  f.get();  // single whitespace after header
  s.width = w;
  s.height = h;
  s.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(s.rgb.data()), static_cast<std::streamsize>(s.rgb.size()));
  if (f.gcount() != static_cast<std::streamsize>(s.rgb.size())) {
    throw io_error("truncated image " + path.string() + ": expected " +
                   std::to_string(s.rgb.size()) + " pixel bytes, got " +
                   std::to_string(f.gcount()));
  }
}

json spec_to_json(const SceneSpec& s) {
  return json{{"seed", s.seed},
              {"image_h", s.image_h},
              {"image_w", s.image_w},
              {"min_shapes", s.min_shapes},
              {"max_shapes", s.max_shapes},
              {"num_classes", s.num_classes},
              {"min_size", s.min_size},
              {"max_size", s.max_size},
              {"color_jitter", s.color_jitter},
              {"noise_amplitude", s.noise_amplitude}};
}

}  // namespace

Tensor Scene::image_tensor() const {
  Tensor t = Tensor::zeros({3, height, width});
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t p = (static_cast<std::size_t>(y) * width + x);
      for (int c = 0; c < 3; ++c) {
        t.data()[static_cast<std::size_t>(c) * plane + p] =
            static_cast<float>(rgb[p * 3 + static_cast<std::size_t>(c)]) / 255.0f;
      }
    }
  }
  return t;
}

Scene gen_scene(const SceneSpec& spec, std::uint64_t index) {
  if (spec.min_shapes < 0 || spec.max_shapes < spec.min_shapes) {
    throw contract_error("gen_scene: bad shape-count range");
  }
  if (spec.num_classes < 1 || spec.num_classes > 3) {
    throw contract_error("gen_scene: num_classes must be in [1,3]");
  }
  Rng rng = Rng::stream(spec.seed, index);
  Scene s;
  s.width = spec.image_w;
  s.height = spec.image_h;
  s.rgb.assign(static_cast<std::size_t>(s.width) * s.height * 3, 0);

  // grayscale-noise background
  for (int p = 0; p < s.width * s.height; ++p) {
    const int n = static_cast<int>(rng.uniform_int(-spec.noise_amplitude, spec.noise_amplitude));
    const int base[3] = {118, 122, 126};
    for (int c = 0; c < 3; ++c) {
      s.rgb[static_cast<std::size_t>(p) * 3 + static_cast<std::size_t>(c)] =
          static_cast<std::uint8_t>(std::clamp(base[c] + n, 0, 255));
    }
  }

  const int count = static_cast<int>(rng.uniform_int(spec.min_shapes, spec.max_shapes));
  const int minside = std::min(s.width, s.height);
  const int lo = std::max(3, static_cast<int>(spec.min_size * minside));
  const int hi = std::max(lo, static_cast<int>(spec.max_size * minside));

  const int base_color[3][3] = {{202, 70, 58}, {66, 188, 84}, {64, 92, 212}};

  std::vector<int> classes;
  std::vector<Box> boxes;
  std::vector<std::array<int, 4>> px_bounds;

  for (int k = 0; k < count; ++k) {
    const int cls = static_cast<int>(rng.uniform_int(0, spec.num_classes - 1));
    ShapeMask mask;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const int bw = static_cast<int>(rng.uniform_int(lo, hi));
      const int bh = static_cast<int>(rng.uniform_int(lo, hi));
      const int bx = static_cast<int>(rng.uniform_int(0, s.width - bw));
      const int by = static_cast<int>(rng.uniform_int(0, s.height - bh));
      ShapeMask cand = rasterize(cls, bx, by, bw, bh);
      if (cand.empty) continue;
      bool crowded = false;
      for (const auto& b : px_bounds) {
        if (box_iou_px(cand.x0, cand.y0, cand.x1, cand.y1, b[0], b[1], b[2], b[3]) > 0.5) {
          crowded = true;
          break;
        }
      }
      mask = cand;
      if (!crowded) break;  // else keep the last candidate, accepted on attempt 8
    }
    if (mask.empty) continue;

    int col[3];
    for (int c = 0; c < 3; ++c) {
      col[c] = std::clamp(base_color[cls][c] +
                              static_cast<int>(rng.uniform_int(-spec.color_jitter, spec.color_jitter)),
                          0, 255);
    }
    for (int y = 0; y < mask.bh; ++y) {
      for (int x = 0; x < mask.bw; ++x) {
        if (!mask.bits[static_cast<std::size_t>(y) * mask.bw + x]) continue;
        const std::size_t p =
            (static_cast<std::size_t>(mask.by + y) * s.width + static_cast<std::size_t>(mask.bx + x)) * 3;
        for (int c = 0; c < 3; ++c) s.rgb[p + static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(col[c]);
      }
    }

    classes.push_back(cls);
    px_bounds.push_back({mask.x0, mask.y0, mask.x1, mask.y1});
    Box b;
    b.cx = static_cast<float>(mask.x0 + mask.x1) / (2.0f * static_cast<float>(s.width));
    b.cy = static_cast<float>(mask.y0 + mask.y1) / (2.0f * static_cast<float>(s.height));
    b.w = static_cast<float>(mask.x1 - mask.x0) / static_cast<float>(s.width);
    b.h = static_cast<float>(mask.y1 - mask.y0) / static_cast<float>(s.height);
    boxes.push_back(b);
  }

  s.gt = DetectionSet::ground_truth(std::move(classes), std::move(boxes));
  return s;
}

void write_dataset(const SceneSpec& spec, int count, const std::string& dir,
                   std::uint64_t index_offset) {
  const fs::path root(dir);
  fs::create_directories(root / "images");

  std::ofstream ann(root / "annotations.jsonl");
  if (!ann) throw io_error("cannot write " + (root / "annotations.jsonl").string());

  for (int i = 0; i < count; ++i) {
    const std::uint64_t idx = index_offset + static_cast<std::uint64_t>(i);
    const Scene s = gen_scene(spec, idx);
    write_ppm(root / "images" / image_name(idx), s);

    json objects = json::array();
    for (std::size_t k = 0; k < s.gt.size(); ++k) {
      const Box& b = s.gt.boxes[k];
      objects.push_back(json{{"class", s.gt.classes[k]},
                             {"box", {static_cast<double>(b.cx), static_cast<double>(b.cy),
                                      static_cast<double>(b.w), static_cast<double>(b.h)}}});
    }
    ann << json{{"img", image_name(idx)}, {"objects", objects}}.dump() << "\n";
  }

  json meta = spec_to_json(spec);
  meta["count"] = count;
  meta["index_offset"] = index_offset;
  std::ofstream sf(root / "spec.json");
  sf << meta.dump(2) << "\n";
}

std::vector<Scene> read_dataset(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream ann(root / "annotations.jsonl");
  if (!ann) throw io_error("cannot open " + (root / "annotations.jsonl").string());

  std::vector<Scene> scenes;
  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw io_error("annotations.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("img") || !j.contains("objects")) {
      throw io_error("annotations.jsonl line " + std::to_string(line_no) + ": missing img/objects");
    }
    Scene s;
    read_ppm(root / "images" / j["img"].get<std::string>(), s);
    std::vector<int> classes;
    std::vector<Box> boxes;
    for (const json& o : j["objects"]) {
      if (!o.contains("class") || !o.contains("box") || o["box"].size() != 4) {
        throw io_error("annotations.jsonl line " + std::to_string(line_no) + ": malformed object");
      }
      classes.push_back(o["class"].get<int>());
      Box b;
      b.cx = static_cast<float>(o["box"][0].get<double>());
      b.cy = static_cast<float>(o["box"][1].get<double>());
      b.w = static_cast<float>(o["box"][2].get<double>());
      b.h = static_cast<float>(o["box"][3].get<double>());
      boxes.push_back(b);
    }
    s.gt = DetectionSet::ground_truth(std::move(classes), std::move(boxes));
    scenes.push_back(std::move(s));
  }
  return scenes;
}

}  // namespace qdetr
