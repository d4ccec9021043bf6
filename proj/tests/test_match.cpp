#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "qdetr/boxes.hpp"
#include "qdetr/detection.hpp"
#include "qdetr/hungarian.hpp"
#include "qdetr/ops.hpp"
#include "qdetr/rng.hpp"

using namespace qdetr;

namespace {

Box random_box(Rng& rng) {
  Box b;
  b.w = static_cast<float>(rng.uniform(0.05, 0.5));
  b.h = static_cast<float>(rng.uniform(0.05, 0.5));
  b.cx = static_cast<float>(rng.uniform(b.w / 2, 1.0 - b.w / 2));
  b.cy = static_cast<float>(rng.uniform(b.h / 2, 1.0 - b.h / 2));
  return b;
}

// exhaustive assignment search: lexicographically smallest optimum, rows in
// order, real columns ascending, unmatched after any real column
struct BruteForce {
  int n = 0, m = 0;
  const float* cost = nullptr;
  double best = 1e300;

  void min_total(std::vector<char>& used, int row, int unmatched_left, double acc) {
    if (row == n) {
      best = std::min(best, acc);
      return;
    }
    for (int c = 0; c < m; ++c) {
      if (used[static_cast<std::size_t>(c)]) continue;
      used[static_cast<std::size_t>(c)] = 1;
      min_total(used, row + 1, unmatched_left, acc + cost[static_cast<std::size_t>(row) * m + c]);
      used[static_cast<std::size_t>(c)] = 0;
    }
    if (unmatched_left > 0) min_total(used, row + 1, unmatched_left - 1, acc);
  }

  bool find_lex(std::vector<char>& used, std::vector<int>& assign, int row, int unmatched_left,
                double acc, double tol) {
    if (row == n) return acc <= best + tol;
    for (int c = 0; c < m; ++c) {
      if (used[static_cast<std::size_t>(c)]) continue;
      used[static_cast<std::size_t>(c)] = 1;
      assign[static_cast<std::size_t>(row)] = c;
      if (find_lex(used, assign, row + 1, unmatched_left, acc + cost[static_cast<std::size_t>(row) * m + c], tol))
        return true;
      used[static_cast<std::size_t>(c)] = 0;
    }
    if (unmatched_left > 0) {
      assign[static_cast<std::size_t>(row)] = -1;
      if (find_lex(used, assign, row + 1, unmatched_left - 1, acc, tol)) return true;
    }
    return false;
  }

  std::vector<int> solve(const Tensor& t) {
    n = t.rows();
    m = t.cols();
    cost = t.data();
    best = 1e300;
    std::vector<char> used(static_cast<std::size_t>(m), 0);
    min_total(used, 0, std::max(0, n - m), 0.0);
    const double tol = 1e-9 * std::max(1.0, std::abs(best));
    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    std::fill(used.begin(), used.end(), 0);
    find_lex(used, assign, 0, std::max(0, n - m), 0.0, tol);
    return assign;
  }
};

std::vector<int> plan_to_assign(const MatchPlan& plan, int n) {
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (const auto& [r, c] : plan.pairs) assign[static_cast<std::size_t>(r)] = c;
  return assign;
}

}  // namespace

TEST_CASE("giou: identity, touching, distant hand values") {
  Box a = Box::from_corners(0, 0, 1, 1);
  CHECK(giou(a, a) == doctest::Approx(1.0));

  Box b = Box::from_corners(1, 0, 2, 1);
  CHECK(giou(a, b) == doctest::Approx(0.0).epsilon(1e-9));

  Box c = Box::from_corners(9, 0, 10, 1);
  CHECK(giou(a, c) == doctest::Approx(-0.8).epsilon(1e-9));
}

TEST_CASE("giou: range, symmetry, containment equals IoU, degenerate point") {
  Rng rng(41);
  for (int i = 0; i < 500; ++i) {
    Box a = random_box(rng);
    Box b = random_box(rng);
    const double g = giou(a, b);
    CHECK(g > -1.0);
    CHECK(g <= 1.0 + 1e-12);
    CHECK(g == doctest::Approx(giou(b, a)).epsilon(1e-9));
  }
  // b inside a: enclosing == a == union, so giou == iou
  Box a = Box::from_corners(0, 0, 1, 1);
  Box b = Box::from_corners(0.25, 0.25, 0.5, 0.5);
  CHECK(giou(a, b) == doctest::Approx(iou(a, b)).epsilon(1e-9));

  Box point{0.5f, 0.5f, 0.0f, 0.0f};
  CHECK(giou(a, point) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("giou gradient matches finite differences on both arguments") {
  Rng rng(42);
  int done = 0;
  while (done < 60) {
    Box ab = random_box(rng);
    Box bb = random_box(rng);
    const auto ca = ab.corners();
    const auto cb = bb.corners();
    double a[4] = {ca[0], ca[1], ca[2], ca[3]};
    double b[4] = {cb[0], cb[1], cb[2], cb[3]};
    // skip near-degenerate corner coincidences
    bool degenerate = false;
    for (int i = 0; i < 4; ++i)
      if (std::abs(a[i] - b[i]) < 1e-3) degenerate = true;
    const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
    const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
    if (degenerate || std::abs(iw) < 1e-3 || std::abs(ih) < 1e-3) continue;

    double ga[4], gb[4];
    giou_corners_grad(a, b, ga, gb);
    const double h = 1e-6;
    for (int i = 0; i < 4; ++i) {
      double up[4], dn[4];
      std::copy(a, a + 4, up);
      std::copy(a, a + 4, dn);
      up[i] += h;
      dn[i] -= h;
      const double fd = (giou_corners_grad(up, b, nullptr, nullptr) -
                         giou_corners_grad(dn, b, nullptr, nullptr)) /
                        (2 * h);
      CHECK(std::abs(ga[i] - fd) <= 1e-3 * (std::abs(fd) + 1e-8));

      std::copy(b, b + 4, up);
      std::copy(b, b + 4, dn);
      up[i] += h;
      dn[i] -= h;
      const double fdb = (giou_corners_grad(a, up, nullptr, nullptr) -
                          giou_corners_grad(a, dn, nullptr, nullptr)) /
                         (2 * h);
      CHECK(std::abs(gb[i] - fdb) <= 1e-3 * (std::abs(fdb) + 1e-8));
    }
    ++done;
  }
}

TEST_CASE("giou_pairs autograd op gradient in cxcywh form") {
  Rng rng(43);
  Tensor pred = Tensor::zeros({5, 4});
  std::vector<float> target;
  for (int i = 0; i < 5; ++i) {
    const Box p = random_box(rng);
    const Box t = random_box(rng);
    pred.data()[static_cast<std::size_t>(i) * 4 + 0] = p.cx;
    pred.data()[static_cast<std::size_t>(i) * 4 + 1] = p.cy;
    pred.data()[static_cast<std::size_t>(i) * 4 + 2] = p.w;
    pred.data()[static_cast<std::size_t>(i) * 4 + 3] = p.h;
    target.insert(target.end(), {t.cx, t.cy, t.w, t.h});
  }
  auto f = [&](const Tensor& t) { return sum(giou_pairs(t, target)); };
  Graph& g = Graph::tape();
  const std::size_t mark = g.mark();
  pred.requires_grad = true;
  pred.ensure_grad();
  Tensor loss = f(pred);
  g.backward_from(loss, mark);
  g.truncate(mark);

  // double FD oracle over the cxcywh coordinates
  auto f64 = [&](const std::vector<double>& v) {
    double acc = 0.0;
    for (int i = 0; i < 5; ++i) {
      const double* p = v.data() + static_cast<std::size_t>(i) * 4;
      const float* t = target.data() + static_cast<std::size_t>(i) * 4;
      const double pc[4] = {p[0] - 0.5 * p[2], p[1] - 0.5 * p[3], p[0] + 0.5 * p[2], p[1] + 0.5 * p[3]};
      const double tc[4] = {t[0] - 0.5 * t[2], t[1] - 0.5 * t[3], t[0] + 0.5 * t[2], t[1] + 0.5 * t[3]};
      acc += giou_corners_grad(pc, tc, nullptr, nullptr);
    }
    return acc;
  };
  std::vector<double> x0(pred.data(), pred.data() + pred.numel());
  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    std::vector<double> up = x0, dn = x0;
    up[i] += h;
    dn[i] -= h;
    const double cd = (f64(up) - f64(dn)) / (2.0 * h);
    worst = std::max(worst, std::abs(pred.grad_data()[i] - cd) / (std::abs(cd) + 1e-8));
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("hungarian: diagonal zeros, argmin row, ties to lowest index") {
  Tensor diag = Tensor::full({3, 3}, 5.0f);
  for (int i = 0; i < 3; ++i) diag.data()[static_cast<std::size_t>(i) * 3 + i] = 0.0f;
  MatchPlan plan = hungarian(diag);
  REQUIRE(plan.pairs.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(plan.pairs[static_cast<std::size_t>(i)].first == i);
    CHECK(plan.pairs[static_cast<std::size_t>(i)].second == i);
  }

  Tensor row = Tensor::from_data({1, 4}, {3.0f, 1.0f, 1.0f, 2.0f});
  MatchPlan p1 = hungarian(row);
  REQUIRE(p1.pairs.size() == 1);
  CHECK(p1.pairs[0].second == 1);  // tie between columns 1 and 2

  CHECK_THROWS_AS(hungarian(Tensor::from_data({1, 1}, {std::nanf("")})), contract_error);
}

TEST_CASE("hungarian equals exhaustive search on 200 random 7x7 instances") {
  Rng rng(44);
  BruteForce bf;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor cost = Tensor::zeros({7, 7});
    for (std::size_t i = 0; i < cost.numel(); ++i)
      cost.data()[i] = static_cast<float>(rng.uniform(-5.0, 5.0));
    const std::vector<int> want = bf.solve(cost);
    const std::vector<int> got = plan_to_assign(hungarian(cost), 7);
    CHECK(want == got);
  }
}

TEST_CASE("hungarian equals exhaustive search on 100 rectangular instances") {
  Rng rng(45);
  BruteForce bf;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(rng.uniform_int(0, 6));
    const int m = 1 + static_cast<int>(rng.uniform_int(0, 6));
    Tensor cost = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < cost.numel(); ++i)
      cost.data()[i] = static_cast<float>(rng.uniform(-4.0, 4.0));
    const std::vector<int> want = bf.solve(cost);
    const std::vector<int> got = plan_to_assign(hungarian(cost), n);
    CHECK(want == got);
    // every plan covers min(n,m) pairs
    CHECK(static_cast<int>(hungarian(cost).pairs.size()) == std::min(n, m));
  }
}

TEST_CASE("hungarian is invariant under constant shifts of the cost matrix") {
  Rng rng(46);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor cost = Tensor::zeros({5, 5});
    for (std::size_t i = 0; i < cost.numel(); ++i)
      cost.data()[i] = static_cast<float>(rng.uniform(-2.0, 2.0));
    Tensor shifted = add_scalar(cost, 3.75f);
    CHECK(plan_to_assign(hungarian(cost), 5) == plan_to_assign(hungarian(shifted), 5));
  }
}

namespace {

DetectionSet make_preds(const std::vector<Box>& boxes, const std::vector<int>& classes,
                        int num_classes, float confidence = 8.0f) {
  const int n = static_cast<int>(boxes.size());
  Tensor logits = Tensor::zeros({n, num_classes + 1});
  Tensor bt = Tensor::zeros({n, 4});
  for (int i = 0; i < n; ++i) {
    logits.data()[static_cast<std::size_t>(i) * (num_classes + 1) + classes[static_cast<std::size_t>(i)]] = confidence;
    bt.data()[static_cast<std::size_t>(i) * 4 + 0] = boxes[static_cast<std::size_t>(i)].cx;
    bt.data()[static_cast<std::size_t>(i) * 4 + 1] = boxes[static_cast<std::size_t>(i)].cy;
    bt.data()[static_cast<std::size_t>(i) * 4 + 2] = boxes[static_cast<std::size_t>(i)].w;
    bt.data()[static_cast<std::size_t>(i) * 4 + 3] = boxes[static_cast<std::size_t>(i)].h;
  }
  return DetectionSet::from_model(logits, bt, num_classes);
}

}  // namespace

TEST_CASE("match_cost: exact hit scores about -3 and wins its row") {
  Rng rng(47);
  Box gt_box = random_box(rng);
  DetectionSet gts = DetectionSet::ground_truth({1}, {gt_box});
  std::vector<Box> pboxes{gt_box, random_box(rng), random_box(rng)};
  DetectionSet preds = make_preds(pboxes, {1, 0, 2}, 3, 30.0f);

  Tensor cost = match_cost(preds, gts);
  CHECK(cost.rows() == 3);
  CHECK(cost.cols() == 1);
  CHECK(cost.data()[0] == doctest::Approx(-3.0).epsilon(1e-4));
  CHECK(cost.data()[0] <= cost.data()[1]);
  CHECK(cost.data()[0] <= cost.data()[2]);
}

TEST_CASE("match_cost: empty gts and column permutation symmetry") {
  Rng rng(48);
  std::vector<Box> pboxes{random_box(rng), random_box(rng)};
  DetectionSet preds = make_preds(pboxes, {0, 1}, 3);
  DetectionSet none = DetectionSet::ground_truth({}, {});
  Tensor cost = match_cost(preds, none);
  CHECK(cost.rows() == 2);
  CHECK(cost.cols() == 0);
  MatchPlan plan = hungarian(cost);
  CHECK(plan.pairs.empty());
  CHECK(plan.unmatched_predictions == std::vector<int>{0, 1});

  DetectionSet g1 = DetectionSet::ground_truth({0, 2}, {random_box(rng), random_box(rng)});
  DetectionSet g2 = DetectionSet::ground_truth({2, 0}, {g1.boxes[1], g1.boxes[0]});
  Tensor c1 = match_cost(preds, g1);
  Tensor c2 = match_cost(preds, g2);
  for (int r = 0; r < 2; ++r) {
    CHECK(c1.data()[static_cast<std::size_t>(r) * 2 + 0] == c2.data()[static_cast<std::size_t>(r) * 2 + 1]);
    CHECK(c1.data()[static_cast<std::size_t>(r) * 2 + 1] == c2.data()[static_cast<std::size_t>(r) * 2 + 0]);
  }
}

TEST_CASE("detection_loss: perfect predictions reach the floor") {
  Rng rng(49);
  std::vector<Box> boxes{random_box(rng), random_box(rng)};
  DetectionSet gts = DetectionSet::ground_truth({0, 2}, boxes);
  std::vector<Box> pboxes = boxes;
  pboxes.push_back(random_box(rng));
  DetectionSet preds = make_preds(pboxes, {0, 2, 3}, 3, 30.0f);  // third predicts no-object

  MatchPlan plan = hungarian(match_cost(preds, gts));
  NoGradGuard ng;
  Tensor loss = detection_loss(preds, gts, plan);
  CHECK(loss.item() >= 0.0f);
  CHECK(loss.item() < 1e-3f);
}

TEST_CASE("detection_loss equals an independent hand recomputation") {
  Rng rng(50);
  const int n = 4, c = 3;
  std::vector<Box> gt_boxes{random_box(rng), random_box(rng)};
  DetectionSet gts = DetectionSet::ground_truth({2, 0}, gt_boxes);

  Tensor logits = Tensor::zeros({n, c + 1});
  Tensor bt = Tensor::zeros({n, 4});
  for (std::size_t i = 0; i < logits.numel(); ++i)
    logits.data()[i] = static_cast<float>(rng.uniform(-1.5, 1.5));
  for (int i = 0; i < n; ++i) {
    const Box b = random_box(rng);
    bt.data()[static_cast<std::size_t>(i) * 4 + 0] = b.cx;
    bt.data()[static_cast<std::size_t>(i) * 4 + 1] = b.cy;
    bt.data()[static_cast<std::size_t>(i) * 4 + 2] = b.w;
    bt.data()[static_cast<std::size_t>(i) * 4 + 3] = b.h;
  }
  DetectionSet preds = DetectionSet::from_model(logits, bt, c);
  MatchPlan plan = hungarian(match_cost(preds, gts));

  NoGradGuard ng;
  const double got = detection_loss(preds, gts, plan).item();

  // independent scalar recomputation in double
  std::vector<int> target(n, c);
  std::vector<double> weight(n, 0.1);
  for (const auto& [j, i] : plan.pairs) {
    target[static_cast<std::size_t>(j)] = gts.classes[static_cast<std::size_t>(i)];
    weight[static_cast<std::size_t>(j)] = 1.0;
  }
  double ce = 0.0, wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int k = 0; k <= c; ++k) denom += std::exp(static_cast<double>(logits.data()[static_cast<std::size_t>(i) * (c + 1) + k]));
    const double p = std::exp(static_cast<double>(logits.data()[static_cast<std::size_t>(i) * (c + 1) + target[static_cast<std::size_t>(i)]])) / denom;
    ce += weight[static_cast<std::size_t>(i)] * -std::log(p);
    wsum += weight[static_cast<std::size_t>(i)];
  }
  ce /= wsum;
  double boxterm = 0.0;
  for (const auto& [j, i] : plan.pairs) {
    const Box& pb = preds.boxes[static_cast<std::size_t>(j)];
    const Box& gb = gts.boxes[static_cast<std::size_t>(i)];
    const double l1 = std::abs(pb.cx - gb.cx) + std::abs(pb.cy - gb.cy) + std::abs(pb.w - gb.w) +
                      std::abs(pb.h - gb.h);
    boxterm += 5.0 * l1 + 2.0 * (1.0 - giou(pb, gb));
  }
  boxterm /= static_cast<double>(gts.size());
  CHECK(got == doctest::Approx(ce + boxterm).epsilon(1e-6));
}

TEST_CASE("detection_loss with no ground truth is the pure no-object term") {
  Rng rng(51);
  DetectionSet gts = DetectionSet::ground_truth({}, {});
  std::vector<Box> pboxes{random_box(rng), random_box(rng)};
  DetectionSet preds = make_preds(pboxes, {0, 1}, 3, 2.0f);
  MatchPlan plan = hungarian(match_cost(preds, gts));
  NoGradGuard ng;
  const double got = detection_loss(preds, gts, plan).item();

  double ce = 0.0;
  const int c = 3;
  for (int i = 0; i < 2; ++i) {
    double denom = 0.0;
    for (int k = 0; k <= c; ++k)
      denom += std::exp(static_cast<double>(preds.logits.data()[static_cast<std::size_t>(i) * (c + 1) + k]));
    const double p = std::exp(static_cast<double>(preds.logits.data()[static_cast<std::size_t>(i) * (c + 1) + c])) / denom;
    ce += 0.1 * -std::log(p);
  }
  ce /= 0.2;
  CHECK(got == doctest::Approx(ce).epsilon(1e-6));
}

TEST_CASE("ap_eval: perfect predictions, no predictions, empty gt warning") {
  Rng rng(52);
  std::vector<DetectionSet> gts, preds;
  for (int img = 0; img < 3; ++img) {
    std::vector<Box> boxes{random_box(rng), random_box(rng)};
    gts.push_back(DetectionSet::ground_truth({img % 3, (img + 1) % 3}, boxes));
    preds.push_back(make_preds(boxes, {img % 3, (img + 1) % 3}, 3, 30.0f));
  }
  ApResult perfect = ap_eval(preds, gts);
  CHECK(perfect.ap == doctest::Approx(1.0));
  CHECK(perfect.ap50 == doctest::Approx(1.0));
  CHECK(perfect.ap75 == doctest::Approx(1.0));

  std::vector<DetectionSet> empty_preds(3);
  for (auto& p : empty_preds) p = make_preds({}, {}, 3);
  ApResult none = ap_eval(empty_preds, gts);
  CHECK(none.ap == doctest::Approx(0.0));

  std::vector<DetectionSet> empty_gts(3);
  for (auto& g : empty_gts) g = DetectionSet::ground_truth({}, {});
  ApResult warn = ap_eval(preds, empty_gts);
  CHECK(warn.empty_gt_warning);
  CHECK(warn.ap == doctest::Approx(0.0));
}

TEST_CASE("ap_eval matches a hand-computed PR integration with one false positive") {
  // three single-object images, all class 0; one extra confident false
  // positive outranks every true positive
  std::vector<DetectionSet> gts, preds;
  Box g0 = Box::from_corners(0.1f, 0.1f, 0.4f, 0.4f);
  Box g1 = Box::from_corners(0.5f, 0.5f, 0.9f, 0.8f);
  Box g2 = Box::from_corners(0.2f, 0.6f, 0.45f, 0.9f);
  Box far = Box::from_corners(0.7f, 0.05f, 0.95f, 0.3f);
  gts.push_back(DetectionSet::ground_truth({0}, {g0}));
  gts.push_back(DetectionSet::ground_truth({0}, {g1}));
  gts.push_back(DetectionSet::ground_truth({0}, {g2}));

  auto with_scores = [](const std::vector<Box>& boxes, const std::vector<float>& scores) {
    DetectionSet s;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
      s.classes.push_back(0);
      s.boxes.push_back(boxes[i]);
      s.scores.push_back(scores[i]);
    }
    return s;
  };
  preds.push_back(with_scores({g0}, {0.9f}));
  preds.push_back(with_scores({g1}, {0.8f}));
  preds.push_back(with_scores({g2, far}, {0.7f, 0.95f}));

  ApResult r = ap_eval(preds, gts);
  // ranked: FP(.95), TP(.9), TP(.8), TP(.7); right-max precision is 3/4
  // at every achieved recall, so the 101-point mean is exactly 0.75
  CHECK(r.ap50 == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(r.ap75 == doctest::Approx(0.75).epsilon(1e-9));
  CHECK(r.ap == doctest::Approx(0.75).epsilon(1e-9));

  ApResult again = ap_eval(preds, gts);
  CHECK(again.ap == r.ap);  // deterministic
}
