#include "qdetr/boxes.hpp"

#include <algorithm>
#include <cmath>

namespace qdetr {

namespace {
constexpr double kTiny = 1e-12;
}

double iou(const Box& a, const Box& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double iw = std::min<double>(ca[2], cb[2]) - std::max<double>(ca[0], cb[0]);
  const double ih = std::min<double>(ca[3], cb[3]) - std::max<double>(ca[1], cb[1]);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double ua = std::max<double>(0.0, a.w) * std::max<double>(0.0, a.h);
  const double ub = std::max<double>(0.0, b.w) * std::max<double>(0.0, b.h);
  const double uni = ua + ub - inter;
  return uni <= kTiny ? 0.0 : inter / uni;
}

double giou(const Box& a, const Box& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double af[4] = {ca[0], ca[1], ca[2], ca[3]};
  const double bf[4] = {cb[0], cb[1], cb[2], cb[3]};
  return giou_corners_grad(af, bf, nullptr, nullptr);
}

double giou_corners_grad(const double a[4], const double b[4], double ga[4], double gb[4]) {
  const double iw = std::min(a[2], b[2]) - std::max(a[0], b[0]);
  const double ih = std::min(a[3], b[3]) - std::max(a[1], b[1]);
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;

  const double aw = std::max(0.0, a[2] - a[0]);
  const double ah = std::max(0.0, a[3] - a[1]);
  const double bw = std::max(0.0, b[2] - b[0]);
  const double bh = std::max(0.0, b[3] - b[1]);
  const double area_a = aw * ah;
  const double area_b = bw * bh;

  const double uni = std::max(kTiny, area_a + area_b - inter);
  const double ew = std::max(a[2], b[2]) - std::min(a[0], b[0]);
  const double eh = std::max(a[3], b[3]) - std::min(a[1], b[1]);
  const double enc = std::max(kTiny, ew * eh);

  const double g = inter / uni - (enc - uni) / enc;

  if (!ga && !gb) return g;

  // G(I, Aa, Ab, E) with U = Aa + Ab - I.
  const double dG_dI = (uni + inter) / (uni * uni) - 1.0 / enc;
  const double dG_dA = -inter / (uni * uni) + 1.0 / enc;
  const double dG_dE = -uni / (enc * enc);

  double da[4] = {0, 0, 0, 0};
  double db[4] = {0, 0, 0, 0};

  if (overlap) {
    // iw = min(a2,b2) - max(a0,b0); ties credit a.
    const bool a0_max = a[0] >= b[0];
    const bool a2_min = a[2] <= b[2];
    const bool a1_max = a[1] >= b[1];
    const bool a3_min = a[3] <= b[3];
    da[0] += dG_dI * (a0_max ? -ih : 0.0);
    db[0] += dG_dI * (a0_max ? 0.0 : -ih);
    da[2] += dG_dI * (a2_min ? ih : 0.0);
    db[2] += dG_dI * (a2_min ? 0.0 : ih);
    da[1] += dG_dI * (a1_max ? -iw : 0.0);
    db[1] += dG_dI * (a1_max ? 0.0 : -iw);
    da[3] += dG_dI * (a3_min ? iw : 0.0);
    db[3] += dG_dI * (a3_min ? 0.0 : iw);
  }

  da[0] += dG_dA * -ah;
  da[2] += dG_dA * ah;
  da[1] += dG_dA * -aw;
  da[3] += dG_dA * aw;
  db[0] += dG_dA * -bh;
  db[2] += dG_dA * bh;
  db[1] += dG_dA * -bw;
  db[3] += dG_dA * bw;

  {
    // ew = max(a2,b2) - min(a0,b0); ties credit a.
    const bool a0_min = a[0] <= b[0];
    const bool a2_max = a[2] >= b[2];
    const bool a1_min = a[1] <= b[1];
    const bool a3_max = a[3] >= b[3];
    da[0] += dG_dE * (a0_min ? -eh : 0.0);
    db[0] += dG_dE * (a0_min ? 0.0 : -eh);
    da[2] += dG_dE * (a2_max ? eh : 0.0);
    db[2] += dG_dE * (a2_max ? 0.0 : eh);
    da[1] += dG_dE * (a1_min ? -ew : 0.0);
    db[1] += dG_dE * (a1_min ? 0.0 : -ew);
    da[3] += dG_dE * (a3_max ? ew : 0.0);
    db[3] += dG_dE * (a3_max ? 0.0 : ew);
  }

  if (ga) std::copy(da, da + 4, ga);
  if (gb) std::copy(db, db + 4, gb);
  return g;
}

}  // namespace qdetr
