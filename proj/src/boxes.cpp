#include "mdf/boxes.hpp"

#include <algorithm>
#include <cmath>

#include "mdf/classes.hpp"

namespace mdf {

int class_id_from_name(const std::string& name) {
  for (int i = 0; i < kNumClasses; ++i)
    if (name == kClassNames[static_cast<size_t>(i)]) return i;
  return -1;
}

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x, b.x);
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double box_iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double box_iobb(const Box& pred, const Box& gt) {
  const double pa = pred.area();
  if (pa <= 0.0) throw DimensionError("iobb: predicted box has non-positive area");
  return intersection_area(pred, gt) / pa;
}

Box clip_box(const Box& b, double img_w, double img_h) {
  const double x0 = std::clamp(b.x, 0.0, img_w);
  const double y0 = std::clamp(b.y, 0.0, img_h);
  const double x1 = std::clamp(b.x2(), 0.0, img_w);
  const double y1 = std::clamp(b.y2(), 0.0, img_h);
  return Box{x0, y0, x1 - x0, y1 - y0};
}

BoxDelta encode_box(const Box& target, const Box& reference) {
  if (reference.w <= 0.0 || reference.h <= 0.0 || target.w <= 0.0 || target.h <= 0.0)
    throw DimensionError("encode_box: boxes must have positive size");
  BoxDelta d;
  d.dx = (target.cx() - reference.cx()) / reference.w;
  d.dy = (target.cy() - reference.cy()) / reference.h;
  d.dw = std::log(target.w / reference.w);
  d.dh = std::log(target.h / reference.h);
  return d;
}

Box decode_box(const Box& reference, const BoxDelta& d, double img_w, double img_h) {
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) || !std::isfinite(d.dh))
    throw NumericError("decode_box: non-finite deltas");
  const double cx = reference.cx() + d.dx * reference.w;
  const double cy = reference.cy() + d.dy * reference.h;
  const double w = reference.w * std::exp(d.dw);
  const double h = reference.h * std::exp(d.dh);
  return clip_box(Box{cx - 0.5 * w, cy - 0.5 * h, w, h}, img_w, img_h);
}

}  // namespace mdf
