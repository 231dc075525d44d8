#pragma once

#include <vector>

#include "mdf/tensor.hpp"

namespace mdf {

// Axis-aligned box, top-left corner plus size, in input-image pixel
// coordinates treated as continuous rectangles.
struct Box {
  double x = 0.0, y = 0.0, w = 0.0, h = 0.0;
  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
};

struct GtBox {
  int cls = 0;  // 0..kNumClasses-1
  Box box;
};

double intersection_area(const Box& a, const Box& b);
double box_iou(const Box& a, const Box& b);

// Intersection over the *predicted* box area; asymmetric by definition.
double box_iobb(const Box& pred, const Box& gt);

Box clip_box(const Box& b, double img_w, double img_h);

// Center-offset + log-size deltas relative to a reference box.
struct BoxDelta {
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

BoxDelta encode_box(const Box& target, const Box& reference);
// decode(encode(t, r), r) == t when t lies inside the image; output clipped.
Box decode_box(const Box& reference, const BoxDelta& d, double img_w, double img_h);

}  // namespace mdf
