#include "mdf/detection.hpp"

#include <algorithm>
#include <cmath>

#include "mdf/classes.hpp"

namespace mdf {

AnchorGrid AnchorGrid::build(int feat_h, int feat_w, double stride_px, const AnchorConfig& cfg) {
  if (feat_h < 1 || feat_w < 1) throw DimensionError("anchor grid needs positive feature dims");
  AnchorGrid g;
  g.feat_h = feat_h;
  g.feat_w = feat_w;
  g.per_cell = cfg.per_cell();
  g.boxes.reserve(static_cast<size_t>(feat_h) * feat_w * g.per_cell);
  for (double scale : cfg.scales)
    for (double ratio : cfg.ratios) {
      const double w = scale / std::sqrt(ratio);
      const double h = scale * std::sqrt(ratio);
      for (int y = 0; y < feat_h; ++y)
        for (int x = 0; x < feat_w; ++x) {
          const double cx = (x + 0.5) * stride_px;
          const double cy = (y + 0.5) * stride_px;
          g.boxes.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, w, h});
        }
    }
  return g;
}

std::vector<Proposal> nms(const std::vector<Proposal>& boxes, double overlap_thresh) {
  if (overlap_thresh <= 0.0 || overlap_thresh >= 1.0)
    throw std::invalid_argument("nms overlap threshold must lie in (0,1)");
  std::vector<size_t> order(boxes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (boxes[a].score != boxes[b].score) return boxes[a].score > boxes[b].score;
    return boxes[a].index < boxes[b].index;
  });
  std::vector<Proposal> kept;
  for (size_t i : order) {
    bool suppressed = false;
    for (const Proposal& k : kept)
      if (box_iou(boxes[i].box, k.box) > overlap_thresh) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(boxes[i]);
  }
  return kept;
}

RpnBlock::RpnBlock(ParamStore& ps, const std::string& name, int channels, int anchors_per_cell,
                   Rng& rng) {
  shared_ = Conv2dLayer::create(ps, name + ".shared", channels, channels, 3, 1, 1, rng);
  obj_ = Conv2dLayer::create(ps, name + ".obj", channels, anchors_per_cell, 1, 1, 0, rng);
  delta_ = Conv2dLayer::create(ps, name + ".delta", channels, 4 * anchors_per_cell, 1, 1, 0, rng);
}

RpnOutputs RpnBlock::forward(Tape& t, Var fused) const {
  Var x = t.relu(shared_.forward(t, fused));
  return RpnOutputs{obj_.forward(t, x), delta_.forward(t, x)};
}

std::vector<Proposal> generate_proposals(const Tensor& obj_logits, const Tensor& deltas,
                                         const AnchorGrid& anchors, double img_w, double img_h,
                                         const RpnConfig& cfg) {
  if (anchors.count() == 0) throw DimensionError("empty anchor grid");
  const int K = anchors.per_cell, H = anchors.feat_h, W = anchors.feat_w;
  if (obj_logits.numel() != static_cast<int64_t>(K) * H * W)
    throw DimensionError("objectness tensor does not match anchor grid");
  const int64_t hw = static_cast<int64_t>(H) * W;

  std::vector<Proposal> scored(static_cast<size_t>(anchors.count()));
  for (int i = 0; i < anchors.count(); ++i) {
    const double z = obj_logits[i];
    scored[static_cast<size_t>(i)] =
        Proposal{anchors.boxes[static_cast<size_t>(i)],
                 z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)), i};
  }
  std::sort(scored.begin(), scored.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });
  if (static_cast<int>(scored.size()) > cfg.pre_nms) scored.resize(static_cast<size_t>(cfg.pre_nms));

  std::vector<Proposal> decoded;
  decoded.reserve(scored.size());
  for (const Proposal& p : scored) {
    const int a = p.index / static_cast<int>(hw);
    const int64_t cell = p.index % hw;
    BoxDelta d;
    d.dx = deltas[(static_cast<int64_t>(4 * a) + 0) * hw + cell];
    d.dy = deltas[(static_cast<int64_t>(4 * a) + 1) * hw + cell];
    d.dw = deltas[(static_cast<int64_t>(4 * a) + 2) * hw + cell];
    d.dh = deltas[(static_cast<int64_t>(4 * a) + 3) * hw + cell];
    Box b = decode_box(p.box, d, img_w, img_h);
    if (b.w < 1e-6 || b.h < 1e-6) continue;  // collapsed outside the image
    decoded.push_back(Proposal{b, p.score, p.index});
  }
  std::vector<Proposal> kept = nms(decoded, cfg.nms_thresh);
  if (static_cast<int>(kept.size()) > cfg.post_nms) kept.resize(static_cast<size_t>(cfg.post_nms));
  return kept;
}

std::vector<Assignment> assign_targets(const std::vector<Box>& proposals,
                                       const std::vector<GtBox>& gts, double fg_thresh,
                                       double bg_thresh) {
  if (fg_thresh < bg_thresh) throw std::invalid_argument("fg_thresh must be >= bg_thresh");
  std::vector<Assignment> out(proposals.size());
  for (size_t i = 0; i < proposals.size(); ++i) {
    double best = -1.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      const double iou = box_iou(proposals[i], gts[g].box);
      if (iou > best) {
        best = iou;
        best_gt = static_cast<int>(g);
      }
    }
    Assignment& a = out[i];
    if (best_gt >= 0 && best >= fg_thresh) {
      a.label = gts[static_cast<size_t>(best_gt)].cls + 1;
      a.gt_index = best_gt;
      a.delta = encode_box(gts[static_cast<size_t>(best_gt)].box, proposals[i]);
    } else if (best < bg_thresh) {
      a.label = 0;
    } else {
      a.label = -1;
    }
  }
  return out;
}

MapRect roi_footprint(const Box& b, int map_w, int map_h, double scale) {
  if (b.w <= 0.0 || b.h <= 0.0) {
    // degenerate proposal: clamp to the single nearest cell
    MapRect r;
    r.x0 = std::clamp(static_cast<int>(std::floor(b.x * scale)), 0, map_w - 1);
    r.y0 = std::clamp(static_cast<int>(std::floor(b.y * scale)), 0, map_h - 1);
    r.x1 = r.x0 + 1;
    r.y1 = r.y0 + 1;
    return r;
  }
  MapRect r;
  r.x0 = std::clamp(static_cast<int>(std::floor(b.x * scale)), 0, map_w - 1);
  r.y0 = std::clamp(static_cast<int>(std::floor(b.y * scale)), 0, map_h - 1);
  r.x1 = std::clamp(static_cast<int>(std::ceil(b.x2() * scale)), r.x0 + 1, map_w);
  r.y1 = std::clamp(static_cast<int>(std::ceil(b.y2() * scale)), r.y0 + 1, map_h);
  return r;
}

Tensor rasterize_mask_target(const Box& roi, const Box& gt, int mask_size) {
  Tensor m({mask_size, mask_size});
  if (roi.w <= 0.0 || roi.h <= 0.0) return m;
  for (int j = 0; j < mask_size; ++j) {
    const double cy = roi.y + (j + 0.5) * roi.h / mask_size;
    for (int i = 0; i < mask_size; ++i) {
      const double cx = roi.x + (i + 0.5) * roi.w / mask_size;
      if (cx >= gt.x && cx < gt.x2() && cy >= gt.y && cy < gt.y2())
        m[static_cast<int64_t>(j) * mask_size + i] = 1.0;
    }
  }
  return m;
}

RoiHead::RoiHead(ParamStore& ps, const std::string& name, int roi_channels, int roi_size,
                 int clinical_width, int hidden, int mask_size, Rng& rng)
    : roi_channels_(roi_channels),
      roi_size_(roi_size),
      clinical_width_(clinical_width),
      input_width_(roi_channels * roi_size * roi_size + clinical_width),
      mask_size_(mask_size) {
  if (mask_size != 2 * roi_size)
    throw std::invalid_argument("mask branch upsamples the RoI by 2; mask_size must be 2*roi_size");
  fc_ = LinearLayer::create(ps, name + ".fc", input_width_, hidden, rng);
  cls_ = LinearLayer::create(ps, name + ".cls", hidden, 1 + kNumClasses, rng);
  box_ = LinearLayer::create(ps, name + ".box", hidden, 4 * (1 + kNumClasses), rng);
  mask_ = Deconv2dLayer::create(ps, name + ".mask", roi_channels, kNumClasses, 2, 2, 0, rng);
}

HeadVars RoiHead::forward(Tape& t, Var roi, std::optional<Var> z) const {
  const Tensor& rv = t.value(roi);
  if (rv.ndim() != 3 || rv.shape[0] != roi_channels_ || rv.shape[1] != roi_size_ ||
      rv.shape[2] != roi_size_)
    throw DimensionError("RoI tensor has shape " + shape_str(rv.shape) + ", expected [" +
                         std::to_string(roi_channels_) + "," + std::to_string(roi_size_) + "," +
                         std::to_string(roi_size_) + "]");
  Var flat = t.flatten(roi);
  Var in;
  if (clinical_width_ > 0) {
    if (!z) throw std::invalid_argument("this head fuses the clinical vector; z is required");
    if (t.value(*z).numel() != clinical_width_)
      throw DimensionError("clinical vector length " + std::to_string(t.value(*z).numel()) +
                           " does not match head width " + std::to_string(clinical_width_));
    in = t.concat({flat, *z}, 0);
  } else {
    if (z) throw std::invalid_argument("this head takes no clinical vector");
    in = flat;
  }
  Var hidden = t.relu(fc_.forward(t, t.reshape(in, {1, input_width_})));
  HeadVars out;
  out.cls_logits = cls_.forward(t, hidden);
  out.box_deltas = box_.forward(t, hidden);
  Var m = mask_.forward(t, t.reshape(roi, {1, roi_channels_, roi_size_, roi_size_}));
  out.mask_logits = t.reshape(m, {kNumClasses, mask_size_, mask_size_});
  return out;
}

DetectionOutput RoiHead::predict(const Tensor& roi, const std::vector<double>* z) const {
  Tape t;
  Var rv = t.input(roi);
  std::optional<Var> zv;
  if (clinical_width_ > 0) {
    if (!z) throw std::invalid_argument("this head fuses the clinical vector; z is required");
    zv = t.input(Tensor::from({static_cast<int>(z->size())}, *z));
  }
  HeadVars h = forward(t, rv, zv);
  Var probs = t.softmax_rows(h.cls_logits);
  DetectionOutput out;
  out.class_scores = t.value(probs).data;
  const Tensor& bd = t.value(h.box_deltas);
  out.box_deltas.resize(1 + kNumClasses);
  for (int c = 0; c < 1 + kNumClasses; ++c)
    out.box_deltas[static_cast<size_t>(c)] =
        BoxDelta{bd[4 * c + 0], bd[4 * c + 1], bd[4 * c + 2], bd[4 * c + 3]};
  out.mask_logits = t.value(h.mask_logits);
  return out;
}

}  // namespace mdf
