#pragma once

#include <optional>
#include <vector>

#include "mdf/boxes.hpp"
#include "mdf/config.hpp"
#include "mdf/nn.hpp"

namespace mdf {

// Candidate object box with objectness confidence.
struct Proposal {
  Box box;
  double score = 0.0;
  int index = 0;  // source anchor / insertion index, used for deterministic tie-breaks
};

// Anchor boxes laid out to match the RPN head tensors: flat index
// a*(H'*W') + y*W' + x for anchor a of cell (y,x).
struct AnchorGrid {
  int feat_h = 0, feat_w = 0, per_cell = 0;
  std::vector<Box> boxes;

  static AnchorGrid build(int feat_h, int feat_w, double stride_px, const AnchorConfig& cfg);
  int count() const { return static_cast<int>(boxes.size()); }
};

// Greedy score-descending suppression; ties resolved by lowest index.
std::vector<Proposal> nms(const std::vector<Proposal>& boxes, double overlap_thresh);

struct RpnOutputs {
  Var obj_logits;  // [1,K,H',W']
  Var deltas;      // [1,4K,H',W']
};

class RpnBlock {
 public:
  RpnBlock() = default;
  RpnBlock(ParamStore& ps, const std::string& name, int channels, int anchors_per_cell, Rng& rng);
  RpnOutputs forward(Tape& t, Var fused) const;

 private:
  Conv2dLayer shared_, obj_, delta_;
};

// Decodes RPN head outputs into scored, clipped, NMS-filtered proposals.
std::vector<Proposal> generate_proposals(const Tensor& obj_logits, const Tensor& deltas,
                                         const AnchorGrid& anchors, double img_w, double img_h,
                                         const RpnConfig& cfg);

// Per-proposal training target. label: -1 ignore, 0 background, 1+c for class c.
struct Assignment {
  int label = 0;
  int gt_index = -1;
  BoxDelta delta;
};

// IoU >= fg_thresh -> positive (closed bound), IoU < bg_thresh -> background,
// in between -> ignored. Ties on IoU resolve to the lowest ground-truth index.
std::vector<Assignment> assign_targets(const std::vector<Box>& proposals,
                                       const std::vector<GtBox>& gts, double fg_thresh,
                                       double bg_thresh);

// Footprint of an image-space box on the feature map, in whole cells,
// clamped to at least one cell.
struct MapRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
MapRect roi_footprint(const Box& b, int map_w, int map_h, double scale);

// Binary grid of the ground-truth box footprint inside a RoI; the mask branch
// regresses box-shaped masks since annotations carry boxes only.
Tensor rasterize_mask_target(const Box& roi, const Box& gt, int mask_size);

// Final per-RoI prediction in plain values.
struct DetectionOutput {
  std::vector<double> class_scores;   // background + kNumClasses, sums to 1
  std::vector<BoxDelta> box_deltas;   // one per class slot (background slot unused)
  Tensor mask_logits;                 // [kNumClasses, mask, mask]
};

struct HeadVars {
  Var cls_logits;   // [1, 1+kNumClasses]
  Var box_deltas;   // [1, 4*(1+kNumClasses)]
  Var mask_logits;  // [kNumClasses, mask, mask]
};

class RoiHead {
 public:
  RoiHead() = default;
  RoiHead(ParamStore& ps, const std::string& name, int roi_channels, int roi_size,
          int clinical_width /*0 disables the 1-D fusion input*/, int hidden, int mask_size,
          Rng& rng);

  // roi: [C,roi,roi]; z: clinical latent vector, required iff the head was
  // built with clinical_width > 0.
  HeadVars forward(Tape& t, Var roi, std::optional<Var> z) const;
  DetectionOutput predict(const Tensor& roi, const std::vector<double>* z) const;

  int input_width() const { return input_width_; }
  bool wants_clinical() const { return clinical_width_ > 0; }

 private:
  int roi_channels_ = 0, roi_size_ = 0, clinical_width_ = 0, input_width_ = 0, mask_size_ = 0;
  LinearLayer fc_, cls_, box_;
  Deconv2dLayer mask_;
};

}  // namespace mdf
