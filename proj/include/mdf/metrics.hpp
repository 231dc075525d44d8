#pragma once

#include <array>
#include <string>
#include <vector>

#include "mdf/boxes.hpp"
#include "mdf/classes.hpp"

#include <nlohmann/json_fwd.hpp>

namespace mdf {

struct ScoredBox {
  int cls = 0;
  double score = 0.0;
  Box box;
  int index = 0;  // stable identity for tie-breaks, assigned at emission
};

struct ImageEval {
  std::string image_id;
  std::vector<ScoredBox> preds;
  std::vector<GtBox> gts;
};

struct ClassCounts {
  int tp = 0, fp = 0, fn = 0;
};

// One prediction set against one ground-truth set. Predictions scoring below
// score_thresh are dropped; the rest match greedily in descending score
// (ties: lowest index) to the unmatched same-class ground truth with the
// highest IoBB >= iobb_thresh (ties: lowest gt index). No true-negative count
// exists in detection.
struct MatchResult {
  std::array<ClassCounts, kNumClasses> per_class;
  std::vector<int> pred_gt;  // per input pred: -2 dropped by score, -1 unmatched (FP), else gt index
};
MatchResult match_detections(const std::vector<ScoredBox>& preds, const std::vector<GtBox>& gts,
                             double score_thresh, double iobb_thresh);

// Area under the precision-recall curve for one class, sweeping the score
// threshold over every prediction score, all-point interpolation (precision
// envelope). 0 when the class has no ground truth.
double average_precision(const std::vector<ImageEval>& data, int cls, double iobb_thresh);

// Recall at a fixed operating point.
double recall_at(const std::vector<ImageEval>& data, int cls, double score_thresh,
                 double iobb_thresh);

struct PrPoint {
  double recall = 0.0, precision = 0.0;
};

struct ClassReport {
  int tp = 0, fp = 0, fn = 0, gt = 0;
  double ap = 0.0, ar = 0.0;
};

struct SweepRow {
  double threshold = 0.0, mean_ap = 0.0, mean_ar = 0.0;
};

struct EvalReport {
  std::array<ClassReport, kNumClasses> per_class;
  double mean_ap = 0.0;  // mean over classes with ground truth
  double mean_ar = 0.0;
  std::array<std::vector<PrPoint>, kNumClasses> pr_curves;
  std::vector<SweepRow> sweep;
  double score_thresh = 0.0, iobb_thresh = 0.0;
};

EvalReport evaluate_detections(const std::vector<ImageEval>& data, double score_thresh,
                               double iobb_thresh, const std::vector<double>& sweep_thresholds);

// (threshold, mAP, mAR) rows; thresholds must be sorted ascending.
std::vector<SweepRow> sweep_iobb(const std::vector<ImageEval>& data, double score_thresh,
                                 const std::vector<double>& thresholds);

nlohmann::json report_to_json(const EvalReport& r);
void write_report_files(const EvalReport& r, const std::string& out_dir,
                        const std::string& stem, const nlohmann::json& config_echo);

}  // namespace mdf
