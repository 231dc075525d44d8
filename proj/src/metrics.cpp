#include "mdf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mdf {

MatchResult match_detections(const std::vector<ScoredBox>& preds, const std::vector<GtBox>& gts,
                             double score_thresh, double iobb_thresh) {
  if (score_thresh < 0.0 || score_thresh > 1.0 || iobb_thresh < 0.0 || iobb_thresh > 1.0)
    throw std::invalid_argument("thresholds must lie in [0,1]");
  MatchResult res;
  res.pred_gt.assign(preds.size(), -2);

  std::vector<size_t> order;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].score >= score_thresh) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (preds[a].score != preds[b].score) return preds[a].score > preds[b].score;
    return preds[a].index < preds[b].index;
  });

  std::vector<bool> gt_used(gts.size(), false);
  for (size_t i : order) {
    const ScoredBox& p = preds[i];
    double best = -1.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g] || gts[g].cls != p.cls) continue;
      const double ov = box_iobb(p.box, gts[g].box);
      if (ov >= iobb_thresh && ov > best) {
        best = ov;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      gt_used[static_cast<size_t>(best_gt)] = true;
      res.pred_gt[i] = best_gt;
      res.per_class[static_cast<size_t>(p.cls)].tp += 1;
    } else {
      res.pred_gt[i] = -1;
      res.per_class[static_cast<size_t>(p.cls)].fp += 1;
    }
  }
  for (size_t g = 0; g < gts.size(); ++g)
    if (!gt_used[g]) res.per_class[static_cast<size_t>(gts[g].cls)].fn += 1;
  return res;
}

namespace {

struct FlatPred {
  double score;
  size_t image;
  int index;
  size_t pred;
};

// TP flags for class `cls` in global score order; greedy matching is
// prefix-consistent, so one pass yields the matching at every score cut.
std::vector<std::pair<double, bool>> tp_flags(const std::vector<ImageEval>& data, int cls,
                                              double iobb_thresh, int* n_gt_out) {
  int n_gt = 0;
  std::vector<FlatPred> flat;
  for (size_t im = 0; im < data.size(); ++im) {
    for (const auto& g : data[im].gts)
      if (g.cls == cls) ++n_gt;
    for (size_t pi = 0; pi < data[im].preds.size(); ++pi)
      if (data[im].preds[pi].cls == cls)
        flat.push_back({data[im].preds[pi].score, im, data[im].preds[pi].index, pi});
  }
  std::sort(flat.begin(), flat.end(), [](const FlatPred& a, const FlatPred& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image != b.image) return a.image < b.image;
    return a.index < b.index;
  });
  std::vector<std::vector<bool>> used(data.size());
  for (size_t im = 0; im < data.size(); ++im) used[im].assign(data[im].gts.size(), false);

  std::vector<std::pair<double, bool>> out;
  out.reserve(flat.size());
  for (const FlatPred& f : flat) {
    const auto& gts = data[f.image].gts;
    const Box& pb = data[f.image].preds[f.pred].box;
    double best = -1.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[f.image][g] || gts[g].cls != cls) continue;
      const double ov = box_iobb(pb, gts[g].box);
      if (ov >= iobb_thresh && ov > best) {
        best = ov;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) used[f.image][static_cast<size_t>(best_gt)] = true;
    out.emplace_back(f.score, best_gt >= 0);
  }
  if (n_gt_out) *n_gt_out = n_gt;
  return out;
}

double ap_from_flags(const std::vector<std::pair<double, bool>>& flags, int n_gt,
                     std::vector<PrPoint>* curve) {
  if (curve) curve->clear();
  if (n_gt == 0) return 0.0;
  std::vector<double> prec, rec;
  int tp = 0, seen = 0;
  for (const auto& [score, is_tp] : flags) {
    (void)score;
    ++seen;
    if (is_tp) ++tp;
    prec.push_back(static_cast<double>(tp) / seen);
    rec.push_back(static_cast<double>(tp) / n_gt);
    if (curve) curve->push_back({rec.back(), prec.back()});
  }
  double ap = 0.0, prev_rec = 0.0, env = 0.0;
  // precision envelope from the right, integrated over recall increments
  std::vector<double> envelope(prec.size());
  for (size_t i = prec.size(); i-- > 0;) {
    env = std::max(env, prec[i]);
    envelope[i] = env;
  }
  for (size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_rec) * envelope[i];
    prev_rec = rec[i];
  }
  return ap;
}

}  // namespace

double average_precision(const std::vector<ImageEval>& data, int cls, double iobb_thresh) {
  int n_gt = 0;
  auto flags = tp_flags(data, cls, iobb_thresh, &n_gt);
  return ap_from_flags(flags, n_gt, nullptr);
}

double recall_at(const std::vector<ImageEval>& data, int cls, double score_thresh,
                 double iobb_thresh) {
  int tp = 0, fn = 0;
  for (const auto& img : data) {
    MatchResult m = match_detections(img.preds, img.gts, score_thresh, iobb_thresh);
    tp += m.per_class[static_cast<size_t>(cls)].tp;
    fn += m.per_class[static_cast<size_t>(cls)].fn;
  }
  return tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
}

std::vector<SweepRow> sweep_iobb(const std::vector<ImageEval>& data, double score_thresh,
                                 const std::vector<double>& thresholds) {
  if (!std::is_sorted(thresholds.begin(), thresholds.end()))
    throw std::invalid_argument("sweep thresholds must be sorted ascending");
  std::vector<SweepRow> rows;
  for (double th : thresholds) {
    double sum_ap = 0.0, sum_ar = 0.0;
    int populated = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      int n_gt = 0;
      for (const auto& img : data)
        for (const auto& g : img.gts)
          if (g.cls == c) ++n_gt;
      if (n_gt == 0) continue;
      ++populated;
      sum_ap += average_precision(data, c, th);
      sum_ar += recall_at(data, c, score_thresh, th);
    }
    rows.push_back({th, populated ? sum_ap / populated : 0.0, populated ? sum_ar / populated : 0.0});
  }
  return rows;
}

EvalReport evaluate_detections(const std::vector<ImageEval>& data, double score_thresh,
                               double iobb_thresh, const std::vector<double>& sweep_thresholds) {
  EvalReport r;
  r.score_thresh = score_thresh;
  r.iobb_thresh = iobb_thresh;
  for (const auto& img : data) {
    MatchResult m = match_detections(img.preds, img.gts, score_thresh, iobb_thresh);
    for (int c = 0; c < kNumClasses; ++c) {
      r.per_class[static_cast<size_t>(c)].tp += m.per_class[static_cast<size_t>(c)].tp;
      r.per_class[static_cast<size_t>(c)].fp += m.per_class[static_cast<size_t>(c)].fp;
      r.per_class[static_cast<size_t>(c)].fn += m.per_class[static_cast<size_t>(c)].fn;
    }
    for (const auto& g : img.gts) r.per_class[static_cast<size_t>(g.cls)].gt += 1;
  }
  int populated = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    ClassReport& cr = r.per_class[static_cast<size_t>(c)];
    int n_gt = 0;
    auto flags = tp_flags(data, c, iobb_thresh, &n_gt);
    cr.ap = ap_from_flags(flags, n_gt, &r.pr_curves[static_cast<size_t>(c)]);
    cr.ar = cr.tp + cr.fn > 0 ? static_cast<double>(cr.tp) / (cr.tp + cr.fn) : 0.0;
    if (cr.gt > 0) {
      ++populated;
      r.mean_ap += cr.ap;
      r.mean_ar += cr.ar;
    }
  }
  if (populated) {
    r.mean_ap /= populated;
    r.mean_ar /= populated;
  }
  r.sweep = sweep_iobb(data, score_thresh, sweep_thresholds);
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["score_thresh"] = r.score_thresh;
  j["iobb_thresh"] = r.iobb_thresh;
  nlohmann::json classes = nlohmann::json::object();
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassReport& cr = r.per_class[static_cast<size_t>(c)];
    classes[kClassNames[static_cast<size_t>(c)]] = {
        {"tp", cr.tp}, {"fp", cr.fp}, {"fn", cr.fn}, {"gt", cr.gt}, {"ap", cr.ap}, {"ar", cr.ar}};
  }
  j["classes"] = std::move(classes);
  j["mean_ap"] = r.mean_ap;
  j["mean_ar"] = r.mean_ar;
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& row : r.sweep)
    sweep.push_back({{"iobb_thresh", row.threshold}, {"mean_ap", row.mean_ap}, {"mean_ar", row.mean_ar}});
  j["iobb_sweep"] = std::move(sweep);
  return j;
}

void write_report_files(const EvalReport& r, const std::string& out_dir, const std::string& stem,
                        const nlohmann::json& config_echo) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  nlohmann::json j = report_to_json(r);
  j["config"] = config_echo;
  std::ofstream(fs::path(out_dir) / (stem + ".json")) << j.dump(2) << "\n";

  std::ofstream csv(fs::path(out_dir) / (stem + ".csv"));
  csv << "class,tp,fp,fn,gt,ap,ar\n";
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassReport& cr = r.per_class[static_cast<size_t>(c)];
    csv << "\"" << kClassNames[static_cast<size_t>(c)] << "\"," << cr.tp << "," << cr.fp << ","
        << cr.fn << "," << cr.gt << "," << cr.ap << "," << cr.ar << "\n";
  }
  csv << "\"mean\",,,,," << r.mean_ap << "," << r.mean_ar << "\n";

  std::ofstream sweep_csv(fs::path(out_dir) / (stem + "_iobb_sweep.csv"));
  sweep_csv << "iobb_thresh,mean_ap,mean_ar\n";
  for (const auto& row : r.sweep)
    sweep_csv << row.threshold << "," << row.mean_ap << "," << row.mean_ar << "\n";

  std::ofstream pr_csv(fs::path(out_dir) / (stem + "_pr_curves.csv"));
  pr_csv << "class,recall,precision\n";
  for (int c = 0; c < kNumClasses; ++c)
    for (const auto& p : r.pr_curves[static_cast<size_t>(c)])
      pr_csv << "\"" << kClassNames[static_cast<size_t>(c)] << "\"," << p.recall << ","
             << p.precision << "\n";
}

}  // namespace mdf
