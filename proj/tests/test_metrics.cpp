#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "mdf/metrics.hpp"
#include "mdf/rng.hpp"

using namespace mdf;

namespace {

Box random_box(Rng& rng, double img = 64.0) {
  const double w = rng.uniform(4.0, img / 2);
  const double h = rng.uniform(4.0, img / 2);
  return Box{rng.uniform(0.0, img - w), rng.uniform(0.0, img - h), w, h};
}

ImageEval random_instance(Rng& rng, int n_pred, int n_gt) {
  ImageEval e;
  e.image_id = "img";
  for (int g = 0; g < n_gt; ++g)
    e.gts.push_back({static_cast<int>(rng.next_u64() % kNumClasses), random_box(rng)});
  for (int p = 0; p < n_pred; ++p) {
    ScoredBox b;
    b.cls = static_cast<int>(rng.next_u64() % kNumClasses);
    b.score = rng.uniform(0.0, 1.0);
    // bias half the predictions toward a ground-truth box so matches exist
    if (!e.gts.empty() && rng.coin()) {
      const Box& gt = e.gts[rng.next_u64() % e.gts.size()].box;
      b.box = Box{gt.x + rng.uniform(-3.0, 3.0), gt.y + rng.uniform(-3.0, 3.0),
                  std::max(2.0, gt.w + rng.uniform(-4.0, 4.0)),
                  std::max(2.0, gt.h + rng.uniform(-4.0, 4.0))};
    } else {
      b.box = random_box(rng);
    }
    b.index = p;
    e.preds.push_back(b);
  }
  return e;
}

// independent reimplementation of the greedy protocol, unoptimized
MatchResult match_oracle(const std::vector<ScoredBox>& preds, const std::vector<GtBox>& gts,
                         double score_thresh, double iobb_thresh) {
  MatchResult res;
  res.pred_gt.assign(preds.size(), -2);
  std::vector<bool> used(gts.size(), false);
  std::vector<size_t> remaining;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i].score >= score_thresh) remaining.push_back(i);
  while (!remaining.empty()) {
    // select the highest-score (lowest index on ties) prediction still unprocessed
    size_t best_pos = 0;
    for (size_t k = 1; k < remaining.size(); ++k) {
      const ScoredBox& a = preds[remaining[k]];
      const ScoredBox& b = preds[remaining[best_pos]];
      if (a.score > b.score || (a.score == b.score && a.index < b.index)) best_pos = k;
    }
    const size_t i = remaining[best_pos];
    remaining.erase(remaining.begin() + static_cast<long>(best_pos));
    double best = -1.0;
    int best_gt = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].cls != preds[i].cls) continue;
      const double ov = box_iobb(preds[i].box, gts[g].box);
      if (ov >= iobb_thresh && ov > best) {
        best = ov;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      used[static_cast<size_t>(best_gt)] = true;
      res.pred_gt[i] = best_gt;
      res.per_class[static_cast<size_t>(preds[i].cls)].tp += 1;
    } else {
      res.pred_gt[i] = -1;
      res.per_class[static_cast<size_t>(preds[i].cls)].fp += 1;
    }
  }
  for (size_t g = 0; g < gts.size(); ++g)
    if (!used[g]) res.per_class[static_cast<size_t>(gts[g].cls)].fn += 1;
  return res;
}

// maximum-TP assignment via augmenting paths; upper-bounds any greedy matcher
int max_tp_oracle(const std::vector<ScoredBox>& preds, const std::vector<GtBox>& gts,
                  double score_thresh, double iobb_thresh) {
  std::vector<std::vector<int>> elig(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].score < score_thresh) continue;
    for (size_t g = 0; g < gts.size(); ++g)
      if (gts[g].cls == preds[i].cls && box_iobb(preds[i].box, gts[g].box) >= iobb_thresh)
        elig[i].push_back(static_cast<int>(g));
  }
  std::vector<int> gt_owner(gts.size(), -1);
  std::function<bool(size_t, std::vector<bool>&)> augment = [&](size_t p,
                                                                std::vector<bool>& seen) {
    for (int g : elig[p]) {
      if (seen[static_cast<size_t>(g)]) continue;
      seen[static_cast<size_t>(g)] = true;
      if (gt_owner[static_cast<size_t>(g)] < 0 ||
          augment(static_cast<size_t>(gt_owner[static_cast<size_t>(g)]), seen)) {
        gt_owner[static_cast<size_t>(g)] = static_cast<int>(p);
        return true;
      }
    }
    return false;
  };
  int matched = 0;
  for (size_t p = 0; p < preds.size(); ++p) {
    std::vector<bool> seen(gts.size(), false);
    if (augment(p, seen)) ++matched;
  }
  return matched;
}

// enumerate every score cut and integrate the enveloped PR curve exactly
double ap_oracle(const std::vector<ImageEval>& data, int cls, double iobb_thresh) {
  int n_gt = 0;
  std::vector<double> scores;
  for (const auto& img : data) {
    for (const auto& g : img.gts)
      if (g.cls == cls) ++n_gt;
    for (const auto& p : img.preds)
      if (p.cls == cls) scores.push_back(p.score);
  }
  if (n_gt == 0 || scores.empty()) return 0.0;
  std::sort(scores.begin(), scores.end(), std::greater<double>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());
  std::vector<double> precs, recs;
  for (double cut : scores) {
    int tp = 0, fp = 0;
    for (const auto& img : data) {
      std::vector<ScoredBox> preds;
      for (const auto& p : img.preds)
        if (p.cls == cls) preds.push_back(p);
      MatchResult m = match_oracle(preds, img.gts, cut, iobb_thresh);
      // count only class `cls` (ground truths of other classes are ineligible anyway)
      tp += m.per_class[static_cast<size_t>(cls)].tp;
      fp += m.per_class[static_cast<size_t>(cls)].fp;
    }
    precs.push_back(tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0);
    recs.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0.0, prev = 0.0;
  for (size_t i = 0; i < precs.size(); ++i) {
    double env = 0.0;
    for (size_t j = i; j < precs.size(); ++j) env = std::max(env, precs[j]);
    ap += (recs[i] - prev) * env;
    prev = recs[i];
  }
  return ap;
}

}  // namespace

TEST_CASE("iobb values and asymmetry") {
  Box a{0, 0, 10, 10};
  CHECK(box_iobb(a, a) == doctest::Approx(1.0));
  CHECK(box_iobb(a, Box{20, 20, 5, 5}) == 0.0);
  CHECK(box_iobb(Box{0, 0, 10, 10}, Box{0, 0, 10, 5}) == doctest::Approx(0.5));
  // a prediction inside a larger ground truth scores 1; roles swapped it does not
  Box small{2, 2, 4, 4}, large{0, 0, 10, 10};
  CHECK(box_iobb(small, large) == doctest::Approx(1.0));
  CHECK(box_iobb(large, small) < 1.0);
  CHECK_THROWS(box_iobb(Box{0, 0, 0, 10}, a));
}

TEST_CASE("match_detections single-instance contracts") {
  std::vector<GtBox> gts = {{2, Box{10, 10, 20, 20}}};
  std::vector<ScoredBox> hit = {{2, 0.9, Box{10, 10, 20, 20}, 0}};
  MatchResult m = match_detections(hit, gts, 0.05, 0.5);
  CHECK(m.per_class[2].tp == 1);
  CHECK(m.per_class[2].fp == 0);
  CHECK(m.per_class[2].fn == 0);

  std::vector<ScoredBox> wrong_class = {{1, 0.9, Box{10, 10, 20, 20}, 0}};
  m = match_detections(wrong_class, gts, 0.05, 0.5);
  CHECK(m.per_class[1].fp == 1);
  CHECK(m.per_class[2].fn == 1);

  // below the score threshold -> dropped, not an FP
  std::vector<ScoredBox> weak = {{2, 0.04, Box{10, 10, 20, 20}, 0}};
  m = match_detections(weak, gts, 0.05, 0.5);
  CHECK(m.per_class[2].fp == 0);
  CHECK(m.per_class[2].fn == 1);
  CHECK(m.pred_gt[0] == -2);
}

TEST_CASE("match_detections equals the greedy oracle and is bounded by max matching") {
  Rng rng(101);
  for (int trial = 0; trial < 120; ++trial) {
    ImageEval inst = random_instance(rng, 20, 10);
    const double iobb = rng.uniform(0.2, 0.8);
    MatchResult fast = match_detections(inst.preds, inst.gts, 0.05, iobb);
    MatchResult slow = match_oracle(inst.preds, inst.gts, 0.05, iobb);
    CHECK(fast.pred_gt == slow.pred_gt);
    int tp = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      CHECK(fast.per_class[static_cast<size_t>(c)].tp == slow.per_class[static_cast<size_t>(c)].tp);
      CHECK(fast.per_class[static_cast<size_t>(c)].fp == slow.per_class[static_cast<size_t>(c)].fp);
      CHECK(fast.per_class[static_cast<size_t>(c)].fn == slow.per_class[static_cast<size_t>(c)].fn);
      tp += fast.per_class[static_cast<size_t>(c)].tp;
    }
    CHECK(tp <= max_tp_oracle(inst.preds, inst.gts, 0.05, iobb));
    // per-class TP+FN equals the ground-truth count
    for (int c = 0; c < kNumClasses; ++c) {
      int n_gt = 0;
      for (const auto& g : inst.gts)
        if (g.cls == c) ++n_gt;
      CHECK(fast.per_class[static_cast<size_t>(c)].tp + fast.per_class[static_cast<size_t>(c)].fn ==
            n_gt);
    }
  }
}

TEST_CASE("matching is invariant to input order given the index tie-break") {
  Rng rng(102);
  ImageEval inst = random_instance(rng, 16, 8);
  // force score ties
  for (auto& p : inst.preds) p.score = std::round(p.score * 4.0) / 4.0;
  MatchResult before = match_detections(inst.preds, inst.gts, 0.05, 0.4);
  auto shuffled = inst.preds;
  for (size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rng.next_u64() % i]);
  MatchResult after = match_detections(shuffled, inst.gts, 0.05, 0.4);
  for (int c = 0; c < kNumClasses; ++c) {
    CHECK(before.per_class[static_cast<size_t>(c)].tp == after.per_class[static_cast<size_t>(c)].tp);
    CHECK(before.per_class[static_cast<size_t>(c)].fp == after.per_class[static_cast<size_t>(c)].fp);
  }
  // same prediction (by index) matched to the same ground truth
  for (size_t i = 0; i < shuffled.size(); ++i) {
    const int orig_index = shuffled[i].index;
    CHECK(after.pred_gt[i] == before.pred_gt[static_cast<size_t>(orig_index)]);
  }
}

TEST_CASE("average_precision trivial cases") {
  // every ground truth found by one exact prediction -> AP 1
  std::vector<ImageEval> data(1);
  data[0].gts = {{0, Box{5, 5, 10, 10}}, {0, Box{30, 30, 12, 12}}};
  data[0].preds = {{0, 0.9, Box{5, 5, 10, 10}, 0}, {0, 0.8, Box{30, 30, 12, 12}, 1}};
  CHECK(average_precision(data, 0, 0.5) == doctest::Approx(1.0));
  // no predictions, nonzero ground truth -> 0
  data[0].preds.clear();
  CHECK(average_precision(data, 0, 0.5) == 0.0);
  // no ground truth -> 0 by convention
  data[0].gts.clear();
  data[0].preds = {{0, 0.9, Box{5, 5, 10, 10}, 0}};
  CHECK(average_precision(data, 0, 0.5) == 0.0);
}

TEST_CASE("average_precision equals the exhaustive threshold-enumeration oracle") {
  Rng rng(103);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<ImageEval> data;
    const int n_img = 1 + static_cast<int>(rng.next_u64() % 3);
    for (int i = 0; i < n_img; ++i) data.push_back(random_instance(rng, 12, 6));
    const double iobb = rng.uniform(0.2, 0.8);
    for (int c = 0; c < kNumClasses; ++c)
      CHECK(std::fabs(average_precision(data, c, iobb) - ap_oracle(data, c, iobb)) < 1e-9);
  }
}

TEST_CASE("sweep_iobb: singleton reproduces the report, perfect detector stays at 1") {
  Rng rng(104);
  std::vector<ImageEval> data = {random_instance(rng, 10, 5)};
  auto rows = sweep_iobb(data, 0.05, {0.5});
  REQUIRE(rows.size() == 1);
  EvalReport rep = evaluate_detections(data, 0.05, 0.5, {0.5});
  CHECK(rows[0].mean_ap == doctest::Approx(rep.mean_ap));
  CHECK(rows[0].mean_ar == doctest::Approx(rep.mean_ar));

  std::vector<ImageEval> perfect(1);
  perfect[0].gts = {{1, Box{5, 5, 10, 10}}, {3, Box{30, 30, 12, 12}}};
  perfect[0].preds = {{1, 0.9, Box{5, 5, 10, 10}, 0}, {3, 0.95, Box{30, 30, 12, 12}, 1}};
  for (const auto& row : sweep_iobb(perfect, 0.05, {0.1, 0.3, 0.5, 0.7, 0.9})) {
    CHECK(row.mean_ap == doctest::Approx(1.0));
    CHECK(row.mean_ar == doctest::Approx(1.0));
  }
}

TEST_CASE("mAP is non-increasing as the IoBB threshold tightens") {
  Rng rng(105);
  for (int trial = 0; trial < 25; ++trial) {
    std::vector<ImageEval> data;
    for (int i = 0; i < 2; ++i) data.push_back(random_instance(rng, 15, 7));
    auto rows = sweep_iobb(data, 0.05, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
    for (size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].mean_ap <= rows[i - 1].mean_ap + 1e-12);
  }
}

TEST_CASE("evaluate_detections aggregates counts and reports no TN") {
  Rng rng(106);
  std::vector<ImageEval> data;
  for (int i = 0; i < 3; ++i) data.push_back(random_instance(rng, 10, 5));
  EvalReport rep = evaluate_detections(data, 0.05, 0.5, {0.3, 0.5});
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassReport& cr = rep.per_class[static_cast<size_t>(c)];
    CHECK(cr.tp + cr.fn == cr.gt);
    CHECK(cr.ap >= 0.0);
    CHECK(cr.ap <= 1.0);
    CHECK(cr.ar >= 0.0);
    CHECK(cr.ar <= 1.0);
  }
  CHECK(rep.sweep.size() == 2);
}
