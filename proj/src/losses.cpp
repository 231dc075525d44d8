#include "mdf/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "mdf/classes.hpp"

namespace mdf {

double smooth_l1(const std::vector<double>& pred, const std::vector<double>& target, double beta) {
  if (pred.size() != target.size())
    throw DimensionError("smooth_l1 length mismatch: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(target.size()));
  if (beta <= 0.0) throw std::invalid_argument("smooth_l1 beta must be positive");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    const double a = std::fabs(d);
    acc += a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
  }
  return acc;
}

namespace {

double bce_logits_mean_eager(const std::vector<double>& z, const std::vector<double>& t) {
  double acc = 0.0;
  for (size_t i = 0; i < z.size(); ++i)
    acc += std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::fabs(z[i])));
  return acc / static_cast<double>(z.size());
}

}  // namespace

LossTerms compute_losses(const HeadBatch& head, const RpnBatch& rpn, double beta) {
  LossTerms out;
  const int C = 1 + kNumClasses;
  const size_t n_roi = head.labels.size();
  if (head.cls_logits.size() != n_roi * static_cast<size_t>(C))
    throw DimensionError("head cls_logits size does not match labels");
  if (head.box_preds.size() != head.box_targets.size() ||
      head.mask_logits.size() != head.mask_targets.size() ||
      rpn.delta_preds.size() != rpn.delta_targets.size() ||
      rpn.obj_logits.size() != rpn.obj_targets.size())
    throw DimensionError("prediction/target size mismatch in compute_losses");

  if (n_roi == 0 && rpn.obj_logits.empty()) {
    out.no_proposals_warning = true;
    return out;
  }

  if (n_roi > 0) {
    // cross-entropy, mean over RoIs
    double acc = 0.0;
    for (size_t r = 0; r < n_roi; ++r) {
      const double* row = &head.cls_logits[r * static_cast<size_t>(C)];
      double m = row[0];
      for (int c = 1; c < C; ++c) m = std::max(m, row[c]);
      double z = 0.0;
      for (int c = 0; c < C; ++c) z += std::exp(row[c] - m);
      acc += m + std::log(z) - row[head.labels[r]];
    }
    out.cls = acc / static_cast<double>(n_roi);
  }
  if (!head.box_preds.empty()) {
    const double n_pos = static_cast<double>(head.box_preds.size()) / 4.0;
    out.bb = smooth_l1(head.box_preds, head.box_targets, beta) / n_pos;
  }
  if (!head.mask_logits.empty()) out.mask = bce_logits_mean_eager(head.mask_logits, head.mask_targets);
  if (!rpn.obj_logits.empty()) out.obj_rpn = bce_logits_mean_eager(rpn.obj_logits, rpn.obj_targets);
  if (!rpn.delta_preds.empty()) {
    const double n_pos = static_cast<double>(rpn.delta_preds.size()) / 4.0;
    out.bb_rpn = smooth_l1(rpn.delta_preds, rpn.delta_targets, beta) / n_pos;
  }
  return out;
}

UncertaintyWeights::UncertaintyWeights(ParamStore& ps, const std::string& name) {
  for (size_t i = 0; i < kLossNames.size(); ++i)
    s_[i] = &ps.create(name + ".log_alpha_sq." + kLossNames[i], {1});
}

Var UncertaintyWeights::total(Tape& t, const TermVars& terms) const {
  const std::array<Var, 5> ls = {terms.cls, terms.bb, terms.mask, terms.obj_rpn, terms.bb_rpn};
  Var total;
  for (size_t i = 0; i < ls.size(); ++i) {
    Var s = t.param(*s_[i]);
    // l / (2 alpha^2) + log alpha^2  ==  0.5 * l * exp(-s) + s
    Var weighted = t.mul(ls[i], t.mul_scalar(t.exp(t.mul_scalar(s, -1.0)), 0.5));
    Var contrib = t.add(weighted, s);
    total = i == 0 ? contrib : t.add(total, contrib);
  }
  return total;
}

std::array<double, 5> UncertaintyWeights::alphas() const {
  std::array<double, 5> a{};
  for (size_t i = 0; i < a.size(); ++i) a[i] = std::exp(0.5 * s_[i]->value[0]);
  return a;
}

double total_loss(const LossTerms& terms, const std::array<double, 5>& alpha) {
  const auto l = terms.as_array();
  double total = 0.0;
  for (size_t i = 0; i < l.size(); ++i) {
    if (!std::isfinite(l[i])) throw NumericError("non-finite loss term in total_loss");
    if (alpha[i] <= 0.0) throw std::invalid_argument("alpha weights must be positive");
    const double a2 = alpha[i] * alpha[i];
    total += l[i] / (2.0 * a2) + std::log(a2);
  }
  return total;
}

}  // namespace mdf
