#pragma once

#include <array>
#include <vector>

#include "mdf/nn.hpp"

namespace mdf {

inline constexpr double kSmoothL1Beta = 1.0 / 9.0;

// Piecewise smooth-L1, summed over coordinates:
// |d| < beta -> 0.5 d^2 / beta, otherwise |d| - 0.5 beta (continuous at |d| = beta).
double smooth_l1(const std::vector<double>& pred, const std::vector<double>& target, double beta);

struct LossTerms {
  double cls = 0.0;
  double bb = 0.0;
  double mask = 0.0;
  double obj_rpn = 0.0;
  double bb_rpn = 0.0;
  bool no_proposals_warning = false;

  std::array<double, 5> as_array() const { return {cls, bb, mask, obj_rpn, bb_rpn}; }
};

inline constexpr std::array<const char*, 5> kLossNames = {"cls", "bb", "mask", "obj_rpn", "bb_rpn"};

// Sampled per-image training batch for the second stage, as logits.
struct HeadBatch {
  std::vector<double> cls_logits;  // N x (1+kNumClasses), row-major
  std::vector<int> labels;         // N entries; 0 = background
  std::vector<double> box_preds;   // 4 per positive RoI (matched class slot)
  std::vector<double> box_targets;
  std::vector<double> mask_logits;  // mask_size^2 per positive RoI (matched class map)
  std::vector<double> mask_targets;
};

// Sampled per-image anchor batch for the RPN.
struct RpnBatch {
  std::vector<double> obj_logits;
  std::vector<double> obj_targets;   // 0/1
  std::vector<double> delta_preds;   // 4 per positive anchor
  std::vector<double> delta_targets;
};

// Eager evaluation of the five terms; regression and mask terms are exactly 0
// when no positives contribute. Empty batches raise the warning flag.
LossTerms compute_losses(const HeadBatch& head, const RpnBatch& rpn, double beta = kSmoothL1Beta);

// Homoscedastic task weights. Each loss carries a trainable alpha stored as
// s = log(alpha^2), so positivity is structural; total = sum l/(2 alpha^2) + log alpha^2.
class UncertaintyWeights {
 public:
  UncertaintyWeights() = default;
  UncertaintyWeights(ParamStore& ps, const std::string& name);

  struct TermVars {
    Var cls, bb, mask, obj_rpn, bb_rpn;  // scalar Vars
  };
  Var total(Tape& t, const TermVars& terms) const;

  std::array<double, 5> alphas() const;
  std::array<Parameter*, 5> s_params() const { return s_; }

 private:
  std::array<Parameter*, 5> s_ = {nullptr, nullptr, nullptr, nullptr, nullptr};
};

// Contract-level objective value for fixed weights.
double total_loss(const LossTerms& terms, const std::array<double, 5>& alpha);

}  // namespace mdf
