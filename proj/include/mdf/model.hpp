#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdf/backbone.hpp"
#include "mdf/clinical.hpp"
#include "mdf/config.hpp"
#include "mdf/detection.hpp"
#include "mdf/losses.hpp"
#include "mdf/metrics.hpp"

namespace mdf {

// One training/evaluation example in memory.
struct Instance {
  std::string dicom_id;
  Tensor image;  // [1,1,H,W]
  ClinicalRecord clinical;
  std::vector<GtBox> gts;
};

// Discrete choices of one training step (sampled anchors, RoIs, targets),
// kept separate so a loss can be re-evaluated against frozen choices —
// finite-difference checks need the objective smooth in the parameters.
struct TrainingPlan {
  std::vector<int> anchor_indices;     // sampled for the objectness loss
  std::vector<double> anchor_targets;  // 0/1, aligned with anchor_indices
  std::vector<int> pos_anchor_indices;
  std::vector<BoxDelta> pos_anchor_deltas;
  std::vector<Box> rois;
  std::vector<int> roi_labels;          // 0 background, 1+c positive
  std::vector<BoxDelta> roi_deltas;     // aligned with positives in rois order
  std::vector<Tensor> roi_mask_targets; // aligned with positives
  bool had_proposals = true;
};

struct LossResult {
  Var total;
  UncertaintyWeights::TermVars term_vars;
  LossTerms terms;
  TrainingPlan plan;
};

// Stage outputs exposed for the fusion-wiring checks.
struct StageProbe {
  Tensor clinical_vector;    // empty in baseline mode
  Tensor rpn_input;          // map the RPN consumes
  std::vector<Proposal> proposals;
};

class MdfNet {
 public:
  MdfNet(const ModelConfig& cfg, const NormalizationStats& stats, uint64_t init_seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const NormalizationStats& normalization() const { return stats_; }
  const AnchorGrid& anchors() const { return anchors_; }
  const UncertaintyWeights& uncertainty() const { return uncertainty_; }
  const RoiHead& head() const { return head_; }

  // Builds the full five-term uncertainty-weighted objective on `tape`.
  // With `frozen == nullptr` the plan is sampled via `sampler` and returned in
  // the result; otherwise the frozen plan is replayed exactly.
  LossResult training_loss(Tape& tape, const Instance& inst, const TrainingPlan* frozen,
                           Rng* sampler);

  std::vector<ScoredBox> infer(const Instance& inst);
  StageProbe probe_stages(const Instance& inst);

  // instrumentation: how many forward passes touched the clinical encoder
  int64_t clinical_reads() const { return clinical_reads_; }

 private:
  struct ForwardState {
    Var fused;              // map the RPN and RoI heads consume
    std::optional<Var> z;   // clinical latent vector
    RpnOutputs rpn;
  };
  ForwardState forward_shared(Tape& tape, const Instance& inst);
  Var fused_map(Tape& tape, const Instance& inst, std::optional<Var>* z_out);

  ModelConfig cfg_;
  NormalizationStats stats_;
  ParamStore params_;
  ClinicalEncoder encoder_;
  SpatialisationStack spatial_;
  Backbone cxr_backbone_, clinical_backbone_;
  FusionBlock fusion_;
  RpnBlock rpn_;
  RoiHead head_;
  UncertaintyWeights uncertainty_;
  AnchorGrid anchors_;
  int64_t clinical_reads_ = 0;
};

}  // namespace mdf
