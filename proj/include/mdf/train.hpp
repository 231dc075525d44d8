#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mdf/data.hpp"
#include "mdf/model.hpp"

#include <nlohmann/json_fwd.hpp>

namespace mdf {

struct TrainingDiverged : std::runtime_error {
  int64_t step;
  explicit TrainingDiverged(int64_t s)
      : std::runtime_error("training diverged (non-finite total loss) at step " + std::to_string(s)),
        step(s) {}
};

struct EpochStats {
  int epoch = 0;
  LossTerms mean_terms;
  std::array<double, 5> alphas{};
  double total = 0.0;
  double val_map = 0.0, val_mar = 0.0;
};

struct TrainOutcome {
  std::string final_checkpoint, best_checkpoint, metrics_csv, report_stem;
  int best_epoch = -1;
  double best_val_map = 0.0;
  std::vector<EpochStats> epochs;
  int64_t clinical_reads = 0;
};

// Loads images referenced by a manifest; split_filter "" keeps every record.
std::vector<Instance> load_instances(const std::string& manifest_path,
                                     const std::string& split_filter);

std::vector<ImageEval> collect_detections(MdfNet& model, const std::vector<Instance>& data);

EvalReport evaluate_model(MdfNet& model, const std::vector<Instance>& data, double score_thresh,
                          double iobb_thresh, const std::vector<double>& sweep);

nlohmann::json stats_to_json(const NormalizationStats& s);
NormalizationStats stats_from_json(const nlohmann::json& j);

// Full training run: fits normalization on the training portion, trains with
// SGD under the uncertainty-weighted objective, logs one CSV row per epoch,
// saves final and best-validation-mAP checkpoints, and writes an EvalReport
// for the best checkpoint on the validation split.
TrainOutcome train_model(const RunConfig& cfg, const std::vector<Instance>& train_pool,
                         const std::string& out_dir);

// Rebuilds the trained model from a checkpoint (resolved config + stats live
// in the checkpoint header). The optional expected config must agree on the
// recorded dimensions.
struct LoadedModel {
  RunConfig config;
  std::unique_ptr<MdfNet> model;
};
LoadedModel load_model(const std::string& checkpoint_path);

}  // namespace mdf
