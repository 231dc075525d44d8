#include "mdf/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "mdf/checkpoint.hpp"

namespace fs = std::filesystem;

namespace mdf {

std::vector<Instance> load_instances(const std::string& manifest_path,
                                     const std::string& split_filter) {
  int image_size = 0;
  std::vector<JoinedInstance> joined = read_manifest(manifest_path, &image_size);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<Instance> out;
  for (const auto& j : joined) {
    if (!split_filter.empty() && j.split != split_filter) continue;
    Instance inst;
    inst.dicom_id = j.keys.dicom_id;
    fs::path img_path(j.image_path);
    if (img_path.is_relative()) img_path = base / img_path;
    inst.image = image_to_tensor(read_pgm(img_path.string()));
    inst.clinical = j.clinical;
    inst.gts = j.boxes;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<ImageEval> collect_detections(MdfNet& model, const std::vector<Instance>& data) {
  std::vector<ImageEval> evals;
  evals.reserve(data.size());
  for (const Instance& inst : data) {
    ImageEval e;
    e.image_id = inst.dicom_id;
    e.preds = model.infer(inst);
    e.gts = inst.gts;
    evals.push_back(std::move(e));
  }
  return evals;
}

EvalReport evaluate_model(MdfNet& model, const std::vector<Instance>& data, double score_thresh,
                          double iobb_thresh, const std::vector<double>& sweep) {
  return evaluate_detections(collect_detections(model, data), score_thresh, iobb_thresh, sweep);
}

nlohmann::json stats_to_json(const NormalizationStats& s) {
  return {{"features", s.features}, {"mean", s.mean}, {"stddev", s.stddev}};
}

NormalizationStats stats_from_json(const nlohmann::json& j) {
  NormalizationStats s;
  s.features = j["features"].get<std::vector<std::string>>();
  s.mean = j["mean"].get<std::vector<double>>();
  s.stddev = j["stddev"].get<std::vector<double>>();
  return s;
}

namespace {

std::vector<std::string> numerical_subset(const std::vector<std::string>& features) {
  std::vector<std::string> out;
  for (const auto& f : features)
    if (f != kCategoricalFeature) out.push_back(f);
  return out;
}

void scale_grads(ParamStore& ps, double s) {
  for (auto& p : ps.all())
    for (double& g : p->grad.data) g *= s;
}

}  // namespace

TrainOutcome train_model(const RunConfig& cfg, const std::vector<Instance>& train_pool,
                         const std::string& out_dir) {
  cfg.validate();
  if (train_pool.empty()) throw std::invalid_argument("training requires a non-empty dataset");
  fs::create_directories(out_dir);

  Rng root(cfg.train.seed);

  // validation holdout, carved deterministically from the training pool
  std::vector<int> order(train_pool.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  {
    Rng split_rng = root.fork("valsplit");
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[split_rng.next_u64() % i]);
  }
  const size_t n_val = static_cast<size_t>(std::floor(cfg.train.val_fraction * train_pool.size()));
  std::vector<Instance> val_set, train_set;
  for (size_t i = 0; i < order.size(); ++i)
    (i < n_val ? val_set : train_set).push_back(train_pool[static_cast<size_t>(order[i])]);
  if (train_set.empty()) throw std::invalid_argument("validation fraction leaves no training data");

  // normalization statistics come from the training portion only
  std::vector<ClinicalRecord> train_records;
  for (const auto& inst : train_set) train_records.push_back(inst.clinical);
  NormalizationStats stats =
      fit_normalization(train_records, numerical_subset(cfg.model.features));

  MdfNet model(cfg.model, stats, root.fork("init").next_u64());

  nlohmann::json meta;
  meta["config"] = to_json(cfg);
  meta["normalization"] = stats_to_json(stats);

  TrainOutcome outcome;
  outcome.final_checkpoint = (fs::path(out_dir) / "final.ckpt").string();
  outcome.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
  outcome.metrics_csv = (fs::path(out_dir) / "epochs.csv").string();

  std::ofstream csv(outcome.metrics_csv, std::ios::trunc);
  csv << "epoch,l_cls,l_bb,l_mask,l_obj_rpn,l_bb_rpn,total,alpha_cls,alpha_bb,alpha_mask,"
         "alpha_obj_rpn,alpha_bb_rpn,val_map,val_mar\n";

  Rng sampler = root.fork("sampler");
  int64_t step = 0;
  int epochs_since_best = 0;
  for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
    Rng shuffle_rng = root.fork("shuffle" + std::to_string(epoch));
    std::vector<int> idx(train_set.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[shuffle_rng.next_u64() % i]);

    LossTerms sums;
    double total_sum = 0.0;
    size_t cursor = 0;
    while (cursor < idx.size()) {
      const size_t batch_end = std::min(cursor + static_cast<size_t>(cfg.train.batch_size),
                                        idx.size());
      model.params().zero_grads();
      for (size_t b = cursor; b < batch_end; ++b, ++step) {
        Tape tape;
        LossResult lr = model.training_loss(tape, train_set[static_cast<size_t>(idx[b])],
                                            nullptr, &sampler);
        const double total = tape.value(lr.total)[0];
        if (!std::isfinite(total)) throw TrainingDiverged(step);
        tape.backward(lr.total);
        sums.cls += lr.terms.cls;
        sums.bb += lr.terms.bb;
        sums.mask += lr.terms.mask;
        sums.obj_rpn += lr.terms.obj_rpn;
        sums.bb_rpn += lr.terms.bb_rpn;
        total_sum += total;
      }
      scale_grads(model.params(), 1.0 / static_cast<double>(batch_end - cursor));
      model.params().sgd_step(cfg.train.lr, cfg.train.momentum, cfg.train.grad_clip);
      cursor = batch_end;
    }

    EpochStats es;
    es.epoch = epoch;
    const double n = static_cast<double>(train_set.size());
    es.mean_terms.cls = sums.cls / n;
    es.mean_terms.bb = sums.bb / n;
    es.mean_terms.mask = sums.mask / n;
    es.mean_terms.obj_rpn = sums.obj_rpn / n;
    es.mean_terms.bb_rpn = sums.bb_rpn / n;
    es.total = total_sum / n;
    es.alphas = model.uncertainty().alphas();
    if (!val_set.empty()) {
      EvalReport vr = evaluate_model(model, val_set, cfg.score_thresh, cfg.iobb_thresh,
                                     {cfg.iobb_thresh});
      es.val_map = vr.mean_ap;
      es.val_mar = vr.mean_ar;
    }
    csv << es.epoch << "," << es.mean_terms.cls << "," << es.mean_terms.bb << ","
        << es.mean_terms.mask << "," << es.mean_terms.obj_rpn << "," << es.mean_terms.bb_rpn
        << "," << es.total << "," << es.alphas[0] << "," << es.alphas[1] << "," << es.alphas[2]
        << "," << es.alphas[3] << "," << es.alphas[4] << "," << es.val_map << "," << es.val_mar
        << "\n";
    csv.flush();
    outcome.epochs.push_back(es);

    meta["epoch"] = epoch;
    meta["val_map"] = es.val_map;
    if (outcome.best_epoch < 0 || es.val_map > outcome.best_val_map) {
      outcome.best_epoch = epoch;
      outcome.best_val_map = es.val_map;
      save_checkpoint(outcome.best_checkpoint, model.params(), meta);
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    if (cfg.train.patience > 0 && epochs_since_best >= cfg.train.patience) break;
  }
  save_checkpoint(outcome.final_checkpoint, model.params(), meta);
  outcome.clinical_reads = model.clinical_reads();

  // report for the best checkpoint on the held-out validation split
  load_checkpoint(outcome.best_checkpoint, model.params());
  const std::vector<Instance>& report_set = val_set.empty() ? train_set : val_set;
  EvalReport report = evaluate_model(model, report_set, cfg.score_thresh, cfg.iobb_thresh,
                                     cfg.sweep_thresholds);
  outcome.report_stem = "validation_report";
  write_report_files(report, out_dir, outcome.report_stem, to_json(cfg));
  return outcome;
}

LoadedModel load_model(const std::string& checkpoint_path) {
  nlohmann::json meta = read_checkpoint_meta(checkpoint_path);
  LoadedModel lm;
  lm.config = run_config_from_json(meta["config"]);
  NormalizationStats stats = stats_from_json(meta["normalization"]);
  lm.model = std::make_unique<MdfNet>(lm.config.model, stats, /*init_seed=*/0);
  load_checkpoint(checkpoint_path, lm.model->params());
  return lm;
}

}  // namespace mdf
