// Command-line front end: data generation, joining, training, evaluation and
// the fusion / clinical-feature ablations.

#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mdf/checkpoint.hpp"
#include "mdf/classes.hpp"
#include "mdf/config.hpp"
#include "mdf/data.hpp"
#include "mdf/metrics.hpp"
#include "mdf/model.hpp"
#include "mdf/synth.hpp"
#include "mdf/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  uint64_t seed = 7;
  bool seed_set = false;
};

mdf::RunConfig resolve_config(const CommonOpts& c) {
  mdf::RunConfig cfg;
  if (!c.config_path.empty()) cfg = mdf::load_run_config(c.config_path);
  if (c.seed_set) cfg.train.seed = c.seed;
  return cfg;
}

void write_detections_csv(const std::string& path, const std::vector<mdf::ImageEval>& evals) {
  std::ofstream out(path, std::ios::trunc);
  out << "dicom_id,class,score,x,y,w,h\n";
  for (const auto& img : evals)
    for (const auto& d : img.preds)
      out << img.image_id << ",\"" << mdf::kClassNames[static_cast<size_t>(d.cls)] << "\","
          << d.score << "," << d.box.x << "," << d.box.y << "," << d.box.w << "," << d.box.h
          << "\n";
}

std::vector<mdf::ImageEval> read_detections_csv(const std::string& path,
                                                const std::vector<mdf::Instance>& data) {
  mdf::CsvTable t = mdf::read_csv(path);
  for (const char* col : {"dicom_id", "class", "score", "x", "y", "w", "h"})
    if (t.column(col) < 0) throw mdf::ValidationError(std::string("predictions csv is missing column ") + col);
  std::map<std::string, std::vector<mdf::ScoredBox>> by_image;
  const int ci = t.column("dicom_id"), cc = t.column("class"), cs = t.column("score");
  const int cx = t.column("x"), cy = t.column("y"), cw = t.column("w"), ch = t.column("h");
  for (const auto& row : t.rows) {
    const int cls = mdf::class_id_from_name(row[cc]);
    if (cls < 0) throw mdf::ValidationError("predictions csv has unknown class '" + row[cc] + "'");
    auto& preds = by_image[row[ci]];
    mdf::ScoredBox b;
    b.cls = cls;
    b.score = std::stod(row[cs]);
    b.box = {std::stod(row[cx]), std::stod(row[cy]), std::stod(row[cw]), std::stod(row[ch])};
    b.index = static_cast<int>(preds.size());
    preds.push_back(b);
  }
  std::vector<mdf::ImageEval> evals;
  for (const auto& inst : data) {
    mdf::ImageEval e;
    e.image_id = inst.dicom_id;
    e.gts = inst.gts;
    auto it = by_image.find(inst.dicom_id);
    if (it != by_image.end()) e.preds = it->second;
    evals.push_back(std::move(e));
  }
  return evals;
}

int cmd_generate(const CommonOpts& common, const mdf::SynthConfig& synth) {
  mdf::RunConfig cfg = resolve_config(common);
  fs::create_directories(common.out_dir);
  mdf::SynthResult res = mdf::synth_generate(synth, cfg.train.seed, common.out_dir);

  std::vector<mdf::Violation> violations = mdf::validate_schema(res.tables);
  if (!violations.empty()) {
    for (const auto& v : violations)
      std::cerr << "schema violation: " << v.table << "." << v.column << " row " << v.row << ": "
                << v.message << "\n";
    return 1;
  }
  mdf::JoinOutcome joined =
      mdf::join_tables(res.tables, (fs::path(common.out_dir) / "images").string());
  std::set<std::string> test_ids(res.test_dicoms.begin(), res.test_dicoms.end());
  for (auto& inst : joined.instances) {
    inst.split = test_ids.count(inst.keys.dicom_id) ? "test" : "train";
    inst.image_path = "images/" + inst.keys.dicom_id + ".pgm";
  }
  mdf::write_manifest((fs::path(common.out_dir) / "manifest.json").string(), joined.instances,
                      synth.image_size);
  mdf::write_exclusion_log((fs::path(common.out_dir) / "exclusions.csv").string(),
                           joined.exclusions);
  std::cout << "generated " << joined.instances.size() << " instances ("
            << res.train_dicoms.size() << " train / " << res.test_dicoms.size() << " test) under "
            << common.out_dir << "\n";
  return 0;
}

int cmd_join(const CommonOpts& common, const std::string& tables_dir,
             const std::string& image_dir) {
  mdf::SourceTables tables = mdf::SourceTables::load(tables_dir);
  std::vector<mdf::Violation> violations = mdf::validate_schema(tables);
  if (!violations.empty()) {
    for (const auto& v : violations)
      std::cerr << "schema violation: " << v.table << "." << v.column << " row " << v.row << ": "
                << v.message << "\n";
    return 1;
  }
  mdf::JoinOutcome joined = mdf::join_tables(tables, image_dir);
  fs::create_directories(common.out_dir);
  // store image paths relative to the manifest directory when possible
  for (auto& inst : joined.instances) {
    std::error_code ec;
    fs::path rel = fs::relative(inst.image_path, common.out_dir, ec);
    if (!ec && !rel.empty()) inst.image_path = rel.string();
  }
  int image_size = joined.instances.empty() ? 0 : joined.instances.front().image_w;
  mdf::write_manifest((fs::path(common.out_dir) / "manifest.json").string(), joined.instances,
                      image_size);
  mdf::write_exclusion_log((fs::path(common.out_dir) / "exclusions.csv").string(),
                           joined.exclusions);
  std::cout << "joined " << joined.instances.size() << " instances, excluded "
            << joined.exclusions.size() << "\n";
  return 0;
}

int cmd_train(const CommonOpts& common, const std::string& manifest, const std::string& mode,
              const std::string& fusion, const std::string& features_csv) {
  mdf::RunConfig cfg = resolve_config(common);
  if (!mode.empty()) cfg.model.mode = mdf::mode_from_string(mode);
  if (!fusion.empty()) cfg.model.fusion = mdf::fusion_from_string(fusion);
  if (!features_csv.empty()) {
    cfg.model.features.clear();
    std::stringstream ss(features_csv);
    std::string f;
    while (std::getline(ss, f, ',')) cfg.model.features.push_back(f);
  }
  cfg.validate();
  std::vector<mdf::Instance> pool = mdf::load_instances(manifest, "train");
  mdf::TrainOutcome out = mdf::train_model(cfg, pool, common.out_dir);
  std::cout << "trained " << mdf::to_string(cfg.model.mode) << ": best epoch " << out.best_epoch
            << " val mAP " << out.best_val_map << "\n"
            << "checkpoints: " << out.best_checkpoint << " (best), " << out.final_checkpoint
            << " (final)\n";
  return 0;
}

int cmd_evaluate(const CommonOpts& common, const std::string& manifest,
                 const std::string& checkpoint, const std::string& predictions,
                 const std::string& split, double score_thresh, double iobb_thresh) {
  mdf::RunConfig cfg = resolve_config(common);
  cfg.score_thresh = score_thresh;
  cfg.iobb_thresh = iobb_thresh;
  std::vector<mdf::Instance> data = mdf::load_instances(manifest, split);
  if (data.empty()) {
    std::cerr << "no instances in split '" << split << "' of " << manifest << "\n";
    return 1;
  }
  std::vector<mdf::ImageEval> evals;
  json echo;
  if (!predictions.empty()) {
    evals = read_detections_csv(predictions, data);
    echo = {{"predictions", predictions}};
  } else if (!checkpoint.empty()) {
    mdf::LoadedModel lm = mdf::load_model(checkpoint);
    if (lm.config.model.image_size != data.front().image.shape[2])
      throw std::runtime_error("checkpoint image size " +
                               std::to_string(lm.config.model.image_size) +
                               " does not match manifest images");
    evals = mdf::collect_detections(*lm.model, data);
    echo = mdf::to_json(lm.config);
    echo["checkpoint"] = checkpoint;
  } else {
    std::cerr << "evaluate needs --checkpoint or --predictions\n";
    return 1;
  }
  echo["score_thresh"] = score_thresh;
  echo["iobb_thresh"] = iobb_thresh;
  mdf::EvalReport report =
      mdf::evaluate_detections(evals, score_thresh, iobb_thresh, cfg.sweep_thresholds);
  fs::create_directories(common.out_dir);
  mdf::write_report_files(report, common.out_dir, "eval_report", echo);
  write_detections_csv((fs::path(common.out_dir) / "detections.csv").string(), evals);
  std::cout << "mean AP " << report.mean_ap << ", mean AR " << report.mean_ar << " ("
            << report.sweep.size() << " sweep rows) -> " << common.out_dir << "\n";
  return 0;
}

struct AblationRow {
  std::string variant;
  mdf::EvalReport report;
};

void write_ablation_table(const std::string& out_dir, const std::string& stem,
                          const std::vector<AblationRow>& rows, const json& echo) {
  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / (stem + ".csv"));
  csv << "variant";
  for (int c = 0; c < mdf::kNumClasses; ++c)
    csv << ",\"ap " << mdf::kClassNames[static_cast<size_t>(c)] << "\",\"ar "
        << mdf::kClassNames[static_cast<size_t>(c)] << "\"";
  csv << ",mean_ap,mean_ar\n";
  json j;
  j["config"] = echo;
  json variants = json::array();
  for (const auto& row : rows) {
    csv << "\"" << row.variant << "\"";
    for (int c = 0; c < mdf::kNumClasses; ++c)
      csv << "," << row.report.per_class[static_cast<size_t>(c)].ap << ","
          << row.report.per_class[static_cast<size_t>(c)].ar;
    csv << "," << row.report.mean_ap << "," << row.report.mean_ar << "\n";
    json v = mdf::report_to_json(row.report);
    v["variant"] = row.variant;
    variants.push_back(std::move(v));
  }
  j["variants"] = std::move(variants);
  std::ofstream(fs::path(out_dir) / (stem + ".json")) << j.dump(2) << "\n";
}

mdf::EvalReport train_and_eval_variant(const mdf::RunConfig& cfg, const std::string& manifest,
                                       const std::string& variant_dir) {
  std::vector<mdf::Instance> pool = mdf::load_instances(manifest, "train");
  mdf::TrainOutcome out = mdf::train_model(cfg, pool, variant_dir);
  mdf::LoadedModel lm = mdf::load_model(out.best_checkpoint);
  std::vector<mdf::Instance> test = mdf::load_instances(manifest, "test");
  if (test.empty()) test = std::move(pool);
  return mdf::evaluate_model(*lm.model, test, cfg.score_thresh, cfg.iobb_thresh,
                             {cfg.iobb_thresh});
}

int cmd_ablate_fusion(const CommonOpts& common, const std::string& manifest,
                      const std::string& fusions_csv) {
  mdf::RunConfig cfg = resolve_config(common);
  cfg.model.mode = mdf::Mode::Mdf;
  std::vector<std::string> fusion_names;
  std::stringstream ss(fusions_csv);
  std::string f;
  while (std::getline(ss, f, ',')) fusion_names.push_back(f);
  std::vector<AblationRow> rows;
  for (const auto& name : fusion_names) {
    mdf::RunConfig vc = cfg;
    vc.model.fusion = mdf::fusion_from_string(name);
    std::cout << "[ablate-fusion] training variant " << name << "\n";
    rows.push_back({name, train_and_eval_variant(vc, manifest,
                                                 (fs::path(common.out_dir) / name).string())});
  }
  write_ablation_table(common.out_dir, "fusion_ablation", rows, mdf::to_json(cfg));
  std::cout << "wrote " << rows.size() << "-row fusion ablation table under " << common.out_dir
            << "\n";
  return 0;
}

int cmd_ablate_features(const CommonOpts& common, const std::string& manifest,
                        const std::string& sets_spec) {
  mdf::RunConfig cfg = resolve_config(common);
  if (cfg.model.mode == mdf::Mode::Baseline) cfg.model.mode = mdf::Mode::Mdf;
  std::vector<std::vector<std::string>> sets;
  std::stringstream outer(sets_spec);
  std::string set_str;
  while (std::getline(outer, set_str, ';')) {
    std::vector<std::string> fs_list;
    std::stringstream inner(set_str);
    std::string f;
    while (std::getline(inner, f, ',')) fs_list.push_back(f);
    if (!fs_list.empty()) sets.push_back(std::move(fs_list));
  }
  std::vector<AblationRow> rows;
  for (size_t i = 0; i < sets.size(); ++i) {
    mdf::RunConfig vc = cfg;
    vc.model.features = sets[i];  // the encoder and normalization are re-fitted per subset
    std::string name;
    for (const auto& f : sets[i]) name += (name.empty() ? "" : "+") + f;
    std::cout << "[ablate-features] training variant " << name << "\n";
    rows.push_back({name, train_and_eval_variant(vc, manifest,
                                                 (fs::path(common.out_dir) / ("set" + std::to_string(i))).string())});
  }
  write_ablation_table(common.out_dir, "feature_ablation", rows, mdf::to_json(cfg));
  std::cout << "wrote " << rows.size() << "-row feature ablation table under " << common.out_dir
            << "\n";
  return 0;
}

int cmd_report(const std::string& report_json) {
  std::ifstream in(report_json);
  if (!in) {
    std::cerr << "cannot open report: " << report_json << "\n";
    return 1;
  }
  json j;
  in >> j;
  std::cout << "evaluation report (score_thresh=" << j.value("score_thresh", 0.0)
            << ", iobb_thresh=" << j.value("iobb_thresh", 0.0) << ")\n";
  std::printf("%-30s %6s %6s %6s %8s %8s\n", "class", "tp", "fp", "fn", "ap", "ar");
  for (auto& [name, c] : j["classes"].items())
    std::printf("%-30s %6d %6d %6d %8.4f %8.4f\n", name.c_str(), c["tp"].get<int>(),
                c["fp"].get<int>(), c["fn"].get<int>(), c["ap"].get<double>(),
                c["ar"].get<double>());
  std::printf("%-30s %6s %6s %6s %8.4f %8.4f\n", "mean", "", "", "",
              j["mean_ap"].get<double>(), j["mean_ar"].get<double>());
  if (j.contains("iobb_sweep")) {
    std::cout << "iobb sweep:\n";
    for (const auto& row : j["iobb_sweep"])
      std::printf("  thresh %.2f  mAP %.4f  mAR %.4f\n", row["iobb_thresh"].get<double>(),
                  row["mean_ap"].get<double>(), row["mean_ar"].get<double>());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal dual-fusion abnormality detector"};
  app.require_subcommand(1);

  CommonOpts common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON run config");
    sub->add_option("--out", common.out_dir, "output directory");
    sub->add_option("--seed", common.seed, "run seed")->each([&common](const std::string&) {
      common.seed_set = true;
    });
  };

  // generate
  mdf::SynthConfig synth;
  auto* gen = app.add_subcommand("generate", "write a synthetic multimodal dataset");
  add_common(gen);
  gen->add_option("--train-instances", synth.train_instances, "training instances");
  gen->add_option("--test-instances", synth.test_instances, "test instances");
  gen->add_option("--image-size", synth.image_size, "square image side");
  gen->add_option("--kappa", synth.coupling_kappa, "clinical coupling strength in [0,1]");

  // join
  std::string tables_dir, image_dir;
  auto* join = app.add_subcommand("join", "join source tables into a manifest");
  add_common(join);
  join->add_option("--tables", tables_dir, "directory with the five csv tables")->required();
  join->add_option("--images", image_dir, "directory with <dicom_id>.pgm images")->required();

  // train
  std::string manifest, mode, fusion, features_csv;
  auto* train = app.add_subcommand("train", "train a detector");
  add_common(train);
  train->add_option("--manifest", manifest, "dataset manifest")->required();
  train->add_option("--mode", mode, "baseline|msf1d|msf3d|mdf");
  train->add_option("--fusion", fusion, "sum|concat_linear|concat_conv|hadamard");
  train->add_option("--features", features_csv, "comma-separated clinical feature subset");

  // evaluate
  std::string checkpoint, predictions, split = "test";
  double score_thresh = 0.05, iobb_thresh = 0.5;
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint or a predictions csv");
  add_common(eval);
  eval->add_option("--manifest", manifest, "dataset manifest")->required();
  eval->add_option("--checkpoint", checkpoint, "trained checkpoint");
  eval->add_option("--predictions", predictions, "detections csv instead of a checkpoint");
  eval->add_option("--split", split, "manifest split to evaluate (default test)");
  eval->add_option("--score-thresh", score_thresh, "operating-point score threshold");
  eval->add_option("--iobb-thresh", iobb_thresh, "operating-point IoBB threshold");

  // ablations
  std::string fusions_csv = "sum,concat_linear,concat_conv,hadamard";
  auto* abf = app.add_subcommand("ablate-fusion", "train/evaluate each fusion method");
  add_common(abf);
  abf->add_option("--manifest", manifest, "dataset manifest")->required();
  abf->add_option("--fusions", fusions_csv, "comma-separated fusion list");

  std::string feature_sets = "gender,heartrate;gender,resprate;gender,temperature";
  auto* abc = app.add_subcommand("ablate-features", "train/evaluate clinical feature subsets");
  add_common(abc);
  abc->add_option("--manifest", manifest, "dataset manifest")->required();
  abc->add_option("--feature-sets", feature_sets, "semicolon-separated comma lists");

  // report
  std::string report_path;
  auto* rep = app.add_subcommand("report", "pretty-print an evaluation report json");
  rep->add_option("report", report_path, "eval report json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(common, synth);
    if (join->parsed()) return cmd_join(common, tables_dir, image_dir);
    if (train->parsed()) return cmd_train(common, manifest, mode, fusion, features_csv);
    if (eval->parsed())
      return cmd_evaluate(common, manifest, checkpoint, predictions, split, score_thresh,
                          iobb_thresh);
    if (abf->parsed()) return cmd_ablate_fusion(common, manifest, fusions_csv);
    if (abc->parsed()) return cmd_ablate_features(common, manifest, feature_sets);
    if (rep->parsed()) return cmd_report(report_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
