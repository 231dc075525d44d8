#include "mdf/config.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mdf {

using nlohmann::json;

std::string to_string(Mode m) {
  switch (m) {
    case Mode::Baseline: return "baseline";
    case Mode::Msf1d: return "msf1d";
    case Mode::Msf3d: return "msf3d";
    case Mode::Mdf: return "mdf";
  }
  return "?";
}

std::string to_string(FusionMethod f) {
  switch (f) {
    case FusionMethod::ElementwiseSum: return "sum";
    case FusionMethod::ConcatLinear: return "concat_linear";
    case FusionMethod::ConcatConv: return "concat_conv";
    case FusionMethod::Hadamard: return "hadamard";
  }
  return "?";
}

Mode mode_from_string(const std::string& s) {
  if (s == "baseline") return Mode::Baseline;
  if (s == "msf1d") return Mode::Msf1d;
  if (s == "msf3d") return Mode::Msf3d;
  if (s == "mdf") return Mode::Mdf;
  throw std::invalid_argument("unknown mode: " + s + " (expected baseline|msf1d|msf3d|mdf)");
}

FusionMethod fusion_from_string(const std::string& s) {
  if (s == "sum") return FusionMethod::ElementwiseSum;
  if (s == "concat_linear") return FusionMethod::ConcatLinear;
  if (s == "concat_conv") return FusionMethod::ConcatConv;
  if (s == "hadamard") return FusionMethod::Hadamard;
  throw std::invalid_argument("unknown fusion method: " + s +
                              " (expected sum|concat_linear|concat_conv|hadamard)");
}

std::vector<std::string> all_clinical_features() {
  std::vector<std::string> f = kNumericalFeatures;
  f.push_back(kCategoricalFeature);
  return f;
}

int BackboneConfig::downsample() const {
  int d = 1;
  for (int s : strides) d *= s;
  return d;
}

int ModelConfig::clinical_width() const {
  int n = 0;
  for (const auto& f : features) {
    if (f == kCategoricalFeature)
      n += embed_width;
    else
      n += 1;
  }
  return n;
}

void ModelConfig::validate() const {
  if (image_size != (1 << spatial_e))
    throw std::invalid_argument("image_size must equal 2^spatial_e (got " +
                                std::to_string(image_size) + " vs e=" + std::to_string(spatial_e) + ")");
  if (backbone.channels.size() != backbone.strides.size() || backbone.channels.empty())
    throw std::invalid_argument("backbone channels/strides must be non-empty and equal length");
  if (image_size % backbone.downsample() != 0)
    throw std::invalid_argument("backbone downsample must divide image_size");
  for (int s : backbone.strides)
    if (s != 1 && s != 2) throw std::invalid_argument("backbone strides must be 1 or 2");
  if (anchors.scales.empty() || anchors.ratios.empty())
    throw std::invalid_argument("anchor scales and ratios must be non-empty");
  if (mode == Mode::Baseline) {
    if (!features.empty() && features != all_clinical_features())
      throw std::invalid_argument("baseline mode ignores clinical data; a feature subset is not allowed");
  } else {
    if (features.empty())
      throw std::invalid_argument("clinical feature set must be non-empty for mode " + to_string(mode));
  }
  auto known = all_clinical_features();
  for (const auto& f : features)
    if (std::find(known.begin(), known.end(), f) == known.end())
      throw std::invalid_argument("unknown clinical feature: " + f);
  if (rpn.fg_iou < rpn.bg_iou || head.fg_iou < head.bg_iou)
    throw std::invalid_argument("fg threshold must be >= bg threshold");
}

void RunConfig::validate() const {
  model.validate();
  if (train.epochs < 1 || train.batch_size < 1) throw std::invalid_argument("epochs and batch_size must be >= 1");
  if (train.lr < 0.0) throw std::invalid_argument("learning rate must be >= 0");
  if (score_thresh < 0.0 || score_thresh > 1.0 || iobb_thresh < 0.0 || iobb_thresh > 1.0)
    throw std::invalid_argument("thresholds must lie in [0,1]");
  if (!std::is_sorted(sweep_thresholds.begin(), sweep_thresholds.end()))
    throw std::invalid_argument("sweep thresholds must be sorted ascending");
}

json to_json(const RunConfig& c) {
  json j;
  j["mode"] = to_string(c.model.mode);
  j["fusion"] = to_string(c.model.fusion);
  j["image_size"] = c.model.image_size;
  j["spatial_e"] = c.model.spatial_e;
  j["spa_channels"] = c.model.spa_channels;
  j["embed_width"] = c.model.embed_width;
  j["backbone"] = {{"channels", c.model.backbone.channels}, {"strides", c.model.backbone.strides}};
  j["anchors"] = {{"scales", c.model.anchors.scales}, {"ratios", c.model.anchors.ratios}};
  j["rpn"] = {{"pre_nms", c.model.rpn.pre_nms},   {"post_nms", c.model.rpn.post_nms},
              {"nms_thresh", c.model.rpn.nms_thresh}, {"fg_iou", c.model.rpn.fg_iou},
              {"bg_iou", c.model.rpn.bg_iou},     {"batch", c.model.rpn.batch},
              {"pos_fraction", c.model.rpn.pos_fraction}};
  j["head"] = {{"hidden", c.model.head.hidden},   {"fg_iou", c.model.head.fg_iou},
               {"bg_iou", c.model.head.bg_iou},   {"batch", c.model.head.batch},
               {"pos_fraction", c.model.head.pos_fraction},
               {"score_thresh", c.model.head.score_thresh},
               {"nms_thresh", c.model.head.nms_thresh}, {"max_dets", c.model.head.max_dets},
               {"mask_size", c.model.head.mask_size}};
  j["features"] = c.model.features;
  j["train"] = {{"epochs", c.train.epochs},       {"batch_size", c.train.batch_size},
                {"lr", c.train.lr},               {"momentum", c.train.momentum},
                {"grad_clip", c.train.grad_clip}, {"val_fraction", c.train.val_fraction},
                {"patience", c.train.patience},   {"seed", c.train.seed}};
  j["score_thresh"] = c.score_thresh;
  j["iobb_thresh"] = c.iobb_thresh;
  j["sweep_thresholds"] = c.sweep_thresholds;
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  if (j.contains("mode")) c.model.mode = mode_from_string(j["mode"]);
  if (j.contains("fusion")) c.model.fusion = fusion_from_string(j["fusion"]);
  if (j.contains("image_size")) c.model.image_size = j["image_size"];
  if (j.contains("spatial_e")) c.model.spatial_e = j["spatial_e"];
  if (j.contains("spa_channels")) c.model.spa_channels = j["spa_channels"];
  if (j.contains("embed_width")) c.model.embed_width = j["embed_width"];
  if (j.contains("backbone")) {
    c.model.backbone.channels = j["backbone"]["channels"].get<std::vector<int>>();
    c.model.backbone.strides = j["backbone"]["strides"].get<std::vector<int>>();
  }
  if (j.contains("anchors")) {
    c.model.anchors.scales = j["anchors"]["scales"].get<std::vector<double>>();
    c.model.anchors.ratios = j["anchors"]["ratios"].get<std::vector<double>>();
  }
  if (j.contains("rpn")) {
    const auto& r = j["rpn"];
    if (r.contains("pre_nms")) c.model.rpn.pre_nms = r["pre_nms"];
    if (r.contains("post_nms")) c.model.rpn.post_nms = r["post_nms"];
    if (r.contains("nms_thresh")) c.model.rpn.nms_thresh = r["nms_thresh"];
    if (r.contains("fg_iou")) c.model.rpn.fg_iou = r["fg_iou"];
    if (r.contains("bg_iou")) c.model.rpn.bg_iou = r["bg_iou"];
    if (r.contains("batch")) c.model.rpn.batch = r["batch"];
    if (r.contains("pos_fraction")) c.model.rpn.pos_fraction = r["pos_fraction"];
  }
  if (j.contains("head")) {
    const auto& h = j["head"];
    if (h.contains("hidden")) c.model.head.hidden = h["hidden"];
    if (h.contains("fg_iou")) c.model.head.fg_iou = h["fg_iou"];
    if (h.contains("bg_iou")) c.model.head.bg_iou = h["bg_iou"];
    if (h.contains("batch")) c.model.head.batch = h["batch"];
    if (h.contains("pos_fraction")) c.model.head.pos_fraction = h["pos_fraction"];
    if (h.contains("score_thresh")) c.model.head.score_thresh = h["score_thresh"];
    if (h.contains("nms_thresh")) c.model.head.nms_thresh = h["nms_thresh"];
    if (h.contains("max_dets")) c.model.head.max_dets = h["max_dets"];
    if (h.contains("mask_size")) c.model.head.mask_size = h["mask_size"];
  }
  if (j.contains("features")) c.model.features = j["features"].get<std::vector<std::string>>();
  if (j.contains("train")) {
    const auto& t = j["train"];
    if (t.contains("epochs")) c.train.epochs = t["epochs"];
    if (t.contains("batch_size")) c.train.batch_size = t["batch_size"];
    if (t.contains("lr")) c.train.lr = t["lr"];
    if (t.contains("momentum")) c.train.momentum = t["momentum"];
    if (t.contains("grad_clip")) c.train.grad_clip = t["grad_clip"];
    if (t.contains("val_fraction")) c.train.val_fraction = t["val_fraction"];
    if (t.contains("patience")) c.train.patience = t["patience"];
    if (t.contains("seed")) c.train.seed = t["seed"];
  }
  if (j.contains("score_thresh")) c.score_thresh = j["score_thresh"];
  if (j.contains("iobb_thresh")) c.iobb_thresh = j["iobb_thresh"];
  if (j.contains("sweep_thresholds"))
    c.sweep_thresholds = j["sweep_thresholds"].get<std::vector<double>>();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  json j;
  in >> j;
  return run_config_from_json(j);
}

}  // namespace mdf
