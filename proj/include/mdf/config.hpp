#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace mdf {

enum class Mode { Baseline, Msf1d, Msf3d, Mdf };
enum class FusionMethod { ElementwiseSum, ConcatLinear, ConcatConv, Hadamard };

std::string to_string(Mode m);
std::string to_string(FusionMethod f);
Mode mode_from_string(const std::string& s);
FusionMethod fusion_from_string(const std::string& s);

inline const std::vector<std::string> kNumericalFeatures = {
    "temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain", "acuity", "age"};
inline const std::string kCategoricalFeature = "gender";

std::vector<std::string> all_clinical_features();  // nine numerical + gender

struct BackboneConfig {
  std::vector<int> channels = {8, 16, 32, 64, 64};
  std::vector<int> strides = {2, 2, 2, 1, 1};
  int out_channels() const { return channels.back(); }
  int downsample() const;
};

struct AnchorConfig {
  std::vector<double> scales = {12.0, 18.0, 26.0};
  std::vector<double> ratios = {0.5, 1.0, 2.0};
  int per_cell() const { return static_cast<int>(scales.size() * ratios.size()); }
};

struct RpnConfig {
  int pre_nms = 200;
  int post_nms = 50;
  double nms_thresh = 0.7;
  double fg_iou = 0.5;
  double bg_iou = 0.3;
  int batch = 32;          // anchors sampled per image for the objectness loss
  double pos_fraction = 0.5;
};

struct HeadConfig {
  int hidden = 128;
  double fg_iou = 0.5;
  double bg_iou = 0.3;
  int batch = 16;          // RoIs sampled per image
  double pos_fraction = 0.5;
  double score_thresh = 0.05;
  double nms_thresh = 0.5;
  int max_dets = 20;
  int mask_size = 14;
};

struct ModelConfig {
  Mode mode = Mode::Mdf;
  FusionMethod fusion = FusionMethod::ElementwiseSum;
  int image_size = 64;   // W = H = 2^spatial_e
  int spatial_e = 6;     // stacked deconv+conv pairs; each doubles spatial size
  int spa_channels = 8;  // internal channel width of the spatialisation stack
  int embed_width = 55;  // gender embedding width (9 numerical + 55 = 64)
  BackboneConfig backbone;
  AnchorConfig anchors;
  RpnConfig rpn;
  HeadConfig head;
  std::vector<std::string> features = all_clinical_features();

  bool use_3d_fusion() const { return mode == Mode::Msf3d || mode == Mode::Mdf; }
  bool use_1d_fusion() const { return mode == Mode::Msf1d || mode == Mode::Mdf; }
  bool uses_clinical() const { return mode != Mode::Baseline; }
  int feature_map_size() const { return image_size / backbone.downsample(); }
  int clinical_width() const;  // n = numerical count (+ embed_width when gender present)
  void validate() const;
};

struct TrainConfig {
  int epochs = 8;
  int batch_size = 2;
  double lr = 0.01;
  double momentum = 0.9;
  double grad_clip = 10.0;
  double val_fraction = 0.125;
  int patience = 10;  // epochs without val mAP improvement; 0 disables early stop
  uint64_t seed = 7;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  double score_thresh = 0.05;
  double iobb_thresh = 0.5;
  std::vector<double> sweep_thresholds = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace mdf
