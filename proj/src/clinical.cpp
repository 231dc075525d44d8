#include "mdf/clinical.hpp"

#include <cmath>
#include <stdexcept>

namespace mdf {

double ClinicalRecord::numerical(const std::string& feature) const {
  if (feature == "temperature") return temperature;
  if (feature == "heartrate") return heartrate;
  if (feature == "resprate") return resprate;
  if (feature == "o2sat") return o2sat;
  if (feature == "sbp") return sbp;
  if (feature == "dbp") return dbp;
  if (feature == "pain") return pain;
  if (feature == "acuity") return acuity;
  if (feature == "age") return age;
  throw std::invalid_argument("unknown numerical clinical feature: " + feature);
}

void ClinicalRecord::set_numerical(const std::string& feature, double v) {
  if (feature == "temperature") temperature = v;
  else if (feature == "heartrate") heartrate = v;
  else if (feature == "resprate") resprate = v;
  else if (feature == "o2sat") o2sat = v;
  else if (feature == "sbp") sbp = v;
  else if (feature == "dbp") dbp = v;
  else if (feature == "pain") pain = v;
  else if (feature == "acuity") acuity = v;
  else if (feature == "age") age = v;
  else throw std::invalid_argument("unknown numerical clinical feature: " + feature);
}

void ClinicalRecord::validate() const {
  for (const auto& f : kNumericalFeatures) {
    const double v = numerical(f);
    if (!std::isfinite(v)) throw NumericError("clinical feature " + f + " is not finite");
  }
  if (pain < 0.0 || pain > 10.0) throw std::invalid_argument("pain must lie in [0,10]");
  if (acuity < 1.0 || acuity > 5.0) throw std::invalid_argument("acuity must lie in [1,5]");
  gender_index(gender);
}

int gender_index(const std::string& gender) {
  if (gender == "M") return 0;
  if (gender == "F") return 1;
  throw std::invalid_argument("unknown gender category: '" + gender + "' (expected M or F)");
}

NormalizationStats fit_normalization(const std::vector<ClinicalRecord>& train_records,
                                     const std::vector<std::string>& numerical_features) {
  if (train_records.empty())
    throw std::invalid_argument("fit_normalization requires a non-empty training set");
  NormalizationStats s;
  s.features = numerical_features;
  const size_t nf = numerical_features.size();
  s.mean.assign(nf, 0.0);
  s.stddev.assign(nf, 0.0);
  const double n = static_cast<double>(train_records.size());
  for (const auto& r : train_records)
    for (size_t i = 0; i < nf; ++i) s.mean[i] += r.numerical(numerical_features[i]);
  for (size_t i = 0; i < nf; ++i) s.mean[i] /= n;
  for (const auto& r : train_records)
    for (size_t i = 0; i < nf; ++i) {
      const double d = r.numerical(numerical_features[i]) - s.mean[i];
      s.stddev[i] += d * d;
    }
  for (size_t i = 0; i < nf; ++i) s.stddev[i] = std::max(std::sqrt(s.stddev[i] / n), 1e-8);
  return s;
}

ClinicalEncoder::ClinicalEncoder(ParamStore& ps, const std::vector<std::string>& features,
                                 int embed_width, Rng& rng) {
  for (const auto& f : features) {
    if (f == kCategoricalFeature)
      has_gender_ = true;
    else
      numerical_.push_back(f);
  }
  width_ = static_cast<int>(numerical_.size());
  if (has_gender_) {
    embed_ = EmbeddingLayer::create(ps, "clinical.gender_embed", 2, embed_width, rng);
    width_ += embed_width;
  }
  if (width_ == 0) throw std::invalid_argument("clinical encoder needs at least one feature");
}

Var ClinicalEncoder::forward(Tape& t, const ClinicalRecord& r,
                             const NormalizationStats& stats) const {
  if (stats.features != numerical_)
    throw std::invalid_argument("normalization stats were fitted for a different feature set");
  std::vector<Var> parts;
  if (!numerical_.empty()) {
    Tensor num({static_cast<int>(numerical_.size())});
    for (size_t i = 0; i < numerical_.size(); ++i)
      num.data[i] = stats.z(i, r.numerical(numerical_[i]));
    parts.push_back(t.input(std::move(num)));
  }
  if (has_gender_) parts.push_back(embed_.forward(t, gender_index(r.gender)));
  return parts.size() == 1 ? parts[0] : t.concat(parts, 0);
}

std::vector<double> ClinicalEncoder::encode(const ClinicalRecord& r,
                                            const NormalizationStats& stats) const {
  Tape t;
  Var v = forward(t, r, stats);
  return t.value(v).data;
}

SpatialisationStack::SpatialisationStack(ParamStore& ps, const std::string& name, int in_width,
                                         int layers, int mid_channels, int out_channels,
                                         Rng& rng)
    : layers_(layers), in_width_(in_width) {
  if (layers < 1) throw std::invalid_argument("spatialisation needs at least one layer");
  for (int i = 0; i < layers; ++i) {
    const int cin = i == 0 ? in_width : mid_channels;
    const int cout = i == layers - 1 ? out_channels : mid_channels;
    // stride-2 deconv doubles the spatial size; the 3x3 conv keeps it
    deconvs_.push_back(Deconv2dLayer::create(ps, name + ".deconv" + std::to_string(i), cin,
                                             i == layers - 1 ? cout : mid_channels, 2, 2, 0, rng));
    convs_.push_back(Conv2dLayer::create(ps, name + ".conv" + std::to_string(i),
                                         i == layers - 1 ? cout : mid_channels, cout, 3, 1, 1, rng));
  }
}

Var SpatialisationStack::forward(Tape& t, Var z) const {
  const Tensor& zv = t.value(z);
  if (zv.numel() != in_width_)
    throw DimensionError("spatialisation input width " + std::to_string(zv.numel()) +
                         " does not match configured " + std::to_string(in_width_));
  Var x = t.reshape(z, {1, in_width_, 1, 1});
  for (size_t i = 0; i < deconvs_.size(); ++i) {
    x = deconvs_[i].forward(t, x);
    x = t.relu(convs_[i].forward(t, x));
  }
  return x;
}

}  // namespace mdf
