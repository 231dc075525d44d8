#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdf/config.hpp"
#include "mdf/nn.hpp"

namespace mdf {

// The ten raw clinical features of one ED stay.
struct ClinicalRecord {
  double temperature = 0.0;  // degrees Fahrenheit
  double heartrate = 0.0;    // beats per minute
  double resprate = 0.0;     // breaths per minute
  double o2sat = 0.0;        // percent
  double sbp = 0.0;          // mmHg
  double dbp = 0.0;          // mmHg
  double pain = 0.0;         // 0-10 self-reported
  double acuity = 0.0;       // 1 (highest priority) .. 5
  double age = 0.0;          // years
  std::string gender;        // "M" or "F"

  double numerical(const std::string& feature) const;
  void set_numerical(const std::string& feature, double v);
  void validate() const;  // ranges and finiteness
};

int gender_index(const std::string& gender);  // M=0, F=1; throws on anything else

// Per-feature mean/std fitted on the training split only.
struct NormalizationStats {
  std::vector<std::string> features;  // numerical features, in encoding order
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-8

  double z(size_t i, double v) const { return (v - mean[i]) / stddev[i]; }
};

NormalizationStats fit_normalization(const std::vector<ClinicalRecord>& train_records,
                                     const std::vector<std::string>& numerical_features);

// Encodes a record into the clinical latent vector: z-scored numerical
// features first, then the gender embedding row (when gender is active).
class ClinicalEncoder {
 public:
  ClinicalEncoder() = default;
  ClinicalEncoder(ParamStore& ps, const std::vector<std::string>& features, int embed_width,
                  Rng& rng);

  Var forward(Tape& t, const ClinicalRecord& r, const NormalizationStats& stats) const;
  // Convenience wrapper over a throwaway tape.
  std::vector<double> encode(const ClinicalRecord& r, const NormalizationStats& stats) const;

  int output_width() const { return width_; }
  bool has_gender() const { return has_gender_; }
  const std::vector<std::string>& numerical_features() const { return numerical_; }

 private:
  std::vector<std::string> numerical_;
  bool has_gender_ = false;
  int width_ = 0;
  EmbeddingLayer embed_;
};

// e stacked (stride-2 deconv, same-size conv) pairs lifting the clinical
// vector to a 2^e x 2^e pseudo-image with `out_channels` channels.
class SpatialisationStack {
 public:
  SpatialisationStack() = default;
  SpatialisationStack(ParamStore& ps, const std::string& name, int in_width, int layers,
                      int mid_channels, int out_channels, Rng& rng);

  // z: [n] clinical vector -> [1,out_channels,2^e,2^e]
  Var forward(Tape& t, Var z) const;
  int output_size() const { return 1 << layers_; }

 private:
  int layers_ = 0;
  int in_width_ = 0;
  std::vector<Deconv2dLayer> deconvs_;
  std::vector<Conv2dLayer> convs_;
};

}  // namespace mdf
