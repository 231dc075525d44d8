#pragma once

#include <string>
#include <vector>

#include "mdf/config.hpp"
#include "mdf/nn.hpp"

namespace mdf {

// Small stage-per-stride CNN: conv3x3 (+bias, relu) per stage. Produces the
// W' x H' x D' feature map both modal branches share.
class Backbone {
 public:
  Backbone() = default;
  Backbone(ParamStore& ps, const std::string& name, int in_channels, const BackboneConfig& cfg,
           Rng& rng);

  // [B,C,H,W] -> [B,D',H/downsample,W/downsample]
  Var forward(Tape& t, Var image) const;

 private:
  std::vector<Conv2dLayer> stages_;
};

// Combines the clinical and image feature maps (element-wise sum by default,
// the ablation set otherwise) and refines the result with a two-layer CNN.
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(ParamStore& ps, const std::string& name, int channels, FusionMethod method,
              Rng& rng);

  // Both inputs [B,D',H',W'] -> [B,D',H',W']
  Var forward(Tape& t, Var clinical_map, Var image_map) const;
  // The raw combine step before the refinement CNN (exposed for tests).
  Var combine(Tape& t, Var clinical_map, Var image_map) const;

  FusionMethod method() const { return method_; }

 private:
  FusionMethod method_ = FusionMethod::ElementwiseSum;
  Conv2dLayer project_;  // concat variants only: 2D' -> D'
  Conv2dLayer refine1_, refine2_;
};

}  // namespace mdf
