#include "mdf/backbone.hpp"

namespace mdf {

Backbone::Backbone(ParamStore& ps, const std::string& name, int in_channels,
                   const BackboneConfig& cfg, Rng& rng) {
  int cin = in_channels;
  for (size_t i = 0; i < cfg.channels.size(); ++i) {
    stages_.push_back(Conv2dLayer::create(ps, name + ".stage" + std::to_string(i), cin,
                                          cfg.channels[i], 3, cfg.strides[i], 1, rng));
    cin = cfg.channels[i];
  }
}

Var Backbone::forward(Tape& t, Var image) const {
  Var x = image;
  for (const auto& stage : stages_) x = t.relu(stage.forward(t, x));
  return x;
}

FusionBlock::FusionBlock(ParamStore& ps, const std::string& name, int channels,
                         FusionMethod method, Rng& rng)
    : method_(method) {
  if (method == FusionMethod::ConcatLinear)
    project_ = Conv2dLayer::create(ps, name + ".project", 2 * channels, channels, 1, 1, 0, rng);
  else if (method == FusionMethod::ConcatConv)
    project_ = Conv2dLayer::create(ps, name + ".project", 2 * channels, channels, 3, 1, 1, rng);
  refine1_ = Conv2dLayer::create(ps, name + ".refine1", channels, channels, 3, 1, 1, rng);
  refine2_ = Conv2dLayer::create(ps, name + ".refine2", channels, channels, 3, 1, 1, rng);
}

Var FusionBlock::combine(Tape& t, Var clinical_map, Var image_map) const {
  const Tensor& a = t.value(clinical_map);
  const Tensor& b = t.value(image_map);
  if (!a.same_shape(b))
    throw DimensionError("fusion inputs must share shape, got " + shape_str(a.shape) + " vs " +
                         shape_str(b.shape));
  switch (method_) {
    case FusionMethod::ElementwiseSum:
      return t.add(clinical_map, image_map);
    case FusionMethod::Hadamard:
      return t.mul(clinical_map, image_map);
    case FusionMethod::ConcatLinear:
    case FusionMethod::ConcatConv:
      return project_.forward(t, t.concat({clinical_map, image_map}, 1));
  }
  throw std::logic_error("unknown fusion method");
}

Var FusionBlock::forward(Tape& t, Var clinical_map, Var image_map) const {
  Var z = combine(t, clinical_map, image_map);
  z = t.relu(refine1_.forward(t, z));
  z = t.relu(refine2_.forward(t, z));
  return z;
}

}  // namespace mdf
