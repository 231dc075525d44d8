#include "mdf/nn.hpp"

#include <cmath>

namespace mdf {

void glorot_fill(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
}

Conv2dLayer Conv2dLayer::create(ParamStore& ps, const std::string& name, int cin, int cout,
                                int k, int stride, int pad, Rng& rng) {
  Conv2dLayer l;
  l.w = &ps.create(name + ".w", {cout, cin, k, k});
  l.b = &ps.create(name + ".b", {cout});
  l.stride = stride;
  l.pad = pad;
  glorot_fill(l.w->value, cin * k * k, cout * k * k, rng);
  return l;
}

Deconv2dLayer Deconv2dLayer::create(ParamStore& ps, const std::string& name, int cin, int cout,
                                    int k, int stride, int pad, Rng& rng) {
  Deconv2dLayer l;
  l.w = &ps.create(name + ".w", {cin, cout, k, k});
  l.b = &ps.create(name + ".b", {cout});
  l.stride = stride;
  l.pad = pad;
  glorot_fill(l.w->value, cin * k * k, cout * k * k, rng);
  return l;
}

LinearLayer LinearLayer::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
  LinearLayer l;
  l.w = &ps.create(name + ".w", {out, in});
  l.b = &ps.create(name + ".b", {out});
  glorot_fill(l.w->value, in, out, rng);
  return l;
}

EmbeddingLayer EmbeddingLayer::create(ParamStore& ps, const std::string& name, int vocab,
                                      int width, Rng& rng) {
  EmbeddingLayer l;
  l.table = &ps.create(name + ".table", {vocab, width});
  glorot_fill(l.table->value, vocab, width, rng);
  return l;
}

}  // namespace mdf
