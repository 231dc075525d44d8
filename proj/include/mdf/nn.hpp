#pragma once

#include <string>

#include "mdf/rng.hpp"
#include "mdf/tape.hpp"

namespace mdf {

// Uniform in +-sqrt(6/(fan_in+fan_out)); biases stay zero.
void glorot_fill(Tensor& t, int fan_in, int fan_out, Rng& rng);

struct Conv2dLayer {
  Parameter* w = nullptr;  // [Cout,Cin,kh,kw]
  Parameter* b = nullptr;  // [Cout]
  int stride = 1, pad = 0;

  static Conv2dLayer create(ParamStore& ps, const std::string& name, int cin, int cout,
                            int k, int stride, int pad, Rng& rng);
  Var forward(Tape& t, Var x) const { return t.channel_bias(t.conv2d(x, t.param(*w), stride, pad), t.param(*b)); }
};

struct Deconv2dLayer {
  Parameter* w = nullptr;  // [Cin,Cout,kh,kw]
  Parameter* b = nullptr;  // [Cout]
  int stride = 1, pad = 0;

  static Deconv2dLayer create(ParamStore& ps, const std::string& name, int cin, int cout,
                              int k, int stride, int pad, Rng& rng);
  Var forward(Tape& t, Var x) const { return t.channel_bias(t.deconv2d(x, t.param(*w), stride, pad), t.param(*b)); }
};

struct LinearLayer {
  Parameter* w = nullptr;  // [Out,In]
  Parameter* b = nullptr;  // [Out]

  static LinearLayer create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);
  Var forward(Tape& t, Var x) const { return t.linear(x, t.param(*w), t.param(*b)); }
};

struct EmbeddingLayer {
  Parameter* table = nullptr;  // [V,E]

  static EmbeddingLayer create(ParamStore& ps, const std::string& name, int vocab, int width,
                               Rng& rng);
  Var forward(Tape& t, int row) const { return t.embedding(t.param(*table), row); }
};

}  // namespace mdf
