#include <doctest.h>

#include <cmath>

#include "mdf/backbone.hpp"

using namespace mdf;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_CASE("backbone reaches 16x16x64 from a 512 input at the full stride schedule") {
  Rng rng(1);
  ParamStore ps;
  BackboneConfig cfg;
  cfg.channels = {8, 16, 32, 64, 64};
  cfg.strides = {2, 2, 2, 2, 2};
  Backbone bb(ps, "bb", 1, cfg, rng);
  Tape t;
  Var out = bb.forward(t, t.input(Tensor({1, 1, 512, 512}, 0.1)));
  CHECK(t.value(out).shape == std::vector<int>({1, 64, 16, 16}));
}

TEST_CASE("desk config downsamples 64 -> 8") {
  Rng rng(2);
  ParamStore ps;
  BackboneConfig cfg;  // default strides {2,2,2,1,1}
  CHECK(cfg.downsample() == 8);
  Backbone bb(ps, "bb", 1, cfg, rng);
  Tape t;
  Var out = bb.forward(t, t.input(Tensor({1, 1, 64, 64}, 0.3)));
  CHECK(t.value(out).shape == std::vector<int>({1, 64, 8, 8}));
}

TEST_CASE("zero input with zero biases gives zero output") {
  Rng rng(3);
  ParamStore ps;
  Backbone bb(ps, "bb", 1, BackboneConfig{}, rng);
  for (auto& p : ps.all())
    if (p->name.ends_with(".b")) p->value.fill(0.0);
  Tape t;
  Var out = bb.forward(t, t.input(Tensor({1, 1, 32, 32}, 0.0)));
  for (int64_t i = 0; i < t.value(out).numel(); ++i) CHECK(t.value(out)[i] == 0.0);
}

TEST_CASE("every fusion variant maps two D' maps to one D' map") {
  Rng rng(4);
  for (FusionMethod m : {FusionMethod::ElementwiseSum, FusionMethod::ConcatLinear,
                         FusionMethod::ConcatConv, FusionMethod::Hadamard}) {
    for (int trial = 0; trial < 3; ++trial) {
      const int d = 4 + static_cast<int>(rng.next_u64() % 8);
      const int hw = 3 + static_cast<int>(rng.next_u64() % 6);
      ParamStore ps;
      FusionBlock fb(ps, "fuse", d, m, rng);
      Tape t;
      Var a = t.input(random_tensor({1, d, hw, hw}, rng));
      Var b = t.input(random_tensor({1, d, hw, hw}, rng));
      Var out = fb.forward(t, a, b);
      CHECK(t.value(out).shape == std::vector<int>({1, d, hw, hw}));
    }
  }
}

TEST_CASE("element-wise sum combine is symmetric in its arguments") {
  Rng rng(5);
  ParamStore ps;
  FusionBlock fb(ps, "fuse", 6, FusionMethod::ElementwiseSum, rng);
  Tape t;
  Tensor ta = random_tensor({1, 6, 4, 4}, rng), tb = random_tensor({1, 6, 4, 4}, rng);
  Var ab = fb.combine(t, t.input(ta), t.input(tb));
  Var ba = fb.combine(t, t.input(tb), t.input(ta));
  for (int64_t i = 0; i < t.value(ab).numel(); ++i) CHECK(t.value(ab)[i] == t.value(ba)[i]);
}

TEST_CASE("hadamard combine with an all-ones clinical map returns the image map") {
  Rng rng(6);
  ParamStore ps;
  FusionBlock fb(ps, "fuse", 5, FusionMethod::Hadamard, rng);
  Tape t;
  Tensor img = random_tensor({1, 5, 3, 3}, rng);
  Var out = fb.combine(t, t.input(Tensor({1, 5, 3, 3}, 1.0)), t.input(img));
  for (int64_t i = 0; i < img.numel(); ++i) CHECK(t.value(out)[i] == img[i]);
}

TEST_CASE("concat variants stack to 2D' channels before projecting back") {
  Rng rng(7);
  ParamStore ps;
  FusionBlock fb(ps, "fuse", 64, FusionMethod::ConcatConv, rng);
  CHECK(ps.at("fuse.project.w").value.shape == std::vector<int>({64, 128, 3, 3}));
  ParamStore ps2;
  FusionBlock fl(ps2, "fuse", 64, FusionMethod::ConcatLinear, rng);
  CHECK(ps2.at("fuse.project.w").value.shape == std::vector<int>({64, 128, 1, 1}));
  Tape t;
  Var a = t.input(random_tensor({1, 64, 2, 2}, rng));
  Var b = t.input(random_tensor({1, 64, 2, 2}, rng));
  CHECK(t.value(fb.combine(t, a, b)).shape == std::vector<int>({1, 64, 2, 2}));
}

TEST_CASE("fusion mismatched shapes are rejected") {
  Rng rng(8);
  ParamStore ps;
  FusionBlock fb(ps, "fuse", 4, FusionMethod::ElementwiseSum, rng);
  Tape t;
  Var a = t.input(random_tensor({1, 4, 3, 3}, rng));
  Var b = t.input(random_tensor({1, 4, 4, 4}, rng));
  CHECK_THROWS_AS(fb.forward(t, a, b), DimensionError);
}

TEST_CASE("gradients reach both modal branches through every fusion variant") {
  Rng rng(9);
  for (FusionMethod m : {FusionMethod::ElementwiseSum, FusionMethod::ConcatLinear,
                         FusionMethod::ConcatConv, FusionMethod::Hadamard}) {
    ParamStore ps;
    FusionBlock fb(ps, "fuse", 4, m, rng);
    Tape t;
    Parameter pa, pb;
    pa.name = "a";
    pa.value = random_tensor({1, 4, 3, 3}, rng);
    pa.grad = Tensor(pa.value.shape);
    pa.velocity = Tensor(pa.value.shape);
    pb = pa;
    pb.name = "b";
    pb.value = random_tensor({1, 4, 3, 3}, rng);
    Var out = fb.forward(t, t.param(pa), t.param(pb));
    t.backward(t.sum(out));
    double na = 0.0, nb = 0.0;
    for (double g : t.grad_of(pa).data) na += g * g;
    for (double g : t.grad_of(pb).data) nb += g * g;
    CHECK(na > 0.0);
    CHECK(nb > 0.0);
  }
}
