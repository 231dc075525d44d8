#include <doctest.h>

#include <cmath>
#include <functional>

#include "mdf/rng.hpp"
#include "mdf/tape.hpp"

using namespace mdf;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

Parameter make_param(const Tensor& value) {
  Parameter p;
  p.name = "x";
  p.value = value;
  p.grad = Tensor(value.shape);
  p.velocity = Tensor(value.shape);
  return p;
}

// scalarize an op via a fixed random weighting of its output, then run the
// central-difference check on the input
double fd_for_op(const std::function<Var(Tape&, Var)>& op, const Tensor& point, uint64_t wseed,
                 int samples = 0) {
  Tensor weights;
  {
    Tape t;
    Var out = op(t, t.input(point));
    Rng wr(wseed);
    weights = random_tensor(t.value(out).shape, wr);
  }
  auto f = [&op, weights](const Tensor& x) -> DiffResult {
    Tape t;
    Parameter p = make_param(x);
    Var out = op(t, t.param(p));
    Var loss = t.sum(t.mul(out, t.input(weights)));
    t.backward(loss);
    return {t.value(loss)[0], t.grad_of(p)};
  };
  Rng rng(wseed ^ 0x5eedULL);
  return finite_diff_check(f, point, 1e-4, samples, rng);
}

}  // namespace

TEST_CASE("backward of sum(p) is all ones") {
  Rng rng(1);
  Tensor x = random_tensor({3, 4}, rng);
  Parameter p = make_param(x);
  Tape t;
  Var loss = t.sum(t.param(p));
  t.backward(loss);
  Tensor g = t.grad_of(p);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("backward of sum(p*p)/2 equals p") {
  Rng rng(2);
  Tensor x = random_tensor({5}, rng);
  Parameter p = make_param(x);
  Tape t;
  Var pv = t.param(p);
  Var loss = t.mul_scalar(t.sum(t.mul(pv, pv)), 0.5);
  t.backward(loss);
  Tensor g = t.grad_of(p);
  for (int64_t i = 0; i < g.numel(); ++i) CHECK(g[i] == doctest::Approx(x[i]).epsilon(1e-12));
}

TEST_CASE("second backward without a new forward is an error") {
  Tape t;
  Parameter p = make_param(Tensor({2}, 1.0));
  Var loss = t.sum(t.param(p));
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), std::logic_error);
}

TEST_CASE("non-scalar loss is rejected") {
  Tape t;
  Var v = t.input(Tensor({2, 2}, 1.0));
  CHECK_THROWS_AS(t.backward(v), DimensionError);
}

TEST_CASE("gradient of a detached parameter is an error") {
  Tape t;
  Parameter used = make_param(Tensor({2}, 1.0));
  Parameter detached = make_param(Tensor({2}, 1.0));
  t.backward(t.sum(t.param(used)));
  CHECK_THROWS_AS(t.grad_of(detached), std::logic_error);
}

TEST_CASE("finite differences: conv2d wrt input and kernel") {
  Rng rng(42);
  Tensor x = random_tensor({1, 2, 6, 6}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.conv2d(v, t.input(k), 1, 1); }, x, 10) < 1e-4);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.conv2d(t.input(x), v, 2, 0); }, k, 11) < 1e-4);
}

TEST_CASE("finite differences: deconv2d wrt input and kernel") {
  Rng rng(43);
  Tensor x = random_tensor({1, 3, 3, 3}, rng);
  Tensor k = random_tensor({3, 2, 2, 2}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.deconv2d(v, t.input(k), 2, 0); }, x, 12) < 1e-4);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.deconv2d(t.input(x), v, 2, 0); }, k, 13) < 1e-4);
}

TEST_CASE("finite differences: remaining primitives") {
  Rng rng(44);
  // keep relu inputs away from the kink
  Tensor xr = random_tensor({1, 2, 4, 4}, rng);
  for (auto& v : xr.data) v += v >= 0.0 ? 0.1 : -0.1;
  CHECK(fd_for_op([](Tape& t, Var v) { return t.relu(v); }, xr, 20) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.sigmoid(v); }, random_tensor({9}, rng), 21) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.softmax_rows(v); }, random_tensor({3, 5}, rng), 22) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.exp(v); }, random_tensor({6}, rng), 23) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.maxpool2d(v, 2, 2); },
                  random_tensor({1, 2, 6, 6}, rng), 24) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.roi_pool(v, 1, 0, 5, 4, 3, 3); },
                  random_tensor({1, 2, 6, 6}, rng), 25) < 1e-4);

  Tensor w = random_tensor({4, 6}, rng);
  Tensor b = random_tensor({4}, rng);
  Tensor xl = random_tensor({3, 6}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.linear(v, t.input(w), t.input(b)); }, xl, 26) < 1e-4);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.linear(t.input(xl), v, t.input(b)); }, w, 27) < 1e-4);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.linear(t.input(xl), t.input(w), v); }, b, 28) < 1e-4);

  CHECK(fd_for_op([](Tape& t, Var v) { return t.embedding(v, 1); }, random_tensor({3, 5}, rng), 29) < 1e-4);

  Tensor other = random_tensor({7}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.add(v, t.input(other)); }, random_tensor({7}, rng), 30) < 1e-4);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.mul(v, t.input(other)); }, random_tensor({7}, rng), 31) < 1e-4);
  Tensor cb = random_tensor({2}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.channel_bias(v, t.input(cb)); },
                  random_tensor({1, 2, 3, 3}, rng), 32) < 1e-4);
  Tensor tail = random_tensor({4}, rng);
  CHECK(fd_for_op([&](Tape& t, Var v) { return t.concat({v, t.input(tail)}, 0); },
                  random_tensor({5}, rng), 33) < 1e-4);
  CHECK(fd_for_op([](Tape& t, Var v) { return t.gather(v, {0, 2, 2, 5}); }, random_tensor({6}, rng), 34) < 1e-4);
}

TEST_CASE("finite differences: fused losses") {
  Rng rng(45);
  Tensor target = random_tensor({8}, rng);
  // keep differences away from the smooth-l1 kink at beta
  Tensor pred = target;
  for (auto& v : pred.data) v += 0.8;
  auto sl1 = [&](const Tensor& x) -> DiffResult {
    Tape t;
    Parameter p = make_param(x);
    Var loss = t.smooth_l1(t.param(p), t.input(target), 1.0 / 9.0);
    t.backward(loss);
    return {t.value(loss)[0], t.grad_of(p)};
  };
  Rng fdr(900);
  CHECK(finite_diff_check(sl1, pred, 1e-4, 0, fdr) < 1e-4);

  std::vector<int> labels = {1, 0, 3};
  auto xent = [&](const Tensor& x) -> DiffResult {
    Tape t;
    Parameter p = make_param(x);
    Var loss = t.softmax_xent_mean(t.param(p), labels);
    t.backward(loss);
    return {t.value(loss)[0], t.grad_of(p)};
  };
  CHECK(finite_diff_check(xent, random_tensor({3, 4}, rng), 1e-4, 0, fdr) < 1e-4);

  Tensor bt({6});
  for (auto& v : bt.data) v = rng.coin() ? 1.0 : 0.0;
  auto bce = [&](const Tensor& x) -> DiffResult {
    Tape t;
    Parameter p = make_param(x);
    Var loss = t.bce_logits_mean(t.param(p), t.input(bt));
    t.backward(loss);
    return {t.value(loss)[0], t.grad_of(p)};
  };
  CHECK(finite_diff_check(bce, random_tensor({6}, rng, -2.0, 2.0), 1e-4, 0, fdr) < 1e-4);
}

TEST_CASE("finite_diff_check on exact linear map is near machine precision") {
  auto f = [](const Tensor& x) -> DiffResult {
    Tape t;
    Parameter p = make_param(x);
    Var loss = t.sum(t.param(p));
    t.backward(loss);
    return {t.value(loss)[0], t.grad_of(p)};
  };
  Rng rng(9);
  Tensor point = random_tensor({12}, rng);
  CHECK(finite_diff_check(f, point, 1e-4, 0, rng) <= 1e-8);
}

TEST_CASE("sgd step with momentum updates parameters deterministically") {
  ParamStore ps;
  Parameter& p = ps.create("w", {2});
  p.value.data = {1.0, -1.0};
  p.grad.data = {0.5, 0.25};
  ps.sgd_step(0.1, 0.9, 0.0);
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.05));
  CHECK(p.value[1] == doctest::Approx(-1.0 - 0.025));
  // second step folds the velocity in
  p.grad.data = {0.5, 0.25};
  ps.sgd_step(0.1, 0.9, 0.0);
  CHECK(p.value[0] == doctest::Approx(0.95 - 0.1 * (0.9 * 0.5 + 0.5)));
}

TEST_CASE("gradient clipping rescales the global norm") {
  ParamStore ps;
  Parameter& p = ps.create("w", {2});
  p.value.data = {0.0, 0.0};
  p.grad.data = {3.0, 4.0};  // norm 5
  ps.sgd_step(1.0, 0.0, 1.0);
  CHECK(std::sqrt(p.value[0] * p.value[0] + p.value[1] * p.value[1]) == doctest::Approx(1.0));
}
