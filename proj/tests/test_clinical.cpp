#include <doctest.h>

#include <cmath>

#include "mdf/clinical.hpp"

using namespace mdf;

namespace {

ClinicalRecord sample_record(Rng& rng) {
  ClinicalRecord r;
  r.temperature = rng.uniform(96.0, 104.0);
  r.heartrate = rng.uniform(50.0, 120.0);
  r.resprate = rng.uniform(10.0, 30.0);
  r.o2sat = rng.uniform(90.0, 100.0);
  r.sbp = rng.uniform(90.0, 160.0);
  r.dbp = rng.uniform(50.0, 100.0);
  r.pain = rng.uniform_int(0, 10);
  r.acuity = rng.uniform_int(1, 5);
  r.age = rng.uniform_int(18, 95);
  r.gender = rng.coin() ? "M" : "F";
  return r;
}

}  // namespace

TEST_CASE("record range invariants") {
  Rng rng(1);
  ClinicalRecord r = sample_record(rng);
  CHECK_NOTHROW(r.validate());
  ClinicalRecord bad = r;
  bad.pain = 11;
  CHECK_THROWS(bad.validate());
  bad = r;
  bad.acuity = 0;
  CHECK_THROWS(bad.validate());
  bad = r;
  bad.gender = "X";
  CHECK_THROWS(bad.validate());
}

TEST_CASE("fit_normalization degenerate and symmetric cases") {
  Rng rng(2);
  ClinicalRecord r = sample_record(rng);
  NormalizationStats single = fit_normalization({r}, kNumericalFeatures);
  for (size_t i = 0; i < kNumericalFeatures.size(); ++i) {
    CHECK(single.stddev[i] == doctest::Approx(1e-8));
    CHECK(single.z(i, r.numerical(kNumericalFeatures[i])) == doctest::Approx(0.0));
  }
  ClinicalRecord a = r, b = r;
  a.temperature = 98.0;
  b.temperature = 102.0;
  NormalizationStats sym = fit_normalization({a, b}, {"temperature"});
  CHECK(sym.mean[0] == doctest::Approx(100.0));
  CHECK_THROWS(fit_normalization({}, kNumericalFeatures));
}

TEST_CASE("fit_normalization matches a two-pass oracle") {
  Rng rng(3);
  std::vector<ClinicalRecord> recs;
  for (int i = 0; i < 37; ++i) recs.push_back(sample_record(rng));
  NormalizationStats s = fit_normalization(recs, kNumericalFeatures);
  for (size_t f = 0; f < kNumericalFeatures.size(); ++f) {
    double mean = 0.0;
    for (const auto& r : recs) mean += r.numerical(kNumericalFeatures[f]);
    mean /= recs.size();
    double var = 0.0;
    for (const auto& r : recs) {
      const double d = r.numerical(kNumericalFeatures[f]) - mean;
      var += d * d;
    }
    var /= recs.size();
    CHECK(std::fabs(s.mean[f] - mean) < 1e-12);
    CHECK(std::fabs(s.stddev[f] - std::max(std::sqrt(var), 1e-8)) < 1e-12);
  }
}

TEST_CASE("encode_clinical layout: 9 z-scored numericals then a 55-wide embedding") {
  ParamStore ps;
  Rng rng(4);
  ClinicalEncoder enc(ps, all_clinical_features(), 55, rng);
  CHECK(enc.output_width() == 64);

  std::vector<ClinicalRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(sample_record(rng));
  NormalizationStats stats = fit_normalization(recs, kNumericalFeatures);

  // a record equal to the training mean, zeroed embedding table -> zeros
  ClinicalRecord mean_rec;
  for (size_t i = 0; i < kNumericalFeatures.size(); ++i)
    mean_rec.set_numerical(kNumericalFeatures[i], stats.mean[i]);
  mean_rec.gender = "M";
  ps.at("clinical.gender_embed.table").value.fill(0.0);
  std::vector<double> z = enc.encode(mean_rec, stats);
  REQUIRE(z.size() == 64);
  for (size_t i = 0; i < 9; ++i) CHECK(z[i] == doctest::Approx(0.0).epsilon(1e-9));

  // gender flips change only the trailing 55 entries
  Rng rng2(5);
  ParamStore ps2;
  ClinicalEncoder enc2(ps2, all_clinical_features(), 55, rng2);
  ClinicalRecord m = sample_record(rng2), f = m;
  m.gender = "M";
  f.gender = "F";
  std::vector<double> zm = enc2.encode(m, stats), zf = enc2.encode(f, stats);
  for (size_t i = 0; i < 9; ++i) CHECK(zm[i] == zf[i]);
  bool tail_differs = false;
  for (size_t i = 9; i < 64; ++i) tail_differs |= zm[i] != zf[i];
  CHECK(tail_differs);
}

TEST_CASE("encoder rejects unknown categories") {
  ParamStore ps;
  Rng rng(6);
  ClinicalEncoder enc(ps, all_clinical_features(), 55, rng);
  std::vector<ClinicalRecord> recs = {sample_record(rng)};
  NormalizationStats stats = fit_normalization(recs, kNumericalFeatures);
  ClinicalRecord bad = recs[0];
  bad.gender = "unknown";
  CHECK_THROWS(enc.encode(bad, stats));
}

TEST_CASE("feature subsets shrink the vector") {
  ParamStore ps;
  Rng rng(7);
  ClinicalEncoder enc(ps, {"gender", "heartrate"}, 55, rng);
  CHECK(enc.output_width() == 56);
  ParamStore ps2;
  ClinicalEncoder no_gender(ps2, {"heartrate", "temperature"}, 55, rng);
  CHECK(no_gender.output_width() == 2);
}

TEST_CASE("spatialise output sizes follow 2^e") {
  Rng rng(8);
  for (int e : {3, 6}) {
    ParamStore ps;
    SpatialisationStack stack(ps, "spa", 64, e, 8, 1, rng);
    Tape t;
    Tensor z({64});
    for (auto& v : z.data) v = rng.uniform(-1.0, 1.0);
    Var out = stack.forward(t, t.input(z));
    CHECK(t.value(out).shape == std::vector<int>({1, 1, 1 << e, 1 << e}));
  }
}

TEST_CASE("spatialise of the zero vector with zero biases is zero") {
  Rng rng(9);
  ParamStore ps;
  SpatialisationStack stack(ps, "spa", 16, 4, 8, 1, rng);
  for (auto& p : ps.all())
    if (p->name.ends_with(".b")) p->value.fill(0.0);
  Tape t;
  Var out = stack.forward(t, t.input(Tensor({16}, 0.0)));
  for (int64_t i = 0; i < t.value(out).numel(); ++i) CHECK(t.value(out)[i] == 0.0);
}

TEST_CASE("shape chain: record -> vector -> pseudo-image matches the input size") {
  Rng rng(10);
  for (int e : {4, 5}) {
    ParamStore ps;
    ClinicalEncoder enc(ps, all_clinical_features(), 55, rng);
    SpatialisationStack stack(ps, "spa", enc.output_width(), e, 8, 1, rng);
    std::vector<ClinicalRecord> recs = {sample_record(rng), sample_record(rng)};
    NormalizationStats stats = fit_normalization(recs, kNumericalFeatures);
    Tape t;
    Var z = enc.forward(t, recs[0], stats);
    Var img = stack.forward(t, z);
    CHECK(t.value(img).shape == std::vector<int>({1, 1, 1 << e, 1 << e}));
  }
}

TEST_CASE("gradients flow through encode and spatialise to the embedding and kernels") {
  Rng rng(11);
  ParamStore ps;
  ClinicalEncoder enc(ps, all_clinical_features(), 7, rng);  // narrow embed keeps it fast
  SpatialisationStack stack(ps, "spa", enc.output_width(), 3, 4, 1, rng);
  std::vector<ClinicalRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(sample_record(rng));
  NormalizationStats stats = fit_normalization(recs, kNumericalFeatures);
  Tensor weights;
  {
    Tape t;
    Var out = stack.forward(t, enc.forward(t, recs[0], stats));
    Rng wr(77);
    weights = Tensor(t.value(out).shape);
    for (auto& v : weights.data) v = wr.uniform(-1.0, 1.0);
  }
  auto loss = [&]() {
    Tape t;
    Var out = stack.forward(t, enc.forward(t, recs[0], stats));
    return t.value(t.sum(t.mul(out, t.input(weights))))[0];
  };
  auto loss_backward = [&]() {
    Tape t;
    Var out = stack.forward(t, enc.forward(t, recs[0], stats));
    t.backward(t.sum(t.mul(out, t.input(weights))));
  };
  Rng fdr(12);
  CHECK(finite_diff_check_params(loss, loss_backward, ps, 1e-4, 60, fdr) < 1e-4);
  // the embedding table received gradient
  ps.zero_grads();
  loss_backward();
  double embed_norm = 0.0;
  for (double g : ps.at("clinical.gender_embed.table").grad.data) embed_norm += g * g;
  CHECK(embed_norm > 0.0);
}

TEST_CASE("permuting numerical features changes the spatialised output") {
  Rng rng(13);
  ParamStore ps;
  ClinicalEncoder enc(ps, all_clinical_features(), 7, rng);
  SpatialisationStack stack(ps, "spa", enc.output_width(), 3, 4, 1, rng);
  std::vector<ClinicalRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(sample_record(rng));
  NormalizationStats stats = fit_normalization(recs, kNumericalFeatures);
  ClinicalRecord a = recs[0];
  ClinicalRecord b = a;
  // swap two z-scores by swapping raw values through the inverse transform
  b.temperature = stats.mean[0] + (a.heartrate - stats.mean[1]) * stats.stddev[0] / stats.stddev[1];
  b.heartrate = stats.mean[1] + (a.temperature - stats.mean[0]) * stats.stddev[1] / stats.stddev[0];
  Tape t;
  Var oa = stack.forward(t, enc.forward(t, a, stats));
  Var ob = stack.forward(t, enc.forward(t, b, stats));
  double diff = 0.0;
  for (int64_t i = 0; i < t.value(oa).numel(); ++i)
    diff = std::max(diff, std::fabs(t.value(oa)[i] - t.value(ob)[i]));
  CHECK(diff > 1e-9);
}

TEST_CASE("spatialisation stack validates the input width") {
  Rng rng(14);
  ParamStore ps;
  SpatialisationStack stack(ps, "spa", 64, 3, 8, 1, rng);
  Tape t;
  CHECK_THROWS_AS(stack.forward(t, t.input(Tensor({63}, 0.5))), DimensionError);
}
