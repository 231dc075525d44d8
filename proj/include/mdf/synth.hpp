#pragma once

#include <string>

#include "mdf/data.hpp"
#include "mdf/rng.hpp"

namespace mdf {

// Seeded synthetic multimodal dataset. Each image holds 1-3 non-overlapping
// textured blobs, one per ground-truth box. Consolidation and Pulmonary Edema
// render through the same texture function, so their pixels are identical by
// construction and only the clinical record can tell them apart. An image
// carries at most one such ambiguous blob.
//
// coupling_kappa controls how often the coupled vitals (temperature,
// resprate) are drawn from the resolved class's range instead of from a fresh
// fair coin's range: 1 makes them fully informative, 0 statistically
// independent of the label.
struct SynthConfig {
  int train_instances = 800;
  int test_instances = 200;
  int image_size = 64;
  double coupling_kappa = 1.0;
  double ambiguous_prob = 0.55;  // chance an image contains the ambiguous pair blob
};

struct SynthResult {
  SourceTables tables;
  std::vector<std::string> train_dicoms;
  std::vector<std::string> test_dicoms;
};

// Writes tables (csv) and images/<dicom_id>.pgm under out_dir; returns the
// tables and the split membership. Deterministic per (config, seed).
SynthResult synth_generate(const SynthConfig& config, uint64_t seed, const std::string& out_dir);

// Texture ids; the ambiguous class pair shares one.
int texture_of_class(int cls);

// Renders one blob into the image; the pattern is a pure function of the
// geometry and texture id, never of the class label.
void render_blob(PgmImage& img, int texture, const Box& box);

// Class-conditional vitals ranges used by the coupling (exposed for tests).
void coupled_vitals(int resolved_cls, Rng& rng, double* temperature, double* resprate);

}  // namespace mdf
