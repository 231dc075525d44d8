#pragma once

#include <array>
#include <string>

namespace mdf {

// Abnormality classes, index order fixed for checkpoints and reports.
inline constexpr int kNumClasses = 5;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {
    "Enlarged Cardiac Silhouette", "Atelectasis", "Consolidation",
    "Pleural Abnormality", "Pulmonary Edema"};

enum ClassId : int {
  kEnlargedCardiacSilhouette = 0,
  kAtelectasis = 1,
  kConsolidation = 2,
  kPleuralAbnormality = 3,
  kPulmonaryEdema = 4,
};

// Consolidation and Pulmonary Edema share one rendered appearance in the
// synthetic data; only clinical context separates them.
inline constexpr int kAmbiguousClassA = kConsolidation;
inline constexpr int kAmbiguousClassB = kPulmonaryEdema;

int class_id_from_name(const std::string& name);  // -1 when unknown

}  // namespace mdf
