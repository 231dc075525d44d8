#include "mdf/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mdf/classes.hpp"

namespace fs = std::filesystem;

namespace mdf {

namespace {

constexpr int kTexFilledRect = 0;
constexpr int kTexStripes = 1;
constexpr int kTexDisc = 2;  // shared by the ambiguous pair
constexpr int kTexFrame = 3;

constexpr const char* kIntime = "2150-01-01 08:00:00";
constexpr const char* kOuttime = "2150-01-01 20:00:00";
constexpr const char* kStudyTime = "2150-01-01 10:00:00";

std::string pad_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%05d", prefix, i);
  return buf;
}

bool boxes_overlap(const Box& a, const Box& b, double margin) {
  return a.x - margin < b.x2() && b.x - margin < a.x2() && a.y - margin < b.y2() &&
         b.y - margin < a.y2();
}

}  // namespace

int texture_of_class(int cls) {
  switch (cls) {
    case kEnlargedCardiacSilhouette: return kTexFilledRect;
    case kAtelectasis: return kTexStripes;
    case kConsolidation: return kTexDisc;
    case kPleuralAbnormality: return kTexFrame;
    case kPulmonaryEdema: return kTexDisc;
    default: throw std::invalid_argument("unknown class id " + std::to_string(cls));
  }
}

void render_blob(PgmImage& img, int texture, const Box& box) {
  const int x0 = static_cast<int>(box.x), y0 = static_cast<int>(box.y);
  const int x1 = static_cast<int>(box.x2()), y1 = static_cast<int>(box.y2());
  const double cx = box.cx(), cy = box.cy();
  const double rx = 0.5 * box.w, ry = 0.5 * box.h;
  for (int y = std::max(0, y0); y < std::min(img.h, y1); ++y)
    for (int x = std::max(0, x0); x < std::min(img.w, x1); ++x) {
      switch (texture) {
        case kTexFilledRect:
          img.at(y, x) = 230;
          break;
        case kTexStripes:
          img.at(y, x) = ((y - y0) / 3) % 2 == 0 ? 220 : 70;
          break;
        case kTexDisc: {
          const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
          if (dx * dx + dy * dy <= 1.0) img.at(y, x) = 160;
          break;
        }
        case kTexFrame: {
          const bool border = x - x0 < 3 || x1 - 1 - x < 3 || y - y0 < 3 || y1 - 1 - y < 3;
          img.at(y, x) = border ? 225 : 95;
          break;
        }
        default:
          throw std::invalid_argument("unknown texture id " + std::to_string(texture));
      }
    }
}

void coupled_vitals(int resolved_cls, Rng& rng, double* temperature, double* resprate) {
  if (resolved_cls == kConsolidation) {
    *temperature = rng.uniform(102.0, 104.0);
    *resprate = rng.uniform(24.0, 30.0);
  } else if (resolved_cls == kPulmonaryEdema) {
    *temperature = rng.uniform(97.0, 98.8);
    *resprate = rng.uniform(12.0, 17.0);
  } else {
    throw std::invalid_argument("coupled_vitals expects one of the ambiguous classes");
  }
}

SynthResult synth_generate(const SynthConfig& config, uint64_t seed, const std::string& out_dir) {
  if (config.train_instances < 1 || config.test_instances < 0 || config.image_size < 16)
    throw std::invalid_argument("invalid synthetic dataset config");
  if (config.coupling_kappa < 0.0 || config.coupling_kappa > 1.0)
    throw std::invalid_argument("coupling_kappa must lie in [0,1]");

  fs::create_directories(fs::path(out_dir) / "images");
  Rng rng(seed);
  SynthResult res;
  const int total = config.train_instances + config.test_instances;
  const int S = config.image_size;
  const double min_side = 0.18 * S, max_side = 0.40 * S;
  const std::array<int, 3> easy_classes = {kEnlargedCardiacSilhouette, kAtelectasis,
                                           kPleuralAbnormality};

  for (int i = 0; i < total; ++i) {
    Rng irng = rng.fork("instance" + std::to_string(i));
    const std::string subject = pad_id("p", i), stay = pad_id("s", i), study = pad_id("st", i),
                      dicom = pad_id("d", i);

    PgmImage img;
    img.w = img.h = S;
    img.pixels.resize(static_cast<size_t>(S) * S);
    for (auto& px : img.pixels) px = static_cast<uint8_t>(irng.uniform_int(0, 25));

    // choose blob classes; at most one ambiguous blob per image
    std::vector<int> classes;
    int ambiguous_cls = -1;
    if (irng.coin(config.ambiguous_prob)) {
      ambiguous_cls = irng.coin() ? kConsolidation : kPulmonaryEdema;
      classes.push_back(ambiguous_cls);
      const int extra = irng.uniform_int(0, 2);
      for (int e = 0; e < extra; ++e)
        classes.push_back(easy_classes[static_cast<size_t>(irng.uniform_int(0, 2))]);
    } else {
      const int n = irng.uniform_int(1, 3);
      for (int e = 0; e < n; ++e)
        classes.push_back(easy_classes[static_cast<size_t>(irng.uniform_int(0, 2))]);
    }

    // place boxes without overlap; crowded draws are retried, then skipped
    std::vector<Box> placed;
    std::vector<int> kept_classes;
    for (int cls : classes) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        const double w = std::floor(irng.uniform(min_side, max_side));
        const double h = std::floor(irng.uniform(min_side, max_side));
        const double x = std::floor(irng.uniform(2.0, S - 2.0 - w));
        const double y = std::floor(irng.uniform(2.0, S - 2.0 - h));
        Box b{x, y, w, h};
        bool clash = false;
        for (const Box& other : placed)
          if (boxes_overlap(b, other, 2.0)) {
            clash = true;
            break;
          }
        if (!clash) {
          placed.push_back(b);
          kept_classes.push_back(cls);
          break;
        }
      }
    }
    if (placed.empty()) {
      // guaranteed minimum: one centered blob
      const double w = std::floor(0.3 * S), h = std::floor(0.3 * S);
      placed.push_back(Box{std::floor((S - w) / 2), std::floor((S - h) / 2), w, h});
      kept_classes.push_back(classes[0]);
    }
    if (ambiguous_cls >= 0 &&
        std::find(kept_classes.begin(), kept_classes.end(), ambiguous_cls) == kept_classes.end())
      ambiguous_cls = -1;  // the ambiguous blob did not fit

    for (size_t bidx = 0; bidx < placed.size(); ++bidx)
      render_blob(img, texture_of_class(kept_classes[bidx]), placed[bidx]);
    write_pgm((fs::path(out_dir) / "images" / (dicom + ".pgm")).string(), img);

    // clinical record: neutral base draws, then the coupled vitals
    TriageRow tr;
    tr.stay_id = stay;
    tr.temperature = irng.uniform(97.5, 99.5);
    tr.heartrate = irng.uniform(60.0, 100.0);
    tr.resprate = irng.uniform(12.0, 20.0);
    tr.o2sat = irng.uniform(94.0, 100.0);
    tr.sbp = irng.uniform(100.0, 140.0);
    tr.dbp = irng.uniform(60.0, 90.0);
    tr.pain = irng.uniform_int(0, 10);
    tr.acuity = irng.uniform_int(1, 5);
    const double age = irng.uniform_int(20, 90);
    const std::string gender = irng.coin() ? "F" : "M";
    if (ambiguous_cls >= 0) {
      const bool informative = irng.uniform() < config.coupling_kappa;
      const int coin = informative
                           ? ambiguous_cls
                           : (irng.coin() ? kConsolidation : kPulmonaryEdema);
      coupled_vitals(coin, irng, &tr.temperature, &tr.resprate);
    }

    res.tables.patients.push_back({subject, age, gender});
    res.tables.edstays.push_back({subject, stay, kIntime, kOuttime});
    res.tables.triage.push_back(tr);
    res.tables.cxr_metadata.push_back({dicom, study, subject, kStudyTime, "AP"});
    for (size_t bidx = 0; bidx < placed.size(); ++bidx)
      res.tables.annotations.push_back({dicom,
                                        kClassNames[static_cast<size_t>(kept_classes[bidx])],
                                        placed[bidx].x, placed[bidx].y, placed[bidx].w,
                                        placed[bidx].h});

    if (i < config.train_instances)
      res.train_dicoms.push_back(dicom);
    else
      res.test_dicoms.push_back(dicom);
  }

  res.tables.save(out_dir);
  return res;
}

}  // namespace mdf
