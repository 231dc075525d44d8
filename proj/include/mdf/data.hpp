#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdf/boxes.hpp"
#include "mdf/clinical.hpp"

namespace mdf {

struct ValidationError : std::runtime_error {
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// --- plain file formats -----------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const;  // -1 when absent
};
CsvTable read_csv(const std::string& path);
void write_csv(const std::string& path, const CsvTable& table);

// 8-bit binary PGM (P5).
struct PgmImage {
  int w = 0, h = 0;
  std::vector<uint8_t> pixels;
  uint8_t& at(int y, int x) { return pixels[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return pixels[static_cast<size_t>(y) * w + x]; }
};
PgmImage read_pgm(const std::string& path);
void write_pgm(const std::string& path, const PgmImage& img);
Tensor image_to_tensor(const PgmImage& img);  // [1,1,H,W], values / 255

// "YYYY-MM-DD HH:MM:SS" -> seconds since a fixed epoch (no timezone handling);
// throws ValidationError on malformed input.
int64_t parse_datetime(const std::string& s);

// --- source tables ----------------------------------------------------------
// CSV header contracts (documented in the README):
//   patients.csv:      subject_id,age,gender
//   edstays.csv:       subject_id,stay_id,intime,outtime
//   triage.csv:        stay_id,temperature,heartrate,resprate,o2sat,sbp,dbp,pain,acuity
//   cxr_metadata.csv:  dicom_id,study_id,subject_id,study_datetime,view
//   annotations.csv:   dicom_id,label,x,y,w,h

struct PatientsRow {
  std::string subject_id;
  double age = 0.0;
  std::string gender;
};
struct EdStayRow {
  std::string subject_id, stay_id;
  std::string intime, outtime;
};
struct TriageRow {
  std::string stay_id;
  double temperature = 0, heartrate = 0, resprate = 0, o2sat = 0, sbp = 0, dbp = 0, pain = 0,
         acuity = 0;
};
struct CxrRow {
  std::string dicom_id, study_id, subject_id;
  std::string study_datetime, view;
};
struct AnnotationRow {
  std::string dicom_id, label;
  double x = 0, y = 0, w = 0, h = 0;
};

struct SourceTables {
  std::vector<PatientsRow> patients;
  std::vector<EdStayRow> edstays;
  std::vector<TriageRow> triage;
  std::vector<CxrRow> cxr_metadata;
  std::vector<AnnotationRow> annotations;

  static SourceTables load(const std::string& dir);
  void save(const std::string& dir) const;
};

struct Violation {
  std::string table, column;
  int row = -1;  // 0-based data row
  std::string message;
};
// Empty iff column types, ranges (pain 0-10, acuity 1-5, gender M/F,
// intime < outtime, positive box sizes, known labels) and referential
// integrity all hold.
std::vector<Violation> validate_schema(const SourceTables& tables);

// --- joined dataset ---------------------------------------------------------

struct IdentityKeys {
  std::string subject_id, stay_id, study_id, dicom_id;
};

struct JoinedInstance {
  IdentityKeys keys;
  ClinicalRecord clinical;
  std::vector<GtBox> boxes;
  std::string image_path;  // relative to the manifest directory
  std::string split;       // "train" / "test" / ""
  int image_w = 0, image_h = 0;
};

inline constexpr const char* kReasonWrongView = "wrong_view";
inline constexpr const char* kReasonNoCoveringStay = "no_covering_stay";
inline constexpr const char* kReasonAmbiguousStay = "ambiguous_stay";
inline constexpr const char* kReasonMissingTriage = "missing_triage";
inline constexpr const char* kReasonMissingAnnotation = "missing_annotation";

struct Exclusion {
  std::string dicom_id, reason;
};

struct JoinOutcome {
  std::vector<JoinedInstance> instances;
  std::vector<Exclusion> exclusions;
};

// An image joins iff its view is frontal (AP or PA), exactly one ED stay of
// the same subject covers study_datetime (inclusive bounds), that stay has a
// triage row, and at least one annotation exists. Reason codes are checked in
// that order. image_dir must contain <dicom_id>.pgm for every joined image.
JoinOutcome join_tables(const SourceTables& tables, const std::string& image_dir);

void write_manifest(const std::string& path, const std::vector<JoinedInstance>& instances,
                    int image_size);
std::vector<JoinedInstance> read_manifest(const std::string& path, int* image_size = nullptr);

void write_exclusion_log(const std::string& path, const std::vector<Exclusion>& exclusions);

}  // namespace mdf
