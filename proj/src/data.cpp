#include "mdf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mdf/classes.hpp"

namespace fs = std::filesystem;

namespace mdf {

// --- CSV ---------------------------------------------------------------------

int CsvTable::column(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

double parse_number(const std::string& table, const std::string& column, int row,
                    const std::string& s) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ValidationError(table + "." + column + " row " + std::to_string(row) +
                          ": not a number: '" + s + "'");
  }
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open csv file: " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty csv file: " + path);
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != t.header.size())
      throw ValidationError(path + ": row " + std::to_string(t.rows.size()) + " has " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(t.header.size()));
    t.rows.push_back(std::move(fields));
  }
  return t;
}

void write_csv(const std::string& path, const CsvTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open csv for writing: " + path);
  for (size_t i = 0; i < table.header.size(); ++i)
    out << (i ? "," : "") << csv_escape(table.header[i]);
  out << "\n";
  for (const auto& row : table.rows) {
    for (size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << csv_escape(row[i]);
    out << "\n";
  }
}

// --- PGM ----------------------------------------------------------------------

PgmImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open image: " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw ValidationError("not a binary PGM (P5): " + path);
  int w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  if (!in || w <= 0 || h <= 0 || maxval != 255)
    throw ValidationError("unsupported PGM header in " + path);
  in.get();  // single whitespace after maxval
  PgmImage img;
  img.w = w;
  img.h = h;
  img.pixels.resize(static_cast<size_t>(w) * h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw ValidationError("truncated PGM data in " + path);
  return img;
}

void write_pgm(const std::string& path, const PgmImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open image for writing: " + path);
  out << "P5\n" << img.w << " " << img.h << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
}

Tensor image_to_tensor(const PgmImage& img) {
  Tensor t({1, 1, img.h, img.w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = img.pixels[static_cast<size_t>(i)] / 255.0;
  return t;
}

// --- datetime ------------------------------------------------------------------

int64_t parse_datetime(const std::string& s) {
  // strict "YYYY-MM-DD HH:MM:SS"
  auto fail = [&]() -> int64_t {
    throw ValidationError("malformed datetime (expected YYYY-MM-DD HH:MM:SS): '" + s + "'");
  };
  if (s.size() != 19 || s[4] != '-' || s[7] != '-' || s[10] != ' ' || s[13] != ':' || s[16] != ':')
    return fail();
  auto num = [&](size_t off, size_t len) -> int64_t {
    int64_t v = 0;
    for (size_t i = off; i < off + len; ++i) {
      if (s[i] < '0' || s[i] > '9') fail();
      v = v * 10 + (s[i] - '0');
    }
    return v;
  };
  const int64_t year = num(0, 4), month = num(5, 2), day = num(8, 2);
  const int64_t hour = num(11, 2), minute = num(14, 2), second = num(17, 2);
  if (month < 1 || month > 12 || day < 1 || day > 31 || hour > 23 || minute > 59 || second > 59)
    return fail();
  // days since year 0 via the civil-calendar formula
  const int64_t y = year - (month <= 2 ? 1 : 0);
  const int64_t era = (y >= 0 ? y : y - 399) / 400;
  const int64_t yoe = y - era * 400;
  const int64_t mp = (month + 9) % 12;
  const int64_t doy = (153 * mp + 2) / 5 + day - 1;
  const int64_t doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  const int64_t days = era * 146097 + doe;
  return ((days * 24 + hour) * 60 + minute) * 60 + second;
}

// --- tables ---------------------------------------------------------------------

namespace {

void need_columns(const CsvTable& t, const std::string& name,
                  const std::vector<std::string>& cols) {
  for (const auto& c : cols)
    if (t.column(c) < 0) throw ValidationError(name + ".csv is missing column '" + c + "'");
}

}  // namespace

SourceTables SourceTables::load(const std::string& dir) {
  SourceTables s;
  {
    CsvTable t = read_csv((fs::path(dir) / "patients.csv").string());
    need_columns(t, "patients", {"subject_id", "age", "gender"});
    const int c0 = t.column("subject_id"), c1 = t.column("age"), c2 = t.column("gender");
    for (size_t r = 0; r < t.rows.size(); ++r)
      s.patients.push_back({t.rows[r][c0],
                            parse_number("patients", "age", static_cast<int>(r), t.rows[r][c1]),
                            t.rows[r][c2]});
  }
  {
    CsvTable t = read_csv((fs::path(dir) / "edstays.csv").string());
    need_columns(t, "edstays", {"subject_id", "stay_id", "intime", "outtime"});
    const int c0 = t.column("subject_id"), c1 = t.column("stay_id"), c2 = t.column("intime"),
              c3 = t.column("outtime");
    for (const auto& row : t.rows) s.edstays.push_back({row[c0], row[c1], row[c2], row[c3]});
  }
  {
    CsvTable t = read_csv((fs::path(dir) / "triage.csv").string());
    need_columns(t, "triage", {"stay_id", "temperature", "heartrate", "resprate", "o2sat", "sbp",
                               "dbp", "pain", "acuity"});
    for (size_t r = 0; r < t.rows.size(); ++r) {
      TriageRow tr;
      tr.stay_id = t.rows[r][t.column("stay_id")];
      auto f = [&](const char* c) {
        return parse_number("triage", c, static_cast<int>(r), t.rows[r][t.column(c)]);
      };
      tr.temperature = f("temperature");
      tr.heartrate = f("heartrate");
      tr.resprate = f("resprate");
      tr.o2sat = f("o2sat");
      tr.sbp = f("sbp");
      tr.dbp = f("dbp");
      tr.pain = f("pain");
      tr.acuity = f("acuity");
      s.triage.push_back(std::move(tr));
    }
  }
  {
    CsvTable t = read_csv((fs::path(dir) / "cxr_metadata.csv").string());
    need_columns(t, "cxr_metadata", {"dicom_id", "study_id", "subject_id", "study_datetime", "view"});
    for (const auto& row : t.rows)
      s.cxr_metadata.push_back({row[t.column("dicom_id")], row[t.column("study_id")],
                                row[t.column("subject_id")], row[t.column("study_datetime")],
                                row[t.column("view")]});
  }
  {
    CsvTable t = read_csv((fs::path(dir) / "annotations.csv").string());
    need_columns(t, "annotations", {"dicom_id", "label", "x", "y", "w", "h"});
    for (size_t r = 0; r < t.rows.size(); ++r) {
      auto f = [&](const char* c) {
        return parse_number("annotations", c, static_cast<int>(r), t.rows[r][t.column(c)]);
      };
      s.annotations.push_back({t.rows[r][t.column("dicom_id")], t.rows[r][t.column("label")],
                               f("x"), f("y"), f("w"), f("h")});
    }
  }
  return s;
}

void SourceTables::save(const std::string& dir) const {
  fs::create_directories(dir);
  auto fmt = [](double v) {
    std::ostringstream os;
    os << v;
    return os.str();
  };
  {
    CsvTable t;
    t.header = {"subject_id", "age", "gender"};
    for (const auto& r : patients) t.rows.push_back({r.subject_id, fmt(r.age), r.gender});
    write_csv((fs::path(dir) / "patients.csv").string(), t);
  }
  {
    CsvTable t;
    t.header = {"subject_id", "stay_id", "intime", "outtime"};
    for (const auto& r : edstays) t.rows.push_back({r.subject_id, r.stay_id, r.intime, r.outtime});
    write_csv((fs::path(dir) / "edstays.csv").string(), t);
  }
  {
    CsvTable t;
    t.header = {"stay_id", "temperature", "heartrate", "resprate", "o2sat", "sbp", "dbp", "pain",
                "acuity"};
    for (const auto& r : triage)
      t.rows.push_back({r.stay_id, fmt(r.temperature), fmt(r.heartrate), fmt(r.resprate),
                        fmt(r.o2sat), fmt(r.sbp), fmt(r.dbp), fmt(r.pain), fmt(r.acuity)});
    write_csv((fs::path(dir) / "triage.csv").string(), t);
  }
  {
    CsvTable t;
    t.header = {"dicom_id", "study_id", "subject_id", "study_datetime", "view"};
    for (const auto& r : cxr_metadata)
      t.rows.push_back({r.dicom_id, r.study_id, r.subject_id, r.study_datetime, r.view});
    write_csv((fs::path(dir) / "cxr_metadata.csv").string(), t);
  }
  {
    CsvTable t;
    t.header = {"dicom_id", "label", "x", "y", "w", "h"};
    for (const auto& r : annotations)
      t.rows.push_back({r.dicom_id, r.label, fmt(r.x), fmt(r.y), fmt(r.w), fmt(r.h)});
    write_csv((fs::path(dir) / "annotations.csv").string(), t);
  }
}

std::vector<Violation> validate_schema(const SourceTables& tables) {
  std::vector<Violation> v;
  std::set<std::string> subject_ids, stay_ids, dicom_ids;

  for (size_t r = 0; r < tables.patients.size(); ++r) {
    const auto& row = tables.patients[r];
    if (!subject_ids.insert(row.subject_id).second)
      v.push_back({"patients", "subject_id", static_cast<int>(r), "duplicate subject_id " + row.subject_id});
    if (row.gender != "M" && row.gender != "F")
      v.push_back({"patients", "gender", static_cast<int>(r), "gender must be M or F, got '" + row.gender + "'"});
    if (!(row.age >= 0.0) || !std::isfinite(row.age))
      v.push_back({"patients", "age", static_cast<int>(r), "age must be a finite non-negative number"});
  }
  for (size_t r = 0; r < tables.edstays.size(); ++r) {
    const auto& row = tables.edstays[r];
    if (!stay_ids.insert(row.stay_id).second)
      v.push_back({"edstays", "stay_id", static_cast<int>(r), "duplicate stay_id " + row.stay_id});
    if (!subject_ids.count(row.subject_id))
      v.push_back({"edstays", "subject_id", static_cast<int>(r), "unknown subject_id " + row.subject_id});
    try {
      if (parse_datetime(row.intime) >= parse_datetime(row.outtime))
        v.push_back({"edstays", "intime", static_cast<int>(r), "intime must be before outtime"});
    } catch (const ValidationError& e) {
      v.push_back({"edstays", "intime", static_cast<int>(r), e.what()});
    }
  }
  std::set<std::string> triage_stays;
  for (size_t r = 0; r < tables.triage.size(); ++r) {
    const auto& row = tables.triage[r];
    if (!stay_ids.count(row.stay_id))
      v.push_back({"triage", "stay_id", static_cast<int>(r), "unknown stay_id " + row.stay_id});
    if (!triage_stays.insert(row.stay_id).second)
      v.push_back({"triage", "stay_id", static_cast<int>(r), "duplicate triage row for stay " + row.stay_id});
    if (row.pain < 0.0 || row.pain > 10.0)
      v.push_back({"triage", "pain", static_cast<int>(r), "pain must lie in [0,10]"});
    if (row.acuity < 1.0 || row.acuity > 5.0)
      v.push_back({"triage", "acuity", static_cast<int>(r), "acuity must lie in [1,5]"});
    for (double val : {row.temperature, row.heartrate, row.resprate, row.o2sat, row.sbp, row.dbp})
      if (!std::isfinite(val)) {
        v.push_back({"triage", "vitals", static_cast<int>(r), "non-finite vital sign"});
        break;
      }
  }
  for (size_t r = 0; r < tables.cxr_metadata.size(); ++r) {
    const auto& row = tables.cxr_metadata[r];
    if (!dicom_ids.insert(row.dicom_id).second)
      v.push_back({"cxr_metadata", "dicom_id", static_cast<int>(r), "duplicate dicom_id " + row.dicom_id});
    if (!subject_ids.count(row.subject_id))
      v.push_back({"cxr_metadata", "subject_id", static_cast<int>(r), "unknown subject_id " + row.subject_id});
    try {
      parse_datetime(row.study_datetime);
    } catch (const ValidationError& e) {
      v.push_back({"cxr_metadata", "study_datetime", static_cast<int>(r), e.what()});
    }
  }
  for (size_t r = 0; r < tables.annotations.size(); ++r) {
    const auto& row = tables.annotations[r];
    if (!dicom_ids.count(row.dicom_id))
      v.push_back({"annotations", "dicom_id", static_cast<int>(r), "unknown dicom_id " + row.dicom_id});
    if (class_id_from_name(row.label) < 0)
      v.push_back({"annotations", "label", static_cast<int>(r), "unknown abnormality label '" + row.label + "'"});
    if (row.w <= 0.0 || row.h <= 0.0)
      v.push_back({"annotations", "w", static_cast<int>(r), "box must have positive size"});
  }
  return v;
}

JoinOutcome join_tables(const SourceTables& tables, const std::string& image_dir) {
  JoinOutcome out;

  std::map<std::string, const PatientsRow*> patients;
  for (const auto& p : tables.patients) patients[p.subject_id] = &p;
  std::map<std::string, std::vector<const EdStayRow*>> stays_by_subject;
  for (const auto& e : tables.edstays) stays_by_subject[e.subject_id].push_back(&e);
  std::map<std::string, const TriageRow*> triage_by_stay;
  for (const auto& t : tables.triage) triage_by_stay[t.stay_id] = &t;
  std::map<std::string, std::vector<const AnnotationRow*>> ann_by_dicom;
  for (const auto& a : tables.annotations) ann_by_dicom[a.dicom_id].push_back(&a);

  for (const auto& cxr : tables.cxr_metadata) {
    if (cxr.view != "AP" && cxr.view != "PA") {
      out.exclusions.push_back({cxr.dicom_id, kReasonWrongView});
      continue;
    }
    const int64_t study_t = parse_datetime(cxr.study_datetime);
    const EdStayRow* covering = nullptr;
    int covering_count = 0;
    auto it = stays_by_subject.find(cxr.subject_id);
    if (it != stays_by_subject.end())
      for (const EdStayRow* stay : it->second) {
        if (parse_datetime(stay->intime) <= study_t && study_t <= parse_datetime(stay->outtime)) {
          ++covering_count;
          covering = stay;
        }
      }
    if (covering_count == 0) {
      out.exclusions.push_back({cxr.dicom_id, kReasonNoCoveringStay});
      continue;
    }
    if (covering_count > 1) {
      out.exclusions.push_back({cxr.dicom_id, kReasonAmbiguousStay});
      continue;
    }
    auto tit = triage_by_stay.find(covering->stay_id);
    if (tit == triage_by_stay.end()) {
      out.exclusions.push_back({cxr.dicom_id, kReasonMissingTriage});
      continue;
    }
    auto ait = ann_by_dicom.find(cxr.dicom_id);
    if (ait == ann_by_dicom.end() || ait->second.empty()) {
      out.exclusions.push_back({cxr.dicom_id, kReasonMissingAnnotation});
      continue;
    }
    auto pit = patients.find(cxr.subject_id);
    if (pit == patients.end())
      throw ValidationError("cxr_metadata row for " + cxr.dicom_id + " references unknown subject " +
                            cxr.subject_id + "; run schema validation");

    const std::string image_path = (fs::path(image_dir) / (cxr.dicom_id + ".pgm")).string();
    PgmImage img = read_pgm(image_path);

    JoinedInstance inst;
    inst.keys = {cxr.subject_id, covering->stay_id, cxr.study_id, cxr.dicom_id};
    const TriageRow& tr = *tit->second;
    inst.clinical.temperature = tr.temperature;
    inst.clinical.heartrate = tr.heartrate;
    inst.clinical.resprate = tr.resprate;
    inst.clinical.o2sat = tr.o2sat;
    inst.clinical.sbp = tr.sbp;
    inst.clinical.dbp = tr.dbp;
    inst.clinical.pain = tr.pain;
    inst.clinical.acuity = tr.acuity;
    inst.clinical.age = pit->second->age;
    inst.clinical.gender = pit->second->gender;
    inst.clinical.validate();
    inst.image_path = image_path;
    inst.image_w = img.w;
    inst.image_h = img.h;
    for (const AnnotationRow* a : ait->second) {
      const int cls = class_id_from_name(a->label);
      if (cls < 0)
        throw ValidationError("annotation for " + cxr.dicom_id + " has unknown label '" + a->label + "'");
      if (a->x < 0.0 || a->y < 0.0 || a->x + a->w > img.w || a->y + a->h > img.h)
        throw ValidationError("annotation for " + cxr.dicom_id + " lies outside the image bounds");
      inst.boxes.push_back({cls, Box{a->x, a->y, a->w, a->h}});
    }
    out.instances.push_back(std::move(inst));
  }
  return out;
}

void write_manifest(const std::string& path, const std::vector<JoinedInstance>& instances,
                    int image_size) {
  nlohmann::json j;
  j["version"] = 1;
  j["image_size"] = image_size;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& inst : instances) {
    nlohmann::json e;
    e["subject_id"] = inst.keys.subject_id;
    e["stay_id"] = inst.keys.stay_id;
    e["study_id"] = inst.keys.study_id;
    e["dicom_id"] = inst.keys.dicom_id;
    e["image"] = inst.image_path;
    e["image_w"] = inst.image_w;
    e["image_h"] = inst.image_h;
    if (!inst.split.empty()) e["split"] = inst.split;
    e["clinical"] = {{"temperature", inst.clinical.temperature},
                     {"heartrate", inst.clinical.heartrate},
                     {"resprate", inst.clinical.resprate},
                     {"o2sat", inst.clinical.o2sat},
                     {"sbp", inst.clinical.sbp},
                     {"dbp", inst.clinical.dbp},
                     {"pain", inst.clinical.pain},
                     {"acuity", inst.clinical.acuity},
                     {"age", inst.clinical.age},
                     {"gender", inst.clinical.gender}};
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : inst.boxes)
      boxes.push_back({{"label", kClassNames[static_cast<size_t>(b.cls)]},
                       {"x", b.box.x},
                       {"y", b.box.y},
                       {"w", b.box.w},
                       {"h", b.box.h}});
    e["boxes"] = std::move(boxes);
    arr.push_back(std::move(e));
  }
  j["instances"] = std::move(arr);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open manifest for writing: " + path);
  out << j.dump(1) << "\n";
}

std::vector<JoinedInstance> read_manifest(const std::string& path, int* image_size) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open manifest: " + path);
  nlohmann::json j;
  in >> j;
  if (image_size) *image_size = j.value("image_size", 0);
  std::vector<JoinedInstance> out;
  for (const auto& e : j["instances"]) {
    JoinedInstance inst;
    inst.keys = {e["subject_id"], e["stay_id"], e["study_id"], e["dicom_id"]};
    inst.image_path = e["image"];
    inst.image_w = e.value("image_w", 0);
    inst.image_h = e.value("image_h", 0);
    inst.split = e.value("split", "");
    const auto& c = e["clinical"];
    inst.clinical.temperature = c["temperature"];
    inst.clinical.heartrate = c["heartrate"];
    inst.clinical.resprate = c["resprate"];
    inst.clinical.o2sat = c["o2sat"];
    inst.clinical.sbp = c["sbp"];
    inst.clinical.dbp = c["dbp"];
    inst.clinical.pain = c["pain"];
    inst.clinical.acuity = c["acuity"];
    inst.clinical.age = c["age"];
    inst.clinical.gender = c["gender"];
    for (const auto& b : e["boxes"]) {
      const int cls = class_id_from_name(b["label"]);
      if (cls < 0) throw ValidationError("manifest box has unknown label");
      inst.boxes.push_back({cls, Box{b["x"], b["y"], b["w"], b["h"]}});
    }
    out.push_back(std::move(inst));
  }
  return out;
}

void write_exclusion_log(const std::string& path, const std::vector<Exclusion>& exclusions) {
  CsvTable t;
  t.header = {"dicom_id", "reason"};
  for (const auto& e : exclusions) t.rows.push_back({e.dicom_id, e.reason});
  write_csv(path, t);
}

}  // namespace mdf
