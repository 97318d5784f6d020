#include "medseg/radiomics.hpp"

#include <cmath>
#include <cstdio>
#include <nlohmann/json.hpp>
#include <sstream>

#include "medseg/error.hpp"
#include "medseg/metrics.hpp"

namespace medseg {

LobeMaskSet LobeMaskSet::from_label_map(const LabelVolume& map) {
  LobeMaskSet set;
  for (int k = 0; k < 5; ++k) set.lobes[k] = mask_from_labels(map, static_cast<std::uint8_t>(k + 1));
  return set;
}

double poi(const BinaryMask3D& findings, const BinaryMask3D& region) {
  if (!(findings.dims == region.dims) || findings.voxels.size() != region.voxels.size())
    throw ShapeError("POI: findings " + findings.dims.str() + " and region " + region.dims.str() + " differ");
  std::size_t inside = 0, both = 0;
  for (std::size_t i = 0; i < region.voxels.size(); ++i) {
    if (!region.voxels[i]) continue;
    ++inside;
    both += findings.voxels[i] != 0;
  }
  if (inside == 0) throw DataError("POI: region is empty");
  return 100.0 * static_cast<double>(both) / static_cast<double>(inside);
}

LobarPoi lobar_poi(const BinaryMask3D& findings, const LobeMaskSet& lobes, const BinaryMask3D& lung) {
  const std::size_t n = lung.voxels.size();
  for (const auto& l : lobes.lobes)
    if (!(l.dims == lung.dims) || l.voxels.size() != n) throw ShapeError("lobe mask shape differs from lung");

  LobarPoi out;
  std::size_t lung_count = 0, outside_union = 0, lobe_outside_lung = 0;
  for (std::size_t i = 0; i < n; ++i) {
    int owners = 0;
    for (const auto& l : lobes.lobes) owners += l.voxels[i] != 0;
    if (owners > 1) throw DataError("lobe masks overlap");
    const bool in_lung = lung.voxels[i] != 0;
    lung_count += in_lung;
    if (in_lung && owners == 0) ++outside_union;
    if (!in_lung && owners == 1) ++lobe_outside_lung;
  }
  out.total = poi(findings, lung);
  const double tolerance = 0.01 * static_cast<double>(lung_count);
  if (static_cast<double>(outside_union) > tolerance)
    out.warnings.push_back(std::to_string(outside_union) + " lung voxels lie outside every lobe");
  if (static_cast<double>(lobe_outside_lung) > tolerance)
    out.warnings.push_back(std::to_string(lobe_outside_lung) + " lobe voxels lie outside the lung");
  for (int k = 0; k < 5; ++k) {
    if (lobes.lobes[k].count() == 0) {
      out.warnings.push_back(std::string("lobe ") + kLobeNames[k] + " is empty");
      continue;
    }
    out.lobes[k] = poi(findings, lobes.lobes[k]);
  }
  return out;
}

double mask_agreement(const BinaryMask3D& a, const BinaryMask3D& b) { return 100.0 * dice(a, b); }

bool PoiRecord::complete() const {
  return poi_total && age && sex && days_dx_to_ct && vaccinated;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

const char* kPoiHeader = "subject_id,poi_total,poi_lul,poi_lll,poi_rul,poi_rml,poi_rll,age,sex,days_dx_to_ct,vaccinated";

std::string num(const std::optional<double>& v) {
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", *v);
  return buf;
}

std::string num(double v) { return num(std::optional<double>(v)); }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::optional<double> parse_optional(const std::string& cell, const std::string& column) {
  if (cell.empty() || cell == "NA" || cell == "nan" || cell == "NaN") return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    return v;
  } catch (const std::exception&) {
    throw FormatError("column " + column + ": cannot parse '" + cell + "' as a number");
  }
}

}  // namespace

std::string poi_records_to_csv(const std::vector<PoiRecord>& records) {
  std::string out = std::string(kPoiHeader) + "\n";
  for (const auto& r : records) {
    out += r.subject_id + "," + num(r.poi_total);
    for (const auto& l : r.poi_lobes) out += "," + num(l);
    out += "," + num(r.age) + "," + num(r.sex) + "," + num(r.days_dx_to_ct) + ",";
    if (r.vaccinated) out += *r.vaccinated ? "1" : "0";
    out += "\n";
  }
  return out;
}

std::vector<PoiRecord> poi_records_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("POI table is empty");
  const auto header = split_csv_line(line);
  auto column = [&](const std::string& name) -> int {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int id_col = column("subject_id");
  if (id_col < 0) throw FormatError("POI table lacks a subject_id column");
  const char* lobe_cols[5] = {"poi_lul", "poi_lll", "poi_rul", "poi_rml", "poi_rll"};

  std::vector<PoiRecord> out;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_csv_line(line);
    auto cell = [&](const std::string& name) -> std::optional<double> {
      const int c = column(name);
      if (c < 0 || c >= static_cast<int>(cells.size())) return std::nullopt;
      return parse_optional(cells[c], name);
    };
    PoiRecord r;
    if (id_col >= static_cast<int>(cells.size()) || cells[id_col].empty())
      throw FormatError("POI table row without subject_id");
    r.subject_id = cells[id_col];
    r.poi_total = cell("poi_total");
    for (int k = 0; k < 5; ++k) r.poi_lobes[k] = cell(lobe_cols[k]);
    r.age = cell("age");
    r.sex = cell("sex");
    r.days_dx_to_ct = cell("days_dx_to_ct");
    if (auto v = cell("vaccinated")) {
      if (*v != 0.0 && *v != 1.0) throw FormatError("vaccinated must be 0 or 1");
      r.vaccinated = *v == 1.0;
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::string lobar_rows_csv(const std::vector<PoiRecord>& records) {
  std::string out = "subject_id,region,poi\n";
  for (const auto& r : records) {
    if (r.poi_total) out += r.subject_id + ",total," + num(r.poi_total) + "\n";
    for (int k = 0; k < 5; ++k)
      if (r.poi_lobes[k]) out += r.subject_id + "," + kLobeNames[k] + "," + num(r.poi_lobes[k]) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cohort analysis

CohortReport cohort_analysis(const std::vector<PoiRecord>& records) {
  CohortReport rep;
  std::vector<const PoiRecord*> used;
  for (const auto& r : records) {
    if (r.complete()) used.push_back(&r);
    else rep.excluded.push_back(r.subject_id);
  }
  rep.n_used = static_cast<int>(used.size());
  if (used.size() < 10) throw DataError("cohort analysis needs at least 10 complete records");

  std::vector<double> vacc, unvacc, y;
  std::vector<std::vector<double>> design;
  for (const auto* r : used) {
    (*r->vaccinated ? vacc : unvacc).push_back(*r->poi_total);
    y.push_back(*r->poi_total);
    design.push_back({1.0, *r->vaccinated ? 1.0 : 0.0, *r->age, *r->sex, *r->days_dx_to_ct});
  }
  rep.n_vaccinated = static_cast<int>(vacc.size());
  rep.n_unvaccinated = static_cast<int>(unvacc.size());
  if (vacc.size() < 2 || unvacc.size() < 2)
    throw DataError("cohort analysis needs at least 2 records per vaccination group");

  rep.t_test = stats::welch_t_test(vacc, unvacc);
  rep.regression = stats::ols(y, design, {"intercept", "vaccinated", "age", "sex", "days_dx_to_ct"});

  for (const bool group : {true, false}) {
    const std::string name = group ? "vaccinated" : "unvaccinated";
    std::vector<double> total;
    std::array<std::vector<double>, 5> lobes;
    for (const auto* r : used) {
      if (*r->vaccinated != group) continue;
      total.push_back(*r->poi_total);
      for (int k = 0; k < 5; ++k)
        if (r->poi_lobes[k]) lobes[k].push_back(*r->poi_lobes[k]);
    }
    rep.boxplots.push_back({name, "total", stats::box_summary(total)});
    for (int k = 0; k < 5; ++k)
      if (!lobes[k].empty()) rep.boxplots.push_back({name, kLobeNames[k], stats::box_summary(lobes[k])});
  }
  return rep;
}

std::string CohortReport::to_json() const {
  nlohmann::ordered_json j;
  j["encoding"] = {{"sex", "0/1 single covariate as given in the input table"},
                   {"vaccinated", "1 = vaccinated after infection, 0 = unvaccinated"},
                   {"t_test", "Welch two-sample, two-sided; x = vaccinated, y = unvaccinated"}};
  j["n_used"] = n_used;
  j["n_vaccinated"] = n_vaccinated;
  j["n_unvaccinated"] = n_unvaccinated;
  j["excluded"] = excluded;
  j["t_test"] = {{"t", t_test.t},
                 {"dof", t_test.dof},
                 {"p_two_sided", t_test.p_two_sided},
                 {"mean_vaccinated", t_test.mean_x},
                 {"mean_unvaccinated", t_test.mean_y}};
  nlohmann::ordered_json terms = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < regression.names.size(); ++i)
    terms.push_back({{"name", regression.names[i]},
                     {"coefficient", regression.coefficients[i]},
                     {"std_error", regression.standard_errors[i]},
                     {"t", std::isfinite(regression.t_values[i]) ? nlohmann::ordered_json(regression.t_values[i])
                                                                 : nlohmann::ordered_json(nullptr)},
                     {"p_two_sided", regression.p_values[i]}});
  j["regression"] = {{"response", "poi_total"},
                     {"terms", terms},
                     {"r_squared", regression.r_squared},
                     {"n", regression.n},
                     {"dof", regression.dof}};
  nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
  for (const auto& b : boxplots)
    boxes.push_back({{"group", b.group},
                     {"region", b.region},
                     {"n", b.summary.n},
                     {"min", b.summary.min},
                     {"q1", b.summary.q1},
                     {"median", b.summary.median},
                     {"q3", b.summary.q3},
                     {"max", b.summary.max}});
  j["boxplots"] = boxes;
  return j.dump(2) + "\n";
}

std::string CohortReport::to_text() const {
  std::ostringstream os;
  char buf[256];
  os << "Cohort analysis of total percentage of involvement\n";
  os << "  records used: " << n_used << " (vaccinated " << n_vaccinated << ", unvaccinated " << n_unvaccinated
     << ")\n";
  if (!excluded.empty()) {
    os << "  excluded (incomplete):";
    for (const auto& id : excluded) os << " " << id;
    os << "\n";
  }
  std::snprintf(buf, sizeof(buf), "  Welch t-test: t = %.4f, dof = %.2f, p = %.4g (means %.3f vs %.3f)\n",
                t_test.t, t_test.dof, t_test.p_two_sided, t_test.mean_x, t_test.mean_y);
  os << buf;
  os << "  OLS poi_total ~ vaccinated + age + sex + days_dx_to_ct (sex coded 0/1)\n";
  for (std::size_t i = 0; i < regression.names.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "    %-14s coef %12.5g  se %10.4g  t %9.4g  p %.4g\n",
                  regression.names[i].c_str(), regression.coefficients[i], regression.standard_errors[i],
                  regression.t_values[i], regression.p_values[i]);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "    R^2 = %.4f, n = %d, dof = %d\n", regression.r_squared, regression.n,
                regression.dof);
  os << buf;
  return os.str();
}

std::string CohortReport::boxplot_csv() const {
  std::string out = "group,region,n,min,q1,median,q3,max\n";
  for (const auto& b : boxplots)
    out += b.group + "," + b.region + "," + std::to_string(b.summary.n) + "," + num(b.summary.min) + "," +
           num(b.summary.q1) + "," + num(b.summary.median) + "," + num(b.summary.q3) + "," + num(b.summary.max) +
           "\n";
  return out;
}

}  // namespace medseg
