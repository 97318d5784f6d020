#pragma once

// Percentage of involvement (POI) per lung and per lobe, lung-mask agreement
// and the cohort statistics built on top of them.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "medseg/stats.hpp"
#include "medseg/volume.hpp"

namespace medseg {

enum class Lobe { LUL = 0, LLL, RUL, RML, RLL };
inline constexpr std::array<const char*, 5> kLobeNames = {"LUL", "LLL", "RUL", "RML", "RLL"};

struct LobeMaskSet {
  std::array<BinaryMask3D, 5> lobes;  // indexed by Lobe

  /// Splits a lobe label map (1 LUL, 2 LLL, 3 RUL, 4 RML, 5 RLL).
  static LobeMaskSet from_label_map(const LabelVolume& map);
};

/// 100 * |findings n region| / |region|. Throws DataError for an empty region.
double poi(const BinaryMask3D& findings, const BinaryMask3D& region);

struct LobarPoi {
  double total = 0.0;
  std::array<std::optional<double>, 5> lobes;  // empty lobes are reported missing
  std::vector<std::string> warnings;
};

/// Throws DataError when lobes overlap or shapes disagree; lobe/lung coverage
/// mismatches above 1% of the lung volume only add a warning.
LobarPoi lobar_poi(const BinaryMask3D& findings, const LobeMaskSet& lobes, const BinaryMask3D& lung);

/// 100 * Dice(a, b).
double mask_agreement(const BinaryMask3D& a, const BinaryMask3D& b);

struct PoiRecord {
  std::string subject_id;
  std::optional<double> poi_total;
  std::array<std::optional<double>, 5> poi_lobes;
  std::optional<double> age;
  std::optional<double> sex;  // 0 / 1
  std::optional<double> days_dx_to_ct;
  std::optional<bool> vaccinated;

  /// Every field required by the cohort analysis is present.
  bool complete() const;
};

/// CSV columns: subject_id, poi_total, poi_lul, poi_lll, poi_rul, poi_rml,
/// poi_rll, age, sex, days_dx_to_ct, vaccinated. Empty cells or "NA" are missing.
std::string poi_records_to_csv(const std::vector<PoiRecord>& records);
std::vector<PoiRecord> poi_records_from_csv(const std::string& text);

/// Long-format rows (subject_id, region, poi) for boxplots.
std::string lobar_rows_csv(const std::vector<PoiRecord>& records);

struct BoxRow {
  std::string group;   // "vaccinated" / "unvaccinated"
  std::string region;  // "total" or a lobe name
  stats::BoxSummary summary;
};

struct CohortReport {
  int n_used = 0;
  int n_vaccinated = 0;
  int n_unvaccinated = 0;
  std::vector<std::string> excluded;  // incomplete records
  stats::TTestResult t_test;
  stats::RegressionResult regression;
  std::vector<BoxRow> boxplots;

  double regression_vaccination_p() const { return regression.p_value("vaccinated"); }
  std::string to_json() const;
  std::string to_text() const;
  std::string boxplot_csv() const;
};

/// Welch t-test of total POI between vaccination groups and OLS of total POI
/// on (intercept, vaccinated, age, sex, days_dx_to_ct). Incomplete records are
/// excluded and listed. Throws DataError with fewer than 10 usable records or
/// fewer than 2 per group.
CohortReport cohort_analysis(const std::vector<PoiRecord>& records);

}  // namespace medseg
