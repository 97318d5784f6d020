#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "medseg/model.hpp"
#include "medseg/volume.hpp"

namespace medseg {

/// 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
double dice(const BinaryMask3D& a, const BinaryMask3D& b);

struct ErrorRates {
  double fp_rate = 0.0;  // |P \ G| / |G|
  double fn_rate = 0.0;  // |G \ P| / |G|
};

/// Both rates are normalized by the ground-truth volume; throws DataError
/// when the ground truth is empty.
ErrorRates error_rates(const BinaryMask3D& pred, const BinaryMask3D& gt);

struct DiceReport {
  std::vector<std::pair<std::string, double>> per_volume;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1); 0 for n = 1

  static DiceReport from_scores(std::vector<std::pair<std::string, double>> scores);
  std::vector<double> scores() const;
  std::string to_csv() const;
  std::string summary_json() const;
};

/// Runs the model over every axial triplet at full slice resolution,
/// thresholds each class at 0.5 and stacks center-slice labels. Findings
/// outside the predicted lung are dropped. The model is used in inference mode.
LabelVolume volume_predict(SegModel& model, const CtVolume& ct, int slices_per_batch = 4);

struct RankSumResult {
  double u = 0.0;  // Mann-Whitney U of the first sample
  double p_two_sided = 1.0;
  bool exact = false;
};

/// Wilcoxon rank-sum / Mann-Whitney U with midranks for ties. Exact null
/// distribution when |x| + |y| <= 12 and there are no ties, otherwise a
/// normal approximation with tie and continuity corrections.
RankSumResult wilcoxon_rank_sum(const std::vector<double>& x, const std::vector<double>& y);

/// Rank-sum p-value between per-volume Dice lists over the same subjects.
double compare_runs(const DiceReport& a, const DiceReport& b);

}  // namespace medseg
