#pragma once

// Ablation matrix: flag sets resolve to model and training configurations,
// each row is trained with the shared seed and scored on the validation split.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "medseg/metrics.hpp"
#include "medseg/trainer.hpp"

namespace medseg {

struct AblationFlags {
  bool esc = false;   // exponential stride compression gate
  bool ips = false;   // increased patch size
  bool ibs = false;   // increased batch size
  bool swa = false;   // slices with annotation only
  bool wlrd = false;  // weight decay + exponential lr decay
  bool cnf = false;   // ConvNeXt-style backbone
  bool ups = false;   // bilinear instead of transposed-conv upsampling
  bool aw = false;    // AdamW

  static const std::vector<std::string>& names();  // column order
  /// Accepts the names above, case-insensitive; throws ConfigError otherwise.
  static AblationFlags from_names(const std::vector<std::string>& names);
  std::vector<std::string> to_names() const;
  /// "ESC+IPS+...", or "none" for the empty set.
  std::string label() const;
  bool operator==(const AblationFlags&) const = default;
};

/// The standard twelve-row ablation, baseline first and the full model last.
std::vector<AblationFlags> standard_ablation_rows();

/// Patch and batch sizes behind IPS / IBS. Defaults are full scale; toy runs
/// shrink them.
struct AblationScale {
  int base_patch = 128;
  int increased_patch = 256;
  int base_batch = 30;
  int increased_batch = 60;
};

struct AblationRow {
  AblationFlags flags;
  ModelConfig model;
  TrainConfig train;
};

/// Applies a flag set on top of base configs. Flags own the fields they
/// control, so the empty set always yields the transposed-conv, Adam, no-ESC
/// baseline whatever the base configs say.
AblationRow resolve_row(const AblationFlags& flags, const ModelConfig& base_model, const TrainConfig& base_train,
                        const AblationScale& scale = {});

struct AblationConfig {
  ModelConfig model;
  TrainConfig train;
  AblationScale scale;
  std::vector<AblationFlags> rows;
  int phantom_volumes = 6;  // used when no data directory is given
  Dims3 phantom_shape{8, 64, 64};

  std::vector<AblationRow> resolved() const;
};

/// JSON: {"model": {...}, "train": {...}, "scale": {...},
///        "rows": "standard" | [["ESC", "IPS"], [], ...],
///        "phantom": {"volumes": n, "shape": [z, y, x]}}
AblationConfig ablation_config_from_json(const std::string& text);

struct AblationRowResult {
  AblationFlags flags;
  std::optional<DiceReport> dice;  // empty when the row failed
  std::optional<double> p_vs_baseline;
  std::string error;
};

struct AblationTable {
  std::vector<AblationRowResult> rows;

  /// Columns row, flags, dice_mean, dice_std, p_vs_baseline.
  std::string to_csv() const;
  std::string to_text() const;
};

struct AblationOptions {
  std::function<void(const std::string&)> log;
};

/// Findings-class Dice per validation volume.
DiceReport evaluate_findings(SegModel& model, const std::vector<VolumePair>& volumes);

/// Trains and evaluates every row. A failing row is recorded and the rest
/// continue. p-values compare each row with the first row (rank-sum test).
AblationTable run_ablation_matrix(const std::vector<AblationRow>& rows, const std::vector<VolumePair>& train_set,
                                  const std::vector<VolumePair>& val_set, const AblationOptions& options = {});

}  // namespace medseg
