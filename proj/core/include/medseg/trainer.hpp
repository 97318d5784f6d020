#pragma once

// Training protocol: soft-Dice + BCE loss, Adam / AdamW, exponential learning
// rate decay, patience-based early stopping and best-checkpoint selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "medseg/data.hpp"
#include "medseg/model.hpp"

namespace medseg {

enum class OptimizerKind { adam, adamw };
std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct TrainConfig {
  int batch_size = 30;
  int patch_size = 128;
  OptimizerKind optimizer = OptimizerKind::adam;
  double initial_lr = 1e-4;
  double weight_decay = 0.0;
  double lr_decay_gamma = 1.0;
  int early_stop_patience = 100;
  int max_epochs = 1000;
  std::optional<long> max_steps;  // optimizer steps across all epochs
  bool swa = false;               // train only on slices with annotation
  std::uint64_t seed = 42;
  int workers = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

std::string train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const std::string& text);

/// Mean over classes of (soft Dice loss + binary cross-entropy) / 2.
/// `target` holds one 0/1 value per element of `probabilities`.
nn::Tensor segmentation_loss(const nn::Tensor& probabilities, const std::vector<double>& target);
inline constexpr double kDiceSmoothing = 1e-5;
inline constexpr double kProbabilityClamp = 1e-7;

/// One-hot class channels (lung = label >= 1, findings = label 2) for a batch
/// of label planes, matching an (N, num_classes, H, W) prediction.
std::vector<double> one_hot_targets(const std::vector<const std::vector<std::uint8_t>*>& labels,
                                    int num_classes);

/// Adam with optional coupled L2 (adam) or decoupled (adamw) weight decay.
/// Parameters without a gradient are treated as having a zero gradient.
class Optimizer {
 public:
  Optimizer(std::vector<nn::Tensor*> params, OptimizerKind kind, double weight_decay, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8);
  void step(double lr);
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<nn::Tensor*> params_;
  std::vector<std::vector<double>> m_, v_;
  OptimizerKind kind_;
  double weight_decay_, beta1_, beta2_, eps_;
  long t_ = 0;
};

/// lr0 * gamma^epoch for the 0-indexed epoch.
double learning_rate(const TrainConfig& cfg, int epoch);

/// Stops after `patience` consecutive epochs without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience);
  /// Records the loss of the next epoch; returns true on improvement.
  bool update(double val_loss);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }  // 1-indexed, 0 before any update
  double best_loss() const { return best_; }
  int epochs() const { return epochs_; }

 private:
  int patience_;
  int epochs_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_;
};

struct TrainReport {
  std::vector<double> train_losses;  // per epoch, mean over batches
  std::vector<double> val_losses;
  std::vector<double> learning_rates;
  int best_epoch = 0;  // 1-indexed
  double best_val_loss = 0.0;
  long steps = 0;
  bool stopped_early = false;
  std::optional<std::filesystem::path> checkpoint;
  double wall_seconds = 0.0;

  /// Deterministic content only; wall-clock time is left out.
  std::string to_json() const;
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_path;  // written on every improvement
  std::function<void(const std::string&)> log;
};

/// Trains in place and leaves the model holding the best-validation weights.
/// Throws DivergenceError carrying the epoch when the loss becomes non-finite.
TrainReport train(SegModel& model, const std::vector<VolumePair>& train_set,
                  const std::vector<VolumePair>& val_set, const TrainConfig& cfg, const TrainOptions& options = {});

/// Validation loss over every full axial slice, in inference mode.
double validation_loss(SegModel& model, const std::vector<SliceSample>& samples, int batch_size);

}  // namespace medseg
