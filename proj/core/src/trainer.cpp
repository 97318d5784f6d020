#include "medseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <limits>
#include <cmath>
#include <nlohmann/json.hpp>

#include "medseg/checkpoint.hpp"
#include "medseg/error.hpp"

namespace medseg {

using nn::Tensor;

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adamw ? "adamw" : "adam"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "adamw") return OptimizerKind::adamw;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or adamw)");
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (patch_size < 1) throw ConfigError("patch_size must be positive");
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) throw ConfigError("initial_lr must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("weight_decay must be >= 0");
  if (!(lr_decay_gamma > 0.0 && lr_decay_gamma <= 1.0)) throw ConfigError("lr_decay_gamma must lie in (0, 1]");
  if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
  if (max_steps && *max_steps < 1) throw ConfigError("max_steps must be positive");
  if (workers < 1) throw ConfigError("workers must be positive");
}

std::string train_config_to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["patch_size"] = c.patch_size;
  j["optimizer"] = to_string(c.optimizer);
  j["initial_lr"] = c.initial_lr;
  j["weight_decay"] = c.weight_decay;
  j["lr_decay_gamma"] = c.lr_decay_gamma;
  j["early_stop_patience"] = c.early_stop_patience;
  j["max_epochs"] = c.max_epochs;
  j["max_steps"] = c.max_steps ? nlohmann::ordered_json(*c.max_steps) : nlohmann::ordered_json(nullptr);
  j["swa"] = c.swa;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  const auto known = nlohmann::json::parse(train_config_to_json(TrainConfig{}));
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("train config: unknown key '" + key + "'");
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
    c.initial_lr = j.value("initial_lr", c.initial_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.lr_decay_gamma = j.value("lr_decay_gamma", c.lr_decay_gamma);
    c.early_stop_patience = j.value("early_stop_patience", c.early_stop_patience);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    if (j.contains("max_steps") && !j.at("max_steps").is_null()) c.max_steps = j.at("max_steps").get<long>();
    c.swa = j.value("swa", c.swa);
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Loss

Tensor segmentation_loss(const Tensor& probabilities, const std::vector<double>& target) {
  const nn::Shape s = probabilities.shape();
  if (target.size() != s.numel())
    throw ShapeError("loss: target has " + std::to_string(target.size()) + " values for prediction " + s.str());
  const auto p = probabilities.data();
  const std::size_t plane = s.plane();
  const int classes = s.c;

  // Per-class sums over batch and space.
  std::vector<double> inter(classes, 0.0), psum(classes, 0.0), tsum(classes, 0.0);
  std::vector<double> bce(classes, 0.0);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < classes; ++c) {
      const std::size_t base = (static_cast<std::size_t>(n) * classes + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double pv = p[base + i], tv = target[base + i];
        const double pc = std::clamp(pv, kProbabilityClamp, 1.0 - kProbabilityClamp);
        inter[c] += pv * tv;
        psum[c] += pv;
        tsum[c] += tv;
        bce[c] -= tv * std::log(pc) + (1.0 - tv) * std::log(1.0 - pc);
      }
    }
  const double count = static_cast<double>(s.n) * static_cast<double>(plane);
  double value = 0.0;
  for (int c = 0; c < classes; ++c) {
    const double dice_loss = 1.0 - (2.0 * inter[c] + kDiceSmoothing) / (psum[c] + tsum[c] + kDiceSmoothing);
    value += 0.5 * (dice_loss + bce[c] / count);
  }
  value /= classes;

  Tensor out = nn::make_result({1, 1, 1, 1}, {probabilities}, [probabilities, target, inter, psum, tsum, count,
                                                               classes, plane](nn::Node& self) {
    const double g = self.grad[0] * 0.5 / classes;
    const auto& pv = probabilities.node()->value;
    auto& grad = probabilities.node()->grad;
    const nn::Shape s = probabilities.shape();
    for (int c = 0; c < classes; ++c) {
      const double num = 2.0 * inter[c] + kDiceSmoothing;
      const double den = psum[c] + tsum[c] + kDiceSmoothing;
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * classes + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double p = pv[base + i], t = target[base + i];
          // d(1 - num/den)/dp = -(2t * den - num) / den^2
          double d = -(2.0 * t * den - num) / (den * den);
          if (p > kProbabilityClamp && p < 1.0 - kProbabilityClamp) d += (-t / p + (1.0 - t) / (1.0 - p)) / count;
          grad[base + i] += g * d;
        }
      }
    }
  });
  out.data()[0] = value;
  return out;
}

std::vector<double> one_hot_targets(const std::vector<const std::vector<std::uint8_t>*>& labels, int num_classes) {
  if (num_classes < 1 || num_classes > 2) throw ConfigError("one_hot_targets supports 1 or 2 classes");
  std::vector<double> out;
  for (const auto* plane : labels) {
    for (int c = 0; c < num_classes; ++c)
      for (std::uint8_t v : *plane) out.push_back(c == 0 ? (v >= kLung ? 1.0 : 0.0) : (v == kFindings ? 1.0 : 0.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

Optimizer::Optimizer(std::vector<Tensor*> params, OptimizerKind kind, double weight_decay, double beta1,
                     double beta2, double eps)
    : params_(std::move(params)), kind_(kind), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto* p : params_) {
    m_.emplace_back(p->numel(), 0.0);
    v_.emplace_back(p->numel(), 0.0);
  }
}

void Optimizer::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& param = *params_[k];
    auto w = param.data();
    const bool has_grad = param.has_grad();
    auto& m = m_[k];
    auto& v = v_[k];
    if (kind_ == OptimizerKind::adamw && weight_decay_ > 0.0) {
      const double shrink = 1.0 - lr * weight_decay_;
      for (double& x : w) x *= shrink;
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      double g = has_grad ? param.grad()[i] : 0.0;
      if (kind_ == OptimizerKind::adam) g += weight_decay_ * w[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void Optimizer::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  return cfg.initial_lr * std::pow(cfg.lr_decay_gamma, static_cast<double>(epoch));
}

EarlyStopping::EarlyStopping(int patience) : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("patience must be >= 1");
}

bool EarlyStopping::update(double val_loss) {
  ++epochs_;
  if (val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epochs_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

std::string TrainReport::to_json() const {
  nlohmann::ordered_json j;
  j["epochs"] = train_losses.size();
  j["steps"] = steps;
  j["best_epoch"] = best_epoch;
  j["best_val_loss"] = best_val_loss;
  j["stopped_early"] = stopped_early;
  j["checkpoint"] = checkpoint ? nlohmann::ordered_json(checkpoint->filename().string()) : nlohmann::ordered_json(nullptr);
  j["train_losses"] = train_losses;
  j["val_losses"] = val_losses;
  j["learning_rates"] = learning_rates;
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<Tensor*> trainable(SegModel& model) {
  std::vector<Tensor*> out;
  for (auto& p : model.parameters()) {
    // Without ESC its parameters never take part in the forward pass.
    if (!model.config().use_esc && p.name.rfind("esc.", 0) == 0) continue;
    out.push_back(p.tensor);
  }
  return out;
}

std::vector<std::vector<double>> snapshot(SegModel& model) {
  std::vector<std::vector<double>> out;
  for (auto& t : model.state()) out.emplace_back(t.tensor->data().begin(), t.tensor->data().end());
  return out;
}

void restore(SegModel& model, const std::vector<std::vector<double>>& values) {
  auto st = model.state();
  for (std::size_t i = 0; i < st.size(); ++i) std::copy(values[i].begin(), values[i].end(), st[i].tensor->data().begin());
}

std::vector<SliceSample> samples_of(const std::vector<VolumePair>& set, bool swa) {
  std::vector<SliceSample> out;
  for (const auto& v : set) {
    auto shared = std::make_shared<const VolumePair>(v);
    auto s = make_slice_samples(shared, swa);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace

double validation_loss(SegModel& model, const std::vector<SliceSample>& samples, int batch_size) {
  if (samples.empty()) throw DataError("validation set has no slices");
  const bool was_training = model.training();
  model.set_training(false);
  nn::NoGradGuard no_grad;
  double total = 0.0;
  std::size_t count = 0;
  batch_size = std::max(1, batch_size);
  try {
    for (std::size_t b = 0; b < samples.size(); b += batch_size) {
      const std::size_t e = std::min(samples.size(), b + batch_size);
      std::vector<InputPatch> images;
      std::vector<std::vector<std::uint8_t>> targets;
      for (std::size_t i = b; i < e; ++i) {
        images.push_back(samples[i].triplet());
        targets.push_back(samples[i].target());
      }
      std::vector<const std::vector<std::uint8_t>*> ptrs;
      for (const auto& t : targets) ptrs.push_back(&t);
      const Tensor probs = model.forward(make_batch(images));
      const double l = segmentation_loss(probs, one_hot_targets(ptrs, model.config().num_classes)).item();
      total += l * static_cast<double>(e - b);
      count += e - b;
    }
  } catch (...) {
    model.set_training(was_training);
    throw;
  }
  model.set_training(was_training);
  return total / static_cast<double>(count);
}

TrainReport train(SegModel& model, const std::vector<VolumePair>& train_set, const std::vector<VolumePair>& val_set,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  if (val_set.empty()) throw DataError("validation set is empty");
  const auto started = std::chrono::steady_clock::now();
  auto log = [&](const std::string& msg) {
    if (options.log) options.log(msg);
  };

  const auto train_samples = samples_of(train_set, cfg.swa);
  const auto val_samples = samples_of(val_set, false);
  if (train_samples.empty()) throw DataError("no training slices (all slices unannotated?)");
  for (const auto& s : train_samples)
    if (s.height() < cfg.patch_size || s.width() < cfg.patch_size)
      throw ShapeError("patch_size " + std::to_string(cfg.patch_size) + " exceeds slice size " +
                       std::to_string(s.height()) + "x" + std::to_string(s.width()));

  Optimizer opt(trainable(model), cfg.optimizer, cfg.weight_decay);
  EarlyStopping stopper(cfg.early_stop_patience);
  TrainReport report;
  std::vector<std::vector<double>> best_state;
  const int classes = model.config().num_classes;
  std::mt19937_64 order_rng = derive_stream(cfg.seed, 0x5eedULL);
  bool budget_exhausted = false;

  for (int epoch = 0; epoch < cfg.max_epochs && !budget_exhausted; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    model.set_training(true);
    std::vector<std::size_t> order(train_samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle(order, order_rng);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      if (cfg.max_steps && report.steps >= *cfg.max_steps) {
        budget_exhausted = true;
        break;
      }
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + b, order.begin() + e);
      const std::uint64_t batch_seed = nn::derive_seed(cfg.seed, "patches/" + std::to_string(report.steps));
      const auto patches = sample_patches(train_samples, idx, cfg.patch_size, batch_seed, cfg.workers);
      std::vector<InputPatch> images;
      std::vector<const std::vector<std::uint8_t>*> targets;
      for (const auto& p : patches) {
        images.push_back(p.image);
        targets.push_back(&p.target);
      }
      opt.zero_grad();
      Tensor loss = segmentation_loss(model.forward(make_batch(images)), one_hot_targets(targets, classes));
      const double value = loss.item();
      if (!std::isfinite(value))
        throw DivergenceError(epoch + 1, "training loss became non-finite in epoch " + std::to_string(epoch + 1));
      loss.backward();
      opt.step(lr);
      ++report.steps;
      epoch_loss += value;
      ++batches;
    }
    if (batches == 0) break;

    const double val = validation_loss(model, val_samples, cfg.batch_size);
    if (!std::isfinite(val))
      throw DivergenceError(epoch + 1, "validation loss became non-finite in epoch " + std::to_string(epoch + 1));
    report.train_losses.push_back(epoch_loss / batches);
    report.val_losses.push_back(val);
    report.learning_rates.push_back(lr);
    const bool improved = stopper.update(val);
    if (improved) {
      best_state = snapshot(model);
      if (options.checkpoint_path) {
        save_checkpoint(model, *options.checkpoint_path);
        report.checkpoint = options.checkpoint_path;
      }
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "epoch %d: train %.6f val %.6f lr %.3g%s", epoch + 1, epoch_loss / batches, val,
                  lr, improved ? " *" : "");
    log(buf);
    if (stopper.should_stop()) {
      report.stopped_early = true;
      break;
    }
  }

  if (best_state.empty()) throw DataError("training finished without a completed epoch");
  restore(model, best_state);
  model.set_training(false);
  report.best_epoch = stopper.best_epoch();
  report.best_val_loss = stopper.best_loss();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace medseg
