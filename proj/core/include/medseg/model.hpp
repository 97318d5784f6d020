#pragma once

// Segmentation network: backbone adapter -> BiFPN -> ESC channel gating ->
// three-block depthwise-separable head with per-class sigmoid outputs.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "medseg/layers.hpp"
#include "medseg/tensor.hpp"

namespace medseg {

enum class Backbone { efficientnet_style, convnext_style };

std::string to_string(Backbone b);
Backbone backbone_from_string(const std::string& s);

struct ModelConfig {
  Backbone backbone = Backbone::efficientnet_style;
  bool use_esc = true;
  bool use_bilinear_upsample = true;
  int patch_size = 256;
  int num_classes = 2;  // lung, findings
  int bifpn_channels = 64;
  int bifpn_levels = 5;
  int bifpn_repeats = 3;
  int esc_kernel = 7;
  int esc_dilation = 2;
  // Output width of each backbone stage (strides 4, 8, 16, 32, 64).
  std::vector<int> backbone_widths = {40, 80, 112, 192, 320};
  int stem_width = 32;
  int backbone_depth = 2;  // blocks per stage
  int expand_ratio = 6;
  std::uint64_t seed = 42;

  /// Spatial sizes must be multiples of this so every level is integral.
  int size_multiple() const { return 1 << (bifpn_levels + 1); }
  /// Throws ConfigError when an invariant is violated.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

/// Three neighbouring axial slices (inferior, center, superior) in raw HU.
struct InputPatch {
  int height = 0;
  int width = 0;
  std::vector<double> intensities;  // 3 * height * width, channel-major

  void validate() const;
};

/// Stacks patches into an (N, 3, H, W) tensor.
nn::Tensor make_batch(const std::vector<InputPatch>& patches);

struct FeaturePyramid {
  std::vector<nn::Tensor> levels;  // level k has stride 2^(k+2)

  void validate() const;
};

struct EscEmbedding {
  nn::Tensor gate;  // (N, bifpn_channels, 1, 1), strictly inside (0, 1)

  std::vector<double> values(int sample = 0) const;
};

struct Prediction {
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<double> probabilities;  // class-major

  double at(int cls, int y, int x) const {
    return probabilities[(static_cast<std::size_t>(cls) * height + y) * width + x];
  }
};

namespace arch {

/// Backbone adapters produce one feature map per stage at strides 4, 8, ...
class BackboneAdapter : public nn::Module {
 public:
  virtual std::vector<nn::Tensor> forward(const nn::Tensor& x) = 0;
  virtual std::vector<int> stage_channels() const = 0;
};

class EfficientBackbone;
class ConvNextBackbone;

class FusionNode : public nn::Module {
 public:
  FusionNode(int inputs, int channels);
  nn::Tensor forward(const std::vector<nn::Tensor>& inputs);
  /// relu(w_i) / (sum_j relu(w_j) + eps)
  std::vector<double> normalized_weights() const;
  static constexpr double kEps = 1e-4;

 protected:
  void init_parameter(const std::string& local_name, nn::Tensor& t,
                      std::uint64_t stream_seed) override;

 private:
  nn::Tensor* weights_;
  nn::SeparableConv2d* conv_;
  nn::BatchNorm2d* bn_;
};

class BiFpnLayer : public nn::Module {
 public:
  BiFpnLayer(int levels, int channels);
  std::vector<nn::Tensor> forward(const std::vector<nn::Tensor>& in);
  std::vector<const FusionNode*> nodes() const;

 private:
  int levels_;
  std::vector<FusionNode*> top_down_;   // index k for k < levels - 1
  std::vector<FusionNode*> bottom_up_;  // index k for k >= 1 (k = 0 when levels == 1)
};

class Esc : public nn::Module {
 public:
  Esc(int levels, int channels, int kernel, int dilation);
  nn::Tensor forward(const std::vector<nn::Tensor>& pyramid);
  std::vector<int> strides() const;

 private:
  std::vector<nn::DepthwiseConv2d*> depthwise_;
  std::vector<nn::Conv2d*> pointwise_;
  nn::Linear* embed_;
};

class SegHead : public nn::Module {
 public:
  SegHead(int channels, int num_classes, bool bilinear);
  nn::Tensor forward(const nn::Tensor& x);

 private:
  bool bilinear_;
  std::vector<nn::SeparableConv2d*> convs_;
  std::vector<nn::BatchNorm2d*> norms_;
  std::vector<nn::ConvTranspose2x2*> upsamplers_;
  nn::Conv2d* classifier_;
};

}  // namespace arch

class SegModel : public nn::Module {
 public:
  explicit SegModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }

  /// Raw backbone stage outputs for an (N, 3, H, W) batch; H and W must be
  /// multiples of config().size_multiple().
  std::vector<nn::Tensor> backbone_features(const nn::Tensor& batch);
  FeaturePyramid bifpn_forward(const std::vector<nn::Tensor>& raw);
  EscEmbedding esc_embed(const FeaturePyramid& pyramid);

  /// Per-class sigmoid probabilities, shape (N, num_classes, H, W).
  nn::Tensor forward(const nn::Tensor& batch);
  /// Single patch of exactly config().patch_size.
  Prediction predict(const InputPatch& patch);

  std::vector<int> esc_strides() const { return esc_->strides(); }
  std::vector<std::vector<double>> fusion_weights() const;

  /// Parameters by name prefix (e.g. "esc." or "backbone.").
  std::vector<nn::NamedTensor> parameters_with_prefix(const std::string& prefix);

  /// Loads named backbone tensors ("backbone.*"); shapes must match.
  void load_backbone_weights(const std::map<std::string, nn::Tensor>& weights);

 private:
  void check_input(const nn::Tensor& batch) const;

  ModelConfig config_;
  arch::BackboneAdapter* backbone_;
  std::vector<nn::Conv2d*> lateral_;
  std::vector<nn::BatchNorm2d*> lateral_norm_;
  std::vector<arch::BiFpnLayer*> bifpn_;
  arch::Esc* esc_;
  arch::SegHead* head_;
};

/// Builds and deterministically initializes a model. When a backbone weight
/// file (checkpoint format) is given its "backbone.*" tensors are loaded.
std::unique_ptr<SegModel> build_model(
    const ModelConfig& config,
    const std::optional<std::filesystem::path>& backbone_weights = std::nullopt);

}  // namespace medseg
