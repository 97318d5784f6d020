#include "medseg/model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "medseg/checkpoint.hpp"
#include "medseg/error.hpp"

namespace medseg {

using nn::Tensor;

std::string to_string(Backbone b) {
  return b == Backbone::efficientnet_style ? "efficientnet_style" : "convnext_style";
}

Backbone backbone_from_string(const std::string& s) {
  if (s == "efficientnet_style") return Backbone::efficientnet_style;
  if (s == "convnext_style") return Backbone::convnext_style;
  throw ConfigError("unknown backbone '" + s + "'");
}

void ModelConfig::validate() const {
  if (bifpn_levels < 1 || bifpn_levels > 5)
    throw ConfigError("bifpn_levels must be in [1, 5]");
  if (patch_size <= 0 || patch_size % size_multiple() != 0)
    throw ConfigError("patch_size " + std::to_string(patch_size) +
                      " is not a positive multiple of " + std::to_string(size_multiple()));
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (bifpn_channels < 8) throw ConfigError("bifpn_channels must be >= 8");
  if (bifpn_repeats < 1) throw ConfigError("bifpn_repeats must be >= 1");
  if (esc_kernel < 1 || esc_kernel % 2 == 0) throw ConfigError("esc_kernel must be odd");
  if (esc_dilation < 1) throw ConfigError("esc_dilation must be >= 1");
  if (static_cast<int>(backbone_widths.size()) < bifpn_levels)
    throw ConfigError("backbone_widths needs one entry per pyramid level");
  for (int w : backbone_widths)
    if (w < 1) throw ConfigError("backbone widths must be positive");
  if (stem_width < 1 || backbone_depth < 1 || expand_ratio < 1)
    throw ConfigError("stem_width, backbone_depth and expand_ratio must be positive");
}

std::string model_config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["backbone"] = to_string(c.backbone);
  j["use_esc"] = c.use_esc;
  j["use_bilinear_upsample"] = c.use_bilinear_upsample;
  j["patch_size"] = c.patch_size;
  j["num_classes"] = c.num_classes;
  j["bifpn_channels"] = c.bifpn_channels;
  j["bifpn_levels"] = c.bifpn_levels;
  j["bifpn_repeats"] = c.bifpn_repeats;
  j["esc_kernel"] = c.esc_kernel;
  j["esc_dilation"] = c.esc_dilation;
  j["backbone_widths"] = c.backbone_widths;
  j["stem_width"] = c.stem_width;
  j["backbone_depth"] = c.backbone_depth;
  j["expand_ratio"] = c.expand_ratio;
  j["seed"] = c.seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  const auto known = nlohmann::json::parse(model_config_to_json(ModelConfig{}));
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  ModelConfig c;
  try {
    if (j.contains("backbone")) c.backbone = backbone_from_string(j.at("backbone").get<std::string>());
    c.use_esc = j.value("use_esc", c.use_esc);
    c.use_bilinear_upsample = j.value("use_bilinear_upsample", c.use_bilinear_upsample);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.bifpn_channels = j.value("bifpn_channels", c.bifpn_channels);
    c.bifpn_levels = j.value("bifpn_levels", c.bifpn_levels);
    c.bifpn_repeats = j.value("bifpn_repeats", c.bifpn_repeats);
    c.esc_kernel = j.value("esc_kernel", c.esc_kernel);
    c.esc_dilation = j.value("esc_dilation", c.esc_dilation);
    c.backbone_widths = j.value("backbone_widths", c.backbone_widths);
    c.stem_width = j.value("stem_width", c.stem_width);
    c.backbone_depth = j.value("backbone_depth", c.backbone_depth);
    c.expand_ratio = j.value("expand_ratio", c.expand_ratio);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

void InputPatch::validate() const {
  if (height <= 0 || width <= 0) throw ShapeError("InputPatch: empty spatial size");
  if (intensities.size() != static_cast<std::size_t>(3) * height * width)
    throw ShapeError("InputPatch: expected exactly 3 channels of " + std::to_string(height) +
                     "x" + std::to_string(width));
  for (double v : intensities)
    if (!std::isfinite(v)) throw DataError("InputPatch: non-finite intensity");
}

Tensor make_batch(const std::vector<InputPatch>& patches) {
  if (patches.empty()) throw ShapeError("make_batch: no patches");
  const int h = patches.front().height;
  const int w = patches.front().width;
  std::vector<double> values;
  values.reserve(patches.size() * 3 * h * w);
  for (const auto& p : patches) {
    p.validate();
    if (p.height != h || p.width != w) throw ShapeError("make_batch: patch sizes differ");
    values.insert(values.end(), p.intensities.begin(), p.intensities.end());
  }
  return Tensor::from({static_cast<int>(patches.size()), 3, h, w}, std::move(values));
}

void FeaturePyramid::validate() const {
  if (levels.empty()) throw ShapeError("FeaturePyramid: no levels");
  const auto& s0 = levels.front().shape();
  for (std::size_t k = 1; k < levels.size(); ++k) {
    const auto& prev = levels[k - 1].shape();
    const auto& s = levels[k].shape();
    if (s.c != s0.c) throw ShapeError("FeaturePyramid: channel counts differ across levels");
    if (s.h * 2 != prev.h || s.w * 2 != prev.w)
      throw ShapeError("FeaturePyramid: level " + std::to_string(k) +
                       " is not half the size of the previous level");
  }
}

std::vector<double> EscEmbedding::values(int sample) const {
  const auto c = static_cast<std::size_t>(gate.shape().c);
  auto d = gate.data();
  return {d.begin() + sample * c, d.begin() + (sample + 1) * c};
}

namespace arch {

namespace {

/// Inverted residual block with squeeze-excitation (EfficientNet MBConv).
class MbConv : public nn::Module {
 public:
  MbConv(int in, int out, int expand, int kernel, int stride)
      : residual_(stride == 1 && in == out) {
    const int mid = in * expand;
    if (expand > 1) {
      expand_ = &register_module("expand", std::make_unique<nn::Conv2d>(in, mid, 1, nn::Conv2dGeometry{}, false));
      expand_bn_ = &register_module("expand_bn", std::make_unique<nn::BatchNorm2d>(mid));
    }
    depthwise_ = &register_module(
        "depthwise", std::make_unique<nn::DepthwiseConv2d>(
                         mid, kernel, nn::Conv2dGeometry{stride, (kernel - 1) / 2, 1}));
    depthwise_bn_ = &register_module("depthwise_bn", std::make_unique<nn::BatchNorm2d>(mid));
    se_ = &register_module("se", std::make_unique<nn::SqueezeExcite>(mid, std::max(1, in / 4)));
    project_ = &register_module("project", std::make_unique<nn::Conv2d>(mid, out, 1, nn::Conv2dGeometry{}, false));
    project_bn_ = &register_module("project_bn", std::make_unique<nn::BatchNorm2d>(out));
  }

  Tensor forward(const Tensor& x) {
    Tensor h = x;
    if (expand_) h = nn::swish(expand_bn_->forward(expand_->forward(h)));
    h = nn::swish(depthwise_bn_->forward(depthwise_->forward(h)));
    h = se_->forward(h);
    h = project_bn_->forward(project_->forward(h));
    return residual_ ? nn::add(h, x) : h;
  }

 private:
  bool residual_;
  nn::Conv2d* expand_ = nullptr;
  nn::BatchNorm2d* expand_bn_ = nullptr;
  nn::DepthwiseConv2d* depthwise_;
  nn::BatchNorm2d* depthwise_bn_;
  nn::SqueezeExcite* se_;
  nn::Conv2d* project_;
  nn::BatchNorm2d* project_bn_;
};

/// ConvNeXt block with batch norm in place of layer norm.
class ConvNextBlock : public nn::Module {
 public:
  explicit ConvNextBlock(int channels) {
    depthwise_ = &register_module(
        "depthwise", std::make_unique<nn::DepthwiseConv2d>(channels, 7, nn::Conv2dGeometry{1, 3, 1}));
    norm_ = &register_module("norm", std::make_unique<nn::BatchNorm2d>(channels));
    expand_ = &register_module("expand", std::make_unique<nn::Conv2d>(channels, 4 * channels, 1));
    project_ = &register_module("project", std::make_unique<nn::Conv2d>(4 * channels, channels, 1));
  }

  Tensor forward(const Tensor& x) {
    Tensor h = norm_->forward(depthwise_->forward(x));
    h = project_->forward(nn::gelu(expand_->forward(h)));
    return nn::add(h, x);
  }

 private:
  nn::DepthwiseConv2d* depthwise_;
  nn::BatchNorm2d* norm_;
  nn::Conv2d* expand_;
  nn::Conv2d* project_;
};

}  // namespace

class EfficientBackbone : public BackboneAdapter {
 public:
  explicit EfficientBackbone(const ModelConfig& c)
      : widths_(c.backbone_widths.begin(), c.backbone_widths.begin() + c.bifpn_levels) {
    stem_ = &register_module("stem", std::make_unique<nn::Conv2d>(3, c.stem_width, 3,
                                                                  nn::Conv2dGeometry{2, 1, 1}, false));
    stem_bn_ = &register_module("stem_bn", std::make_unique<nn::BatchNorm2d>(c.stem_width));
    int in = c.stem_width;
    for (std::size_t k = 0; k < widths_.size(); ++k) {
      const int kernel = k == 0 ? 3 : 5;
      std::vector<MbConv*> blocks;
      for (int b = 0; b < c.backbone_depth; ++b) {
        const std::string name = "stage" + std::to_string(k) + ".block" + std::to_string(b);
        blocks.push_back(&register_module(
            name, std::make_unique<MbConv>(b == 0 ? in : widths_[k], widths_[k], c.expand_ratio,
                                           kernel, b == 0 ? 2 : 1)));
      }
      stages_.push_back(std::move(blocks));
      in = widths_[k];
    }
  }

  std::vector<Tensor> forward(const Tensor& x) override {
    Tensor h = nn::swish(stem_bn_->forward(stem_->forward(x)));
    std::vector<Tensor> out;
    for (auto& blocks : stages_) {
      for (auto* b : blocks) h = b->forward(h);
      out.push_back(h);
    }
    return out;
  }

  std::vector<int> stage_channels() const override { return widths_; }

 private:
  std::vector<int> widths_;
  nn::Conv2d* stem_;
  nn::BatchNorm2d* stem_bn_;
  std::vector<std::vector<MbConv*>> stages_;
};

class ConvNextBackbone : public BackboneAdapter {
 public:
  explicit ConvNextBackbone(const ModelConfig& c)
      : widths_(c.backbone_widths.begin(), c.backbone_widths.begin() + c.bifpn_levels) {
    stem_ = &register_module("stem", std::make_unique<nn::Conv2d>(3, widths_[0], 4,
                                                                  nn::Conv2dGeometry{4, 0, 1}));
    stem_bn_ = &register_module("stem_bn", std::make_unique<nn::BatchNorm2d>(widths_[0]));
    for (std::size_t k = 0; k < widths_.size(); ++k) {
      const std::string stage = "stage" + std::to_string(k);
      if (k > 0) {
        down_norm_.push_back(&register_module(stage + ".down_norm",
                                              std::make_unique<nn::BatchNorm2d>(widths_[k - 1])));
        down_.push_back(&register_module(
            stage + ".down", std::make_unique<nn::Conv2d>(widths_[k - 1], widths_[k], 2,
                                                          nn::Conv2dGeometry{2, 0, 1})));
      }
      std::vector<ConvNextBlock*> blocks;
      for (int b = 0; b < c.backbone_depth; ++b)
        blocks.push_back(&register_module(stage + ".block" + std::to_string(b),
                                          std::make_unique<ConvNextBlock>(widths_[k])));
      stages_.push_back(std::move(blocks));
    }
  }

  std::vector<Tensor> forward(const Tensor& x) override {
    Tensor h = stem_bn_->forward(stem_->forward(x));
    std::vector<Tensor> out;
    for (std::size_t k = 0; k < stages_.size(); ++k) {
      if (k > 0) h = down_[k - 1]->forward(down_norm_[k - 1]->forward(h));
      for (auto* b : stages_[k]) h = b->forward(h);
      out.push_back(h);
    }
    return out;
  }

  std::vector<int> stage_channels() const override { return widths_; }

 private:
  std::vector<int> widths_;
  nn::Conv2d* stem_;
  nn::BatchNorm2d* stem_bn_;
  std::vector<nn::BatchNorm2d*> down_norm_;
  std::vector<nn::Conv2d*> down_;
  std::vector<std::vector<ConvNextBlock*>> stages_;
};

FusionNode::FusionNode(int inputs, int channels) {
  weights_ = &register_parameter("weights", Tensor::full({1, inputs, 1, 1}, 1.0));
  conv_ = &register_module("conv", std::make_unique<nn::SeparableConv2d>(channels, channels, 3));
  bn_ = &register_module("bn", std::make_unique<nn::BatchNorm2d>(channels));
}

void FusionNode::init_parameter(const std::string&, Tensor& t, std::uint64_t) {
  auto v = t.data();
  std::fill(v.begin(), v.end(), 1.0);
}

Tensor FusionNode::forward(const std::vector<Tensor>& inputs) {
  Tensor fused = nn::weighted_fusion(inputs, *weights_, kEps);
  return bn_->forward(conv_->forward(nn::swish(fused)));
}

std::vector<double> FusionNode::normalized_weights() const {
  auto raw = weights_->data();
  std::vector<double> w(raw.size());
  double total = kEps;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    w[i] = std::max(0.0, raw[i]);
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

BiFpnLayer::BiFpnLayer(int levels, int channels) : levels_(levels) {
  top_down_.assign(levels, nullptr);
  bottom_up_.assign(levels, nullptr);
  if (levels == 1) {
    bottom_up_[0] = &register_module("out0", std::make_unique<FusionNode>(1, channels));
    return;
  }
  for (int k = levels - 2; k >= 0; --k)
    top_down_[k] = &register_module("td" + std::to_string(k), std::make_unique<FusionNode>(2, channels));
  for (int k = 1; k < levels; ++k)
    bottom_up_[k] = &register_module("out" + std::to_string(k),
                                     std::make_unique<FusionNode>(k < levels - 1 ? 3 : 2, channels));
}

std::vector<Tensor> BiFpnLayer::forward(const std::vector<Tensor>& in) {
  if (levels_ == 1) return {bottom_up_[0]->forward({in[0]})};
  std::vector<Tensor> td(levels_);
  td[levels_ - 1] = in[levels_ - 1];
  for (int k = levels_ - 2; k >= 0; --k)
    td[k] = top_down_[k]->forward({in[k], nn::upsample_nearest2x(td[k + 1])});
  std::vector<Tensor> out(levels_);
  out[0] = td[0];
  for (int k = 1; k < levels_; ++k) {
    Tensor down = nn::max_pool3x3s2(out[k - 1]);
    if (k < levels_ - 1)
      out[k] = bottom_up_[k]->forward({in[k], td[k], down});
    else
      out[k] = bottom_up_[k]->forward({in[k], down});
  }
  return out;
}

std::vector<const FusionNode*> BiFpnLayer::nodes() const {
  std::vector<const FusionNode*> out;
  for (auto* n : top_down_)
    if (n) out.push_back(n);
  for (auto* n : bottom_up_)
    if (n) out.push_back(n);
  return out;
}

Esc::Esc(int levels, int channels, int kernel, int dilation) {
  for (int k = 0; k < levels; ++k) {
    const std::string name = "level" + std::to_string(k);
    const nn::Conv2dGeometry g{1 << (k + 1), dilation * (kernel - 1) / 2, dilation};
    depthwise_.push_back(&register_module(name + ".depthwise",
                                          std::make_unique<nn::DepthwiseConv2d>(channels, kernel, g)));
    pointwise_.push_back(&register_module(
        name + ".pointwise",
        std::make_unique<nn::Conv2d>(channels, channels, 1, nn::Conv2dGeometry{}, false)));
  }
  embed_ = &register_module("embed", std::make_unique<nn::Linear>(channels, channels));
}

Tensor Esc::forward(const std::vector<Tensor>& pyramid) {
  Tensor acc;
  for (std::size_t k = 0; k < depthwise_.size(); ++k) {
    Tensor pooled = nn::global_avg_pool(pointwise_[k]->forward(depthwise_[k]->forward(pyramid[k])));
    acc = acc.defined() ? nn::add(acc, pooled) : pooled;
  }
  return nn::sigmoid(embed_->forward(acc));
}

std::vector<int> Esc::strides() const {
  std::vector<int> out;
  for (const auto* d : depthwise_) out.push_back(d->geometry().stride);
  return out;
}

SegHead::SegHead(int channels, int num_classes, bool bilinear) : bilinear_(bilinear) {
  for (int b = 0; b < 3; ++b) {
    const std::string name = "block" + std::to_string(b);
    convs_.push_back(&register_module(name + ".conv",
                                      std::make_unique<nn::SeparableConv2d>(channels, channels, 3)));
    norms_.push_back(&register_module(name + ".bn", std::make_unique<nn::BatchNorm2d>(channels)));
  }
  if (!bilinear) {
    for (int u = 0; u < 2; ++u)
      upsamplers_.push_back(&register_module("up" + std::to_string(u),
                                             std::make_unique<nn::ConvTranspose2x2>(channels, channels)));
  }
  classifier_ = &register_module("classifier", std::make_unique<nn::Conv2d>(channels, num_classes, 1));
}

Tensor SegHead::forward(const Tensor& x) {
  Tensor h = x;
  for (int b = 0; b < 3; ++b) {
    h = nn::swish(norms_[b]->forward(convs_[b]->forward(h)));
    if (b < 2) h = bilinear_ ? nn::upsample_bilinear2x(h) : upsamplers_[b]->forward(h);
  }
  return nn::sigmoid(classifier_->forward(h));
}

}  // namespace arch

// ---------------------------------------------------------------------------
// SegModel

SegModel::SegModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  if (c.backbone == Backbone::efficientnet_style)
    backbone_ = &register_module("backbone", std::make_unique<arch::EfficientBackbone>(c));
  else
    backbone_ = &register_module("backbone", std::make_unique<arch::ConvNextBackbone>(c));

  const auto widths = backbone_->stage_channels();
  for (int k = 0; k < c.bifpn_levels; ++k) {
    const std::string name = "lateral" + std::to_string(k);
    lateral_.push_back(&register_module(
        name + ".conv", std::make_unique<nn::Conv2d>(widths[k], c.bifpn_channels, 1,
                                                     nn::Conv2dGeometry{}, false)));
    lateral_norm_.push_back(
        &register_module(name + ".bn", std::make_unique<nn::BatchNorm2d>(c.bifpn_channels)));
  }
  for (int r = 0; r < c.bifpn_repeats; ++r)
    bifpn_.push_back(&register_module("bifpn" + std::to_string(r),
                                      std::make_unique<arch::BiFpnLayer>(c.bifpn_levels, c.bifpn_channels)));
  // ESC parameters exist in every configuration so checkpoints share a
  // layout; with use_esc off they are simply not part of the graph.
  esc_ = &register_module("esc", std::make_unique<arch::Esc>(c.bifpn_levels, c.bifpn_channels,
                                                              c.esc_kernel, c.esc_dilation));
  head_ = &register_module("head", std::make_unique<arch::SegHead>(c.bifpn_channels, c.num_classes,
                                                                   c.use_bilinear_upsample));
  initialize(c.seed);
}

void SegModel::check_input(const Tensor& batch) const {
  const auto& s = batch.shape();
  if (s.c != 3) throw ShapeError("input must have exactly 3 slice channels, got " + std::to_string(s.c));
  const int m = config_.size_multiple();
  if (s.h <= 0 || s.w <= 0 || s.h % m != 0 || s.w % m != 0)
    throw ShapeError("input spatial size " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " is not a multiple of " + std::to_string(m));
  for (double v : batch.data())
    if (!std::isfinite(v)) throw DataError("input contains non-finite intensities");
}

std::vector<Tensor> SegModel::backbone_features(const Tensor& batch) {
  check_input(batch);
  return backbone_->forward(batch);
}

FeaturePyramid SegModel::bifpn_forward(const std::vector<Tensor>& raw) {
  if (static_cast<int>(raw.size()) != config_.bifpn_levels)
    throw ShapeError("BiFPN expects " + std::to_string(config_.bifpn_levels) + " levels, got " +
                     std::to_string(raw.size()));
  std::vector<Tensor> levels;
  for (int k = 0; k < config_.bifpn_levels; ++k)
    levels.push_back(lateral_norm_[k]->forward(lateral_[k]->forward(raw[k])));
  for (auto* layer : bifpn_) levels = layer->forward(levels);
  FeaturePyramid p{std::move(levels)};
  p.validate();
  return p;
}

EscEmbedding SegModel::esc_embed(const FeaturePyramid& pyramid) {
  pyramid.validate();
  if (static_cast<int>(pyramid.levels.size()) != config_.bifpn_levels ||
      pyramid.levels.front().shape().c != config_.bifpn_channels)
    throw ShapeError("ESC: pyramid does not match the model configuration");
  return {esc_->forward(pyramid.levels)};
}

Tensor SegModel::forward(const Tensor& batch) {
  FeaturePyramid pyramid = bifpn_forward(backbone_features(batch));
  Tensor top = pyramid.levels.front();
  if (config_.use_esc) top = nn::mul_channel(top, esc_embed(pyramid).gate);
  return head_->forward(top);
}

Prediction SegModel::predict(const InputPatch& patch) {
  patch.validate();
  if (patch.height != config_.patch_size || patch.width != config_.patch_size)
    throw ShapeError("patch is " + std::to_string(patch.height) + "x" + std::to_string(patch.width) +
                     ", model expects " + std::to_string(config_.patch_size));
  nn::NoGradGuard no_grad;
  Tensor out = forward(make_batch({patch}));
  auto d = out.data();
  return {config_.num_classes, patch.height, patch.width, {d.begin(), d.end()}};
}

std::vector<std::vector<double>> SegModel::fusion_weights() const {
  std::vector<std::vector<double>> out;
  for (const auto* layer : bifpn_)
    for (const auto* node : layer->nodes()) out.push_back(node->normalized_weights());
  return out;
}

std::vector<nn::NamedTensor> SegModel::parameters_with_prefix(const std::string& prefix) {
  std::vector<nn::NamedTensor> out;
  for (auto& p : parameters())
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

void SegModel::load_backbone_weights(const std::map<std::string, Tensor>& weights) {
  int loaded = 0;
  for (auto& entry : state()) {
    if (entry.name.rfind("backbone.", 0) != 0) continue;
    auto it = weights.find(entry.name);
    if (it == weights.end()) continue;
    if (!(it->second.shape() == entry.tensor->shape()))
      throw ShapeError("backbone weight '" + entry.name + "' has shape " + it->second.shape().str() +
                       ", expected " + entry.tensor->shape().str());
    std::copy(it->second.data().begin(), it->second.data().end(), entry.tensor->data().begin());
    ++loaded;
  }
  if (loaded == 0) throw FormatError("no backbone.* tensors matched the model");
}

std::unique_ptr<SegModel> build_model(const ModelConfig& config,
                                      const std::optional<std::filesystem::path>& backbone_weights) {
  auto model = std::make_unique<SegModel>(config);
  if (backbone_weights) {
    Checkpoint ckpt = read_checkpoint(*backbone_weights);
    std::map<std::string, Tensor> named;
    for (auto& [name, t] : ckpt.tensors) named.emplace(name, t);
    model->load_backbone_weights(named);
  }
  return model;
}

}  // namespace medseg
