#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace scae::model {

/// One convolution of the part encoder: output channels and stride.
struct ConvLayerSpec {
  int channels = 0;
  int stride = 1;
  bool operator==(const ConvLayerSpec&) const = default;
};

/// Set Transformer shape: `layers` self-attention blocks with `heads` heads
/// of width `hidden`, followed by a projection to `output` units.
struct SetTransformerSpec {
  int layers = 0;
  int heads = 1;
  int hidden = 0;
  int output = 0;
  bool operator==(const SetTransformerSpec&) const = default;
};

/// Parses "2x(128:2)-2x(128:1)" (the unicode x and minus signs are accepted).
std::vector<ConvLayerSpec> parse_part_cnn(std::string_view spec);
/// Parses "3x(1-16)-256".
SetTransformerSpec parse_set_transformer(std::string_view spec);

struct ScaeConfig {
  int canvas_size = 40;
  int num_part_capsules = 24;    // M
  int num_object_capsules = 24;  // K
  int channels = 1;
  int template_size = 11;
  double part_noise_scale = 4.0;
  double object_noise_scale = 4.0;
  std::string part_cnn = "2x(128:2)-2x(128:1)";
  std::string set_transformer = "3x(1-16)-256";
  int attribute_dim = 16;

  // Loss composition of the non-reconstruction terms.
  double pose_loss_weight = 1.0;
  double prior_sparsity_weight = 1.0;
  double posterior_sparsity_weight = 1.0;
  double posterior_pose_sigma = 1.0;

  // Part encoder details.
  double attention_sharpness = 5.0;
  double translation_offset = 4.0;  // canvas pixels around the attention centroid
  bool dynamic_part_offsets = false;
  // When training, part capsules enter the object encoder detached so the
  // object-level terms do not reshape the parts. Inference keeps the full
  // graph: the attack differentiates prior presences w.r.t. pixels.
  bool ocae_stop_gradient = true;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys raise ConfigError; missing keys keep their defaults.
  static ScaeConfig from_json(const nlohmann::json& j);
  static ScaeConfig from_json(const nlohmann::json& j, ScaeConfig base);

  /// Architecture used for published MNIST / Fashion-MNIST runs.
  static ScaeConfig paper();
  /// Four parts, four objects, 14x14 canvas, 5x5 templates: gradient checks.
  static ScaeConfig toy();
  /// Reduced widths that train in minutes on one CPU core.
  static ScaeConfig desk();
};

/// Per-part outputs of the part capsule encoder.
struct PartCapsuleSet {
  torch::Tensor pose;        // [B, M, 6]: scale_x, scale_y, shear, rotation, t_x, t_y
  torch::Tensor presence;    // [B, M] in [0, 1]
  torch::Tensor attributes;  // [B, M, n]
};

struct ScaeOutputs {
  PartCapsuleSet parts;
  torch::Tensor prior_presence;      // [B, K] in [0, 1]
  torch::Tensor posterior_presence;  // [B, K, M] in [0, 1]
  torch::Tensor reconstruction;      // [B, H, W] in [0, 1]; undefined when skipped
  torch::Tensor part_pose_error;     // [B, K, M] squared error of predicted part poses
};

struct LossBreakdown {
  torch::Tensor rec;       // reconstruction term against the target image
  torch::Tensor non_rec;   // everything else
  torch::Tensor total;     // rec + non_rec
  torch::Tensor pose;      // components of non_rec, unweighted
  torch::Tensor prior_sparsity;
  torch::Tensor posterior_sparsity;
};

struct EncodeOptions {
  bool training = false;           // inject presence noise
  bool with_reconstruction = true;
  torch::Generator* generator = nullptr;  // noise source; global RNG when null
};

/// 2x3 affine entries (a, b, t_x, c, d, t_y) for a [..., 6] pose vector:
/// [[a b], [c d]] = R(rotation) * [[scale_x shear], [0 scale_y]].
torch::Tensor pose_to_affine(const torch::Tensor& pose);

/// Composes two [..., 6] affine-entry tensors: outer(inner(u)).
torch::Tensor compose_affine(const torch::Tensor& outer, const torch::Tensor& inner);

/// Mean per-row entropy of the normalised rows minus the entropy of their
/// batch mean; low when rows are peaked and usage is even.
torch::Tensor sparsity_loss(const torch::Tensor& presence);

class ScaeModelImpl : public torch::nn::Module {
 public:
  explicit ScaeModelImpl(ScaeConfig config);

  ScaeOutputs encode(const torch::Tensor& images, const EncodeOptions& options = {});

  /// Renders every template through its part pose and composites by
  /// presence-weighted maximum.
  torch::Tensor reconstruct(const PartCapsuleSet& parts);

  /// Template intensities in [0,1], [M, T, T].
  torch::Tensor templates();
  void set_template_logits(const torch::Tensor& logits);

  const ScaeConfig& config() const { return config_; }

  /// Deterministic parameter initialisation from a seed.
  void reset_parameters(std::uint64_t seed);

 private:
  struct Attention {
    torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, ff{nullptr};
  };

  Attention make_attention(const std::string& name, int dim);
  torch::Tensor attend(Attention& block, const torch::Tensor& queries,
                       const torch::Tensor& keys, const torch::Tensor& key_log_mask);
  PartCapsuleSet encode_parts(const torch::Tensor& images, const EncodeOptions& options,
                              torch::Tensor* presence_for_objects, torch::Tensor* part_features);

  ScaeConfig config_;
  std::vector<ConvLayerSpec> cnn_;
  SetTransformerSpec st_;

  torch::nn::ModuleList convs_{nullptr};
  torch::nn::Conv2d part_head_{nullptr};
  torch::nn::Conv2d part_attention_{nullptr};
  torch::Tensor template_logits_;

  torch::nn::Linear set_input_{nullptr};
  std::vector<Attention> self_attention_;
  Attention pooling_;
  torch::Tensor seeds_;
  torch::nn::Linear set_output_{nullptr};
  torch::nn::Linear object_head_{nullptr};
  torch::Tensor part_offsets_;  // [K, M, 6] static object->part poses
  torch::nn::Linear dynamic_offsets_{nullptr};
};
TORCH_MODULE(ScaeModel);

ScaeModel init_model(const ScaeConfig& config, std::uint64_t seed);

inline ScaeOutputs encode(ScaeModel& model, const torch::Tensor& images,
                          const EncodeOptions& options = {}) {
  return model->encode(images, options);
}

/// rec = mean over the batch of the squared L2 distance between the
/// reconstruction and `target`; non_rec = weighted part-pose, prior and
/// posterior sparsity terms. `input` is unused beyond shape checks: every
/// term is already a function of `outputs`.
LossBreakdown compute_loss(const ScaeModel& model, const torch::Tensor& input,
                           const torch::Tensor& target, const ScaeOutputs& outputs);

/// Initialises templates from random bright patches of `images` [N,H,W].
void init_templates_from_patches(ScaeModel& model, const torch::Tensor& images,
                                 std::uint64_t seed);

std::int64_t parameter_count(const torch::nn::Module& module);

/// Deep copy with identical parameter values.
ScaeModel clone_model(const ScaeModel& model);

}  // namespace scae::model
