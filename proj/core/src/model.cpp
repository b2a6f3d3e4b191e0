#include "scae/model.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <regex>
#include <sstream>

#include "scae/errors.hpp"
#include "scae/rng.hpp"

namespace scae::model {

namespace {

constexpr double kLogEps = 1e-6;

// Normalises the unicode multiplication and minus signs used in published
// architecture tables so the parsers only deal with ASCII.
std::string ascii_spec(std::string_view spec) {
  std::string out(spec);
  const std::pair<std::string, std::string> subs[] = {
      {"\xC3\x97", "x"}, {"\xE2\x88\x92", "-"}, {"\xE2\x80\x93", "-"}, {" ", ""}};
  for (const auto& [from, to] : subs) {
    for (std::size_t pos = out.find(from); pos != std::string::npos; pos = out.find(from, pos)) {
      out.replace(pos, from.size(), to);
      pos += to.size();
    }
  }
  return out;
}

// Anchor of the canonical template placement: a template copied by the
// identity pose lands at rows/cols [(H-T)/2, (H-T)/2 + T).
double template_anchor(int canvas, int tmpl) {
  return static_cast<double>((canvas - tmpl) / 2) + (tmpl - 1) / 2.0;
}

torch::Tensor entropy(const torch::Tensor& p) { return -(p * torch::log(p + 1e-8)).sum(-1); }

// Scales the translation entries into roughly the same range as the linear
// part so the part-pose error is not dominated by pixel offsets.
torch::Tensor normalise_affine(const torch::Tensor& affine, int canvas) {
  const double s = 2.0 / canvas;
  auto scale = torch::tensor({1.0, 1.0, s, 1.0, 1.0, s}, affine.options());
  return affine * scale;
}

torch::Tensor squash_linear(const torch::Tensor& raw) {
  auto sx = 0.5 + 1.5 * torch::sigmoid(raw.select(-1, 0));
  auto sy = 0.5 + 1.5 * torch::sigmoid(raw.select(-1, 1));
  auto shear = 0.5 * torch::tanh(raw.select(-1, 2));
  auto rot = std::numbers::pi * torch::tanh(raw.select(-1, 3));
  return torch::stack({sx, sy, shear, rot}, -1);
}

// Object poses and object->part offsets translate anywhere on the canvas.
torch::Tensor squash_free_pose(const torch::Tensor& raw, int canvas) {
  const double half = canvas / 2.0;
  auto t = torch::tanh(raw.slice(-1, 4, 6)) * half;
  return torch::cat({squash_linear(raw), t}, -1);
}

}  // namespace

std::vector<ConvLayerSpec> parse_part_cnn(std::string_view spec) {
  const std::string s = ascii_spec(spec);
  static const std::regex group(R"((\d+)x\((\d+):(\d+)\))");
  std::vector<ConvLayerSpec> layers;
  std::size_t consumed = 0;
  for (auto it = std::sregex_iterator(s.begin(), s.end(), group); it != std::sregex_iterator();
       ++it) {
    const auto& m = *it;
    const auto gap = s.substr(consumed, static_cast<std::size_t>(m.position()) - consumed);
    if (!(gap.empty() || (gap == "-" && consumed > 0))) {
      throw ConfigError("malformed part_cnn spec '" + std::string(spec) + "'");
    }
    const int repeat = std::stoi(m[1]);
    const ConvLayerSpec layer{std::stoi(m[2]), std::stoi(m[3])};
    if (repeat < 1 || layer.channels < 1 || layer.stride < 1) {
      throw ConfigError("part_cnn spec needs positive counts: '" + std::string(spec) + "'");
    }
    for (int r = 0; r < repeat; ++r) layers.push_back(layer);
    consumed = static_cast<std::size_t>(m.position() + m.length());
  }
  if (layers.empty() || consumed != s.size()) {
    throw ConfigError("malformed part_cnn spec '" + std::string(spec) + "'");
  }
  return layers;
}

SetTransformerSpec parse_set_transformer(std::string_view spec) {
  const std::string s = ascii_spec(spec);
  static const std::regex form(R"((\d+)x\((\d+)-(\d+)\)-(\d+))");
  std::smatch m;
  if (!std::regex_match(s, m, form)) {
    throw ConfigError("malformed set_transformer spec '" + std::string(spec) + "'");
  }
  SetTransformerSpec out{std::stoi(m[1]), std::stoi(m[2]), std::stoi(m[3]), std::stoi(m[4])};
  if (out.layers < 1 || out.heads < 1 || out.hidden < 1 || out.output < 1 ||
      out.hidden % out.heads != 0) {
    throw ConfigError("set_transformer spec needs positive sizes with heads dividing hidden: '" +
                      std::string(spec) + "'");
  }
  return out;
}

void ScaeConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid ScaeConfig: " + what);
  };
  require(canvas_size >= 1, "canvas_size >= 1");
  require(num_part_capsules >= 1, "num_part_capsules >= 1");
  require(num_object_capsules >= 1, "num_object_capsules >= 1");
  require(channels == 1, "only single-channel images are supported");
  require(template_size >= 2 && template_size <= canvas_size,
          "2 <= template_size <= canvas_size");
  require(part_noise_scale >= 0 && object_noise_scale >= 0, "noise scales >= 0");
  require(attribute_dim >= 1, "attribute_dim >= 1");
  require(pose_loss_weight >= 0 && prior_sparsity_weight >= 0 && posterior_sparsity_weight >= 0,
          "loss weights >= 0");
  require(posterior_pose_sigma > 0, "posterior_pose_sigma > 0");
  require(attention_sharpness > 0, "attention_sharpness > 0");
  require(translation_offset >= 0, "translation_offset >= 0");
  parse_part_cnn(part_cnn);
  parse_set_transformer(set_transformer);
}

nlohmann::json ScaeConfig::to_json() const {
  return {{"canvas_size", canvas_size},
          {"num_part_capsules", num_part_capsules},
          {"num_object_capsules", num_object_capsules},
          {"channels", channels},
          {"template_size", template_size},
          {"part_noise_scale", part_noise_scale},
          {"object_noise_scale", object_noise_scale},
          {"part_cnn", part_cnn},
          {"set_transformer", set_transformer},
          {"attribute_dim", attribute_dim},
          {"pose_loss_weight", pose_loss_weight},
          {"prior_sparsity_weight", prior_sparsity_weight},
          {"posterior_sparsity_weight", posterior_sparsity_weight},
          {"posterior_pose_sigma", posterior_pose_sigma},
          {"attention_sharpness", attention_sharpness},
          {"translation_offset", translation_offset},
          {"dynamic_part_offsets", dynamic_part_offsets},
          {"ocae_stop_gradient", ocae_stop_gradient}};
}

ScaeConfig ScaeConfig::from_json(const nlohmann::json& j) { return from_json(j, ScaeConfig{}); }

ScaeConfig ScaeConfig::from_json(const nlohmann::json& j, ScaeConfig base) {
  if (!j.is_object()) throw ConfigError("ScaeConfig JSON must be an object");
  const auto known = base.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown ScaeConfig key '" + key + "'");
  }
  auto merged = known;
  merged.update(j);
  try {
    base.canvas_size = merged.at("canvas_size").get<int>();
    base.num_part_capsules = merged.at("num_part_capsules").get<int>();
    base.num_object_capsules = merged.at("num_object_capsules").get<int>();
    base.channels = merged.at("channels").get<int>();
    base.template_size = merged.at("template_size").get<int>();
    base.part_noise_scale = merged.at("part_noise_scale").get<double>();
    base.object_noise_scale = merged.at("object_noise_scale").get<double>();
    base.part_cnn = merged.at("part_cnn").get<std::string>();
    base.set_transformer = merged.at("set_transformer").get<std::string>();
    base.attribute_dim = merged.at("attribute_dim").get<int>();
    base.pose_loss_weight = merged.at("pose_loss_weight").get<double>();
    base.prior_sparsity_weight = merged.at("prior_sparsity_weight").get<double>();
    base.posterior_sparsity_weight = merged.at("posterior_sparsity_weight").get<double>();
    base.posterior_pose_sigma = merged.at("posterior_pose_sigma").get<double>();
    base.attention_sharpness = merged.at("attention_sharpness").get<double>();
    base.translation_offset = merged.at("translation_offset").get<double>();
    base.dynamic_part_offsets = merged.at("dynamic_part_offsets").get<bool>();
    base.ocae_stop_gradient = merged.at("ocae_stop_gradient").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad ScaeConfig value: ") + e.what());
  }
  base.validate();
  return base;
}

ScaeConfig ScaeConfig::paper() { return ScaeConfig{}; }

ScaeConfig ScaeConfig::toy() {
  ScaeConfig c;
  c.canvas_size = 14;
  c.num_part_capsules = 4;
  c.num_object_capsules = 4;
  c.template_size = 5;
  c.part_cnn = "1x(4:2)-1x(4:1)";
  c.set_transformer = "1x(1-8)-8";
  c.attribute_dim = 2;
  c.translation_offset = 2.0;
  return c;
}

ScaeConfig ScaeConfig::desk() {
  ScaeConfig c;
  c.part_cnn = "2x(32:2)-2x(32:1)";
  c.set_transformer = "3x(1-16)-64";
  c.posterior_pose_sigma = 0.3;
  c.prior_sparsity_weight = 0.01;
  c.posterior_sparsity_weight = 0.0;
  return c;
}

torch::Tensor pose_to_affine(const torch::Tensor& pose) {
  TORCH_CHECK(pose.size(-1) == 6, "pose must end in 6 entries");
  auto sx = pose.select(-1, 0), sy = pose.select(-1, 1), sh = pose.select(-1, 2);
  auto rot = pose.select(-1, 3);
  auto c = torch::cos(rot), s = torch::sin(rot);
  return torch::stack({c * sx, c * sh - s * sy, pose.select(-1, 4), s * sx, s * sh + c * sy,
                       pose.select(-1, 5)},
                      -1);
}

torch::Tensor compose_affine(const torch::Tensor& outer, const torch::Tensor& inner) {
  auto o = outer.unbind(-1);
  auto i = inner.unbind(-1);
  return torch::stack({o[0] * i[0] + o[1] * i[3], o[0] * i[1] + o[1] * i[4],
                       o[0] * i[2] + o[1] * i[5] + o[2], o[3] * i[0] + o[4] * i[3],
                       o[3] * i[1] + o[4] * i[4], o[3] * i[2] + o[4] * i[5] + o[5]},
                      -1);
}

torch::Tensor sparsity_loss(const torch::Tensor& presence) {
  auto p = presence / (presence.sum(-1, true) + 1e-8);
  return entropy(p).mean() - entropy(p.mean(0));
}

ScaeModelImpl::ScaeModelImpl(ScaeConfig config) : config_(std::move(config)) {
  config_.validate();
  cnn_ = parse_part_cnn(config_.part_cnn);
  st_ = parse_set_transformer(config_.set_transformer);
  const int M = config_.num_part_capsules;
  const int K = config_.num_object_capsules;
  const int n = config_.attribute_dim;
  const int T = config_.template_size;

  convs_ = register_module("convs", torch::nn::ModuleList());
  int in_channels = config_.channels;
  for (const auto& layer : cnn_) {
    convs_->push_back(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(in_channels, layer.channels, 3).stride(layer.stride).padding(1)));
    in_channels = layer.channels;
  }
  part_head_ = register_module(
      "part_head", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, M * (7 + n), 1)));
  part_attention_ = register_module(
      "part_attention", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, M, 1)));
  template_logits_ = register_parameter("template_logits", torch::zeros({M, T, T}));

  const int d = st_.hidden;
  set_input_ = register_module("set_input", torch::nn::Linear(7 + n, d));
  for (int l = 0; l < st_.layers; ++l) {
    self_attention_.push_back(make_attention("self_attention" + std::to_string(l), d));
  }
  pooling_ = make_attention("pooling", d);
  seeds_ = register_parameter("seeds", torch::zeros({K, d}));
  set_output_ = register_module("set_output", torch::nn::Linear(d, st_.output));
  object_head_ = register_module("object_head", torch::nn::Linear(st_.output, 7));
  part_offsets_ = register_parameter("part_offsets", torch::zeros({K, M, 6}));
  if (config_.dynamic_part_offsets) {
    dynamic_offsets_ = register_module("dynamic_offsets", torch::nn::Linear(st_.output, M * 6));
  }
  reset_parameters(0);
}

ScaeModelImpl::Attention ScaeModelImpl::make_attention(const std::string& name, int dim) {
  Attention a;
  a.q = register_module(name + "_q", torch::nn::Linear(dim, dim));
  a.k = register_module(name + "_k", torch::nn::Linear(dim, dim));
  a.v = register_module(name + "_v", torch::nn::Linear(dim, dim));
  a.ff = register_module(name + "_ff", torch::nn::Linear(dim, dim));
  return a;
}

void ScaeModelImpl::reset_parameters(std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = make_generator(seed);
  // Same bound as the default PyTorch layer init, drawn from our own stream
  // so the result does not depend on global RNG state.
  auto fan_in_bound = [](const torch::Tensor& w) {
    std::int64_t fan_in = 1;
    for (std::int64_t i = 1; i < w.dim(); ++i) fan_in *= w.size(i);
    return 1.0 / std::sqrt(static_cast<double>(fan_in));
  };
  auto init_layer = [&](torch::nn::Module& m) {
    auto params = m.named_parameters(false);
    if (!params.contains("weight")) return;
    const double bound = fan_in_bound(params["weight"]);
    params["weight"].uniform_(-bound, bound, gen);
    if (params.contains("bias")) params["bias"].uniform_(-bound, bound, gen);
  };
  for (auto& m : modules(false)) init_layer(*m);
  template_logits_.normal_(0.0, 0.5, gen);
  seeds_.normal_(0.0, 1.0, gen);  // distinct slots from the start
  part_offsets_.normal_(0.0, 0.1, gen);
  if (dynamic_offsets_) {
    dynamic_offsets_->weight.zero_();
    dynamic_offsets_->bias.zero_();
  }
}

torch::Tensor ScaeModelImpl::attend(Attention& block, const torch::Tensor& queries,
                                    const torch::Tensor& keys,
                                    const torch::Tensor& key_log_mask) {
  const auto B = queries.size(0), Nq = queries.size(1), Nk = keys.size(1);
  const int h = st_.heads;
  const auto dh = st_.hidden / h;
  auto split = [&](const torch::Tensor& t, std::int64_t n) {
    return t.view({B, n, h, dh}).transpose(1, 2);  // [B, h, n, dh]
  };
  auto q = block.q->forward(queries);
  auto k = split(block.k->forward(keys), Nk);
  auto v = split(block.v->forward(keys), Nk);
  auto logits = torch::matmul(split(q, Nq), k.transpose(-1, -2)) / std::sqrt(double(dh));
  logits = logits + key_log_mask.view({B, 1, 1, Nk});
  auto mixed = torch::matmul(torch::softmax(logits, -1), v).transpose(1, 2).reshape({B, Nq, -1});
  auto hidden = q + mixed;
  return hidden + torch::relu(block.ff->forward(hidden));
}

PartCapsuleSet ScaeModelImpl::encode_parts(const torch::Tensor& images,
                                           const EncodeOptions& options,
                                           torch::Tensor* presence_for_objects,
                                           torch::Tensor* part_features) {
  const int M = config_.num_part_capsules;
  const int n = config_.attribute_dim;
  const int H = config_.canvas_size;
  const auto B = images.size(0);

  auto h = images.unsqueeze(1);
  for (const auto& conv : *convs_) h = torch::relu(conv->as<torch::nn::Conv2d>()->forward(h));
  const auto fh = h.size(2), fw = h.size(3);

  // Each part capsule pools the feature map with its own spatial attention.
  auto attention = torch::softmax(
      config_.attention_sharpness * part_attention_->forward(h).view({B, M, 1, fh * fw}), -1);
  auto features = (part_head_->forward(h).view({B, M, 7 + n, fh * fw}) * attention).sum(-1);
  auto raw_pose = features.slice(-1, 0, 6);
  auto presence_logit = features.select(-1, 6);
  auto attributes = features.slice(-1, 7, 7 + n);

  // Translation is the attention centroid (in template-anchor coordinates)
  // plus a bounded learned correction.
  const double anchor = template_anchor(H, config_.template_size);
  auto opts = images.options();
  auto cy = (torch::arange(fh, opts) + 0.5) * (double(H) / fh) - 0.5 - anchor;
  auto cx = (torch::arange(fw, opts) + 0.5) * (double(H) / fw) - 0.5 - anchor;
  auto grid = torch::meshgrid({cy, cx}, "ij");
  auto weights = attention.squeeze(2);
  auto centroid_x = (weights * grid[1].reshape({1, 1, -1})).sum(-1);
  auto centroid_y = (weights * grid[0].reshape({1, 1, -1})).sum(-1);
  auto t = torch::tanh(raw_pose.slice(-1, 4, 6)) * config_.translation_offset;
  auto pose = torch::cat({squash_linear(raw_pose), (centroid_x + t.select(-1, 0)).unsqueeze(-1),
                          (centroid_y + t.select(-1, 1)).unsqueeze(-1)},
                         -1);

  if (options.training && config_.part_noise_scale > 0) {
    auto u = options.generator ? torch::rand(presence_logit.sizes(), *options.generator, opts)
                               : torch::rand(presence_logit.sizes(), opts);
    presence_logit = presence_logit + (2 * u - 1) * config_.part_noise_scale;
  }
  auto presence = torch::sigmoid(presence_logit);

  *presence_for_objects = presence;
  *part_features = torch::cat({raw_pose, presence.unsqueeze(-1), attributes}, -1);
  return {pose, presence, attributes};
}

ScaeOutputs ScaeModelImpl::encode(const torch::Tensor& images, const EncodeOptions& options) {
  const int H = config_.canvas_size;
  const int K = config_.num_object_capsules;
  const int M = config_.num_part_capsules;
  if (images.dim() != 3 || images.size(1) != H || images.size(2) != H) {
    throw ConfigError("encode expects [B," + std::to_string(H) + "," + std::to_string(H) +
                      "] images, got " + std::to_string(images.dim()) + "-D input");
  }
  const auto B = images.size(0);

  ScaeOutputs out;
  torch::Tensor part_presence, part_features;
  out.parts = encode_parts(images, options, &part_presence, &part_features);
  auto target_pose = out.parts.pose;
  if (options.training && config_.ocae_stop_gradient) {
    part_presence = part_presence.detach();
    part_features = part_features.detach();
    target_pose = target_pose.detach();
  }

  // Set Transformer over the parts, masked by part presence, then pooling
  // by K learned seeds: one slot per object capsule.
  auto key_mask = torch::log(part_presence + kLogEps);
  auto z = set_input_->forward(part_features);
  for (auto& block : self_attention_) z = attend(block, z, z, key_mask);
  auto objects = torch::relu(
      set_output_->forward(attend(pooling_, seeds_.unsqueeze(0).expand({B, K, -1}), z, key_mask)));
  auto head = object_head_->forward(objects);
  auto object_logit = head.select(-1, 6);
  if (options.training && config_.object_noise_scale > 0) {
    auto u = options.generator
                 ? torch::rand(object_logit.sizes(), *options.generator, object_logit.options())
                 : torch::rand(object_logit.sizes(), object_logit.options());
    object_logit = object_logit + (2 * u - 1) * config_.object_noise_scale;
  }
  out.prior_presence = torch::sigmoid(object_logit);

  // Every object predicts every part pose: object pose composed with a
  // learned object->part offset.
  auto offsets = part_offsets_.unsqueeze(0);
  if (dynamic_offsets_) {
    offsets = offsets + dynamic_offsets_->forward(objects).view({B, K, M, 6});
  } else {
    offsets = offsets.expand({B, K, M, 6});
  }
  auto object_affine = pose_to_affine(squash_free_pose(head.slice(-1, 0, 6), H)).unsqueeze(2);
  auto predicted = compose_affine(object_affine, pose_to_affine(squash_free_pose(offsets, H)));
  auto target = pose_to_affine(target_pose).unsqueeze(1);
  out.part_pose_error = (normalise_affine(predicted, H) - normalise_affine(target, H)).pow(2).sum(-1);

  const double inv_two_var = 0.5 / (config_.posterior_pose_sigma * config_.posterior_pose_sigma);
  auto assignment = torch::softmax(
      torch::log(out.prior_presence + kLogEps).unsqueeze(-1) - out.part_pose_error * inv_two_var, 1);
  out.posterior_presence = assignment * part_presence.unsqueeze(1);

  if (options.with_reconstruction) out.reconstruction = reconstruct(out.parts);
  return out;
}

torch::Tensor ScaeModelImpl::templates() { return torch::sigmoid(template_logits_); }

void ScaeModelImpl::set_template_logits(const torch::Tensor& logits) {
  TORCH_CHECK(logits.sizes() == template_logits_.sizes(), "template logits shape mismatch");
  torch::NoGradGuard no_grad;
  template_logits_.copy_(logits);
}

torch::Tensor ScaeModelImpl::reconstruct(const PartCapsuleSet& parts) {
  const int H = config_.canvas_size;
  const int T = config_.template_size;
  const int M = config_.num_part_capsules;
  const auto B = parts.pose.size(0);
  auto opts = parts.pose.options();

  auto affine = pose_to_affine(parts.pose).unbind(-1);  // a b tx c d ty, each [B,M]
  auto det = affine[0] * affine[4] - affine[1] * affine[3];
  auto ia = (affine[4] / det).view({B, M, 1, 1});
  auto ib = (-affine[1] / det).view({B, M, 1, 1});
  auto ic = (-affine[3] / det).view({B, M, 1, 1});
  auto id = (affine[0] / det).view({B, M, 1, 1});

  // Inverse-map every canvas pixel into template coordinates.
  const double anchor = template_anchor(H, T);
  auto coords = torch::arange(H, opts);
  auto grid = torch::meshgrid({coords, coords}, "ij");
  auto X = grid[1].view({1, 1, H, H}) - anchor - affine[2].view({B, M, 1, 1});
  auto Y = grid[0].view({1, 1, H, H}) - anchor - affine[5].view({B, M, 1, 1});
  const double half = (T - 1) / 2.0;
  auto u = (ia * X + ib * Y) / half;
  auto v = (ic * X + id * Y) / half;
  auto sample_grid = torch::stack({u, v}, -1).view({B * M, H, H, 2});

  auto tmpl = templates().to(opts.dtype()).unsqueeze(0).expand({B, M, T, T}).reshape({B * M, 1, T, T});
  namespace F = torch::nn::functional;
  auto warped = F::grid_sample(tmpl, sample_grid,
                               F::GridSampleFuncOptions()
                                   .mode(torch::kBilinear)
                                   .padding_mode(torch::kZeros)
                                   .align_corners(true))
                    .view({B, M, H, H});
  return std::get<0>((warped * parts.presence.view({B, M, 1, 1})).max(1)).clamp(0.0, 1.0);
}

ScaeModel init_model(const ScaeConfig& config, std::uint64_t seed) {
  ScaeModel model(config);
  model->reset_parameters(seed);
  return model;
}

LossBreakdown compute_loss(const ScaeModel& model, const torch::Tensor& input,
                           const torch::Tensor& target, const ScaeOutputs& outputs) {
  if (input.sizes() != target.sizes()) {
    throw ConfigError("compute_loss: input and target shapes differ");
  }
  if (!outputs.reconstruction.defined()) {
    throw ConfigError("compute_loss needs outputs encoded with reconstruction");
  }
  const auto& c = model->config();
  LossBreakdown loss;
  loss.rec = (outputs.reconstruction - target).pow(2).sum({1, 2}).mean();

  auto weight = outputs.prior_presence.unsqueeze(-1) * outputs.posterior_presence;
  loss.pose = ((weight * outputs.part_pose_error).sum({1, 2}) / (weight.sum({1, 2}) + 1e-8)).mean();
  loss.prior_sparsity = sparsity_loss(outputs.prior_presence);
  loss.posterior_sparsity = sparsity_loss(outputs.posterior_presence.sum(-1));
  loss.non_rec = c.pose_loss_weight * loss.pose + c.prior_sparsity_weight * loss.prior_sparsity +
                 c.posterior_sparsity_weight * loss.posterior_sparsity;
  loss.total = loss.rec + loss.non_rec;
  return loss;
}

void init_templates_from_patches(ScaeModel& model, const torch::Tensor& images,
                                 std::uint64_t seed) {
  const auto& c = model->config();
  const int T = c.template_size;
  const int H = c.canvas_size;
  const int M = c.num_part_capsules;
  TORCH_CHECK(images.dim() == 3 && images.size(1) == H, "template init expects [N,H,W] images");
  std::mt19937_64 rng(seed);
  auto logits = model->templates().detach().clone().logit(1e-6);
  const auto n = static_cast<std::uint64_t>(images.size(0));
  const auto positions = static_cast<std::uint64_t>(H - T + 1);
  int filled = 0;
  // Bright patches give every template a stroke-like start; dark ones are
  // rejected. The attempt cap keeps blank datasets from looping forever.
  for (int attempt = 0; filled < M && attempt < 1000 * M; ++attempt) {
    const auto i = static_cast<std::int64_t>(uniform_index(rng, n));
    const auto y = static_cast<std::int64_t>(uniform_index(rng, positions));
    const auto x = static_cast<std::int64_t>(uniform_index(rng, positions));
    auto patch = images[i].slice(0, y, y + T).slice(1, x, x + T);
    if (patch.mean().item<double>() <= 0.15) continue;
    logits[filled++] = patch.clamp(0.02, 0.98).logit().to(logits.dtype());
  }
  model->set_template_logits(logits);
}

std::int64_t parameter_count(const torch::nn::Module& module) {
  std::int64_t total = 0;
  for (const auto& p : module.parameters()) total += p.numel();
  return total;
}

ScaeModel clone_model(const ScaeModel& model) {
  ScaeModel copy(model->config());
  copy->to(model->parameters().front().scalar_type());
  torch::NoGradGuard no_grad;
  auto src = model->named_parameters();
  for (auto& item : copy->named_parameters()) item.value().copy_(src[item.key()]);
  copy->train(model->is_training());
  return copy;
}

}  // namespace scae::model
