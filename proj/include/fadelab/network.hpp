#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fadelab/rng.hpp"
#include "fadelab/tensor.hpp"
#include "json.hpp"

namespace fadelab {

enum class LayerKind { kDense, kConv2d, kRelu, kDropout, kFlatten, kHead };

const char* layer_kind_name(LayerKind kind);

struct LayerDesc {
  LayerKind kind = LayerKind::kRelu;
  // dense / head: in -> out (out is the class count for the head)
  std::size_t in = 0;
  std::size_t out = 0;
  // conv2d
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  // dropout
  float p = 0.0f;

  static LayerDesc dense(std::size_t in, std::size_t out);
  static LayerDesc conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                          std::size_t pad);
  static LayerDesc relu();
  static LayerDesc dropout(float p);
  static LayerDesc flatten();
  static LayerDesc head(std::size_t in, std::size_t classes);

  bool has_params() const { return kind == LayerKind::kDense || kind == LayerKind::kConv2d || kind == LayerKind::kHead; }
};

// Layers [bayes_boundary, feature_tap] form the Bayesian sub-module; the
// activation leaving feature_tap is the feature z and the only layer after
// it is the task head.
struct NetworkSpec {
  std::string id;
  Shape input_shape;
  std::vector<LayerDesc> layers;
  std::size_t bayes_boundary = 0;
  std::size_t feature_tap = 0;

  // Throws kInvalidArgument / kShapeMismatch describing the first violation.
  void validate() const;
  // Per-instance output shape of each layer.
  std::vector<Shape> activation_shapes() const;
  std::size_t num_classes() const { return layers.back().out; }
  std::size_t feature_dim() const;
  bool is_bayesian(std::size_t layer) const { return layer >= bayes_boundary && layer <= feature_tap; }
  bool has_dropout() const;
};

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

// Reference architectures: "mlp2" (2-64-64-2), "cnn" (28x28 digits),
// "cnn-dropout" (cnn with dropout feeding the feature layer) and "mlp-mnist"
// (784-256-128-10 on 28x28 digits).
NetworkSpec reference_network(const std::string& id);
std::vector<std::string> reference_network_ids();

struct LayerParams {
  Tensor weight;
  Tensor bias;
};

// One entry per layer; parameter-free layers hold undefined tensors.
using ParamSet = std::vector<LayerParams>;

ParamSet init_params(const NetworkSpec& spec, RngState& rng);
ParamSet clone_params(const ParamSet& params, bool requires_grad);
std::vector<Tensor> param_list(const ParamSet& params);
std::size_t param_count(const ParamSet& params);
std::string param_name(std::size_t layer, bool bias);

struct ForwardResult {
  Tensor logits;
  Tensor z;
};

// Runs a single layer on a batch.
Tensor run_layer(const LayerDesc& layer, const LayerParams& params, const Tensor& h, bool train_mode, RngState& rng);

// Runs layers [first, last] of the spec.
Tensor run_layers(const NetworkSpec& spec, const ParamSet& params, const Tensor& h, std::size_t first,
                  std::size_t last, bool train_mode, RngState& rng);

ForwardResult forward(const NetworkSpec& spec, const ParamSet& params, const Tensor& x, bool train_mode,
                      RngState& rng);

void check_batch_shape(const NetworkSpec& spec, const Tensor& x);

}  // namespace fadelab
