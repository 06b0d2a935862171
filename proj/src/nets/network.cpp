#include "fadelab/network.hpp"

#include <cmath>

#include "fadelab/error.hpp"
#include "fadelab/ops.hpp"
#include "fadelab/sampling.hpp"

namespace fadelab {

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "dense";
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kHead: return "head";
  }
  return "?";
}

LayerDesc LayerDesc::dense(std::size_t in, std::size_t out) {
  LayerDesc d;
  d.kind = LayerKind::kDense;
  d.in = in;
  d.out = out;
  return d;
}

LayerDesc LayerDesc::conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  LayerDesc d;
  d.kind = LayerKind::kConv2d;
  d.in_ch = in_ch;
  d.out_ch = out_ch;
  d.kernel = kernel;
  d.stride = stride;
  d.pad = pad;
  return d;
}

LayerDesc LayerDesc::relu() { return LayerDesc{}; }

LayerDesc LayerDesc::dropout(float p) {
  LayerDesc d;
  d.kind = LayerKind::kDropout;
  d.p = p;
  return d;
}

LayerDesc LayerDesc::flatten() {
  LayerDesc d;
  d.kind = LayerKind::kFlatten;
  return d;
}

LayerDesc LayerDesc::head(std::size_t in, std::size_t classes) {
  LayerDesc d = dense(in, classes);
  d.kind = LayerKind::kHead;
  return d;
}

std::vector<Shape> NetworkSpec::activation_shapes() const {
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + layer_kind_name(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::kDense:
      case LayerKind::kHead:
        require(cur == Shape{l.in}, ErrorCode::kShapeMismatch,
                where + " expects [" + std::to_string(l.in) + "], gets " + shape_str(cur));
        require(l.out > 0, ErrorCode::kInvalidArgument, where + " has zero outputs");
        cur = {l.out};
        break;
      case LayerKind::kConv2d: {
        require(cur.size() == 3 && cur[0] == l.in_ch, ErrorCode::kShapeMismatch,
                where + " expects [" + std::to_string(l.in_ch) + ",H,W], gets " + shape_str(cur));
        require(l.kernel > 0 && l.stride > 0 && l.out_ch > 0, ErrorCode::kInvalidArgument, where + " bad geometry");
        require(cur[1] + 2 * l.pad >= l.kernel && cur[2] + 2 * l.pad >= l.kernel, ErrorCode::kShapeMismatch,
                where + " kernel larger than input");
        cur = {l.out_ch, (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1, (cur[2] + 2 * l.pad - l.kernel) / l.stride + 1};
        break;
      }
      case LayerKind::kFlatten:
        cur = {shape_numel(cur)};
        break;
      case LayerKind::kDropout:
        require(l.p >= 0.0f && l.p < 1.0f, ErrorCode::kInvalidArgument, where + " needs 0 <= p < 1");
        break;
      case LayerKind::kRelu:
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void NetworkSpec::validate() const {
  require(!layers.empty(), ErrorCode::kInvalidArgument, "network '" + id + "' has no layers");
  require(!input_shape.empty(), ErrorCode::kInvalidArgument, "network '" + id + "' has no input shape");
  require(bayes_boundary > 0 && bayes_boundary < layers.size(), ErrorCode::kInvalidArgument,
          "network '" + id + "': bayes_boundary must lie in (0, layers)");
  require(layers.back().kind == LayerKind::kHead, ErrorCode::kInvalidArgument,
          "network '" + id + "': last layer must be the head");
  require(feature_tap >= bayes_boundary && feature_tap + 2 == layers.size(), ErrorCode::kInvalidArgument,
          "network '" + id + "': feature_tap must be the last Bayesian layer before the head");
  bool any_params = false;
  for (std::size_t i = bayes_boundary; i <= feature_tap; ++i) any_params = any_params || layers[i].has_params();
  require(any_params, ErrorCode::kInvalidArgument, "network '" + id + "': Bayesian sub-module has no parameters");
  for (std::size_t i = 0; i + 1 < layers.size(); ++i)
    require(layers[i].kind != LayerKind::kHead, ErrorCode::kInvalidArgument, "network '" + id + "': head must be last");
  activation_shapes();
}

std::size_t NetworkSpec::feature_dim() const { return shape_numel(activation_shapes().at(feature_tap)); }

bool NetworkSpec::has_dropout() const {
  for (const auto& l : layers)
    if (l.kind == LayerKind::kDropout) return true;
  return false;
}

nlohmann::json to_json(const NetworkSpec& spec) {
  using nlohmann::json;
  json layers = json::array();
  for (const auto& l : spec.layers) {
    json e{{"kind", layer_kind_name(l.kind)}};
    switch (l.kind) {
      case LayerKind::kDense:
      case LayerKind::kHead:
        e["in"] = l.in;
        e["out"] = l.out;
        break;
      case LayerKind::kConv2d:
        e["in_ch"] = l.in_ch;
        e["out_ch"] = l.out_ch;
        e["kernel"] = l.kernel;
        e["stride"] = l.stride;
        e["pad"] = l.pad;
        break;
      case LayerKind::kDropout:
        e["p"] = l.p;
        break;
      default:
        break;
    }
    layers.push_back(e);
  }
  return json{{"id", spec.id},
              {"input_shape", spec.input_shape},
              {"layers", layers},
              {"bayes_boundary", spec.bayes_boundary},
              {"feature_tap", spec.feature_tap}};
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    spec.id = j.at("id").get<std::string>();
    spec.input_shape = j.at("input_shape").get<Shape>();
    spec.bayes_boundary = j.at("bayes_boundary").get<std::size_t>();
    spec.feature_tap = j.at("feature_tap").get<std::size_t>();
    for (const auto& e : j.at("layers")) {
      const auto kind = e.at("kind").get<std::string>();
      if (kind == "dense") {
        spec.layers.push_back(LayerDesc::dense(e.at("in"), e.at("out")));
      } else if (kind == "head") {
        spec.layers.push_back(LayerDesc::head(e.at("in"), e.at("out")));
      } else if (kind == "conv2d") {
        spec.layers.push_back(LayerDesc::conv2d(e.at("in_ch"), e.at("out_ch"), e.at("kernel"), e.at("stride"), e.at("pad")));
      } else if (kind == "relu") {
        spec.layers.push_back(LayerDesc::relu());
      } else if (kind == "dropout") {
        spec.layers.push_back(LayerDesc::dropout(e.at("p").get<float>()));
      } else if (kind == "flatten") {
        spec.layers.push_back(LayerDesc::flatten());
      } else {
        fail(ErrorCode::kInvalidArgument, "unknown layer kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, std::string("network spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

NetworkSpec reference_network(const std::string& id) {
  NetworkSpec spec;
  spec.id = id;
  if (id == "mlp2") {
    spec.input_shape = {2};
    spec.layers = {LayerDesc::dense(2, 64), LayerDesc::relu(), LayerDesc::dense(64, 64), LayerDesc::relu(),
                   LayerDesc::head(64, 2)};
    spec.bayes_boundary = 2;
    spec.feature_tap = 3;
  } else if (id == "cnn" || id == "cnn-dropout") {
    spec.input_shape = {1, 28, 28};
    spec.layers = {LayerDesc::conv2d(1, 16, 3, 2, 1), LayerDesc::relu(), LayerDesc::conv2d(16, 32, 3, 2, 1),
                   LayerDesc::relu(), LayerDesc::flatten()};
    if (id == "cnn-dropout") spec.layers.push_back(LayerDesc::dropout(0.5f));
    spec.bayes_boundary = spec.layers.size();
    spec.layers.push_back(LayerDesc::dense(32 * 7 * 7, 64));
    spec.layers.push_back(LayerDesc::relu());
    spec.feature_tap = spec.layers.size() - 1;
    spec.layers.push_back(LayerDesc::head(64, 10));
  } else if (id == "mlp-mnist") {
    spec.input_shape = {1, 28, 28};
    spec.layers = {LayerDesc::flatten(), LayerDesc::dense(784, 256), LayerDesc::relu(), LayerDesc::dense(256, 128),
                   LayerDesc::relu(), LayerDesc::head(128, 10)};
    spec.bayes_boundary = 3;
    spec.feature_tap = 4;
  } else {
    fail(ErrorCode::kConfig, "unknown architecture id '" + id + "'");
  }
  spec.validate();
  return spec;
}

std::vector<std::string> reference_network_ids() { return {"mlp2", "cnn", "cnn-dropout", "mlp-mnist"}; }

ParamSet init_params(const NetworkSpec& spec, RngState& rng) {
  spec.validate();
  ParamSet params(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    if (l.kind == LayerKind::kDense || l.kind == LayerKind::kHead) {
      // He-uniform for hidden layers, LeCun-uniform for the head.
      const float bound = std::sqrt((l.kind == LayerKind::kHead ? 3.0f : 6.0f) / static_cast<float>(l.in));
      params[i].weight = sample_uniform(rng, {l.in, l.out}, -bound, bound);
      params[i].bias = Tensor::zeros({l.out});
    } else if (l.kind == LayerKind::kConv2d) {
      const float fan_in = static_cast<float>(l.in_ch * l.kernel * l.kernel);
      const float bound = std::sqrt(6.0f / fan_in);
      params[i].weight = sample_uniform(rng, {l.out_ch, l.in_ch, l.kernel, l.kernel}, -bound, bound);
      params[i].bias = Tensor::zeros({l.out_ch});
    }
    if (params[i].weight.defined()) {
      params[i].weight.set_requires_grad(true);
      params[i].bias.set_requires_grad(true);
    }
  }
  return params;
}

ParamSet clone_params(const ParamSet& params, bool requires_grad) {
  ParamSet out(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].weight.defined()) out[i].weight = params[i].weight.detach().set_requires_grad(requires_grad);
    if (params[i].bias.defined()) out[i].bias = params[i].bias.detach().set_requires_grad(requires_grad);
  }
  return out;
}

std::vector<Tensor> param_list(const ParamSet& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    if (p.weight.defined()) out.push_back(p.weight);
    if (p.bias.defined()) out.push_back(p.bias);
  }
  return out;
}

std::size_t param_count(const ParamSet& params) {
  std::size_t n = 0;
  for (const auto& t : param_list(params)) n += t.numel();
  return n;
}

std::string param_name(std::size_t layer, bool bias) {
  return "layer" + std::to_string(layer) + (bias ? ".bias" : ".weight");
}

void check_batch_shape(const NetworkSpec& spec, const Tensor& x) {
  Shape inst(x.shape().begin() + (x.rank() ? 1 : 0), x.shape().end());
  require(x.rank() == spec.input_shape.size() + 1 && inst == spec.input_shape, ErrorCode::kShapeMismatch,
          "network '" + spec.id + "' expects batches of " + shape_str(spec.input_shape) + ", got " + shape_str(x.shape()));
}

Tensor run_layer(const LayerDesc& l, const LayerParams& p, const Tensor& h, bool train_mode, RngState& rng) {
  switch (l.kind) {
    case LayerKind::kDense:
    case LayerKind::kHead:
      return ops::add(ops::matmul(h, p.weight), p.bias);
    case LayerKind::kConv2d:
      return ops::conv2d(h, p.weight, p.bias, l.stride, l.pad);
    case LayerKind::kRelu:
      return ops::relu(h);
    case LayerKind::kFlatten:
      return ops::reshape(h, {h.dim(0), h.numel() / std::max<std::size_t>(h.dim(0), 1)});
    case LayerKind::kDropout: {
      if (!train_mode || l.p == 0.0f) return h;
      const float keep = 1.0f - l.p;
      std::vector<float> mask(h.numel());
      for (auto& m : mask) m = rng.bernoulli(keep) ? 1.0f / keep : 0.0f;
      return ops::mul(h, Tensor::from_data(h.shape(), std::move(mask)));
    }
  }
  fail(ErrorCode::kInvalidArgument, "run_layer: unknown layer kind");
}

Tensor run_layers(const NetworkSpec& spec, const ParamSet& params, const Tensor& h, std::size_t first,
                  std::size_t last, bool train_mode, RngState& rng) {
  Tensor cur = h;
  for (std::size_t i = first; i <= last; ++i) cur = run_layer(spec.layers[i], params[i], cur, train_mode, rng);
  return cur;
}

ForwardResult forward(const NetworkSpec& spec, const ParamSet& params, const Tensor& x, bool train_mode,
                      RngState& rng) {
  check_batch_shape(spec, x);
  require(params.size() == spec.layers.size(), ErrorCode::kShapeMismatch, "forward: parameter set does not match network");
  ForwardResult r;
  r.z = run_layers(spec, params, x, 0, spec.feature_tap, train_mode, rng);
  r.logits = run_layers(spec, params, r.z, spec.feature_tap + 1, spec.layers.size() - 1, train_mode, rng);
  return r;
}

}  // namespace fadelab
