#include "fadelab/fade.hpp"

#include <algorithm>
#include <cmath>

#include "fadelab/error.hpp"
#include "fadelab/ops.hpp"

namespace fadelab {

namespace {

void check_posterior(const FadePosterior& post) {
  require(post.candidates.size() >= 2, ErrorCode::kInvalidArgument,
          "FADE posterior needs at least 2 candidates, has " + std::to_string(post.candidates.size()));
  require(post.shared.size() == post.spec.layers.size(), ErrorCode::kShapeMismatch,
          "FADE shared parameters do not match the network");
}

Tensor stack_layer(const FadePosterior& post, std::size_t layer, bool bias) {
  std::vector<Tensor> parts;
  parts.reserve(post.num_candidates());
  for (const auto& cand : post.candidates) parts.push_back(bias ? cand[layer].bias : cand[layer].weight);
  return ops::concat(parts, 0);
}

// Unbiased per-instance variance, summed over coordinates, of a [B,T,D] buffer.
std::vector<double> stacked_variance(std::span<const float> data, std::size_t b, std::size_t t, std::size_t d) {
  require(t >= 2, ErrorCode::kInvalidArgument, "variance needs at least 2 samples, got " + std::to_string(t));
  std::vector<double> out(b);
  std::vector<double> mean(d);
  for (std::size_t i = 0; i < b; ++i) {
    const float* rows = data.data() + i * t * d;
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t j = 0; j < d; ++j) mean[j] += rows[s * d + j];
    for (auto& m : mean) m /= static_cast<double>(t);
    // two passes, so that identical samples give exactly zero
    double sq = 0.0;
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t j = 0; j < d; ++j) {
        const double dev = rows[s * d + j] - mean[j];
        sq += dev * dev;
      }
    out[i] = sq / static_cast<double>(t - 1);
  }
  return out;
}

std::vector<double> sample_list_variance(std::span<const Tensor> samples) {
  require(samples.size() >= 2, ErrorCode::kInvalidArgument,
          "variance needs at least 2 samples, got " + std::to_string(samples.size()));
  const Shape& shape = samples[0].shape();
  require(!shape.empty(), ErrorCode::kShapeMismatch, "variance samples must be batched");
  const std::size_t b = shape[0], d = samples[0].numel() / std::max<std::size_t>(b, 1), t = samples.size();
  std::vector<float> buf(b * t * d);
  for (std::size_t s = 0; s < t; ++s) {
    require(samples[s].shape() == shape, ErrorCode::kShapeMismatch,
            "variance sample " + std::to_string(s) + " has shape " + shape_str(samples[s].shape()) + ", expected " +
                shape_str(shape));
    const auto src = samples[s].data();
    for (std::size_t i = 0; i < b; ++i) std::copy_n(src.begin() + i * d, d, buf.begin() + (i * t + s) * d);
  }
  return stacked_variance(buf, b, t, d);
}

}  // namespace

ParamSet FadePosterior::candidate_params(std::size_t k) const {
  require(k < candidates.size(), ErrorCode::kInvalidArgument,
          "candidate " + std::to_string(k) + " out of range for C=" + std::to_string(candidates.size()));
  ParamSet full = shared;
  for (std::size_t i = spec.bayes_boundary; i <= spec.feature_tap; ++i) full[i] = candidates[k][i];
  return full;
}

std::vector<Tensor> FadePosterior::shared_tensors() const { return param_list(shared); }

std::vector<Tensor> FadePosterior::candidate_tensors(std::size_t k) const {
  require(k < candidates.size(), ErrorCode::kInvalidArgument, "candidate index out of range");
  return param_list(candidates[k]);
}

FadePosterior FadePosterior::clone(bool requires_grad) const {
  FadePosterior out;
  out.spec = spec;
  out.shared = clone_params(shared, requires_grad);
  for (const auto& c : candidates) out.candidates.push_back(clone_params(c, requires_grad));
  return out;
}

CandidateAssignment CandidateAssignment::uniform(std::size_t batch, std::size_t num_candidates, RngState& rng) {
  require(num_candidates >= 1, ErrorCode::kInvalidArgument, "assignment needs at least one candidate");
  CandidateAssignment a;
  a.ids.resize(batch);
  for (auto& id : a.ids) id = static_cast<std::size_t>(rng.below(num_candidates));
  return a;
}

CandidateAssignment CandidateAssignment::constant(std::size_t batch, std::size_t candidate) {
  return CandidateAssignment{std::vector<std::size_t>(batch, candidate)};
}

FadePosterior init_from_params(const NetworkSpec& spec, const ParamSet& params, std::size_t num_candidates) {
  spec.validate();
  require(num_candidates >= 2, ErrorCode::kInvalidArgument,
          "FADE needs C >= 2 candidates, got " + std::to_string(num_candidates));
  require(params.size() == spec.layers.size(), ErrorCode::kShapeMismatch, "parameters do not match the network");
  FadePosterior post;
  post.spec = spec;
  const ParamSet copy = clone_params(params, true);
  post.shared.resize(spec.layers.size());
  ParamSet bayes(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) (spec.is_bayesian(i) ? bayes[i] : post.shared[i]) = copy[i];
  for (std::size_t k = 0; k < num_candidates; ++k) post.candidates.push_back(clone_params(bayes, true));
  return post;
}

FadePosterior init_from_map(const Checkpoint& ckpt, const NetworkSpec& spec, std::size_t num_candidates) {
  return init_from_params(spec, params_from_checkpoint(ckpt, spec), num_candidates);
}

Tensor fade_trunk(const FadePosterior& post, const Tensor& x, bool train_mode, RngState& rng) {
  const auto& spec = post.spec;
  return spec.bayes_boundary == 0 ? x : run_layers(spec, post.shared, x, 0, spec.bayes_boundary - 1, train_mode, rng);
}

Tensor fade_submodule(const FadePosterior& post, const Tensor& h, const CandidateAssignment& assign, bool train_mode,
                      RngState& rng) {
  check_posterior(post);
  const std::size_t b = h.dim(0), c = post.num_candidates();
  require(assign.ids.size() == b, ErrorCode::kShapeMismatch,
          "assignment has " + std::to_string(assign.ids.size()) + " entries for a batch of " + std::to_string(b));
  for (auto id : assign.ids)
    require(id < c, ErrorCode::kInvalidArgument,
            "candidate id " + std::to_string(id) + " out of range for C=" + std::to_string(c));
  const auto& spec = post.spec;

  // Group rows by candidate, run each group through its own sub-module and
  // scatter the results back into batch order.
  std::vector<std::vector<std::size_t>> groups(c);
  for (std::size_t i = 0; i < b; ++i) groups[assign.ids[i]].push_back(i);
  std::vector<Tensor> parts;
  std::vector<std::size_t> order;
  order.reserve(b);
  for (std::size_t k = 0; k < c; ++k) {
    if (groups[k].empty()) continue;
    const Tensor hk = groups[k].size() == b ? h : ops::gather_rows(h, groups[k]);
    parts.push_back(run_layers(spec, post.candidates[k], hk, spec.bayes_boundary, spec.feature_tap, train_mode, rng));
    order.insert(order.end(), groups[k].begin(), groups[k].end());
  }
  if (parts.size() == 1) return parts[0];
  std::vector<std::size_t> inverse(b);
  for (std::size_t pos = 0; pos < b; ++pos) inverse[order[pos]] = pos;
  return ops::gather_rows(ops::concat(parts, 0), inverse);
}

Tensor fade_head(const FadePosterior& post, const Tensor& z, bool train_mode, RngState& rng) {
  const auto& spec = post.spec;
  return run_layers(spec, post.shared, z, spec.feature_tap + 1, spec.layers.size() - 1, train_mode, rng);
}

ForwardResult forward_instancewise(const FadePosterior& post, const Tensor& x, const CandidateAssignment& assign,
                                   bool train_mode, RngState& rng) {
  check_posterior(post);
  check_batch_shape(post.spec, x);
  require(assign.ids.size() == x.dim(0), ErrorCode::kShapeMismatch,
          "assignment has " + std::to_string(assign.ids.size()) + " entries for a batch of " +
              std::to_string(x.dim(0)));
  ForwardResult r;
  r.z = fade_submodule(post, fade_trunk(post, x, train_mode, rng), assign, train_mode, rng);
  r.logits = fade_head(post, r.z, train_mode, rng);
  return r;
}

StackedCandidates stack_candidates(const FadePosterior& post) {
  check_posterior(post);
  StackedCandidates st;
  st.num_candidates = post.num_candidates();
  st.layers.resize(post.spec.layers.size());
  for (std::size_t i = post.spec.bayes_boundary; i <= post.spec.feature_tap; ++i) {
    const auto& l = post.spec.layers[i];
    if (!l.has_params()) continue;
    Tensor w = stack_layer(post, i, false);
    if (l.kind == LayerKind::kDense) w = ops::reshape(w, {st.num_candidates, l.in, l.out});
    st.layers[i] = {w, stack_layer(post, i, true)};
  }
  return st;
}

ParallelResult forward_parallel(const FadePosterior& post, const Tensor& x, std::size_t num_samples) {
  check_posterior(post);
  require(num_samples == post.num_candidates(), ErrorCode::kInvalidArgument,
          "parallel forward takes every candidate: T=" + std::to_string(num_samples) + " but C=" +
              std::to_string(post.num_candidates()));
  return forward_parallel(post, stack_candidates(post), x, num_samples);
}

ParallelResult forward_parallel(const FadePosterior& post, const StackedCandidates& stacked, const Tensor& x,
                                std::size_t num_samples) {
  check_posterior(post);
  check_batch_shape(post.spec, x);
  const std::size_t c = post.num_candidates();
  require(num_samples == c, ErrorCode::kInvalidArgument,
          "parallel forward takes every candidate: T=" + std::to_string(num_samples) + " but C=" + std::to_string(c));
  require(stacked.num_candidates == c && stacked.layers.size() == post.spec.layers.size(), ErrorCode::kShapeMismatch,
          "stacked candidates do not belong to this posterior");
  const auto& spec = post.spec;
  const std::size_t b = x.dim(0);
  RngState unused(0);
  Tensor cur = spec.bayes_boundary == 0 ? x
                                        : run_layers(spec, post.shared, x, 0, spec.bayes_boundary - 1, false, unused);
  bool is_stacked = false;
  for (std::size_t i = spec.bayes_boundary; i <= spec.feature_tap; ++i) {
    const auto& l = spec.layers[i];
    const auto& p = stacked.layers[i];
    switch (l.kind) {
      case LayerKind::kDense:
        cur = ops::add(ops::grouped_matmul(cur, p.weight), p.bias);
        is_stacked = true;
        break;
      case LayerKind::kConv2d:
        if (!is_stacked) {
          std::vector<Tensor> reps(c, cur);
          cur = ops::concat(reps, 1);
        } else {
          require(cur.rank() == 4, ErrorCode::kShapeMismatch, "parallel forward: conv after a dense candidate layer");
        }
        cur = ops::grouped_conv2d(cur, p.weight, p.bias, l.stride, l.pad, c);
        is_stacked = true;
        break;
      case LayerKind::kRelu:
        cur = ops::relu(cur);
        break;
      case LayerKind::kFlatten:
        cur = ops::reshape(cur, {b, cur.numel() / std::max<std::size_t>(b, 1)});
        break;
      case LayerKind::kDropout:
        break;
      case LayerKind::kHead:
        fail(ErrorCode::kInvalidArgument, "parallel forward: head inside the Bayesian sub-module");
    }
  }
  require(is_stacked, ErrorCode::kInvalidArgument, "parallel forward: Bayesian sub-module has no parameters");
  const std::size_t d = spec.feature_dim();
  ParallelResult r;
  r.z = ops::reshape(cur, {b, c, d});
  const Tensor flat = ops::reshape(cur, {b * c, d});
  const Tensor logits = run_layers(spec, post.shared, flat, spec.feature_tap + 1, spec.layers.size() - 1, false, unused);
  r.logits = ops::reshape(logits, {b, c, spec.num_classes()});
  return r;
}

ParallelResult forward_sequential(const FadePosterior& post, const Tensor& x) {
  check_posterior(post);
  check_batch_shape(post.spec, x);
  const std::size_t b = x.dim(0), c = post.num_candidates();
  RngState unused(0);
  std::vector<Tensor> zs, ls;
  for (std::size_t k = 0; k < c; ++k) {
    const auto r = forward(post.spec, post.candidate_params(k), x, false, unused);
    zs.push_back(ops::reshape(r.z, {b, 1, r.z.numel() / std::max<std::size_t>(b, 1)}));
    ls.push_back(ops::reshape(r.logits, {b, 1, post.spec.num_classes()}));
  }
  return ParallelResult{ops::concat(ls, 1), ops::concat(zs, 1)};
}

Tensor posterior_predictive(const FadePosterior& post, const Tensor& x, std::size_t num_samples) {
  return ops::mean(ops::softmax(forward_parallel(post, x, num_samples).logits), 1);
}

Tensor log_predictive_from_logits(const Tensor& logits) {
  require(logits.rank() == 3, ErrorCode::kShapeMismatch,
          "log predictive expects [B,T,K] logits, got " + shape_str(logits.shape()));
  const float log_t = static_cast<float>(std::log(static_cast<double>(logits.dim(1))));
  return ops::add_scalar(ops::logsumexp(ops::swap_last_axes(ops::log_softmax(logits))), -log_t);
}

std::vector<double> feature_variance(std::span<const Tensor> z_samples) { return sample_list_variance(z_samples); }

std::vector<double> feature_variance(const Tensor& stacked) {
  require(stacked.rank() >= 2, ErrorCode::kShapeMismatch, "feature variance expects [B,T,...]");
  const std::size_t b = stacked.dim(0), t = stacked.dim(1);
  return stacked_variance(stacked.data(), b, t, stacked.numel() / std::max<std::size_t>(b * t, 1));
}

Tensor feature_variance_op(const Tensor& stacked) {
  require(stacked.rank() == 3, ErrorCode::kShapeMismatch,
          "feature variance expects [B,T,D], got " + shape_str(stacked.shape()));
  const std::size_t t = stacked.dim(1);
  require(t >= 2, ErrorCode::kInvalidArgument, "variance needs at least 2 samples");
  // Centred form: algebraically the same estimator, far less cancellation in float.
  const Tensor mean = ops::reshape(ops::mean(stacked, 1), {stacked.dim(0), 1, stacked.dim(2)});
  const std::vector<Tensor> copies(t, mean);
  const Tensor centred = ops::sub(stacked, ops::concat(copies, 1));
  return ops::scale(ops::sum(ops::sum(ops::mul(centred, centred), 2), 1), 1.0f / static_cast<float>(t - 1));
}

std::vector<double> softmax_variance(std::span<const Tensor> prob_samples) {
  return sample_list_variance(prob_samples);
}

std::vector<double> softmax_variance(const Tensor& stacked) { return feature_variance(stacked); }

std::vector<double> mc_dropout_uncertainty(const NetworkSpec& spec, const ParamSet& params, const Tensor& x,
                                           std::size_t num_samples, RngState& rng) {
  require(spec.has_dropout(), ErrorCode::kInvalidArgument,
          "MC dropout needs a network with a dropout layer; '" + spec.id + "' has none");
  require(num_samples >= 2, ErrorCode::kInvalidArgument, "MC dropout needs T >= 2");
  NoGradGuard guard;
  std::vector<Tensor> zs;
  for (std::size_t t = 0; t < num_samples; ++t) zs.push_back(forward(spec, params, x, true, rng).z);
  return feature_variance(std::span<const Tensor>(zs));
}

std::string candidate_param_name(std::size_t layer, std::size_t candidate, bool bias) {
  return "bayes." + std::to_string(layer) + ".cand" + std::to_string(candidate) + (bias ? ".bias" : ".weight");
}

Checkpoint make_fade_checkpoint(const FadePosterior& post, nlohmann::json meta) {
  check_posterior(post);
  Checkpoint ckpt;
  ckpt.kind = "fade";
  ckpt.meta = std::move(meta);
  ckpt.meta["network"] = to_json(post.spec);
  ckpt.meta["candidates"] = post.num_candidates();
  for (std::size_t i = 0; i < post.shared.size(); ++i) {
    if (!post.shared[i].weight.defined()) continue;
    ckpt.put(param_name(i, false), post.shared[i].weight.detach());
    ckpt.put(param_name(i, true), post.shared[i].bias.detach());
  }
  for (std::size_t k = 0; k < post.num_candidates(); ++k)
    for (std::size_t i = post.spec.bayes_boundary; i <= post.spec.feature_tap; ++i) {
      if (!post.candidates[k][i].weight.defined()) continue;
      ckpt.put(candidate_param_name(i, k, false), post.candidates[k][i].weight.detach());
      ckpt.put(candidate_param_name(i, k, true), post.candidates[k][i].bias.detach());
    }
  return ckpt;
}

FadePosterior fade_from_checkpoint(const Checkpoint& ckpt) {
  require(ckpt.kind == "fade", ErrorCode::kCorruptManifest, "expected a fade checkpoint, got kind '" + ckpt.kind + "'");
  if (!ckpt.meta.contains("candidates")) fail(ErrorCode::kCorruptManifest, "fade checkpoint lacks a candidate count");
  FadePosterior post;
  post.spec = spec_from_checkpoint(ckpt);
  post.spec.validate();
  const auto c = ckpt.meta.at("candidates").get<std::size_t>();
  require(c >= 2, ErrorCode::kCorruptManifest, "fade checkpoint has fewer than 2 candidates");
  RngState rng(0);
  const ParamSet ref = init_params(post.spec, rng);
  auto load = [&](const std::string& name, const Tensor& want) {
    const Tensor& t = ckpt.at(name);
    require(t.shape() == want.shape(), ErrorCode::kShapeMismatch,
            "checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", network needs " +
                shape_str(want.shape()));
    return t.detach().set_requires_grad(true);
  };
  const std::size_t n = post.spec.layers.size();
  post.shared.resize(n);
  post.candidates.assign(c, ParamSet(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (!ref[i].weight.defined()) continue;
    if (!post.spec.is_bayesian(i)) {
      post.shared[i] = {load(param_name(i, false), ref[i].weight), load(param_name(i, true), ref[i].bias)};
      continue;
    }
    for (std::size_t k = 0; k < c; ++k)
      post.candidates[k][i] = {load(candidate_param_name(i, k, false), ref[i].weight),
                               load(candidate_param_name(i, k, true), ref[i].bias)};
  }
  return post;
}

}  // namespace fadelab
