#include "fadelab/refine.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fadelab/error.hpp"
#include "fadelab/filter.hpp"
#include "fadelab/ops.hpp"
#include "fadelab/sampling.hpp"
#include "fadelab/train.hpp"

namespace fadelab {

const char* estimator_name(Estimator e) { return e == Estimator::kInstancewise ? "instancewise" : "batchwise"; }

Estimator estimator_from_name(const std::string& name) {
  if (name == "instancewise") return Estimator::kInstancewise;
  if (name == "batchwise") return Estimator::kBatchwise;
  fail(ErrorCode::kConfig, "unknown estimator '" + name + "' (expected instancewise or batchwise)");
}

void RefineConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::kConfig, "refine config: " + msg); };
  check(candidates >= 2, "candidates must be >= 2");
  check(gamma > 0.0f, "gamma must be > 0");
  check(alpha >= 0.0f, "alpha must be >= 0");
  check(weight_decay >= 0.0f, "weight_decay must be >= 0");
  check(eps_lo >= 0.0f && eps_lo <= eps_hi, "eps range needs 0 <= lo <= hi");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(blur_prob >= 0.0f && blur_prob <= 1.0f, "blur_prob must lie in [0, 1]");
  check(lr_candidates_start >= 0.0f && lr_candidates_end >= 0.0f && lr_shared >= 0.0f, "learning rates must be >= 0");
  check(momentum >= 0.0f && momentum < 1.0f, "momentum must lie in [0, 1)");
}

Tensor perturb_uniform(const Tensor& x, std::span<const float> eps, RngState& rng, float blur_prob) {
  require(x.rank() >= 1 && eps.size() == x.dim(0), ErrorCode::kShapeMismatch,
          "perturb_uniform: need one budget per instance");
  for (float e : eps) require(e >= 0.0f, ErrorCode::kInvalidArgument, "perturb_uniform: eps must be >= 0");
  const std::size_t b = x.dim(0), d = x.numel() / std::max<std::size_t>(b, 1);
  const Tensor raw = sample_uniform(rng, x.shape(), -1.0f, 1.0f);
  std::vector<float> noise(raw.data().begin(), raw.data().end());
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) noise[i * d + j] *= eps[i];

  if (x.rank() == 4 && blur_prob > 0.0f) {
    static const std::vector<float> kernel = gaussian_kernel(3, 1.0);
    const Shape one{1, x.dim(1), x.dim(2), x.dim(3)};
    for (std::size_t i = 0; i < b; ++i) {
      if (!rng.bernoulli(blur_prob)) continue;
      const Tensor plane = Tensor::from_data(one, std::vector<float>(noise.begin() + i * d, noise.begin() + (i + 1) * d));
      const Tensor blurred = filter_planes(plane, kernel, 3);
      std::copy(blurred.data().begin(), blurred.data().end(), noise.begin() + i * d);
    }
  }
  std::vector<float> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += noise[i];
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor perturb_uniform(const Tensor& x, float eps, RngState& rng, float blur_prob) {
  require(x.rank() >= 1, ErrorCode::kShapeMismatch, "perturb_uniform: expects a batch");
  const std::vector<float> per(x.dim(0), eps);
  return perturb_uniform(x, per, rng, blur_prob);
}

CandidateAssignment draw_assignment(Estimator estimator, std::size_t batch, std::size_t num_candidates,
                                    RngState& rng) {
  if (estimator == Estimator::kInstancewise) return CandidateAssignment::uniform(batch, num_candidates, rng);
  require(num_candidates >= 1, ErrorCode::kInvalidArgument, "assignment needs at least one candidate");
  return CandidateAssignment::constant(batch, static_cast<std::size_t>(rng.below(num_candidates)));
}

Tensor loss_likelihood(const FadePosterior& post, const Tensor& x, std::span<const std::int32_t> y,
                       const CandidateAssignment& assign, bool train_mode, RngState& rng) {
  require(x.rank() >= 1 && x.dim(0) > 0, ErrorCode::kInvalidArgument, "loss_likelihood: empty batch");
  const auto out = forward_instancewise(post, x, assign, train_mode, rng);
  return ops::scale(ops::cross_entropy(out.logits, y), -1.0f);
}

Tensor loss_uncertainty_margin(const FadePosterior& post, const Tensor& x_perturbed, RngState& rng, float gamma,
                               bool train_mode) {
  const std::size_t c = post.num_candidates();
  require(c >= 2, ErrorCode::kInvalidArgument, "margin regularizer needs C >= 2 to draw distinct candidates");
  require(gamma > 0.0f, ErrorCode::kInvalidArgument, "margin threshold gamma must be > 0");
  check_batch_shape(post.spec, x_perturbed);
  const std::size_t b = x_perturbed.dim(0);
  CandidateAssignment pairs;
  pairs.ids.resize(2 * b);
  for (std::size_t i = 0; i < b; ++i) {
    pairs.ids[i] = static_cast<std::size_t>(rng.below(c));
    do {
      pairs.ids[b + i] = static_cast<std::size_t>(rng.below(c));
    } while (pairs.ids[b + i] == pairs.ids[i]);
  }
  const Tensor h = fade_trunk(post, x_perturbed, train_mode, rng);
  const std::vector<Tensor> twice{h, h};
  const Tensor z = fade_submodule(post, ops::concat(twice, 0), pairs, train_mode, rng);
  const Tensor diff = ops::sub(ops::slice(z, 0, 0, b), ops::slice(z, 0, b, 2 * b));
  const Tensor dist = ops::sum(ops::mul(diff, diff), 1);
  // the outer clip only absorbs rounding in the mean
  return ops::clip(ops::mean(ops::clip(dist, 0.0f, gamma)), 0.0f, gamma);
}

Tensor prior_penalty(const FadePosterior& post, float weight_decay) {
  const float c = static_cast<float>(post.num_candidates());
  Tensor total = ops::scale(gaussian_log_prior(post.shared_tensors(), 1.0f / weight_decay), -1.0f);
  for (std::size_t k = 0; k < post.num_candidates(); ++k)
    total = ops::sub(total, gaussian_log_prior(post.candidate_tensors(k), c / weight_decay));
  return total;
}

namespace {

double batch_accuracy(const Tensor& logits, std::span<const std::int32_t> y) {
  const std::size_t k = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto r = logits.data().subspan(i * k, k);
    if (std::max_element(r.begin(), r.end()) - r.begin() == y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(y.size());
}

std::vector<Tensor> all_candidate_tensors(const FadePosterior& post) {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < post.num_candidates(); ++k) {
    auto t = post.candidate_tensors(k);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

}  // namespace

RefineResult refine(const FadePosterior& init, const Dataset& data, const RefineConfig& cfg, RngState& rng) {
  cfg.validate();
  require(data.size() > 0, ErrorCode::kInvalidArgument, "refine: empty dataset");
  require(init.num_candidates() == cfg.candidates, ErrorCode::kConfig,
          "refine: posterior has " + std::to_string(init.num_candidates()) + " candidates, config asks for " +
              std::to_string(cfg.candidates));
  RngState assign_rng = rng.fork(1);
  RngState noise_rng = rng.fork(2);
  RngState eps_rng = rng.fork(3);
  RngState pair_rng = rng.fork(4);
  RngState dropout_rng = rng.fork(5);

  RefineResult result;
  result.posterior = init.clone(true);
  FadePosterior& post = result.posterior;
  const bool decay = cfg.prior == PriorMode::kDecay;
  const float c = static_cast<float>(post.num_candidates());
  Sgd opt_candidates(cfg.momentum);
  Sgd opt_shared(cfg.momentum);
  opt_candidates.add_group(all_candidate_tensors(post), cfg.lr_candidates_start, decay ? cfg.weight_decay / c : 0.0f);
  opt_shared.add_group(post.shared_tensors(), cfg.lr_shared, decay ? cfg.weight_decay : 0.0f);

  const float scale = data.range_hi - data.range_lo;
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : batches(data.size(), cfg.batch_size, rng.fork(100 + epoch).seed())) {
      const float lr = cosine_lr(cfg.lr_candidates_start, cfg.lr_candidates_end, iter, total);
      opt_candidates.set_lr(0, lr);
      const Batch b = make_batch(data, rows);
      const std::size_t n = b.y.size();
      RefineLogRow row{epoch, iter, 0.0, 0.0, lr, 0.0};
      try {
        const auto assign = draw_assignment(cfg.estimator, n, post.num_candidates(), assign_rng);
        const auto out = forward_instancewise(post, b.x, assign, true, dropout_rng);
        const Tensor lik = ops::scale(ops::cross_entropy(out.logits, b.y), -1.0f);

        std::vector<float> eps(n);
        if (cfg.eps_per_instance) {
          for (auto& e : eps) e = scale * (cfg.eps_lo + (cfg.eps_hi - cfg.eps_lo) * static_cast<float>(eps_rng.uniform01()));
        } else {
          std::fill(eps.begin(), eps.end(),
                    scale * (cfg.eps_lo + (cfg.eps_hi - cfg.eps_lo) * static_cast<float>(eps_rng.uniform01())));
        }
        const Tensor x_tilde = perturb_uniform(b.x, eps, noise_rng, cfg.blur_prob);
        const Tensor margin = loss_uncertainty_margin(post, x_tilde, pair_rng, cfg.gamma, true);

        Tensor objective = ops::sub(ops::scale(lik, -1.0f), ops::scale(margin, cfg.alpha));
        if (!decay) objective = ops::add(objective, prior_penalty(post, cfg.weight_decay));
        row.likelihood = lik.item();
        row.margin = margin.item();
        row.batch_accuracy = batch_accuracy(out.logits, b.y);
        opt_candidates.zero_grad();
        opt_shared.zero_grad();
        backward(objective);
        opt_candidates.step();
        opt_shared.step();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNonFinite) throw;
        fail(ErrorCode::kDiverged, "refine diverged at iteration " + std::to_string(iter) + ": " + e.what());
      }
      result.log.push_back(row);
      ++iter;
    }
  }
  return result;
}

RefineResult refine(const Checkpoint& map_ckpt, const NetworkSpec& spec, const Dataset& data,
                    const RefineConfig& cfg, RngState& rng) {
  cfg.validate();
  return refine(init_from_map(map_ckpt, spec, cfg.candidates), data, cfg, rng);
}

std::string refine_log_csv(const std::vector<RefineLogRow>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,iter,likelihood,margin,lr_candidates,batch_accuracy\n";
  for (const auto& r : log)
    os << r.epoch << ',' << r.iter << ',' << r.likelihood << ',' << r.margin << ',' << r.lr_candidates << ','
       << r.batch_accuracy << '\n';
  return os.str();
}

double shared_gradient_variance(const FadePosterior& post, const Dataset& data, Estimator estimator,
                                std::size_t num_batches, std::size_t batch_size, RngState& rng) {
  require(num_batches >= 2, ErrorCode::kInvalidArgument, "gradient variance needs at least 2 batches");
  FadePosterior work = post.clone(true);
  const auto shared = work.shared_tensors();
  const auto cands = all_candidate_tensors(work);
  RngState assign_rng = rng.fork(1);
  RngState unused = rng.fork(2);

  std::vector<std::vector<double>> grads;
  for (std::size_t epoch = 0; grads.size() < num_batches; ++epoch) {
    for (const auto& rows : batches(data.size(), batch_size, rng.fork(100 + epoch).seed())) {
      if (grads.size() == num_batches) break;
      const Batch b = make_batch(data, rows);
      for (auto t : shared) t.zero_grad();
      for (auto t : cands) t.zero_grad();
      const auto assign = draw_assignment(estimator, b.y.size(), work.num_candidates(), assign_rng);
      backward(loss_likelihood(work, b.x, b.y, assign, false, unused));
      std::vector<double> g;
      for (const auto& t : shared) {
        const auto v = t.grad_or_zeros();
        g.insert(g.end(), v.begin(), v.end());
      }
      grads.push_back(std::move(g));
    }
  }
  const std::size_t dim = grads[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& g : grads)
    for (std::size_t j = 0; j < dim; ++j) mean[j] += g[j];
  for (auto& m : mean) m /= static_cast<double>(grads.size());
  double trace = 0.0;
  for (const auto& g : grads)
    for (std::size_t j = 0; j < dim; ++j) trace += (g[j] - mean[j]) * (g[j] - mean[j]);
  return trace / static_cast<double>(grads.size() - 1);
}

}  // namespace fadelab
