#include "fadelab/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fadelab/error.hpp"
#include "fadelab/ops.hpp"

namespace fadelab {

std::size_t Sgd::add_group(std::vector<Tensor> params, float lr, float weight_decay) {
  Group g{std::move(params), lr, weight_decay, {}};
  for (const auto& p : g.params) g.velocity.emplace_back(p.numel(), 0.0f);
  groups_.push_back(std::move(g));
  return groups_.size() - 1;
}

void Sgd::step() {
  for (auto& g : groups_) {
    for (std::size_t i = 0; i < g.params.size(); ++i) {
      Tensor& p = g.params[i];
      auto w = p.mutable_data();
      auto& v = g.velocity[i];
      const auto grad = p.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const float d = (grad.empty() ? 0.0f : grad[j]) + g.weight_decay * w[j];
        v[j] = momentum_ * v[j] + d;
        w[j] -= g.lr * v[j];
      }
    }
  }
}

void Sgd::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

float cosine_lr(float start, float end, std::size_t iter, std::size_t total) {
  if (total <= 1) return start;
  const double t = static_cast<double>(std::min(iter, total - 1)) / static_cast<double>(total - 1);
  return static_cast<float>(end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * t)));
}

Tensor gaussian_log_prior(const std::vector<Tensor>& params, float variance) {
  require(variance > 0.0f, ErrorCode::kInvalidArgument, "gaussian_log_prior: variance must be positive");
  Tensor total;
  for (const auto& p : params) {
    Tensor term = ops::l2_norm_sq(p);
    total = total.defined() ? ops::add(total, term) : term;
  }
  if (!total.defined()) return Tensor::scalar(0.0f);
  return ops::scale(total, -0.5f / variance);
}

double network_accuracy(const NetworkSpec& spec, const ParamSet& params, const Dataset& data,
                        std::size_t batch_size) {
  NoGradGuard guard;
  RngState unused(0);
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    rows.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) rows.push_back(i);
    const auto out = forward(spec, params, data.gather_inputs(rows), false, unused);
    const std::size_t k = out.logits.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto row = out.logits.data().subspan(i * k, k);
      const auto pred = std::max_element(row.begin(), row.end()) - row.begin();
      if (pred == data.labels[rows[i]]) ++correct;
    }
  }
  return data.size() ? static_cast<double>(correct) / data.size() : 0.0;
}

MapTrainResult train_map(const NetworkSpec& spec, const Dataset& data, const MapTrainConfig& cfg, RngState& rng) {
  require(data.size() > 0, ErrorCode::kInvalidArgument, "train_map: empty dataset");
  require(cfg.weight_decay >= 0.0f, ErrorCode::kInvalidArgument, "train_map: weight decay must be >= 0");
  require(cfg.batch_size > 0, ErrorCode::kInvalidArgument, "train_map: batch_size must be >= 1");
  RngState init_rng = rng.fork(1);
  RngState dropout_rng = rng.fork(2);
  MapTrainResult result;
  result.params = init_params(spec, init_rng);
  Sgd opt(cfg.momentum);
  opt.add_group(param_list(result.params), cfg.lr, cfg.weight_decay);

  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  std::size_t iter = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const auto& rows : batches(data.size(), cfg.batch_size, rng.fork(100 + epoch).seed())) {
      const float lr = cosine_lr(cfg.lr, cfg.lr_end, iter, total);
      opt.set_lr(0, lr);
      const Batch b = make_batch(data, rows);
      MapLogRow row{epoch, iter, 0.0, 0.0, lr};
      try {
        const auto out = forward(spec, result.params, b.x, true, dropout_rng);
        const Tensor loss = ops::cross_entropy(out.logits, b.y);
        row.loss = loss.item();
        opt.zero_grad();
        backward(loss);
        opt.step();
        const std::size_t k = out.logits.dim(1);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < b.y.size(); ++i) {
          const auto r = out.logits.data().subspan(i * k, k);
          if (std::max_element(r.begin(), r.end()) - r.begin() == b.y[i]) ++correct;
        }
        row.batch_accuracy = static_cast<double>(correct) / b.y.size();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNonFinite) throw;
        fail(ErrorCode::kDiverged, "train_map diverged at iteration " + std::to_string(iter) + ": " + e.what());
      }
      for (const auto& p : param_list(result.params))
        for (float v : p.data())
          if (!std::isfinite(v))
            fail(ErrorCode::kDiverged, "train_map diverged at iteration " + std::to_string(iter) + ": non-finite weights");
      result.log.push_back(row);
      ++iter;
    }
  }
  result.train_accuracy = network_accuracy(spec, result.params, data);
  return result;
}

Checkpoint map_checkpoint(const NetworkSpec& spec, const MapTrainResult& result, const MapTrainConfig& cfg,
                          std::uint64_t seed) {
  nlohmann::json meta{{"seed", seed},
                      {"train_accuracy", result.train_accuracy},
                      {"hyper",
                       {{"weight_decay", cfg.weight_decay},
                        {"epochs", cfg.epochs},
                        {"batch_size", cfg.batch_size},
                        {"lr", cfg.lr},
                        {"lr_end", cfg.lr_end},
                        {"momentum", cfg.momentum}}}};
  return make_network_checkpoint(spec, result.params, std::move(meta));
}

std::string map_log_csv(const std::vector<MapLogRow>& log) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,iter,loss,batch_accuracy,lr\n";
  for (const auto& r : log) os << r.epoch << ',' << r.iter << ',' << r.loss << ',' << r.batch_accuracy << ',' << r.lr << '\n';
  return os.str();
}

}  // namespace fadelab
