#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "fadelab/checkpoint.hpp"
#include "fadelab/data.hpp"
#include "fadelab/network.hpp"
#include "fadelab/rng.hpp"

namespace fadelab {

// SGD with heavy-ball momentum; weight decay is folded into the gradient
// (g + wd * w) before the momentum update, per parameter group.
class Sgd {
 public:
  explicit Sgd(float momentum) : momentum_(momentum) {}

  std::size_t add_group(std::vector<Tensor> params, float lr, float weight_decay);
  void set_lr(std::size_t group, float lr) { groups_.at(group).lr = lr; }
  float lr(std::size_t group) const { return groups_.at(group).lr; }
  void step();
  void zero_grad();

 private:
  struct Group {
    std::vector<Tensor> params;
    float lr;
    float weight_decay;
    std::vector<std::vector<float>> velocity;
  };
  float momentum_;
  std::vector<Group> groups_;
};

// Cosine annealing from `start` to `end` over `total` iterations.
float cosine_lr(float start, float end, std::size_t iter, std::size_t total);

// Log density of an isotropic zero-mean Gaussian over every parameter, up to
// the normalising constant.
Tensor gaussian_log_prior(const std::vector<Tensor>& params, float variance);

struct MapTrainConfig {
  float weight_decay = 5e-4f;
  std::size_t epochs = 5;
  std::size_t batch_size = 64;
  float lr = 0.05f;
  float lr_end = 0.005f;
  float momentum = 0.9f;
};

struct MapLogRow {
  std::size_t epoch = 0;
  std::size_t iter = 0;
  double loss = 0.0;
  double batch_accuracy = 0.0;
  float lr = 0.0f;
};

struct MapTrainResult {
  ParamSet params;
  double train_accuracy = 0.0;
  std::vector<MapLogRow> log;
};

// Mini-batch MAP estimation: minimises mean cross-entropy with L2 decay.
// Throws kDiverged naming the iteration if the loss stops being finite.
MapTrainResult train_map(const NetworkSpec& spec, const Dataset& data, const MapTrainConfig& cfg, RngState& rng);

Checkpoint map_checkpoint(const NetworkSpec& spec, const MapTrainResult& result, const MapTrainConfig& cfg,
                          std::uint64_t seed);

std::string map_log_csv(const std::vector<MapLogRow>& log);

// Deterministic-mode top-1 accuracy.
double network_accuracy(const NetworkSpec& spec, const ParamSet& params, const Dataset& data,
                        std::size_t batch_size = 256);

}  // namespace fadelab
