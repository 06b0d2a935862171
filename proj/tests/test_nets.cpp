#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "fadelab/checkpoint.hpp"
#include "fadelab/error.hpp"
#include "fadelab/network.hpp"
#include "fadelab/ops.hpp"
#include "fadelab/train.hpp"
#include "test_util.hpp"

using namespace fadelab;
using fadelab::testing::make_blobs;
using fadelab::testing::scratch_dir;
using fadelab::testing::small_mlp;
using fadelab::testing::to_vec;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

Tensor eye(std::size_t n) {
  Tensor t = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mutable_data()[i * n + i] = 1.0f;
  return t;
}

NetworkSpec identity_spec() {
  NetworkSpec spec;
  spec.id = "identity";
  spec.input_shape = {3};
  spec.layers = {LayerDesc::dense(3, 3), LayerDesc::dense(3, 3), LayerDesc::head(3, 3)};
  spec.bayes_boundary = 1;
  spec.feature_tap = 1;
  return spec;
}

ParamSet identity_params(const NetworkSpec& spec) {
  ParamSet p(spec.layers.size());
  for (auto& l : p) {
    l.weight = eye(3);
    l.bias = Tensor::zeros({3});
  }
  return p;
}

void expect_bitwise(const ParamSet& a, const ParamSet& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].weight.defined(), b[i].weight.defined());
    if (!a[i].weight.defined()) continue;
    EXPECT_EQ(to_vec(a[i].weight), to_vec(b[i].weight)) << "layer " << i;
    EXPECT_EQ(to_vec(a[i].bias), to_vec(b[i].bias)) << "layer " << i;
  }
}

}  // namespace

TEST(NetworkSpec, ReferenceArchitecturesValidate) {
  for (const auto& id : reference_network_ids()) {
    const NetworkSpec spec = reference_network(id);
    EXPECT_NO_THROW(spec.validate()) << id;
    EXPECT_GT(spec.bayes_boundary, 0u);
    EXPECT_LT(spec.bayes_boundary, spec.layers.size());
    EXPECT_EQ(spec.layers.back().kind, LayerKind::kHead);
    EXPECT_EQ(spec.feature_tap + 2, spec.layers.size());
  }
  EXPECT_EQ(reference_network("mlp2").feature_dim(), 64u);
  EXPECT_EQ(reference_network("cnn").num_classes(), 10u);
}

TEST(NetworkSpec, RejectsBadBoundaryAndBrokenChains) {
  NetworkSpec spec = identity_spec();
  spec.bayes_boundary = 0;
  EXPECT_THROW(spec.validate(), Error);
  spec = identity_spec();
  spec.bayes_boundary = 3;
  EXPECT_THROW(spec.validate(), Error);
  spec = identity_spec();
  spec.feature_tap = 0;
  EXPECT_THROW(spec.validate(), Error);
  spec = identity_spec();
  spec.layers[1] = LayerDesc::dense(4, 3);
  EXPECT_EQ(code_of([&] { spec.validate(); }), ErrorCode::kShapeMismatch);
}

TEST(NetworkSpec, JsonRoundTrip) {
  const NetworkSpec spec = reference_network("cnn-dropout");
  const NetworkSpec back = network_spec_from_json(to_json(spec));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_TRUE(back.has_dropout());
}

TEST(Forward, IdentityNetworkReturnsInput) {
  const NetworkSpec spec = identity_spec();
  const ParamSet params = identity_params(spec);
  RngState rng(0);
  const Tensor x = Tensor::from_data({2, 3}, {0.1f, 2.0f, 0.0f, 5.0f, 0.25f, 1.0f});
  const auto out = forward(spec, params, x, false, rng);
  EXPECT_EQ(to_vec(out.logits), to_vec(x));
  EXPECT_EQ(to_vec(out.z), to_vec(x));
}

TEST(Forward, WrongInputShapeIsAnError) {
  const NetworkSpec spec = identity_spec();
  const ParamSet params = identity_params(spec);
  RngState rng(0);
  EXPECT_EQ(code_of([&] { forward(spec, params, Tensor::zeros({2, 4}), false, rng); }), ErrorCode::kShapeMismatch);
}

TEST(Forward, DropoutZeroMatchesEvalMode) {
  const NetworkSpec spec = small_mlp(8, 2, 0.0f);
  RngState init(3);
  const ParamSet params = init_params(spec, init);
  const Tensor x = fadelab::testing::random_tensor({5, 2}, 9, 0.0f, 1.0f);
  RngState a(1), b(1);
  const auto train = forward(spec, params, x, true, a);
  const auto eval = forward(spec, params, x, false, b);
  EXPECT_EQ(to_vec(train.logits), to_vec(eval.logits));
}

TEST(Forward, DropoutIsDeterministicUnderASeed) {
  const NetworkSpec spec = small_mlp(16, 2, 0.5f);
  RngState init(3);
  const ParamSet params = init_params(spec, init);
  const Tensor x = fadelab::testing::random_tensor({5, 2}, 9, 0.0f, 1.0f);
  RngState a(42), b(42), c(43);
  const auto first = forward(spec, params, x, true, a);
  const auto second = forward(spec, params, x, true, b);
  const auto other = forward(spec, params, x, true, c);
  EXPECT_EQ(to_vec(first.logits), to_vec(second.logits));
  EXPECT_NE(to_vec(first.logits), to_vec(other.logits));
  // and eval mode ignores the rng entirely
  RngState d(1), e(2);
  EXPECT_EQ(to_vec(forward(spec, params, x, false, d).logits), to_vec(forward(spec, params, x, false, e).logits));
}

TEST(Forward, PureGivenInputsAndRngState) {
  const NetworkSpec spec = reference_network("mlp2");
  RngState init(5);
  const ParamSet params = init_params(spec, init);
  const Tensor x = fadelab::testing::random_tensor({7, 2}, 1, 0.0f, 1.0f);
  RngState a(0), b(0);
  EXPECT_EQ(to_vec(forward(spec, params, x, false, a).logits), to_vec(forward(spec, params, x, false, b).logits));
}

TEST(Sgd, CosineScheduleEndpoints) {
  EXPECT_FLOAT_EQ(cosine_lr(0.1f, 0.01f, 0, 11), 0.1f);
  EXPECT_FLOAT_EQ(cosine_lr(0.1f, 0.01f, 10, 11), 0.01f);
  EXPECT_FLOAT_EQ(cosine_lr(0.1f, 0.01f, 5, 11), 0.055f);
  EXPECT_FLOAT_EQ(cosine_lr(0.1f, 0.01f, 0, 1), 0.1f);
}

TEST(Sgd, WeightDecayEqualsGaussianPriorStep) {
  // One step on mean CE with decay lambda versus one step on
  // mean CE - (1/n) log N(w; 0, 1/(n lambda)) without decay.
  const NetworkSpec spec = small_mlp(6);
  const Dataset data = make_blobs(32, 4);
  const float lambda = 0.01f;
  const float n = static_cast<float>(data.size());
  RngState init(8);
  const ParamSet base = init_params(spec, init);

  auto step = [&](bool use_prior) {
    ParamSet p = clone_params(base, true);
    Sgd opt(0.9f);
    opt.add_group(param_list(p), 0.1f, use_prior ? 0.0f : lambda);
    RngState rng(0);
    Tensor loss = ops::cross_entropy(forward(spec, p, data.inputs, true, rng).logits, data.labels);
    if (use_prior) loss = ops::sub(loss, ops::scale(gaussian_log_prior(param_list(p), 1.0f / (n * lambda)), 1.0f / n));
    opt.zero_grad();
    backward(loss);
    opt.step();
    return p;
  };
  const ParamSet decayed = step(false);
  const ParamSet prior = step(true);
  double worst = 0.0;
  for (std::size_t i = 0; i < decayed.size(); ++i) {
    if (!decayed[i].weight.defined()) continue;
    for (const auto* t : {&decayed[i].weight, &decayed[i].bias}) {
      const auto& u = t == &decayed[i].weight ? prior[i].weight : prior[i].bias;
      for (std::size_t k = 0; k < t->numel(); ++k) worst = std::max(worst, std::abs(double((*t)[k]) - u[k]));
    }
  }
  EXPECT_LE(worst, 1e-6);
}

TEST(Sgd, MomentumAccumulates) {
  Tensor w = Tensor::from_data({1}, {1.0f}).set_requires_grad(true);
  Sgd opt(0.5f);
  opt.add_group({w}, 0.1f, 0.0f);
  for (int i = 0; i < 2; ++i) {
    opt.zero_grad();
    backward(ops::sum(w));  // gradient 1
    opt.step();
  }
  // v1 = 1, v2 = 1.5; w = 1 - 0.1 - 0.15
  EXPECT_NEAR(w[0], 0.75f, 1e-7);
}

TEST(TrainMap, SeparableBlobs) {
  const Dataset data = make_blobs(400, 11);
  MapTrainConfig cfg;
  cfg.epochs = 10;
  cfg.lr = 0.1f;
  cfg.lr_end = 0.01f;
  cfg.weight_decay = 1e-4f;
  RngState rng(2);
  const auto result = train_map(small_mlp(16), data, cfg, rng);
  EXPECT_GE(result.train_accuracy, 0.99);
  EXPECT_EQ(result.log.size(), 10u * 7u);
}

TEST(TrainMap, HugeDecayCollapsesWeights) {
  const Dataset data = make_blobs(400, 11);
  MapTrainConfig cfg;
  cfg.weight_decay = 1e6f;
  cfg.lr = 1e-6f;
  cfg.lr_end = 1e-6f;
  cfg.momentum = 0.0f;
  cfg.epochs = 3;
  RngState rng(2);
  const auto result = train_map(small_mlp(16), data, cfg, rng);
  float largest = 0.0f;
  for (const auto& p : param_list(result.params))
    for (float v : p.data()) largest = std::max(largest, std::abs(v));
  EXPECT_LE(largest, 1e-5f);
  EXPECT_NEAR(result.train_accuracy, 0.5, 0.1);
}

TEST(TrainMap, RejectsEmptyDataAndNegativeDecay) {
  const Dataset data = make_blobs(10, 1);
  RngState rng(0);
  MapTrainConfig cfg;
  cfg.weight_decay = -1.0f;
  EXPECT_EQ(code_of([&] { train_map(small_mlp(4), data, cfg, rng); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { train_map(small_mlp(4), data.head(0), MapTrainConfig{}, rng); }),
            ErrorCode::kInvalidArgument);
}

TEST(TrainMap, DivergenceNamesTheIteration) {
  const Dataset data = make_blobs(64, 1);
  MapTrainConfig cfg;
  cfg.lr = 1e30f;
  cfg.lr_end = 1e30f;
  RngState rng(0);
  try {
    train_map(small_mlp(8), data, cfg, rng);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDiverged);
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
  }
}

TEST(TrainMap, DeterministicUnderSeed) {
  const Dataset data = make_blobs(100, 3);
  MapTrainConfig cfg;
  cfg.epochs = 2;
  RngState a(9), b(9);
  const NetworkSpec spec = small_mlp(8);
  const auto ra = train_map(spec, data, cfg, a);
  const auto rb = train_map(spec, data, cfg, b);
  expect_bitwise(ra.params, rb.params);
  EXPECT_EQ(map_log_csv(ra.log), map_log_csv(rb.log));
}

TEST(TrainMap, SmallCnnOnDigits) {
  const std::filesystem::path dir = FADELAB_DATA_DIR "/mnist-small";
  const Dataset train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  const Dataset test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
  const NetworkSpec spec = reference_network("cnn");
  RngState rng(1);
  const auto result = train_map(spec, train, MapTrainConfig{}, rng);
  EXPECT_GE(network_accuracy(spec, result.params, test), 0.95);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const NetworkSpec spec = reference_network("cnn");
  RngState rng(4);
  const ParamSet params = init_params(spec, rng);
  const Checkpoint ckpt = make_network_checkpoint(spec, params, {{"seed", 4}});
  const auto dir = scratch_dir("nets_roundtrip");
  save_checkpoint(ckpt, dir / "m");
  const Checkpoint back = load_checkpoint(dir / "m.json");
  EXPECT_EQ(back.hash(), ckpt.hash());
  EXPECT_EQ(archive_file_hash(dir / "m"), ckpt.hash());
  EXPECT_EQ(back.meta.at("seed"), 4);
  expect_bitwise(params_from_checkpoint(back, spec_from_checkpoint(back)), params);
  EXPECT_EQ(to_json(spec_from_checkpoint(back)), to_json(spec));
}

TEST(Checkpoint, MapCheckpointRecordsTraining) {
  const Dataset data = make_blobs(64, 3);
  MapTrainConfig cfg;
  cfg.epochs = 1;
  RngState rng(5);
  const NetworkSpec spec = small_mlp(4);
  const auto result = train_map(spec, data, cfg, rng);
  const Checkpoint ckpt = map_checkpoint(spec, result, cfg, 5);
  EXPECT_EQ(ckpt.kind, "map");
  EXPECT_EQ(ckpt.meta.at("seed"), 5);
  EXPECT_DOUBLE_EQ(ckpt.meta.at("train_accuracy").get<double>(), result.train_accuracy);
  EXPECT_EQ(ckpt.meta.at("hyper").at("epochs"), 1);
}

TEST(Checkpoint, EmptyArchiveIsValid) {
  TensorArchive empty;
  empty.kind = "empty";
  const auto dir = scratch_dir("nets_empty");
  save_archive(empty, dir / "e");
  const TensorArchive back = load_archive(dir / "e");
  EXPECT_EQ(back.kind, "empty");
  EXPECT_TRUE(back.tensors.empty());
  EXPECT_EQ(std::filesystem::file_size(dir / "e.bin"), 0u);
}

TEST(Checkpoint, DamageGivesDistinctErrors) {
  TensorArchive a;
  a.kind = "t";
  a.put("w", Tensor::from_data({2, 2}, {1, 2, 3, 4}));
  a.put("b", Tensor::from_data({2}, {5, 6}));
  const auto dir = scratch_dir("nets_damage");
  save_archive(a, dir / "a");
  const nlohmann::json manifest = nlohmann::json::parse(a.manifest_text());
  auto rewrite = [&](const std::string& text) { std::ofstream(dir / "a.json", std::ios::binary) << text; };
  auto edited = [&](std::size_t tensor, const char* key, const nlohmann::json& value) {
    nlohmann::json j = manifest;
    j.at("tensors").at(tensor)[key] = value;
    return j.dump();
  };

  rewrite("{ not json");
  EXPECT_EQ(code_of([&] { load_archive(dir / "a"); }), ErrorCode::kCorruptManifest);

  rewrite(manifest.dump());
  std::filesystem::resize_file(dir / "a.bin", 20);
  EXPECT_EQ(code_of([&] { load_archive(dir / "a"); }), ErrorCode::kTruncatedBlob);

  save_archive(a, dir / "a");
  rewrite(edited(0, "shape", {2, 3}));
  EXPECT_EQ(code_of([&] { load_archive(dir / "a"); }), ErrorCode::kShapeMismatch);

  // offset pointing past the blob while sizes stay consistent
  rewrite(edited(1, "offset", 20));
  EXPECT_EQ(code_of([&] { load_archive(dir / "a"); }), ErrorCode::kTruncatedBlob);

  std::filesystem::remove(dir / "a.bin");
  EXPECT_EQ(code_of([&] { load_archive(dir / "a"); }), ErrorCode::kIo);
}

TEST(Checkpoint, ParamsMustMatchTheNetwork) {
  const NetworkSpec spec = small_mlp(4);
  RngState rng(1);
  Checkpoint ckpt = make_network_checkpoint(spec, init_params(spec, rng), {});
  EXPECT_EQ(code_of([&] { params_from_checkpoint(ckpt, small_mlp(5)); }), ErrorCode::kShapeMismatch);
}
