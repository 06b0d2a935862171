#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fadelab/checkpoint.hpp"
#include "fadelab/error.hpp"
#include "fadelab/fade.hpp"
#include "fadelab/model.hpp"
#include "fadelab/ops.hpp"
#include "fadelab/sampling.hpp"
#include "test_util.hpp"

using namespace fadelab;
using fadelab::testing::random_tensor;
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

// Jitters every candidate independently so they differ.
void spread_candidates(FadePosterior& post, std::uint64_t seed, float scale = 0.1f) {
  RngState rng(seed);
  for (auto& cand : post.candidates)
    for (auto& t : param_list(cand))
      for (auto& v : t.mutable_data()) v += scale * static_cast<float>(rng.normal());
}

FadePosterior random_posterior(const NetworkSpec& spec, std::size_t c, std::uint64_t seed) {
  RngState rng(seed);
  FadePosterior post = init_from_params(spec, init_params(spec, rng), c);
  spread_candidates(post, seed + 1);
  return post;
}

double max_rel(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = std::abs(double(a[i]) - b[i]);
    worst = std::max(worst, d / std::max(1.0, std::abs(double(b[i]))));
  }
  return worst;
}

// Independent estimator: per-coordinate unbiased variance, summed.
double oracle_variance(const std::vector<std::vector<double>>& samples) {
  const std::size_t t = samples.size(), d = samples[0].size();
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double m = 0.0;
    for (const auto& s : samples) m += s[j];
    m /= t;
    double ss = 0.0;
    for (const auto& s : samples) ss += (s[j] - m) * (s[j] - m);
    total += ss / (t - 1);
  }
  return total;
}

std::vector<Tensor> rows(std::initializer_list<std::vector<float>> per_sample, std::size_t d) {
  std::vector<Tensor> out;
  for (const auto& v : per_sample) out.push_back(Tensor::from_data({v.size() / d, d}, v));
  return out;
}

}  // namespace

TEST(InitFromMap, CandidatesCopyTheMapWeights) {
  const NetworkSpec spec = reference_network("cnn");
  RngState rng(2);
  const ParamSet params = init_params(spec, rng);
  const Checkpoint ckpt = make_network_checkpoint(spec, params, {});
  const FadePosterior post = init_from_map(ckpt, spec, 20);
  ASSERT_EQ(post.num_candidates(), 20u);
  const auto first = post.candidate_tensors(0);
  const auto last = post.candidate_tensors(19);
  ASSERT_EQ(first.size(), last.size());
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(to_vec(first[i]), to_vec(last[i]));
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (!spec.layers[l].has_params()) continue;
    const auto& got = spec.is_bayesian(l) ? post.candidates[7][l] : post.shared[l];
    EXPECT_EQ(to_vec(got.weight), to_vec(params[l].weight)) << l;
    EXPECT_EQ(to_vec(got.bias), to_vec(params[l].bias)) << l;
    EXPECT_EQ(post.shared[l].weight.defined(), !spec.is_bayesian(l));
  }
}

TEST(InitFromMap, RequiresTwoCandidatesAndMatchingShapes) {
  const NetworkSpec spec = small_mlp(4);
  RngState rng(2);
  const Checkpoint ckpt = make_network_checkpoint(spec, init_params(spec, rng), {});
  EXPECT_EQ(code_of([&] { init_from_map(ckpt, spec, 1); }), ErrorCode::kInvalidArgument);
  EXPECT_NO_THROW(init_from_map(ckpt, spec, 2));
  EXPECT_EQ(code_of([&] { init_from_map(ckpt, small_mlp(5), 2); }), ErrorCode::kShapeMismatch);
}

TEST(InitFromMap, EveryCandidateReproducesTheMapForward) {
  const NetworkSpec spec = small_mlp(8);
  RngState rng(3);
  const ParamSet params = init_params(spec, rng);
  const FadePosterior post = init_from_params(spec, params, 4);
  const Tensor x = random_tensor({6, 2}, 4, 0.0f, 1.0f);
  RngState r(0);
  const auto ref = forward(spec, params, x, false, r);
  for (std::size_t k = 0; k < 4; ++k) {
    const auto out = forward(spec, post.candidate_params(k), x, false, r);
    EXPECT_EQ(to_vec(out.logits), to_vec(ref.logits));
  }
  const auto par = forward_parallel(post, x, 4);
  for (double u : feature_variance(par.z)) EXPECT_NEAR(u, 0.0, 1e-12);
}

TEST(Instancewise, IdenticalCandidatesIgnoreAssignment) {
  const NetworkSpec spec = small_mlp(8);
  RngState rng(3);
  const FadePosterior post = init_from_params(spec, init_params(spec, rng), 5);
  const Tensor x = random_tensor({10, 2}, 4, 0.0f, 1.0f);
  RngState a(1), b(2), r(0);
  const auto one = forward_instancewise(post, x, CandidateAssignment::uniform(10, 5, a), false, r);
  const auto two = forward_instancewise(post, x, CandidateAssignment::uniform(10, 5, b), false, r);
  EXPECT_EQ(to_vec(one.logits), to_vec(two.logits));
}

TEST(Instancewise, RowsFollowTheirCandidate) {
  const NetworkSpec spec = small_mlp(8);
  const FadePosterior post = random_posterior(spec, 4, 7);
  const Tensor x = random_tensor({5, 2}, 4, 0.0f, 1.0f);
  const CandidateAssignment assign{{3, 0, 2, 2, 1}};
  RngState r(0);
  const auto out = forward_instancewise(post, x, assign, false, r);
  for (std::size_t i = 0; i < 5; ++i) {
    const std::vector<std::size_t> row = {i};
    const auto single = forward(spec, post.candidate_params(assign.ids[i]), ops::gather_rows(x, row), false, r);
    for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(out.logits[2 * i + k], single.logits[k], 1e-6) << i;
  }
  // batch of one equals a plain forward exactly
  const auto lone = forward_instancewise(post, ops::slice(x, 0, 0, 1), CandidateAssignment{{2}}, false, r);
  const auto plain = forward(spec, post.candidate_params(2), ops::slice(x, 0, 0, 1), false, r);
  EXPECT_EQ(to_vec(lone.logits), to_vec(plain.logits));
}

TEST(Instancewise, RejectsBadAssignments) {
  const NetworkSpec spec = small_mlp(4);
  const FadePosterior post = random_posterior(spec, 3, 1);
  const Tensor x = random_tensor({2, 2}, 4, 0.0f, 1.0f);
  RngState r(0);
  EXPECT_EQ(code_of([&] { forward_instancewise(post, x, CandidateAssignment{{0, 3}}, false, r); }),
            ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { forward_instancewise(post, x, CandidateAssignment{{0}}, false, r); }),
            ErrorCode::kShapeMismatch);
}

TEST(Instancewise, UniformAssignmentCoversAllIds) {
  RngState a(5), b(5);
  const auto one = CandidateAssignment::uniform(2000, 4, a);
  EXPECT_EQ(one.ids, CandidateAssignment::uniform(2000, 4, b).ids);
  std::vector<int> counts(4, 0);
  for (auto id : one.ids) {
    ASSERT_LT(id, 4u);
    ++counts[id];
  }
  for (int c : counts) EXPECT_NEAR(c, 500, 80);
  EXPECT_EQ(CandidateAssignment::constant(3, 2).ids, (std::vector<std::size_t>{2, 2, 2}));
}

TEST(Instancewise, GradientsRespectTheAssignment) {
  // 2 -> 1 -> 1 -> 2 linear net: 7 shared parameters, 2 per candidate.
  NetworkSpec spec;
  spec.id = "tiny";
  spec.input_shape = {2};
  spec.layers = {LayerDesc::dense(2, 1), LayerDesc::dense(1, 1), LayerDesc::head(1, 2)};
  spec.bayes_boundary = 1;
  spec.feature_tap = 1;
  FadePosterior base = random_posterior(spec, 3, 21);
  const Tensor x = random_tensor({4, 2}, 22, 0.0f, 1.0f);
  const std::vector<std::int32_t> y = {0, 1, 1, 0};
  const CandidateAssignment assign{{0, 1, 0, 1}};  // candidate 2 unused

  const FadePosterior post = base.clone(true);
  RngState r(0);
  backward(ops::cross_entropy(forward_instancewise(post, x, assign, false, r).logits, y));

  auto loss_at = [&](std::size_t cand, std::size_t tensor, std::size_t idx, float delta) {
    FadePosterior p = base.clone(false);
    auto ts = p.candidate_tensors(cand);
    ts[tensor].mutable_data()[idx] += delta;
    NoGradGuard g;
    RngState rr(0);
    return double(ops::cross_entropy(forward_instancewise(p, x, assign, false, rr).logits, y).item());
  };
  const double h = 1e-3;
  for (std::size_t cand = 0; cand < 3; ++cand) {
    const auto ts = post.candidate_tensors(cand);
    for (std::size_t t = 0; t < ts.size(); ++t) {
      const auto grad = ts[t].grad_or_zeros();
      for (std::size_t i = 0; i < ts[t].numel(); ++i) {
        const double numeric = (loss_at(cand, t, i, h) - loss_at(cand, t, i, -h)) / (2 * h);
        EXPECT_NEAR(grad[i], numeric, 2e-3) << "candidate " << cand;
        if (cand == 2) {
          EXPECT_EQ(grad[i], 0.0f);
          EXPECT_EQ(numeric, 0.0);
        }
      }
    }
  }
  for (const auto& t : post.shared_tensors()) EXPECT_TRUE(t.has_grad());
}

TEST(Parallel, MatchesSequentialLoop) {
  for (const char* id : {"mlp2", "cnn", "cnn-dropout", "mlp-mnist"}) {
    const NetworkSpec spec = reference_network(id);
    const FadePosterior post = random_posterior(spec, 5, 31);
    Shape shape = {3};
    shape.insert(shape.end(), spec.input_shape.begin(), spec.input_shape.end());
    const Tensor x = random_tensor(shape, 32, 0.0f, 1.0f);
    const auto par = forward_parallel(post, x, 5);
    const auto seq = forward_sequential(post, x);
    EXPECT_EQ(par.logits.shape(), (Shape{3, 5, spec.num_classes()})) << id;
    EXPECT_EQ(par.z.shape(), (Shape{3, 5, spec.feature_dim()})) << id;
    EXPECT_LE(max_rel(par.logits, seq.logits), 1e-5) << id;
    EXPECT_LE(max_rel(par.z, seq.z), 1e-5) << id;
    // the sequential reference is literally one forward per candidate
    RngState r(0);
    const auto third = forward(spec, post.candidate_params(2), x, false, r);
    const std::size_t k = spec.num_classes();
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(seq.logits[(b * 5 + 2) * k + j], third.logits[b * k + j]);
  }
}

TEST(Parallel, IdenticalCandidatesGiveIdenticalOutputs) {
  const NetworkSpec spec = reference_network("cnn");
  RngState rng(9);
  const FadePosterior post = init_from_params(spec, init_params(spec, rng), 3);
  const auto par = forward_parallel(post, random_tensor({2, 1, 28, 28}, 1, 0.0f, 1.0f), 3);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 1; t < 3; ++t)
      for (std::size_t j = 0; j < 10; ++j) EXPECT_FLOAT_EQ(par.logits[(b * 3 + t) * 10 + j], par.logits[b * 30 + j]);
}

TEST(Parallel, SampleCountMustEqualCandidates) {
  const FadePosterior post = random_posterior(small_mlp(4), 3, 1);
  const Tensor x = random_tensor({2, 2}, 4, 0.0f, 1.0f);
  EXPECT_EQ(code_of([&] { forward_parallel(post, x, 2); }), ErrorCode::kInvalidArgument);
  EXPECT_EQ(code_of([&] { posterior_predictive(post, x, 4); }), ErrorCode::kInvalidArgument);
}

TEST(Parallel, StackedCacheMatchesFreshStack) {
  const FadePosterior post = random_posterior(reference_network("cnn"), 4, 3);
  const Tensor x = random_tensor({2, 1, 28, 28}, 1, 0.0f, 1.0f);
  const StackedCandidates stacked = stack_candidates(post);
  EXPECT_EQ(to_vec(forward_parallel(post, stacked, x, 4).z), to_vec(forward_parallel(post, x, 4).z));
}

TEST(Predictive, IdenticalCandidatesGiveTheSoftmax) {
  const NetworkSpec spec = small_mlp(8, 3);
  RngState rng(3);
  const ParamSet params = init_params(spec, rng);
  const FadePosterior post = init_from_params(spec, params, 4);
  const Tensor x = random_tensor({5, 2}, 4, 0.0f, 1.0f);
  RngState r(0);
  const Tensor ref = ops::softmax(forward(spec, params, x, false, r).logits);
  const Tensor p = posterior_predictive(post, x, 4);
  for (std::size_t i = 0; i < ref.numel(); ++i) EXPECT_NEAR(p[i], ref[i], 1e-6);
}

TEST(Predictive, UniformMixtureOfOneHots) {
  // stacked logits [1, 2, 2]: candidate 0 is certain of class 0, candidate 1 of class 1
  const Tensor logits = Tensor::from_data({1, 2, 2}, {200.0f, 0.0f, 0.0f, 200.0f});
  const Tensor p = ops::softmax(log_predictive_from_logits(logits));
  EXPECT_NEAR(p[0], 0.5f, 1e-6);
  EXPECT_NEAR(p[1], 0.5f, 1e-6);
}

TEST(Predictive, MatchesHandAveragedSoftmax) {
  const NetworkSpec spec = small_mlp(6, 4);
  const FadePosterior post = random_posterior(spec, 3, 12);
  const Tensor x = random_tensor({7, 2}, 13, 0.0f, 1.0f);
  const Tensor p = posterior_predictive(post, x, 3);
  RngState r(0);
  std::vector<double> avg(7 * 4, 0.0);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor logits = forward(spec, post.candidate_params(k), x, false, r).logits;
    for (std::size_t b = 0; b < 7; ++b) {
      double m = -1e300, z = 0.0;
      for (std::size_t j = 0; j < 4; ++j) m = std::max(m, double(logits[b * 4 + j]));
      for (std::size_t j = 0; j < 4; ++j) z += std::exp(logits[b * 4 + j] - m);
      for (std::size_t j = 0; j < 4; ++j) avg[b * 4 + j] += std::exp(logits[b * 4 + j] - m) / z / 3.0;
    }
  }
  for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(p[i], avg[i], 1e-6);
  for (std::size_t b = 0; b < 7; ++b) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_GE(p[b * 4 + j], 0.0f);
      s += p[b * 4 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Predictive, LogPredictiveIsStableForLargeLogits) {
  const Tensor logits = Tensor::from_data({1, 2, 3}, {1000.0f, 0.0f, -1000.0f, 990.0f, 1000.0f, 0.0f});
  const Tensor lp = log_predictive_from_logits(logits);
  for (float v : lp.data()) EXPECT_FALSE(std::isnan(v));
  EXPECT_NEAR(std::exp(lp[0]) + std::exp(lp[1]), 1.0, 1e-6);
}

TEST(FeatureVariance, HandExamples) {
  EXPECT_EQ(feature_variance(rows({{1, 1}, {1, 1}, {1, 1}}, 2)), std::vector<double>{0.0});
  EXPECT_NEAR(feature_variance(rows({{1}, {2}, {3}}, 1))[0], 1.0, 1e-12);
  EXPECT_NEAR(feature_variance(rows({{0, 0}, {2, 0}}, 2))[0], 2.0, 1e-12);
}

TEST(FeatureVariance, NeedsTwoSamplesOfOneShape) {
  EXPECT_EQ(code_of([] { feature_variance(rows({{1, 2}}, 2)); }), ErrorCode::kInvalidArgument);
  const std::vector<Tensor> mixed = {Tensor::zeros({1, 2}), Tensor::zeros({1, 3})};
  EXPECT_EQ(code_of([&] { feature_variance(mixed); }), ErrorCode::kShapeMismatch);
  EXPECT_EQ(code_of([] { feature_variance(Tensor::zeros({2, 1, 3})); }), ErrorCode::kInvalidArgument);
}

TEST(FeatureVariance, MatchesOracleOrderFreeAndQuadratic) {
  RngState rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t t = 2 + rng.below(6), d = 1 + rng.below(9), b = 1 + rng.below(4);
    std::vector<Tensor> samples, shuffled, scaled;
    for (std::size_t s = 0; s < t; ++s) samples.push_back(sample_normal(rng, {b, d}, 0.0f, 2.0f));
    std::vector<std::size_t> order(t);
    std::iota(order.begin(), order.end(), 0);
    std::reverse(order.begin(), order.end());
    std::swap(order[0], order[t / 2]);
    for (auto o : order) shuffled.push_back(samples[o]);
    for (const auto& s : samples) scaled.push_back(ops::scale(s, 3.0f));

    const auto u = feature_variance(samples);
    const auto us = feature_variance(shuffled);
    const auto u3 = feature_variance(scaled);
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::vector<double>> per;
      for (const auto& s : samples) per.emplace_back(s.data().begin() + i * d, s.data().begin() + (i + 1) * d);
      const double want = oracle_variance(per);
      EXPECT_NEAR(u[i], want, 1e-5 * std::max(1.0, want));
      EXPECT_NEAR(us[i], u[i], 1e-6 * std::max(1.0, want));
      EXPECT_NEAR(u3[i], 9.0 * u[i], 1e-5 * std::max(1.0, 9.0 * want));
      EXPECT_GE(u[i], 0.0);
    }
  }
}

TEST(FeatureVariance, StackedAndDifferentiableFormsAgree) {
  const Tensor stacked = random_tensor({3, 4, 5}, 5);
  const auto u = feature_variance(stacked);
  const Tensor op = feature_variance_op(stacked);
  ASSERT_EQ(op.shape(), (Shape{3}));
  std::vector<Tensor> samples;
  for (std::size_t t = 0; t < 4; ++t) samples.push_back(ops::reshape(ops::slice(stacked, 1, t, t + 1), {3, 5}));
  const auto split = feature_variance(samples);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_NEAR(op[i], u[i], 1e-5);
    EXPECT_NEAR(split[i], u[i], 1e-6);
  }
  const auto check = fadelab::testing::grad_check(
      [](const std::vector<Tensor>& in) { return ops::sum(feature_variance_op(in[0])); }, {stacked});
  EXPECT_LT(check.rel_error, 1e-3);
}

TEST(FeatureVariance, NearIdenticalSamplesClampToZero) {
  const std::vector<Tensor> z = {Tensor::full({1, 64}, 1000.0f), Tensor::full({1, 64}, 1000.0f)};
  EXPECT_EQ(feature_variance(z)[0], 0.0);
}

TEST(SoftmaxVariance, Examples) {
  EXPECT_EQ(softmax_variance(rows({{0.2f, 0.8f}, {0.2f, 0.8f}}, 2))[0], 0.0);
  EXPECT_NEAR(softmax_variance(rows({{1, 0}, {0, 1}}, 2))[0], 1.0, 1e-12);
  const auto probs = rows({{0.1f, 0.9f, 0.3f, 0.7f}, {0.5f, 0.5f, 0.6f, 0.4f}, {0.8f, 0.2f, 0.3f, 0.7f}}, 2);
  EXPECT_EQ(softmax_variance(probs), feature_variance(probs));
  EXPECT_EQ(code_of([] { softmax_variance(rows({{1, 0}}, 2)); }), ErrorCode::kInvalidArgument);
}

TEST(McDropout, ZeroRateGivesZeroUncertainty) {
  const NetworkSpec spec = small_mlp(16, 2, 0.0f);
  RngState init(1), rng(2);
  const auto u = mc_dropout_uncertainty(spec, init_params(spec, init), random_tensor({6, 2}, 3, 0.0f, 1.0f), 10, rng);
  EXPECT_EQ(u, std::vector<double>(6, 0.0));
}

TEST(McDropout, HalfRateIsPositiveAndSeeded) {
  const NetworkSpec spec = small_mlp(16, 2, 0.5f);
  RngState init(1);
  const ParamSet params = init_params(spec, init);
  const Tensor x = random_tensor({6, 2}, 3, 0.2f, 1.0f);
  RngState a(7), b(7);
  const auto u = mc_dropout_uncertainty(spec, params, x, 10, a);
  EXPECT_EQ(u, mc_dropout_uncertainty(spec, params, x, 10, b));
  for (double v : u) EXPECT_GT(v, 0.0);
}

TEST(McDropout, Preconditions) {
  const NetworkSpec plain = small_mlp(4);
  RngState init(1), rng(2);
  const ParamSet params = init_params(plain, init);
  const Tensor x = random_tensor({2, 2}, 3, 0.0f, 1.0f);
  EXPECT_EQ(code_of([&] { mc_dropout_uncertainty(plain, params, x, 5, rng); }), ErrorCode::kInvalidArgument);
  const NetworkSpec drop = small_mlp(4, 2, 0.5f);
  const ParamSet dp = init_params(drop, init);
  EXPECT_EQ(code_of([&] { mc_dropout_uncertainty(drop, dp, x, 1, rng); }), ErrorCode::kInvalidArgument);
}

TEST(FadeCheckpoint, NamesAndRoundTrip) {
  EXPECT_EQ(candidate_param_name(7, 3, false), "bayes.7.cand3.weight");
  EXPECT_EQ(candidate_param_name(7, 0, true), "bayes.7.cand0.bias");
  const NetworkSpec spec = reference_network("cnn");
  const FadePosterior post = random_posterior(spec, 3, 4);
  const Checkpoint ckpt = make_fade_checkpoint(post, {{"seed", 4}});
  EXPECT_EQ(ckpt.kind, "fade");
  EXPECT_TRUE(ckpt.contains(candidate_param_name(spec.feature_tap - 1, 2, true)));
  const auto dir = scratch_dir("fade_ckpt");
  save_checkpoint(ckpt, dir / "f");
  const FadePosterior back = fade_from_checkpoint(load_checkpoint(dir / "f"));
  ASSERT_EQ(back.num_candidates(), 3u);
  for (std::size_t k = 0; k < 3; ++k) {
    const auto a = post.candidate_tensors(k), b = back.candidate_tensors(k);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(to_vec(a[i]), to_vec(b[i]));
  }
  const auto sa = post.shared_tensors(), sb = back.shared_tensors();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(to_vec(sa[i]), to_vec(sb[i]));
  EXPECT_EQ(code_of([&] { fade_from_checkpoint(make_network_checkpoint(spec, post.candidate_params(0), {})); }),
            ErrorCode::kCorruptManifest);
}

TEST(FadeModel, LogitsAreTheLogPredictive) {
  const NetworkSpec spec = small_mlp(8, 3);
  const FadePosterior post = random_posterior(spec, 4, 8);
  const Model m = Model::fade(post);
  const Tensor x = random_tensor({5, 2}, 9, 0.0f, 1.0f);
  const Tensor p = posterior_predictive(post, x, 4);
  const Tensor sm = ops::softmax(m.logits(x));
  const Tensor pred = m.predictive(x);
  for (std::size_t i = 0; i < p.numel(); ++i) {
    EXPECT_NEAR(sm[i], p[i], 1e-6);
    EXPECT_NEAR(pred[i], p[i], 1e-6);
  }
  const auto u = feature_variance(forward_parallel(post, x, 4).z);
  const Tensor mu = m.uncertainty(x);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(mu[i], u[i], 1e-5 * std::max(1.0, u[i]));
}
