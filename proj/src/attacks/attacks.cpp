#include "fadelab/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "fadelab/error.hpp"
#include "fadelab/filter.hpp"
#include "fadelab/hash.hpp"
#include "fadelab/ops.hpp"
#include "fadelab/sampling.hpp"

namespace fadelab {

namespace {

constexpr std::pair<AttackFamily, const char*> kFamilies[] = {
    {AttackFamily::kFgsm, "fgsm"}, {AttackFamily::kBim, "bim"}, {AttackFamily::kPgd, "pgd"},
    {AttackFamily::kMim, "mim"},   {AttackFamily::kDim, "dim"}, {AttackFamily::kTim, "tim"},
    {AttackFamily::kCw, "cw"},     {AttackFamily::kSpsa, "spsa"},
};

bool uses_momentum(AttackFamily f) {
  return f == AttackFamily::kMim || f == AttackFamily::kDim || f == AttackFamily::kTim;
}

std::size_t row_size(const Tensor& x) { return x.numel() / std::max<std::size_t>(x.dim(0), 1); }

// Budget radius in raw units for one instance of dimension d.
float raw_radius(float r, Norm norm, bool normalized, std::size_t d) {
  return norm == Norm::kL2 && normalized ? r * std::sqrt(static_cast<float>(d)) : r;
}

float sign(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

// Moves each row of x by `size` along dir: sign(dir) under linf, dir/||dir||
// under l2 (rows with a zero direction stay put).
void take_step(std::vector<float>& x, std::span<const float> dir, std::size_t b, std::size_t d, Norm norm, float size) {
  for (std::size_t i = 0; i < b; ++i) {
    const float* g = dir.data() + i * d;
    float* xi = x.data() + i * d;
    if (norm == Norm::kLinf) {
      for (std::size_t j = 0; j < d; ++j) xi[j] += size * sign(g[j]);
      continue;
    }
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(g[j]) * g[j];
    if (sq == 0.0) continue;
    const float f = static_cast<float>(size / std::sqrt(sq));
    for (std::size_t j = 0; j < d; ++j) xi[j] += f * g[j];
  }
}

// clip_{x,eps} followed by the optional pixel-range clamp.
void project(std::vector<float>& adv, std::span<const float> x, std::size_t b, std::size_t d, const AttackConfig& cfg) {
  const float r = raw_radius(cfg.eps, cfg.norm, cfg.normalized_l2, d);
  for (std::size_t i = 0; i < b; ++i) {
    float* a = adv.data() + i * d;
    const float* xi = x.data() + i * d;
    if (cfg.norm == Norm::kLinf) {
      for (std::size_t j = 0; j < d; ++j) a[j] = xi[j] + std::clamp(a[j] - xi[j], -r, r);
    } else {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(a[j] - xi[j]) * (a[j] - xi[j]);
      const double n = std::sqrt(sq);
      if (n > r) {
        // Shrink slightly below the radius so float rounding cannot push the
        // result outside.
        const double f = r / n * (1.0 - 1e-6);
        for (std::size_t j = 0; j < d; ++j) a[j] = xi[j] + static_cast<float>((a[j] - xi[j]) * f);
      }
    }
    if (cfg.clip_pixels)
      for (std::size_t j = 0; j < d; ++j) a[j] = std::clamp(a[j], cfg.pixel_lo, cfg.pixel_hi);
  }
}

enum class Objective { kCrossEntropy, kCw };

// Per-batch attack objective, summed over instances so that each row's
// gradient is that of its own per-instance objective.
Tensor objective(const Model& model, const Tensor& x, std::span<const std::int32_t> y, Objective kind,
                 float uncertainty_weight) {
  const float b = static_cast<float>(x.dim(0));
  const Tensor logits = model.logits(x);
  Tensor obj = kind == Objective::kCrossEntropy
                   ? ops::scale(ops::cross_entropy(logits, y), b)
                   : ops::scale(ops::sum(ops::relu(logit_margin(logits, y))), -1.0f);
  if (uncertainty_weight > 0.0f) obj = ops::sub(obj, ops::scale(ops::sum(model.uncertainty(x)), uncertainty_weight));
  return obj;
}

struct DimDraw {
  bool apply = false;
  std::size_t h = 0, w = 0, top = 0, left = 0;
};

DimDraw draw_dim(const AttackConfig& cfg, const Shape& shape, RngState& rng) {
  DimDraw d;
  if (shape.size() != 4) return d;
  d.apply = rng.bernoulli(cfg.dim_prob);
  const double s = cfg.dim_min_scale + (1.0 - cfg.dim_min_scale) * rng.uniform01();
  d.h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s * shape[2])), 1, shape[2]);
  d.w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(s * shape[3])), 1, shape[3]);
  d.top = static_cast<std::size_t>(rng.below(shape[2] - d.h + 1));
  d.left = static_cast<std::size_t>(rng.below(shape[3] - d.w + 1));
  return d;
}

std::vector<float> input_gradient(const Model& model, const Tensor& x, std::span<const std::int32_t> y,
                                  Objective kind, float uncertainty_weight, const DimDraw* dim) {
  Tensor xv = x.detach();
  xv.set_requires_grad(true);
  const Tensor fed = dim && dim->apply ? ops::resize_pad(xv, dim->h, dim->w, dim->top, dim->left) : xv;
  backward(objective(model, fed, y, kind, uncertainty_weight));
  return xv.grad_or_zeros();
}

void check_labels(const Tensor& x, std::span<const std::int32_t> y) {
  require(x.rank() >= 2 && x.dim(0) == y.size(), ErrorCode::kShapeMismatch,
          "attack: " + std::to_string(y.size()) + " labels for inputs " + shape_str(x.shape()));
}

}  // namespace

const char* family_name(AttackFamily f) {
  for (const auto& [k, n] : kFamilies)
    if (k == f) return n;
  return "?";
}

AttackFamily family_from_name(const std::string& name) {
  for (const auto& [k, n] : kFamilies)
    if (name == n) return k;
  fail(ErrorCode::kConfig, "unknown attack family '" + name + "'");
}

const char* norm_name(Norm n) { return n == Norm::kLinf ? "linf" : "l2"; }

Norm norm_from_name(const std::string& name) {
  if (name == "linf") return Norm::kLinf;
  if (name == "l2") return Norm::kL2;
  fail(ErrorCode::kConfig, "unknown norm '" + name + "' (expected linf or l2)");
}

void AttackConfig::validate() const {
  auto check = [](bool ok, const std::string& msg) { require(ok, ErrorCode::kConfig, "attack config: " + msg); };
  check(eps >= 0.0f, "eps must be >= 0");
  check(step >= 0.0f, "step must be >= 0");
  check(family == AttackFamily::kFgsm || steps >= 1, "iterative attacks need steps >= 1");
  check(momentum >= 0.0f, "momentum must be >= 0");
  check(dim_prob >= 0.0f && dim_prob <= 1.0f, "dim_prob must lie in [0, 1]");
  check(dim_min_scale > 0.0f && dim_min_scale <= 1.0f, "dim_min_scale must lie in (0, 1]");
  check(tim_kernel % 2 == 1, "tim_kernel must be odd, got " + std::to_string(tim_kernel));
  check(tim_sigma > 0.0f, "tim_sigma must be > 0");
  check(spsa_samples >= 1, "spsa_samples must be >= 1");
  check(spsa_sigma > 0.0f, "spsa_sigma must be > 0");
  check(spsa_lr > 0.0f, "spsa_lr must be > 0");
  check(uncertainty_weight >= 0.0f, "uncertainty_weight must be >= 0");
  check(pixel_lo <= pixel_hi, "pixel range must satisfy lo <= hi");
}

std::string AttackConfig::label() const {
  std::string s = family_name(family);
  if (norm == Norm::kL2) s += "-l2";
  if (uncertainty_weight > 0.0f) s += "-ideal";
  return s;
}

nlohmann::json to_json(const AttackConfig& c) {
  return {{"family", family_name(c.family)},
          {"norm", norm_name(c.norm)},
          {"eps", c.eps},
          {"step", c.step},
          {"steps", c.steps},
          {"momentum", c.momentum},
          {"dim_prob", c.dim_prob},
          {"dim_min_scale", c.dim_min_scale},
          {"tim_kernel", c.tim_kernel},
          {"tim_sigma", c.tim_sigma},
          {"spsa_sigma", c.spsa_sigma},
          {"spsa_samples", c.spsa_samples},
          {"spsa_lr", c.spsa_lr},
          {"uncertainty_weight", c.uncertainty_weight},
          {"clip_pixels", c.clip_pixels},
          {"pixel_lo", c.pixel_lo},
          {"pixel_hi", c.pixel_hi},
          {"normalized_l2", c.normalized_l2}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::kConfig, "attack config must be a JSON object");
  AttackConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "family") c.family = family_from_name(v.get<std::string>());
      else if (key == "norm") c.norm = norm_from_name(v.get<std::string>());
      else if (key == "eps") c.eps = v.get<float>();
      else if (key == "step") c.step = v.get<float>();
      else if (key == "steps") c.steps = v.get<std::size_t>();
      else if (key == "momentum") c.momentum = v.get<float>();
      else if (key == "dim_prob") c.dim_prob = v.get<float>();
      else if (key == "dim_min_scale") c.dim_min_scale = v.get<float>();
      else if (key == "tim_kernel") c.tim_kernel = v.get<std::size_t>();
      else if (key == "tim_sigma") c.tim_sigma = v.get<float>();
      else if (key == "spsa_sigma") c.spsa_sigma = v.get<float>();
      else if (key == "spsa_samples") c.spsa_samples = v.get<std::size_t>();
      else if (key == "spsa_lr") c.spsa_lr = v.get<float>();
      else if (key == "uncertainty_weight") c.uncertainty_weight = v.get<float>();
      else if (key == "clip_pixels") c.clip_pixels = v.get<bool>();
      else if (key == "pixel_lo") c.pixel_lo = v.get<float>();
      else if (key == "pixel_hi") c.pixel_hi = v.get<float>();
      else if (key == "normalized_l2") c.normalized_l2 = v.get<bool>();
      else fail(ErrorCode::kConfig, "attack config: unknown key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kConfig, "attack config: bad value for '" + key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

std::string attack_config_hash(const AttackConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

double normalized_l2(std::span<const float> a) {
  require(!a.empty(), ErrorCode::kInvalidArgument, "normalized_l2 of an empty tensor");
  double sq = 0.0;
  for (float v : a) sq += static_cast<double>(v) * v;
  return std::sqrt(sq) / std::sqrt(static_cast<double>(a.size()));
}

double normalized_l2(const Tensor& a) {
  require(a.defined(), ErrorCode::kInvalidArgument, "normalized_l2 of an undefined tensor");
  return normalized_l2(a.data());
}

std::vector<double> perturbation_sizes(const Tensor& x, const Tensor& x_adv, Norm norm, bool normalized) {
  require(x.shape() == x_adv.shape(), ErrorCode::kShapeMismatch, "perturbation_sizes: shape mismatch");
  const std::size_t b = x.dim(0), d = row_size(x);
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    double m = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = static_cast<double>(x_adv[i * d + j]) - x[i * d + j];
      m = std::max(m, std::abs(delta));
      sq += delta * delta;
    }
    out[i] = norm == Norm::kLinf ? m : (normalized ? std::sqrt(sq / static_cast<double>(d)) : std::sqrt(sq));
  }
  return out;
}

Tensor fgsm(const Model& model, const Tensor& x, std::span<const std::int32_t> y, float eps, Norm norm,
            bool clip_pixels, bool normalized) {
  check_labels(x, y);
  require(eps >= 0.0f, ErrorCode::kInvalidArgument, "fgsm: eps must be >= 0");
  const std::size_t b = x.dim(0), d = row_size(x);
  const auto g = input_gradient(model, x, y, Objective::kCrossEntropy, 0.0f, nullptr);
  std::vector<float> adv(x.data().begin(), x.data().end());
  take_step(adv, g, b, d, norm, raw_radius(eps, norm, normalized, d));
  AttackConfig cfg;
  cfg.norm = norm;
  cfg.eps = eps;
  cfg.clip_pixels = clip_pixels;
  cfg.normalized_l2 = normalized;
  project(adv, x.data(), b, d, cfg);
  return Tensor::from_data(x.shape(), std::move(adv));
}

Tensor iterative_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y,
                        const AttackConfig& cfg, RngState& rng) {
  cfg.validate();
  check_labels(x, y);
  if (cfg.family == AttackFamily::kFgsm && cfg.uncertainty_weight == 0.0f)
    return fgsm(model, x, y, cfg.eps, cfg.norm, cfg.clip_pixels, cfg.normalized_l2);
  if (cfg.family == AttackFamily::kSpsa) return spsa_attack(model, x, y, cfg, rng);
  require(cfg.uncertainty_weight == 0.0f || model.is_fade(), ErrorCode::kInvalidArgument,
          "uncertainty-aware attacks need a FADE model");

  const std::size_t b = x.dim(0), d = row_size(x);
  const bool one_shot = cfg.family == AttackFamily::kFgsm;
  const std::size_t steps = one_shot ? 1 : cfg.steps;
  const float step = raw_radius(one_shot ? cfg.eps : cfg.step, cfg.norm, cfg.normalized_l2, d);
  const Objective kind = cfg.family == AttackFamily::kCw ? Objective::kCw : Objective::kCrossEntropy;
  const bool image = x.rank() == 4;
  const std::vector<float> tim = cfg.family == AttackFamily::kTim ? gaussian_kernel(cfg.tim_kernel, cfg.tim_sigma)
                                                                  : std::vector<float>{};

  std::vector<float> adv(x.data().begin(), x.data().end());
  if (cfg.family == AttackFamily::kPgd) {
    const float r = raw_radius(cfg.eps, cfg.norm, cfg.normalized_l2, d);
    if (cfg.norm == Norm::kLinf) {
      const Tensor u = sample_uniform(rng, x.shape(), -r, r);
      for (std::size_t i = 0; i < adv.size(); ++i) adv[i] += u[i];
    } else {
      // Uniform in the l2 ball: Gaussian direction, radius r * u^(1/d).
      const Tensor n = sample_normal(rng, x.shape(), 0.0f, 1.0f);
      for (std::size_t i = 0; i < b; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) sq += static_cast<double>(n[i * d + j]) * n[i * d + j];
        const double rad = r * std::pow(rng.uniform01(), 1.0 / static_cast<double>(d));
        const double f = sq > 0.0 ? rad / std::sqrt(sq) : 0.0;
        for (std::size_t j = 0; j < d; ++j) adv[i * d + j] += static_cast<float>(n[i * d + j] * f);
      }
    }
    project(adv, x.data(), b, d, cfg);
  }

  std::vector<float> accum(adv.size(), 0.0f);
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor cur = Tensor::from_data(x.shape(), adv);
    DimDraw dim;
    if (cfg.family == AttackFamily::kDim) dim = draw_dim(cfg, x.shape(), rng);
    std::vector<float> g = input_gradient(model, cur, y, kind, cfg.uncertainty_weight, &dim);
    if (cfg.family == AttackFamily::kTim && image) {
      const Tensor smoothed = filter_planes(Tensor::from_data(x.shape(), g), tim, cfg.tim_kernel);
      g.assign(smoothed.data().begin(), smoothed.data().end());
    }
    if (uses_momentum(cfg.family)) {
      for (std::size_t i = 0; i < b; ++i) {
        double l1 = 0.0;
        for (std::size_t j = 0; j < d; ++j) l1 += std::abs(g[i * d + j]);
        const float inv = l1 > 0.0 ? static_cast<float>(1.0 / l1) : 0.0f;
        for (std::size_t j = 0; j < d; ++j) accum[i * d + j] = cfg.momentum * accum[i * d + j] + g[i * d + j] * inv;
      }
      take_step(adv, accum, b, d, cfg.norm, step);
    } else {
      take_step(adv, g, b, d, cfg.norm, step);
    }
    project(adv, x.data(), b, d, cfg);
  }
  return Tensor::from_data(x.shape(), std::move(adv));
}

Tensor spsa_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, const AttackConfig& cfg,
                   RngState& rng) {
  cfg.validate();
  check_labels(x, y);
  const std::size_t b = x.dim(0), d = row_size(x), q = cfg.spsa_samples;
  // The probe batch holds 2q perturbed copies of every instance, in instance order.
  auto margins = [&](const Tensor& probes) {
    NoGradGuard guard;
    const std::size_t n = probes.dim(0), chunk = 512;
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; s += chunk) {
      const std::size_t e = std::min(n, s + chunk);
      const Tensor part = ops::slice(probes, 0, s, e);
      std::vector<std::int32_t> labels(e - s);
      for (std::size_t r = s; r < e; ++r) labels[r - s] = y[r / (2 * q)];
      const Tensor m = logit_margin(model.logits(part), labels);
      out.insert(out.end(), m.data().begin(), m.data().end());
    }
    return out;
  };

  constexpr float kBeta1 = 0.9f, kBeta2 = 0.999f, kAdamEps = 1e-8f;
  std::vector<float> adv(x.data().begin(), x.data().end());
  std::vector<float> m(adv.size(), 0.0f), v(adv.size(), 0.0f);
  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const Tensor cur = Tensor::from_data(x.shape(), adv);
    const auto g = spsa_gradient(margins, cur, cfg.spsa_sigma, q, rng);
    const float c1 = 1.0f - std::pow(kBeta1, static_cast<float>(t));
    const float c2 = 1.0f - std::pow(kBeta2, static_cast<float>(t));
    // Descend on the margin: push the true class below the runner-up.
    for (std::size_t i = 0; i < adv.size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0f - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0f - kBeta2) * g[i] * g[i];
      adv[i] -= cfg.spsa_lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
    }
    project(adv, x.data(), b, d, cfg);
  }
  return Tensor::from_data(x.shape(), std::move(adv));
}

Tensor ideal_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, AttackConfig base,
                    float uncertainty_weight, RngState& rng) {
  require(uncertainty_weight >= 0.0f, ErrorCode::kInvalidArgument, "ideal attack: uncertainty weight must be >= 0");
  require(base.family != AttackFamily::kSpsa, ErrorCode::kInvalidArgument,
          "ideal attack needs a gradient-based base attack");
  base.uncertainty_weight = uncertainty_weight;
  return iterative_attack(model, x, y, base, rng);
}

Tensor run_attack(const Model& model, const Tensor& x, std::span<const std::int32_t> y, const AttackConfig& cfg,
                  RngState& rng) {
  return iterative_attack(model, x, y, cfg, rng);
}

Dataset craft_adversarial(const Model& model, const Dataset& clean, const AttackConfig& cfg, RngState& rng,
                          std::size_t batch_size) {
  cfg.validate();
  require(clean.size() > 0, ErrorCode::kInvalidArgument, "craft_adversarial: empty dataset");
  require(clean.instance_shape() == model.spec().input_shape, ErrorCode::kShapeMismatch,
          "craft_adversarial: data shape " + shape_str(clean.instance_shape()) + " does not match model input " +
              shape_str(model.spec().input_shape));
  const std::size_t n = clean.size(), d = row_size(clean.inputs);
  std::vector<float> out(clean.inputs.numel());
  for (std::size_t s = 0, chunk = 0; s < n; s += batch_size, ++chunk) {
    const std::size_t e = std::min(n, s + batch_size);
    std::vector<std::size_t> rows(e - s);
    for (std::size_t r = s; r < e; ++r) rows[r - s] = r;
    const Batch batch = make_batch(clean, rows);
    RngState chunk_rng = rng.fork(chunk);
    const Tensor adv = run_attack(model, batch.x, batch.y, cfg, chunk_rng);
    std::copy(adv.data().begin(), adv.data().end(), out.begin() + s * d);
  }
  Dataset result = clean.with_inputs(Tensor::from_data(clean.inputs.shape(), std::move(out)),
                                     "adversarial:" + cfg.label() + " of " + clean.provenance);
  if (!cfg.clip_pixels) {
    // Unclipped attacks may leave the nominal range.
    for (float v : result.inputs.data()) {
      result.range_lo = std::min(result.range_lo, v);
      result.range_hi = std::max(result.range_hi, v);
    }
  }
  return result;
}

AdversarialSet transfer_craft(const Model& surrogate, const Model& target, const Dataset& clean,
                              const AttackConfig& cfg, std::uint64_t seed) {
  require(surrogate.spec().input_shape == target.spec().input_shape, ErrorCode::kShapeMismatch,
          "transfer_craft: surrogate input " + shape_str(surrogate.spec().input_shape) + " vs target input " +
              shape_str(target.spec().input_shape));
  RngState rng(seed);
  AdversarialSet set{craft_adversarial(surrogate, clean, cfg, rng), cfg, surrogate.hash(), target.hash(), seed};
  return set;
}

AdversarialSet white_box_craft(const Model& model, const Dataset& clean, const AttackConfig& cfg, std::uint64_t seed) {
  RngState rng(seed);
  return AdversarialSet{craft_adversarial(model, clean, cfg, rng), cfg, model.hash(), model.hash(), seed};
}

std::filesystem::path attack_sidecar_path(const std::filesystem::path& stem) {
  auto base = archive_manifest_path(stem);
  base.replace_extension();
  return base.string() + ".attack.json";
}

void save_adversarial_set(const AdversarialSet& set, const std::filesystem::path& stem) {
  nlohmann::json side = {{"format", "fadelab-attack/1"},
                         {"attack", to_json(set.config)},
                         {"attack_hash", attack_config_hash(set.config)},
                         {"crafting_model_hash", set.crafting_hash},
                         {"target_model_hash", set.target_hash},
                         {"transfer", set.crafting_hash != set.target_hash},
                         {"seed", set.seed}};
  save_set(set.data, stem, {{"attack", side}});
  std::ofstream os(attack_sidecar_path(stem), std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + attack_sidecar_path(stem).string());
  os << side.dump(2) << '\n';
}

nlohmann::json load_attack_sidecar(const std::filesystem::path& stem) {
  const auto path = attack_sidecar_path(stem);
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, path.string() + ": " + e.what());
  }
}

}  // namespace fadelab
