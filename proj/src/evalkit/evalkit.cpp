#include "fadelab/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fadelab/error.hpp"
#include "fadelab/fade.hpp"
#include "fadelab/ops.hpp"

namespace fadelab {

const char* metric_name(Metric m) {
  switch (m) {
    case Metric::kFeatureVariance: return "feature_var";
    case Metric::kSoftmaxVariance: return "softmax_var";
    case Metric::kMcDropout: return "mc_dropout";
  }
  return "?";
}

Metric metric_from_name(const std::string& name) {
  for (Metric m : {Metric::kFeatureVariance, Metric::kSoftmaxVariance, Metric::kMcDropout})
    if (name == metric_name(m)) return m;
  fail(ErrorCode::kConfig, "unknown metric '" + name + "' (expected feature_var, softmax_var or mc_dropout)");
}

double auroc(std::span<const double> neg, std::span<const double> pos) {
  require(!neg.empty() && !pos.empty(), ErrorCode::kInvalidArgument, "auroc needs nonempty clean and adversarial scores");
  std::vector<double> sorted(neg.begin(), neg.end());
  std::sort(sorted.begin(), sorted.end());
  // Twice the Mann-Whitney U statistic, kept integral.
  std::uint64_t twice_u = 0;
  for (double p : pos) {
    const auto lo = std::lower_bound(sorted.begin(), sorted.end(), p);
    const auto hi = std::upper_bound(lo, sorted.end(), p);
    twice_u += 2 * static_cast<std::uint64_t>(lo - sorted.begin()) + static_cast<std::uint64_t>(hi - lo);
  }
  const std::uint64_t total = 2 * static_cast<std::uint64_t>(neg.size()) * pos.size();
  // Divide the smaller side so that auroc(a,b) + auroc(b,a) is exactly 1.
  if (2 * twice_u <= total) return static_cast<double>(twice_u) / static_cast<double>(total);
  return 1.0 - static_cast<double>(total - twice_u) / static_cast<double>(total);
}

Histogram shared_histogram(std::span<const double> clean, std::span<const double> adv, std::size_t bins) {
  require(bins >= 1, ErrorCode::kInvalidArgument, "histogram needs at least one bin");
  Histogram h;
  h.clean.assign(bins, 0);
  h.adv.assign(bins, 0);
  double lo = INFINITY, hi = -INFINITY;
  for (auto s : {clean, adv})
    for (double v : s) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  if (!(lo <= hi)) lo = 0.0, hi = 1.0;
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / static_cast<double>(bins);
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.edges.back() = hi;
  auto bin_of = [&](double v) {
    const auto b = static_cast<std::size_t>((v - lo) / width);
    return std::min(b, bins - 1);
  };
  for (double v : clean) ++h.clean[bin_of(v)];
  for (double v : adv) ++h.adv[bin_of(v)];
  return h;
}

namespace {

std::vector<std::int32_t> argmax_rows(const Tensor& probs) {
  const std::size_t b = probs.dim(0), k = probs.dim(1);
  std::vector<std::int32_t> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const auto r = probs.data().subspan(i * k, k);
    out[i] = static_cast<std::int32_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

void check_samples(const Model& model, Metric metric, std::size_t samples) {
  if (metric == Metric::kMcDropout) {
    require(!model.is_fade(), ErrorCode::kInvalidArgument, "mc_dropout scores a deterministic network, not FADE");
    require(samples >= 2, ErrorCode::kInvalidArgument, "mc_dropout needs T >= 2");
    return;
  }
  require(model.is_fade(), ErrorCode::kInvalidArgument,
          std::string(metric_name(metric)) + " needs a FADE model; use mc_dropout for deterministic networks");
  require(samples == model.posterior().num_candidates(), ErrorCode::kInvalidArgument,
          "T=" + std::to_string(samples) + " must equal C=" + std::to_string(model.posterior().num_candidates()));
}

double accuracy_of(std::span<const std::int32_t> pred, std::span<const std::int32_t> labels) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace

Scored score_dataset(const Model& model, const Dataset& data, Metric metric, std::size_t samples, RngState& rng,
                     std::size_t batch_size) {
  require(data.size() > 0, ErrorCode::kInvalidArgument, "cannot score an empty dataset");
  check_samples(model, metric, samples);
  NoGradGuard guard;
  Scored out;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    const std::size_t e = std::min(data.size(), s + batch_size);
    std::vector<std::size_t> rows(e - s);
    for (std::size_t r = s; r < e; ++r) rows[r - s] = r;
    const Tensor x = data.gather_inputs(rows);
    std::vector<double> scores;
    std::vector<std::int32_t> pred;
    if (metric == Metric::kMcDropout) {
      const auto& net = model.network();
      scores = mc_dropout_uncertainty(net.spec, net.params, x, samples, rng);
      pred = argmax_rows(model.predictive(x));
    } else {
      const ParallelResult r = model.parallel(x);
      const Tensor probs = ops::softmax(r.logits);
      scores = metric == Metric::kFeatureVariance ? feature_variance(r.z) : softmax_variance(probs);
      pred = argmax_rows(ops::mean(probs, 1));
    }
    out.scores.insert(out.scores.end(), scores.begin(), scores.end());
    out.pred.insert(out.pred.end(), pred.begin(), pred.end());
  }
  return out;
}

DetectionReport evaluate_detection(const Model& model, const Dataset& clean, const Dataset& adv, Metric metric,
                                   std::size_t samples, std::uint64_t seed, std::string attack_hash) {
  require(clean.size() > 0 && adv.size() > 0, ErrorCode::kInvalidArgument, "detection needs nonempty sets");
  RngState rng(seed);
  RngState clean_rng = rng.fork(1), adv_rng = rng.fork(2);
  const Scored c = score_dataset(model, clean, metric, samples, clean_rng);
  const Scored a = score_dataset(model, adv, metric, samples, adv_rng);
  DetectionReport r;
  r.metric = metric_name(metric);
  r.clean_scores = c.scores;
  r.adv_scores = a.scores;
  r.clean_pred = c.pred;
  r.adv_pred = a.pred;
  r.clean_labels = clean.labels;
  r.adv_labels = adv.labels;
  r.auroc = auroc(r.clean_scores, r.adv_scores);
  r.clean_accuracy = accuracy_of(r.clean_pred, r.clean_labels);
  r.adv_accuracy = accuracy_of(r.adv_pred, r.adv_labels);
  r.histogram = shared_histogram(r.clean_scores, r.adv_scores, 64);
  r.metadata = {{"attack_hash", std::move(attack_hash)},
                {"model_hash", model.hash()},
                {"seed", seed},
                {"samples", samples},
                {"scored", "all"}};
  return r;
}

std::vector<std::int32_t> predict(const Model& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<std::int32_t> out;
  for (std::size_t s = 0; s < data.size(); s += batch_size) {
    const std::size_t e = std::min(data.size(), s + batch_size);
    std::vector<std::size_t> rows(e - s);
    for (std::size_t r = s; r < e; ++r) rows[r - s] = r;
    const auto p = argmax_rows(model.predictive(data.gather_inputs(rows)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double evaluate_accuracy(const Model& model, const Dataset& data, std::size_t samples) {
  require(data.size() > 0, ErrorCode::kInvalidArgument, "accuracy of an empty dataset");
  if (model.is_fade())
    require(samples == model.posterior().num_candidates(), ErrorCode::kInvalidArgument,
            "T=" + std::to_string(samples) + " must equal C=" + std::to_string(model.posterior().num_candidates()));
  return accuracy_of(predict(model, data), data.labels);
}

nlohmann::json report_to_json(const DetectionReport& r) {
  return {{"format", "fadelab-report/1"},
          {"metric", r.metric},
          {"auroc", r.auroc},
          {"clean_accuracy", r.clean_accuracy},
          {"adv_accuracy", r.adv_accuracy},
          {"clean_scores", r.clean_scores},
          {"adv_scores", r.adv_scores},
          {"clean_labels", r.clean_labels},
          {"adv_labels", r.adv_labels},
          {"clean_pred", r.clean_pred},
          {"adv_pred", r.adv_pred},
          {"histogram", {{"edges", r.histogram.edges}, {"clean", r.histogram.clean}, {"adv", r.histogram.adv}}},
          {"metadata", r.metadata}};
}

DetectionReport report_from_json(const nlohmann::json& j) {
  try {
    require(j.at("format") == "fadelab-report/1", ErrorCode::kCorruptManifest, "unsupported report format");
    DetectionReport r;
    r.metric = j.at("metric").get<std::string>();
    r.auroc = j.at("auroc").get<double>();
    r.clean_accuracy = j.at("clean_accuracy").get<double>();
    r.adv_accuracy = j.at("adv_accuracy").get<double>();
    r.clean_scores = j.at("clean_scores").get<std::vector<double>>();
    r.adv_scores = j.at("adv_scores").get<std::vector<double>>();
    r.clean_labels = j.at("clean_labels").get<std::vector<std::int32_t>>();
    r.adv_labels = j.at("adv_labels").get<std::vector<std::int32_t>>();
    r.clean_pred = j.at("clean_pred").get<std::vector<std::int32_t>>();
    r.adv_pred = j.at("adv_pred").get<std::vector<std::int32_t>>();
    const auto& h = j.at("histogram");
    r.histogram.edges = h.at("edges").get<std::vector<double>>();
    r.histogram.clean = h.at("clean").get<std::vector<std::size_t>>();
    r.histogram.adv = h.at("adv").get<std::vector<std::size_t>>();
    r.metadata = j.at("metadata");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptManifest, std::string("malformed report: ") + e.what());
  }
}

std::string report_csv(const DetectionReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "id,label,pred,score,split\n";
  std::size_t id = 0;
  for (std::size_t i = 0; i < r.clean_scores.size(); ++i)
    os << id++ << ',' << r.clean_labels[i] << ',' << r.clean_pred[i] << ',' << r.clean_scores[i] << ",clean\n";
  for (std::size_t i = 0; i < r.adv_scores.size(); ++i)
    os << id++ << ',' << r.adv_labels[i] << ',' << r.adv_pred[i] << ',' << r.adv_scores[i] << ",adv\n";
  return os.str();
}

void save_report(const DetectionReport& r, const std::filesystem::path& stem) {
  auto base = stem;
  if (base.extension() == ".json" || base.extension() == ".csv") base.replace_extension();
  if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
  {
    std::ofstream os(base.string() + ".json", std::ios::binary);
    require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + base.string() + ".json");
    os << report_to_json(r).dump(2) << '\n';
  }
  std::ofstream os(base.string() + ".csv", std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + base.string() + ".csv");
  os << report_csv(r);
}

DetectionReport load_report(const std::filesystem::path& json_path) {
  std::ifstream is(json_path, std::ios::binary);
  require(static_cast<bool>(is), ErrorCode::kIo, "cannot read " + json_path.string());
  try {
    return report_from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kCorruptManifest, json_path.string() + ": " + e.what());
  }
}

}  // namespace fadelab
