#include "fadelab/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "fadelab/error.hpp"
#include "fadelab/hash.hpp"

namespace fadelab {

namespace {

using nlohmann::json;

// Reads optional keys out of one JSON object and rejects whatever is left.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j.is_object(), ErrorCode::kConfig, name_ + ": expected a JSON object");
  }

  template <class T>
  bool get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return false;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::kConfig, name_ + "." + key + ": " + e.what());
    }
    return true;
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void need(const char* key) {
    require(j_.contains(key), ErrorCode::kConfig, name_ + ": missing required field '" + key + "'");
  }

  void finish() const {
    for (const auto& [key, v] : j_.items())
      require(seen_.count(key) > 0, ErrorCode::kConfig, name_ + ": unknown key '" + key + "'");
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

DatasetSection dataset_from_json(const json& j) {
  DatasetSection d;
  Section s(j, "dataset");
  s.get("source", d.source);
  s.get("train_images", d.train_images);
  s.get("train_labels", d.train_labels);
  s.get("test_images", d.test_images);
  s.get("test_labels", d.test_labels);
  s.get("train_size", d.train_size);
  s.get("test_size", d.test_size);
  s.get("noise_std", d.noise_std);
  s.get("eval_size", d.eval_size);
  s.finish();
  require(d.source == "idx" || d.source == "two_moons", ErrorCode::kConfig,
          "dataset.source: expected 'idx' or 'two_moons', got '" + d.source + "'");
  require(d.eval_size >= 1, ErrorCode::kConfig, "dataset.eval_size must be >= 1");
  if (d.source == "two_moons")
    require(d.train_size >= 2 && d.test_size >= 2, ErrorCode::kConfig, "dataset: two_moons sizes must be >= 2");
  return d;
}

json to_json(const DatasetSection& d) {
  json j{{"source", d.source}, {"eval_size", d.eval_size}};
  if (d.source == "idx") {
    j["train_images"] = d.train_images;
    j["train_labels"] = d.train_labels;
    j["test_images"] = d.test_images;
    j["test_labels"] = d.test_labels;
  } else {
    j["train_size"] = d.train_size;
    j["test_size"] = d.test_size;
    j["noise_std"] = d.noise_std;
  }
  return j;
}

ModelSection model_from_json(const json& j) {
  ModelSection m;
  Section s(j, "model");
  s.need("architecture");
  s.get("architecture", m.architecture);
  std::size_t bb = 0;
  if (s.get("bayes_boundary", bb)) m.bayes_boundary = bb;
  s.finish();
  const auto ids = reference_network_ids();
  require(std::find(ids.begin(), ids.end(), m.architecture) != ids.end(), ErrorCode::kConfig,
          "model.architecture: unknown id '" + m.architecture + "'");
  return m;
}

AttackEntry attack_entry_from_json(const json& j, std::size_t index) {
  AttackEntry a;
  Section s(j, "attacks[" + std::to_string(index) + "]");
  s.need("id");
  s.get("id", a.id);
  std::string protocol;
  if (s.get("protocol", protocol)) a.protocol = protocol_from_name(protocol);
  if (const json* c = s.raw("config")) a.config = attack_config_from_json(*c);
  s.finish();
  require(!a.id.empty() && a.id.find_first_of("/\\ ") == std::string::npos, ErrorCode::kConfig,
          "attacks[" + std::to_string(index) + "].id must be a nonempty name without separators");
  return a;
}

EvalSection eval_from_json(const json& j) {
  EvalSection e;
  Section s(j, "eval");
  std::vector<std::string> names;
  if (s.get("metrics", names)) {
    require(!names.empty(), ErrorCode::kConfig, "eval.metrics must not be empty");
    e.metrics.clear();
    for (const auto& n : names) e.metrics.push_back(metric_from_name(n));
  }
  s.get("samples", e.samples);
  s.finish();
  return e;
}

}  // namespace

const char* protocol_name(Protocol p) { return p == Protocol::kWhiteBox ? "white_box" : "transfer"; }

Protocol protocol_from_name(const std::string& name) {
  if (name == "white_box") return Protocol::kWhiteBox;
  if (name == "transfer") return Protocol::kTransfer;
  fail(ErrorCode::kConfig, "unknown protocol '" + name + "' (expected white_box or transfer)");
}

NetworkSpec ExperimentConfig::network() const {
  NetworkSpec spec = reference_network(model.architecture);
  if (model.bayes_boundary) {
    spec.bayes_boundary = *model.bayes_boundary;
    try {
      spec.validate();
    } catch (const Error& e) {
      fail(ErrorCode::kConfig, std::string("model.bayes_boundary: ") + e.what());
    }
  }
  return spec;
}

json to_json(const RefineConfig& c) {
  return json{{"candidates", c.candidates},
              {"weight_decay", c.weight_decay},
              {"gamma", c.gamma},
              {"alpha", c.alpha},
              {"epochs", c.epochs},
              {"eps_lo", c.eps_lo},
              {"eps_hi", c.eps_hi},
              {"eps_per_instance", c.eps_per_instance},
              {"lr_candidates_start", c.lr_candidates_start},
              {"lr_candidates_end", c.lr_candidates_end},
              {"lr_shared", c.lr_shared},
              {"momentum", c.momentum},
              {"batch_size", c.batch_size},
              {"estimator", estimator_name(c.estimator)},
              {"blur_prob", c.blur_prob},
              {"prior", c.prior == PriorMode::kDecay ? "decay" : "explicit"}};
}

RefineConfig refine_config_from_json(const json& j) {
  RefineConfig c;
  Section s(j, "refine");
  s.get("candidates", c.candidates);
  s.get("weight_decay", c.weight_decay);
  s.get("gamma", c.gamma);
  s.get("alpha", c.alpha);
  s.get("epochs", c.epochs);
  s.get("eps_lo", c.eps_lo);
  s.get("eps_hi", c.eps_hi);
  s.get("eps_per_instance", c.eps_per_instance);
  s.get("lr_candidates_start", c.lr_candidates_start);
  s.get("lr_candidates_end", c.lr_candidates_end);
  s.get("lr_shared", c.lr_shared);
  s.get("momentum", c.momentum);
  s.get("batch_size", c.batch_size);
  std::string name;
  if (s.get("estimator", name)) c.estimator = estimator_from_name(name);
  s.get("blur_prob", c.blur_prob);
  if (s.get("prior", name)) {
    require(name == "decay" || name == "explicit", ErrorCode::kConfig,
            "refine.prior: expected 'decay' or 'explicit', got '" + name + "'");
    c.prior = name == "decay" ? PriorMode::kDecay : PriorMode::kExplicit;
  }
  s.finish();
  c.validate();
  return c;
}

json to_json(const MapTrainConfig& c) {
  return json{{"weight_decay", c.weight_decay}, {"epochs", c.epochs}, {"batch_size", c.batch_size},
              {"lr", c.lr},                     {"lr_end", c.lr_end}, {"momentum", c.momentum}};
}

MapTrainConfig map_config_from_json(const json& j) {
  MapTrainConfig c;
  Section s(j, "map");
  s.get("weight_decay", c.weight_decay);
  s.get("epochs", c.epochs);
  s.get("batch_size", c.batch_size);
  s.get("lr", c.lr);
  s.get("lr_end", c.lr_end);
  s.get("momentum", c.momentum);
  s.finish();
  require(c.weight_decay >= 0.0f, ErrorCode::kConfig, "map.weight_decay must be >= 0");
  require(c.batch_size >= 1, ErrorCode::kConfig, "map.batch_size must be >= 1");
  require(c.lr >= 0.0f && c.lr_end >= 0.0f, ErrorCode::kConfig, "map learning rates must be >= 0");
  require(c.momentum >= 0.0f && c.momentum < 1.0f, ErrorCode::kConfig, "map.momentum must lie in [0, 1)");
  return c;
}

ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig cfg;
  Section s(j, "config");
  s.need("schema");
  std::string schema;
  s.get("schema", schema);
  require(schema == kExperimentSchema, ErrorCode::kConfig,
          "config: unsupported schema '" + schema + "' (expected " + kExperimentSchema + ")");
  s.need("seed");
  s.get("seed", cfg.seed);
  if (const json* d = s.raw("dataset")) cfg.dataset = dataset_from_json(*d);
  s.need("model");
  cfg.model = model_from_json(*s.raw("model"));
  if (const json* m = s.raw("map")) cfg.map = map_config_from_json(*m);
  if (const json* r = s.raw("refine")) cfg.refine = refine_config_from_json(*r);
  if (const json* a = s.raw("attacks")) {
    require(a->is_array(), ErrorCode::kConfig, "attacks: expected an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < a->size(); ++i) {
      cfg.attacks.push_back(attack_entry_from_json((*a)[i], i));
      require(ids.insert(cfg.attacks.back().id).second, ErrorCode::kConfig,
              "attacks: duplicate id '" + cfg.attacks.back().id + "'");
    }
  }
  if (const json* e = s.raw("eval")) cfg.eval = eval_from_json(*e);
  s.finish();
  cfg.network();
  if (cfg.eval.samples != 0)
    require(cfg.eval.samples == cfg.refine.candidates, ErrorCode::kConfig,
            "eval.samples: FADE inference uses T == C (" + std::to_string(cfg.refine.candidates) + ")");
  return cfg;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    fail(ErrorCode::kConfig, "config " + path.string() + " is not valid JSON: " + e.what());
  }
  return experiment_from_json(j);
}

json to_json(const ExperimentConfig& cfg) {
  json model{{"architecture", cfg.model.architecture}};
  if (cfg.model.bayes_boundary) model["bayes_boundary"] = *cfg.model.bayes_boundary;
  json attacks = json::array();
  for (const auto& a : cfg.attacks)
    attacks.push_back({{"id", a.id}, {"protocol", protocol_name(a.protocol)}, {"config", to_json(a.config)}});
  json metrics = json::array();
  for (Metric m : cfg.eval.metrics) metrics.push_back(metric_name(m));
  return json{{"schema", kExperimentSchema},
              {"seed", cfg.seed},
              {"dataset", to_json(cfg.dataset)},
              {"model", model},
              {"map", to_json(cfg.map)},
              {"refine", to_json(cfg.refine)},
              {"attacks", attacks},
              {"eval", {{"metrics", metrics}, {"samples", cfg.eval.samples}}}};
}

std::string experiment_hash(const ExperimentConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

Splits load_splits(const ExperimentConfig& cfg, const std::filesystem::path& data_dir) {
  const DatasetSection& d = cfg.dataset;
  Splits s;
  if (d.source == "two_moons") {
    s.train = gen_two_moons(d.train_size, d.noise_std, splitmix64(cfg.seed ^ 0x7472ULL));
    s.test = gen_two_moons(d.test_size, d.noise_std, splitmix64(cfg.seed ^ 0x7465ULL));
  } else {
    require(!data_dir.empty(), ErrorCode::kConfig, "dataset: source 'idx' needs --data-dir");
    s.train = load_idx(data_dir / d.train_images, data_dir / d.train_labels);
    s.test = load_idx(data_dir / d.test_images, data_dir / d.test_labels);
  }
  const NetworkSpec spec = cfg.network();
  require(s.train.instance_shape() == spec.input_shape, ErrorCode::kConfig,
          "dataset does not match the input shape of " + spec.id);
  require(s.train.num_classes <= spec.num_classes() && s.test.num_classes <= spec.num_classes(), ErrorCode::kConfig,
          "dataset has more classes than " + spec.id + " predicts");
  s.eval = s.test.head(std::min(d.eval_size, s.test.size()));
  return s;
}

}  // namespace fadelab
