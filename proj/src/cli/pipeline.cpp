#include "fadelab/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "fadelab/error.hpp"
#include "fadelab/fade.hpp"
#include "fadelab/refine.hpp"

namespace fadelab {

namespace fs = std::filesystem;
using nlohmann::json;

Checkpoint stage_train_map(const ExperimentConfig& cfg, const Dataset& train, std::uint64_t seed,
                           std::string* log_csv) {
  const NetworkSpec spec = cfg.network();
  RngState rng(seed);
  const MapTrainResult res = train_map(spec, train, cfg.map, rng);
  if (log_csv) *log_csv = map_log_csv(res.log);
  return map_checkpoint(spec, res, cfg.map, seed);
}

Checkpoint stage_refine(const ExperimentConfig& cfg, const RefineConfig& refine_cfg, const Checkpoint& map_ckpt,
                        const Dataset& train, std::uint64_t seed, std::string* log_csv) {
  NetworkSpec spec = spec_from_checkpoint(map_ckpt);
  if (cfg.model.bayes_boundary) spec.bayes_boundary = *cfg.model.bayes_boundary;
  spec.validate();
  RngState rng = RngState(seed).fork(0x7265);
  const RefineResult res = refine(map_ckpt, spec, train, refine_cfg, rng);
  if (log_csv) *log_csv = refine_log_csv(res.log);
  return make_fade_checkpoint(res.posterior,
                              {{"seed", seed}, {"refine", to_json(refine_cfg)}, {"map_hash", map_ckpt.hash()}});
}

AdversarialSet stage_attack(const AttackEntry& entry, const Model& crafting, const Model& target,
                            const Dataset& clean, std::uint64_t seed) {
  return transfer_craft(crafting, target, clean, entry.config, seed);
}

const SuiteModel& SuiteResult::model(const std::string& name) const {
  for (const auto& m : models)
    if (m.name == name) return m;
  fail(ErrorCode::kInvalidArgument, "suite " + suite + " has no model '" + name + "'");
}

const SuiteCell& SuiteResult::cell(const std::string& model, const std::string& attack,
                                   const std::string& metric) const {
  for (const auto& c : cells)
    if (c.model == model && c.attack == attack && c.metric == metric) return c;
  fail(ErrorCode::kInvalidArgument, "suite " + suite + " has no cell " + model + "/" + attack + "/" + metric);
}

std::vector<std::string> suite_ids() { return {"twomoons", "mnist-small", "ablations"}; }

namespace {

AttackEntry entry(std::string id, Protocol protocol, AttackFamily family) {
  AttackEntry e;
  e.id = std::move(id);
  e.protocol = protocol;
  e.config.family = family;
  return e;
}

ExperimentConfig mnist_base() {
  ExperimentConfig cfg;
  cfg.seed = 1;
  cfg.dataset.source = "idx";
  cfg.dataset.eval_size = 1000;
  cfg.model.architecture = "mlp-mnist";
  cfg.eval.metrics = {Metric::kFeatureVariance, Metric::kSoftmaxVariance};
  return cfg;
}

}  // namespace

ExperimentConfig suite_config(const std::string& suite) {
  if (suite == "twomoons") {
    ExperimentConfig cfg;
    cfg.seed = 1;
    cfg.dataset.source = "two_moons";
    cfg.dataset.train_size = 1000;
    cfg.dataset.test_size = 500;
    cfg.dataset.noise_std = 0.05f;
    cfg.dataset.eval_size = 500;
    cfg.model.architecture = "mlp2";
    cfg.map.epochs = 60;
    cfg.map.weight_decay = 1e-4f;
    cfg.map.lr = 0.1f;
    cfg.map.lr_end = 0.01f;
    cfg.refine.epochs = 20;
    cfg.attacks = {entry("fgsm", Protocol::kTransfer, AttackFamily::kFgsm),
                   entry("pgd", Protocol::kTransfer, AttackFamily::kPgd),
                   entry("pgd_white_box", Protocol::kWhiteBox, AttackFamily::kPgd)};
    cfg.eval.metrics = {Metric::kFeatureVariance, Metric::kSoftmaxVariance};
    return cfg;
  }
  if (suite == "mnist-small") {
    ExperimentConfig cfg = mnist_base();
    AttackEntry ideal = entry("pgd_ideal", Protocol::kWhiteBox, AttackFamily::kPgd);
    ideal.config.uncertainty_weight = 10.0f;
    cfg.attacks = {entry("fgsm", Protocol::kTransfer, AttackFamily::kFgsm),
                   entry("pgd", Protocol::kTransfer, AttackFamily::kPgd),
                   entry("cw", Protocol::kTransfer, AttackFamily::kCw),
                   entry("spsa", Protocol::kTransfer, AttackFamily::kSpsa),
                   entry("pgd_white_box", Protocol::kWhiteBox, AttackFamily::kPgd),
                   ideal};
    return cfg;
  }
  if (suite == "ablations") {
    ExperimentConfig cfg = mnist_base();
    cfg.attacks = {entry("pgd", Protocol::kTransfer, AttackFamily::kPgd)};
    return cfg;
  }
  fail(ErrorCode::kConfig, "unknown suite '" + suite + "' (expected twomoons, mnist-small or ablations)");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::kIo, "cannot write " + path.string());
  os << text;
  require(static_cast<bool>(os), ErrorCode::kIo, "short write to " + path.string());
}

namespace {

class StageClock {
 public:
  StageClock(std::ostream* out, std::string suite) : out_(out), suite_(std::move(suite)) {}

  template <class F>
  auto run(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      auto result = f();
      if (out_) {
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        *out_ << "[" << suite_ << "] " << stage << " done in " << std::fixed << std::setprecision(1) << s << " s\n"
              << std::defaultfloat << std::flush;
      }
      return result;
    } catch (const Error& e) {
      throw Error(e.code(), "stage " + stage + ": " + e.what());
    }
  }

 private:
  std::ostream* out_;
  std::string suite_;
};

struct Variant {
  std::string name;
  RefineConfig refine;
};

}  // namespace

SuiteResult run_suite(const std::string& suite, const ExperimentConfig& cfg, const fs::path& data_dir,
                      const fs::path& out_dir, std::ostream* progress) {
  suite_config(suite);
  StageClock clock(progress, suite);
  SuiteResult result;
  result.suite = suite;
  result.seed = cfg.seed;
  result.config_hash = experiment_hash(cfg);

  const Splits splits = clock.run("data", [&] { return load_splits(cfg, data_dir); });
  fs::create_directories(out_dir);
  write_text(out_dir / "config.json", to_json(cfg).dump(2) + "\n");

  auto train_net = [&](const std::string& name, std::uint64_t seed) {
    return clock.run("train-map " + name, [&] {
      std::string log;
      Checkpoint ckpt = stage_train_map(cfg, splits.train, seed, &log);
      save_checkpoint(ckpt, out_dir / name);
      write_text(out_dir / (name + "_log.csv"), log);
      return ckpt;
    });
  };

  const Checkpoint map_ckpt = train_net("map", cfg.seed);
  const Model map = Model::from_checkpoint(map_ckpt);
  result.models.push_back({"map", map.hash(), cfg.seed, evaluate_accuracy(map, splits.test, 0)});

  bool any_transfer = false;
  for (const auto& a : cfg.attacks) any_transfer |= a.protocol == Protocol::kTransfer;
  std::optional<Model> surrogate;
  if (any_transfer) {
    surrogate = Model::from_checkpoint(train_net("surrogate", cfg.seed + 1));
    result.models.push_back({"surrogate", surrogate->hash(), cfg.seed + 1,
                             evaluate_accuracy(*surrogate, splits.test, 0)});
  }

  std::vector<Variant> variants{{"fade", cfg.refine}};
  if (suite == "ablations") {
    Variant batchwise{"fade_batchwise", cfg.refine};
    batchwise.refine.estimator = Estimator::kBatchwise;
    variants.push_back(batchwise);
  }
  std::vector<Model> fades;
  for (const auto& v : variants) {
    fades.push_back(clock.run("refine " + v.name, [&] {
      std::string log;
      const Checkpoint ckpt = stage_refine(cfg, v.refine, map_ckpt, splits.train, cfg.seed, &log);
      save_checkpoint(ckpt, out_dir / v.name);
      write_text(out_dir / (v.name + "_log.csv"), log);
      return Model::from_checkpoint(ckpt);
    }));
    result.models.push_back({v.name, fades.back().hash(), cfg.seed,
                             evaluate_accuracy(fades.back(), splits.test, v.refine.candidates)});
  }

  const std::size_t samples = cfg.eval_samples();
  for (const auto& a : cfg.attacks) {
    const Model& crafting = a.protocol == Protocol::kTransfer ? *surrogate : fades.front();
    const AdversarialSet set = clock.run("attack " + a.id, [&] {
      AdversarialSet s = stage_attack(a, crafting, fades.front(), splits.eval, cfg.seed);
      save_adversarial_set(s, out_dir / "attacks" / a.id);
      return s;
    });
    const std::string attack_hash = attack_config_hash(a.config);
    // White-box sets are only meaningful against the model they were crafted on.
    const std::size_t targets = a.protocol == Protocol::kTransfer ? fades.size() : 1;
    for (std::size_t t = 0; t < targets; ++t) {
      for (Metric m : cfg.eval.metrics) {
        const std::string stem = variants[t].name + "_" + a.id + "_" + metric_name(m);
        const DetectionReport rep = clock.run("evaluate " + stem, [&] {
          DetectionReport r = evaluate_detection(fades[t], splits.eval, set.data, m, samples, cfg.seed, attack_hash);
          r.metadata["crafting_model_hash"] = set.crafting_hash;
          r.metadata["protocol"] = protocol_name(a.protocol);
          save_report(r, out_dir / "reports" / stem);
          return r;
        });
        result.cells.push_back({variants[t].name, a.id, protocol_name(a.protocol), metric_name(m), rep.auroc,
                                rep.clean_accuracy, rep.adv_accuracy, cfg.seed, attack_hash, fades[t].hash(),
                                set.crafting_hash});
      }
    }
  }

  if (suite == "ablations") {
    json gv = json::object();
    for (Estimator e : {Estimator::kInstancewise, Estimator::kBatchwise}) {
      RngState rng = RngState(cfg.seed).fork(0x6776);
      gv[estimator_name(e)] = clock.run(std::string("gradient variance ") + estimator_name(e), [&] {
        return shared_gradient_variance(fades.front().posterior(), splits.train, e, 20, cfg.refine.batch_size, rng);
      });
    }
    result.extras["shared_gradient_variance"] = gv;
  }

  write_text(out_dir / "summary.json", summary_json(result).dump(2) + "\n");
  write_text(out_dir / "summary.csv", summary_csv(result));
  return result;
}

json summary_json(const SuiteResult& r) {
  json models = json::array();
  for (const auto& m : r.models)
    models.push_back({{"name", m.name}, {"hash", m.hash}, {"seed", m.seed}, {"test_accuracy", m.test_accuracy}});
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"model", c.model},
                     {"attack", c.attack},
                     {"protocol", c.protocol},
                     {"metric", c.metric},
                     {"auroc", c.auroc},
                     {"clean_accuracy", c.clean_accuracy},
                     {"adv_accuracy", c.adv_accuracy},
                     {"seed", c.seed},
                     {"attack_hash", c.attack_hash},
                     {"model_hash", c.model_hash},
                     {"crafting_model_hash", c.crafting_hash}});
  return json{{"format", "fadelab-summary/1"},
              {"suite", r.suite},
              {"seed", r.seed},
              {"config_hash", r.config_hash},
              {"models", models},
              {"cells", cells},
              {"extras", r.extras}};
}

std::string summary_csv(const SuiteResult& r) {
  std::ostringstream os;
  os.precision(10);
  os << "suite,model,attack,protocol,metric,auroc,clean_accuracy,adv_accuracy,seed,config_hash,attack_hash,"
        "model_hash,crafting_model_hash\n";
  for (const auto& c : r.cells)
    os << r.suite << ',' << c.model << ',' << c.attack << ',' << c.protocol << ',' << c.metric << ',' << c.auroc
       << ',' << c.clean_accuracy << ',' << c.adv_accuracy << ',' << c.seed << ',' << r.config_hash << ','
       << c.attack_hash << ',' << c.model_hash << ',' << c.crafting_hash << '\n';
  return os.str();
}

std::string summary_table(const SuiteResult& r) {
  std::ostringstream os;
  os << "suite " << r.suite << "  seed " << r.seed << "  config " << r.config_hash.substr(0, 12) << "\n\n";
  for (const auto& m : r.models) {
    char line[160];
    std::snprintf(line, sizeof line, "  %-16s test acc %6.2f%%  seed %llu  hash %s\n", m.name.c_str(),
                  100.0 * m.test_accuracy, static_cast<unsigned long long>(m.seed), m.hash.substr(0, 12).c_str());
    os << line;
  }
  std::vector<std::string> metrics;
  for (const auto& c : r.cells)
    if (std::find(metrics.begin(), metrics.end(), c.metric) == metrics.end()) metrics.push_back(c.metric);
  std::map<std::string, std::vector<const SuiteCell*>> by_row;
  std::vector<std::string> order;
  for (const auto& c : r.cells) {
    const std::string key = c.model + " / " + c.attack;
    if (!by_row.count(key)) order.push_back(key);
    by_row[key].push_back(&c);
  }
  char line[256];
  std::snprintf(line, sizeof line, "\n  %-32s %-10s", "model / attack", "protocol");
  os << line;
  for (const auto& m : metrics) {
    std::snprintf(line, sizeof line, " %12s", m.c_str());
    os << line;
  }
  os << "   adv acc  attack hash\n";
  for (const auto& key : order) {
    const auto& row = by_row[key];
    std::snprintf(line, sizeof line, "  %-32s %-10s", key.c_str(), row.front()->protocol.c_str());
    os << line;
    for (const auto& m : metrics) {
      const SuiteCell* hit = nullptr;
      for (const auto* c : row)
        if (c->metric == m) hit = c;
      if (hit) std::snprintf(line, sizeof line, " %12.4f", hit->auroc);
      else std::snprintf(line, sizeof line, " %12s", "-");
      os << line;
    }
    std::snprintf(line, sizeof line, "   %6.2f%%  %s\n", 100.0 * row.front()->adv_accuracy,
                  row.front()->attack_hash.substr(0, 12).c_str());
    os << line;
  }
  for (const auto& [k, v] : r.extras.items()) os << "\n  " << k << ": " << v.dump() << "\n";
  return os.str();
}

}  // namespace fadelab
