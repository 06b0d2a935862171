#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "fadelab/attacks.hpp"
#include "fadelab/error.hpp"
#include "fadelab/evalkit.hpp"
#include "fadelab/experiment.hpp"
#include "fadelab/pipeline.hpp"

using namespace fadelab;
namespace fs = std::filesystem;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string data_dir;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("--config", c.config, "experiment config (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  else opt->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  cmd->add_option("--out", c.out, "output path")->required();
  cmd->add_option("--data-dir", c.data_dir, "directory holding the IDX files");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_experiment(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

void ensure_parent(const fs::path& stem) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
}

const AttackEntry& pick_attack(const ExperimentConfig& cfg, const std::string& id) {
  require(!cfg.attacks.empty(), ErrorCode::kConfig, "config lists no attacks");
  if (id.empty()) {
    require(cfg.attacks.size() == 1, ErrorCode::kConfig, "config lists several attacks; choose one with --attack");
    return cfg.attacks.front();
  }
  for (const auto& a : cfg.attacks)
    if (a.id == id) return a;
  fail(ErrorCode::kConfig, "config has no attack with id '" + id + "'");
}

int train_map_cmd(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const Splits splits = load_splits(cfg, c.data_dir);
  std::string log;
  const Checkpoint ckpt = stage_train_map(cfg, splits.train, cfg.seed, &log);
  const fs::path out = c.out;
  ensure_parent(out);
  save_checkpoint(ckpt, out);
  write_text(out.string() + "_log.csv", log);
  const Model m = Model::from_checkpoint(ckpt);
  std::cout << "map checkpoint " << ckpt.hash() << "\n  test accuracy " << evaluate_accuracy(m, splits.test, 0)
            << "\n  seed " << cfg.seed << "  config " << experiment_hash(cfg) << "\n";
  return 0;
}

int refine_cmd(const Common& c, const std::string& map_path) {
  const ExperimentConfig cfg = resolve(c);
  const Checkpoint map_ckpt = load_checkpoint(map_path);
  require(map_ckpt.kind == "map", ErrorCode::kConfig, "--map must be a MAP checkpoint, got kind '" + map_ckpt.kind + "'");
  const Splits splits = load_splits(cfg, c.data_dir);
  std::string log;
  const Checkpoint ckpt = stage_refine(cfg, cfg.refine, map_ckpt, splits.train, cfg.seed, &log);
  const fs::path out = c.out;
  ensure_parent(out);
  save_checkpoint(ckpt, out);
  write_text(out.string() + "_log.csv", log);
  const Model m = Model::from_checkpoint(ckpt);
  std::cout << "fade checkpoint " << ckpt.hash() << "\n  test accuracy "
            << evaluate_accuracy(m, splits.test, cfg.refine.candidates) << "\n  seed " << cfg.seed << "  config "
            << experiment_hash(cfg) << "\n";
  return 0;
}

int attack_cmd(const Common& c, const std::string& model_path, const std::string& surrogate_path,
               const std::string& dataset_path, const std::string& attack_id) {
  const ExperimentConfig cfg = resolve(c);
  const AttackEntry& entry = pick_attack(cfg, attack_id);
  const Model target = Model::from_checkpoint(load_checkpoint(model_path));
  std::optional<Model> surrogate;
  if (!surrogate_path.empty()) surrogate = Model::from_checkpoint(load_checkpoint(surrogate_path));
  const Dataset clean = dataset_path.empty() ? load_splits(cfg, c.data_dir).eval : load_set(dataset_path);
  const AdversarialSet set = stage_attack(entry, surrogate ? *surrogate : target, target, clean, cfg.seed);
  const fs::path out = c.out;
  ensure_parent(out);
  save_adversarial_set(set, out);
  std::cout << "adversarial set " << out.string() << " (" << set.data.size() << " instances)\n  attack "
            << entry.config.label() << "  hash " << attack_config_hash(entry.config) << "\n  crafted on "
            << set.crafting_hash << "\n  target     " << set.target_hash << "\n  seed " << cfg.seed << "\n";
  return 0;
}

int evaluate_cmd(const Common& c, const std::string& model_path, const std::string& clean_path,
                 const std::string& adv_path) {
  const ExperimentConfig cfg = resolve(c);
  const Model model = Model::from_checkpoint(load_checkpoint(model_path));
  const Dataset clean = clean_path.empty() ? load_splits(cfg, c.data_dir).eval : load_set(clean_path);
  const Dataset adv = load_set(adv_path);
  std::string attack_hash;
  if (fs::exists(attack_sidecar_path(adv_path)))
    attack_hash = load_attack_sidecar(adv_path).value("attack_hash", std::string());
  const std::size_t samples = model.is_fade() ? model.posterior().num_candidates() : cfg.eval_samples();
  const fs::path out = c.out;
  ensure_parent(out);
  for (Metric m : cfg.eval.metrics) {
    const DetectionReport r = evaluate_detection(model, clean, adv, m, samples, cfg.seed, attack_hash);
    const fs::path stem = cfg.eval.metrics.size() == 1 ? out : fs::path(out.string() + "_" + metric_name(m));
    save_report(r, stem);
    std::cout << metric_name(m) << " auroc " << r.auroc << "  clean acc " << r.clean_accuracy << "  adv acc "
              << r.adv_accuracy << "  -> " << stem.string() << ".json\n";
  }
  std::cout << "  seed " << cfg.seed << "  model " << model.hash() << "  attack " << attack_hash << "\n";
  return 0;
}

int reproduce_cmd(const Common& c, const std::string& suite) {
  ExperimentConfig cfg = c.config.empty() ? suite_config(suite) : load_experiment(c.config);
  if (c.seed) cfg.seed = *c.seed;
  const SuiteResult r = run_suite(suite, cfg, c.data_dir, c.out, &std::cerr);
  std::cout << summary_table(r);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fadelab: Bayesian refinement and adversarial detection experiments"};
  app.require_subcommand(1);

  Common train_c, refine_c, attack_c, eval_c, repro_c;
  std::string map_path, model_path, surrogate_path, dataset_path, attack_id, eval_model, clean_path, adv_path, suite;

  auto* train = app.add_subcommand("train-map", "train the deterministic MAP network");
  add_common(train, train_c, true);

  auto* refine = app.add_subcommand("refine", "refine a MAP checkpoint into a FADE posterior");
  add_common(refine, refine_c, true);
  refine->add_option("--map", map_path, "MAP checkpoint")->required();

  auto* attack = app.add_subcommand("attack", "craft an adversarial set");
  add_common(attack, attack_c, true);
  attack->add_option("--model", model_path, "target checkpoint")->required();
  attack->add_option("--surrogate", surrogate_path, "craft against this checkpoint instead (model transfer)");
  attack->add_option("--dataset", dataset_path, "clean set to attack (default: the config's eval split)");
  attack->add_option("--attack", attack_id, "attack id from the config");

  auto* evaluate = app.add_subcommand("evaluate", "score clean and adversarial sets and write reports");
  add_common(evaluate, eval_c, true);
  evaluate->add_option("--model", eval_model, "checkpoint to evaluate")->required();
  evaluate->add_option("--clean", clean_path, "clean set (default: the config's eval split)");
  evaluate->add_option("--adv", adv_path, "adversarial set")->required();

  auto* reproduce = app.add_subcommand("reproduce", "run a whole desk-scale suite");
  add_common(reproduce, repro_c, false);
  reproduce->add_option("--suite", suite, "twomoons, mnist-small or ablations")
      ->required()
      ->check(CLI::IsMember(suite_ids()));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*train) return train_map_cmd(train_c);
    if (*refine) return refine_cmd(refine_c, map_path);
    if (*attack) return attack_cmd(attack_c, model_path, surrogate_path, dataset_path, attack_id);
    if (*evaluate) return evaluate_cmd(eval_c, eval_model, clean_path, adv_path);
    if (*reproduce) return reproduce_cmd(repro_c, suite);
  } catch (const Error& e) {
    std::cerr << "fadelab: " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return e.code() == ErrorCode::kConfig ? kUsage : kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "fadelab: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
