#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "fadelab/checkpoint.hpp"
#include "fadelab/data.hpp"
#include "fadelab/error.hpp"
#include "fadelab/evalkit.hpp"
#include "fadelab/experiment.hpp"
#include "fadelab/model.hpp"
#include "fadelab/pipeline.hpp"
#include "test_util.hpp"

using namespace fadelab;
using fadelab::testing::scratch_dir;
using fadelab::testing::to_vec;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliRun {
  int code = -1;
  std::string err;
};

CliRun cli(const std::string& args, const fs::path& dir) {
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string(FADELAB_CLI) + " " + args + " >" + (dir / "stdout.txt").string() + " 2>" +
                          err.string();
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream is(err);
  std::stringstream ss;
  ss << is.rdbuf();
  r.err = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// The twomoons suite, cut down so that each command takes well under a second.
json moons_config() {
  ExperimentConfig cfg = suite_config("twomoons");
  cfg.dataset.train_size = 200;
  cfg.dataset.test_size = 100;
  cfg.dataset.eval_size = 50;
  cfg.map.epochs = 20;
  cfg.refine.epochs = 2;
  cfg.refine.candidates = 4;
  cfg.attacks.resize(2);
  cfg.attacks[1].config.steps = 5;
  return to_json(cfg);
}

fs::path write_config(const fs::path& dir, const std::string& name, const json& j) {
  const fs::path p = dir / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

std::size_t line_count(const std::string& text) { return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')); }

std::vector<std::string> tree(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Config, MissingSeedNamesTheField) {
  json j = moons_config();
  j.erase("seed");
  try {
    experiment_from_json(j);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
    EXPECT_NE(std::string(e.what()).find("seed"), std::string::npos);
  }
}

TEST(Config, UnknownKeysAndBadValuesAreErrors) {
  const json base = moons_config();
  for (const auto& patch : {json{{"sed", 1}}, json{{"map", {{"epoch", 3}}}}, json{{"model", {{"architecture", "vgg"}}}},
                            json{{"schema", "fadelab-experiment/0"}}, json{{"eval", {{"metrics", {"entropy"}}}}}}) {
    json j = base;
    j.merge_patch(patch);
    try {
      experiment_from_json(j);
      ADD_FAILURE() << patch.dump();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig) << patch.dump();
    }
  }
}

TEST(Config, JsonRoundTrip) {
  const ExperimentConfig cfg = experiment_from_json(moons_config());
  EXPECT_EQ(to_json(experiment_from_json(to_json(cfg))), to_json(cfg));
  EXPECT_EQ(experiment_hash(experiment_from_json(to_json(cfg))), experiment_hash(cfg));
  for (const auto& id : suite_ids()) EXPECT_EQ(to_json(experiment_from_json(to_json(suite_config(id)))), to_json(suite_config(id)));
  EXPECT_THROW(suite_config("imagenet"), Error);
}

TEST(Cli, ExitCodes) {
  const auto dir = scratch_dir("cli_exit");
  const auto cfg = write_config(dir, "ok.json", moons_config());
  json no_seed = moons_config();
  no_seed.erase("seed");
  const auto bad = write_config(dir, "no_seed.json", no_seed);
  json typo = moons_config();
  typo["refine"]["alpah"] = 1;
  const auto typo_cfg = write_config(dir, "typo.json", typo);

  EXPECT_EQ(cli("", dir).code, 1);
  EXPECT_EQ(cli("launch", dir).code, 1);
  EXPECT_EQ(cli("train-map --config " + cfg.string(), dir).code, 1);  // no --out
  EXPECT_EQ(cli("reproduce --suite imagenet --out " + (dir / "x").string(), dir).code, 1);

  CliRun r = cli("train-map --config " + bad.string() + " --out " + (dir / "no_seed" / "map").string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("seed"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "no_seed"));

  r = cli("refine --config " + typo_cfg.string() + " --map x --out " + (dir / "typo" / "fade").string(), dir);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("alpah"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir / "typo"));

  // a missing checkpoint is a runtime failure, not a usage error
  r = cli("refine --config " + cfg.string() + " --map " + (dir / "nothing").string() + " --out " +
              (dir / "rt" / "fade").string(),
          dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(dir / "rt"));
  EXPECT_EQ(cli("--help", dir).code, 0);
}

TEST(Cli, StagesEndToEnd) {
  const auto dir = scratch_dir("cli_stages");
  json j = moons_config();
  const auto cfg = write_config(dir, "cfg.json", j);
  const std::string c = " --config " + cfg.string();

  ASSERT_EQ(cli("train-map" + c + " --out " + (dir / "a" / "map").string(), dir).code, 0);
  ASSERT_EQ(cli("train-map" + c + " --out " + (dir / "b" / "map").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "map.bin"), slurp(dir / "b" / "map.bin"));
  EXPECT_EQ(slurp(dir / "a" / "map.json"), slurp(dir / "b" / "map.json"));
  EXPECT_EQ(slurp(dir / "a" / "map_log.csv"), slurp(dir / "b" / "map_log.csv"));
  ASSERT_EQ(cli("train-map" + c + " --seed 9 --out " + (dir / "s9" / "map").string(), dir).code, 0);
  EXPECT_NE(slurp(dir / "a" / "map.bin"), slurp(dir / "s9" / "map.bin"));
  const Checkpoint map = load_checkpoint(dir / "a" / "map");
  EXPECT_EQ(map.kind, "map");

  // refinement: log format, determinism
  const std::string m = " --map " + (dir / "a" / "map").string();
  ASSERT_EQ(cli("refine" + c + m + " --out " + (dir / "a" / "fade").string(), dir).code, 0);
  ASSERT_EQ(cli("refine" + c + m + " --out " + (dir / "b" / "fade").string(), dir).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "fade.bin"), slurp(dir / "b" / "fade.bin"));
  const std::string log = slurp(dir / "a" / "fade_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "epoch,iter,likelihood,margin,lr_candidates,batch_accuracy");
  // 200 instances in batches of the default size, 2 epochs
  const std::size_t per_epoch = (200 + RefineConfig{}.batch_size - 1) / RefineConfig{}.batch_size;
  EXPECT_EQ(line_count(log), 1 + 2 * per_epoch);

  // zero epochs keeps every candidate at the MAP weights
  json zero = j;
  zero["refine"]["epochs"] = 0;
  const auto zcfg = write_config(dir, "zero.json", zero);
  ASSERT_EQ(cli("refine --config " + zcfg.string() + m + " --out " + (dir / "z" / "fade").string(), dir).code, 0);
  const Model zfade = Model::from_checkpoint(load_checkpoint(dir / "z" / "fade"));
  const Model net = Model::from_checkpoint(map);
  const auto& post = zfade.posterior();
  std::size_t compared = 0;
  for (std::size_t k = 0; k < post.num_candidates(); ++k)
    for (std::size_t l = 0; l < post.candidates[k].size(); ++l) {
      if (!post.candidates[k][l].weight.defined()) continue;
      EXPECT_EQ(to_vec(post.candidates[k][l].weight), to_vec(net.network().params[l].weight));
      EXPECT_EQ(to_vec(post.candidates[k][l].bias), to_vec(net.network().params[l].bias));
      ++compared;
    }
  EXPECT_GT(compared, 0u);

  // attacks: white box against the target, transfer from a surrogate
  ASSERT_EQ(cli("train-map" + c + " --seed 2 --out " + (dir / "sur").string(), dir).code, 0);
  const std::string fade = " --model " + (dir / "a" / "fade").string();
  ASSERT_EQ(cli("attack" + c + fade + " --attack pgd --out " + (dir / "adv" / "wb").string(), dir).code, 0);
  json wb_side = load_attack_sidecar(dir / "adv" / "wb");
  EXPECT_EQ(wb_side.at("crafting_model_hash"), load_checkpoint(dir / "a" / "fade").hash());
  EXPECT_EQ(wb_side.at("transfer"), false);
  ASSERT_EQ(cli("attack" + c + fade + " --attack pgd --surrogate " + (dir / "sur").string() + " --out " +
                    (dir / "adv" / "tr").string(),
                dir)
                .code,
            0);
  json tr_side = load_attack_sidecar(dir / "adv" / "tr");
  EXPECT_EQ(tr_side.at("crafting_model_hash"), load_checkpoint(dir / "sur").hash());
  EXPECT_EQ(tr_side.at("target_model_hash"), load_checkpoint(dir / "a" / "fade").hash());
  EXPECT_EQ(tr_side.at("transfer"), true);
  EXPECT_EQ(cli("attack" + c + fade + " --out " + (dir / "adv" / "which").string(), dir).code, 1);
  EXPECT_EQ(cli("attack" + c + fade + " --attack cw --out " + (dir / "adv" / "none").string(), dir).code, 1);

  // eps = 0 leaves the set untouched
  json still = j;
  still["attacks"][0]["config"]["eps"] = 0.0;
  const auto scfg = write_config(dir, "still.json", still);
  ASSERT_EQ(cli("attack --config " + scfg.string() + fade + " --attack fgsm --out " + (dir / "adv" / "still").string(), dir)
                .code,
            0);
  const Splits splits = load_splits(experiment_from_json(j), FADELAB_DATA_DIR);
  EXPECT_EQ(to_vec(load_set(dir / "adv" / "still").inputs), to_vec(splits.eval.inputs));

  // evaluation
  save_set(splits.eval, dir / "clean");
  ASSERT_EQ(cli("evaluate" + c + fade + " --clean " + (dir / "clean").string() + " --adv " + (dir / "clean").string() +
                    " --out " + (dir / "rep" / "same").string(),
                dir)
                .code,
            0);
  for (const char* metric : {"feature_var", "softmax_var"}) {
    const auto stem = dir / "rep" / (std::string("same_") + metric);
    const DetectionReport r = load_report(stem.string() + ".json");
    EXPECT_EQ(r.auroc, 0.5);
    EXPECT_EQ(r.metric, metric);
    EXPECT_EQ(line_count(slurp(stem.string() + ".csv")), 1 + 2 * splits.eval.size());
  }
  ASSERT_EQ(cli("evaluate" + c + fade + " --adv " + (dir / "adv" / "tr").string() + " --out " +
                    (dir / "rep" / "tr").string(),
                dir)
                .code,
            0);
  const json rep = json::parse(slurp(dir / "rep" / "tr_feature_var.json"));
  for (const char* key : {"format", "metric", "auroc", "clean_accuracy", "adv_accuracy", "clean_scores", "adv_scores",
                          "histogram", "metadata"})
    EXPECT_TRUE(rep.contains(key)) << key;
  EXPECT_EQ(rep.at("metadata").at("attack_hash"), tr_side.at("attack_hash"));
  EXPECT_EQ(rep.at("histogram").at("clean").size(), 64u);
}

TEST(Cli, ReproduceTwoMoonsIsDeterministic) {
  const auto dir = scratch_dir("cli_reproduce");
  const auto t0 = std::chrono::steady_clock::now();
  ASSERT_EQ(cli("reproduce --suite twomoons --out " + (dir / "a").string(), dir).code, 0);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_LT(secs, 300.0);
  ASSERT_EQ(cli("reproduce --suite twomoons --out " + (dir / "b").string(), dir).code, 0);
  const auto files = tree(dir / "a");
  ASSERT_EQ(files, tree(dir / "b"));
  EXPECT_GT(files.size(), 20u);
  for (const auto& f : files) EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;

  const json summary = json::parse(slurp(dir / "a" / "summary.json"));
  ASSERT_FALSE(summary.at("cells").empty());
  for (const auto& cell : summary.at("cells")) {
    EXPECT_TRUE(cell.contains("seed"));
    EXPECT_EQ(cell.at("attack_hash").get<std::string>().size(), 64u);
    EXPECT_EQ(cell.at("model_hash").get<std::string>().size(), 64u);
  }
  EXPECT_EQ(summary.at("config_hash").get<std::string>().size(), 64u);

  ASSERT_EQ(cli("reproduce --suite twomoons --seed 5 --out " + (dir / "c").string(), dir).code, 0);
  EXPECT_NE(slurp(dir / "a" / "fade.bin"), slurp(dir / "c" / "fade.bin"));
}
