#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <recunlearn/experiment.hpp>

#include "support/synth.hpp"

using namespace recunlearn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const fs::path p = fs::temp_directory_path() / "recunlearn_experiment_tests";
  fs::create_directories(p);
  return p;
}

synth::World small_world(int test_only_users, uint64_t seed) {
  synth::WorldSpec spec;
  spec.regular_users = 60;
  spec.test_only_users = test_only_users;
  spec.items = 40;
  spec.clusters = 4;
  spec.latent_dim = 3;
  spec.ratings_per_user = 10;
  spec.train_fraction = 0.5;
  spec.seed = seed;
  return synth::make_world(spec);
}

ExperimentConfig small_grid_config() {
  ExperimentConfig cfg;
  cfg.seed = 42;
  cfg.model.embed_dim = 4;
  cfg.model.learning_rate = 0.01;
  cfg.model.reg_lambda = 0.01;
  cfg.model.epochs = 2;
  cfg.model.init_std = 0.1;
  cfg.model.batch_size = 64;
  cfg.solver.damping = 0.1;
  cfg.mio.epochs = 5;
  cfg.strategies = {"retrain", "sif"};
  cfg.alphas = {10.0};
  cfg.ks = {3, 5};
  cfg.repetitions = 1;
  return cfg;
}

}  // namespace

TEST_CASE("config parsing applies defaults, overrides and validation") {
  SECTION("an empty document keeps every default") {
    const ExperimentConfig cfg = config_from_json(ordered_json::parse("{}"));
    REQUIRE(cfg.seed == 42);
    REQUIRE(cfg.out_dir == "out");
    REQUIRE(cfg.data.separator == "::");
    REQUIRE(cfg.data.min_interactions == 5);
    REQUIRE(cfg.data.train_fraction == 0.5);
    REQUIRE(cfg.data.split_mode == SplitMode::global_random);
    REQUIRE(cfg.model.embed_dim == 64);
    REQUIRE(cfg.model.learning_rate == 0.001);
    REQUIRE(cfg.model.reg_lambda == 0.01);
    REQUIRE(cfg.model.epochs == 50);
    REQUIRE(cfg.model.init_std == 0.01);
    REQUIRE(cfg.model.batch_size == 256);
    REQUIRE(cfg.solver.damping == 0.01);
    REQUIRE(cfg.solver.cg_tol == 1e-6);
    REQUIRE(cfg.solver.cg_max_iter == 100);
    REQUIRE(cfg.solver.use_compensation);
    REQUIRE(cfg.mio.epochs == 100);
    REQUIRE(cfg.mio.learning_rate == 0.001);
    REQUIRE(cfg.mio.eval_fraction == 0.2);
    REQUIRE(cfg.strategies ==
            std::vector<std::string>{"retrain", "if_full", "sif", "cif_full", "scif"});
    REQUIRE(cfg.alphas == std::vector<double>{5.0});
    REQUIRE(cfg.ks == std::vector<int>{5, 10, 15, 20});
    REQUIRE(cfg.repetitions == 1);
    REQUIRE(cfg.cka_models == 10);
  }
  SECTION("explicit values override the defaults") {
    const ExperimentConfig cfg = config_from_json(ordered_json::parse(R"({
      "seed": 7,
      "out_dir": "elsewhere",
      "data": {"path": "x.dat", "separator": "\t", "min_interactions": 3,
               "train_fraction": 0.8, "split_mode": "per_user_random"},
      "model": {"embed_dim": 16, "epochs": 9},
      "solver": {"damping": 0.5, "use_compensation": false},
      "mio": {"epochs": 20},
      "strategies": ["scif"],
      "alphas": [2.5, 10],
      "ks": [5],
      "repetitions": 3,
      "cka_models": 4
    })"));
    REQUIRE(cfg.seed == 7);
    REQUIRE(cfg.out_dir == "elsewhere");
    REQUIRE(cfg.data.path == "x.dat");
    REQUIRE(cfg.data.separator == "\t");
    REQUIRE(cfg.data.min_interactions == 3);
    REQUIRE(cfg.data.train_fraction == 0.8);
    REQUIRE(cfg.data.split_mode == SplitMode::per_user_random);
    REQUIRE(cfg.model.embed_dim == 16);
    REQUIRE(cfg.model.epochs == 9);
    REQUIRE(cfg.model.learning_rate == 0.001);
    REQUIRE(cfg.solver.damping == 0.5);
    REQUIRE_FALSE(cfg.solver.use_compensation);
    REQUIRE(cfg.mio.epochs == 20);
    REQUIRE(cfg.strategies == std::vector<std::string>{"scif"});
    REQUIRE(cfg.alphas == std::vector<double>{2.5, 10.0});
    REQUIRE(cfg.repetitions == 3);
    REQUIRE(cfg.cka_models == 4);
  }
  SECTION("unknown keys are named in the error") {
    REQUIRE_THROWS_WITH(config_from_json(ordered_json::parse(R"({"sede": 1})")),
                        Catch::Matchers::ContainsSubstring("sede"));
    REQUIRE_THROWS_WITH(config_from_json(ordered_json::parse(R"({"model": {"width": 2}})")),
                        Catch::Matchers::ContainsSubstring("width"));
  }
  SECTION("bad enumerations and counts are rejected") {
    REQUIRE_THROWS_AS(config_from_json(ordered_json::parse(R"({"strategies": ["sgd"]})")),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(
        config_from_json(ordered_json::parse(R"({"data": {"split_mode": "sideways"}})")),
        std::invalid_argument);
    REQUIRE_THROWS_AS(config_from_json(ordered_json::parse(R"({"repetitions": 0})")),
                      std::invalid_argument);
  }
  SECTION("environment variables override seed and output directory") {
    ExperimentConfig cfg;
    setenv("RECUNLEARN_SEED", "123", 1);
    setenv("RECUNLEARN_OUT", "/tmp/elsewhere", 1);
    apply_env_overrides(cfg);
    unsetenv("RECUNLEARN_SEED");
    unsetenv("RECUNLEARN_OUT");
    REQUIRE(cfg.seed == 123);
    REQUIRE(cfg.out_dir == "/tmp/elsewhere");

    ExperimentConfig untouched;
    apply_env_overrides(untouched);
    REQUIRE(untouched.seed == 42);
    REQUIRE(untouched.out_dir == "out");
  }
  SECTION("load_config reads a file and rejects a missing one") {
    const fs::path p = scratch_dir() / "cfg.json";
    std::ofstream(p) << R"({"seed": 9})";
    REQUIRE(load_config(p.string()).seed == 9);
    REQUIRE_THROWS_WITH(load_config((scratch_dir() / "nope.json").string()),
                        Catch::Matchers::ContainsSubstring("cannot open"));
  }
}

TEST_CASE("json artifacts round trip with a trailing newline") {
  const fs::path p = scratch_dir() / "artifact.json";
  const ordered_json j{{"b", 1}, {"a", ordered_json{{"nested", true}}}};
  write_json(j, p.string());

  REQUIRE(read_json(p.string()) == j);

  std::ifstream in(p, std::ios::binary);
  std::string raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  REQUIRE(!raw.empty());
  REQUIRE(raw.back() == '\n');
  REQUIRE(raw.find("\"b\"") < raw.find("\"a\""));  // insertion order preserved

  SECTION("missing files are an error") {
    REQUIRE_THROWS_AS(read_json((scratch_dir() / "absent.json").string()), std::runtime_error);
  }
}

TEST_CASE("unlearning requests serialize losslessly") {
  UnlearnRequest req;
  req.kind = RequestKind::user_wise;
  req.target_users = {3, 9};
  req.positions = {1, 4, 7};
  req.alpha_percent = 5.0;
  req.seed = 0xFEEDFACEDEADBEEFULL;

  const ordered_json j = request_to_json(req);
  REQUIRE(j.at("schema") == "recunlearn.request.v1");
  const UnlearnRequest back = request_from_json(j);
  REQUIRE(back.kind == req.kind);
  REQUIRE(back.target_users == req.target_users);
  REQUIRE(back.positions == req.positions);
  REQUIRE(back.alpha_percent == req.alpha_percent);
  REQUIRE(back.seed == req.seed);

  SECTION("unknown kinds are rejected") {
    ordered_json bad = j;
    bad["kind"] = "everything";
    REQUIRE_THROWS_AS(request_from_json(bad), std::runtime_error);
  }
}

TEST_CASE("prepare_data loads, filters, splits and keeps label tables") {
  const InteractionSet raw = synth::random_interactions(12, 8, 60, 5);
  const fs::path p = scratch_dir() / "ratings.dat";
  synth::write_movielens(raw, p.string());

  DataConfig dc;
  dc.path = p.string();
  dc.min_interactions = 2;
  dc.train_fraction = 0.5;
  const PreparedData pd = prepare_data(dc, 42);

  REQUIRE(pd.stats.at("schema") == "recunlearn.prepare.v1");
  REQUIRE(pd.stats.at("source").at("ratings") == 60);
  REQUIRE(pd.stats.at("filter").at("users").get<int>() == pd.train.num_users());
  REQUIRE(pd.stats.at("filter").at("items").get<int>() == pd.train.num_items());
  REQUIRE(pd.train.size() + pd.test.size() == pd.stats.at("filter").at("ratings").get<int>());
  REQUIRE(pd.stats.at("split").at("train_ratings").get<int>() == pd.train.size());
  const double sparsity = pd.stats.at("sparsity_percent").get<double>();
  REQUIRE(sparsity > 0.0);
  REQUIRE(sparsity < 100.0);
  REQUIRE(pd.user_labels.size() == static_cast<size_t>(pd.train.num_users()));
  REQUIRE(pd.item_labels.size() == static_cast<size_t>(pd.train.num_items()));
  REQUIRE(pd.train.num_users() == pd.test.num_users());

  SECTION("raw labels survive the dense remap") {
    // every label is one of the raw tokens written by the fixture
    for (const std::string& label : pd.user_labels) {
      const int raw_id = std::stoi(label);
      REQUIRE(raw_id >= 1);
      REQUIRE(raw_id <= 12);
    }
    for (const std::string& label : pd.item_labels) {
      const int raw_id = std::stoi(label);
      REQUIRE(raw_id >= 101);
      REQUIRE(raw_id <= 108);
    }
  }
  SECTION("preparation is deterministic in the global seed") {
    const PreparedData again = prepare_data(dc, 42);
    REQUIRE(again.stats == pd.stats);
    REQUIRE(again.train.size() == pd.train.size());
    for (int k = 0; k < pd.train.size(); ++k) REQUIRE(again.train.at(k) == pd.train.at(k));
  }
  SECTION("a missing path is rejected up front") {
    REQUIRE_THROWS_WITH(prepare_data(DataConfig{}, 1),
                        Catch::Matchers::ContainsSubstring("no dataset path"));
  }
}

TEST_CASE("attack_model balances, splits and reports on held-out users") {
  const synth::World w = small_world(12, 2);
  ModelHyper h;
  h.embed_dim = 4;
  h.init_std = 0.5;
  h.seed = 6;
  const ModelParams m = init_params(w.num_users, w.num_items, h);
  const UnlearnRequest req = make_rand_at(w.train, 10.0, 4);  // 6 of 60 active users

  MioExpConfig mc;
  mc.epochs = 5;
  const AttackOutcome out = attack_model(m, w.train, w.test, req, mc, 77);

  // positives: 54 remaining users, negatives: 6 unlearned + 12 test-only,
  // balanced down to 18 per side.
  REQUIRE(out.samples_total == 36);
  // held-out fifth, stratified by origin: 4 remaining + 1 unlearned + 2 test-only
  REQUIRE(out.samples_eval == 7);
  REQUIRE(out.eval_report.n_member == 4);
  REQUIRE(out.eval_report.n_non_member == 3);
  REQUIRE(out.auc_unlearned_vs_test.has_value());
  REQUIRE(*out.auc_unlearned_vs_test >= 0.0);
  REQUIRE(*out.auc_unlearned_vs_test <= 1.0);
  REQUIRE(out.attack_set.size() == 36);

  SECTION("the attack is deterministic in its seed") {
    const AttackOutcome again = attack_model(m, w.train, w.test, req, mc, 77);
    REQUIRE(again.eval_report.auc == out.eval_report.auc);
    REQUIRE(again.eval_report.accuracy == out.eval_report.accuracy);
  }
}

TEST_CASE("remaining_eval_users needs both leftover train data and test data") {
  const InteractionSet train({{0, 0, 1.0}, {0, 1, 2.0}, {1, 0, 3.0}, {2, 1, 4.0}}, 4, 2);
  const InteractionSet test({{0, 1, 1.0}, {2, 0, 2.0}, {3, 0, 3.0}}, 4, 2);
  UnlearnRequest req;
  req.positions = {0, 1};  // user 0 loses everything
  REQUIRE(remaining_eval_users(train, test, req) == std::vector<int>{2});
  req.positions = {};
  REQUIRE(remaining_eval_users(train, test, req) == std::vector<int>{0, 2});
}

TEST_CASE("the cka study reports all three blocks for independent originals") {
  const synth::World w = small_world(0, 3);
  ExperimentConfig cfg = small_grid_config();

  const CkaStudyResult r = run_cka_study(w.train, cfg, 10.0, Strategy::scif, 2, 99);
  REQUIRE(r.report.at("schema") == "recunlearn.cka.v1");
  REQUIRE(r.report.at("num_models") == 2);
  REQUIRE(r.report.at("strategy") == "scif");
  const ordered_json& blocks = r.report.at("blocks");
  REQUIRE(blocks.contains("UE_unlearn"));
  REQUIRE(blocks.contains("UE_remain"));
  REQUIRE(blocks.contains("item_emb"));
  REQUIRE(blocks.at("UE_unlearn").at("ratio").get<double>() == r.ratio_ue_unlearn);
  REQUIRE(blocks.at("UE_remain").at("ratio").get<double>() == r.ratio_ue_remain);
  REQUIRE(blocks.at("item_emb").at("ratio").get<double>() == r.ratio_item_emb);
  REQUIRE(blocks.at("UE_unlearn").at("per_original").size() == 2);

  REQUIRE_THROWS_AS(run_cka_study(w.train, cfg, 10.0, Strategy::scif, 1, 99),
                    std::invalid_argument);
}

TEST_CASE("run_grid fills cells, aggregates and timings deterministically") {
  const synth::World w = small_world(12, 2);
  const ExperimentConfig cfg = small_grid_config();

  const GridResult grid = run_grid(w.train, w.test, cfg);
  REQUIRE_FALSE(grid.any_failed);
  REQUIRE(grid.summary.at("schema") == "recunlearn.run.v1");
  REQUIRE(grid.summary.at("seed") == 42);
  REQUIRE(grid.summary.at("cells").size() == 2);
  for (const ordered_json& cell : grid.summary.at("cells")) {
    REQUIRE_FALSE(cell.contains("error"));
    REQUIRE(cell.contains("completeness"));
    REQUIRE(cell.at("utility").at("ndcg").size() == 2);
  }
  REQUIRE(grid.summary.at("original_model").size() == 1);
  REQUIRE(grid.summary.at("original_model").at(0).contains("completeness"));
  REQUIRE(grid.summary.at("aggregates").contains("retrain@10"));
  REQUIRE(grid.summary.at("aggregates").contains("sif@10"));
  REQUIRE(grid.summary.at("aggregates").at("sif@10").at("cells") == 1);

  REQUIRE(grid.timings.at("schema") == "recunlearn.timings.v1");
  REQUIRE(grid.timings.at("train").size() == 1);
  REQUIRE(grid.timings.at("cells").size() == 2);
  for (const ordered_json& t : grid.timings.at("cells"))
    REQUIRE(t.at("wall_seconds").get<double>() >= 0.0);

  SECTION("the summary has no wall-clock content and reruns byte-identically") {
    REQUIRE(grid.summary.dump().find("wall") == std::string::npos);
    REQUIRE(grid.summary.dump().find("seconds") == std::string::npos);
    const GridResult again = run_grid(w.train, w.test, cfg);
    REQUIRE(again.summary.dump() == grid.summary.dump());
  }
}

TEST_CASE("run_grid captures cell failures without voiding the run") {
  SECTION("an attack that cannot build a held-out side is recorded per cell") {
    const synth::World w = small_world(0, 8);  // no test-only users
    ExperimentConfig cfg = small_grid_config();
    cfg.alphas = {2.0};  // one unlearned user; the held-out split gets no negatives

    const GridResult grid = run_grid(w.train, w.test, cfg);
    REQUIRE(grid.any_failed);
    for (const ordered_json& cell : grid.summary.at("cells")) REQUIRE(cell.contains("error"));
  }
  SECTION("a request that selects nobody is recorded per cell") {
    const synth::World w = small_world(12, 2);
    ExperimentConfig cfg = small_grid_config();
    cfg.alphas = {0.1};

    const GridResult grid = run_grid(w.train, w.test, cfg);
    REQUIRE(grid.any_failed);
    for (const ordered_json& cell : grid.summary.at("cells")) {
      REQUIRE(cell.contains("error"));
      REQUIRE(cell.at("error").get<std::string>().find("selects no user") != std::string::npos);
    }
    REQUIRE(grid.summary.at("original_model").at(0).contains("error"));
  }
}
