#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <recunlearn/experiment.hpp>

namespace fs = std::filesystem;
using namespace recunlearn;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;

  // flags > env > config file > defaults
  ExperimentConfig resolve() const {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config(config_path);
    apply_env_overrides(cfg);
    if (seed_set) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    return cfg;
  }
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file");
  cmd->add_option("--out", args.out_dir, "output directory (env RECUNLEARN_OUT)");
  cmd->add_option("--seed", args.seed, "global seed, fanned out per stage (env RECUNLEARN_SEED)")
      ->each([&args](const std::string&) { args.seed_set = true; });
}

std::string separator_for_format(const std::string& format) {
  if (format == "movielens") return "::";
  if (format == "tsv") return "\t";
  throw CLI::ValidationError("--format", "expected movielens|tsv");
}

InteractionSet read_train_csv(const std::string& path, const ModelParams& m) {
  return read_canonical_csv(path, m.num_users(), m.num_items());
}

int do_prepare(const ExperimentConfig& cfg) {
  const PreparedData pd = prepare_data(cfg.data, cfg.seed);
  fs::create_directories(cfg.out_dir);
  write_canonical_csv(pd.train, cfg.out_dir + "/train.csv");
  write_canonical_csv(pd.test, cfg.out_dir + "/test.csv");
  write_json(pd.stats, cfg.out_dir + "/prepare_stats.json");
  {
    std::ofstream users(cfg.out_dir + "/users.csv");
    users << "dense_id,raw_id\n";
    for (size_t u = 0; u < pd.user_labels.size(); ++u) users << u << ',' << pd.user_labels[u] << '\n';
    std::ofstream items(cfg.out_dir + "/items.csv");
    items << "dense_id,raw_id\n";
    for (size_t i = 0; i < pd.item_labels.size(); ++i) items << i << ',' << pd.item_labels[i] << '\n';
  }
  std::cout << "prepared " << pd.train.num_users() << " users, " << pd.train.num_items()
            << " items; train " << pd.train.size() << " / test " << pd.test.size()
            << " ratings -> " << cfg.out_dir << "\n";
  return 0;
}

int do_train(const ExperimentConfig& cfg, const std::string& train_csv) {
  const InteractionSet train_set = read_canonical_csv(train_csv);
  ModelHyper hyper = cfg.model;
  hyper.seed = derive_seed(cfg.seed, "train");
  const auto t0 = std::chrono::steady_clock::now();
  const TrainResult result = train(train_set, hyper);
  const auto t1 = std::chrono::steady_clock::now();
  fs::create_directories(cfg.out_dir);
  save_params(result.params, cfg.out_dir + "/model.ckpt");
  ordered_json rep{{"schema", "recunlearn.train.v1"},
                   {"seed", cfg.seed},
                   {"hyper", hyper_to_json(hyper)},
                   {"epoch_losses", result.epoch_losses},
                   {"final_loss", result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()},
                   {"wall_seconds", std::chrono::duration<double>(t1 - t0).count()}};
  write_json(rep, cfg.out_dir + "/train_report.json");
  std::cout << "trained " << train_set.num_users() << "x" << train_set.num_items() << " model, dim "
            << hyper.embed_dim << ", final loss "
            << (result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()) << " -> "
            << cfg.out_dir << "/model.ckpt\n";
  return 0;
}

int do_unlearn(const ExperimentConfig& cfg, const std::string& model_path,
               const std::string& train_csv, double alpha, const std::string& strategy) {
  const ModelParams model = load_params(model_path);
  const InteractionSet train_set = read_train_csv(train_csv, model);
  const UnlearnRequest req = make_rand_at(train_set, alpha, derive_seed(cfg.seed, "request"));
  UnlearnConfig ucfg;
  ucfg.strategy = strategy_from_name(strategy);
  ucfg.solver = cfg.solver;
  ucfg.retrain_hyper = cfg.model;
  ucfg.retrain_hyper.embed_dim = model.dim();
  ucfg.retrain_hyper.seed = derive_seed(cfg.seed, "retrain");
  const UnlearnOutcome outcome = unlearn(model, train_set, req, ucfg);

  fs::create_directories(cfg.out_dir);
  const std::string ckpt = cfg.out_dir + "/unlearned_" + strategy + ".ckpt";
  save_params(outcome.params, ckpt);
  write_json(request_to_json(req), cfg.out_dir + "/request.json");
  ordered_json rep{{"schema", "recunlearn.unlearn.v1"},
                   {"seed", cfg.seed},
                   {"strategy", strategy},
                   {"alpha_percent", alpha},
                   {"target_users", req.target_users.size()},
                   {"removed_ratings", req.positions.size()},
                   {"solver", solver_to_json(cfg.solver)},
                   {"degraded_points", outcome.degraded_points},
                   {"wall_seconds", outcome.wall_seconds}};
  if (outcome.estimate) {
    rep["cg"] = ordered_json{{"residual", outcome.estimate->cg_residual},
                             {"iterations", outcome.estimate->cg_iterations},
                             {"converged", outcome.estimate->cg_converged}};
    rep["compensation_norm"] = outcome.estimate->compensation_norm;
  }
  write_json(rep, cfg.out_dir + "/unlearn_report.json");
  std::cout << "unlearned " << req.target_users.size() << " users (" << req.positions.size()
            << " ratings) with " << strategy << " in " << outcome.wall_seconds << "s -> " << ckpt
            << "\n";
  return 0;
}

// The attack classifier is a 2*embed_dim -> 64 -> 16 -> 4 -> 2 ReLU MLP with a
// softmax head, trained with plain SGD (defaults: 100 epochs, lr 0.001).
int do_attack(const ExperimentConfig& cfg, const std::string& original_path,
              const std::string& unlearned_path, const std::string& train_csv,
              const std::string& test_csv, const std::string& request_path) {
  const ModelParams original = load_params(original_path);
  const ModelParams unlearned = load_params(unlearned_path);
  const InteractionSet train_set = read_train_csv(train_csv, original);
  const InteractionSet test_set =
      read_canonical_csv(test_csv, original.num_users(), original.num_items());
  const UnlearnRequest req = request_from_json(read_json(request_path));
  const uint64_t attack_seed = derive_seed(cfg.seed, "attack");

  fs::create_directories(cfg.out_dir);
  ordered_json rep{{"schema", "recunlearn.attack.v1"},
                   {"seed", cfg.seed},
                   {"mio", ordered_json{{"epochs", cfg.mio.epochs},
                                        {"learning_rate", cfg.mio.learning_rate},
                                        {"eval_fraction", cfg.mio.eval_fraction},
                                        {"architecture", "2d-64-16-4-2 relu mlp, softmax head"}}}};
  const auto run_side = [&](const char* label, const ModelParams& m, const std::string& csv_path) {
    const AttackOutcome att = attack_model(m, train_set, test_set, req, cfg.mio, attack_seed);
    write_attack_csv(att.attack_set, csv_path);
    ordered_json side = mio_report_to_json(att.eval_report);
    side["auc_unlearned_vs_test"] =
        att.auc_unlearned_vs_test ? ordered_json(*att.auc_unlearned_vs_test) : ordered_json();
    side["samples_total"] = att.samples_total;
    side["samples_eval"] = att.samples_eval;
    rep[label] = side;
  };
  run_side("original", original, cfg.out_dir + "/attack_original.csv");
  run_side("unlearned", unlearned, cfg.out_dir + "/attack_unlearned.csv");
  write_json(rep, cfg.out_dir + "/completeness.json");
  std::cout << "attack AUC original " << rep["original"]["auc"].get<double>() << ", unlearned "
            << rep["unlearned"]["auc"].get<double>() << " -> " << cfg.out_dir
            << "/completeness.json\n";
  return 0;
}

int do_eval(const ExperimentConfig& cfg, const std::string& model_path, const std::string& train_csv,
            const std::string& test_csv, const std::string& request_path) {
  const ModelParams model = load_params(model_path);
  const InteractionSet train_set = read_train_csv(train_csv, model);
  const InteractionSet test_set =
      read_canonical_csv(test_csv, model.num_users(), model.num_items());
  UnlearnRequest req;  // empty request: evaluate every user with train and test data
  if (!request_path.empty()) req = request_from_json(read_json(request_path));
  const std::vector<int> users = remaining_eval_users(train_set, test_set, req);
  const RankingReport report = evaluate_ranking(model, train_set, test_set, users, cfg.ks);

  fs::create_directories(cfg.out_dir);
  ordered_json rep{{"schema", "recunlearn.eval.v1"}, {"seed", cfg.seed}};
  rep["ranking"] = ranking_to_json(report);
  write_json(rep, cfg.out_dir + "/ranking.json");
  std::ofstream csv(cfg.out_dir + "/ranking.csv");
  csv << "k,ndcg,hit_rate,precision,recall\n";
  for (size_t j = 0; j < report.ks.size(); ++j)
    csv << report.ks[j] << ',' << report.ndcg[j] << ',' << report.hit_rate[j] << ','
        << report.precision[j] << ',' << report.recall[j] << '\n';
  std::cout << "ranking over " << report.users_evaluated << " users -> " << cfg.out_dir
            << "/ranking.json\n";
  return 0;
}

int do_cka(const ExperimentConfig& cfg, const std::string& train_csv, double alpha,
           const std::string& strategy, int num_models) {
  const InteractionSet train_set = read_canonical_csv(train_csv);
  const CkaStudyResult result = run_cka_study(train_set, cfg, alpha,
                                              strategy_from_name(strategy), num_models,
                                              cfg.seed);
  fs::create_directories(cfg.out_dir);
  write_json(result.report, cfg.out_dir + "/cka.json");
  std::ofstream csv(cfg.out_dir + "/cka.csv");
  csv << "block,relative_cka\n";
  csv << "UE_unlearn," << result.ratio_ue_unlearn << '\n';
  csv << "UE_remain," << result.ratio_ue_remain << '\n';
  csv << "item_emb," << result.ratio_item_emb << '\n';
  std::cout << "relative CKA: UE_unlearn " << result.ratio_ue_unlearn << ", UE_remain "
            << result.ratio_ue_remain << ", item_emb " << result.ratio_item_emb << " -> "
            << cfg.out_dir << "/cka.json\n";
  return 0;
}

int do_run(const ExperimentConfig& cfg) {
  const PreparedData pd = prepare_data(cfg.data, cfg.seed);
  fs::create_directories(cfg.out_dir);
  write_canonical_csv(pd.train, cfg.out_dir + "/train.csv");
  write_canonical_csv(pd.test, cfg.out_dir + "/test.csv");
  write_json(pd.stats, cfg.out_dir + "/prepare_stats.json");
  const GridResult grid = run_grid(pd.train, pd.test, cfg);
  write_json(grid.summary, cfg.out_dir + "/summary.json");
  write_json(grid.timings, cfg.out_dir + "/timings.json");
  {
    std::ofstream csv(cfg.out_dir + "/summary.csv");
    csv << "strategy,alpha_percent,cells,auc_mean,accuracy_mean,auc_unlearned_vs_test_mean";
    for (int k : cfg.ks) csv << ",ndcg_at_" << k;
    for (int k : cfg.ks) csv << ",hit_rate_at_" << k;
    csv << "\n";
    for (const auto& [key, agg] : grid.summary.at("aggregates").items()) {
      const size_t at = key.rfind('@');
      csv << key.substr(0, at) << ',' << key.substr(at + 1) << ','
          << agg.at("cells").get<size_t>() << ',' << agg.at("auc_mean").get<double>() << ','
          << agg.at("accuracy_mean").get<double>() << ',';
      if (!agg.at("auc_unlearned_vs_test_mean").is_null())
        csv << agg.at("auc_unlearned_vs_test_mean").get<double>();
      for (const auto& v : agg.at("ndcg_mean")) csv << ',' << v.get<double>();
      for (const auto& v : agg.at("hit_rate_mean")) csv << ',' << v.get<double>();
      csv << "\n";
    }
  }
  const size_t n_cells = grid.summary.at("cells").size();
  std::cout << "ran " << n_cells << " cells -> " << cfg.out_dir << "/summary.json\n";
  if (grid.any_failed) {
    std::cerr << "some cells failed; see summary.json\n";
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"matrix-factorization recommendation unlearning toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  CommonArgs prepare_args, train_args, unlearn_args, attack_args, eval_args, cka_args, run_args;

  auto* prepare = app.add_subcommand("prepare", "load ratings, filter, split, dump canonical CSVs");
  std::string prep_data, prep_format = "movielens", prep_separator;
  double prep_fraction = -1.0;
  int prep_min = -1;
  std::string prep_split_mode;
  add_common(prepare, prepare_args);
  prepare->add_option("--data", prep_data, "raw rating file (user<sep>item<sep>rating lines)");
  prepare->add_option("--format", prep_format, "input format: movielens ('::') or tsv (tab)");
  prepare->add_option("--separator", prep_separator, "custom field separator, overrides --format");
  prepare->add_option("--min-interactions", prep_min, "iterative min interactions per user/item (default 5)");
  prepare->add_option("--fraction", prep_fraction, "train fraction (default 0.5)");
  prepare->add_option("--split-mode", prep_split_mode, "global_random|per_user_random");

  auto* train_cmd = app.add_subcommand("train", "train the embedding model on a canonical train.csv");
  std::string train_csv;
  add_common(train_cmd, train_args);
  train_cmd->add_option("--train", train_csv, "canonical train.csv")->required();

  auto* unlearn_cmd = app.add_subcommand(
      "unlearn", "apply one unlearning strategy (retrain|if_full|sif|cif_full|scif)");
  std::string unl_model, unl_train, unl_strategy = "scif";
  double unl_alpha = 5.0;
  add_common(unlearn_cmd, unlearn_args);
  unlearn_cmd->add_option("--model", unl_model, "original model checkpoint")->required();
  unlearn_cmd->add_option("--train", unl_train, "canonical train.csv")->required();
  unlearn_cmd->add_option("--alpha", unl_alpha, "percent of users to unlearn (rand@alpha)");
  unlearn_cmd->add_option("--strategy", unl_strategy, "unlearning strategy");

  auto* attack_cmd = app.add_subcommand(
      "attack", "membership inference oracle (2d-64-16-4-2 relu mlp, softmax head)");
  std::string atk_model, atk_unlearned, atk_train, atk_test, atk_request;
  add_common(attack_cmd, attack_args);
  attack_cmd->add_option("--model", atk_model, "original model checkpoint")->required();
  attack_cmd->add_option("--unlearned", atk_unlearned, "unlearned model checkpoint")->required();
  attack_cmd->add_option("--train", atk_train, "canonical train.csv")->required();
  attack_cmd->add_option("--test", atk_test, "canonical test.csv")->required();
  attack_cmd->add_option("--request", atk_request, "request.json from the unlearn step")->required();

  auto* eval_cmd = app.add_subcommand("eval", "ranking metrics (NDCG/HR/precision/recall at k)");
  std::string ev_model, ev_train, ev_test, ev_request;
  add_common(eval_cmd, eval_args);
  eval_cmd->add_option("--model", ev_model, "model checkpoint")->required();
  eval_cmd->add_option("--train", ev_train, "canonical train.csv")->required();
  eval_cmd->add_option("--test", ev_test, "canonical test.csv")->required();
  eval_cmd->add_option("--request", ev_request, "request.json; restricts to remaining users");

  auto* cka_cmd = app.add_subcommand("cka", "relative CKA of an unlearned model against M originals");
  std::string cka_train, cka_strategy = "retrain";
  double cka_alpha = 5.0;
  int cka_models = -1;
  add_common(cka_cmd, cka_args);
  cka_cmd->add_option("--train", cka_train, "canonical train.csv")->required();
  cka_cmd->add_option("--alpha", cka_alpha, "percent of users to unlearn");
  cka_cmd->add_option("--strategy", cka_strategy, "unlearning strategy");
  cka_cmd->add_option("--models", cka_models, "number of original models M (default 10)");

  auto* run_cmd = app.add_subcommand("run", "full grid: strategies x alphas x repetitions");
  std::string run_data, run_format = "movielens";
  add_common(run_cmd, run_args);
  run_cmd->add_option("--data", run_data, "raw rating file");
  run_cmd->add_option("--format", run_format, "input format: movielens ('::') or tsv (tab)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (prepare->parsed()) {
      ExperimentConfig cfg = prepare_args.resolve();
      if (!prep_data.empty()) cfg.data.path = prep_data;
      if (!prep_separator.empty()) cfg.data.separator = prep_separator;
      else if (prepare->count("--format") > 0 || cfg.data.separator.empty())
        cfg.data.separator = separator_for_format(prep_format);
      if (prep_min >= 0) cfg.data.min_interactions = prep_min;
      if (prep_fraction >= 0.0) cfg.data.train_fraction = prep_fraction;
      if (!prep_split_mode.empty()) cfg.data.split_mode = split_mode_from_name(prep_split_mode);
      return do_prepare(cfg);
    }
    if (train_cmd->parsed()) return do_train(train_args.resolve(), train_csv);
    if (unlearn_cmd->parsed())
      return do_unlearn(unlearn_args.resolve(), unl_model, unl_train, unl_alpha, unl_strategy);
    if (attack_cmd->parsed())
      return do_attack(attack_args.resolve(), atk_model, atk_unlearned, atk_train, atk_test,
                       atk_request);
    if (eval_cmd->parsed()) return do_eval(eval_args.resolve(), ev_model, ev_train, ev_test, ev_request);
    if (cka_cmd->parsed()) {
      ExperimentConfig cfg = cka_args.resolve();
      return do_cka(cfg, cka_train, cka_alpha, cka_strategy,
                    cka_models > 0 ? cka_models : cfg.cka_models);
    }
    if (run_cmd->parsed()) {
      ExperimentConfig cfg = run_args.resolve();
      if (!run_data.empty()) cfg.data.path = run_data;
      if (run_cmd->count("--format") > 0) cfg.data.separator = separator_for_format(run_format);
      return do_run(cfg);
    }
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 2;
}
