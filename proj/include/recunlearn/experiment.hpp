#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "dataset.hpp"
#include "influence.hpp"
#include "metrics.hpp"
#include "mio.hpp"
#include "model.hpp"
#include "unlearn.hpp"

namespace recunlearn {

using ordered_json = nlohmann::ordered_json;

struct DataConfig {
  std::string path;
  std::string separator = "::";
  int min_interactions = 5;
  double train_fraction = 0.5;
  SplitMode split_mode = SplitMode::global_random;
};

struct MioExpConfig {
  int epochs = 100;
  double learning_rate = 0.001;
  double eval_fraction = 0.2;
};

// One configuration drives every subcommand. Stage seeds are fanned out from
// `seed` with derive_seed, so a fixed global seed reproduces the whole run.
// Precedence: command-line flags > environment (RECUNLEARN_SEED,
// RECUNLEARN_OUT) > config file > built-in defaults.
struct ExperimentConfig {
  uint64_t seed = 42;
  std::string out_dir = "out";
  DataConfig data;
  ModelHyper model;
  SolverConfig solver;
  MioExpConfig mio;
  std::vector<std::string> strategies = {"retrain", "if_full", "sif", "cif_full", "scif"};
  std::vector<double> alphas = {5.0};
  std::vector<int> ks = {5, 10, 15, 20};
  int repetitions = 1;
  int cka_models = 10;
};

namespace detail {

template <typename T>
T get_or(const ordered_json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  return j.at(key).get<T>();
}

inline void reject_unknown_keys(const ordered_json& j, std::initializer_list<const char*> known,
                                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) throw std::runtime_error("config: unknown key '" + key + "' in " + where);
  }
}

inline std::string alpha_key(double alpha) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", alpha);
  return buf;
}

}  // namespace detail

inline SplitMode split_mode_from_name(const std::string& name) {
  if (name == "global_random") return SplitMode::global_random;
  if (name == "per_user_random") return SplitMode::per_user_random;
  throw std::invalid_argument("unknown split_mode '" + name +
                              "' (expected global_random|per_user_random)");
}

inline const char* split_mode_name(SplitMode m) {
  return m == SplitMode::global_random ? "global_random" : "per_user_random";
}

inline ExperimentConfig config_from_json(const ordered_json& j) {
  detail::reject_unknown_keys(j,
                              {"seed", "out_dir", "data", "model", "solver", "mio", "strategies",
                               "alphas", "ks", "repetitions", "cka_models"},
                              "top level");
  ExperimentConfig cfg;
  cfg.seed = detail::get_or<uint64_t>(j, "seed", cfg.seed);
  cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir);
  if (j.contains("data")) {
    const ordered_json& d = j.at("data");
    detail::reject_unknown_keys(
        d, {"path", "separator", "min_interactions", "train_fraction", "split_mode"}, "data");
    cfg.data.path = detail::get_or<std::string>(d, "path", cfg.data.path);
    cfg.data.separator = detail::get_or<std::string>(d, "separator", cfg.data.separator);
    cfg.data.min_interactions = detail::get_or<int>(d, "min_interactions", cfg.data.min_interactions);
    cfg.data.train_fraction = detail::get_or<double>(d, "train_fraction", cfg.data.train_fraction);
    if (d.contains("split_mode")) cfg.data.split_mode = split_mode_from_name(d.at("split_mode"));
  }
  if (j.contains("model")) {
    const ordered_json& m = j.at("model");
    detail::reject_unknown_keys(
        m, {"embed_dim", "learning_rate", "reg_lambda", "epochs", "init_std", "batch_size"}, "model");
    cfg.model.embed_dim = detail::get_or<int>(m, "embed_dim", cfg.model.embed_dim);
    cfg.model.learning_rate = detail::get_or<double>(m, "learning_rate", cfg.model.learning_rate);
    cfg.model.reg_lambda = detail::get_or<double>(m, "reg_lambda", cfg.model.reg_lambda);
    cfg.model.epochs = detail::get_or<int>(m, "epochs", cfg.model.epochs);
    cfg.model.init_std = detail::get_or<double>(m, "init_std", cfg.model.init_std);
    cfg.model.batch_size = detail::get_or<int>(m, "batch_size", cfg.model.batch_size);
  }
  if (j.contains("solver")) {
    const ordered_json& s = j.at("solver");
    detail::reject_unknown_keys(s, {"damping", "cg_tol", "cg_max_iter", "use_compensation"}, "solver");
    cfg.solver.damping = detail::get_or<double>(s, "damping", cfg.solver.damping);
    cfg.solver.cg_tol = detail::get_or<double>(s, "cg_tol", cfg.solver.cg_tol);
    cfg.solver.cg_max_iter = detail::get_or<int>(s, "cg_max_iter", cfg.solver.cg_max_iter);
    cfg.solver.use_compensation = detail::get_or<bool>(s, "use_compensation", cfg.solver.use_compensation);
  }
  if (j.contains("mio")) {
    const ordered_json& a = j.at("mio");
    detail::reject_unknown_keys(a, {"epochs", "learning_rate", "eval_fraction"}, "mio");
    cfg.mio.epochs = detail::get_or<int>(a, "epochs", cfg.mio.epochs);
    cfg.mio.learning_rate = detail::get_or<double>(a, "learning_rate", cfg.mio.learning_rate);
    cfg.mio.eval_fraction = detail::get_or<double>(a, "eval_fraction", cfg.mio.eval_fraction);
  }
  if (j.contains("strategies")) cfg.strategies = j.at("strategies").get<std::vector<std::string>>();
  for (const std::string& s : cfg.strategies) strategy_from_name(s);
  if (j.contains("alphas")) cfg.alphas = j.at("alphas").get<std::vector<double>>();
  if (j.contains("ks")) cfg.ks = j.at("ks").get<std::vector<int>>();
  cfg.repetitions = detail::get_or<int>(j, "repetitions", cfg.repetitions);
  cfg.cka_models = detail::get_or<int>(j, "cka_models", cfg.cka_models);
  if (cfg.repetitions < 1) throw std::invalid_argument("config: repetitions must be >= 1");
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  ordered_json j;
  in >> j;
  return config_from_json(j);
}

inline void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("RECUNLEARN_SEED")) cfg.seed = std::strtoull(s, nullptr, 10);
  if (const char* o = std::getenv("RECUNLEARN_OUT")) cfg.out_dir = o;
}

inline ordered_json hyper_to_json(const ModelHyper& h) {
  return ordered_json{{"embed_dim", h.embed_dim},     {"learning_rate", h.learning_rate},
                      {"reg_lambda", h.reg_lambda},   {"epochs", h.epochs},
                      {"init_std", h.init_std},       {"batch_size", h.batch_size},
                      {"seed", h.seed}};
}

inline ordered_json solver_to_json(const SolverConfig& s) {
  return ordered_json{{"damping", s.damping},
                      {"cg_tol", s.cg_tol},
                      {"cg_max_iter", s.cg_max_iter},
                      {"use_compensation", s.use_compensation}};
}

inline ordered_json ranking_to_json(const RankingReport& r) {
  return ordered_json{{"ks", r.ks},
                      {"ndcg", r.ndcg},
                      {"hit_rate", r.hit_rate},
                      {"precision", r.precision},
                      {"recall", r.recall},
                      {"users_evaluated", r.users_evaluated}};
}

inline ordered_json mio_report_to_json(const MioReport& r) {
  return ordered_json{{"accuracy", r.accuracy},
                      {"auc", r.auc},
                      {"n_member", r.n_member},
                      {"n_non_member", r.n_non_member}};
}

inline void write_json(const ordered_json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_json: cannot open '" + path + "'");
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write_json: write failed for '" + path + "'");
}

inline ordered_json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_json: cannot open '" + path + "'");
  ordered_json j;
  in >> j;
  return j;
}

inline ordered_json request_to_json(const UnlearnRequest& req) {
  return ordered_json{{"schema", "recunlearn.request.v1"},
                      {"kind", req.kind == RequestKind::user_wise ? "user_wise" : "sample_wise"},
                      {"alpha_percent", req.alpha_percent},
                      {"seed", req.seed},
                      {"target_users", req.target_users},
                      {"positions", req.positions}};
}

inline UnlearnRequest request_from_json(const ordered_json& j) {
  UnlearnRequest req;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "user_wise") req.kind = RequestKind::user_wise;
  else if (kind == "sample_wise") req.kind = RequestKind::sample_wise;
  else throw std::runtime_error("request: unknown kind '" + kind + "'");
  req.alpha_percent = j.at("alpha_percent").get<double>();
  req.seed = j.at("seed").get<uint64_t>();
  req.target_users = j.at("target_users").get<std::vector<int>>();
  req.positions = j.at("positions").get<std::vector<int>>();
  return req;
}

struct PreparedData {
  InteractionSet train;
  InteractionSet test;
  std::vector<std::string> user_labels;  // dense id after filtering -> raw token
  std::vector<std::string> item_labels;
  ordered_json stats;
};

// load -> iterative min-interaction filter -> train/test split. The split seed
// is derived from the global seed so preparation is reproducible on its own.
inline PreparedData prepare_data(const DataConfig& dc, uint64_t global_seed) {
  if (dc.path.empty()) throw std::runtime_error("prepare: no dataset path configured");
  const LoadResult loaded = load_movielens(dc.path, dc.separator);
  const FilterResult filtered = filter_min_interactions(loaded.data, dc.min_interactions);
  SplitSpec spec;
  spec.train_fraction = dc.train_fraction;
  spec.mode = dc.split_mode;
  spec.seed = derive_seed(global_seed, "split");
  SplitResult parts = split(filtered.data, spec);

  const double cells =
      static_cast<double>(filtered.data.num_users()) * filtered.data.num_items();
  const double sparsity =
      cells > 0 ? 100.0 * (1.0 - filtered.data.size() / cells) : 0.0;
  PreparedData out;
  out.stats = ordered_json{
      {"schema", "recunlearn.prepare.v1"},
      {"seed", global_seed},
      {"source", ordered_json{{"path", dc.path},
                              {"separator", dc.separator},
                              {"users", loaded.data.num_users()},
                              {"items", loaded.data.num_items()},
                              {"ratings", loaded.data.size()},
                              {"duplicates_dropped", loaded.duplicates_dropped}}},
      {"filter", ordered_json{{"min_interactions", dc.min_interactions},
                              {"rounds", filtered.rounds},
                              {"users", filtered.data.num_users()},
                              {"items", filtered.data.num_items()},
                              {"ratings", filtered.data.size()}}},
      {"sparsity_percent", sparsity},
      {"split", ordered_json{{"mode", split_mode_name(dc.split_mode)},
                             {"train_fraction", dc.train_fraction},
                             {"seed", spec.seed},
                             {"train_ratings", parts.train.size()},
                             {"test_ratings", parts.test.size()}}}};
  out.train = std::move(parts.train);
  out.test = std::move(parts.test);
  for (int u : filtered.kept_users) out.user_labels.push_back(loaded.user_labels[static_cast<size_t>(u)]);
  for (int i : filtered.kept_items) out.item_labels.push_back(loaded.item_labels[static_cast<size_t>(i)]);
  return out;
}

struct AttackOutcome {
  MioReport eval_report;                       // held-out 20 percent
  std::optional<double> auc_unlearned_vs_test; // present when both origins are in the eval split
  int samples_total = 0;
  int samples_eval = 0;
  std::vector<MioSample> attack_set;
};

// Builds the attack set for one evaluated model, fits the MIO on the 80
// percent side and reports on the held-out 20 percent.
inline AttackOutcome attack_model(const ModelParams& evaluated, const InteractionSet& train,
                                  const InteractionSet& test, const UnlearnRequest& req,
                                  const MioExpConfig& mc, uint64_t seed) {
  AttackOutcome out;
  out.attack_set = build_attack_set(evaluated, train, test, req.positions,
                                    derive_seed(seed, "attack_balance"));
  auto [fit, eval] = split_attack_set(out.attack_set, mc.eval_fraction,
                                      derive_seed(seed, "attack_split"));
  MioTrainConfig tc;
  tc.epochs = mc.epochs;
  tc.learning_rate = mc.learning_rate;
  tc.seed = derive_seed(seed, "attack_fit");
  const MioTrainResult fit_result = train_mio(fit, tc);
  out.eval_report = completeness_report(fit_result.model, eval);
  out.samples_total = static_cast<int>(out.attack_set.size());
  out.samples_eval = static_cast<int>(eval.size());
  int n_unl = 0, n_test = 0;
  for (const MioSample& s : eval) {
    if (s.origin == SampleOrigin::unlearned) ++n_unl;
    if (s.origin == SampleOrigin::test_only) ++n_test;
  }
  if (n_unl > 0 && n_test > 0)
    out.auc_unlearned_vs_test =
        origin_auc(fit_result.model, eval, SampleOrigin::unlearned, SampleOrigin::test_only);
  return out;
}

// Users whose ranking quality is reported: they keep train interactions after
// the removal and have at least one test interaction.
inline std::vector<int> remaining_eval_users(const InteractionSet& train, const InteractionSet& test,
                                             const UnlearnRequest& req) {
  const InteractionSet remaining = remove_interactions(train, req.positions);
  std::vector<int> users;
  for (int u = 0; u < train.num_users(); ++u)
    if (remaining.user_degree(u) > 0 && test.user_degree(u) > 0) users.push_back(u);
  return users;
}

struct CkaStudyResult {
  ordered_json report;
  double ratio_ue_unlearn = 0.0;
  double ratio_ue_remain = 0.0;
  double ratio_item_emb = 0.0;
};

// Trains M independent originals, unlearns from the first one, and reports the
// per-block relative similarity of the unlearned model to the originals.
inline CkaStudyResult run_cka_study(const InteractionSet& train_set, const ExperimentConfig& cfg,
                                    double alpha, Strategy strategy, int num_models, uint64_t seed) {
  if (num_models < 2)
    throw std::invalid_argument("cka study: need at least 2 original models, got " +
                                std::to_string(num_models));
  const UnlearnRequest req = make_rand_at(train_set, alpha, derive_seed(seed, "cka_request"));
  std::vector<ModelParams> originals;
  originals.reserve(static_cast<size_t>(num_models));
  for (int j = 0; j < num_models; ++j) {
    ModelHyper h = cfg.model;
    h.seed = derive_seed(seed, "cka_original", static_cast<uint64_t>(j));
    originals.push_back(train(train_set, h).params);
  }
  UnlearnConfig ucfg;
  ucfg.strategy = strategy;
  ucfg.solver = cfg.solver;
  ucfg.retrain_hyper = cfg.model;
  ucfg.retrain_hyper.seed = derive_seed(seed, "cka_unlearned");
  const UnlearnOutcome outcome = unlearn(originals.front(), train_set, req, ucfg);

  CkaStudyResult out;
  ordered_json blocks;
  for (EmbBlock b : {EmbBlock::ue_unlearn, EmbBlock::ue_remain, EmbBlock::item_emb}) {
    const RelativeCkaResult r = relative_cka(originals, outcome.params, b, req.target_users);
    blocks[emb_block_name(b)] = ordered_json{{"ratio", r.ratio},
                                             {"numerator_mean", r.numerator_mean},
                                             {"baseline_mean", r.baseline_mean},
                                             {"per_original", r.per_original}};
    if (b == EmbBlock::ue_unlearn) out.ratio_ue_unlearn = r.ratio;
    if (b == EmbBlock::ue_remain) out.ratio_ue_remain = r.ratio;
    if (b == EmbBlock::item_emb) out.ratio_item_emb = r.ratio;
  }
  out.report = ordered_json{{"schema", "recunlearn.cka.v1"},
                            {"seed", seed},
                            {"num_models", num_models},
                            {"alpha_percent", alpha},
                            {"strategy", strategy_name(strategy)},
                            {"target_users", req.target_users},
                            {"blocks", blocks}};
  return out;
}

struct GridResult {
  ordered_json summary;  // deterministic for a fixed seed
  ordered_json timings;  // wall-clock, kept out of the summary on purpose
  bool any_failed = false;
};

// The full study grid: repetitions x alphas x strategies, all seeds fanned out
// from cfg.seed. Each cell evaluates completeness (MIO on the held-out attack
// split), utility (ranking over remaining users) and efficiency (wall time, to
// timings). Cell errors are captured per cell so one failure does not void the
// rest of the grid.
inline GridResult run_grid(const InteractionSet& train_set, const InteractionSet& test_set,
                           const ExperimentConfig& cfg) {
  GridResult out;
  ordered_json cells = ordered_json::array();
  ordered_json original_rows = ordered_json::array();
  ordered_json timing_cells = ordered_json::array();
  ordered_json train_timings = ordered_json::array();

  std::map<std::string, std::map<std::string, std::vector<ordered_json>>> cell_index;

  for (int rep = 0; rep < cfg.repetitions; ++rep) {
    ModelHyper hyper = cfg.model;
    hyper.seed = derive_seed(cfg.seed, "train", static_cast<uint64_t>(rep));
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult original = train(train_set, hyper);
    const auto t1 = std::chrono::steady_clock::now();
    train_timings.push_back(ordered_json{
        {"rep", rep}, {"seconds", std::chrono::duration<double>(t1 - t0).count()}});

    for (size_t ai = 0; ai < cfg.alphas.size(); ++ai) {
      const double alpha = cfg.alphas[ai];
      const uint64_t cell_tag = static_cast<uint64_t>(rep) * 1000 + ai;
      std::optional<UnlearnRequest> maybe_req;
      std::string request_error;
      try {
        maybe_req = make_rand_at(train_set, alpha, derive_seed(cfg.seed, "request", cell_tag));
      } catch (const std::exception& ex) {
        request_error = ex.what();
        out.any_failed = true;
      }
      const uint64_t attack_seed = derive_seed(cfg.seed, "attack", cell_tag);
      std::vector<int> eval_users;
      if (maybe_req) eval_users = remaining_eval_users(train_set, test_set, *maybe_req);

      ordered_json orig_row{{"rep", rep}, {"alpha", alpha}};
      if (!maybe_req) {
        orig_row["error"] = request_error;
      } else {
        const UnlearnRequest& req = *maybe_req;
        try {
          const AttackOutcome oa =
              attack_model(original.params, train_set, test_set, req, cfg.mio, attack_seed);
          orig_row["completeness"] = mio_report_to_json(oa.eval_report);
          orig_row["completeness"]["auc_unlearned_vs_test"] =
              oa.auc_unlearned_vs_test ? ordered_json(*oa.auc_unlearned_vs_test) : ordered_json();
        } catch (const std::exception& ex) {
          orig_row["error"] = ex.what();
          out.any_failed = true;
        }
      }
      original_rows.push_back(orig_row);

      for (const std::string& sname : cfg.strategies) {
        ordered_json cell{{"rep", rep}, {"alpha", alpha}, {"strategy", sname}};
        if (!maybe_req) {
          cell["error"] = request_error;
          cells.push_back(cell);
          continue;
        }
        const UnlearnRequest& req = *maybe_req;
        try {
          UnlearnConfig ucfg;
          ucfg.strategy = strategy_from_name(sname);
          ucfg.solver = cfg.solver;
          ucfg.retrain_hyper = cfg.model;
          ucfg.retrain_hyper.seed = derive_seed(cfg.seed, "retrain", cell_tag);
          const UnlearnOutcome outcome = unlearn(original.params, train_set, req, ucfg);

          const AttackOutcome att =
              attack_model(outcome.params, train_set, test_set, req, cfg.mio, attack_seed);
          const RankingReport utility =
              evaluate_ranking(outcome.params, train_set, test_set, eval_users, cfg.ks);

          cell["completeness"] = mio_report_to_json(att.eval_report);
          cell["completeness"]["auc_unlearned_vs_test"] =
              att.auc_unlearned_vs_test ? ordered_json(*att.auc_unlearned_vs_test) : ordered_json();
          cell["utility"] = ranking_to_json(utility);
          cell["degraded_points"] = outcome.degraded_points;
          if (outcome.estimate) {
            cell["cg"] = ordered_json{{"residual", outcome.estimate->cg_residual},
                                      {"iterations", outcome.estimate->cg_iterations},
                                      {"converged", outcome.estimate->cg_converged}};
          }
          timing_cells.push_back(ordered_json{{"rep", rep},
                                              {"alpha", alpha},
                                              {"strategy", sname},
                                              {"wall_seconds", outcome.wall_seconds}});
          cell_index[sname][detail::alpha_key(alpha)].push_back(cell);
        } catch (const std::exception& ex) {
          cell["error"] = ex.what();
          out.any_failed = true;
        }
        cells.push_back(cell);
      }
    }
  }

  ordered_json aggregates;
  for (const std::string& sname : cfg.strategies) {
    for (const double alpha : cfg.alphas) {
      const auto sit = cell_index.find(sname);
      if (sit == cell_index.end()) continue;
      const auto ait = sit->second.find(detail::alpha_key(alpha));
      if (ait == sit->second.end()) continue;
      const std::vector<ordered_json>& rows = ait->second;
      ordered_json agg;
      double auc = 0, acc = 0, uvt = 0;
      int uvt_n = 0;
      std::vector<double> ndcg(cfg.ks.size(), 0.0), hr(cfg.ks.size(), 0.0);
      for (const ordered_json& row : rows) {
        auc += row.at("completeness").at("auc").get<double>();
        acc += row.at("completeness").at("accuracy").get<double>();
        if (!row.at("completeness").at("auc_unlearned_vs_test").is_null()) {
          uvt += row.at("completeness").at("auc_unlearned_vs_test").get<double>();
          ++uvt_n;
        }
        for (size_t j = 0; j < cfg.ks.size(); ++j) {
          ndcg[j] += row.at("utility").at("ndcg").at(j).get<double>();
          hr[j] += row.at("utility").at("hit_rate").at(j).get<double>();
        }
      }
      const double n = static_cast<double>(rows.size());
      for (size_t j = 0; j < cfg.ks.size(); ++j) {
        ndcg[j] /= n;
        hr[j] /= n;
      }
      agg["cells"] = rows.size();
      agg["auc_mean"] = auc / n;
      agg["accuracy_mean"] = acc / n;
      agg["auc_unlearned_vs_test_mean"] = uvt_n > 0 ? ordered_json(uvt / uvt_n) : ordered_json();
      agg["ndcg_mean"] = ndcg;
      agg["hit_rate_mean"] = hr;
      aggregates[sname + "@" + detail::alpha_key(alpha)] = agg;
    }
  }

  ModelHyper base_hyper = cfg.model;
  out.summary = ordered_json{
      {"schema", "recunlearn.run.v1"},
      {"seed", cfg.seed},
      {"config",
       ordered_json{{"model", hyper_to_json(base_hyper)},
                    {"solver", solver_to_json(cfg.solver)},
                    {"mio", ordered_json{{"epochs", cfg.mio.epochs},
                                         {"learning_rate", cfg.mio.learning_rate},
                                         {"eval_fraction", cfg.mio.eval_fraction}}},
                    {"strategies", cfg.strategies},
                    {"alphas", cfg.alphas},
                    {"ks", cfg.ks},
                    {"repetitions", cfg.repetitions}}},
      {"data", ordered_json{{"num_users", train_set.num_users()},
                            {"num_items", train_set.num_items()},
                            {"train_ratings", train_set.size()},
                            {"test_ratings", test_set.size()}}},
      {"original_model", original_rows},
      {"cells", cells},
      {"aggregates", aggregates}};
  out.timings = ordered_json{{"schema", "recunlearn.timings.v1"},
                             {"train", train_timings},
                             {"cells", timing_cells}};
  return out;
}

}  // namespace recunlearn
