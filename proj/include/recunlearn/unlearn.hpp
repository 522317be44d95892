#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"
#include "influence.hpp"
#include "model.hpp"

namespace recunlearn {

enum class RequestKind { user_wise, sample_wise };

struct UnlearnRequest {
  RequestKind kind = RequestKind::user_wise;
  std::vector<int> target_users;  // user-wise: the users whose data leaves
  std::vector<int> positions;     // train positions to remove (both kinds)
  double alpha_percent = 0.0;     // user-wise sampling rate, 0 for handcrafted requests
  uint64_t seed = 0;
};

// rand@alpha request: draws round(alpha/100 * active users) distinct users
// among those with at least one train interaction and marks all their train
// positions for removal.
inline UnlearnRequest make_rand_at(const InteractionSet& train, double alpha_percent, uint64_t seed) {
  if (!(alpha_percent > 0.0 && alpha_percent <= 100.0))
    throw std::invalid_argument("make_rand_at: alpha_percent outside (0,100]");
  std::vector<int> active;
  for (int u = 0; u < train.num_users(); ++u)
    if (train.user_degree(u) > 0) active.push_back(u);
  const int count = static_cast<int>(std::llround(alpha_percent / 100.0 * active.size()));
  if (count < 1)
    throw std::invalid_argument("make_rand_at: alpha " + std::to_string(alpha_percent) +
                                "% selects no user out of " + std::to_string(active.size()));
  std::mt19937_64 rng(seed);
  std::shuffle(active.begin(), active.end(), rng);
  active.resize(static_cast<size_t>(count));
  std::sort(active.begin(), active.end());

  UnlearnRequest req;
  req.kind = RequestKind::user_wise;
  req.alpha_percent = alpha_percent;
  req.seed = seed;
  req.target_users = active;
  for (int u : active)
    for (int pos : train.user_positions(u)) req.positions.push_back(pos);
  std::sort(req.positions.begin(), req.positions.end());
  return req;
}

inline UnlearnRequest make_sample_request(const InteractionSet& train, std::vector<int> positions,
                                          uint64_t seed = 0) {
  UnlearnRequest req;
  req.kind = RequestKind::sample_wise;
  req.seed = seed;
  req.positions = std::move(positions);
  std::sort(req.positions.begin(), req.positions.end());
  req.target_users = users_of_positions(train, req.positions);
  return req;
}

enum class Strategy { retrain, if_full, sif, cif_full, scif };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::retrain: return "retrain";
    case Strategy::if_full: return "if_full";
    case Strategy::sif: return "sif";
    case Strategy::cif_full: return "cif_full";
    case Strategy::scif: return "scif";
  }
  return "?";
}

inline Strategy strategy_from_name(const std::string& name) {
  if (name == "retrain") return Strategy::retrain;
  if (name == "if_full") return Strategy::if_full;
  if (name == "sif") return Strategy::sif;
  if (name == "cif_full") return Strategy::cif_full;
  if (name == "scif") return Strategy::scif;
  throw std::invalid_argument("unknown strategy '" + name +
                              "' (expected retrain|if_full|sif|cif_full|scif)");
}

struct UnlearnConfig {
  Strategy strategy = Strategy::scif;
  SolverConfig solver;
  // Retraining hyperparameters; callers pass a fresh seed here by default and
  // the original model's seed when they need the E = empty identity.
  ModelHyper retrain_hyper;
};

struct UnlearnOutcome {
  ModelParams params;
  Strategy strategy = Strategy::retrain;
  double wall_seconds = 0.0;
  int degraded_points = 0;
  std::optional<InfluenceEstimate> estimate;  // influence strategies only
  std::vector<double> retrain_epoch_losses;   // retrain only
};

inline TrainResult train_for_retrain(const InteractionSet& train_set, const UnlearnRequest& request,
                                     const ModelHyper& hyper) {
  return train(remove_interactions(train_set, request.positions), hyper);
}

// Runs one unlearning strategy against a trained model. Only the strategy body
// is timed. Influence strategies return the updated copy of `model`; retrain
// trains from scratch on train minus the removed positions (entity counts are
// preserved, so shapes stay identical).
inline UnlearnOutcome unlearn(const ModelParams& model, const InteractionSet& train,
                              const UnlearnRequest& request, const UnlearnConfig& cfg) {
  if (train.num_users() != model.num_users() || train.num_items() != model.num_items())
    throw std::invalid_argument("unlearn: train does not match model shape");
  UnlearnOutcome out;
  out.strategy = cfg.strategy;
  const auto t0 = std::chrono::steady_clock::now();
  switch (cfg.strategy) {
    case Strategy::retrain: {
      if (cfg.retrain_hyper.embed_dim != model.dim())
        throw std::invalid_argument("unlearn: retrain embed_dim differs from the original model");
      TrainResult tr = train_for_retrain(train, request, cfg.retrain_hyper);
      out.params = std::move(tr.params);
      out.retrain_epoch_losses = std::move(tr.epoch_losses);
      break;
    }
    case Strategy::if_full:
    case Strategy::sif: {
      const Scope scope = cfg.strategy == Strategy::sif ? Scope::selected_users : Scope::full;
      InfluenceEstimate est = influence_if(model, train, request.positions, scope, cfg.solver);
      out.params = apply_update(model, est);
      out.estimate = std::move(est);
      break;
    }
    case Strategy::cif_full:
    case Strategy::scif: {
      const Scope scope = cfg.strategy == Strategy::scif ? Scope::selected_users : Scope::full;
      const std::vector<std::optional<Surrogate>> surrogates =
          build_surrogates(train, request.positions);
      InfluenceEstimate est =
          influence_cif(model, train, request.positions, surrogates, scope, cfg.solver);
      out.degraded_points = est.degraded_points;
      out.params = apply_update(model, est);
      out.estimate = std::move(est);
      break;
    }
  }
  const auto t1 = std::chrono::steady_clock::now();
  out.wall_seconds = std::chrono::duration<double>(t1 - t0).count();
  return out;
}

}  // namespace recunlearn
