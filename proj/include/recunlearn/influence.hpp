#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <map>
#include <optional>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"
#include "model.hpp"

namespace recunlearn {

struct SolverConfig {
  double damping = 0.01;
  double cg_tol = 1e-6;
  int cg_max_iter = 100;
  bool use_compensation = true;
};

enum class Scope { full, selected_users };

struct CgResult {
  Vector x;
  double residual = 0.0;  // relative, ||A x - b|| / ||b||
  int iterations = 0;
  bool converged = false;
};

// Plain conjugate gradients for SPD operators given as a matvec. Zero rhs
// returns zero immediately. The reported residual is recomputed from the
// returned iterate with one extra operator application, so a "converged"
// flag is never based on the recurrence alone.
template <typename ApplyFn>
CgResult cg_solve(ApplyFn&& apply, const Vector& rhs, double tol, int max_iter) {
  if (max_iter < 0) throw std::invalid_argument("cg_solve: negative max_iter");
  CgResult out;
  out.x = Vector::Zero(rhs.size());
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    out.converged = true;
    return out;
  }

  Vector r = rhs;
  Vector p = r;
  double rs = r.squaredNorm();
  Vector best_x = out.x;
  double best_rel = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    const Vector ap = apply(p);
    const double pap = p.dot(ap);
    if (!std::isfinite(pap) || pap <= 0.0)
      throw std::runtime_error("cg_solve: operator is not positive definite");
    const double alpha = rs / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    const double rs_new = r.squaredNorm();
    ++out.iterations;
    const double rel = std::sqrt(rs_new) / rhs_norm;
    if (rel < best_rel) {
      best_rel = rel;
      best_x = out.x;
    }
    if (rel <= tol) break;
    p = r + (rs_new / rs) * p;
    rs = rs_new;
  }
  out.x = best_x;
  out.residual = (apply(out.x) - rhs).norm() / rhs_norm;
  out.converged = out.residual <= tol;
  return out;
}

// Exact damped Hessian-vector product of the total loss over `data`, taken
// with respect to every embedding. Layout of v: user rows first (user u at
// offset u*d), then item rows (item i at offset (num_users+i)*d). Includes
// the Gauss-Newton terms, the residual cross terms and the per-interaction
// regularization, so it agrees with finite differences of the gradient.
inline Vector hvp_full(const ModelParams& m, const InteractionSet& data, const Vector& v,
                       double damping) {
  const int d = m.dim();
  const int nu = m.num_users();
  if (data.num_users() != nu || data.num_items() != m.num_items())
    throw std::invalid_argument("hvp_full: data does not match model shape");
  if (v.size() != static_cast<Eigen::Index>(nu + m.num_items()) * d)
    throw std::invalid_argument("hvp_full: vector length mismatch");
  Vector out = damping * v;
  const double lambda = m.hyper.reg_lambda;
  for (const Interaction& z : data.interactions()) {
    const auto p = m.user_emb.row(z.user);
    const auto q = m.item_emb.row(z.item);
    const auto vp = v.segment(static_cast<Eigen::Index>(z.user) * d, d);
    const auto vq = v.segment(static_cast<Eigen::Index>(nu + z.item) * d, d);
    auto op = out.segment(static_cast<Eigen::Index>(z.user) * d, d);
    auto oq = out.segment(static_cast<Eigen::Index>(nu + z.item) * d, d);
    const double e = p.dot(q) - z.rating;
    const double q_vp = q.dot(vp);
    const double p_vq = p.dot(vq);
    op.noalias() += q_vp * q.transpose() + lambda * vp + p_vq * q.transpose() + e * vq;
    oq.noalias() += p_vq * p.transpose() + lambda * vq + q_vp * p.transpose() + e * vp;
  }
  return out;
}

// Damped product with the block-diagonal Hessian restricted to the given
// users' rows (all other rows held constant). Each block equals
// user_hessian_block on `data`, so the blocks stay positive definite even for
// users with no remaining interactions. Layout of v: the users' d-blocks in
// the order given.
inline Vector hvp_selected(const ModelParams& m, const InteractionSet& data,
                           const std::vector<int>& users, const Vector& v, double damping) {
  const int d = m.dim();
  if (data.num_users() != m.num_users() || data.num_items() != m.num_items())
    throw std::invalid_argument("hvp_selected: data does not match model shape");
  if (v.size() != static_cast<Eigen::Index>(users.size()) * d)
    throw std::invalid_argument("hvp_selected: vector length mismatch");
  Vector out(v.size());
  for (size_t s = 0; s < users.size(); ++s) {
    const int u = users[s];
    const auto vu = v.segment(static_cast<Eigen::Index>(s) * d, d);
    auto ou = out.segment(static_cast<Eigen::Index>(s) * d, d);
    const std::vector<int>& bucket = data.user_positions(u);
    const double floor = std::max<size_t>(bucket.size(), 1) * m.hyper.reg_lambda;
    ou = (floor + damping) * vu;
    for (int pos : bucket) {
      const auto q = m.item_emb.row(data.at(pos).item);
      ou.noalias() += q.dot(vu) * q.transpose();
    }
  }
  return out;
}

struct BlockId {
  enum class Kind { user, item };
  Kind kind = Kind::user;
  int index = 0;
  auto operator<=>(const BlockId&) const = default;
};

struct InfluenceEstimate {
  Scope scope = Scope::full;
  std::map<BlockId, Vector> deltas;  // additive row updates, applied by apply_update
  double cg_residual = 0.0;          // worst relative residual across solves
  int cg_iterations = 0;             // largest iteration count across solves
  bool cg_converged = true;
  double damping = 0.0;
  double compensation_norm = 0.0;
  int degraded_points = 0;  // CIF points that fell back to plain removal
};

inline std::vector<int> users_of_positions(const InteractionSet& train, const std::vector<int>& positions) {
  std::vector<int> users;
  users.reserve(positions.size());
  for (int pos : positions) users.push_back(train.at(pos).user);
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  return users;
}

struct Surrogate {
  double rating = 0.0;
  bool from_item_average = false;
};

// Replacement rating for the interaction at `position`: the user's mean rating
// over train minus the removed set, falling back to the item's mean there.
// Returns nothing when neither side has remaining ratings; the caller then
// treats the point as a plain removal.
inline std::optional<Surrogate> build_surrogate(const InteractionSet& train,
                                                const std::unordered_set<int>& removed_positions,
                                                int position) {
  const Interaction& z = train.at(position);
  double sum = 0.0;
  int count = 0;
  for (int pos : train.user_positions(z.user))
    if (!removed_positions.count(pos)) {
      sum += train.at(pos).rating;
      ++count;
    }
  if (count > 0) return Surrogate{sum / count, false};
  sum = 0.0;
  for (int pos : train.item_positions(z.item))
    if (!removed_positions.count(pos)) {
      sum += train.at(pos).rating;
      ++count;
    }
  if (count > 0) return Surrogate{sum / count, true};
  return std::nullopt;
}

inline std::vector<std::optional<Surrogate>> build_surrogates(const InteractionSet& train,
                                                              const std::vector<int>& positions) {
  const std::unordered_set<int> removed(positions.begin(), positions.end());
  std::vector<std::optional<Surrogate>> out;
  out.reserve(positions.size());
  for (int pos : positions) out.push_back(build_surrogate(train, removed, pos));
  return out;
}

namespace detail {

inline void check_positions(const InteractionSet& train, const std::vector<int>& positions) {
  std::unordered_set<int> seen;
  for (int pos : positions) {
    if (pos < 0 || pos >= train.size())
      throw std::out_of_range("influence: removed position out of range: " + std::to_string(pos));
    if (!seen.insert(pos).second)
      throw std::invalid_argument("influence: removed position listed twice: " + std::to_string(pos));
  }
}

struct SelectedRhs {
  std::vector<int> users;
  std::vector<Vector> rhs;  // aligned with users
};

inline void merge_cg_stats(InfluenceEstimate& est, const CgResult& cg) {
  est.cg_residual = std::max(est.cg_residual, cg.residual);
  est.cg_iterations = std::max(est.cg_iterations, cg.iterations);
  est.cg_converged = est.cg_converged && cg.converged;
}

}  // namespace detail

// One-step removal estimate: solves (H + damping I) x = sum of removed-point
// gradients, with H taken on train minus the removed set (the objective that
// remains after the removal). In selected_users scope the solve decomposes
// into independent per-user block solves. The resulting deltas are added to
// the parameters by apply_update.
inline InfluenceEstimate influence_if(const ModelParams& m, const InteractionSet& train,
                                      const std::vector<int>& removed_positions, Scope scope,
                                      const SolverConfig& cfg) {
  detail::check_positions(train, removed_positions);
  const int d = m.dim();
  const InteractionSet remaining = remove_interactions(train, removed_positions);
  InfluenceEstimate est;
  est.scope = scope;
  est.damping = cfg.damping;

  if (scope == Scope::selected_users) {
    const std::vector<int> users = users_of_positions(train, removed_positions);
    std::map<int, Vector> rhs_by_user;
    for (int pos : removed_positions) {
      const Interaction& z = train.at(pos);
      const PointGrad g = grad_point(m, z);
      auto [it, fresh] = rhs_by_user.try_emplace(z.user, Vector::Zero(d));
      it->second += g.user_grad;
      (void)fresh;
    }
    for (int u : users) {
      const std::vector<int> one{u};
      const auto op = [&](const Vector& x) { return hvp_selected(m, remaining, one, x, cfg.damping); };
      const CgResult cg = cg_solve(op, rhs_by_user.at(u), cfg.cg_tol, cfg.cg_max_iter);
      detail::merge_cg_stats(est, cg);
      est.deltas[{BlockId::Kind::user, u}] = cg.x;
    }
    return est;
  }

  const int nu = m.num_users();
  Vector rhs = Vector::Zero(static_cast<Eigen::Index>(nu + m.num_items()) * d);
  for (int pos : removed_positions) {
    const Interaction& z = train.at(pos);
    const PointGrad g = grad_point(m, z);
    rhs.segment(static_cast<Eigen::Index>(z.user) * d, d) += g.user_grad;
    rhs.segment(static_cast<Eigen::Index>(nu + z.item) * d, d) += g.item_grad;
  }
  const auto op = [&](const Vector& x) { return hvp_full(m, remaining, x, cfg.damping); };
  const CgResult cg = cg_solve(op, rhs, cfg.cg_tol, cfg.cg_max_iter);
  detail::merge_cg_stats(est, cg);
  for (int u = 0; u < nu; ++u)
    est.deltas[{BlockId::Kind::user, u}] = cg.x.segment(static_cast<Eigen::Index>(u) * d, d);
  for (int i = 0; i < m.num_items(); ++i)
    est.deltas[{BlockId::Kind::item, i}] =
        cg.x.segment(static_cast<Eigen::Index>(nu + i) * d, d);
  return est;
}

// Replacement estimate: the right-hand side is the gradient difference between
// each removed point and its surrogate (points without a surrogate degrade to
// plain removal gradients), minus the full-training-set gradient when
// compensation is on. H is taken on the full train set: the surrogate keeps
// every (user,item) pair, so the replacement objective has the same Hessian.
inline InfluenceEstimate influence_cif(const ModelParams& m, const InteractionSet& train,
                                       const std::vector<int>& removed_positions,
                                       const std::vector<std::optional<Surrogate>>& surrogates,
                                       Scope scope, const SolverConfig& cfg) {
  detail::check_positions(train, removed_positions);
  if (surrogates.size() != removed_positions.size())
    throw std::invalid_argument("influence_cif: surrogate list does not align with removed positions");
  const int d = m.dim();
  InfluenceEstimate est;
  est.scope = scope;
  est.damping = cfg.damping;

  const auto point_rhs = [&](size_t k, Vector& user_part, Vector& item_part) {
    const Interaction& z = train.at(removed_positions[k]);
    if (surrogates[k].has_value()) {
      // grad(z) - grad(z_surrogate): regularization cancels, leaving the
      // rating difference against both rows.
      const double diff = surrogates[k]->rating - z.rating;
      user_part = diff * m.item_emb.row(z.item).transpose();
      item_part = diff * m.user_emb.row(z.user).transpose();
    } else {
      const PointGrad g = grad_point(m, z);
      user_part = g.user_grad;
      item_part = g.item_grad;
      ++est.degraded_points;
    }
  };

  if (scope == Scope::selected_users) {
    const std::vector<int> users = users_of_positions(train, removed_positions);
    std::map<int, Vector> rhs_by_user;
    for (int u : users) rhs_by_user.emplace(u, Vector::Zero(d));
    Vector user_part, item_part;
    for (size_t k = 0; k < removed_positions.size(); ++k) {
      const Interaction& z = train.at(removed_positions[k]);
      point_rhs(k, user_part, item_part);
      rhs_by_user.at(z.user) += user_part;
    }
    if (cfg.use_compensation) {
      double comp_sq = 0.0;
      for (int u : users) {
        Vector g = Vector::Zero(d);
        for (int pos : train.user_positions(u)) g += grad_point(m, train.at(pos)).user_grad;
        rhs_by_user.at(u) -= g;
        comp_sq += g.squaredNorm();
      }
      est.compensation_norm = std::sqrt(comp_sq);
    }
    for (int u : users) {
      const std::vector<int> one{u};
      const auto op = [&](const Vector& x) { return hvp_selected(m, train, one, x, cfg.damping); };
      const CgResult cg = cg_solve(op, rhs_by_user.at(u), cfg.cg_tol, cfg.cg_max_iter);
      detail::merge_cg_stats(est, cg);
      est.deltas[{BlockId::Kind::user, u}] = cg.x;
    }
    return est;
  }

  const int nu = m.num_users();
  Vector rhs = Vector::Zero(static_cast<Eigen::Index>(nu + m.num_items()) * d);
  Vector user_part, item_part;
  for (size_t k = 0; k < removed_positions.size(); ++k) {
    const Interaction& z = train.at(removed_positions[k]);
    point_rhs(k, user_part, item_part);
    rhs.segment(static_cast<Eigen::Index>(z.user) * d, d) += user_part;
    rhs.segment(static_cast<Eigen::Index>(nu + z.item) * d, d) += item_part;
  }
  if (cfg.use_compensation) {
    Vector g = Vector::Zero(rhs.size());
    for (const Interaction& z : train.interactions()) {
      const PointGrad pg = grad_point(m, z);
      g.segment(static_cast<Eigen::Index>(z.user) * d, d) += pg.user_grad;
      g.segment(static_cast<Eigen::Index>(nu + z.item) * d, d) += pg.item_grad;
    }
    rhs -= g;
    est.compensation_norm = g.norm();
  }
  const auto op = [&](const Vector& x) { return hvp_full(m, train, x, cfg.damping); };
  const CgResult cg = cg_solve(op, rhs, cfg.cg_tol, cfg.cg_max_iter);
  detail::merge_cg_stats(est, cg);
  for (int u = 0; u < nu; ++u)
    est.deltas[{BlockId::Kind::user, u}] = cg.x.segment(static_cast<Eigen::Index>(u) * d, d);
  for (int i = 0; i < m.num_items(); ++i)
    est.deltas[{BlockId::Kind::item, i}] =
        cg.x.segment(static_cast<Eigen::Index>(nu + i) * d, d);
  return est;
}

// Adds the estimated deltas to their rows and returns the updated copy. Rows
// without a delta are byte-identical to the input.
inline ModelParams apply_update(const ModelParams& m, const InfluenceEstimate& est) {
  ModelParams out = m;
  for (const auto& [blk, dv] : est.deltas) {
    if (dv.size() != m.dim()) throw std::invalid_argument("apply_update: delta dimension mismatch");
    if (blk.kind == BlockId::Kind::user) {
      if (blk.index < 0 || blk.index >= m.num_users())
        throw std::out_of_range("apply_update: user row out of range");
      out.user_emb.row(blk.index) += dv.transpose();
    } else {
      if (blk.index < 0 || blk.index >= m.num_items())
        throw std::out_of_range("apply_update: item row out of range");
      out.item_emb.row(blk.index) += dv.transpose();
    }
  }
  return out;
}

}  // namespace recunlearn
