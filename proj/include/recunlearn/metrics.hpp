#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"
#include "model.hpp"

namespace recunlearn {

struct RankedList {
  std::vector<int> items;  // descending score, ties by ascending item id
  bool truncated = false;  // fewer than k candidates existed
};

// Top-k recommendation list for one user: every item the user has not rated in
// `train` is scored and the best k are returned.
inline RankedList rank_items(const ModelParams& m, const InteractionSet& train, int user, int k) {
  if (k < 1) throw std::invalid_argument("rank_items: k must be >= 1");
  if (user < 0 || user >= m.num_users()) throw std::out_of_range("rank_items: user out of range");
  if (train.num_items() != m.num_items() || train.num_users() != m.num_users())
    throw std::invalid_argument("rank_items: train does not match model shape");

  std::unordered_set<int> seen;
  for (int pos : train.user_positions(user)) seen.insert(train.at(pos).item);

  std::vector<std::pair<double, int>> scored;
  scored.reserve(static_cast<size_t>(m.num_items()));
  for (int i = 0; i < m.num_items(); ++i) {
    if (seen.count(i)) continue;
    scored.emplace_back(predict(m, user, i), i);
  }
  const auto better = [](const std::pair<double, int>& a, const std::pair<double, int>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  };
  RankedList out;
  if (static_cast<int>(scored.size()) <= k) {
    std::sort(scored.begin(), scored.end(), better);
    out.truncated = static_cast<int>(scored.size()) < k;
  } else {
    std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), better);
    scored.resize(static_cast<size_t>(k));
  }
  out.items.reserve(scored.size());
  for (const auto& [s, i] : scored) out.items.push_back(i);
  return out;
}

// Binary-relevance NDCG: DCG over the top-k positions divided by the ideal
// DCG. Zero when the relevant set is empty.
inline double ndcg_at_k(const std::vector<int>& ranked, const std::unordered_set<int>& relevant, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  if (relevant.empty()) return 0.0;
  const int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  double dcg = 0.0;
  for (int pos = 0; pos < depth; ++pos)
    if (relevant.count(ranked[static_cast<size_t>(pos)])) dcg += 1.0 / std::log2(pos + 2.0);
  const int ideal = std::min<int>(k, static_cast<int>(relevant.size()));
  double idcg = 0.0;
  for (int pos = 0; pos < ideal; ++pos) idcg += 1.0 / std::log2(pos + 2.0);
  return dcg / idcg;
}

inline int hits_at_k(const std::vector<int>& ranked, const std::unordered_set<int>& relevant, int k) {
  const int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  int hits = 0;
  for (int pos = 0; pos < depth; ++pos)
    if (relevant.count(ranked[static_cast<size_t>(pos)])) ++hits;
  return hits;
}

inline double hit_rate_at_k(const std::vector<int>& ranked, const std::unordered_set<int>& relevant, int k) {
  return hits_at_k(ranked, relevant, k) > 0 ? 1.0 : 0.0;
}

// hits / k, by definition, also when fewer than k candidates existed.
inline double precision_at_k(const std::vector<int>& ranked, const std::unordered_set<int>& relevant, int k) {
  if (k < 1) throw std::invalid_argument("precision_at_k: k must be >= 1");
  return static_cast<double>(hits_at_k(ranked, relevant, k)) / k;
}

inline double recall_at_k(const std::vector<int>& ranked, const std::unordered_set<int>& relevant, int k) {
  if (relevant.empty()) return 0.0;
  return static_cast<double>(hits_at_k(ranked, relevant, k)) /
         static_cast<double>(relevant.size());
}

struct RankingReport {
  std::vector<int> ks;
  std::vector<double> ndcg, hit_rate, precision, recall;  // means, aligned with ks
  int users_evaluated = 0;
};

// Mean ranking metrics over the given users; users without test interactions
// are skipped. Relevance is the user's test-set items; candidates exclude the
// user's train-set items.
inline RankingReport evaluate_ranking(const ModelParams& m, const InteractionSet& train,
                                      const InteractionSet& test, const std::vector<int>& users,
                                      const std::vector<int>& ks) {
  if (ks.empty()) throw std::invalid_argument("evaluate_ranking: no cutoffs given");
  RankingReport rep;
  rep.ks = ks;
  const int max_k = *std::max_element(ks.begin(), ks.end());
  rep.ndcg.assign(ks.size(), 0.0);
  rep.hit_rate.assign(ks.size(), 0.0);
  rep.precision.assign(ks.size(), 0.0);
  rep.recall.assign(ks.size(), 0.0);
  for (int u : users) {
    std::unordered_set<int> relevant;
    for (int pos : test.user_positions(u)) relevant.insert(test.at(pos).item);
    if (relevant.empty()) continue;
    const RankedList ranked = rank_items(m, train, u, max_k);
    for (size_t j = 0; j < ks.size(); ++j) {
      rep.ndcg[j] += ndcg_at_k(ranked.items, relevant, ks[j]);
      rep.hit_rate[j] += hit_rate_at_k(ranked.items, relevant, ks[j]);
      rep.precision[j] += precision_at_k(ranked.items, relevant, ks[j]);
      rep.recall[j] += recall_at_k(ranked.items, relevant, ks[j]);
    }
    ++rep.users_evaluated;
  }
  if (rep.users_evaluated > 0)
    for (size_t j = 0; j < ks.size(); ++j) {
      rep.ndcg[j] /= rep.users_evaluated;
      rep.hit_rate[j] /= rep.users_evaluated;
      rep.precision[j] /= rep.users_evaluated;
      rep.recall[j] /= rep.users_evaluated;
    }
  return rep;
}

// Mann-Whitney AUC via the rank-sum statistic; tied scores count one half.
inline double mann_whitney_auc(const std::vector<double>& positive, const std::vector<double>& negative) {
  if (positive.empty() || negative.empty())
    throw std::invalid_argument("mann_whitney_auc: both classes must be non-empty");
  struct Entry {
    double score;
    int is_positive;
  };
  std::vector<Entry> all;
  all.reserve(positive.size() + negative.size());
  for (double s : positive) all.push_back({s, 1});
  for (double s : negative) all.push_back({s, 0});
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });

  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < all.size()) {
    size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (size_t t = i; t < j; ++t)
      if (all[t].is_positive) rank_sum_pos += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(positive.size());
  const double nn = static_cast<double>(negative.size());
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Linear centered kernel alignment between two representations with matched
// rows: ||Y'X||_F^2 / (||X'X||_F ||Y'Y||_F) after column centering. Invariant
// to orthogonal transforms and isotropic scaling; 0 when either representation
// is constant.
inline double linear_cka(Matrix x, Matrix y) {
  if (x.rows() != y.rows()) throw std::invalid_argument("linear_cka: row count mismatch");
  if (x.rows() == 0) return 0.0;
  x.rowwise() -= x.colwise().mean();
  y.rowwise() -= y.colwise().mean();
  const double num = (y.transpose() * x).squaredNorm();
  const double den = std::sqrt((x.transpose() * x).squaredNorm()) *
                     std::sqrt((y.transpose() * y).squaredNorm());
  if (den == 0.0) return 0.0;
  return num / den;
}

enum class EmbBlock { ue_unlearn, ue_remain, item_emb };

inline const char* emb_block_name(EmbBlock b) {
  switch (b) {
    case EmbBlock::ue_unlearn: return "UE_unlearn";
    case EmbBlock::ue_remain: return "UE_remain";
    case EmbBlock::item_emb: return "item_emb";
  }
  return "?";
}

// Rows of the requested embedding block: target users' rows, the remaining
// users' rows, or the whole item table. target_users must be sorted.
inline Matrix extract_block(const ModelParams& m, EmbBlock block, const std::vector<int>& target_users) {
  for (int u : target_users)
    if (u < 0 || u >= m.num_users()) throw std::out_of_range("extract_block: target user out of range");
  if (block == EmbBlock::item_emb) return m.item_emb;
  std::vector<char> is_target(static_cast<size_t>(m.num_users()), 0);
  for (int u : target_users) is_target[static_cast<size_t>(u)] = 1;
  const bool want_target = block == EmbBlock::ue_unlearn;
  std::vector<int> rows;
  for (int u = 0; u < m.num_users(); ++u)
    if ((is_target[static_cast<size_t>(u)] != 0) == want_target) rows.push_back(u);
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.dim());
  for (size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.user_emb.row(rows[r]);
  return out;
}

struct RelativeCkaResult {
  double ratio = 0.0;            // numerator_mean / baseline_mean
  double numerator_mean = 0.0;   // mean CKA(original_i, unlearned)
  double baseline_mean = 0.0;    // mean pairwise CKA among the originals
  std::vector<double> per_original;
};

// Similarity of the unlearned model's block to independently trained
// originals, normalized by how similar the originals are to each other.
// Needs at least two originals for the baseline.
inline RelativeCkaResult relative_cka(const std::vector<ModelParams>& originals,
                                      const ModelParams& unlearned, EmbBlock block,
                                      const std::vector<int>& target_users) {
  if (originals.size() < 2)
    throw std::invalid_argument("relative_cka: need at least 2 original models for the baseline");
  const Matrix unl = extract_block(unlearned, block, target_users);
  std::vector<Matrix> orig;
  orig.reserve(originals.size());
  for (const ModelParams& m : originals) orig.push_back(extract_block(m, block, target_users));

  RelativeCkaResult out;
  for (const Matrix& o : orig) {
    const double c = linear_cka(o, unl);
    out.per_original.push_back(c);
    out.numerator_mean += c;
  }
  out.numerator_mean /= static_cast<double>(orig.size());
  int pairs = 0;
  for (size_t a = 0; a < orig.size(); ++a)
    for (size_t b = a + 1; b < orig.size(); ++b) {
      out.baseline_mean += linear_cka(orig[a], orig[b]);
      ++pairs;
    }
  out.baseline_mean /= pairs;
  if (out.baseline_mean == 0.0)
    throw std::runtime_error("relative_cka: degenerate baseline (originals share no structure)");
  out.ratio = out.numerator_mean / out.baseline_mean;
  return out;
}

}  // namespace recunlearn
