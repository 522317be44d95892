#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"
#include "metrics.hpp"
#include "model.hpp"

namespace recunlearn {

// Attack feature vector for one user under one model: the user's embedding row
// concatenated with the mean embedding of the items the user interacted with
// in the reference set. Length 2 * embed_dim.
inline Vector extract_features(const ModelParams& m, const InteractionSet& reference, int user) {
  if (user < 0 || user >= m.num_users()) throw std::out_of_range("extract_features: user out of range");
  if (reference.num_users() != m.num_users() || reference.num_items() != m.num_items())
    throw std::invalid_argument("extract_features: reference set does not match model shape");
  const std::vector<int>& bucket = reference.user_positions(user);
  if (bucket.empty())
    throw std::invalid_argument("extract_features: user " + std::to_string(user) +
                                " has no interactions in the reference set");
  const int d = m.dim();
  Vector out(2 * d);
  out.head(d) = m.user_emb.row(user).transpose();
  Vector mean_item = Vector::Zero(d);
  for (int pos : bucket) mean_item += m.item_emb.row(reference.at(pos).item).transpose();
  out.tail(d) = mean_item / static_cast<double>(bucket.size());
  return out;
}

enum class SampleOrigin { remaining_train, unlearned, test_only };

inline const char* sample_origin_name(SampleOrigin o) {
  switch (o) {
    case SampleOrigin::remaining_train: return "remaining_train";
    case SampleOrigin::unlearned: return "unlearned";
    case SampleOrigin::test_only: return "test_only";
  }
  return "?";
}

struct MioSample {
  Vector features;
  int user = 0;
  SampleOrigin origin = SampleOrigin::remaining_train;
  bool member = false;  // always origin == remaining_train
};

// Attack set for one evaluated model. Positives are users that keep training
// interactions after the removal; negatives are the unlearned users (features
// from their original training interactions) plus users that only ever
// appeared in the test set. Classes are balanced by seeded downsampling of the
// larger side.
inline std::vector<MioSample> build_attack_set(const ModelParams& evaluated,
                                               const InteractionSet& train,
                                               const InteractionSet& test,
                                               const std::vector<int>& removed_positions,
                                               uint64_t seed) {
  if (test.num_users() != train.num_users() || test.num_items() != train.num_items())
    throw std::invalid_argument("build_attack_set: train/test entity counts differ");
  const InteractionSet remaining = remove_interactions(train, removed_positions);

  std::vector<MioSample> positives, negatives;
  for (int u = 0; u < train.num_users(); ++u) {
    const int train_deg = train.user_degree(u);
    const int remain_deg = remaining.user_degree(u);
    MioSample s;
    s.user = u;
    if (remain_deg > 0) {
      s.origin = SampleOrigin::remaining_train;
      s.member = true;
      s.features = extract_features(evaluated, remaining, u);
      positives.push_back(std::move(s));
    } else if (train_deg > 0) {
      s.origin = SampleOrigin::unlearned;
      s.member = false;
      s.features = extract_features(evaluated, train, u);
      negatives.push_back(std::move(s));
    } else if (test.user_degree(u) > 0) {
      s.origin = SampleOrigin::test_only;
      s.member = false;
      s.features = extract_features(evaluated, test, u);
      negatives.push_back(std::move(s));
    }
  }
  if (positives.empty() || negatives.empty())
    throw std::runtime_error("build_attack_set: need users on both sides of the membership boundary");

  std::mt19937_64 rng(seed);
  auto downsample = [&rng](std::vector<MioSample>& v, size_t target) {
    std::shuffle(v.begin(), v.end(), rng);
    v.resize(target);
    std::sort(v.begin(), v.end(), [](const MioSample& a, const MioSample& b) { return a.user < b.user; });
  };
  if (positives.size() > negatives.size())
    downsample(positives, negatives.size());
  else if (negatives.size() > positives.size())
    downsample(negatives, positives.size());

  std::vector<MioSample> out;
  out.reserve(positives.size() + negatives.size());
  for (MioSample& s : positives) out.push_back(std::move(s));
  for (MioSample& s : negatives) out.push_back(std::move(s));
  std::sort(out.begin(), out.end(), [](const MioSample& a, const MioSample& b) { return a.user < b.user; });
  return out;
}

// Disjoint attack train/eval split, stratified by origin so the labels stay
// balanced and both negative origins remain represented on the held-out side.
inline std::pair<std::vector<MioSample>, std::vector<MioSample>> split_attack_set(
    const std::vector<MioSample>& samples, double eval_fraction, uint64_t seed) {
  if (!(eval_fraction >= 0.0 && eval_fraction < 1.0))
    throw std::invalid_argument("split_attack_set: eval_fraction outside [0,1)");
  std::mt19937_64 rng(seed);
  std::vector<MioSample> fit, eval;
  for (SampleOrigin origin :
       {SampleOrigin::remaining_train, SampleOrigin::unlearned, SampleOrigin::test_only}) {
    std::vector<int> idx;
    for (int k = 0; k < static_cast<int>(samples.size()); ++k)
      if (samples[static_cast<size_t>(k)].origin == origin) idx.push_back(k);
    std::shuffle(idx.begin(), idx.end(), rng);
    const int n_eval = static_cast<int>(std::llround(eval_fraction * static_cast<double>(idx.size())));
    for (int k = 0; k < static_cast<int>(idx.size()); ++k)
      (k < n_eval ? eval : fit).push_back(samples[static_cast<size_t>(idx[static_cast<size_t>(k)])]);
  }
  return {std::move(fit), std::move(eval)};
}

struct MioTrainConfig {
  int epochs = 100;
  double learning_rate = 0.001;
  uint64_t seed = 0;
};

// Attack classifier: a fixed 2d -> 64 -> 16 -> 4 -> 2 multilayer perceptron
// with ReLU hidden activations and a softmax head.
class MioModel {
 public:
  static constexpr int kHidden1 = 64;
  static constexpr int kHidden2 = 16;
  static constexpr int kHidden3 = 4;
  static constexpr int kClasses = 2;

  MioModel() = default;

  explicit MioModel(int input_dim, uint64_t seed) : input_dim_(input_dim) {
    if (input_dim < 1) throw std::invalid_argument("MioModel: input_dim must be >= 1");
    std::mt19937_64 rng(seed);
    const auto he = [&rng](Matrix& w, int rows, int cols) {
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / cols));
      w.resize(rows, cols);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) w(r, c) = dist(rng);
    };
    he(w1_, kHidden1, input_dim);
    he(w2_, kHidden2, kHidden1);
    he(w3_, kHidden3, kHidden2);
    he(w4_, kClasses, kHidden3);
    b1_ = Vector::Zero(kHidden1);
    b2_ = Vector::Zero(kHidden2);
    b3_ = Vector::Zero(kHidden3);
    b4_ = Vector::Zero(kClasses);
  }

  int input_dim() const { return input_dim_; }

  // Softmax probability that the user is a member (class 1).
  double score(const Vector& features) const {
    if (features.size() != input_dim_) throw std::invalid_argument("MioModel: feature length mismatch");
    Vector a1, a2, a3, logits;
    forward(features, a1, a2, a3, logits);
    const double shift = logits.maxCoeff();
    const double e0 = std::exp(logits(0) - shift);
    const double e1 = std::exp(logits(1) - shift);
    return e1 / (e0 + e1);
  }

  // One SGD step on the cross-entropy of a single sample; returns the loss.
  double sgd_step(const Vector& features, bool member, double lr) {
    Vector a1, a2, a3, logits;
    forward(features, a1, a2, a3, logits);
    const double shift = logits.maxCoeff();
    Vector p(2);
    p(0) = std::exp(logits(0) - shift);
    p(1) = std::exp(logits(1) - shift);
    p /= p.sum();
    const int label = member ? 1 : 0;
    const double loss = -std::log(std::max(p(label), 1e-300));

    Vector d4 = p;
    d4(label) -= 1.0;
    const Vector d3 = relu_backward(w4_.transpose() * d4, a3);
    const Vector d2 = relu_backward(w3_.transpose() * d3, a2);
    const Vector d1 = relu_backward(w2_.transpose() * d2, a1);

    w4_.noalias() -= lr * d4 * a3.transpose();
    b4_ -= lr * d4;
    w3_.noalias() -= lr * d3 * a2.transpose();
    b3_ -= lr * d3;
    w2_.noalias() -= lr * d2 * a1.transpose();
    b2_ -= lr * d2;
    w1_.noalias() -= lr * d1 * features.transpose();
    b1_ -= lr * d1;
    return loss;
  }

 private:
  void forward(const Vector& x, Vector& a1, Vector& a2, Vector& a3, Vector& logits) const {
    a1 = (w1_ * x + b1_).cwiseMax(0.0);
    a2 = (w2_ * a1 + b2_).cwiseMax(0.0);
    a3 = (w3_ * a2 + b3_).cwiseMax(0.0);
    logits = w4_ * a3 + b4_;
  }

  static Vector relu_backward(const Vector& upstream, const Vector& activated) {
    Vector out = upstream;
    for (Eigen::Index k = 0; k < out.size(); ++k)
      if (activated(k) <= 0.0) out(k) = 0.0;
    return out;
  }

  int input_dim_ = 0;
  Matrix w1_, w2_, w3_, w4_;
  Vector b1_, b2_, b3_, b4_;
};

struct MioTrainResult {
  MioModel model;
  std::vector<double> epoch_losses;
};

inline MioTrainResult train_mio(const std::vector<MioSample>& samples, const MioTrainConfig& cfg) {
  if (samples.empty()) throw std::invalid_argument("train_mio: empty sample set");
  if (cfg.epochs < 1) throw std::invalid_argument("train_mio: epochs must be >= 1");
  MioTrainResult out;
  out.model = MioModel(static_cast<int>(samples.front().features.size()),
                       derive_seed(cfg.seed, "mio_init"));
  std::mt19937_64 order_rng(derive_seed(cfg.seed, "mio_order"));
  std::vector<int> perm(samples.size());
  for (int k = 0; k < static_cast<int>(samples.size()); ++k) perm[static_cast<size_t>(k)] = k;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), order_rng);
    double loss = 0.0;
    for (int k : perm) {
      const MioSample& s = samples[static_cast<size_t>(k)];
      loss += out.model.sgd_step(s.features, s.member, cfg.learning_rate);
    }
    out.epoch_losses.push_back(loss / static_cast<double>(samples.size()));
  }
  return out;
}

struct MioReport {
  double accuracy = 0.0;  // threshold 0.5 on the member probability
  double auc = 0.0;       // Mann-Whitney, ties one half
  int n_member = 0;
  int n_non_member = 0;
};

inline MioReport completeness_report(const MioModel& model, const std::vector<MioSample>& samples) {
  std::vector<double> pos, neg;
  int correct = 0;
  for (const MioSample& s : samples) {
    const double score = model.score(s.features);
    (s.member ? pos : neg).push_back(score);
    if ((score > 0.5) == s.member) ++correct;
  }
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("completeness_report: need samples from both classes");
  MioReport rep;
  rep.n_member = static_cast<int>(pos.size());
  rep.n_non_member = static_cast<int>(neg.size());
  rep.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
  rep.auc = mann_whitney_auc(pos, neg);
  return rep;
}

// AUC between two origin groups (e.g. unlearned-origin vs test-only users),
// useful on the held-out side of the attack split.
inline double origin_auc(const MioModel& model, const std::vector<MioSample>& samples,
                         SampleOrigin positive, SampleOrigin negative) {
  std::vector<double> pos, neg;
  for (const MioSample& s : samples) {
    if (s.origin == positive) pos.push_back(model.score(s.features));
    else if (s.origin == negative) neg.push_back(model.score(s.features));
  }
  return mann_whitney_auc(pos, neg);
}

inline void write_attack_csv(const std::vector<MioSample>& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_attack_csv: cannot open '" + path + "'");
  const int dim = samples.empty() ? 0 : static_cast<int>(samples.front().features.size());
  out << "user,origin,label";
  for (int k = 0; k < dim; ++k) out << ",f" << k;
  out << '\n';
  char buf[64];
  for (const MioSample& s : samples) {
    out << s.user << ',' << sample_origin_name(s.origin) << ',' << (s.member ? 1 : 0);
    for (Eigen::Index k = 0; k < s.features.size(); ++k) {
      std::snprintf(buf, sizeof(buf), "%.17g", s.features(k));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_attack_csv: write failed for '" + path + "'");
}

}  // namespace recunlearn
