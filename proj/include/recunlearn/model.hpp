#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "core.hpp"
#include "dataset.hpp"

namespace recunlearn {

struct ModelHyper {
  int embed_dim = 64;
  double learning_rate = 0.001;
  double reg_lambda = 0.01;
  int epochs = 50;
  double init_std = 0.01;
  int batch_size = 256;
  uint64_t seed = 0;
};

struct ModelParams {
  Matrix user_emb;  // num_users x embed_dim
  Matrix item_emb;  // num_items x embed_dim
  ModelHyper hyper;

  int num_users() const { return static_cast<int>(user_emb.rows()); }
  int num_items() const { return static_cast<int>(item_emb.rows()); }
  int dim() const { return static_cast<int>(user_emb.cols()); }
};

// Gaussian init N(0, init_std^2), filled row by row (users first, then items)
// from a single mt19937_64 stream so the layout is reproducible.
inline ModelParams init_params(int num_users, int num_items, const ModelHyper& hyper) {
  if (hyper.embed_dim < 1) throw std::invalid_argument("init_params: embed_dim must be >= 1");
  if (hyper.init_std < 0.0) throw std::invalid_argument("init_params: negative init_std");
  if (num_users < 0 || num_items < 0) throw std::invalid_argument("init_params: negative entity count");
  ModelParams m;
  m.hyper = hyper;
  m.user_emb.resize(num_users, hyper.embed_dim);
  m.item_emb.resize(num_items, hyper.embed_dim);
  std::mt19937_64 rng(hyper.seed);
  std::normal_distribution<double> dist(0.0, hyper.init_std);
  for (int u = 0; u < num_users; ++u)
    for (int k = 0; k < hyper.embed_dim; ++k) m.user_emb(u, k) = dist(rng);
  for (int i = 0; i < num_items; ++i)
    for (int k = 0; k < hyper.embed_dim; ++k) m.item_emb(i, k) = dist(rng);
  return m;
}

inline double predict(const ModelParams& m, int user, int item) {
  if (user < 0 || user >= m.num_users()) throw std::out_of_range("predict: user out of range");
  if (item < 0 || item >= m.num_items()) throw std::out_of_range("predict: item out of range");
  return m.user_emb.row(user).dot(m.item_emb.row(item));
}

// Squared error plus L2 on the two touched rows, counted per interaction:
//   1/2 (p.q - r)^2 + lambda/2 (|p|^2 + |q|^2)
inline double point_loss(const ModelParams& m, const Interaction& z) {
  const double e = predict(m, z.user, z.item) - z.rating;
  return 0.5 * e * e + 0.5 * m.hyper.reg_lambda * (m.user_emb.row(z.user).squaredNorm() +
                                                   m.item_emb.row(z.item).squaredNorm());
}

inline double total_loss(const ModelParams& m, const InteractionSet& data) {
  double acc = 0.0;
  for (const Interaction& z : data.interactions()) acc += point_loss(m, z);
  return acc;
}

struct PointGrad {
  Vector user_grad;  // d point_loss / d user row
  Vector item_grad;
};

inline PointGrad grad_point(const ModelParams& m, const Interaction& z) {
  const double e = predict(m, z.user, z.item) - z.rating;
  PointGrad g;
  g.user_grad = e * m.item_emb.row(z.item).transpose() +
                m.hyper.reg_lambda * m.user_emb.row(z.user).transpose();
  g.item_grad = e * m.user_emb.row(z.user).transpose() +
                m.hyper.reg_lambda * m.item_emb.row(z.item).transpose();
  return g;
}

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_losses;
};

// Mini-batch SGD on the summed objective. Gradients are accumulated over the
// batch at the pre-step parameters and applied once, in first-touch order, so
// an epoch is reproducible and batch accumulation could be parallelized
// without changing the result. Training on an empty set returns init_params
// untouched.
inline TrainResult train(const InteractionSet& data, const ModelHyper& hyper) {
  if (hyper.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (hyper.epochs < 0) throw std::invalid_argument("train: negative epochs");
  TrainResult out;
  out.params = init_params(data.num_users(), data.num_items(), hyper);
  ModelParams& m = out.params;
  if (data.size() == 0 || hyper.epochs == 0) return out;

  std::mt19937_64 order_rng(derive_seed(hyper.seed, "epoch_order"));
  std::vector<int> perm(static_cast<size_t>(data.size()));
  for (int p = 0; p < data.size(); ++p) perm[static_cast<size_t>(p)] = p;

  std::vector<int> touched_users, touched_items;
  std::unordered_map<int, int> user_slot, item_slot;
  std::vector<Vector> user_acc, item_acc;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(perm.begin(), perm.end(), order_rng);
    for (int start = 0; start < data.size(); start += hyper.batch_size) {
      const int stop = std::min(start + hyper.batch_size, data.size());
      touched_users.clear();
      touched_items.clear();
      user_slot.clear();
      item_slot.clear();
      for (int k = start; k < stop; ++k) {
        const Interaction& z = data.at(perm[static_cast<size_t>(k)]);
        const PointGrad g = grad_point(m, z);
        auto us = user_slot.find(z.user);
        if (us == user_slot.end()) {
          user_slot.emplace(z.user, static_cast<int>(touched_users.size()));
          touched_users.push_back(z.user);
          if (user_acc.size() < touched_users.size()) user_acc.emplace_back();
          user_acc[touched_users.size() - 1] = g.user_grad;
        } else {
          user_acc[static_cast<size_t>(us->second)] += g.user_grad;
        }
        auto is = item_slot.find(z.item);
        if (is == item_slot.end()) {
          item_slot.emplace(z.item, static_cast<int>(touched_items.size()));
          touched_items.push_back(z.item);
          if (item_acc.size() < touched_items.size()) item_acc.emplace_back();
          item_acc[touched_items.size() - 1] = g.item_grad;
        } else {
          item_acc[static_cast<size_t>(is->second)] += g.item_grad;
        }
      }
      for (size_t s = 0; s < touched_users.size(); ++s)
        m.user_emb.row(touched_users[s]) -= hyper.learning_rate * user_acc[s].transpose();
      for (size_t s = 0; s < touched_items.size(); ++s)
        m.item_emb.row(touched_items[s]) -= hyper.learning_rate * item_acc[s].transpose();
    }
    const double loss = total_loss(m, data);
    out.epoch_losses.push_back(loss);
    if (!std::isfinite(loss))
      throw std::runtime_error("train: diverged at epoch " + std::to_string(epoch) +
                               " (loss not finite); lower the learning rate");
  }
  return out;
}

// Hessian of the user's restricted objective sum_{i in items(u)} point_loss,
// with the regularization floor max(n_u, 1) * lambda so the block stays
// positive definite for users whose interactions were all removed.
inline Matrix user_hessian_block(const ModelParams& m, const InteractionSet& data, int user) {
  if (user < 0 || user >= m.num_users()) throw std::out_of_range("user_hessian_block: user out of range");
  if (data.num_users() != m.num_users() || data.num_items() != m.num_items())
    throw std::invalid_argument("user_hessian_block: data does not match model shape");
  const int d = m.dim();
  Matrix h = Matrix::Zero(d, d);
  const std::vector<int>& bucket = data.user_positions(user);
  for (int pos : bucket) {
    const auto q = m.item_emb.row(data.at(pos).item);
    h.noalias() += q.transpose() * q;
  }
  const double floor = std::max<size_t>(bucket.size(), 1) * m.hyper.reg_lambda;
  h.diagonal().array() += floor;
  return h;
}

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("load_params: truncated checkpoint '" + path + "'");
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[8] = {'R', 'U', 'N', 'L', 'C', 'K', 'P', '1'};

// Little-endian binary checkpoint; raw double payload gives a bit-exact
// round trip.
inline void save_params(const ModelParams& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_params: cannot open '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, static_cast<int32_t>(m.num_users()));
  detail::write_pod(out, static_cast<int32_t>(m.num_items()));
  detail::write_pod(out, static_cast<int32_t>(m.dim()));
  detail::write_pod(out, static_cast<int32_t>(m.hyper.embed_dim));
  detail::write_pod(out, m.hyper.learning_rate);
  detail::write_pod(out, m.hyper.reg_lambda);
  detail::write_pod(out, static_cast<int32_t>(m.hyper.epochs));
  detail::write_pod(out, m.hyper.init_std);
  detail::write_pod(out, static_cast<int32_t>(m.hyper.batch_size));
  detail::write_pod(out, static_cast<uint64_t>(m.hyper.seed));
  for (int u = 0; u < m.num_users(); ++u)
    for (int k = 0; k < m.dim(); ++k) detail::write_pod(out, m.user_emb(u, k));
  for (int i = 0; i < m.num_items(); ++i)
    for (int k = 0; k < m.dim(); ++k) detail::write_pod(out, m.item_emb(i, k));
  if (!out) throw std::runtime_error("save_params: write failed for '" + path + "'");
}

inline ModelParams load_params(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_params: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_params: '" + path + "' is not a model checkpoint");
  const int nu = detail::read_pod<int32_t>(in, path);
  const int ni = detail::read_pod<int32_t>(in, path);
  const int d = detail::read_pod<int32_t>(in, path);
  if (nu < 0 || ni < 0 || d < 1) throw std::runtime_error("load_params: corrupt shape in '" + path + "'");
  ModelParams m;
  m.hyper.embed_dim = detail::read_pod<int32_t>(in, path);
  m.hyper.learning_rate = detail::read_pod<double>(in, path);
  m.hyper.reg_lambda = detail::read_pod<double>(in, path);
  m.hyper.epochs = detail::read_pod<int32_t>(in, path);
  m.hyper.init_std = detail::read_pod<double>(in, path);
  m.hyper.batch_size = detail::read_pod<int32_t>(in, path);
  m.hyper.seed = detail::read_pod<uint64_t>(in, path);
  m.user_emb.resize(nu, d);
  m.item_emb.resize(ni, d);
  for (int u = 0; u < nu; ++u)
    for (int k = 0; k < d; ++k) m.user_emb(u, k) = detail::read_pod<double>(in, path);
  for (int i = 0; i < ni; ++i)
    for (int k = 0; k < d; ++k) m.item_emb(i, k) = detail::read_pod<double>(in, path);
  return m;
}

}  // namespace recunlearn
