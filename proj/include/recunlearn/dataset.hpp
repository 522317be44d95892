#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace recunlearn {

struct Interaction {
  int user = 0;
  int item = 0;
  double rating = 0.0;
};

inline bool operator==(const Interaction& a, const Interaction& b) {
  return a.user == b.user && a.item == b.item && a.rating == b.rating;
}

// Immutable rating collection over dense 0-based user/item ids.
// Keeps per-user and per-item position indexes so callers can walk a user's
// interactions without scanning the whole set. Duplicate (user,item) pairs are
// rejected here; the file loader resolves them before construction.
class InteractionSet {
 public:
  InteractionSet() = default;

  InteractionSet(std::vector<Interaction> interactions, int num_users, int num_items)
      : interactions_(std::move(interactions)), num_users_(num_users), num_items_(num_items) {
    if (num_users_ < 0 || num_items_ < 0)
      throw std::invalid_argument("InteractionSet: negative entity count");
    by_user_.assign(static_cast<size_t>(num_users_), {});
    by_item_.assign(static_cast<size_t>(num_items_), {});
    std::unordered_set<int64_t> seen;
    seen.reserve(interactions_.size() * 2);
    for (int pos = 0; pos < static_cast<int>(interactions_.size()); ++pos) {
      const Interaction& z = interactions_[static_cast<size_t>(pos)];
      if (z.user < 0 || z.user >= num_users_)
        throw std::out_of_range("InteractionSet: user id out of range: " + std::to_string(z.user));
      if (z.item < 0 || z.item >= num_items_)
        throw std::out_of_range("InteractionSet: item id out of range: " + std::to_string(z.item));
      if (!std::isfinite(z.rating))
        throw std::invalid_argument("InteractionSet: non-finite rating at position " + std::to_string(pos));
      const int64_t key = static_cast<int64_t>(z.user) * num_items_ + z.item;
      if (!seen.insert(key).second)
        throw std::invalid_argument("InteractionSet: duplicate pair (" + std::to_string(z.user) +
                                    "," + std::to_string(z.item) + ")");
      by_user_[static_cast<size_t>(z.user)].push_back(pos);
      by_item_[static_cast<size_t>(z.item)].push_back(pos);
    }
  }

  int num_users() const { return num_users_; }
  int num_items() const { return num_items_; }
  int size() const { return static_cast<int>(interactions_.size()); }
  const std::vector<Interaction>& interactions() const { return interactions_; }

  const Interaction& at(int pos) const { return interactions_.at(static_cast<size_t>(pos)); }

  const std::vector<int>& user_positions(int user) const {
    return by_user_.at(static_cast<size_t>(user));
  }
  const std::vector<int>& item_positions(int item) const {
    return by_item_.at(static_cast<size_t>(item));
  }
  int user_degree(int user) const { return static_cast<int>(user_positions(user).size()); }
  int item_degree(int item) const { return static_cast<int>(item_positions(item).size()); }

 private:
  std::vector<Interaction> interactions_;
  int num_users_ = 0;
  int num_items_ = 0;
  std::vector<std::vector<int>> by_user_;
  std::vector<std::vector<int>> by_item_;
};

struct LoadResult {
  InteractionSet data;
  std::vector<std::string> user_labels;  // dense id -> raw token from the file
  std::vector<std::string> item_labels;
  int duplicates_dropped = 0;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line, const std::string& sep) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t hit = line.find(sep, start);
    if (hit == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, hit - start));
    start = hit + sep.size();
  }
  return out;
}

inline double parse_rating(const std::string& tok, int lineno) {
  try {
    size_t used = 0;
    const double r = std::stod(tok, &used);
    if (used != tok.size() || !std::isfinite(r))
      throw std::invalid_argument("bad");
    return r;
  } catch (const std::exception&) {
    throw std::runtime_error("line " + std::to_string(lineno) + ": non-numeric rating '" + tok + "'");
  }
}

}  // namespace detail

// Reads "user<sep>item<sep>rating[<sep>extra...]" text files ("::" and "\t" are
// the usual separators). Raw ids may be arbitrary tokens; they are remapped to
// dense 0-based ids in first-appearance order and the mapping is returned.
// Repeated (user,item) pairs keep the last occurrence; the dropped count is
// reported so callers can warn.
inline LoadResult load_movielens(const std::string& path, const std::string& separator = "::") {
  if (separator.empty()) throw std::invalid_argument("load_movielens: empty separator");
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_movielens: cannot open '" + path + "'");

  LoadResult out;
  std::unordered_map<std::string, int> user_ids, item_ids;
  std::unordered_map<int64_t, int> slot_of_pair;
  std::vector<Interaction> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = detail::split_fields(line, separator);
    if (fields.size() < 3)
      throw std::runtime_error("line " + std::to_string(lineno) + ": expected at least 3 fields, got " +
                               std::to_string(fields.size()));
    if (fields[0].empty() || fields[1].empty())
      throw std::runtime_error("line " + std::to_string(lineno) + ": empty user or item id");

    auto intern = [](std::unordered_map<std::string, int>& table, std::vector<std::string>& labels,
                     const std::string& tok) {
      auto it = table.find(tok);
      if (it != table.end()) return it->second;
      const int id = static_cast<int>(labels.size());
      table.emplace(tok, id);
      labels.push_back(tok);
      return id;
    };
    const int u = intern(user_ids, out.user_labels, fields[0]);
    const int i = intern(item_ids, out.item_labels, fields[1]);
    const double r = detail::parse_rating(fields[2], lineno);

    const int64_t key = (static_cast<int64_t>(u) << 32) | static_cast<uint32_t>(i);
    auto slot = slot_of_pair.find(key);
    if (slot == slot_of_pair.end()) {
      slot_of_pair.emplace(key, static_cast<int>(rows.size()));
      rows.push_back({u, i, r});
    } else {
      rows[static_cast<size_t>(slot->second)].rating = r;
      ++out.duplicates_dropped;
    }
  }
  out.data = InteractionSet(std::move(rows), static_cast<int>(out.user_labels.size()),
                            static_cast<int>(out.item_labels.size()));
  return out;
}

struct FilterResult {
  InteractionSet data;
  std::vector<int> kept_users;  // new dense id -> old dense id
  std::vector<int> kept_items;
  int rounds = 0;
};

// Repeatedly drops users and items with fewer than min_count interactions
// until the degree condition is a fixed point, then compacts ids. Entities
// that never appear are dropped on the first round.
inline FilterResult filter_min_interactions(const InteractionSet& set, int min_count) {
  if (min_count < 1) throw std::invalid_argument("filter_min_interactions: min_count must be >= 1");
  std::vector<char> user_alive(static_cast<size_t>(set.num_users()), 1);
  std::vector<char> item_alive(static_cast<size_t>(set.num_items()), 1);

  FilterResult out;
  bool changed = true;
  while (changed) {
    changed = false;
    ++out.rounds;
    std::vector<int> udeg(static_cast<size_t>(set.num_users()), 0);
    std::vector<int> ideg(static_cast<size_t>(set.num_items()), 0);
    for (const Interaction& z : set.interactions()) {
      if (!user_alive[static_cast<size_t>(z.user)] || !item_alive[static_cast<size_t>(z.item)]) continue;
      ++udeg[static_cast<size_t>(z.user)];
      ++ideg[static_cast<size_t>(z.item)];
    }
    for (int u = 0; u < set.num_users(); ++u)
      if (user_alive[static_cast<size_t>(u)] && udeg[static_cast<size_t>(u)] < min_count) {
        user_alive[static_cast<size_t>(u)] = 0;
        changed = true;
      }
    for (int i = 0; i < set.num_items(); ++i)
      if (item_alive[static_cast<size_t>(i)] && ideg[static_cast<size_t>(i)] < min_count) {
        item_alive[static_cast<size_t>(i)] = 0;
        changed = true;
      }
  }

  std::vector<int> user_map(static_cast<size_t>(set.num_users()), -1);
  std::vector<int> item_map(static_cast<size_t>(set.num_items()), -1);
  for (int u = 0; u < set.num_users(); ++u)
    if (user_alive[static_cast<size_t>(u)]) {
      user_map[static_cast<size_t>(u)] = static_cast<int>(out.kept_users.size());
      out.kept_users.push_back(u);
    }
  for (int i = 0; i < set.num_items(); ++i)
    if (item_alive[static_cast<size_t>(i)]) {
      item_map[static_cast<size_t>(i)] = static_cast<int>(out.kept_items.size());
      out.kept_items.push_back(i);
    }

  std::vector<Interaction> rows;
  for (const Interaction& z : set.interactions()) {
    const int u = user_map[static_cast<size_t>(z.user)];
    const int i = item_map[static_cast<size_t>(z.item)];
    if (u >= 0 && i >= 0) rows.push_back({u, i, z.rating});
  }
  out.data = InteractionSet(std::move(rows), static_cast<int>(out.kept_users.size()),
                            static_cast<int>(out.kept_items.size()));
  return out;
}

enum class SplitMode { global_random, per_user_random };

struct SplitSpec {
  double train_fraction = 0.5;
  SplitMode mode = SplitMode::global_random;
  uint64_t seed = 0;
};

struct SplitResult {
  InteractionSet train;
  InteractionSet test;
};

// Disjoint train/test partition. Both sides keep the parent's entity counts so
// embedding shapes stay aligned across the pipeline. per_user_random splits
// each user's interactions separately and refuses fractions that would leave a
// user with an empty train side.
inline SplitResult split(const InteractionSet& set, const SplitSpec& spec) {
  if (!(spec.train_fraction >= 0.0 && spec.train_fraction <= 1.0))
    throw std::invalid_argument("split: train_fraction outside [0,1]");
  std::mt19937_64 rng(spec.seed);
  std::vector<char> to_train(static_cast<size_t>(set.size()), 0);

  if (spec.mode == SplitMode::global_random) {
    std::vector<int> perm(static_cast<size_t>(set.size()));
    for (int p = 0; p < set.size(); ++p) perm[static_cast<size_t>(p)] = p;
    std::shuffle(perm.begin(), perm.end(), rng);
    const int n_train = static_cast<int>(std::llround(spec.train_fraction * set.size()));
    for (int k = 0; k < n_train; ++k) to_train[static_cast<size_t>(perm[static_cast<size_t>(k)])] = 1;
  } else {
    for (int u = 0; u < set.num_users(); ++u) {
      std::vector<int> bucket = set.user_positions(u);
      if (bucket.empty()) continue;
      std::shuffle(bucket.begin(), bucket.end(), rng);
      const int c = static_cast<int>(std::llround(spec.train_fraction * bucket.size()));
      if (c == 0)
        throw std::runtime_error("split: per-user split leaves user " + std::to_string(u) +
                                 " with an empty train side");
      for (int k = 0; k < c; ++k) to_train[static_cast<size_t>(bucket[static_cast<size_t>(k)])] = 1;
    }
  }

  std::vector<Interaction> train_rows, test_rows;
  for (int pos = 0; pos < set.size(); ++pos)
    (to_train[static_cast<size_t>(pos)] ? train_rows : test_rows).push_back(set.at(pos));
  return {InteractionSet(std::move(train_rows), set.num_users(), set.num_items()),
          InteractionSet(std::move(test_rows), set.num_users(), set.num_items())};
}

// Drops the given positions, keeping entity counts (rows only disappear; ids
// are not compacted).
inline InteractionSet remove_interactions(const InteractionSet& set, const std::vector<int>& positions) {
  std::vector<char> drop(static_cast<size_t>(set.size()), 0);
  for (int pos : positions) {
    if (pos < 0 || pos >= set.size())
      throw std::out_of_range("remove_interactions: position out of range: " + std::to_string(pos));
    drop[static_cast<size_t>(pos)] = 1;
  }
  std::vector<Interaction> rows;
  rows.reserve(static_cast<size_t>(set.size()));
  for (int pos = 0; pos < set.size(); ++pos)
    if (!drop[static_cast<size_t>(pos)]) rows.push_back(set.at(pos));
  return InteractionSet(std::move(rows), set.num_users(), set.num_items());
}

// Canonical artifact format: "user,item,rating" header, dense ids, ratings
// printed with enough digits to round-trip doubles exactly.
inline void write_canonical_csv(const InteractionSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_canonical_csv: cannot open '" + path + "'");
  out << "user,item,rating\n";
  char buf[64];
  for (const Interaction& z : set.interactions()) {
    std::snprintf(buf, sizeof(buf), "%.17g", z.rating);
    out << z.user << ',' << z.item << ',' << buf << '\n';
  }
  if (!out) throw std::runtime_error("write_canonical_csv: write failed for '" + path + "'");
}

// Entity counts are inferred as max id + 1, which is exact for canonical dumps
// where every id appears. num_users/num_items floors cover sets whose tail
// entities have no interactions on one side of a split.
inline InteractionSet read_canonical_csv(const std::string& path, int min_users = 0, int min_items = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_canonical_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || (line != "user,item,rating" && line != "user,item,rating\r"))
    throw std::runtime_error("read_canonical_csv: missing 'user,item,rating' header in '" + path + "'");
  std::vector<Interaction> rows;
  int nu = min_users, ni = min_items, lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = detail::split_fields(line, ",");
    if (fields.size() != 3)
      throw std::runtime_error("read_canonical_csv: line " + std::to_string(lineno) + ": expected 3 fields");
    Interaction z;
    try {
      z.user = std::stoi(fields[0]);
      z.item = std::stoi(fields[1]);
    } catch (const std::exception&) {
      throw std::runtime_error("read_canonical_csv: line " + std::to_string(lineno) + ": bad id");
    }
    z.rating = detail::parse_rating(fields[2], lineno);
    nu = std::max(nu, z.user + 1);
    ni = std::max(ni, z.item + 1);
    rows.push_back(z);
  }
  return InteractionSet(std::move(rows), nu, ni);
}

}  // namespace recunlearn
