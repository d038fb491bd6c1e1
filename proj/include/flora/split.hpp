#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flora/error.hpp"

namespace flora {

/// Seen/unseen class partition. Both id lists are sorted and disjoint.
struct SplitSpec {
  std::uint32_t n_classes = 0;
  std::vector<std::uint32_t> seen;
  std::vector<std::uint32_t> unseen;

  bool is_seen(std::uint32_t c) const { return std::binary_search(seen.begin(), seen.end(), c); }
  bool is_unseen(std::uint32_t c) const { return std::binary_search(unseen.begin(), unseen.end(), c); }

  friend bool operator==(const SplitSpec&, const SplitSpec&) = default;
};

namespace detail {

inline std::vector<std::uint32_t> checked_ids(const std::vector<long long>& raw, std::uint32_t n_classes,
                                              const char* which) {
  std::vector<std::uint32_t> ids;
  std::set<long long> seen_ids;
  for (long long v : raw) {
    if (v < 0 || v >= static_cast<long long>(n_classes)) {
      throw DataError(std::string("split: ") + which + " id " + std::to_string(v) + " out of range [0," +
                      std::to_string(n_classes) + ")");
    }
    if (!seen_ids.insert(v).second) {
      throw DataError(std::string("split: duplicate ") + which + " id " + std::to_string(v));
    }
    ids.push_back(static_cast<std::uint32_t>(v));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace detail

/// Builds a split from raw id lists; `seen` empty means complement of unseen.
inline SplitSpec make_split(std::uint32_t n_classes, const std::vector<long long>& unseen,
                            const std::vector<long long>* seen = nullptr) {
  if (n_classes == 0) throw DataError("split: n_classes must be positive");
  SplitSpec s;
  s.n_classes = n_classes;
  s.unseen = detail::checked_ids(unseen, n_classes, "unseen");
  if (seen != nullptr) {
    s.seen = detail::checked_ids(*seen, n_classes, "seen");
    std::vector<std::uint32_t> both;
    std::set_intersection(s.seen.begin(), s.seen.end(), s.unseen.begin(), s.unseen.end(), std::back_inserter(both));
    if (!both.empty()) throw DataError("split: class " + std::to_string(both.front()) + " is both seen and unseen");
  } else {
    for (std::uint32_t c = 0; c < n_classes; ++c)
      if (!s.is_unseen(c)) s.seen.push_back(c);
  }
  return s;
}

inline SplitSpec split_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object()) throw DataError("split: document must be an object");
    if (!j.contains("n_classes") || !j.contains("unseen")) throw DataError("split: requires n_classes and unseen");
    const long long n = j.at("n_classes").get<long long>();
    if (n <= 0 || n > 0xffffffffLL) throw DataError("split: n_classes out of range");
    const auto unseen = j.at("unseen").get<std::vector<long long>>();
    if (j.contains("seen")) {
      const auto seen = j.at("seen").get<std::vector<long long>>();
      return make_split(static_cast<std::uint32_t>(n), unseen, &seen);
    }
    return make_split(static_cast<std::uint32_t>(n), unseen);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("split: malformed document: ") + e.what());
  }
}

inline nlohmann::ordered_json split_to_json(const SplitSpec& s) {
  nlohmann::ordered_json j;
  j["n_classes"] = s.n_classes;
  j["seen"] = s.seen;
  j["unseen"] = s.unseen;
  return j;
}

inline SplitSpec load_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("split: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("split: " + path.string() + ": " + e.what());
  }
  return split_from_json(j);
}

inline void save_split(const SplitSpec& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("split: cannot write " + path.string());
  out << split_to_json(s).dump(2) << '\n';
}

}  // namespace flora
