// Copyright (c) 2026 lwr authors
// SPDX-License-Identifier: Apache-2.0

#include "lwr/bank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace lwr {

namespace {

constexpr char kMagic[4] = {'L', 'C', 'R', 'B'};
constexpr std::uint32_t kFlagNormalized = 1u << 0;
constexpr std::uint32_t kFlagWeights = 1u << 1;
constexpr std::uint32_t kFlagGlobals = 1u << 2;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ParseError(std::string("bank: truncated while reading ") + what);
  return v;
}

float row_norm(const float* row, int d) {
  double acc = 0.0;
  for (int i = 0; i < d; ++i) acc += static_cast<double>(row[i]) * row[i];
  return static_cast<float>(std::sqrt(acc));
}

void normalize_row(float* row, int d) {
  const float n = row_norm(row, d);
  if (n > 0.0f) {
    for (int i = 0; i < d; ++i) row[i] /= n;
  }
}

}  // namespace

std::string tier_name(RelevanceTier t) {
  switch (t) {
    case RelevanceTier::kPositive: return "positive";
    case RelevanceTier::kEasy: return "easy";
    case RelevanceTier::kJunk: return "junk";
    case RelevanceTier::kNegative: return "negative";
  }
  return "negative";
}

RelevanceTier tier_from_name(const std::string& name) {
  if (name == "positive") return RelevanceTier::kPositive;
  if (name == "easy") return RelevanceTier::kEasy;
  if (name == "junk") return RelevanceTier::kJunk;
  if (name == "negative") return RelevanceTier::kNegative;
  throw ParseError("unknown relevance tier '" + name + "'");
}

void DescriptorBank::validate() const {
  for (const auto& [id, set] : locals) {
    if (set.image_id != id) {
      throw ParseError("bank: key '" + id + "' does not match image_id '" + set.image_id + "'");
    }
    if (set.descriptors.rows != L || set.descriptors.cols != d) {
      throw ParseError("bank: image " + id + " has shape " + set.descriptors.shape_str() +
                       ", bank requires " + std::to_string(L) + "x" + std::to_string(d));
    }
    if (set.valid_count < 0 || set.valid_count > L) {
      throw ParseError("bank: image " + id + " has valid_count " +
                       std::to_string(set.valid_count));
    }
    if (!set.weights.empty() && static_cast<int>(set.weights.size()) != L) {
      throw ParseError("bank: image " + id + " has " + std::to_string(set.weights.size()) +
                       " weights, expected " + std::to_string(L));
    }
    if (normalized) {
      for (int r = 0; r < set.valid_count; ++r) {
        const float n = row_norm(set.descriptors.row_ptr(r), d);
        if (std::abs(n - 1.0f) > 1e-4f) {
          throw ParseError("bank: image " + id + " row " + std::to_string(r) +
                           " is not unit norm (" + std::to_string(n) + ")");
        }
      }
    }
    for (int r = set.valid_count; r < L; ++r) {
      const float* row = set.descriptors.row_ptr(r);
      for (int c = 0; c < d; ++c) {
        if (row[c] != 0.0f) {
          throw ParseError("bank: image " + id + " padding row " + std::to_string(r) +
                           " is not zero");
        }
      }
    }
  }
  for (const auto& [id, g] : globals) {
    const float n = row_norm(g.vector.data(), static_cast<int>(g.vector.size()));
    if (std::abs(n - 1.0f) > 1e-4f) {
      throw ParseError("bank: global descriptor " + id + " is not unit norm");
    }
  }
}

void write_bank(const DescriptorBank& bank, const std::string& path) {
  bank.validate();
  bool any_weights = false;
  for (const auto& [id, set] : bank.locals) {
    if (!set.weights.empty()) any_weights = true;
  }
  for (const auto& [id, set] : bank.locals) {
    if (any_weights && set.weights.empty()) {
      throw ParseError("bank: weights present for some images but missing for " + id);
    }
  }
  const bool any_globals = bank.has_globals();
  if (any_globals) {
    for (const auto& [id, set] : bank.locals) {
      if (bank.globals.find(id) == bank.globals.end()) {
        throw ParseError("bank: globals present but missing for " + id);
      }
    }
  }

  std::uint32_t flags = 0;
  if (bank.normalized) flags |= kFlagNormalized;
  if (any_weights) flags |= kFlagWeights;
  if (any_globals) flags |= kFlagGlobals;

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ParseError("bank: cannot open " + tmp + " for writing");
    os.write(kMagic, 4);
    write_pod<std::uint32_t>(os, kBankVersion);
    write_pod<std::uint32_t>(os, flags);
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(bank.d));
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(bank.L));
    write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(bank.locals.size()));
    for (const auto& [id, set] : bank.locals) {
      write_pod<std::uint16_t>(os, static_cast<std::uint16_t>(id.size()));
      os.write(id.data(), static_cast<std::streamsize>(id.size()));
      write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(set.valid_count));
      os.write(reinterpret_cast<const char*>(set.descriptors.data.data()),
               static_cast<std::streamsize>(set.descriptors.data.size() * sizeof(float)));
      if (any_weights) {
        os.write(reinterpret_cast<const char*>(set.weights.data()),
                 static_cast<std::streamsize>(set.weights.size() * sizeof(float)));
      }
      if (any_globals) {
        const GlobalDescriptor& g = bank.globals.at(id);
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(g.vector.size()));
        os.write(reinterpret_cast<const char*>(g.vector.data()),
                 static_cast<std::streamsize>(g.vector.size() * sizeof(float)));
      }
    }
    if (!os) throw ParseError("bank: write failure on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

DescriptorBank read_bank(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("bank: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("bank: bad magic in " + path);
  }
  const auto version = read_pod<std::uint32_t>(is, "version");
  if (version != kBankVersion) {
    throw ParseError("bank: unsupported version " + std::to_string(version));
  }
  const auto flags = read_pod<std::uint32_t>(is, "flags");
  DescriptorBank bank;
  bank.d = static_cast<int>(read_pod<std::uint32_t>(is, "d"));
  bank.L = static_cast<int>(read_pod<std::uint32_t>(is, "L"));
  const auto count = read_pod<std::uint64_t>(is, "image count");
  const bool file_normalized = (flags & kFlagNormalized) != 0;
  const bool has_weights = (flags & kFlagWeights) != 0;
  const bool has_globals = (flags & kFlagGlobals) != 0;

  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id_len = read_pod<std::uint16_t>(is, "id length");
    std::string id(id_len, '\0');
    is.read(id.data(), id_len);
    if (!is) throw ParseError("bank: truncated image id");
    LocalDescriptorSet set;
    set.image_id = id;
    set.valid_count = static_cast<int>(read_pod<std::uint32_t>(is, "valid count"));
    if (set.valid_count < 0 || set.valid_count > bank.L) {
      throw ParseError("bank: image " + id + " has inconsistent valid count " +
                       std::to_string(set.valid_count) + " for L = " + std::to_string(bank.L));
    }
    set.descriptors = Mat<float>(bank.L, bank.d);
    is.read(reinterpret_cast<char*>(set.descriptors.data.data()),
            static_cast<std::streamsize>(set.descriptors.data.size() * sizeof(float)));
    if (!is) throw ParseError("bank: truncated descriptor payload for image " + id);
    if (has_weights) {
      set.weights.resize(static_cast<std::size_t>(bank.L));
      is.read(reinterpret_cast<char*>(set.weights.data()),
              static_cast<std::streamsize>(set.weights.size() * sizeof(float)));
      if (!is) throw ParseError("bank: truncated weights for image " + id);
    }
    if (!file_normalized) {
      for (int r = 0; r < set.valid_count; ++r) normalize_row(set.descriptors.row_ptr(r), bank.d);
    }
    if (has_globals) {
      const auto gd = read_pod<std::uint32_t>(is, "global dim");
      GlobalDescriptor g;
      g.image_id = id;
      g.vector.resize(gd);
      is.read(reinterpret_cast<char*>(g.vector.data()),
              static_cast<std::streamsize>(gd * sizeof(float)));
      if (!is) throw ParseError("bank: truncated global descriptor for image " + id);
      if (!file_normalized) normalize_row(g.vector.data(), static_cast<int>(gd));
      bank.globals.emplace(id, std::move(g));
    }
    if (bank.locals.count(id)) throw ParseError("bank: duplicate image id " + id);
    bank.locals.emplace(id, std::move(set));
  }
  bank.normalized = true;
  bank.validate();
  return bank;
}

LocalDescriptorSet select_top_l(const std::string& image_id, const Mat<float>& raw,
                                const std::vector<float>& weights, int L) {
  if (L <= 0) throw ConfigError("select_top_l: L must be >= 1");
  const int n = raw.rows;
  if (n < 1) throw ConfigError("select_top_l: need at least one row");
  if (static_cast<int>(weights.size()) != n) {
    throw ShapeError("select_top_l: " + std::to_string(weights.size()) + " weights for " +
                     std::to_string(n) + " rows");
  }
  for (float w : weights) {
    if (!is_finite(w)) throw ConfigError("select_top_l: non-finite weight");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return weights[static_cast<std::size_t>(a)] > weights[static_cast<std::size_t>(b)];
  });

  LocalDescriptorSet out;
  out.image_id = image_id;
  out.descriptors = Mat<float>(L, raw.cols);
  out.weights.assign(static_cast<std::size_t>(L), 0.0f);
  out.valid_count = std::min(n, L);
  for (int r = 0; r < out.valid_count; ++r) {
    const int src = order[static_cast<std::size_t>(r)];
    std::memcpy(out.descriptors.row_ptr(r), raw.row_ptr(src),
                static_cast<std::size_t>(raw.cols) * sizeof(float));
    normalize_row(out.descriptors.row_ptr(r), raw.cols);
    out.weights[static_cast<std::size_t>(r)] = weights[static_cast<std::size_t>(src)];
  }
  return out;
}

ShortList global_topk(const GlobalDescriptor& query, const DescriptorBank& bank, int K,
                      const std::string& exclude, const std::vector<std::string>* restrict_to) {
  if (K < 1) throw ConfigError("global_topk: K must be >= 1");
  if (!bank.has_globals()) {
    throw ConfigError("global_topk: bank has no global descriptors");
  }
  ShortList list;
  list.query_id = query.image_id;
  std::vector<std::pair<std::string, float>> scored;
  auto score_one = [&](const GlobalDescriptor& g) {
    if (g.image_id == exclude) return;
    if (g.vector.size() != query.vector.size()) {
      throw ShapeError("global_topk: dim mismatch for image " + g.image_id);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < g.vector.size(); ++i) {
      acc += static_cast<double>(query.vector[i]) * g.vector[i];
    }
    scored.emplace_back(g.image_id, static_cast<float>(acc));
  };
  if (restrict_to) {
    for (const std::string& id : *restrict_to) {
      auto it = bank.globals.find(id);
      if (it == bank.globals.end()) {
        throw ConfigError("global_topk: id '" + id + "' missing global descriptor");
      }
      score_one(it->second);
    }
  } else {
    for (const auto& [id, g] : bank.globals) score_one(g);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(scored.size()) < K) {
    list.truncated_warning = true;
  } else {
    scored.resize(static_cast<std::size_t>(K));
  }
  list.entries = std::move(scored);
  return list;
}

}  // namespace lwr
