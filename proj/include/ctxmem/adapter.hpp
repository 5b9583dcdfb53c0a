#pragma once

// Low-rank adapter state: for each targeted weight matrix W (out x in) a
// factor pair A (rank x in), B (out x rank) whose product adds
// (alpha / rank) * B * A to W.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/linalg.hpp"
#include "ctxmem/tensor_io.hpp"

namespace ctxmem {

/// Weight matrices of a transformer block that may carry an adapter.
enum class Projection { wq, wk, wv, wo, w1, w2 };

inline constexpr std::array<Projection, 6> kAllProjections = {Projection::wq, Projection::wk, Projection::wv,
                                                              Projection::wo, Projection::w1, Projection::w2};

inline std::string_view projection_name(Projection p) {
  switch (p) {
    case Projection::wq: return "wq";
    case Projection::wk: return "wk";
    case Projection::wv: return "wv";
    case Projection::wo: return "wo";
    case Projection::w1: return "w1";
    case Projection::w2: return "w2";
  }
  return "?";
}

inline Projection parse_projection(std::string_view name) {
  for (auto p : kAllProjections)
    if (projection_name(p) == name) return p;
  throw ConfigError("unknown target matrix name '" + std::string(name) + "'");
}

inline std::string factor_key(std::size_t layer, Projection p) {
  return "layer." + std::to_string(layer) + "." + std::string(projection_name(p));
}

struct LoraFactors {
  Matrix a;  // rank x in
  Matrix b;  // out x rank

  bool operator==(const LoraFactors& o) const { return a == o.a && b == o.b; }
};

/// Hyperparameters for a fresh adapter. Targets name projections ("wq")
/// applied to every layer, or a single layer ("layer.1.wv").
struct AdapterSpec {
  std::size_t rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
  std::vector<std::string> targets = {"wq", "wv"};
};

struct AdapterState {
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout = 0.0;
  std::vector<std::string> targets;
  std::string base_fingerprint;
  std::uint64_t seed = 0;
  std::map<std::string, LoraFactors> factors;  // "layer.{i}.{matrix}"

  double scaling() const { return alpha / static_cast<double>(rank); }

  const LoraFactors* find(std::size_t layer, Projection p) const {
    auto it = factors.find(factor_key(layer, p));
    return it == factors.end() ? nullptr : &it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, f] : factors) n += static_cast<std::size_t>(f.a.size() + f.b.size());
    return n;
  }

  bool operator==(const AdapterState& o) const {
    return rank == o.rank && alpha == o.alpha && dropout == o.dropout && targets == o.targets &&
           base_fingerprint == o.base_fingerprint && seed == o.seed && factors == o.factors;
  }
};

/// Gradient buffers keyed like AdapterState::factors.
using AdapterGradients = std::map<std::string, LoraFactors>;

inline AdapterGradients zero_gradients(const AdapterState& s) {
  AdapterGradients g;
  for (const auto& [k, f] : s.factors)
    g.emplace(k, LoraFactors{Matrix::Zero(f.a.rows(), f.a.cols()), Matrix::Zero(f.b.rows(), f.b.cols())});
  return g;
}

/// Resolves target names into (layer, projection) pairs for a model with `n_layers` blocks.
inline std::vector<std::pair<std::size_t, Projection>> resolve_targets(const std::vector<std::string>& targets,
                                                                       std::size_t n_layers) {
  std::vector<std::pair<std::size_t, Projection>> out;
  auto add = [&](std::size_t layer, Projection p) {
    for (const auto& e : out)
      if (e.first == layer && e.second == p) return;
    out.emplace_back(layer, p);
  };
  for (const auto& t : targets) {
    if (t.rfind("layer.", 0) == 0) {
      auto dot = t.find('.', 6);
      if (dot == std::string::npos) throw ConfigError("unknown target matrix name '" + t + "'");
      std::size_t layer = 0;
      try {
        layer = std::stoul(t.substr(6, dot - 6));
      } catch (const std::exception&) {
        throw ConfigError("unknown target matrix name '" + t + "'");
      }
      if (layer >= n_layers) throw ConfigError("target '" + t + "' names a layer beyond the model");
      add(layer, parse_projection(t.substr(dot + 1)));
    } else {
      auto p = parse_projection(t);
      for (std::size_t l = 0; l < n_layers; ++l) add(l, p);
    }
  }
  if (out.empty()) throw ConfigError("adapter needs at least one target matrix");
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint format

inline ArrayFile adapter_to_arrays(const AdapterState& s) {
  ArrayFile f;
  f.metadata["format"] = "ctxmem.adapter.v1";
  f.metadata["rank"] = std::to_string(s.rank);
  f.metadata["alpha"] = nlohmann::json(s.alpha).dump();
  f.metadata["dropout"] = nlohmann::json(s.dropout).dump();
  f.metadata["targets"] = nlohmann::json(s.targets).dump();
  f.metadata["base_fingerprint"] = s.base_fingerprint;
  f.metadata["seed"] = std::to_string(s.seed);
  for (const auto& [key, fac] : s.factors) {
    f.arrays[key + ".A"] = to_named_array(fac.a);
    f.arrays[key + ".B"] = to_named_array(fac.b);
  }
  return f;
}

inline AdapterState adapter_from_arrays(const ArrayFile& f) {
  auto meta = [&](const std::string& k) -> const std::string& {
    auto it = f.metadata.find(k);
    if (it == f.metadata.end()) throw Error("adapter checkpoint lacks metadata '" + k + "'");
    return it->second;
  };
  if (meta("format") != "ctxmem.adapter.v1") throw Error("not an adapter checkpoint: " + meta("format"));
  AdapterState s;
  s.rank = std::stoul(meta("rank"));
  s.alpha = nlohmann::json::parse(meta("alpha")).get<double>();
  s.dropout = nlohmann::json::parse(meta("dropout")).get<double>();
  s.targets = nlohmann::json::parse(meta("targets")).get<std::vector<std::string>>();
  s.base_fingerprint = meta("base_fingerprint");
  s.seed = std::stoull(meta("seed"));
  for (const auto& [name, arr] : f.arrays) {
    if (name.size() < 2 || name[name.size() - 2] != '.') throw Error("unexpected array '" + name + "'");
    const std::string key = name.substr(0, name.size() - 2);
    const char which = name.back();
    auto& fac = s.factors[key];
    if (which == 'A')
      fac.a = from_named_array(arr, name);
    else if (which == 'B')
      fac.b = from_named_array(arr, name);
    else
      throw Error("unexpected array '" + name + "'");
  }
  for (const auto& [key, fac] : s.factors)
    if (fac.a.rows() != static_cast<Eigen::Index>(s.rank) || fac.b.cols() != static_cast<Eigen::Index>(s.rank))
      throw Error("factor pair '" + key + "' is inconsistent with rank " + std::to_string(s.rank));
  return s;
}

inline void save_adapter(const std::filesystem::path& path, const AdapterState& s) {
  write_array_file(path, adapter_to_arrays(s));
}

inline AdapterState load_adapter(const std::filesystem::path& path) {
  return adapter_from_arrays(read_array_file(path));
}

}  // namespace ctxmem
