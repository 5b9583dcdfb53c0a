#pragma once

// Transfer-set refinement: rank entries by the log-probability gain the
// context gives the teacher over the context-free student and keep the top
// k. Random and KL-based rankings are the ablation baselines.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/backend.hpp"
#include "ctxmem/elicitation.hpp"
#include "ctxmem/losses.hpp"
#include "ctxmem/prompts.hpp"

namespace ctxmem {

enum class SelectionStrategy { ppl, kl, random };

inline std::string_view strategy_name(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::ppl: return "ppl";
    case SelectionStrategy::kl: return "kl";
    case SelectionStrategy::random: return "random";
  }
  return "?";
}

inline SelectionStrategy parse_strategy(std::string_view s) {
  for (auto v : {SelectionStrategy::ppl, SelectionStrategy::kl, SelectionStrategy::random})
    if (strategy_name(v) == s) return v;
  throw ConfigError("unknown selection strategy '" + std::string(s) + "'");
}

struct SelectionConfig {
  std::size_t k = 200;
  SelectionStrategy strategy = SelectionStrategy::ppl;
  std::uint64_t seed = 0;
  /// Divide both log-probability sums by the response length.
  bool mean_mode = false;

  void validate() const {
    if (k < 1) throw ConfigError("k must be at least 1");
  }
};

inline void to_json(nlohmann::json& j, const SelectionConfig& c) {
  j = {{"k", c.k}, {"strategy", strategy_name(c.strategy)}, {"seed", c.seed}, {"mean_mode", c.mean_mode}};
}

inline void from_json(const nlohmann::json& j, SelectionConfig& c) {
  c.k = j.at("k").get<std::size_t>();
  c.strategy = parse_strategy(j.at("strategy").get<std::string>());
  c.seed = j.at("seed").get<std::uint64_t>();
  c.mean_mode = j.value("mean_mode", false);
}

/// A model plus an optional adapter, viewed as one scorer.
struct ModelView {
  const LanguageModel* model = nullptr;
  const AdapterState* adapter = nullptr;
};

struct ScoredEntry {
  TransferEntry entry;
  double delta_ppl = 0.0;
  double teacher_logprob_sum = 0.0;
  double student_logprob_sum = 0.0;
  /// Set when a scoring prompt overflowed the window; such entries rank last.
  bool excluded = false;
  double kl = 0.0;
  bool has_kl = false;
};

inline double sum_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

namespace selection {

/// Teacher conditions on the context plus the query template; the student
/// on the template alone (nothing at all for open entries).
inline TokenSequence teacher_scoring_prefix(const Context& context, const TransferEntry& e, const Vocabulary& v) {
  return teacher_prefix(context, e.kind == EntryKind::qa ? e.query : std::string_view{}, v);
}

inline TokenSequence student_scoring_prefix(const TransferEntry& e, const Vocabulary& v) {
  return student_prefix(e.kind == EntryKind::qa ? e.query : std::string_view{}, v);
}

}  // namespace selection

/// Teacher and student log-probability sums of the response and their
/// difference (teacher minus student).
inline ScoredEntry ppl_discrepancy(ModelView teacher, ModelView student, const Context& context,
                                   const TransferEntry& entry, bool mean_mode = false) {
  ScoredEntry s;
  s.entry = entry;
  const auto tp = selection::teacher_scoring_prefix(context, entry, teacher.model->vocabulary());
  const auto sp = selection::student_scoring_prefix(entry, student.model->vocabulary());
  s.teacher_logprob_sum = sum_of(score_logprobs(*teacher.model, teacher.adapter, tp, entry.response));
  s.student_logprob_sum = sum_of(score_logprobs(*student.model, student.adapter, sp, entry.response));
  if (mean_mode && !entry.response.empty()) {
    s.teacher_logprob_sum /= static_cast<double>(entry.response.size());
    s.student_logprob_sum /= static_cast<double>(entry.response.size());
  }
  s.delta_ppl = s.teacher_logprob_sum - s.student_logprob_sum;
  return s;
}

/// Mean over response positions of KL(teacher || student); 0 for an empty response.
inline double kl_score(ModelView teacher, ModelView student, const Context& context, const TransferEntry& entry) {
  if (entry.response.empty()) return 0.0;
  const auto tp = selection::teacher_scoring_prefix(context, entry, teacher.model->vocabulary());
  const auto sp = selection::student_scoring_prefix(entry, student.model->vocabulary());
  Matrix lp = target_log_probs(*teacher.model, teacher.adapter, tp, entry.response);
  Matrix lq = target_log_probs(*student.model, student.adapter, sp, entry.response);
  double sum = 0.0;
  for (Eigen::Index t = 0; t < lp.rows(); ++t) sum += losses::fkl_row(lp.row(t), lq.row(t), nullptr);
  return sum / static_cast<double>(lp.rows());
}

/// Scores every entry in order. Overflowing entries are kept and flagged.
inline std::vector<ScoredEntry> score_all(ModelView teacher, ModelView student, const Context& context,
                                          const TransferSet& set, bool with_kl = false, bool mean_mode = false) {
  std::vector<ScoredEntry> out;
  out.reserve(set.entries.size());
  for (const auto& e : set.entries) {
    try {
      ScoredEntry s = ppl_discrepancy(teacher, student, context, e, mean_mode);
      if (with_kl) {
        s.kl = kl_score(teacher, student, context, e);
        s.has_kl = true;
      }
      out.push_back(std::move(s));
    } catch (const WindowOverflow& err) {
      ScoredEntry s;
      s.entry = e;
      s.excluded = true;
      warn(std::string("excluding entry from selection: ") + err.what());
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Indices (ascending) of the selected entries.
inline std::vector<std::size_t> select_indices(const std::vector<ScoredEntry>& scored, const SelectionConfig& cfg) {
  cfg.validate();
  const std::size_t n = scored.size();
  if (n == 0) throw ConfigError("cannot select from an empty scored set");
  if (cfg.k > n) warn("k=" + std::to_string(cfg.k) + " exceeds the " + std::to_string(n) + " scored entries; keeping all");
  const std::size_t k = std::min(cfg.k, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Excluded entries go last in every strategy.
  auto included_first = [&](std::size_t a, std::size_t b) { return !scored[a].excluded && scored[b].excluded; };
  switch (cfg.strategy) {
    case SelectionStrategy::ppl:
    case SelectionStrategy::kl: {
      const bool use_kl = cfg.strategy == SelectionStrategy::kl;
      if (use_kl)
        for (const auto& s : scored)
          if (!s.excluded && !s.has_kl) throw ConfigError("kl selection needs entries scored with kl");
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scored[a].excluded != scored[b].excluded) return included_first(a, b);
        const double va = use_kl ? scored[a].kl : scored[a].delta_ppl;
        const double vb = use_kl ? scored[b].kl : scored[b].delta_ppl;
        return va > vb;
      });
      break;
    }
    case SelectionStrategy::random: {
      std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return !scored[i].excluded; });
      const auto n_in = static_cast<std::size_t>(
          std::count_if(scored.begin(), scored.end(), [](const ScoredEntry& s) { return !s.excluded; }));
      Rng rng(derive_seed(cfg.seed, "select.random"));
      // Partial Fisher-Yates within the included block, then the excluded block.
      auto shuffle_prefix = [&](std::size_t begin, std::size_t end, std::size_t count) {
        for (std::size_t i = 0; i < count && begin + i < end; ++i)
          std::swap(order[begin + i], order[begin + i + uniform_index(rng, end - begin - i)]);
      };
      shuffle_prefix(0, n_in, std::min(k, n_in));
      if (k > n_in) shuffle_prefix(n_in, n, k - n_in);
      break;
    }
  }
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

/// The selected subset as a transfer set, entries in original order.
inline TransferSet select_top_k(const TransferSet& set, const std::vector<ScoredEntry>& scored,
                                const SelectionConfig& cfg) {
  if (scored.size() != set.entries.size()) throw Error("scored list does not match the transfer set");
  TransferSet out = set;
  out.entries.clear();
  for (auto i : select_indices(scored, cfg)) out.entries.push_back(set.entries[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Scored-set file: the transfer-set format plus score fields per record.

struct ScoredSetFile {
  TransferSet set;
  std::vector<ScoredEntry> scored;
  std::vector<bool> selected;
  SelectionConfig config;
};

inline void write_scored_set(const std::filesystem::path& path, const ScoredSetFile& f) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  auto header = transfer_header(f.set);
  header["selection"] = f.config;
  out << header.dump() << '\n';
  for (std::size_t i = 0; i < f.scored.size(); ++i) {
    const auto& s = f.scored[i];
    auto j = entry_to_json(s.entry);
    j["delta_ppl"] = s.delta_ppl;
    j["teacher_logprob_sum"] = s.teacher_logprob_sum;
    j["student_logprob_sum"] = s.student_logprob_sum;
    j["excluded"] = s.excluded;
    if (s.has_kl) j["kl"] = s.kl;
    j["selected"] = i < f.selected.size() && f.selected[i];
    out << j.dump() << '\n';
  }
  if (!out) throw Error("failed writing " + path.string());
}

inline ScoredSetFile read_scored_set(const std::filesystem::path& path) {
  ScoredSetFile f;
  f.set = read_transfer_set(path, [&](const nlohmann::json& j) {
    ScoredEntry s;
    s.delta_ppl = j.at("delta_ppl").get<double>();
    s.teacher_logprob_sum = j.at("teacher_logprob_sum").get<double>();
    s.student_logprob_sum = j.at("student_logprob_sum").get<double>();
    s.excluded = j.at("excluded").get<bool>();
    if (j.contains("kl")) {
      s.kl = j.at("kl").get<double>();
      s.has_kl = true;
    }
    f.selected.push_back(j.value("selected", false));
    f.scored.push_back(std::move(s));
  });
  for (std::size_t i = 0; i < f.scored.size(); ++i) f.scored[i].entry = f.set.entries[i];
  std::ifstream in(path, std::ios::binary);
  std::string header;
  std::getline(in, header);
  auto h = nlohmann::json::parse(header);
  if (h.contains("selection")) f.config = h.at("selection").get<SelectionConfig>();
  return f;
}

/// The entries marked selected, as a transfer set.
inline TransferSet selected_subset(const ScoredSetFile& f) {
  TransferSet out = f.set;
  out.entries.clear();
  for (std::size_t i = 0; i < f.set.entries.size(); ++i)
    if (f.selected[i]) out.entries.push_back(f.set.entries[i]);
  return out;
}

}  // namespace ctxmem
