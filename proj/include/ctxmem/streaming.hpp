#pragma once

// Sequential transformation of contexts longer than the window: each chunk
// is elicited, selected and consolidated in turn, and only a suffix of the
// original context is kept for prompting at inference time.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/consolidation.hpp"
#include "ctxmem/elicitation.hpp"
#include "ctxmem/selection.hpp"

namespace ctxmem {

/// Stage configurations of one context-to-parameters transformation.
struct PipelineConfig {
  ElicitationConfig elicitation;
  SelectionConfig selection;
  ConsolidationConfig consolidation;
};

inline nlohmann::json pipeline_to_json(const PipelineConfig& c) {
  return {{"elicitation", c.elicitation}, {"selection", c.selection}, {"consolidation", c.consolidation}};
}

struct TurnResult {
  TransferSet transfer;
  std::vector<ScoredEntry> scored;
  std::vector<std::size_t> selected;
  ConsolidationResult consolidation;
};

/// Elicit, select and consolidate one context. Teacher and student both
/// start from base + `prior`; the teacher additionally sees the context.
inline TurnResult transform_context(const AdaptableModel& model, const AdapterState* prior, const Context& context,
                                    const PipelineConfig& cfg) {
  TurnResult r;
  r.transfer = build_transfer_set(model, context, cfg.elicitation, prior);
  const ModelView view{&model, prior};
  r.scored = score_all(view, view, context, r.transfer, cfg.selection.strategy == SelectionStrategy::kl,
                       cfg.selection.mean_mode);
  r.selected = select_indices(r.scored, cfg.selection);
  TransferSet subset = r.transfer;
  subset.entries.clear();
  for (auto i : r.selected) subset.entries.push_back(r.transfer.entries[i]);
  r.consolidation = consolidate(model, prior, context, subset, cfg.consolidation);
  return r;
}

enum class AdapterContinuity { continue_in_place, merge };

inline std::string_view continuity_name(AdapterContinuity c) {
  return c == AdapterContinuity::merge ? "merge" : "continue";
}

inline AdapterContinuity parse_continuity(std::string_view s) {
  if (s == "continue") return AdapterContinuity::continue_in_place;
  if (s == "merge") return AdapterContinuity::merge;
  throw ConfigError("unknown adapter continuity '" + std::string(s) + "'");
}

/// 5000 tokens for an 8K window, scaled proportionally for other windows.
inline std::size_t default_chunk_length(std::size_t window) {
  return std::max<std::size_t>(1, 5000 * window / 8192);
}

struct StreamConfig {
  std::size_t chunk_length = 5000;  // 0 selects default_chunk_length(window)
  double retention_ratio = 0.1;
  PipelineConfig pipeline;
  AdapterContinuity continuity = AdapterContinuity::continue_in_place;

  void validate(std::size_t window) const {
    if (!(retention_ratio >= 0.0 && retention_ratio <= 1.0)) throw ConfigError("retention ratio must be in [0, 1]");
    const std::size_t len = chunk_length ? chunk_length : default_chunk_length(window);
    if (len >= window)
      throw ConfigError("chunk_length " + std::to_string(len) + " leaves no room for prompts in a " +
                        std::to_string(window) + "-token window");
  }
};

/// Contiguous chunks of `chunk_length` tokens (the last may be shorter).
inline std::vector<Context> chunk_context(const Context& context, std::size_t chunk_length,
                                          const Vocabulary& vocab = Vocabulary::reference()) {
  if (chunk_length < 1) throw ConfigError("chunk_length must be at least 1");
  std::vector<Context> out;
  for (std::size_t b = 0, i = 0; b < context.size(); b += chunk_length, ++i)
    out.push_back(context.slice(b, std::min(context.size(), b + chunk_length), context.id + "#" + std::to_string(i),
                                vocab));
  return out;
}

/// Number of suffix tokens kept for retention ratio rho: round(rho * n), halves up.
inline std::size_t retained_length(std::size_t n, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("retention ratio must be in [0, 1]");
  return std::min(n, static_cast<std::size_t>(std::round(rho * static_cast<double>(n))));
}

inline Context retained_suffix(const Context& context, double rho, const Vocabulary& vocab = Vocabulary::reference()) {
  const std::size_t keep = retained_length(context.size(), rho);
  if (keep == context.size()) return context;
  return context.slice(context.size() - keep, context.size(), context.id + "#suffix", vocab);
}

struct TurnAudit {
  std::size_t turn = 0;
  std::size_t chunk_begin = 0, chunk_end = 0;
  std::size_t transfer_entries = 0;
  std::size_t selected_entries = 0;
  TrainRecord record;
  std::string transfer_file, scored_file, checkpoint_file;
};

struct StreamState {
  std::size_t turn = 0;  // consolidations performed
  std::shared_ptr<const AdaptableModel> model;
  std::optional<AdapterState> adapter;
  std::size_t chunks_consumed = 0;
  Context retained;
  std::vector<TurnAudit> turns;
  /// Largest prompt submitted during any turn.
  std::size_t peak_context_tokens = 0;
  AdapterContinuity continuity = AdapterContinuity::continue_in_place;

  const AdapterState* adapter_ptr() const { return adapter ? &*adapter : nullptr; }
};

/// Raised when a turn fails; carries the state after the last completed turn.
class StreamError : public Error {
 public:
  StreamError(const std::string& what, StreamState last_good) : Error(what), last_good_(std::move(last_good)) {}
  const StreamState& last_good() const { return last_good_; }

 private:
  StreamState last_good_;
};

namespace streaming {

/// Turn 0 uses the configured stage seeds unchanged, so a one-chunk stream
/// reproduces a single transformation; later turns derive fresh seeds.
inline PipelineConfig turn_config(const PipelineConfig& base, std::size_t turn) {
  PipelineConfig c = base;
  if (turn > 0) {
    c.elicitation.seed = derive_seed(base.elicitation.seed, "turn", turn);
    c.selection.seed = derive_seed(base.selection.seed, "turn", turn);
    c.consolidation.seed = derive_seed(base.consolidation.seed, "turn", turn);
  }
  return c;
}

inline nlohmann::json audit_to_json(const TurnAudit& a) {
  return {{"turn", a.turn},
          {"chunk_token_range", {a.chunk_begin, a.chunk_end}},
          {"transfer_entries", a.transfer_entries},
          {"selected_entries", a.selected_entries},
          {"transfer_set_file", a.transfer_file},
          {"scored_set_file", a.scored_file},
          {"checkpoint_file", a.checkpoint_file},
          {"train_record", a.record}};
}

}  // namespace streaming

/// Runs one transformation per chunk in order. When `out_dir` is given,
/// each turn's transfer set, scored set and adapter checkpoint are written
/// there along with stream.json.
inline StreamState sequential_transform(std::shared_ptr<const AdaptableModel> model, const Context& long_context,
                                        const StreamConfig& cfg,
                                        const std::optional<std::filesystem::path>& out_dir = std::nullopt) {
  cfg.validate(model->context_window());
  const std::size_t chunk_len = cfg.chunk_length ? cfg.chunk_length : default_chunk_length(model->context_window());
  const Vocabulary& vocab = model->vocabulary();
  StreamState state;
  state.model = model;
  state.continuity = cfg.continuity;
  if (out_dir) std::filesystem::create_directories(*out_dir);

  const auto chunks = chunk_context(long_context, chunk_len, vocab);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    const Context& chunk = chunks[i];
    StreamState next = state;
    try {
      TurnResult r = transform_context(*next.model, next.adapter_ptr(), chunk, streaming::turn_config(cfg.pipeline, i));
      TurnAudit audit;
      audit.turn = i + 1;
      audit.chunk_begin = i * chunk_len;
      audit.chunk_end = audit.chunk_begin + chunk.size();
      audit.transfer_entries = r.transfer.entries.size();
      audit.selected_entries = r.selected.size();
      audit.record = r.consolidation.record;
      next.peak_context_tokens = std::max({next.peak_context_tokens, r.transfer.max_prompt_tokens, chunk.size()});
      if (out_dir) {
        const std::string stem = "turn" + std::to_string(i + 1);
        audit.transfer_file = stem + ".transfer.jsonl";
        audit.scored_file = stem + ".scored.jsonl";
        audit.checkpoint_file = stem + ".adapter";
        write_transfer_set(*out_dir / audit.transfer_file, r.transfer);
        ScoredSetFile sf{r.transfer, r.scored, std::vector<bool>(r.scored.size(), false), cfg.pipeline.selection};
        for (auto s : r.selected) sf.selected[s] = true;
        write_scored_set(*out_dir / audit.scored_file, sf);
        save_adapter(*out_dir / audit.checkpoint_file, r.consolidation.adapter);
      }
      if (cfg.continuity == AdapterContinuity::merge) {
        next.model = next.model->merge(r.consolidation.adapter);
        next.adapter.reset();
      } else {
        next.adapter = std::move(r.consolidation.adapter);
      }
      next.turns.push_back(std::move(audit));
      next.turn = i + 1;
      next.chunks_consumed = i + 1;
    } catch (const Error& e) {
      throw StreamError("turn " + std::to_string(i + 1) + " failed: " + e.what(), state);
    }
    state = std::move(next);
  }
  state.retained = retained_suffix(long_context, cfg.retention_ratio, vocab);

  if (out_dir) {
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& a : state.turns) turns.push_back(streaming::audit_to_json(a));
    nlohmann::json doc = {{"context_id", long_context.id},
                          {"context_tokens", long_context.size()},
                          {"chunk_length", chunk_len},
                          {"retention_ratio", cfg.retention_ratio},
                          {"retained_tokens", state.retained.size()},
                          {"continuity", continuity_name(cfg.continuity)},
                          {"peak_context_tokens", state.peak_context_tokens},
                          {"pipeline", pipeline_to_json(cfg.pipeline)},
                          {"turns", turns}};
    std::ofstream out(*out_dir / "stream.json", std::ios::binary);
    out << doc.dump(2) << '\n';
    if (!out) throw Error("failed writing stream manifest");
  }
  return state;
}

/// Greedy answer from [retained context ++ template(question)] under the final model.
inline TokenSequence infer_with_memory(const StreamState& state, std::string_view question,
                                       std::size_t max_tokens = 32) {
  const auto prompt = teacher_prefix(state.retained, question, state.model->vocabulary());
  SampleOptions opts;
  opts.temperature = 0.0;
  opts.max_tokens = max_tokens;
  return sample(*state.model, state.adapter_ptr(), prompt, opts);
}

}  // namespace ctxmem
