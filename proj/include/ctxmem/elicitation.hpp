#pragma once

// Transfer-set construction: queries sampled from the teacher (or a
// backend's query synthesizer), context-grounded responses, and open
// continuations of the raw context.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/backend.hpp"
#include "ctxmem/cloze.hpp"
#include "ctxmem/context.hpp"
#include "ctxmem/prompts.hpp"

namespace ctxmem {

enum class QuerySource { automatic, prompt, synthesizer };

inline std::string_view query_source_name(QuerySource s) {
  switch (s) {
    case QuerySource::automatic: return "automatic";
    case QuerySource::prompt: return "prompt";
    case QuerySource::synthesizer: return "synthesizer";
  }
  return "?";
}

inline QuerySource parse_query_source(std::string_view s) {
  for (auto q : {QuerySource::automatic, QuerySource::prompt, QuerySource::synthesizer})
    if (query_source_name(q) == s) return q;
  throw ConfigError("unknown query source '" + std::string(s) + "'");
}

struct ElicitationConfig {
  std::size_t n_qa = 200;
  std::size_t n_open = 200;
  std::size_t entry_length = 512;
  std::size_t queries_per_prompt = 20;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t max_retries = 5;
  /// automatic uses the backend's synthesizer when it registers one.
  QuerySource query_source = QuerySource::automatic;

  void validate() const {
    if (n_qa + n_open == 0) throw ConfigError("n_qa and n_open cannot both be zero");
    if (entry_length < 1) throw ConfigError("entry_length must be at least 1");
    if (queries_per_prompt < 1) throw ConfigError("queries_per_prompt must be at least 1");
    if (!(temperature >= 0.0)) throw ConfigError("temperature must be nonnegative");
  }
};

inline void to_json(nlohmann::json& j, const ElicitationConfig& c) {
  j = {{"n_qa", c.n_qa},
       {"n_open", c.n_open},
       {"entry_length", c.entry_length},
       {"queries_per_prompt", c.queries_per_prompt},
       {"temperature", c.temperature},
       {"seed", c.seed},
       {"max_retries", c.max_retries},
       {"query_source", query_source_name(c.query_source)}};
}

inline void from_json(const nlohmann::json& j, ElicitationConfig& c) {
  c.n_qa = j.at("n_qa").get<std::size_t>();
  c.n_open = j.at("n_open").get<std::size_t>();
  c.entry_length = j.at("entry_length").get<std::size_t>();
  c.queries_per_prompt = j.at("queries_per_prompt").get<std::size_t>();
  c.temperature = j.at("temperature").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.max_retries = j.value("max_retries", std::size_t{5});
  c.query_source = parse_query_source(j.value("query_source", std::string("automatic")));
}

enum class EntryKind { qa, open };

struct TransferEntry {
  EntryKind kind = EntryKind::qa;
  std::string query;  // empty for open entries
  TokenSequence query_tokens;
  TokenSequence response;
  std::string response_text;
  std::string context_id;
  std::uint64_t seed = 0;
  /// Hash of the teacher prompt the response was sampled from.
  std::string prompt_hash;

  bool operator==(const TransferEntry&) const = default;
};

struct TransferSet {
  std::string context_id;
  std::string context_text;
  std::vector<TransferEntry> entries;
  ElicitationConfig config;
  /// "prompt" or "synthesizer"; the latter flags the cloze fallback.
  std::string query_source = "prompt";
  /// Longest prompt submitted to the backend while building the set.
  std::size_t max_prompt_tokens = 0;

  std::size_t count(EntryKind k) const {
    return static_cast<std::size_t>(
        std::count_if(entries.begin(), entries.end(), [&](const TransferEntry& e) { return e.kind == k; }));
  }
};

/// Extracts "N. text" lines with 1 <= N <= expected, stopping at the "|||||"
/// sentinel. Numbering gaps and extra whitespace are tolerated.
inline std::vector<std::string> parse_queries(std::string_view raw, std::size_t expected) {
  std::string_view body = raw;
  if (auto stop = body.find("|||||"); stop != std::string_view::npos) body = body.substr(0, stop);
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= body.size()) {
    auto nl = body.find('\n', pos);
    std::string_view line = body.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? body.size() + 1 : nl + 1;
    line = trim(line);
    std::size_t digits = 0;
    while (digits < line.size() && std::isdigit(static_cast<unsigned char>(line[digits]))) ++digits;
    if (digits == 0 || digits > 9 || digits >= line.size() || line[digits] != '.') continue;
    const std::size_t n = std::stoul(std::string(line.substr(0, digits)));
    if (n < 1 || n > expected) continue;
    auto text = trim(line.substr(digits + 1));
    if (!text.empty()) out.emplace_back(text);
  }
  if (out.empty()) throw ParseError("no numbered queries found in model output", std::string(raw));
  return out;
}

/// Inverse of parse_queries on well-formed input.
inline std::string render_queries(const std::vector<std::string>& queries) {
  std::string out;
  for (std::size_t i = 0; i < queries.size(); ++i) out += std::to_string(i + 1) + ". " + queries[i] + "\n";
  return out + "|||||";
}

namespace elicitation {

inline bool uses_synthesizer(const LanguageModel& model, const ElicitationConfig& cfg) {
  switch (cfg.query_source) {
    case QuerySource::prompt: return false;
    case QuerySource::synthesizer:
      if (!model.query_synthesizer()) throw ConfigError(model.identifier() + " registers no query synthesizer");
      return true;
    case QuerySource::automatic: return model.query_synthesizer().has_value();
  }
  return false;
}

}  // namespace elicitation

/// Up to n_qa distinct queries about `context`. Prompted generation samples
/// batches of the elicitation prompt under fresh seeds; a batch whose output
/// does not parse is retried up to max_retries times before failing.
inline std::vector<std::string> generate_queries(const LanguageModel& model, const Context& context,
                                                 const ElicitationConfig& cfg,
                                                 const AdapterState* teacher_adapter = nullptr,
                                                 std::size_t* max_prompt = nullptr) {
  std::vector<std::string> out;
  if (cfg.n_qa == 0) return out;
  std::set<std::string> seen;
  auto add = [&](std::string q) {
    if (out.size() < cfg.n_qa && seen.insert(q).second) out.push_back(std::move(q));
  };
  if (elicitation::uses_synthesizer(model, cfg)) {
    for (auto& q : (*model.query_synthesizer())(context.text, derive_seed(cfg.seed, "synthesize"))) add(std::move(q));
    if (out.size() < cfg.n_qa)
      warn("query synthesizer produced " + std::to_string(out.size()) + " distinct queries; " +
           std::to_string(cfg.n_qa) + " requested");
    return out;
  }

  const TokenSequence prompt = tokenize(model, build_query_prompt(context.text));
  if (prompt.size() >= model.context_window())
    throw WindowOverflow(prompt.size() + 1, model.context_window(), "elicitation prompt");
  if (max_prompt) *max_prompt = std::max(*max_prompt, prompt.size());
  std::size_t batch = 0, parse_failures = 0, stale = 0;
  while (out.size() < cfg.n_qa) {
    SampleOptions opts;
    opts.temperature = cfg.temperature;
    opts.max_tokens = model.context_window() - prompt.size();
    opts.seed = derive_seed(cfg.seed, "queries", batch++);
    const std::string raw = detokenize(model, sample(model, teacher_adapter, prompt, opts));
    std::vector<std::string> parsed;
    try {
      parsed = parse_queries(raw, cfg.queries_per_prompt);
      parse_failures = 0;
    } catch (const ParseError&) {
      if (++parse_failures > cfg.max_retries) throw;
      continue;
    }
    const std::size_t before = out.size();
    for (auto& q : parsed) add(std::move(q));
    stale = out.size() == before ? stale + 1 : 0;
    if (stale > cfg.max_retries) {
      warn("query generation stalled at " + std::to_string(out.size()) + " distinct queries; " +
           std::to_string(cfg.n_qa) + " requested");
      break;
    }
  }
  return out;
}

/// One response per query, sampled with the full context in the teacher
/// prompt. Queries whose prompt does not fit are skipped with a warning.
inline std::vector<TransferEntry> generate_responses(const LanguageModel& model, const Context& context,
                                                     const std::vector<std::string>& queries,
                                                     const ElicitationConfig& cfg,
                                                     const AdapterState* teacher_adapter = nullptr,
                                                     std::size_t* max_prompt = nullptr) {
  std::vector<TransferEntry> out;
  std::size_t skipped = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const TokenSequence prompt = teacher_prefix(context, queries[i], model.vocabulary());
    if (prompt.size() >= model.context_window()) {
      warn("skipping query " + std::to_string(i) + ": teacher prompt has " + std::to_string(prompt.size()) +
           " tokens, window is " + std::to_string(model.context_window()));
      ++skipped;
      continue;
    }
    if (max_prompt) *max_prompt = std::max(*max_prompt, prompt.size());
    TransferEntry e;
    e.kind = EntryKind::qa;
    e.query = queries[i];
    e.query_tokens = tokenize(model, queries[i]);
    e.context_id = context.id;
    e.seed = derive_seed(cfg.seed, "response", i);
    e.prompt_hash = hash_tokens(prompt);
    e.response = sample(model, teacher_adapter, prompt, SampleOptions{cfg.temperature, cfg.entry_length, e.seed, {}});
    e.response_text = detokenize(model, e.response);
    out.push_back(std::move(e));
  }
  if (!queries.empty() && skipped == queries.size())
    throw WindowOverflow(context.size() + 1, model.context_window(), "every teacher prompt");
  return out;
}

/// n_open continuations of the raw context, each under its own seed.
inline std::vector<TransferEntry> generate_open_continuations(const LanguageModel& model, const Context& context,
                                                              const ElicitationConfig& cfg,
                                                              const AdapterState* teacher_adapter = nullptr,
                                                              std::size_t* max_prompt = nullptr) {
  std::vector<TransferEntry> out;
  if (cfg.n_open == 0) return out;
  const TokenSequence prompt = teacher_prefix(context, "", model.vocabulary());
  if (prompt.size() >= model.context_window())
    throw WindowOverflow(prompt.size() + 1, model.context_window(), "open-continuation prompt");
  if (max_prompt) *max_prompt = std::max(*max_prompt, prompt.size());
  const std::string hash = hash_tokens(prompt);
  for (std::size_t i = 0; i < cfg.n_open; ++i) {
    TransferEntry e;
    e.kind = EntryKind::open;
    e.context_id = context.id;
    e.seed = derive_seed(cfg.seed, "open", i);
    e.prompt_hash = hash;
    e.response = sample(model, teacher_adapter, prompt, SampleOptions{cfg.temperature, cfg.entry_length, e.seed, {}});
    e.response_text = detokenize(model, e.response);
    out.push_back(std::move(e));
  }
  return out;
}

/// `teacher_adapter` lets a later streaming turn elicit from the model it has built so far.
inline TransferSet build_transfer_set(const LanguageModel& model, const Context& context, const ElicitationConfig& cfg,
                                      const AdapterState* teacher_adapter = nullptr) {
  cfg.validate();
  TransferSet set;
  set.context_id = context.id;
  set.context_text = context.text;
  set.config = cfg;
  set.query_source = elicitation::uses_synthesizer(model, cfg) ? "synthesizer" : "prompt";
  auto queries = generate_queries(model, context, cfg, teacher_adapter, &set.max_prompt_tokens);
  set.entries = generate_responses(model, context, queries, cfg, teacher_adapter, &set.max_prompt_tokens);
  auto open = generate_open_continuations(model, context, cfg, teacher_adapter, &set.max_prompt_tokens);
  set.entries.insert(set.entries.end(), std::make_move_iterator(open.begin()), std::make_move_iterator(open.end()));
  return set;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON: a header record, then one record per entry.

inline std::string_view entry_kind_name(EntryKind k) { return k == EntryKind::qa ? "qa" : "open"; }

inline EntryKind parse_entry_kind(std::string_view s) {
  if (s == "qa") return EntryKind::qa;
  if (s == "open") return EntryKind::open;
  throw Error("unknown entry kind '" + std::string(s) + "'");
}

inline nlohmann::json entry_to_json(const TransferEntry& e) {
  return {{"context_id", e.context_id},       {"kind", entry_kind_name(e.kind)},  {"query_text", e.query},
          {"response_text", e.response_text}, {"query_tokens", e.query_tokens}, {"response_tokens", e.response},
          {"seed", e.seed},                   {"prompt_hash", e.prompt_hash}};
}

inline TransferEntry entry_from_json(const nlohmann::json& j) {
  TransferEntry e;
  e.context_id = j.at("context_id").get<std::string>();
  e.kind = parse_entry_kind(j.at("kind").get<std::string>());
  e.query = j.at("query_text").get<std::string>();
  e.response_text = j.at("response_text").get<std::string>();
  e.query_tokens = j.at("query_tokens").get<TokenSequence>();
  e.response = j.at("response_tokens").get<TokenSequence>();
  e.seed = j.at("seed").get<std::uint64_t>();
  e.prompt_hash = j.at("prompt_hash").get<std::string>();
  return e;
}

inline nlohmann::json transfer_header(const TransferSet& s) {
  return {{"record", "header"},
          {"context_id", s.context_id},
          {"context_text", s.context_text},
          {"config", s.config},
          {"query_source", s.query_source},
          {"max_prompt_tokens", s.max_prompt_tokens},
          {"entries", s.entries.size()}};
}

inline void transfer_header_from_json(const nlohmann::json& h, TransferSet& s) {
  if (h.value("record", "") != "header") throw Error("transfer-set file lacks a header record");
  s.context_id = h.at("context_id").get<std::string>();
  s.context_text = h.at("context_text").get<std::string>();
  s.config = h.at("config").get<ElicitationConfig>();
  s.query_source = h.at("query_source").get<std::string>();
  s.max_prompt_tokens = h.value("max_prompt_tokens", std::size_t{0});
}

inline void write_transfer_set(const std::filesystem::path& path, const TransferSet& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << transfer_header(s).dump() << '\n';
  for (const auto& e : s.entries) out << entry_to_json(e).dump() << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

/// Reads the header and entry records of a JSONL file; `extra` sees each
/// entry record (used by the scored-set reader).
inline TransferSet read_transfer_set(const std::filesystem::path& path,
                                     const std::function<void(const nlohmann::json&)>& extra = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + " is empty");
  TransferSet s;
  try {
    transfer_header_from_json(nlohmann::json::parse(line), s);
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      auto j = nlohmann::json::parse(line);
      s.entries.push_back(entry_from_json(j));
      if (extra) extra(j);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(path.string() + ": malformed record: " + e.what());
  }
  return s;
}

inline Context transfer_context(const TransferSet& s, const Vocabulary& vocab = Vocabulary::reference()) {
  return Context::from_text(s.context_id, s.context_text, vocab);
}

}  // namespace ctxmem
