#pragma once

// Metrics, experiment conditions and the recovery-rate report.

#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/backend.hpp"
#include "ctxmem/prompts.hpp"
#include "ctxmem/streaming.hpp"
#include "ctxmem/tasks.hpp"

namespace ctxmem {

// ---- metrics ----------------------------------------------------------------

/// Lowercase, trim, collapse internal whitespace, strip surrounding punctuation.
inline std::string normalize_answer(std::string_view s) {
  std::string collapsed;
  bool pending_space = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !collapsed.empty();
      continue;
    }
    if (pending_space) collapsed.push_back(' ');
    pending_space = false;
    collapsed.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  std::size_t b = 0, e = collapsed.size();
  while (b < e && (std::ispunct(static_cast<unsigned char>(collapsed[b])) || collapsed[b] == ' ')) ++b;
  while (e > b && (std::ispunct(static_cast<unsigned char>(collapsed[e - 1])) || collapsed[e - 1] == ' ')) --e;
  return collapsed.substr(b, e - b);
}

inline int exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1 : 0;
}

/// exp of the mean negative log-probability of `target` after `prefix`.
inline double perplexity(const LanguageModel& model, const AdapterState* adapter, std::span<const TokenId> prefix,
                         std::span<const TokenId> target) {
  if (target.empty()) throw ConfigError("perplexity of an empty target is undefined");
  const auto lp = score_logprobs(model, adapter, prefix, target);
  double s = 0.0;
  for (double v : lp) s += v;
  return std::exp(-s / static_cast<double>(lp.size()));
}

inline double mc_accuracy(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& golds) {
  if (predictions.size() != golds.size()) throw ConfigError("predictions and golds differ in length");
  if (predictions.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < golds.size(); ++i) ok += predictions[i] == golds[i];
  return static_cast<double>(ok) / static_cast<double>(golds.size());
}

/// (M - L) / (U - L); empty when U == L.
inline std::optional<double> recovery_rate(double M, double U, double L) {
  if (U == L) return std::nullopt;
  return (M - L) / (U - L);
}

// ---- conditions -------------------------------------------------------------

enum class Condition { full_context, no_context, local_context, consolidated };

inline std::string_view condition_name(Condition c) {
  switch (c) {
    case Condition::full_context: return "full_context";
    case Condition::no_context: return "no_context";
    case Condition::local_context: return "local_context";
    case Condition::consolidated: return "consolidated";
  }
  return "?";
}

/// Accepts the long names and the short forms full/none/local/consolidated.
inline Condition parse_condition(std::string_view s) {
  if (s == "full" || s == "full_context") return Condition::full_context;
  if (s == "none" || s == "no_context") return Condition::no_context;
  if (s == "local" || s == "local_context") return Condition::local_context;
  if (s == "consolidated") return Condition::consolidated;
  throw ConfigError("unknown condition '" + std::string(s) + "'");
}

inline bool condition_uses_rho(Condition c) {
  return c == Condition::local_context || c == Condition::consolidated;
}

struct ConditionSpec {
  Condition condition = Condition::full_context;
  std::optional<double> rho;

  void validate() const {
    if (condition_uses_rho(condition) != rho.has_value())
      throw ConfigError(std::string(condition_name(condition)) +
                        (rho ? " does not take a retention ratio" : " needs a retention ratio"));
    if (rho && !(*rho >= 0.0 && *rho <= 1.0)) throw ConfigError("retention ratio must be in [0, 1]");
  }
};

enum class MetricKind { exact_match, accuracy, perplexity };

inline std::string_view metric_name(MetricKind m) {
  switch (m) {
    case MetricKind::exact_match: return "exact_match";
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::perplexity: return "perplexity";
  }
  return "?";
}

inline MetricKind parse_metric(std::string_view s) {
  for (auto m : {MetricKind::exact_match, MetricKind::accuracy, MetricKind::perplexity})
    if (metric_name(m) == s) return m;
  throw ConfigError("unknown metric '" + std::string(s) + "'");
}

inline MetricKind metric_for(TaskKind k) {
  switch (k) {
    case TaskKind::text_generation: return MetricKind::perplexity;
    case TaskKind::multiple_choice: return MetricKind::accuracy;
    default: return MetricKind::exact_match;
  }
}

struct ConditionResult {
  MetricKind metric = MetricKind::exact_match;
  /// EM and accuracy as fractions in [0, 1]; perplexity as is. NaN when the prompt exceeds the window.
  double score = 0.0;
  bool exceeds_window = false;
  std::vector<std::string> predictions;
};

/// First line of the greedy output, trimmed.
inline std::string greedy_answer(const LanguageModel& model, const AdapterState* adapter,
                                 std::span<const TokenId> prompt, std::size_t max_tokens = 16) {
  SampleOptions opts;
  opts.temperature = 0.0;
  opts.max_tokens = max_tokens;
  if (auto nl = model.vocabulary().find("\n")) opts.stop_tokens.push_back(*nl);
  const std::string text = detokenize(model, sample(model, adapter, prompt, opts));
  return std::string(trim(text.substr(0, text.find('\n'))));
}

/// Scores every probe with `retained` placed before it in the prompt.
inline ConditionResult evaluate_probes(const LanguageModel& model, const AdapterState* adapter,
                                       const TaskInstance& task, const Context& retained) {
  if (task.probes.empty()) throw ConfigError("task " + task.id + " has no probes");
  ConditionResult r;
  r.metric = metric_for(task.kind);
  const Vocabulary& vocab = model.vocabulary();
  try {
    double total = 0.0;
    for (const auto& probe : task.probes) {
      if (const auto* qa = std::get_if<QaProbe>(&probe)) {
        std::string pred = greedy_answer(model, adapter, teacher_prefix(retained, qa->question, vocab));
        total += exact_match(pred, qa->answer);
        r.predictions.push_back(std::move(pred));
      } else if (const auto* mc = std::get_if<ChoiceProbe>(&probe)) {
        const auto prefix = teacher_prefix(retained, mc->question, vocab);
        std::size_t best = 0;
        double best_lp = -std::numeric_limits<double>::infinity();
        for (std::size_t o = 0; o < mc->options.size(); ++o) {
          const auto lp = score_logprobs(model, adapter, prefix, vocab.encode(" " + mc->options[o]));
          const double s = std::accumulate(lp.begin(), lp.end(), 0.0);
          if (s > best_lp) {
            best_lp = s;
            best = o;
          }
        }
        total += best == mc->gold ? 1.0 : 0.0;
        r.predictions.push_back(mc->options[best]);
      } else {
        const auto& cp = std::get<ContinuationProbe>(probe);
        TokenSequence prefix = retained.tokens;
        prefix.insert(prefix.end(), cp.prefix.begin(), cp.prefix.end());
        total += perplexity(model, adapter, prefix, cp.continuation);
      }
    }
    r.score = total / static_cast<double>(task.probes.size());
  } catch (const WindowOverflow&) {
    r.exceeds_window = true;
    r.score = std::numeric_limits<double>::quiet_NaN();
    r.predictions.clear();
  }
  return r;
}

/// full_context prompts with the whole context, no_context with none,
/// local_context with its last rho share; consolidated uses `adapter` (the
/// transformed model) with the retained suffix.
inline ConditionResult run_condition(const LanguageModel& model, const TaskInstance& task, const ConditionSpec& spec,
                                     const AdapterState* adapter = nullptr) {
  spec.validate();
  const Vocabulary& vocab = model.vocabulary();
  switch (spec.condition) {
    case Condition::full_context: return evaluate_probes(model, nullptr, task, task.context);
    case Condition::no_context: return evaluate_probes(model, nullptr, task, Context{task.context.id, {}, ""});
    case Condition::local_context:
      return evaluate_probes(model, nullptr, task, retained_suffix(task.context, *spec.rho, vocab));
    case Condition::consolidated:
      if (!adapter) throw ConfigError("the consolidated condition needs a transformed model (adapter)");
      return evaluate_probes(model, adapter, task, retained_suffix(task.context, *spec.rho, vocab));
  }
  throw ConfigError("unhandled condition");
}

/// Transforms the task context (streaming when it exceeds one chunk) and
/// evaluates the result with the retained suffix.
inline ConditionResult run_consolidated(std::shared_ptr<const AdaptableModel> model, const TaskInstance& task,
                                        StreamConfig cfg, StreamState* state_out = nullptr) {
  StreamState st = sequential_transform(model, task.context, cfg);
  ConditionResult r = evaluate_probes(*st.model, st.adapter_ptr(), task, st.retained);
  if (state_out) *state_out = std::move(st);
  return r;
}

// ---- results and report -----------------------------------------------------

struct ResultRecord {
  std::string task;
  std::string condition;
  std::optional<double> rho;
  std::string metric = "exact_match";
  double M = 0.0, U = 0.0, L = 0.0;
  std::optional<double> R;
  std::vector<std::uint64_t> seeds;
  std::optional<double> runtime;
  bool exceeds_window = false;

  bool operator==(const ResultRecord&) const = default;
};

inline nlohmann::json record_to_json(const ResultRecord& r) {
  nlohmann::json j = {{"task", r.task},
                      {"condition", r.condition},
                      {"rho", r.rho ? nlohmann::json(*r.rho) : nlohmann::json(nullptr)},
                      {"metric", r.metric},
                      {"M", r.M},
                      {"U", r.U},
                      {"L", r.L},
                      {"R", r.R ? nlohmann::json(*r.R) : nlohmann::json(nullptr)},
                      {"seeds", r.seeds}};
  if (r.runtime) j["runtime"] = *r.runtime;
  if (r.exceeds_window) j["exceeds_window"] = true;
  return j;
}

inline ResultRecord record_from_json(const nlohmann::json& j) {
  ResultRecord r;
  r.task = j.at("task").get<std::string>();
  r.condition = j.at("condition").get<std::string>();
  if (j.contains("rho") && !j.at("rho").is_null()) r.rho = j.at("rho").get<double>();
  r.metric = j.at("metric").get<std::string>();
  parse_metric(r.metric);
  // Exceeds-window results carry NaN, which JSON writes as null.
  auto num = [&](const char* k) {
    return j.at(k).is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at(k).get<double>();
  };
  r.M = num("M");
  r.U = num("U");
  r.L = num("L");
  if (j.contains("R") && !j.at("R").is_null()) r.R = j.at("R").get<double>();
  r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  if (j.contains("runtime")) r.runtime = j.at("runtime").get<double>();
  r.exceeds_window = j.value("exceeds_window", false);
  return r;
}

inline std::string records_to_jsonl(const std::vector<ResultRecord>& records) {
  std::string out;
  for (const auto& r : records) out += record_to_json(r).dump() + "\n";
  return out;
}

inline std::vector<ResultRecord> records_from_jsonl(std::string_view text) {
  std::vector<ResultRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(std::string("malformed results record: ") + e.what());
    }
  }
  return out;
}

namespace report_detail {

inline std::string row_label(const ResultRecord& r) {
  std::string label = r.condition;
  if (r.rho) {
    std::ostringstream s;
    s << label << " rho=" << *r.rho;
    label = s.str();
  }
  return label;
}

inline std::string fixed(double v, int decimals) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(decimals) << v;
  std::string out = s.str();
  if (out == "-0.0" || out == "-0.00") out.erase(0, 1);
  return out;
}

/// Two decimals with the leading zero dropped: 0.74 -> ".74", -0.04 -> "-.04".
inline std::string format_recovery(double r) {
  std::string s = fixed(r, 2);
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  if (s.rfind("-0.", 0) == 0) s.erase(1, 1);
  return s;
}

inline double display_value(const std::string& metric, double v) {
  return metric == "perplexity" ? v : 100.0 * v;
}

inline std::string cell(const std::string& condition, const std::string& metric, double M, double U, double L,
                        bool exceeds) {
  if (exceeds || std::isnan(M)) return "exceeds window";
  std::string y;
  if (condition == "full_context")
    y = "1";
  else if (condition == "no_context")
    y = "0";
  else if (auto r = recovery_rate(M, U, L))
    y = format_recovery(*r);
  else
    y = "n/a";
  return fixed(display_value(metric, M), 1) + "(" + y + ")";
}

}  // namespace report_detail

enum class ReportFormat { table, machine };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "table") return ReportFormat::table;
  if (s == "machine") return ReportFormat::machine;
  throw ConfigError("unknown report format '" + std::string(s) + "'");
}

/// Table: one row per condition, one column per task plus an average over
/// the non-perplexity tasks; each cell is score(recovery). Machine: the
/// records as JSON lines.
inline std::string report(const std::vector<ResultRecord>& records, ReportFormat format = ReportFormat::table) {
  if (format == ReportFormat::machine) return records_to_jsonl(records);
  using namespace report_detail;
  std::vector<std::string> tasks, rows;
  std::map<std::string, std::string> task_metric;
  std::map<std::pair<std::string, std::string>, const ResultRecord*> cells;
  for (const auto& r : records) {
    if (!task_metric.count(r.task)) {
      tasks.push_back(r.task);
      task_metric[r.task] = r.metric;
    }
    const std::string label = row_label(r);
    if (std::find(rows.begin(), rows.end(), label) == rows.end()) rows.push_back(label);
    cells[{label, r.task}] = &r;
  }
  const bool any_avg = std::any_of(tasks.begin(), tasks.end(), [&](const auto& t) { return task_metric[t] != "perplexity"; });

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"condition"};
  header.insert(header.end(), tasks.begin(), tasks.end());
  if (any_avg) header.push_back("avg");
  grid.push_back(header);
  for (const auto& label : rows) {
    std::vector<std::string> line{label};
    double sm = 0, su = 0, sl = 0;
    std::size_t n = 0;
    bool broken = false;
    std::string condition;
    for (const auto& t : tasks) {
      auto it = cells.find({label, t});
      if (it == cells.end()) {
        line.push_back("-");
        if (task_metric[t] != "perplexity") broken = true;
        continue;
      }
      const ResultRecord& r = *it->second;
      condition = r.condition;
      line.push_back(cell(r.condition, r.metric, r.M, r.U, r.L, r.exceeds_window));
      if (r.metric != "perplexity") {
        if (r.exceeds_window || std::isnan(r.M)) broken = true;
        sm += r.M;
        su += r.U;
        sl += r.L;
        ++n;
      }
    }
    if (any_avg) {
      if (broken || n == 0)
        line.push_back("-");
      else
        line.push_back(cell(condition, "exact_match", sm / n, su / n, sl / n, false));
    }
    grid.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : grid)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  std::string out;
  for (const auto& line : grid) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      out += c == 0 ? "" : "  ";
      out += line[c];
      if (c + 1 < line.size()) out.append(width[c] - line[c].size(), ' ');
    }
    out += "\n";
  }
  return out;
}

}  // namespace ctxmem
