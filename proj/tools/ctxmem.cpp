// ctxmem: command-line driver for elicitation, selection, consolidation,
// streaming, evaluation and reporting.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ctxmem/ctxmem.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctxmem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Backend selection: CTXMEM_BACKEND names the backend; only "tiny" ships.
std::shared_ptr<const AdaptableModel> load_model(const std::string& path) {
  const char* env = std::getenv("CTXMEM_BACKEND");
  const std::string backend = env && *env ? env : "tiny";
  if (backend != "tiny") throw ConfigError("unknown backend '" + backend + "' (CTXMEM_BACKEND)");
  if (path.empty()) throw ConfigError("--model is required");
  if (!fs::exists(path)) throw ConfigError("model checkpoint " + path + " does not exist");
  return TinyTransformer::load(path);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Appends one entry to <dir>/manifest.json; earlier entries are never rewritten.
void append_manifest(const fs::path& dir, const std::string& command, const json& config,
                     const std::vector<fs::path>& outputs, const json& results = nullptr) {
  const fs::path path = dir / "manifest.json";
  json doc;
  if (fs::exists(path)) {
    doc = json::parse(read_file(path));
  } else {
    doc = {{"experiment_id", fs::absolute(dir).lexically_normal().filename().string()},
           {"tool_version", std::string(kToolVersion)},
           {"created", utc_now()},
           {"entries", json::array()}};
  }
  json files = json::array();
  for (const auto& o : outputs) {
    if (!fs::exists(o)) throw Error("manifest references missing file " + o.string());
    files.push_back(fs::relative(o, dir).generic_string());
  }
  json entry = {{"command", command}, {"created", utc_now()}, {"tool_version", std::string(kToolVersion)},
                {"config", config},   {"outputs", files}};
  if (!results.is_null()) entry["results"] = results;
  doc["entries"].push_back(std::move(entry));
  std::ofstream out(path, std::ios::binary);
  out << doc.dump(2) << '\n';
  if (!out) throw Error("failed writing " + path.string());
}

fs::path output_dir(const fs::path& file) {
  fs::path dir = file.parent_path();
  if (dir.empty()) dir = ".";
  fs::create_directories(dir);
  return dir;
}

struct ElicitOpts {
  std::string model, context_file, out, query_source = "automatic";
  ElicitationConfig cfg;
};

struct SelectOpts {
  std::string model, transfer_set, out, strategy = "ppl";
  SelectionConfig cfg;
};

struct ConsolidateOpts {
  std::string model, selected, out, loss = "fkl", optimizer;
  std::vector<std::string> targets{"wq", "wv"};
  ConsolidationConfig cfg;
};

struct StreamOpts {
  std::string model, context_file, out_dir, continuity = "continue";
  std::size_t chunk_length = 5000;
  double rho = 0.1;
};

struct EvalOpts {
  std::string model, task_spec, condition, checkpoint, out;
  std::optional<double> rho;
  std::uint64_t seed = 0;
  bool record_runtime = false;
};

struct ReportOpts {
  std::vector<std::string> results;
  std::string format = "table";
};

struct PretrainOpts {
  std::string out;
  PretrainConfig cfg;
  std::size_t log_every = 100;
};

void add_elicit_flags(CLI::App* c, ElicitationConfig& cfg, std::string& query_source) {
  c->add_option("--n-qa", cfg.n_qa, "query-response pairs to elicit")->capture_default_str();
  c->add_option("--n-open", cfg.n_open, "open continuations to sample")->capture_default_str();
  c->add_option("--entry-length", cfg.entry_length, "max tokens per response")->capture_default_str();
  c->add_option("--queries-per-prompt", cfg.queries_per_prompt)->capture_default_str();
  c->add_option("--temperature", cfg.temperature)->capture_default_str();
  c->add_option("--query-source", query_source, "automatic, prompt or synthesizer")->capture_default_str();
}

void add_consolidate_flags(CLI::App* c, ConsolidateOpts& o) {
  c->add_option("--loss", o.loss, "fkl, rkl, akl, dpkd, mse or seqkd")->capture_default_str();
  c->add_option("--lr", o.cfg.learning_rate)->capture_default_str();
  c->add_option("--rank", o.cfg.adapter.rank)->capture_default_str();
  c->add_option("--alpha", o.cfg.adapter.alpha)->capture_default_str();
  c->add_option("--dropout", o.cfg.adapter.dropout)->capture_default_str();
  c->add_option("--targets", o.targets, "adapter target matrices")->capture_default_str();
  c->add_option("--patience", o.cfg.patience)->capture_default_str();
  c->add_option("--max-epochs", o.cfg.max_epochs)->capture_default_str();
  c->add_option("--batch-size", o.cfg.batch_size)->capture_default_str();
  c->add_option("--optimizer", o.optimizer, "sgd or adam (default: backend preference)");
  c->add_option("--cache-teacher", o.cfg.cache_teacher)->capture_default_str();
}

void finish_consolidate_config(ConsolidateOpts& o) {
  o.cfg.loss = parse_loss_kind(o.loss);
  o.cfg.adapter.targets = o.targets;
  o.cfg.optimizer = o.optimizer;
}

int run_elicit(const ElicitOpts& o) {
  ElicitationConfig cfg = o.cfg;
  cfg.query_source = parse_query_source(o.query_source);
  cfg.validate();
  if (o.context_file.empty() || o.out.empty()) throw ConfigError("--context-file and --out are required");
  auto model = load_model(o.model);
  const fs::path ctx_path(o.context_file);
  Context ctx = Context::from_text(ctx_path.stem().string(), read_file(ctx_path), model->vocabulary());
  TransferSet set = build_transfer_set(*model, ctx, cfg);
  const fs::path out(o.out);
  const fs::path dir = output_dir(out);
  write_transfer_set(out, set);
  append_manifest(dir, "elicit",
                  {{"model", o.model}, {"context_file", o.context_file}, {"elicitation", cfg},
                   {"query_source", set.query_source}, {"model_fingerprint", model->fingerprint()}},
                  {out});
  return 0;
}

int run_select(const SelectOpts& o) {
  SelectionConfig cfg = o.cfg;
  cfg.strategy = parse_strategy(o.strategy);
  cfg.validate();
  if (o.transfer_set.empty() || o.out.empty()) throw ConfigError("--transfer-set and --out are required");
  auto model = load_model(o.model);
  TransferSet set = read_transfer_set(o.transfer_set);
  Context ctx = transfer_context(set, model->vocabulary());
  const ModelView view{model.get(), nullptr};
  ScoredSetFile f;
  f.set = set;
  f.config = cfg;
  f.scored = score_all(view, view, ctx, set, cfg.strategy == SelectionStrategy::kl, cfg.mean_mode);
  f.selected.assign(f.scored.size(), false);
  if (!f.scored.empty())
    for (auto i : select_indices(f.scored, cfg)) f.selected[i] = true;
  const fs::path out(o.out);
  const fs::path dir = output_dir(out);
  write_scored_set(out, f);
  append_manifest(dir, "select",
                  {{"model", o.model}, {"transfer_set", o.transfer_set}, {"selection", cfg}}, {out});
  return 0;
}

int run_consolidate(ConsolidateOpts o) {
  finish_consolidate_config(o);
  o.cfg.validate();
  if (o.selected.empty() || o.out.empty()) throw ConfigError("--selected and --out are required");
  auto model = load_model(o.model);
  ScoredSetFile f = read_scored_set(o.selected);
  TransferSet subset = selected_subset(f);
  Context ctx = transfer_context(f.set, model->vocabulary());
  ConsolidationResult r = consolidate(*model, nullptr, ctx, subset, o.cfg);
  const fs::path out(o.out);
  const fs::path dir = output_dir(out);
  save_adapter(out, r.adapter);
  json rec = r.record;
  append_manifest(dir, "consolidate",
                  {{"model", o.model}, {"selected", o.selected}, {"consolidation", o.cfg},
                   {"optimizer", r.record.optimizer}},
                  {out}, {{"train_record", rec}});
  return 0;
}

int run_stream(const StreamOpts& so, ElicitationConfig ecfg, const std::string& query_source, SelectionConfig scfg,
               const std::string& strategy, ConsolidateOpts co, std::uint64_t seed) {
  finish_consolidate_config(co);
  ecfg.query_source = parse_query_source(query_source);
  scfg.strategy = parse_strategy(strategy);
  ecfg.seed = derive_seed(seed, "elicit");
  scfg.seed = derive_seed(seed, "select");
  co.cfg.seed = derive_seed(seed, "consolidate");
  ecfg.validate();
  scfg.validate();
  co.cfg.validate();
  if (so.context_file.empty() || so.out_dir.empty()) throw ConfigError("--context-file and --out-dir are required");
  auto model = load_model(so.model);
  StreamConfig cfg;
  cfg.chunk_length = so.chunk_length;
  cfg.retention_ratio = so.rho;
  cfg.continuity = parse_continuity(so.continuity);
  cfg.pipeline = {ecfg, scfg, co.cfg};
  const fs::path ctx_path(so.context_file);
  Context ctx = Context::from_text(ctx_path.stem().string(), read_file(ctx_path), model->vocabulary());
  const fs::path dir(so.out_dir);
  StreamState st = sequential_transform(model, ctx, cfg, dir);
  std::vector<fs::path> outputs{dir / "stream.json"};
  for (const auto& t : st.turns)
    for (const auto& f : {t.transfer_file, t.scored_file, t.checkpoint_file}) outputs.push_back(dir / f);
  std::ofstream(dir / "retained.txt", std::ios::binary) << st.retained.text;
  outputs.push_back(dir / "retained.txt");
  append_manifest(dir, "stream",
                  {{"model", so.model}, {"context_file", so.context_file}, {"seed", seed},
                   {"chunk_length", so.chunk_length}, {"retention_ratio", so.rho}, {"continuity", so.continuity},
                   {"pipeline", pipeline_to_json(cfg.pipeline)}},
                  outputs, {{"turns", st.turn}, {"peak_context_tokens", st.peak_context_tokens}});
  return 0;
}

/// Task spec: {"kind": ..., "seed": ..., plus generator arguments}.
TaskInstance task_from_spec(const json& j, std::uint64_t fallback_seed) {
  const TaskKind kind = parse_task_kind(j.at("kind").get<std::string>());
  const std::uint64_t seed = j.value("seed", fallback_seed);
  switch (kind) {
    case TaskKind::fact_recall: return gen_fact_recall(seed, j.value("n_facts", 12), j.value("n_probes", 12));
    case TaskKind::manyshot_icl:
      return gen_manyshot_icl(seed, j.value("n_classes", 4), j.value("n_shots", 300), j.value("n_probes", 20));
    case TaskKind::knowledge_update: return gen_knowledge_update(seed, j.value("n_edits", 8), j.value("hops", 1));
    case TaskKind::multiple_choice:
      return gen_multiple_choice(seed, j.value("n_facts", 12), j.value("n_probes", 12), j.value("n_options", 4));
    case TaskKind::text_generation: {
      const std::string corpus = j.contains("corpus_file")
                                     ? read_file(j.at("corpus_file").get<std::string>())
                                     : synthetic_corpus(seed, j.value("corpus_sentences", 400));
      TextSliceLengths lengths;
      lengths.context_tokens = j.value("context_tokens", lengths.context_tokens);
      lengths.target_tokens = j.value("target_tokens", lengths.target_tokens);
      return gen_text_generation(corpus, seed, lengths);
    }
  }
  throw ConfigError("unhandled task kind");
}

int run_eval(const EvalOpts& o) {
  ConditionSpec spec{parse_condition(o.condition), o.rho};
  spec.validate();
  if (spec.condition == Condition::consolidated && o.checkpoint.empty())
    throw ConfigError("--condition consolidated needs --checkpoint");
  if (o.task_spec.empty() || o.out.empty()) throw ConfigError("--task-spec and --out are required");
  json task_json;
  try {
    task_json = json::parse(read_file(o.task_spec));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed task spec: ") + e.what());
  }
  auto model = load_model(o.model);
  const auto start = std::chrono::steady_clock::now();
  TaskInstance task = task_from_spec(task_json, o.seed);
  std::optional<AdapterState> adapter;
  if (!o.checkpoint.empty()) adapter = load_adapter(o.checkpoint);
  ConditionResult m = run_condition(*model, task, spec, adapter ? &*adapter : nullptr);
  ConditionResult u = run_condition(*model, task, {Condition::full_context, std::nullopt});
  ConditionResult l = run_condition(*model, task, {Condition::no_context, std::nullopt});
  ResultRecord rec;
  rec.task = task.id;
  rec.condition = std::string(condition_name(spec.condition));
  rec.rho = spec.rho;
  rec.metric = std::string(metric_name(m.metric));
  rec.M = m.score;
  rec.U = u.score;
  rec.L = l.score;
  rec.exceeds_window = m.exceeds_window;
  if (!m.exceeds_window && !u.exceeds_window) rec.R = recovery_rate(rec.M, rec.U, rec.L);
  rec.seeds = {task_json.value("seed", o.seed)};
  if (o.record_runtime)
    rec.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const fs::path out(o.out);
  const fs::path dir = output_dir(out);
  std::ofstream(out, std::ios::binary) << records_to_jsonl({rec});
  append_manifest(dir, "eval",
                  {{"model", o.model}, {"task_spec", task_json}, {"condition", o.condition},
                   {"rho", o.rho ? json(*o.rho) : json(nullptr)}, {"checkpoint", o.checkpoint}, {"seed", o.seed}},
                  {out}, record_to_json(rec));
  return 0;
}

int run_report(const ReportOpts& o) {
  const ReportFormat fmt = parse_report_format(o.format);
  std::vector<ResultRecord> records;
  for (const auto& path : o.results) {
    auto r = records_from_jsonl(read_file(path));
    records.insert(records.end(), r.begin(), r.end());
  }
  std::cout << report(records, fmt);
  return 0;
}

int run_pretrain(const PretrainOpts& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  auto model = pretrain(o.cfg, [&](const PretrainProgress& p) {
    if (o.log_every && p.step % o.log_every == 0)
      std::cerr << "step " << p.step << " loss " << p.loss << " (" << p.seconds << " s)\n";
  });
  const fs::path out(o.out);
  const fs::path dir = output_dir(out);
  model->save(out);
  append_manifest(dir, "pretrain",
                  {{"steps", o.cfg.steps}, {"batch", o.cfg.batch}, {"learning_rate", o.cfg.learning_rate},
                   {"seed", o.cfg.seed}, {"model", o.cfg.model}, {"max_facts", o.cfg.max_facts},
                   {"icl_fraction", o.cfg.icl_fraction}, {"context_weight", o.cfg.context_weight},
                   {"recap_fraction", o.cfg.recap_fraction}, {"repeat_fraction", o.cfg.repeat_fraction},
                   {"repeat_warmup_steps", o.cfg.repeat_warmup_steps}},
                  {out}, {{"fingerprint", model->fingerprint()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Turn a context into adapter parameters and evaluate the result"};
  app.set_config("--config", "", "TOML or INI file; command-line flags take precedence");
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  std::uint64_t seed = 0;

  ElicitOpts eo;
  auto* elicit = app.add_subcommand("elicit", "build a transfer set from a context");
  elicit->add_option("--model", eo.model, "tiny-transformer checkpoint")->required();
  elicit->add_option("--context-file", eo.context_file)->required();
  elicit->add_option("--seed", seed)->capture_default_str();
  elicit->add_option("--out", eo.out, "transfer-set file (.jsonl)")->required();
  add_elicit_flags(elicit, eo.cfg, eo.query_source);

  SelectOpts so;
  auto* select = app.add_subcommand("select", "score a transfer set and keep the top k");
  select->add_option("--model", so.model)->required();
  select->add_option("--transfer-set", so.transfer_set)->required();
  select->add_option("--strategy", so.strategy, "ppl, kl or random")->capture_default_str();
  select->add_option("--k", so.cfg.k)->capture_default_str();
  select->add_option("--mean-mode", so.cfg.mean_mode, "length-normalize log-probabilities")->capture_default_str();
  select->add_option("--seed", seed)->capture_default_str();
  select->add_option("--out", so.out, "scored-set file (.jsonl)")->required();

  ConsolidateOpts co;
  auto* cons = app.add_subcommand("consolidate", "train an adapter on the selected entries");
  cons->add_option("--model", co.model)->required();
  cons->add_option("--selected", co.selected, "scored-set file from select")->required();
  cons->add_option("--seed", seed)->capture_default_str();
  cons->add_option("--out", co.out, "adapter checkpoint")->required();
  add_consolidate_flags(cons, co);

  StreamOpts sto;
  ElicitOpts st_eo;
  SelectOpts st_so;
  ConsolidateOpts st_co;
  auto* stream = app.add_subcommand("stream", "sequential transformation of a long context");
  stream->add_option("--model", sto.model)->required();
  stream->add_option("--context-file", sto.context_file)->required();
  stream->add_option("--chunk-length", sto.chunk_length, "tokens per turn (0: scale to the window)")
      ->capture_default_str();
  stream->add_option("--retention-ratio", sto.rho)->capture_default_str();
  stream->add_option("--continuity", sto.continuity, "continue or merge")->capture_default_str();
  stream->add_option("--seed", seed)->capture_default_str();
  stream->add_option("--out-dir", sto.out_dir)->required();
  add_elicit_flags(stream, st_eo.cfg, st_eo.query_source);
  stream->add_option("--strategy", st_so.strategy)->capture_default_str();
  stream->add_option("--k", st_so.cfg.k)->capture_default_str();
  add_consolidate_flags(stream, st_co);

  EvalOpts evo;
  auto* eval = app.add_subcommand("eval", "score a task under one condition");
  eval->add_option("--model", evo.model)->required();
  eval->add_option("--task-spec", evo.task_spec, "JSON task description")->required();
  eval->add_option("--condition", evo.condition, "full, none, local or consolidated")->required();
  eval->add_option("--rho", evo.rho, "retention ratio (local, consolidated)");
  eval->add_option("--checkpoint", evo.checkpoint, "adapter for the consolidated condition");
  eval->add_option("--seed", evo.seed)->capture_default_str();
  eval->add_option("--out", evo.out, "results file (.jsonl)")->required();
  eval->add_flag("--record-runtime", evo.record_runtime, "store wall time in the results record");

  ReportOpts ro;
  auto* rep = app.add_subcommand("report", "render results files");
  rep->add_option("--results", ro.results)->expected(0, -1);
  rep->add_option("--format", ro.format, "table or machine")->capture_default_str();

  PretrainOpts po;
  auto* pre = app.add_subcommand("pretrain", "pretrain a tiny transformer on synthetic documents");
  pre->add_option("--out", po.out)->required();
  pre->add_option("--steps", po.cfg.steps)->capture_default_str();
  pre->add_option("--batch", po.cfg.batch)->capture_default_str();
  pre->add_option("--lr", po.cfg.learning_rate)->capture_default_str();
  pre->add_option("--seed", po.cfg.seed)->capture_default_str();
  pre->add_option("--d-model", po.cfg.model.d_model)->capture_default_str();
  pre->add_option("--layers", po.cfg.model.n_layers)->capture_default_str();
  pre->add_option("--heads", po.cfg.model.n_heads)->capture_default_str();
  pre->add_option("--d-ff", po.cfg.model.d_ff)->capture_default_str();
  pre->add_option("--window", po.cfg.model.context_window)->capture_default_str();
  pre->add_option("--max-facts", po.cfg.max_facts)->capture_default_str();
  pre->add_option("--icl-fraction", po.cfg.icl_fraction)->capture_default_str();
  pre->add_option("--context-weight", po.cfg.context_weight)->capture_default_str();
  pre->add_option("--recap-fraction", po.cfg.recap_fraction)->capture_default_str();
  pre->add_option("--repeat-fraction", po.cfg.repeat_fraction)->capture_default_str();
  pre->add_option("--repeat-warmup", po.cfg.repeat_warmup_steps)->capture_default_str();
  pre->add_option("--log-every", po.log_every)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*elicit) {
      eo.cfg.seed = seed;
      return run_elicit(eo);
    }
    if (*select) {
      so.cfg.seed = seed;
      return run_select(so);
    }
    if (*cons) {
      co.cfg.seed = seed;
      return run_consolidate(co);
    }
    if (*stream) return run_stream(sto, st_eo.cfg, st_eo.query_source, st_so.cfg, st_so.strategy, st_co, seed);
    if (*eval) return run_eval(evo);
    if (*rep) return run_report(ro);
    if (*pre) return run_pretrain(po);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
