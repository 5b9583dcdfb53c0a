#pragma once

// Synthetic task generators. Facts, class labels and edits are built from
// the invented name inventory, so a model can only answer them from the
// context it is given (or from what was distilled out of that context).

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "ctxmem/context.hpp"
#include "ctxmem/lexicon.hpp"
#include "ctxmem/linalg.hpp"

namespace ctxmem {

enum class TaskKind { fact_recall, manyshot_icl, knowledge_update, text_generation, multiple_choice };

inline std::string_view task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::fact_recall: return "fact_recall";
    case TaskKind::manyshot_icl: return "manyshot_icl";
    case TaskKind::knowledge_update: return "knowledge_update";
    case TaskKind::text_generation: return "text_generation";
    case TaskKind::multiple_choice: return "multiple_choice";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::fact_recall, TaskKind::manyshot_icl, TaskKind::knowledge_update, TaskKind::text_generation,
                 TaskKind::multiple_choice})
    if (task_kind_name(k) == s) return k;
  throw ConfigError("unknown task kind '" + std::string(s) + "'");
}

struct QaProbe {
  std::string question;
  std::string answer;
};

struct ContinuationProbe {
  TokenSequence prefix;
  TokenSequence continuation;
};

struct ChoiceProbe {
  std::string question;
  std::vector<std::string> options;
  std::size_t gold = 0;
};

using Probe = std::variant<QaProbe, ContinuationProbe, ChoiceProbe>;

struct TaskInstance {
  std::string id;
  TaskKind kind = TaskKind::fact_recall;
  Context context;
  std::vector<Probe> probes;
  /// For knowledge updates: the original statements the edits override.
  std::vector<std::string> superseded;
};

namespace tasks {

/// `count` distinct indices from [0, n), in random order.
inline std::vector<std::size_t> draw_distinct(Rng& rng, std::size_t n, std::size_t count) {
  if (count > n) throw ConfigError("cannot draw " + std::to_string(count) + " distinct items from " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);
  idx.resize(count);
  return idx;
}

inline std::string fact_sentence(std::string_view relation, std::string_view subject, std::string_view object) {
  return "the " + std::string(relation) + " of " + std::string(subject) + " is " + std::string(object) + ".";
}

inline std::string subject_phrase(std::string_view relation, std::string_view subject) {
  return "the " + std::string(relation) + " of " + std::string(subject);
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

struct Fact {
  std::string relation, subject, object;
};

/// Random entity-attribute facts with distinct subjects; objects come from
/// names not used as subjects.
inline std::vector<Fact> random_facts(Rng& rng, std::size_t n_facts) {
  const auto& names = lexicon::names();
  if (n_facts == 0 || n_facts > names.size() / 2) throw ConfigError("n_facts must be in [1, 128]");
  auto pick = draw_distinct(rng, names.size(), names.size());
  std::vector<Fact> facts;
  const std::size_t n_objects = names.size() - n_facts;
  for (std::size_t i = 0; i < n_facts; ++i) {
    Fact f;
    f.relation = std::string(lexicon::kRelations[uniform_index(rng, lexicon::kRelations.size())]);
    f.subject = names[pick[i]];
    f.object = names[pick[n_facts + uniform_index(rng, n_objects)]];
    facts.push_back(std::move(f));
  }
  return facts;
}

struct IclExample {
  std::string stem, noise, label;
};

struct IclWorld {
  std::vector<std::string> stems;   // one per class
  std::vector<std::string> labels;  // randomly assigned numeric label per class
  std::vector<std::string> noise_pool;
};

inline IclWorld random_icl_world(Rng& rng, std::size_t n_classes) {
  const auto& names = lexicon::names();
  const auto numbers = lexicon::numbers();
  if (n_classes < 2 || n_classes > numbers.size()) throw ConfigError("n_classes must be in [2, 90]");
  IclWorld w;
  auto pick = draw_distinct(rng, names.size(), names.size());
  for (std::size_t c = 0; c < n_classes; ++c) w.stems.push_back(names[pick[c]]);
  for (std::size_t i = n_classes; i < names.size(); ++i) w.noise_pool.push_back(names[pick[i]]);
  for (auto i : draw_distinct(rng, numbers.size(), n_classes)) w.labels.push_back(numbers[i]);
  return w;
}

/// The noise name comes first so the class-marking stem sits right before " is".
inline std::string icl_subject(const IclExample& e) {
  return "the " + std::string(lexicon::kLabelRelation) + " of " + e.noise + " " + e.stem;
}

inline std::string icl_sentence(const IclExample& e) { return icl_subject(e) + " is " + e.label + "."; }

/// Shots cover every class at least once, then classes are drawn uniformly.
inline std::vector<IclExample> icl_shots(Rng& rng, const IclWorld& w, std::size_t n_shots) {
  const std::size_t n_classes = w.stems.size();
  std::vector<IclExample> shots;
  for (std::size_t i = 0; i < n_shots; ++i) {
    const std::size_t c = i < n_classes ? i : uniform_index(rng, n_classes);
    shots.push_back({w.stems[c], w.noise_pool[uniform_index(rng, w.noise_pool.size())], w.labels[c]});
  }
  for (std::size_t i = shots.size(); i > 1; --i) std::swap(shots[i - 1], shots[uniform_index(rng, i)]);
  return shots;
}

struct FactRecallDraw {
  TaskInstance task;
  std::vector<Fact> facts;
  std::vector<std::size_t> probed;  // fact index per probe
};

inline FactRecallDraw draw_fact_recall(std::uint64_t seed, std::size_t n_facts, std::size_t n_probes) {
  if (n_probes == 0 || n_probes > n_facts) throw ConfigError("n_probes must be in [1, n_facts]");
  Rng rng(derive_seed(seed, "fact_recall"));
  FactRecallDraw d;
  d.facts = random_facts(rng, n_facts);
  std::vector<std::string> lines;
  for (const auto& f : d.facts) lines.push_back(fact_sentence(f.relation, f.subject, f.object));
  d.task.id = "fact_recall-" + std::to_string(seed);
  d.task.kind = TaskKind::fact_recall;
  d.task.context = Context::from_text(d.task.id, join_lines(lines));
  d.probed = draw_distinct(rng, n_facts, n_probes);
  for (auto i : d.probed) {
    const auto& f = d.facts[i];
    d.task.probes.push_back(
        QaProbe{lexicon::render_query(lexicon::kQueryForms[0], subject_phrase(f.relation, f.subject)), f.object});
  }
  return d;
}

}  // namespace tasks

/// Fact-recall document: `n_facts` "the <relation> of <entity> is <value>."
/// lines; probes ask for the value of `n_probes` distinct facts.
inline TaskInstance gen_fact_recall(std::uint64_t seed, std::size_t n_facts, std::size_t n_probes) {
  return tasks::draw_fact_recall(seed, n_facts, n_probes).task;
}

/// Many-shot classification: each class is marked by a stem name, items
/// prefix a random noise name, and class indices are remapped to random two-digit
/// labels. Probes are held-out (stem, noise) items.
inline TaskInstance gen_manyshot_icl(std::uint64_t seed, std::size_t n_classes, std::size_t n_shots = 300,
                                     std::size_t n_probes = 20) {
  if (n_shots < n_classes) throw ConfigError("n_shots must cover every class");
  if (n_probes == 0) throw ConfigError("n_probes must be positive");
  Rng rng(derive_seed(seed, "manyshot_icl"));
  auto world = tasks::random_icl_world(rng, n_classes);
  auto shots = tasks::icl_shots(rng, world, n_shots);
  std::vector<std::string> lines;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& s : shots) {
    lines.push_back(tasks::icl_sentence(s));
    seen.emplace(s.stem, s.noise);
  }
  TaskInstance t;
  t.id = "manyshot_icl-" + std::to_string(seed);
  t.kind = TaskKind::manyshot_icl;
  t.context = Context::from_text(t.id, tasks::join_lines(lines));
  while (t.probes.size() < n_probes) {
    const std::size_t c = uniform_index(rng, n_classes);
    tasks::IclExample e{world.stems[c], world.noise_pool[uniform_index(rng, world.noise_pool.size())], world.labels[c]};
    if (!seen.emplace(e.stem, e.noise).second) continue;
    t.probes.push_back(QaProbe{lexicon::render_query(lexicon::kQueryForms[0], tasks::icl_subject(e)), e.label});
  }
  return t;
}

/// Counterfactual edits over a random fact base. Edits form chains of
/// `hops` statements; each probe follows one chain, so a 2-hop answer needs
/// two edits composed.
inline TaskInstance gen_knowledge_update(std::uint64_t seed, std::size_t n_edits, std::size_t hops = 1) {
  if (hops < 1 || hops > 4) throw ConfigError("hops must be in [1, 4]");
  if (n_edits < hops) throw ConfigError("n_edits must be at least hops");
  const std::size_t chains = n_edits / hops;
  const auto& names = lexicon::names();
  if (chains * (hops + 1) * 2 > names.size()) throw ConfigError("too many edits for the name inventory");
  Rng rng(derive_seed(seed, "knowledge_update"));
  auto pick = tasks::draw_distinct(rng, names.size(), names.size());
  std::size_t next = 0;
  TaskInstance t;
  t.id = "knowledge_update-" + std::to_string(seed) + "-h" + std::to_string(hops);
  t.kind = TaskKind::knowledge_update;
  std::vector<std::string> lines;
  for (std::size_t c = 0; c < chains; ++c) {
    std::string subject = names[pick[next++]];
    std::string phrase = subject;
    for (std::size_t h = 0; h < hops; ++h) {
      const std::string relation(lexicon::kRelations[uniform_index(rng, lexicon::kRelations.size())]);
      const std::string original = names[pick[next++]];
      const std::string edited = names[pick[next++]];  // distinct from `original` by construction
      lines.push_back(tasks::fact_sentence(relation, subject, edited));
      t.superseded.push_back(tasks::fact_sentence(relation, subject, original));
      phrase = tasks::subject_phrase(relation, phrase);
      subject = edited;
    }
    t.probes.push_back(QaProbe{lexicon::render_query(lexicon::kQueryForms[0], phrase), subject});
  }
  t.context = Context::from_text(t.id, tasks::join_lines(lines));
  return t;
}

/// Multiple choice over fact-recall facts; distractors are other objects from the same document.
inline TaskInstance gen_multiple_choice(std::uint64_t seed, std::size_t n_facts, std::size_t n_probes,
                                        std::size_t n_options = 4) {
  auto draw = tasks::draw_fact_recall(seed, n_facts, n_probes);
  std::vector<std::string> objects;
  for (const auto& f : draw.facts)
    if (std::find(objects.begin(), objects.end(), f.object) == objects.end()) objects.push_back(f.object);
  if (n_options < 2 || n_options > objects.size())
    throw ConfigError("n_options must be in [2, number of distinct objects]");
  Rng rng(derive_seed(seed, "multiple_choice"));
  TaskInstance t = std::move(draw.task);
  t.id = "multiple_choice-" + std::to_string(seed);
  t.kind = TaskKind::multiple_choice;
  t.context.id = t.id;
  t.probes.clear();
  for (auto i : draw.probed) {
    const auto& f = draw.facts[i];
    ChoiceProbe cp;
    cp.question = lexicon::render_query(lexicon::kQueryForms[0], tasks::subject_phrase(f.relation, f.subject));
    cp.options.push_back(f.object);
    while (cp.options.size() < n_options) {
      const auto& cand = objects[uniform_index(rng, objects.size())];
      if (std::find(cp.options.begin(), cp.options.end(), cand) == cp.options.end()) cp.options.push_back(cand);
    }
    for (std::size_t k = cp.options.size(); k > 1; --k) std::swap(cp.options[k - 1], cp.options[uniform_index(rng, k)]);
    cp.gold = static_cast<std::size_t>(std::find(cp.options.begin(), cp.options.end(), f.object) - cp.options.begin());
    t.probes.push_back(std::move(cp));
  }
  return t;
}

struct TextSliceLengths {
  std::size_t context_tokens = 2048;
  std::size_t target_tokens = 256;
};

/// Slice lengths for a model window: the default 2048/256 split, scaled
/// down proportionally when both do not fit.
inline TextSliceLengths text_slice_lengths(std::size_t window) {
  TextSliceLengths l;
  const std::size_t total = l.context_tokens + l.target_tokens;
  if (window < total) {
    l.context_tokens = l.context_tokens * window / total;
    l.target_tokens = l.target_tokens * window / total;
  }
  return l;
}

/// A contiguous (context, continuation) pair sliced from a corpus at a seeded offset.
inline TaskInstance gen_text_generation(std::string_view corpus, std::uint64_t seed,
                                        TextSliceLengths lengths = {},
                                        const Vocabulary& vocab = Vocabulary::reference()) {
  TokenSequence all = vocab.encode(corpus);
  const std::size_t need = lengths.context_tokens + lengths.target_tokens;
  if (lengths.context_tokens == 0 || lengths.target_tokens == 0) throw ConfigError("slice lengths must be positive");
  if (all.size() < need)
    throw ConfigError("corpus has " + std::to_string(all.size()) + " tokens; need " + std::to_string(need));
  Rng rng(derive_seed(seed, "text_generation"));
  const std::size_t start = uniform_index(rng, all.size() - need + 1);
  Context whole;
  whole.tokens = std::move(all);
  TaskInstance t;
  t.id = "text_generation-" + std::to_string(seed);
  t.kind = TaskKind::text_generation;
  t.context = whole.slice(start, start + lengths.context_tokens, t.id, vocab);
  ContinuationProbe p;
  p.continuation.assign(whole.tokens.begin() + static_cast<std::ptrdiff_t>(start + lengths.context_tokens),
                        whole.tokens.begin() + static_cast<std::ptrdiff_t>(start + need));
  t.probes.push_back(std::move(p));
  return t;
}

/// Prose-like corpus of fact and label sentences for text-generation tasks.
inline std::string synthetic_corpus(std::uint64_t seed, std::size_t n_sentences) {
  Rng rng(derive_seed(seed, "corpus"));
  std::string out;
  std::size_t produced = 0;
  while (produced < n_sentences) {
    auto facts = tasks::random_facts(rng, 1 + uniform_index(rng, 8));
    for (const auto& f : facts) {
      if (produced++ == n_sentences) break;
      out += tasks::fact_sentence(f.relation, f.subject, f.object);
      out += uniform01(rng) < 0.3 ? "\n" : " ";
    }
  }
  return out;
}

}  // namespace ctxmem
