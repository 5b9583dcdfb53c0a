#pragma once

// Brief pretraining of the tiny transformer on synthetic documents: a block
// of fact or label sentences followed by query/response pairs answered from
// that block. This is what teaches the base model to use its context, which
// the consolidation pipeline then distills away.

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ctxmem/optimizer.hpp"
#include "ctxmem/prompts.hpp"
#include "ctxmem/tasks.hpp"
#include "ctxmem/tiny_transformer.hpp"

namespace ctxmem {

/// A token sequence starting with BOS and a loss weight per predicted
/// position: weights[t] scores tokens[t + 1].
struct TrainingSequence {
  TokenSequence tokens;
  std::vector<double> weights;
};

struct PretrainConfig {
  TransformerConfig model{0, 512, 64, 4, 2, 256};
  std::size_t steps = 8000;
  std::size_t batch = 8;
  double learning_rate = 2e-3;
  std::size_t warmup = 100;
  double min_lr_ratio = 0.1;
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::size_t max_facts = 4;
  std::size_t max_queries = 8;
  double icl_fraction = 0.3;
  std::size_t max_icl_classes = 5;
  std::size_t max_icl_shots = 30;
  /// Weight of context and template tokens; answer tokens weigh 1.
  double context_weight = 0.0;
  /// Share of fact blocks restated in shuffled order, objects weighted 1.
  double recap_fraction = 0.3;
  /// Share of random name sequences followed by their repeat. Dense copy
  /// targets make the retrieval heads form far sooner than sparse answers.
  double repeat_fraction = 0.2;
  /// Leading steps that see repeat documents only.
  std::size_t repeat_warmup_steps = 3000;
};

namespace pretraining {

inline void append_text(TrainingSequence& s, std::string_view text, double weight) {
  for (TokenId t : Vocabulary::reference().encode(text)) {
    s.tokens.push_back(t);
    s.weights.push_back(weight);
  }
}

/// Query/response block; the answer and its EOS get weight 1.
inline void append_qa(TrainingSequence& s, std::string_view question, std::string_view answer, double ctx_weight) {
  append_text(s, query_template(question), ctx_weight);
  append_text(s, " " + std::string(answer), 1.0);
  s.tokens.push_back(Vocabulary::kEos);
  s.weights.push_back(1.0);
}

/// Drops the trailing weight so weights.size() == tokens.size() - 1.
inline TrainingSequence finish(TrainingSequence s) {
  s.weights.erase(s.weights.begin());
  return s;
}

inline TrainingSequence fact_document(Rng& rng, const PretrainConfig& cfg) {
  const std::size_t n = 1 + uniform_index(rng, cfg.max_facts);
  auto facts = tasks::random_facts(rng, n);
  TrainingSequence s;
  s.tokens.push_back(Vocabulary::kBos);
  s.weights.push_back(0.0);
  for (const auto& f : facts) append_text(s, tasks::fact_sentence(f.relation, f.subject, f.object) + "\n", cfg.context_weight);
  const std::size_t nq = 1 + uniform_index(rng, cfg.max_queries);
  for (std::size_t i = 0; i < nq; ++i) {
    const auto& f = facts[uniform_index(rng, facts.size())];
    const auto form = lexicon::kQueryForms[uniform_index(rng, lexicon::kQueryForms.size())];
    append_qa(s, lexicon::render_query(form, tasks::subject_phrase(f.relation, f.subject)), f.object, cfg.context_weight);
  }
  return finish(std::move(s));
}

inline TrainingSequence icl_document(Rng& rng, const PretrainConfig& cfg) {
  const std::size_t classes = 2 + uniform_index(rng, cfg.max_icl_classes - 1);
  const std::size_t shots = classes + uniform_index(rng, cfg.max_icl_shots - classes + 1);
  auto world = tasks::random_icl_world(rng, classes);
  auto examples = tasks::icl_shots(rng, world, shots);
  TrainingSequence s;
  s.tokens.push_back(Vocabulary::kBos);
  s.weights.push_back(0.0);
  for (const auto& e : examples) append_text(s, tasks::icl_sentence(e) + "\n", cfg.context_weight);
  const std::size_t nq = 1 + uniform_index(rng, cfg.max_queries);
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t c = uniform_index(rng, classes);
    tasks::IclExample e{world.stems[c], world.noise_pool[uniform_index(rng, world.noise_pool.size())], world.labels[c]};
    const auto form = lexicon::kQueryForms[uniform_index(rng, lexicon::kQueryForms.size())];
    append_qa(s, lexicon::render_query(form, tasks::icl_subject(e)), e.label, cfg.context_weight);
  }
  return finish(std::move(s));
}

inline TrainingSequence recap_document(Rng& rng, const PretrainConfig& cfg) {
  const std::size_t n = 1 + uniform_index(rng, cfg.max_facts);
  auto facts = tasks::random_facts(rng, n);
  TrainingSequence s;
  s.tokens.push_back(Vocabulary::kBos);
  s.weights.push_back(0.0);
  for (const auto& f : facts) append_text(s, tasks::fact_sentence(f.relation, f.subject, f.object) + "\n", cfg.context_weight);
  for (std::size_t i = facts.size(); i > 1; --i) std::swap(facts[i - 1], facts[uniform_index(rng, i)]);
  for (const auto& f : facts) {
    const std::string sentence = tasks::fact_sentence(f.relation, f.subject, f.object);
    const std::string object = " " + f.object;
    const auto at = sentence.rfind(object);
    append_text(s, sentence.substr(0, at), cfg.context_weight);
    append_text(s, object, 1.0);
    append_text(s, sentence.substr(at + object.size()) + "\n", cfg.context_weight);
  }
  return finish(std::move(s));
}

inline TrainingSequence repeat_document(Rng& rng, const PretrainConfig&) {
  const auto& names = lexicon::names();
  const std::size_t n = 8 + uniform_index(rng, 25);
  std::string text;
  for (std::size_t i = 0; i < n; ++i) text += " " + std::string(names[uniform_index(rng, names.size())]);
  TrainingSequence s;
  s.tokens.push_back(Vocabulary::kBos);
  s.weights.push_back(0.0);
  append_text(s, text + "\n", 0.0);
  append_text(s, text, 1.0);
  s.weights[s.weights.size() - n] = 0.0;  // the first repeated name is not predictable
  return finish(std::move(s));
}

inline TrainingSequence document(Rng& rng, const PretrainConfig& cfg) {
  const double u = uniform01(rng);
  if (u < cfg.repeat_fraction) return repeat_document(rng, cfg);
  if (u < cfg.repeat_fraction + cfg.recap_fraction) return recap_document(rng, cfg);
  return uniform01(rng) < cfg.icl_fraction ? icl_document(rng, cfg) : fact_document(rng, cfg);
}

/// Weighted next-token cross-entropy of one sequence; adds the parameter
/// gradient (scaled by `scale`) into `dP` when given.
inline double sequence_loss(const TransformerConfig& mc, const TransformerParams& P, const TrainingSequence& s,
                            double scale, TransformerParams* dP) {
  std::span<const TokenId> input(s.tokens.data(), s.tokens.size() - 1);
  tfm::ForwardCache cache;
  Matrix hf = tfm::forward(mc, P, nullptr, input, nullptr, dP ? &cache : nullptr);
  Matrix lp = log_softmax_rows(hf * P.head.transpose());
  double loss = 0.0;
  Matrix d = dP ? Matrix(lp.array().exp()) : Matrix();
  for (Eigen::Index t = 0; t < lp.rows(); ++t) {
    const double w = s.weights[static_cast<std::size_t>(t)];
    const TokenId y = s.tokens[static_cast<std::size_t>(t) + 1];
    loss -= w * lp(t, y);
    if (dP) {
      d.row(t) *= w * scale;
      d(t, y) -= w * scale;
    }
  }
  if (dP) {
    tfm::UpstreamGrads up;
    up.dlogits = std::move(d);
    tfm::backward(mc, P, nullptr, cache, up, dP, nullptr);
  }
  return loss;
}

}  // namespace pretraining

struct PretrainProgress {
  std::size_t step = 0;
  double loss = 0.0;  // weighted loss per unit weight over the step's batch
  double seconds = 0.0;
};

/// Trains a fresh tiny transformer; `on_step` (optional) sees every step.
inline std::shared_ptr<TinyTransformer> pretrain(PretrainConfig cfg,
                                                 const std::function<void(const PretrainProgress&)>& on_step = {}) {
  if (cfg.model.vocab_size == 0) cfg.model.vocab_size = Vocabulary::reference().size();
  cfg.model.validate();
  if (cfg.batch == 0) throw ConfigError("pretraining batch must be positive");
  TransformerParams P = TransformerParams::random(cfg.model, derive_seed(cfg.seed, "pretrain.init"));
  Rng data_rng(derive_seed(cfg.seed, "pretrain.data"));
  Optimizer opt({"adam", cfg.learning_rate, 0.9, 0.98, 1e-8, cfg.clip_norm});
  std::vector<Matrix*> params;
  P.for_each([&](const std::string&, Matrix& m) { params.push_back(&m); });
  const auto start = std::chrono::steady_clock::now();

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<TrainingSequence> batch;
    double total_w = 0.0;
    while (batch.size() < cfg.batch) {
      auto s = step < cfg.repeat_warmup_steps ? pretraining::repeat_document(data_rng, cfg)
                                              : pretraining::document(data_rng, cfg);
      if (s.tokens.size() > cfg.model.context_window + 1) continue;
      for (double w : s.weights) total_w += w;
      batch.push_back(std::move(s));
    }
    TransformerParams dP = TransformerParams::zeros(cfg.model);
    double loss = 0.0;
    for (const auto& s : batch) loss += pretraining::sequence_loss(cfg.model, P, s, 1.0 / total_w, &dP);
    std::vector<const Matrix*> grads;
    dP.for_each([&](const std::string&, const Matrix& m) { grads.push_back(&m); });

    double scale = 1.0;
    if (step < cfg.warmup) {
      scale = static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
    } else if (cfg.steps > cfg.warmup) {
      const double progress = static_cast<double>(step - cfg.warmup) / static_cast<double>(cfg.steps - cfg.warmup);
      scale = cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
    opt.step(params, grads, scale);
    if (on_step) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      on_step({step + 1, loss / total_w, secs});
    }
  }
  return std::make_shared<TinyTransformer>(cfg.model, std::move(P), "tiny-transformer");
}

}  // namespace ctxmem
