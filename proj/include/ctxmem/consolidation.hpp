#pragma once

// Memory consolidation: train a low-rank adapter so the context-free student
// reproduces the context-conditioned teacher on the selected transfer set.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxmem/backend.hpp"
#include "ctxmem/elicitation.hpp"
#include "ctxmem/losses.hpp"
#include "ctxmem/optimizer.hpp"
#include "ctxmem/selection.hpp"

namespace ctxmem {

struct ConsolidationConfig {
  LossKind loss = LossKind::fkl;
  double learning_rate = 1e-4;
  AdapterSpec adapter;
  std::size_t train_parts = 4;
  std::size_t dev_parts = 1;
  std::size_t patience = 2;
  std::size_t max_epochs = 50;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double akl_head_mass = 0.5;
  /// Hidden layer for MSE; defaults to the backend's last layer.
  std::optional<std::size_t> mse_layer;
  /// Keep teacher outputs across epochs instead of recomputing them.
  bool cache_teacher = false;
  /// "sgd" or "adam"; empty defers to the backend's registered optimizer.
  std::string optimizer;
  double clip_norm = 0.0;
  /// Test hook: when set, replaces the measured dev loss of each epoch
  /// (epoch 0 is the pre-training evaluation).
  std::function<double(std::size_t epoch)> scripted_dev_loss;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (patience < 1) throw ConfigError("patience must be at least 1");
    if (train_parts < 1 || dev_parts < 1) throw ConfigError("train/dev ratio parts must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (adapter.rank < 1) throw ConfigError("adapter rank must be at least 1");
    if (!(akl_head_mass > 0.0 && akl_head_mass < 1.0)) throw ConfigError("akl_head_mass must be in (0, 1)");
    if (!optimizer.empty() && optimizer != "sgd" && optimizer != "adam")
      throw ConfigError("unknown optimizer '" + optimizer + "'");
  }
};

inline void to_json(nlohmann::json& j, const ConsolidationConfig& c) {
  j = {{"loss", loss_kind_name(c.loss)},
       {"learning_rate", c.learning_rate},
       {"rank", c.adapter.rank},
       {"alpha", c.adapter.alpha},
       {"dropout", c.adapter.dropout},
       {"targets", c.adapter.targets},
       {"train_dev_ratio", {c.train_parts, c.dev_parts}},
       {"patience", c.patience},
       {"max_epochs", c.max_epochs},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"akl_head_mass", c.akl_head_mass},
       {"mse_layer", c.mse_layer ? nlohmann::json(*c.mse_layer) : nlohmann::json(nullptr)},
       {"cache_teacher", c.cache_teacher},
       {"optimizer", c.optimizer},
       {"clip_norm", c.clip_norm}};
}

inline void from_json(const nlohmann::json& j, ConsolidationConfig& c) {
  c.loss = parse_loss_kind(j.at("loss").get<std::string>());
  c.learning_rate = j.at("learning_rate").get<double>();
  c.adapter.rank = j.at("rank").get<std::size_t>();
  c.adapter.alpha = j.at("alpha").get<double>();
  c.adapter.dropout = j.at("dropout").get<double>();
  c.adapter.targets = j.at("targets").get<std::vector<std::string>>();
  auto ratio = j.at("train_dev_ratio");
  c.train_parts = ratio.at(0).get<std::size_t>();
  c.dev_parts = ratio.at(1).get<std::size_t>();
  c.patience = j.at("patience").get<std::size_t>();
  c.max_epochs = j.at("max_epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.akl_head_mass = j.value("akl_head_mass", 0.5);
  if (j.contains("mse_layer") && !j.at("mse_layer").is_null()) c.mse_layer = j.at("mse_layer").get<std::size_t>();
  c.cache_teacher = j.value("cache_teacher", false);
  c.optimizer = j.value("optimizer", std::string());
  c.clip_norm = j.value("clip_norm", 0.0);
}

struct TrainRecord {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> dev_loss;    // per epoch
  std::vector<double> epoch_seconds;
  double initial_dev_loss = 0.0;
  bool stopped_early = false;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  std::string optimizer;
  std::size_t train_size = 0;
  std::size_t dev_size = 0;
};

inline void to_json(nlohmann::json& j, const TrainRecord& r) {
  j = {{"train_loss", r.train_loss},   {"dev_loss", r.dev_loss},     {"epoch_seconds", r.epoch_seconds},
       {"initial_dev_loss", r.initial_dev_loss}, {"stopped_early", r.stopped_early}, {"epochs_run", r.epochs_run},
       {"best_epoch", r.best_epoch},   {"optimizer", r.optimizer},   {"train_size", r.train_size},
       {"dev_size", r.dev_size}};
}

inline void from_json(const nlohmann::json& j, TrainRecord& r) {
  r.train_loss = j.at("train_loss").get<std::vector<double>>();
  r.dev_loss = j.at("dev_loss").get<std::vector<double>>();
  r.epoch_seconds = j.value("epoch_seconds", std::vector<double>{});
  r.initial_dev_loss = j.at("initial_dev_loss").get<double>();
  r.stopped_early = j.at("stopped_early").get<bool>();
  r.epochs_run = j.at("epochs_run").get<std::size_t>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.optimizer = j.value("optimizer", std::string());
  r.train_size = j.value("train_size", std::size_t{0});
  r.dev_size = j.value("dev_size", std::size_t{0});
}

struct TrainDevSplit {
  std::vector<std::size_t> train;  // ascending indices
  std::vector<std::size_t> dev;
};

/// Seeded partition of n items with n_dev = round(n * dev / (train + dev)),
/// kept within [1, n - 1].
inline TrainDevSplit split_train_dev(std::size_t n, std::size_t train_parts, std::size_t dev_parts,
                                     std::uint64_t seed) {
  if (train_parts < 1 || dev_parts < 1) throw ConfigError("train/dev ratio parts must be positive");
  if (n < 5) throw ConfigError("need at least 5 entries to split train/dev; got " + std::to_string(n));
  std::size_t n_dev = static_cast<std::size_t>(
      std::llround(static_cast<double>(n) * static_cast<double>(dev_parts) / static_cast<double>(train_parts + dev_parts)));
  n_dev = std::clamp<std::size_t>(n_dev, 1, n - 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  TrainDevSplit s;
  s.dev.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_dev));
  s.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_dev), perm.end());
  std::sort(s.dev.begin(), s.dev.end());
  std::sort(s.train.begin(), s.train.end());
  return s;
}

inline std::pair<TransferSet, TransferSet> split_train_dev(const TransferSet& subset, std::size_t train_parts,
                                                           std::size_t dev_parts, std::uint64_t seed) {
  auto s = split_train_dev(subset.entries.size(), train_parts, dev_parts, seed);
  TransferSet train = subset, dev = subset;
  train.entries.clear();
  dev.entries.clear();
  for (auto i : s.train) train.entries.push_back(subset.entries[i]);
  for (auto i : s.dev) dev.entries.push_back(subset.entries[i]);
  return {std::move(train), std::move(dev)};
}

/// Per-epoch dev-loss bookkeeping: an evaluation improves when it is strictly
/// below the best so far; training stops after `patience` consecutive
/// evaluations without improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {
    if (patience < 1) throw ConfigError("patience must be at least 1");
  }

  /// Records the dev loss of `epoch` and returns true when training should stop.
  bool observe(std::size_t epoch, double loss) {
    improved_ = loss < best_loss_;
    if (improved_) {
      best_loss_ = loss;
      best_epoch_ = epoch;
      misses_ = 0;
    } else {
      ++misses_;
    }
    return misses_ >= patience_;
  }

  bool improved() const { return improved_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::size_t misses_ = 0;
  bool improved_ = false;
  std::size_t best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

struct ConsolidationResult {
  AdapterState adapter;
  TrainRecord record;
};

namespace consolidation {

/// One training sequence: the student's input and scored rows, plus the
/// teacher's prefix for the same response.
struct Example {
  TokenSequence student_input;
  std::size_t first_row = 0;
  TokenSequence teacher_prefix;
  TokenSequence response;
};

inline bool token_level(LossKind k) { return k != LossKind::dpkd; }

class Trainer {
 public:
  Trainer(const AdaptableModel& model, ModelView teacher, std::vector<Example> examples, const ConsolidationConfig& cfg)
      : model_(model), teacher_(teacher), examples_(std::move(examples)), cfg_(cfg), cache_(examples_.size()) {
    layer_ = cfg.mse_layer.value_or(model.hidden_layers());
    if (cfg.loss == LossKind::mse && layer_ > model.hidden_layers())
      throw ConfigError("mse_layer " + std::to_string(layer_) + " is invalid; the backend exposes layers 0.." +
                        std::to_string(model.hidden_layers()));
  }

  const TeacherTargets& targets(std::size_t i) {
    if (cache_[i]) return *cache_[i];
    TeacherTargets t;
    const Example& ex = examples_[i];
    t.response = ex.response;
    if (loss_uses_teacher_distribution(cfg_.loss))
      t.log_probs = target_log_probs(*teacher_.model, teacher_.adapter, ex.teacher_prefix, ex.response);
    if (cfg_.loss == LossKind::mse)
      t.hidden = hidden_at(*teacher_.model, teacher_.adapter, ex.teacher_prefix, ex.response, layer_).states;
    cache_[i] = std::move(t);
    const TeacherTargets& out = *cache_[i];
    return out;
  }

  void release(std::size_t i) {
    if (!cfg_.cache_teacher) cache_[i].reset();
  }

  /// Normalizer so that a batch's per-example contributions sum to its loss.
  double scale_for(const std::vector<std::size_t>& batch, std::size_t i) const {
    if (token_level(cfg_.loss)) {
      std::size_t n = 0;
      for (auto b : batch) n += examples_[b].response.size();
      return 1.0 / static_cast<double>(n);
    }
    return 1.0 / (static_cast<double>(batch.size()) * static_cast<double>(examples_[i].response.size()));
  }

  double step(AdapterState& adapter, const std::vector<std::size_t>& batch, Optimizer& opt, Rng& dropout_rng) {
    AdapterGradients grads = zero_gradients(adapter);
    double loss = 0.0;
    for (auto i : batch) {
      const Example& ex = examples_[i];
      const TeacherTargets& t = targets(i);
      LossHead head = make_loss_head(cfg_.loss, t, cfg_.akl_head_mass, scale_for(batch, i));
      std::optional<std::size_t> layer;
      if (cfg_.loss == LossKind::mse) layer = layer_;
      loss += model_.accumulate_adapter_gradient(adapter, ex.student_input, ex.first_row, layer, head,
                                                 adapter.dropout > 0.0 ? &dropout_rng : nullptr, grads);
      release(i);
    }
    if (!std::isfinite(loss)) throw NumericError("non-finite training loss " + std::to_string(loss));
    std::vector<Matrix*> params;
    std::vector<const Matrix*> gs;
    for (auto& [key, f] : adapter.factors) {
      auto& g = grads.at(key);
      params.push_back(&f.a);
      gs.push_back(&g.a);
      params.push_back(&f.b);
      gs.push_back(&g.b);
    }
    opt.step(params, gs);
    return loss;
  }

  /// Loss over `indices` without dropout or gradients.
  double evaluate(const AdapterState& adapter, const std::vector<std::size_t>& indices) {
    double total = 0.0;
    std::size_t tokens = 0;
    for (auto i : indices) {
      const Example& ex = examples_[i];
      const TeacherTargets& t = targets(i);
      Matrix logits = model_.logits(&adapter, ex.student_input, ex.first_row);
      Matrix hidden;
      if (cfg_.loss == LossKind::mse) hidden = model_.hidden(&adapter, ex.student_input, layer_, ex.first_row);
      const double sum = response_loss_sum(cfg_.loss, t, logits, cfg_.loss == LossKind::mse ? &hidden : nullptr,
                                           cfg_.akl_head_mass, 1.0, nullptr);
      release(i);
      if (token_level(cfg_.loss)) {
        total += sum;
        tokens += ex.response.size();
      } else {
        total += sum / static_cast<double>(ex.response.size());
      }
    }
    if (indices.empty()) return 0.0;
    const double v = token_level(cfg_.loss) ? total / static_cast<double>(tokens)
                                            : total / static_cast<double>(indices.size());
    if (!std::isfinite(v)) throw NumericError("non-finite dev loss " + std::to_string(v));
    return v;
  }

 private:
  const AdaptableModel& model_;
  ModelView teacher_;
  std::vector<Example> examples_;
  const ConsolidationConfig& cfg_;
  std::vector<std::optional<TeacherTargets>> cache_;
  std::size_t layer_ = 0;
};

/// Epoch loop with early stopping; returns the adapter from the best dev epoch.
inline ConsolidationResult train(const AdaptableModel& model, ModelView teacher, const AdapterState& start,
                                 std::vector<Example> examples, const TrainDevSplit& split,
                                 const ConsolidationConfig& cfg) {
  Trainer trainer(model, teacher, std::move(examples), cfg);
  ConsolidationResult result{start, {}};
  result.record.train_size = split.train.size();
  result.record.dev_size = split.dev.size();
  OptimizerConfig oc;
  oc.kind = cfg.optimizer.empty() ? model.preferred_optimizer() : cfg.optimizer;
  oc.learning_rate = cfg.learning_rate;
  oc.clip_norm = cfg.clip_norm;
  result.record.optimizer = oc.kind;
  if (cfg.max_epochs == 0) return result;

  auto dev_loss = [&](std::size_t epoch, const AdapterState& a) {
    return cfg.scripted_dev_loss ? cfg.scripted_dev_loss(epoch) : trainer.evaluate(a, split.dev);
  };
  Optimizer opt(oc);
  Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
  AdapterState live = start;
  EarlyStopping stopper(cfg.patience);
  result.record.initial_dev_loss = dev_loss(0, live);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = split.train;
    Rng shuffle(derive_seed(cfg.seed, "epoch", epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);
    double sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(b),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + cfg.batch_size)));
      sum += trainer.step(live, batch, opt, dropout_rng);
      ++batches;
    }
    const double dev = dev_loss(epoch, live);
    result.record.train_loss.push_back(batches ? sum / static_cast<double>(batches) : 0.0);
    result.record.dev_loss.push_back(dev);
    result.record.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    result.record.epochs_run = epoch;
    const bool stop = stopper.observe(epoch, dev);
    if (stopper.improved()) {
      result.adapter = live;
      result.record.best_epoch = epoch;
    }
    if (stop) {
      result.record.stopped_early = true;
      break;
    }
  }
  return result;
}

inline AdapterState starting_adapter(const AdaptableModel& model, const AdapterState* prior,
                                     const ConsolidationConfig& cfg) {
  if (prior) {
    detail::check_adapter(model, prior);
    return *prior;
  }
  return model.init_adapter(cfg.adapter, derive_seed(cfg.seed, "adapter"));
}

}  // namespace consolidation

/// Distills the teacher (base model plus `prior`, frozen, conditioned on the
/// context) into the student (base plus a trainable copy of `prior`, or a
/// fresh adapter, without the context) over the subset's responses.
inline ConsolidationResult consolidate(const AdaptableModel& model, const AdapterState* prior, const Context& context,
                                       const TransferSet& subset, const ConsolidationConfig& cfg) {
  cfg.validate();
  if (subset.entries.empty()) throw ConfigError("cannot consolidate an empty transfer set");
  const Vocabulary& vocab = model.vocabulary();
  std::vector<consolidation::Example> examples;
  for (const auto& e : subset.entries) {
    if (e.response.empty()) throw ConfigError("transfer entry with an empty response");
    consolidation::Example ex;
    ex.teacher_prefix = selection::teacher_scoring_prefix(context, e, vocab);
    if (ex.teacher_prefix.size() + e.response.size() > model.context_window())
      throw WindowOverflow(ex.teacher_prefix.size() + e.response.size(), model.context_window(),
                           "teacher prompt plus response; split the context with the streaming module");
    const TokenSequence sp = selection::student_scoring_prefix(e, vocab);
    ex.student_input = detail::scoring_input(model, sp, e.response);
    ex.first_row = sp.size();
    ex.response = e.response;
    examples.push_back(std::move(ex));
  }
  auto split = split_train_dev(examples.size(), cfg.train_parts, cfg.dev_parts, cfg.seed);
  AdapterState start = consolidation::starting_adapter(model, prior, cfg);
  return consolidation::train(model, ModelView{&model, prior}, start, std::move(examples), split, cfg);
}

/// Fine-tunes an adapter directly on the context with next-token
/// cross-entropy; the last 20% of the context is held out as dev data.
inline ConsolidationResult context_lm_baseline(const AdaptableModel& model, const Context& context,
                                               ConsolidationConfig cfg, std::size_t segment_length = 256) {
  if (context.empty()) throw ConfigError("context_lm_baseline needs a non-empty context");
  if (context.size() < 2) throw ConfigError("context too short to hold out a dev tail");
  cfg.loss = LossKind::seqkd;
  cfg.validate();
  segment_length = std::min(segment_length, model.context_window());
  const std::size_t n = context.size();
  const std::size_t n_dev = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n))), 1, n - 1);
  std::vector<consolidation::Example> examples;
  TrainDevSplit split;
  auto add_segments = [&](std::size_t begin, std::size_t end, std::vector<std::size_t>& into) {
    for (std::size_t s = begin; s < end; s += segment_length) {
      consolidation::Example ex;
      ex.response.assign(context.tokens.begin() + static_cast<std::ptrdiff_t>(s),
                         context.tokens.begin() + static_cast<std::ptrdiff_t>(std::min(end, s + segment_length)));
      ex.student_input = detail::scoring_input(model, {}, ex.response);
      into.push_back(examples.size());
      examples.push_back(std::move(ex));
    }
  };
  add_segments(0, n - n_dev, split.train);
  add_segments(n - n_dev, n, split.dev);
  AdapterState start = consolidation::starting_adapter(model, nullptr, cfg);
  return consolidation::train(model, ModelView{&model, nullptr}, start, std::move(examples), split, cfg);
}

}  // namespace ctxmem
