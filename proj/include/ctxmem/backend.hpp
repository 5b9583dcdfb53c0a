#pragma once

// Model-backend interface. A backend maps a token sequence (BOS first) to
// per-position next-token logits; scoring, distributions, hidden states and
// sampling are built on that single primitive. Backends that can train an
// adapter also implement AdaptableModel.

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxmem/adapter.hpp"
#include "ctxmem/linalg.hpp"
#include "ctxmem/tokenizer.hpp"

namespace ctxmem {

/// Derives candidate queries from a context without asking the model, for
/// backends too small to follow the elicitation prompt. Returns queries in
/// a seed-dependent order.
using QuerySynthesizer = std::function<std::vector<std::string>(std::string_view context, std::uint64_t seed)>;

/// Incremental decoder: append tokens, get the logits that follow them.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  virtual RowVector append(std::span<const TokenId> tokens) = 0;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::string identifier() const = 0;
  virtual const Vocabulary& vocabulary() const = 0;
  std::size_t vocab_size() const { return vocabulary().size(); }
  virtual std::size_t context_window() const = 0;
  virtual std::size_t hidden_dim() const = 0;
  /// Valid layer indices for hidden states are [0, hidden_layers()].
  virtual std::size_t hidden_layers() const { return 0; }
  /// Hash of the frozen base parameters.
  virtual std::string fingerprint() const = 0;

  /// Logits for rows [first_row, input.size()); row t predicts input[t + 1].
  virtual Matrix logits(const AdapterState* adapter, std::span<const TokenId> input,
                        std::size_t first_row = 0) const = 0;

  /// Hidden states at `layer` for rows [first_row, input.size()).
  virtual Matrix hidden(const AdapterState* /*adapter*/, std::span<const TokenId> /*input*/, std::size_t /*layer*/,
                        std::size_t /*first_row*/ = 0) const {
    throw Error(identifier() + " does not expose hidden states");
  }

  virtual std::unique_ptr<DecodeSession> decode_session(const AdapterState* adapter) const;

  virtual std::optional<QuerySynthesizer> query_synthesizer() const { return std::nullopt; }
};

/// Receives the student's outputs on the scored rows and writes the loss
/// gradient with respect to them; returns the loss value.
struct OutputGradients {
  Matrix dlogits;  // empty when the loss does not touch logits
  Matrix dhidden;  // empty when the loss does not touch hidden states
};
using LossHead = std::function<double(const Matrix& logits, const Matrix* hidden, OutputGradients& grads)>;

class AdaptableModel : public LanguageModel {
 public:
  virtual AdapterState init_adapter(const AdapterSpec& spec, std::uint64_t seed) const = 0;

  /// Returns a model whose base weights absorb the adapter delta.
  virtual std::shared_ptr<const AdaptableModel> merge(const AdapterState& adapter) const = 0;

  /// Forward pass with the adapter (dropout active when `dropout_rng` is
  /// set), loss evaluation through `head`, and accumulation of the adapter
  /// gradient into `grads`. `hidden_layer` selects the hidden states handed to
  /// the head.
  virtual double accumulate_adapter_gradient(const AdapterState& adapter, std::span<const TokenId> input,
                                             std::size_t first_row, std::optional<std::size_t> hidden_layer,
                                             const LossHead& head, Rng* dropout_rng,
                                             AdapterGradients& grads) const = 0;

  /// Optimizer this backend registers for adapter training ("sgd" or "adam").
  virtual std::string preferred_optimizer() const { return "sgd"; }
};

using ModelHandle = std::shared_ptr<const LanguageModel>;

// ---------------------------------------------------------------------------

namespace detail {

class RecomputeSession final : public DecodeSession {
 public:
  RecomputeSession(const LanguageModel& model, const AdapterState* adapter) : model_(model), adapter_(adapter) {}

  RowVector append(std::span<const TokenId> tokens) override {
    seq_.insert(seq_.end(), tokens.begin(), tokens.end());
    return model_.logits(adapter_, seq_, seq_.size() - 1).row(0);
  }

 private:
  const LanguageModel& model_;
  const AdapterState* adapter_;
  TokenSequence seq_;
};

inline void check_adapter(const LanguageModel& model, const AdapterState* adapter) {
  if (adapter && adapter->base_fingerprint != model.fingerprint())
    throw Error("adapter fingerprint " + adapter->base_fingerprint + " does not match model " + model.fingerprint());
}

/// [BOS] ++ prefix ++ target[:-1]; its last |target| rows score the target.
inline TokenSequence scoring_input(const LanguageModel& model, std::span<const TokenId> prefix,
                                   std::span<const TokenId> target) {
  const std::size_t n = prefix.size() + target.size();
  if (n > model.context_window()) throw WindowOverflow(n, model.context_window(), "prefix plus target");
  TokenSequence input;
  input.reserve(n);
  input.push_back(Vocabulary::kBos);
  input.insert(input.end(), prefix.begin(), prefix.end());
  if (!target.empty()) input.insert(input.end(), target.begin(), target.end() - 1);
  return input;
}

}  // namespace detail

inline std::unique_ptr<DecodeSession> LanguageModel::decode_session(const AdapterState* adapter) const {
  return std::make_unique<detail::RecomputeSession>(*this, adapter);
}

inline TokenSequence tokenize(const LanguageModel& model, std::string_view text) {
  return model.vocabulary().encode(text);
}

inline std::string detokenize(const LanguageModel& model, std::span<const TokenId> tokens) {
  return model.vocabulary().decode(tokens);
}

/// Per-position next-token probabilities for each target token.
struct NextTokenDistribution {
  Matrix probs;  // |target| x vocab
};

struct HiddenStates {
  Matrix states;  // |target| x hidden_dim
};

/// Log-softmax rows scoring `target` after `prefix`.
inline Matrix target_log_probs(const LanguageModel& model, const AdapterState* adapter, std::span<const TokenId> prefix,
                               std::span<const TokenId> target) {
  detail::check_adapter(model, adapter);
  if (target.empty()) return Matrix(0, static_cast<Eigen::Index>(model.vocab_size()));
  auto input = detail::scoring_input(model, prefix, target);
  return log_softmax_rows(model.logits(adapter, input, prefix.size()));
}

inline std::vector<double> score_logprobs(const LanguageModel& model, const AdapterState* adapter,
                                          std::span<const TokenId> prefix, std::span<const TokenId> target) {
  Matrix lp = target_log_probs(model, adapter, prefix, target);
  std::vector<double> out(target.size());
  for (std::size_t t = 0; t < target.size(); ++t) out[t] = lp(static_cast<Eigen::Index>(t), target[t]);
  return out;
}

inline NextTokenDistribution next_token_distributions(const LanguageModel& model, const AdapterState* adapter,
                                                      std::span<const TokenId> prefix,
                                                      std::span<const TokenId> target) {
  return {target_log_probs(model, adapter, prefix, target).array().exp()};
}

inline HiddenStates hidden_at(const LanguageModel& model, const AdapterState* adapter, std::span<const TokenId> prefix,
                              std::span<const TokenId> target, std::size_t layer) {
  detail::check_adapter(model, adapter);
  if (layer > model.hidden_layers())
    throw ConfigError("layer " + std::to_string(layer) + " is invalid; the backend exposes layers 0.." +
                      std::to_string(model.hidden_layers()));
  if (target.empty()) return {Matrix(0, static_cast<Eigen::Index>(model.hidden_dim()))};
  auto input = detail::scoring_input(model, prefix, target);
  return {model.hidden(adapter, input, layer, prefix.size())};
}

struct SampleOptions {
  double temperature = 1.0;
  std::size_t max_tokens = 1;
  std::uint64_t seed = 0;
  /// Tokens besides EOS that end generation; the stop token is kept in the output.
  std::vector<TokenId> stop_tokens;
};

/// Index of the next token under `temperature`; 0 picks the lowest-index argmax.
inline TokenId draw_token(const RowVector& logits, double temperature, Rng& rng) {
  Eigen::Index best = 0;
  logits.maxCoeff(&best);
  if (temperature == 0.0) return static_cast<TokenId>(best);
  const double mx = logits(best);
  RowVector w = ((logits.array() - mx) / temperature).exp();
  const double total = w.sum();
  double u = uniform01(rng) * total;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    u -= w(i);
    if (u < 0.0) return static_cast<TokenId>(i);
  }
  for (Eigen::Index i = w.size() - 1; i >= 0; --i)
    if (w(i) > 0.0) return static_cast<TokenId>(i);
  return static_cast<TokenId>(best);
}

/// Autoregressive generation. Stops at EOS, a stop token, max_tokens, or
/// when prompt plus output fills the context window.
inline TokenSequence sample(const LanguageModel& model, const AdapterState* adapter, std::span<const TokenId> prompt,
                            const SampleOptions& opts) {
  detail::check_adapter(model, adapter);
  if (opts.max_tokens < 1) throw ConfigError("max_tokens must be at least 1");
  if (!(opts.temperature >= 0.0)) throw ConfigError("temperature must be nonnegative");
  const std::size_t window = model.context_window();
  if (prompt.size() >= window) throw WindowOverflow(prompt.size() + 1, window, "prompt plus one generated token");

  Rng rng(opts.seed);
  auto session = model.decode_session(adapter);
  TokenSequence first;
  first.reserve(prompt.size() + 1);
  first.push_back(Vocabulary::kBos);
  first.insert(first.end(), prompt.begin(), prompt.end());
  RowVector logits = session->append(first);

  TokenSequence out;
  const std::size_t budget = std::min(opts.max_tokens, window - prompt.size());
  while (out.size() < budget) {
    TokenId next = draw_token(logits, opts.temperature, rng);
    out.push_back(next);
    if (next == Vocabulary::kEos) break;
    if (std::find(opts.stop_tokens.begin(), opts.stop_tokens.end(), next) != opts.stop_tokens.end()) break;
    if (out.size() == budget) break;
    const TokenId one[1] = {next};
    logits = session->append(one);
  }
  return out;
}

inline TokenSequence sample(const LanguageModel& model, const AdapterState* adapter, std::span<const TokenId> prompt,
                            double temperature, std::size_t max_tokens, std::uint64_t seed) {
  return sample(model, adapter, prompt, SampleOptions{temperature, max_tokens, seed, {}});
}

}  // namespace ctxmem
