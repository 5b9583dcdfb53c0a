#pragma once

// Test doubles shared by the unit tests.

#include <functional>
#include <memory>
#include <string>

#include "ctxmem/backend.hpp"
#include "ctxmem/tiny_transformer.hpp"

namespace ctxmem::testing {

/// Generation follows a script chosen from the decoded prompt; scoring
/// returns uniform logits. The script is followed by EOS.
class ScriptedModel final : public LanguageModel {
 public:
  using Responder = std::function<std::string(const std::string& prompt, std::size_t call)>;

  explicit ScriptedModel(Responder r, std::size_t window = 4096) : respond_(std::move(r)), window_(window) {}

  std::string identifier() const override { return "scripted"; }
  const Vocabulary& vocabulary() const override { return Vocabulary::reference(); }
  std::size_t context_window() const override { return window_; }
  std::size_t hidden_dim() const override { return 4; }
  std::string fingerprint() const override { return "scripted"; }

  Matrix logits(const AdapterState*, std::span<const TokenId> input, std::size_t first_row) const override {
    return Matrix::Zero(static_cast<Eigen::Index>(input.size() - first_row),
                        static_cast<Eigen::Index>(vocab_size()));
  }

  std::unique_ptr<DecodeSession> decode_session(const AdapterState*) const override {
    return std::make_unique<Session>(*this);
  }

  std::size_t calls() const { return calls_; }

 private:
  class Session final : public DecodeSession {
   public:
    explicit Session(const ScriptedModel& m) : m_(m) {}
    RowVector append(std::span<const TokenId> tokens) override {
      if (!started_) {
        started_ = true;
        const std::string prompt = m_.vocabulary().decode(tokens);
        script_ = m_.vocabulary().encode(m_.respond_(prompt, m_.calls_++));
        script_.push_back(Vocabulary::kEos);
      }
      RowVector out = RowVector::Constant(static_cast<Eigen::Index>(m_.vocab_size()), -30.0);
      out(script_[std::min(pos_++, script_.size() - 1)]) = 30.0;
      return out;
    }

   private:
    const ScriptedModel& m_;
    bool started_ = false;
    TokenSequence script_;
    std::size_t pos_ = 0;
  };

  Responder respond_;
  std::size_t window_;
  mutable std::size_t calls_ = 0;
};

inline std::shared_ptr<TinyTransformer> small_tiny_model(std::size_t window = 256, std::uint64_t seed = 3) {
  TransformerConfig c;
  c.context_window = window;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ff = 32;
  return TinyTransformer::create_random(c, seed);
}

}  // namespace ctxmem::testing
