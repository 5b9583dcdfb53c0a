#pragma once

// Subword vocabulary with greedy longest-match encoding. Every printable
// ASCII character and '\n' is a piece, so any text over that alphabet
// encodes, and decode(encode(x)) == x.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctxmem/common.hpp"
#include "ctxmem/lexicon.hpp"

namespace ctxmem {

class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kEos = 1;

  /// `pieces[0]` and `pieces[1]` are the BOS/EOS markers; they decode to "".
  explicit Vocabulary(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
    if (pieces_.size() < 2) throw ConfigError("vocabulary needs BOS and EOS entries");
    for (std::size_t i = 2; i < pieces_.size(); ++i) {
      const auto& p = pieces_[i];
      if (p.empty()) throw ConfigError("empty vocabulary piece at id " + std::to_string(i));
      if (!index_.emplace(p, static_cast<TokenId>(i)).second)
        throw ConfigError("duplicate vocabulary piece '" + p + "'");
      max_piece_ = std::max(max_piece_, p.size());
    }
  }

  /// The reference subword vocabulary: specials, characters, function
  /// words, relations, invented names and two-digit numbers.
  static const Vocabulary& reference() {
    static const Vocabulary kVocab = [] {
      std::vector<std::string> pieces = {"<bos>", "<eos>", "\n"};
      for (int c = 32; c < 127; ++c) pieces.emplace_back(1, static_cast<char>(c));
      for (std::string_view w : {"Query:\n", "Response:\n", "what is", "tell me", "recall",
                                 "the", " the", " of", " is", " label"})
        pieces.emplace_back(w);
      for (auto r : lexicon::kRelations) pieces.push_back(" " + std::string(r));
      for (const auto& n : lexicon::names()) pieces.push_back(" " + n);
      for (const auto& n : lexicon::numbers()) pieces.push_back(" " + n);
      return Vocabulary(std::move(pieces));
    }();
    return kVocab;
  }

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& pieces() const { return pieces_; }

  std::optional<TokenId> find(std::string_view piece) const {
    auto it = index_.find(std::string(piece));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  static bool supported(char c) {
    return c == '\n' || (static_cast<unsigned char>(c) >= 32 && static_cast<unsigned char>(c) < 127);
  }

  TokenSequence encode(std::string_view text) const {
    TokenSequence out;
    std::size_t pos = 0;
    while (pos < text.size()) {
      if (!supported(text[pos])) throw TokenizeError(pos, text[pos]);
      std::size_t len = std::min(max_piece_, text.size() - pos);
      for (; len > 0; --len) {
        auto it = index_.find(std::string(text.substr(pos, len)));
        if (it != index_.end()) {
          out.push_back(it->second);
          break;
        }
      }
      // Single characters are always pieces, so len == 0 only for
      // characters rejected above.
      pos += len;
    }
    return out;
  }

  std::string decode(std::span<const TokenId> tokens) const {
    std::string out;
    for (TokenId t : tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= pieces_.size())
        throw Error("token id " + std::to_string(t) + " outside vocabulary");
      if (t == kBos || t == kEos) continue;
      out += pieces_[static_cast<std::size_t>(t)];
    }
    return out;
  }

  std::string fingerprint() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : pieces_) {
      h = fnv1a(p, h);
      h = fnv1a(std::string_view("\x1f", 1), h);
    }
    return hex64(h);
  }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_ = 1;
};

}  // namespace ctxmem
