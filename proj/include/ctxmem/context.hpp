#pragma once

#include <string>

#include "ctxmem/common.hpp"
#include "ctxmem/tokenizer.hpp"

namespace ctxmem {

/// An input context: its source text and that text's tokenization.
struct Context {
  std::string id;
  TokenSequence tokens;
  std::string text;

  static Context from_text(std::string id, std::string text, const Vocabulary& vocab = Vocabulary::reference()) {
    Context c;
    c.id = std::move(id);
    c.tokens = vocab.encode(text);
    c.text = std::move(text);
    return c;
  }

  /// Token slice [begin, end) as a context of its own. Slices start and end
  /// at token boundaries, so re-encoding the slice text gives the same tokens.
  Context slice(std::size_t begin, std::size_t end, std::string slice_id,
                const Vocabulary& vocab = Vocabulary::reference()) const {
    Context c;
    c.id = std::move(slice_id);
    c.tokens.assign(tokens.begin() + static_cast<std::ptrdiff_t>(begin),
                    tokens.begin() + static_cast<std::ptrdiff_t>(end));
    c.text = vocab.decode(c.tokens);
    return c;
  }

  std::size_t size() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

}  // namespace ctxmem
