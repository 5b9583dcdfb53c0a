#pragma once

// Invented word inventories shared by the reference tokenizer, the synthetic
// pretraining corpus and the task generators. Names are consonant-vowel
// strings drawn from a fixed permutation, so no natural-language corpus
// contains the facts built from them.

#include <array>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/common.hpp"

namespace ctxmem::lexicon {

inline constexpr std::size_t kNameCount = 256;

/// Relation words used in "the <relation> of <name> is <name>." sentences.
inline constexpr std::array<std::string_view, 12> kRelations = {
    "color", "home", "pet", "food", "tool", "city", "boss", "friend", "song", "ship", "coin", "river"};

/// Relation used by the many-shot classification task.
inline constexpr std::string_view kLabelRelation = "label";

/// Query phrasings; `{}` is replaced by the sentence subject ("the color of bako").
inline constexpr std::array<std::string_view, 3> kQueryForms = {"what is {}?", "tell me {}.",
                                                                "recall {}."};

inline std::string render_query(std::string_view form, std::string_view subject) {
  std::string out(form);
  auto pos = out.find("{}");
  out.replace(pos, 2, subject);
  return out;
}

/// The 256 invented names, in a fixed order.
inline const std::vector<std::string>& names() {
  static const std::vector<std::string> kNames = [] {
    constexpr std::string_view consonants = "bdfgklmnprstvz";
    constexpr std::string_view vowels = "aeiou";
    std::vector<std::string> all;
    for (char c1 : consonants)
      for (char v1 : vowels)
        for (char c2 : consonants)
          for (char v2 : vowels) all.push_back(std::string{c1, v1, c2, v2});
    std::uint64_t state = 0x5eed5eedULL;
    for (std::size_t i = all.size() - 1; i > 0; --i) {
      state = splitmix64(state);
      std::size_t j = state % (i + 1);
      std::swap(all[i], all[j]);
    }
    all.resize(kNameCount);
    return all;
  }();
  return kNames;
}

/// Two-digit numeric labels "10".."99".
inline std::vector<std::string> numbers() {
  std::vector<std::string> out;
  for (int n = 10; n < 100; ++n) out.push_back(std::to_string(n));
  return out;
}

}  // namespace ctxmem::lexicon
