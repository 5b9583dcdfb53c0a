#pragma once

// Cloze-style query synthesis: every "<subject> is <object>." sentence of a
// context yields one query per phrasing in lexicon::kQueryForms, with the
// object blanked out. Used in place of prompted query generation by
// backends that cannot follow the elicitation prompt.

#include <algorithm>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "ctxmem/common.hpp"
#include "ctxmem/lexicon.hpp"

namespace ctxmem {

inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

/// Sentences split at newlines and at '.', '?' or '!' followed by whitespace or end of text.
inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    auto t = trim(cur);
    if (!t.empty()) out.emplace_back(t);
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '\n') {
      flush();
      continue;
    }
    cur.push_back(c);
    if ((c == '.' || c == '?' || c == '!') && (i + 1 == text.size() || text[i + 1] == ' ' || text[i + 1] == '\n'))
      flush();
  }
  flush();
  return out;
}

/// Subject of a "<subject> is <object>." sentence, or empty if the sentence has another shape.
inline std::string cloze_subject(std::string_view sentence) {
  auto s = trim(sentence);
  while (!s.empty() && (s.back() == '.' || s.back() == '!' || s.back() == '?')) s.remove_suffix(1);
  auto pos = s.rfind(" is ");
  if (pos == std::string_view::npos || pos == 0) return {};
  if (trim(s.substr(pos + 4)).empty()) return {};
  return std::string(trim(s.substr(0, pos)));
}

inline std::vector<std::string> cloze_queries(std::string_view context, std::uint64_t seed) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& sentence : split_sentences(context)) {
    const std::string subject = cloze_subject(sentence);
    if (subject.empty()) continue;
    for (auto form : lexicon::kQueryForms) {
      std::string q = lexicon::render_query(form, subject);
      if (seen.insert(q).second) out.push_back(std::move(q));
    }
  }
  std::uint64_t state = seed;
  for (std::size_t i = out.size(); i > 1; --i) {
    state = splitmix64(state);
    std::swap(out[i - 1], out[state % i]);
  }
  return out;
}

}  // namespace ctxmem
