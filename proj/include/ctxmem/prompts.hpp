#pragma once

// Prompt assembly. The teacher sees [context ++ template(query)], the
// student sees template(query) alone; open continuations drop the template.

#include <string>
#include <string_view>

#include "ctxmem/context.hpp"
#include "ctxmem/tokenizer.hpp"

namespace ctxmem {

inline std::string query_template(std::string_view query) {
  return "Query:\n" + std::string(query) + "\nResponse:\n";
}

/// Elicitation prompt asking the model for 20 numbered queries about `context`.
inline std::string build_query_prompt(std::string_view context) {
  std::string p;
  p += "Please prepare to analyze the text provided below. As you read, simulate real-world user queries about the "
       "content, such as summarizing, detailing, or inferring knowledge.\n";
  p += "For example, consider the following potential user queries if applicable to the provided text:\n";
  const std::string hints =
      "1. Ask for a concise summary that captures the main points and essential details of the text. Anticipate user "
      "requests such as, \"What are the central arguments?\" or \"Can you summarize the main events of the story?\"\n"
      "2. Formulate questions about key details or themes within the text, such as \"What achievements did Anthony "
      "Joshua achieve in boxing?\" or \"What was the date and venue of event?\"\n"
      "3. Identify and explore patterns or examples, create similar formatted examples or pose questions, such as "
      "\"What is the labeling criteria for these examples?\"\n"
      "4. Integrate and reflect on new knowledge from the text, asking for the implications and applications of the "
      "new knowledge.\n"
      "5. Request repetition of specific sentences or paragraphs from the text.\n"
      "6. ...\n";
  p += hints;
  p += "Here is the text for analysis:\n";
  p += "======= Text Begins Here =======\n";
  p += context;
  p += "\n======= Text Ends Here =======\n";
  p += "Let's review the potential user queries to see if they apply to the provided text.\n";
  p += hints;
  p += "Determine suitable query types for the text and generate a comprehensive set of queries that thoroughly "
       "cover the content.\n";
  p += "Make the subject of the query clear and avoid using pronouns like \"it,\" \"he,\" or \"she\" to prevent "
       "ambiguity.\n";
  p += "Output 20 queries directly, each on a separate line, numbered from \"1.\" to \"20.\" Conclude with "
       "\"|||||\" as the end symbol.\n";
  return p;
}

/// Teacher conditioning for a response: the context, then the query template (if any).
inline TokenSequence teacher_prefix(const Context& context, std::string_view query,
                                    const Vocabulary& vocab = Vocabulary::reference()) {
  TokenSequence out = context.tokens;
  if (!query.empty()) {
    auto q = vocab.encode(query_template(query));
    out.insert(out.end(), q.begin(), q.end());
  }
  return out;
}

/// Student conditioning: the query template alone, or nothing for open continuations.
inline TokenSequence student_prefix(std::string_view query, const Vocabulary& vocab = Vocabulary::reference()) {
  if (query.empty()) return {};
  return vocab.encode(query_template(query));
}

}  // namespace ctxmem
