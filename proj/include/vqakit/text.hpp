#pragma once

// Shared text utilities: the one tokenizer used for captions, questions,
// answers and knowledge paragraphs.

#include <cctype>
#include <string>
#include <vector>

namespace vqakit::text {

// Lowercase, split on every non-alphanumeric byte, drop empties.
inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur += static_cast<char>(std::tolower(u));
    } else if (!cur.empty()) {
      out.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace vqakit::text
