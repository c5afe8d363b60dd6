#pragma once

#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "gklab/gknow/lexicon.hpp"

namespace gklab::gknow {

/// Word-level tokenizer. Splits on whitespace, detaches ",", "?", ":" and a
/// possessive "'s", lowercases everything except names, then merges multiword
/// lexicon phrases ("police officer", "nurturing person") into single tokens.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(const Lexicon& lexicon);

  std::vector<std::string> tokenize(std::string_view text) const;
  /// Normalised single token for a term, e.g. "Female" -> "female".
  std::string normalize(std::string_view word) const;

 private:
  std::set<std::string> proper_;
  std::vector<std::vector<std::string>> phrases_;  // longest first
};

}  // namespace gklab::gknow
