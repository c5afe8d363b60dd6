#include "gklab/gknow/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

namespace gklab::gknow {

namespace {

std::vector<std::string> split_ws(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream ss{std::string(text)};
  std::string w;
  while (ss >> w) out.push_back(w);
  return out;
}

}  // namespace

Tokenizer::Tokenizer(const Lexicon& lexicon) {
  for (const Term& t : lexicon.names) proper_.insert(t.text);
  std::set<std::vector<std::string>> phrases;
  auto add = [&](const std::string& text) {
    std::vector<std::string> words;
    for (const std::string& w : split_ws(text)) words.push_back(normalize(w));
    if (words.size() > 1) phrases.insert(std::move(words));
  };
  for (const auto* list : {&lexicon.indicators, &lexicon.gender_outputs, &lexicon.lex, &lexicon.stereo,
                           &lexicon.counterfactual})
    for (const Term& t : *list) add(t.text);
  for (const Term& t : lexicon.stereo)
    if (t.category == "adjective") add(t.text + " " + lexicon.neutral_gender);
  phrases_.assign(phrases.begin(), phrases.end());
  std::stable_sort(phrases_.begin(), phrases_.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
}

std::string Tokenizer::normalize(std::string_view word) const {
  std::string w(word);
  if (proper_.contains(w)) return w;
  for (char& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return w;
}

std::vector<std::string> Tokenizer::tokenize(std::string_view text) const {
  std::vector<std::string> words;
  for (std::string w : split_ws(text)) {
    std::vector<std::string> tail;
    while (!w.empty() && (w.back() == ',' || w.back() == '?' || w.back() == ':')) {
      tail.insert(tail.begin(), std::string(1, w.back()));
      w.pop_back();
    }
    if (w.size() > 2 && w.ends_with("'s")) {
      tail.insert(tail.begin(), "'s");
      w.resize(w.size() - 2);
    }
    if (!w.empty()) words.push_back(normalize(w));
    for (auto& t : tail) words.push_back(std::move(t));
  }
  std::vector<std::string> out;
  for (std::size_t i = 0; i < words.size();) {
    bool merged = false;
    for (const auto& ph : phrases_) {
      if (i + ph.size() <= words.size() && std::equal(ph.begin(), ph.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
        std::string joined = ph[0];
        for (std::size_t k = 1; k < ph.size(); ++k) joined += " " + ph[k];
        out.push_back(std::move(joined));
        i += ph.size();
        merged = true;
        break;
      }
    }
    if (!merged) out.push_back(std::move(words[i++]));
  }
  return out;
}

}  // namespace gklab::gknow
