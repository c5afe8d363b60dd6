#include "gklab/gknow/lexicon.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace gklab::gknow {

std::string to_string(Gender g) { return g == Gender::kFeminine ? "feminine" : "masculine"; }

Gender parse_gender(std::string_view text) {
  if (text == "feminine") return Gender::kFeminine;
  if (text == "masculine") return Gender::kMasculine;
  throw ConfigError("unknown gender '" + std::string(text) + "'");
}

Gender opposite(Gender g) { return g == Gender::kFeminine ? Gender::kMasculine : Gender::kFeminine; }

std::string to_string(Kind k) {
  switch (k) {
    case Kind::kPronoun:
      return "pronoun";
    case Kind::kGender:
      return "gender";
    case Kind::kName:
      return "name";
    case Kind::kLex:
      return "lex";
    case Kind::kStereo:
      return "stereo";
  }
  return "?";
}

Kind parse_kind(std::string_view text) {
  for (Kind k : kAllKinds)
    if (to_string(k) == text) return k;
  throw ConfigError("unknown kind '" + std::string(text) + "'");
}

std::string SubsetKey::name() const {
  return to_string(prediction) + "_prediction_based_on_" + to_string(assumption);
}

SubsetKey SubsetKey::parse(std::string_view text) {
  for (const SubsetKey& k : all())
    if (k.name() == text) return k;
  std::string valid;
  for (const SubsetKey& k : all()) valid += (valid.empty() ? "" : ", ") + k.name();
  throw ConfigError("unknown subset '" + std::string(text) + "'; valid subsets: " + valid);
}

std::vector<SubsetKey> SubsetKey::all() {
  std::vector<SubsetKey> out;
  for (Kind p : kAllKinds)
    for (Kind a : kAllKinds)
      if (p != a) out.push_back({p, a});
  return out;
}

namespace {

std::vector<std::vector<std::string>> read_tsv(const std::filesystem::path& path, std::size_t columns) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    if (cells.size() != columns) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(columns) +
                        " tab-separated columns, got " + std::to_string(cells.size()));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("GKNOW_LAB_DATA"); env && *env) return env;
#ifdef GKLAB_DATA_DIR
  return std::filesystem::path(GKLAB_DATA_DIR) / "gknow";
#else
  return "data/gknow";
#endif
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  Lexicon lex;
  lex.neutral_pronoun.clear();
  lex.neutral_gender.clear();
  for (auto& row : read_tsv(path, 5)) {
    const std::string& kind = row[0];
    if (kind == "neutral") {
      (row[1] == "pronoun" ? lex.neutral_pronoun : lex.neutral_gender) = row[3];
      continue;
    }
    Term t{row[3], parse_gender(row[2]), row[1], std::nullopt};
    if (row[4] != "-") t.pair = std::stoi(row[4]);
    std::vector<Term>* dst = nullptr;
    if (kind == "pronoun") dst = &lex.pronouns;
    else if (kind == "possessive") dst = &lex.possessives;
    else if (kind == "indicator") dst = &lex.indicators;
    else if (kind == "gender_output") dst = &lex.gender_outputs;
    else if (kind == "name") dst = &lex.names;
    else if (kind == "lex") dst = &lex.lex;
    else if (kind == "stereo") dst = &lex.stereo;
    else if (kind == "counterfactual") dst = &lex.counterfactual;
    else throw ConfigError(path.string() + ": unknown term kind '" + kind + "'");
    dst->push_back(std::move(t));
  }
  return lex;
}

Lexicon Lexicon::load_default() { return load(default_data_dir() / "lexicon.tsv"); }

const std::vector<Term>& Lexicon::subjects(Kind k) const {
  switch (k) {
    case Kind::kPronoun:
      return pronouns;
    case Kind::kGender:
      return indicators;
    case Kind::kName:
      return names;
    case Kind::kLex:
      return lex;
    case Kind::kStereo:
      return stereo;
  }
  return pronouns;
}

std::vector<std::string> Lexicon::gendered_terms() const {
  std::set<std::string> out;
  for (const auto* list : {&pronouns, &possessives, &indicators, &gender_outputs, &lex, &counterfactual})
    for (const Term& t : *list) out.insert(lower(t.text));
  for (const Term& t : names) out.insert(t.text);
  return {out.begin(), out.end()};
}

bool Template::allows(Kind assumption) const {
  if (assumption == prediction) return false;
  return assumptions.empty() || std::find(assumptions.begin(), assumptions.end(), assumption) != assumptions.end();
}

bool Template::possessive_subject() const { return text.find("[SUBJECT]'s") != std::string::npos; }

bool Template::subject_first() const { return text.rfind("[SUBJECT]", 0) == 0; }

TemplateRegistry TemplateRegistry::load(const std::filesystem::path& path) {
  TemplateRegistry reg;
  for (auto& row : read_tsv(path, 6)) {
    Template t;
    t.prediction = parse_kind(row[0]);
    t.category = row[1];
    if (row[2] != "*") {
      std::stringstream ss(row[2]);
      std::string k;
      while (std::getline(ss, k, ',')) t.assumptions.push_back(parse_kind(k));
    }
    if (row[3] == "lower") t.output_case = OutputCase::kLower;
    else if (row[3] == "capital") t.output_case = OutputCase::kCapital;
    else if (row[3] == "verbatim") t.output_case = OutputCase::kVerbatim;
    else throw ConfigError(path.string() + ": unknown output case '" + row[3] + "'");
    t.source = row[4];
    t.text = row[5];
    const auto first = t.text.find("[SUBJECT]");
    if (first == std::string::npos || t.text.find("[SUBJECT]", first + 1) != std::string::npos) {
      throw ConfigError(path.string() + ": template '" + t.text + "' must contain exactly one [SUBJECT]");
    }
    reg.templates.push_back(std::move(t));
  }
  return reg;
}

TemplateRegistry TemplateRegistry::load_default() { return load(default_data_dir() / "templates.tsv"); }

}  // namespace gklab::gknow
