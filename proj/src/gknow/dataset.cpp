#include "gklab/gknow/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gklab/compute/rng.hpp"

namespace gklab::gknow {

namespace {

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

bool is_capitalized(const std::string& s) { return !s.empty() && std::isupper(static_cast<unsigned char>(s[0])); }

std::string apply_case(const std::string& s, OutputCase c) {
  switch (c) {
    case OutputCase::kLower:
      return lower(s);
    case OutputCase::kCapital:
      return capitalize(s);
    case OutputCase::kVerbatim:
      return s;
  }
  return s;
}

const Term* find_pair(const std::vector<Term>& list, const Term& t, Gender g) {
  for (const Term& c : list)
    if (c.gender == g && c.pair && c.pair == t.pair) return &c;
  return nullptr;
}

struct Rendered {
  std::string prompt;
  std::string subject;
};

Rendered render(const Template& tpl, Kind kind, const Term& term, const Lexicon& lex) {
  std::string text = tpl.text;
  std::string subject = term.text;
  std::string phrase;
  std::string hole = "[SUBJECT]";
  switch (kind) {
    case Kind::kPronoun:
      if (tpl.possessive_subject()) {
        const Term* pos = find_pair(lex.possessives, term, term.gender);
        if (!pos) throw ConfigError("no possessive form for pronoun '" + term.text + "'");
        subject = phrase = pos->text;
        hole = "[SUBJECT]'s";
      } else {
        phrase = term.text;
      }
      break;
    case Kind::kName:
      phrase = term.text;
      break;
    case Kind::kStereo:
      if (term.category == "adjective") subject = term.text + " " + lex.neutral_gender;
      phrase = "the " + subject;
      break;
    case Kind::kGender:
    case Kind::kLex:
      phrase = "the " + term.text;
      break;
  }
  if (tpl.subject_first()) phrase = capitalize(phrase);
  text.replace(text.find(hole), hole.size(), phrase);
  return {text, subject};
}

std::vector<const Term*> outputs_for(const Template& tpl, Gender g, const Lexicon& lex) {
  const std::vector<Term>* list = nullptr;
  switch (tpl.prediction) {
    case Kind::kPronoun:
      list = &lex.pronouns;
      break;
    case Kind::kGender:
      list = &lex.gender_outputs;
      break;
    case Kind::kName:
      list = &lex.names;
      break;
    case Kind::kLex:
      list = &lex.lex;
      break;
    case Kind::kStereo:
      list = &lex.stereo;
      break;
  }
  std::vector<const Term*> out;
  for (const Term& t : *list) {
    if (t.gender != g) continue;
    if (tpl.prediction == Kind::kStereo && tpl.category != "-" && t.category != tpl.category) continue;
    out.push_back(&t);
  }
  return out;
}

}  // namespace

Dataset generate_full(const Lexicon& lexicon, const TemplateRegistry& registry) {
  Dataset out;
  std::uint64_t id = 0;
  for (const SubsetKey& key : SubsetKey::all()) {
    for (const Template& tpl : registry.templates) {
      if (tpl.prediction != key.prediction || !tpl.allows(key.assumption)) continue;
      const auto& subjects = lexicon.subjects(key.assumption);
      if (subjects.empty()) throw ConfigError("lexicon has no " + to_string(key.assumption) + " terms");
      for (const Term& subj : subjects) {
        const auto outputs = outputs_for(tpl, subj.gender, lexicon);
        if (outputs.empty()) {
          throw ConfigError("lexicon has no " + to_string(tpl.prediction) + " outputs for " +
                            to_string(subj.gender) + " subjects");
        }
        const Rendered r = render(tpl, key.assumption, subj, lexicon);
        for (const Term* o : outputs) {
          Example ex;
          ex.id = id++;
          ex.prompt = r.prompt;
          ex.subject = r.subject;
          ex.expected_output = apply_case(o->text, tpl.output_case);
          if (key.assumption == Kind::kStereo) ex.stereo_category = subj.category;
          if (key.prediction == Kind::kStereo) ex.stereo_category = o->category;
          ex.gender = subj.gender;
          ex.subset = key;
          out.push_back(std::move(ex));
        }
      }
    }
  }
  return out;
}

std::pair<std::size_t, std::size_t> split_sizes(std::size_t n, const SplitConfig& cfg) {
  const auto held = static_cast<std::size_t>(std::ceil(cfg.test_fraction * static_cast<double>(n) - 1e-9));
  return {std::min(cfg.test_cap, held), std::min(cfg.train_cap, n - held)};
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Split generate_small(const Dataset& full, const SplitConfig& cfg) {
  if (cfg.train_cap == 0 || cfg.test_cap == 0) throw ConfigError("split caps must be positive");
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < full.size(); ++i) {
    const Example& ex = full[i];
    const std::string key = (ex.subset ? ex.subset->name() : std::string("unknown")) + "/" + to_string(ex.gender);
    auto [it, fresh] = groups.try_emplace(key);
    if (fresh) order.push_back(key);
    it->second.push_back(i);
  }
  const compute::Rng root(cfg.seed);
  Split out;
  for (const std::string& key : order) {
    std::vector<std::size_t> idx = groups[key];
    compute::Rng rng = root.split(fnv1a(key));
    rng.shuffle(idx);
    const auto [n_test, n_train] = split_sizes(idx.size(), cfg);
    for (std::size_t i = 0; i < n_test; ++i) out.test.push_back(full[idx[i]]);
    for (std::size_t i = n_test; i < n_test + n_train; ++i) out.train.push_back(full[idx[i]]);
  }
  auto by_id = [](const Example& a, const Example& b) { return a.id < b.id; };
  std::sort(out.train.begin(), out.train.end(), by_id);
  std::sort(out.test.begin(), out.test.end(), by_id);
  return out;
}

namespace {

bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.'; }

// Position of `subject` as a whole word in `prompt`, matching the first letter
// case-insensitively.
std::size_t find_subject(const std::string& prompt, const std::string& subject) {
  for (const std::string& form : {subject, capitalize(subject)}) {
    std::size_t pos = 0;
    while ((pos = prompt.find(form, pos)) != std::string::npos) {
      const bool left = pos == 0 || !word_char(prompt[pos - 1]);
      const std::size_t end = pos + form.size();
      const bool right = end == prompt.size() || !std::isalnum(static_cast<unsigned char>(prompt[end]));
      if (left && right) return pos;
      ++pos;
    }
  }
  return std::string::npos;
}

std::string swap_subject(const std::string& prompt, std::size_t pos, const std::string& old_subject,
                         std::string replacement) {
  if (std::isupper(static_cast<unsigned char>(prompt[pos]))) replacement = capitalize(replacement);
  std::string out = prompt;
  out.replace(pos, old_subject.size(), replacement);
  return out;
}

const Term* find_term(const std::vector<Term>& list, const std::string& text) {
  for (const Term& t : list)
    if (t.text == text || lower(t.text) == lower(text)) return &t;
  return nullptr;
}

}  // namespace

Example augment_counterfactual(const Example& example, const Lexicon& lexicon, const Tokenizer& tokenizer) {
  if (!example.subset) {
    throw AugmentationError("example " + std::to_string(example.id) + " has no subset key");
  }
  const Kind assumption = example.subset->assumption;
  const std::size_t pos = find_subject(example.prompt, example.subject);
  if (pos == std::string::npos) {
    throw AugmentationError("example " + std::to_string(example.id) + ": subject '" + example.subject +
                            "' not found in prompt");
  }
  const Gender other = opposite(example.gender);
  const std::size_t clean_len = tokenizer.tokenize(example.prompt).size();

  std::vector<std::string> candidates;
  auto push_pair = [&](const std::vector<Term>& list) {
    if (const Term* t = find_term(list, example.subject))
      if (const Term* p = find_pair(list, *t, other)) candidates.push_back(p->text);
  };
  auto push_all = [&](const std::vector<Term>& list) {
    for (const Term& t : list)
      if (t.gender == other) candidates.push_back(t.text);
  };
  switch (assumption) {
    case Kind::kPronoun:
      push_pair(lexicon.pronouns);
      push_pair(lexicon.possessives);
      break;
    case Kind::kGender:
      push_pair(lexicon.indicators);
      break;
    case Kind::kName:
      push_pair(lexicon.names);
      push_all(lexicon.names);
      break;
    case Kind::kLex:
    case Kind::kStereo:
      push_all(lexicon.counterfactual);
      push_all(lexicon.lex);
      push_all(lexicon.indicators);
      break;
  }
  for (const std::string& c : candidates) {
    std::string corrupted = swap_subject(example.prompt, pos, example.subject, c);
    if (tokenizer.tokenize(corrupted).size() == clean_len) {
      Example out = example;
      out.corrupted_prompt = std::move(corrupted);
      return out;
    }
  }
  throw AugmentationError("example " + std::to_string(example.id) +
                          ": no opposite-gender counterpart of equal tokenized length for '" + example.subject + "'");
}

bool supports_candidates(const SubsetKey& key) {
  return key.prediction == Kind::kPronoun || key.prediction == Kind::kGender;
}

Example augment_candidates(const Example& example, const Lexicon& lexicon) {
  if (!example.subset || !supports_candidates(*example.subset)) {
    throw ContractError("example " + std::to_string(example.id) +
                        ": candidates exist only for pronoun and gender prediction");
  }
  const bool pronoun = example.subset->prediction == Kind::kPronoun;
  const auto& list = pronoun ? lexicon.pronouns : lexicon.gender_outputs;
  const Term* t = find_term(list, example.expected_output);
  const Term* p = t ? find_pair(list, *t, opposite(t->gender)) : nullptr;
  if (!p) {
    throw ContractError("example " + std::to_string(example.id) + ": no opposite for '" +
                        example.expected_output + "'");
  }
  Example out = example;
  out.opposite_output = is_capitalized(example.expected_output) ? capitalize(p->text) : lower(p->text);
  out.neutral_output = pronoun ? lexicon.neutral_pronoun : lexicon.neutral_gender;
  return out;
}

Dataset augment_dataset(const Dataset& data, const Lexicon& lexicon, const Tokenizer& tokenizer) {
  Dataset out;
  out.reserve(data.size());
  for (const Example& ex : data) {
    if (ex.subset && supports_candidates(*ex.subset)) {
      out.push_back(augment_candidates(augment_counterfactual(ex, lexicon, tokenizer), lexicon));
    } else {
      out.push_back(ex);
    }
  }
  return out;
}

std::string to_jsonl_line(const Example& ex) {
  nlohmann::ordered_json j;
  j["prompt"] = ex.prompt;
  j["subject"] = ex.subject;
  j["expected_output"] = ex.expected_output;
  if (ex.stereo_category) j["stereo_category"] = *ex.stereo_category;
  j["gender"] = to_string(ex.gender);
  j["id"] = ex.id;
  if (ex.subset) j["subset"] = ex.subset->name();
  if (ex.opposite_output) j["opposite_output"] = *ex.opposite_output;
  if (ex.neutral_output) j["neutral_output"] = *ex.neutral_output;
  if (ex.corrupted_prompt) j["corrupted_prompt"] = *ex.corrupted_prompt;
  return j.dump();
}

Example from_jsonl_line(const std::string& line, std::size_t lineno) {
  try {
    const auto j = nlohmann::json::parse(line);
    Example ex;
    ex.prompt = j.at("prompt").get<std::string>();
    ex.subject = j.at("subject").get<std::string>();
    ex.expected_output = j.at("expected_output").get<std::string>();
    if (j.contains("stereo_category")) ex.stereo_category = j["stereo_category"].get<std::string>();
    ex.gender = parse_gender(j.at("gender").get<std::string>());
    ex.id = j.at("id").get<std::uint64_t>();
    if (j.contains("subset")) ex.subset = SubsetKey::parse(j["subset"].get<std::string>());
    if (j.contains("opposite_output")) ex.opposite_output = j["opposite_output"].get<std::string>();
    if (j.contains("neutral_output")) ex.neutral_output = j["neutral_output"].get<std::string>();
    if (j.contains("corrupted_prompt")) ex.corrupted_prompt = j["corrupted_prompt"].get<std::string>();
    return ex;
  } catch (const std::exception& e) {
    throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
  }
}

void write_jsonl(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const Example& ex : data) os << to_jsonl_line(ex) << '\n';
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Dataset read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Dataset out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    out.push_back(from_jsonl_line(line, lineno));
  }
  return out;
}

std::map<std::string, std::size_t> subset_counts(const Dataset& data) {
  std::map<std::string, std::size_t> out;
  for (const Example& ex : data) ++out[ex.subset ? ex.subset->name() : "unknown"];
  return out;
}

}  // namespace gklab::gknow
