#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <cctype>
#include <set>

#include "gklab/compute/rng.hpp"
#include "gklab/gknow/dataset.hpp"

using namespace gklab::gknow;

namespace {

const Lexicon& lexicon() {
  static const Lexicon lex = Lexicon::load_default();
  return lex;
}

const TemplateRegistry& registry() {
  static const TemplateRegistry reg = TemplateRegistry::load_default();
  return reg;
}

const Dataset& full() {
  static const Dataset d = generate_full(lexicon(), registry());
  return d;
}

std::size_t count_gender(const std::vector<Term>& terms, Gender g, const std::string& category = "") {
  std::size_t n = 0;
  for (const Term& t : terms)
    if (t.gender == g && (category.empty() || t.category == category)) ++n;
  return n;
}

}  // namespace

TEST(Lexicon, PublishedListSizes) {
  const Lexicon& lex = lexicon();
  EXPECT_EQ(count_gender(lex.names, Gender::kFeminine), 10u);
  EXPECT_EQ(count_gender(lex.names, Gender::kMasculine), 10u);
  EXPECT_EQ(count_gender(lex.stereo, Gender::kFeminine, "occupation"), 20u);
  EXPECT_EQ(count_gender(lex.stereo, Gender::kMasculine, "occupation"), 20u);
  EXPECT_EQ(count_gender(lex.stereo, Gender::kFeminine, "adjective"), 27u);
  EXPECT_EQ(count_gender(lex.stereo, Gender::kMasculine, "adjective"), 35u);
  EXPECT_EQ(count_gender(lex.lex, Gender::kFeminine), 49u);
  EXPECT_EQ(count_gender(lex.lex, Gender::kMasculine), 49u);
  EXPECT_EQ(lex.names.front().text, "Mary");
}

TEST(Lexicon, MissingFileIsConfigError) {
  EXPECT_THROW(Lexicon::load("/nonexistent/lexicon.tsv"), ConfigError);
}

TEST(SubsetKey, TwentyOffDiagonalCells) {
  const auto keys = SubsetKey::all();
  EXPECT_EQ(keys.size(), 20u);
  std::size_t stereo = 0;
  for (const auto& k : keys) {
    EXPECT_NE(k.prediction, k.assumption);
    EXPECT_EQ(SubsetKey::parse(k.name()), k);
    stereo += k.stereotypical();
  }
  EXPECT_EQ(stereo, 8u);
  EXPECT_EQ(SubsetKey({Kind::kGender, Kind::kStereo}).name(), "gender_prediction_based_on_stereo");
  EXPECT_THROW(SubsetKey::parse("pronoun_prediction_based_on_pronoun"), ConfigError);
}

TEST(Tokenizer, MergesPhrasesAndKeepsNames) {
  Tokenizer tok(lexicon());
  const std::vector<std::string> want = {"the", "female person", "wished", "that"};
  EXPECT_EQ(tok.tokenize("The female person wished that"), want);
  const std::vector<std::string> want2 = {"the", "gender", "of", "the", "nurturing person", "is", "?", "answer", ":"};
  EXPECT_EQ(tok.tokenize("The gender of the nurturing person is? Answer:"), want2);
  const std::vector<std::string> want3 = {"Mary", "'s", "name", "is"};
  EXPECT_EQ(tok.tokenize("Mary's name is"), want3);
  EXPECT_EQ(tok.tokenize("The police officer is nice, isn't").size(), 6u);
}

TEST(GenerateFull, PronounBasedOnNameIsTemplatesTimesNames) {
  EXPECT_EQ(subset_counts(full()).at("pronoun_prediction_based_on_name"), 41u * 20u);
}

TEST(GenerateFull, AllSubsetsPresentAndFlagsConsistent) {
  const auto counts = subset_counts(full());
  EXPECT_EQ(counts.size(), 20u);
  std::set<std::uint64_t> ids;
  std::map<std::string, std::set<std::pair<std::string, std::string>>> pairs;
  for (const Example& ex : full()) {
    EXPECT_TRUE(ids.insert(ex.id).second);
    EXPECT_EQ(ex.stereo_category.has_value(), ex.subset->stereotypical()) << ex.id;
    EXPECT_TRUE(pairs[ex.subset->name()].insert({ex.prompt, ex.expected_output}).second) << ex.prompt;
    std::string cap = ex.subject;
    cap[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(cap[0])));
    EXPECT_TRUE(ex.prompt.find(ex.subject) != std::string::npos || ex.prompt.find(cap) != std::string::npos)
        << ex.prompt;
  }
}

TEST(GenerateFull, PublishedExampleEntriesAppear) {
  bool first = false, second = false;
  for (const Example& ex : full()) {
    if (ex.prompt == "The female person wished that" && ex.expected_output == "she" &&
        ex.subject == "female person" && ex.subset->name() == "pronoun_prediction_based_on_gender")
      first = true;
    if (ex.prompt == "The gender of the nurturing person is? Answer:" && ex.expected_output == "Female" &&
        ex.stereo_category == "adjective" && ex.gender == Gender::kFeminine)
      second = true;
  }
  EXPECT_TRUE(first);
  EXPECT_TRUE(second);
}

TEST(GenerateFull, TotalAgainstPublishedTarget) {
  // The reconstruction overshoots the published 91,490 by 1,290; the subject
  // lists behind the gender assumption and per-cell template use are not
  // enumerated in the source tables.
  EXPECT_EQ(full().size(), 92780u);
}

TEST(GenerateFull, EmptyRegistryGivesEmptyDataset) {
  EXPECT_TRUE(generate_full(lexicon(), TemplateRegistry{}).empty());
}

TEST(GenerateFull, EmptyLexiconCategoryIsConfigError) {
  Lexicon lex = lexicon();
  lex.names.clear();
  EXPECT_THROW(generate_full(lex, registry()), ConfigError);
}

TEST(GenerateSmall, PublishedSplitSizes) {
  const Split s = generate_small(full(), SplitConfig{.seed = 0});
  EXPECT_EQ(s.train.size(), 6294u);
  EXPECT_EQ(s.test.size(), 698u);
  std::set<std::uint64_t> train_ids;
  for (const auto& e : s.train) train_ids.insert(e.id);
  for (const auto& e : s.test) EXPECT_FALSE(train_ids.contains(e.id));
  for (const auto& [name, n] : subset_counts(s.train)) EXPECT_LE(n, 400u) << name;
  for (const auto& [name, n] : subset_counts(s.test)) EXPECT_LE(n, 40u) << name;
}

TEST(GenerateSmall, SmallGroupSplitsEightyTwenty) {
  Dataset ten(full().begin(), full().begin() + 10);
  for (auto& ex : ten) ex.gender = Gender::kFeminine;
  const Split s = generate_small(ten, SplitConfig{});
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.test.size(), 2u);
}

TEST(GenerateSmall, DeterministicPerSeed) {
  const Split a = generate_small(full(), SplitConfig{.seed = 3});
  const Split b = generate_small(full(), SplitConfig{.seed = 3});
  const Split c = generate_small(full(), SplitConfig{.seed = 4});
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  EXPECT_NE(a.test, c.test);
}

TEST(Counterfactual, NamesAndPronouns) {
  Tokenizer tok(lexicon());
  Example mary;
  mary.prompt = "Mary is nice, isn't";
  mary.subject = "Mary";
  mary.expected_output = "she";
  mary.subset = SubsetKey{Kind::kPronoun, Kind::kName};
  EXPECT_EQ(augment_counterfactual(mary, lexicon(), tok).corrupted_prompt, "John is nice, isn't");

  Example she;
  she.prompt = "She identifies as";
  she.subject = "she";
  she.subset = SubsetKey{Kind::kGender, Kind::kPronoun};
  EXPECT_EQ(augment_counterfactual(she, lexicon(), tok).corrupted_prompt, "He identifies as");

  Example nurse;
  nurse.prompt = "The nurse is nice, isn't";
  nurse.subject = "nurse";
  nurse.subset = SubsetKey{Kind::kPronoun, Kind::kStereo};
  EXPECT_EQ(augment_counterfactual(nurse, lexicon(), tok).corrupted_prompt, "The male is nice, isn't");

  Example missing = nurse;
  missing.subject = "plumber";
  EXPECT_THROW(augment_counterfactual(missing, lexicon(), tok), AugmentationError);
}

TEST(Counterfactual, EveryAugmentedPairIsLengthMatched) {
  Tokenizer tok(lexicon());
  const Dataset aug = augment_dataset(full(), lexicon(), tok);
  std::size_t paired = 0;
  for (const Example& ex : aug) {
    if (!ex.corrupted_prompt) continue;
    ++paired;
    EXPECT_EQ(tok.tokenize(ex.prompt).size(), tok.tokenize(*ex.corrupted_prompt).size()) << ex.id;
    EXPECT_NE(ex.prompt, *ex.corrupted_prompt);
  }
  std::size_t expected = 0;
  for (const auto& [name, n] : subset_counts(full()))
    if (name.rfind("pronoun_", 0) == 0 || name.rfind("gender_", 0) == 0) expected += n;
  EXPECT_EQ(paired, expected);
}

TEST(Candidates, PublishedTokenLists) {
  Example ex;
  ex.expected_output = "she";
  ex.subset = SubsetKey{Kind::kPronoun, Kind::kGender};
  auto a = augment_candidates(ex, lexicon());
  EXPECT_EQ(a.opposite_output, "he");
  EXPECT_EQ(a.neutral_output, "they");
  EXPECT_EQ(augment_candidates(a, lexicon()), a);

  ex.expected_output = "Female";
  ex.subset = SubsetKey{Kind::kGender, Kind::kStereo};
  auto b = augment_candidates(ex, lexicon());
  EXPECT_EQ(b.opposite_output, "Male");
  EXPECT_EQ(b.neutral_output, "person");

  ex.subset = SubsetKey{Kind::kName, Kind::kGender};
  EXPECT_THROW(augment_candidates(ex, lexicon()), ContractError);
}

TEST(Jsonl, PublishedEntryRoundTripsByteIdentically) {
  const std::string line =
      R"({"prompt":"The gender of the nurturing person is? Answer:","subject":"nurturing person",)"
      R"("expected_output":"Female","stereo_category":"adjective","gender":"feminine","id":9985})";
  EXPECT_EQ(to_jsonl_line(from_jsonl_line(line)), line);
  const std::string line2 =
      R"({"prompt":"The female person wished that","subject":"female person","expected_output":"she",)"
      R"("gender":"feminine","id":18})";
  EXPECT_EQ(to_jsonl_line(from_jsonl_line(line2)), line2);
}

TEST(Jsonl, EmptyAndRandomRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "gklab_jsonl_test";
  std::filesystem::create_directories(dir);
  write_jsonl({}, dir / "empty.jsonl");
  EXPECT_EQ(std::filesystem::file_size(dir / "empty.jsonl"), 0u);
  EXPECT_TRUE(read_jsonl(dir / "empty.jsonl").empty());

  Tokenizer tok(lexicon());
  const Dataset aug = augment_dataset(full(), lexicon(), tok);
  gklab::compute::Rng rng(17);
  Dataset sample;
  for (int i = 0; i < 1000; ++i) sample.push_back(aug[rng.below(aug.size())]);
  write_jsonl(sample, dir / "sample.jsonl");
  EXPECT_EQ(read_jsonl(dir / "sample.jsonl"), sample);
}

TEST(Jsonl, MalformedLineReportsLineNumber) {
  const auto dir = std::filesystem::temp_directory_path() / "gklab_jsonl_test";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "bad.jsonl") << to_jsonl_line(full()[0]) << "\n{not json\n";
  try {
    read_jsonl(dir / "bad.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}
