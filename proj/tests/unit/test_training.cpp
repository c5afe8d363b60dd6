#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "gklab/compute/rng.hpp"
#include "gklab/training/trainer.hpp"

using namespace gklab;
using training::Sequence;
using training::Vocab;

namespace {

const gknow::Lexicon& lexicon() {
  static const gknow::Lexicon lex = gknow::Lexicon::load_default();
  return lex;
}

const gknow::Tokenizer& tokenizer() {
  static const gknow::Tokenizer tok(lexicon());
  return tok;
}

const gknow::Split& small_split() {
  static const gknow::Split s = [] {
    auto full = gknow::generate_full(lexicon(), gknow::TemplateRegistry::load_default());
    auto sp = gknow::generate_small(full, {});
    return gknow::Split{gknow::augment_dataset(sp.train, lexicon(), tokenizer()),
                        gknow::augment_dataset(sp.test, lexicon(), tokenizer())};
  }();
  return s;
}

gknow::Dataset only(const gknow::Dataset& d, const std::string& subset) {
  gknow::Dataset out;
  for (const auto& ex : d)
    if (ex.subset && ex.subset->name() == subset) out.push_back(ex);
  return out;
}

std::size_t argmax_final(const model::Parameters& p, const std::vector<std::size_t>& tokens) {
  const auto probs = model::predict_distribution(model::forward(p, tokens));
  return static_cast<std::size_t>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

}  // namespace

TEST(Vocab, SpecialsFirstThenSortedTokens) {
  const Vocab v = training::build_vocab(std::vector<std::string>{"The woman is nice"}, tokenizer());
  EXPECT_EQ(v.tokens(), (std::vector<std::string>{"<bos>", "<unk>", "is", "nice", "the", "woman"}));
  EXPECT_EQ(v.id("woman"), 5u);
  EXPECT_EQ(v.id("zebra"), Vocab::kUnk);
  EXPECT_THROW(v.require("zebra"), model::VocabularyError);
}

TEST(Vocab, OrderOfInputDoesNotMatter) {
  const auto a = training::build_vocab(std::vector<std::string>{"she is here", "he is a nurse"}, tokenizer());
  const auto b = training::build_vocab(std::vector<std::string>{"he is a nurse", "she is here"}, tokenizer());
  EXPECT_EQ(a, b);
}

TEST(Vocab, JsonRoundTripAndRejectsUnsorted) {
  const Vocab v = training::build_vocab(std::vector<std::string>{"b a c"}, tokenizer());
  EXPECT_EQ(Vocab::from_json(v.to_json()), v);
  EXPECT_THROW(Vocab::from_json(nlohmann::json::array({"<bos>", "<unk>", "c", "a"})), model::VocabularyError);
  EXPECT_THROW(Vocab::from_json(nlohmann::json::array({"a"})), model::VocabularyError);
}

TEST(Vocab, EveryExpectedOutputOfSmallTrainIsOneKnownToken) {
  const auto& sp = small_split();
  const Vocab v = training::build_vocab(std::vector<gknow::Dataset>{sp.train}, tokenizer());
  for (const auto& ex : sp.train) {
    const auto toks = tokenizer().tokenize(ex.expected_output);
    ASSERT_EQ(toks.size(), 1u) << ex.expected_output;
    EXPECT_TRUE(v.contains(toks[0])) << ex.expected_output;
  }
}

TEST(Corpus, EncodePrependsBosAndTwinsRespectExclusion) {
  const auto& sp = small_split();
  const Vocab v = training::build_vocab(std::vector<gknow::Dataset>{sp.train, sp.test}, tokenizer());
  const auto enc = training::encode("she is nice", v, tokenizer());
  ASSERT_EQ(enc.size(), 4u);
  EXPECT_EQ(enc[0], Vocab::kBos);
  EXPECT_EQ(enc[1], v.id("she"));

  std::size_t augmented = 0;
  for (const auto& ex : sp.train) augmented += ex.corrupted_prompt.has_value();
  const auto plain = training::build_corpus(sp.train, v, tokenizer(), false);
  const auto all = training::build_corpus(sp.train, v, tokenizer(), true);
  EXPECT_EQ(plain.size(), sp.train.size());
  EXPECT_EQ(all.size(), sp.train.size() + augmented);

  // Excluding the train prompts themselves drops every twin whose corrupted prompt is one of them.
  std::set<std::string> prompts;
  for (const auto& ex : sp.train) prompts.insert(ex.prompt);
  std::size_t collide = 0;
  for (const auto& ex : sp.train) collide += ex.corrupted_prompt && prompts.contains(*ex.corrupted_prompt);
  const auto excl = training::build_corpus(sp.train, v, tokenizer(), true, sp.train);
  EXPECT_EQ(excl.size(), all.size() - collide);
}

TEST(Train, MemorizesTenPairsWithOversizedModel) {
  compute::Rng rng(7);
  std::vector<Sequence> corpus;
  for (int i = 0; i < 10; ++i) {
    Sequence s{{Vocab::kBos}, static_cast<std::size_t>(rng.below(12))};
    for (int j = 0; j < 4; ++j) s.tokens.push_back(2 + static_cast<std::size_t>(rng.below(10)));
    corpus.push_back(s);
  }
  training::TrainConfig cfg;
  cfg.model.n_layers = 2;
  cfg.model.n_heads = 2;
  cfg.model.d_model = 32;
  cfg.model.d_head = 8;
  cfg.model.d_ff = 64;
  cfg.model.vocab_size = 12;
  cfg.model.max_seq_len = 8;
  cfg.epochs = 150;
  cfg.batch_size = 5;
  cfg.learning_rate = 1e-2;
  const auto res = training::train(corpus, cfg);
  for (const auto& s : corpus) EXPECT_EQ(argmax_final(res.params, s.tokens), s.target);
  EXPECT_LT(res.log.back().loss, res.log.front().loss);
  EXPECT_EQ(res.log.size(), 150u * 2u);
}

TEST(Train, SameSeedGivesIdenticalParameters) {
  std::vector<Sequence> corpus = {{{0, 2, 3}, 4}, {{0, 3, 2}, 5}, {{0, 4}, 2}};
  training::TrainConfig cfg;
  cfg.model.n_layers = 1;
  cfg.model.n_heads = 2;
  cfg.model.d_model = 8;
  cfg.model.d_head = 4;
  cfg.model.d_ff = 8;
  cfg.model.vocab_size = 6;
  cfg.model.max_seq_len = 4;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.seed = 11;
  const auto a = training::train(corpus, cfg);
  const auto b = training::train(corpus, cfg);
  const auto na = a.params.named();
  const auto nb = b.params.named();
  ASSERT_EQ(na.size(), nb.size());
  for (std::size_t i = 0; i < na.size(); ++i) {
    const auto x = na[i].second->data();
    const auto y = nb[i].second->data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end())) << na[i].first;
  }
  cfg.seed = 12;
  const auto c = training::train(corpus, cfg);
  EXPECT_NE(c.log.back().loss, a.log.back().loss);
}

TEST(Train, RejectsBadInputsAndReportsDivergence) {
  training::TrainConfig cfg;
  cfg.model.vocab_size = 6;
  EXPECT_THROW(training::train({}, cfg), training::TrainingError);
  EXPECT_THROW(training::train({{{0, 1}, 9}}, cfg), model::VocabularyError);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(training::train({{{0, 1}, 2}}, cfg), model::ConfigError);

  cfg = {};
  cfg.model.n_layers = 1;
  cfg.model.n_heads = 1;
  cfg.model.d_model = 4;
  cfg.model.d_head = 4;
  cfg.model.d_ff = 4;
  cfg.model.vocab_size = 4;
  cfg.model.max_seq_len = 4;
  cfg.learning_rate = 1e200;
  cfg.epochs = 50;
  cfg.batch_size = 1;
  try {
    training::train({{{0, 1}, 2}, {{0, 2}, 3}}, cfg);
    FAIL() << "expected divergence";
  } catch (const training::TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("last finite step"), std::string::npos) << e.what();
  }
}

TEST(Train, LogCsvHasHeaderAndOneRowPerStep) {
  const auto path = std::filesystem::temp_directory_path() / "gklab_log_test.csv";
  training::write_log_csv({{1, 0, 2.5}, {2, 0, 1.25}}, path);
  std::ifstream in(path);
  std::string header, r1, r2;
  std::getline(in, header);
  std::getline(in, r1);
  std::getline(in, r2);
  EXPECT_EQ(header, "step,epoch,loss");
  EXPECT_EQ(r1, "1,0,2.5");
  EXPECT_EQ(r2, "2,0,1.25");
  std::filesystem::remove(path);
}

TEST(Train, ShortRunLowersHeldOutFactualLoss) {
  const auto& sp = small_split();
  const auto train_set = only(sp.train, "pronoun_prediction_based_on_gender");
  const auto test_set = only(sp.test, "pronoun_prediction_based_on_gender");
  const Vocab v = training::build_vocab(std::vector<gknow::Dataset>{sp.train, sp.test}, tokenizer());
  const auto corpus = training::build_corpus(train_set, v, tokenizer(), true, sp.test);
  const auto held_out = training::build_corpus(test_set, v, tokenizer(), false);
  training::TrainConfig cfg;
  cfg.model.n_layers = 1;
  cfg.model.d_model = 32;
  cfg.model.d_head = 8;
  cfg.model.d_ff = 64;
  cfg.model.vocab_size = v.size();
  cfg.epochs = 2;
  const auto init = model::Parameters::init(cfg.model, compute::Rng(cfg.seed).split(1));
  const auto res = training::train(corpus, cfg);
  EXPECT_LT(training::corpus_loss(res.params, held_out), training::corpus_loss(init, held_out));
}

TEST(RestrictedArgmax, TiesFavourExpectedThenOpposite) {
  EXPECT_EQ(training::restricted_argmax(0.5, 0.3, 0.2), 0);
  EXPECT_EQ(training::restricted_argmax(0.2, 0.5, 0.3), 1);
  EXPECT_EQ(training::restricted_argmax(0.2, 0.3, 0.5), 2);
  EXPECT_EQ(training::restricted_argmax(0.4, 0.4, 0.2), 0);
  EXPECT_EQ(training::restricted_argmax(0.2, 0.4, 0.4), 1);
}

TEST(EvaluateLm, UntrainedModelIsNearChanceOnThreeCandidateItems) {
  const auto& sp = small_split();
  const Vocab v = training::build_vocab(std::vector<gknow::Dataset>{sp.train, sp.test}, tokenizer());
  gknow::Dataset items;
  for (const auto& ex : sp.train)
    if (ex.neutral_output && ex.subset->prediction == gknow::Kind::kPronoun) items.push_back(ex);
  model::ModelConfig cfg;
  cfg.vocab_size = v.size();
  const auto params = model::Parameters::init(cfg, compute::Rng(3));
  const auto acc = training::evaluate_lm(params, items, v, tokenizer());
  std::size_t n = 0;
  double hits = 0.0;
  for (const auto& [name, a] : acc) {
    EXPECT_TRUE(a.restricted) << name;
    n += a.n;
    hits += a.accuracy * static_cast<double>(a.n);
  }
  ASSERT_EQ(n, items.size());
  // Three standard errors of a 1/3 Bernoulli mean.
  const double rate = hits / static_cast<double>(n);
  EXPECT_NEAR(rate, 1.0 / 3.0, 3.0 * std::sqrt(2.0 / 9.0 / static_cast<double>(n))) << rate;
}

TEST(EvaluateLm, MemorizingModelScoresOne) {
  // A model whose unembedding reads a single embedding direction written only by "she".
  const Vocab v = training::build_vocab(std::vector<std::string>{"the nurse is nice she he they"}, tokenizer());
  model::ModelConfig cfg;
  cfg.n_layers = 0;
  cfg.d_model = 4;
  cfg.d_head = 4;
  cfg.d_ff = 4;
  cfg.vocab_size = v.size();
  cfg.max_seq_len = 8;
  auto p = model::Parameters::zeros(cfg);
  p.embed.at(v.id("nice"), 0) = 1.0;
  p.unembed.at(0, v.id("she")) = 5.0;
  gknow::Example ex;
  ex.prompt = "the nurse is nice";
  ex.expected_output = "she";
  ex.opposite_output = "he";
  ex.neutral_output = "they";
  ex.subset = gknow::SubsetKey{gknow::Kind::kPronoun, gknow::Kind::kStereo};
  const auto acc = training::evaluate_lm(p, {ex, ex}, v, tokenizer());
  EXPECT_DOUBLE_EQ(acc.at("pronoun_prediction_based_on_stereo").accuracy, 1.0);
}
