#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "gklab/gknow/dataset.hpp"
#include "gklab/gknow/tokenizer.hpp"
#include "gklab/model/transformer.hpp"

namespace gklab::training {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Token ↔ id bijection. Id 0 is the BOS marker and id 1 the unknown token.
class Vocab {
 public:
  static constexpr std::size_t kBos = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr const char* kBosToken = "<bos>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocab();
  explicit Vocab(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.contains(token); }
  /// Id of an already-normalised token; kUnk when absent.
  std::size_t id(const std::string& token) const;
  /// Id of a token that must be present; throws model::VocabularyError otherwise.
  std::size_t require(const std::string& token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  nlohmann::json to_json() const { return tokens_; }
  static Vocab from_json(const nlohmann::json& j);

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

/// Sorted vocabulary over every token of prompts, outputs and corrupted prompts.
Vocab build_vocab(const std::vector<gknow::Dataset>& datasets, const gknow::Tokenizer& tokenizer);
Vocab build_vocab(const std::vector<std::string>& texts, const gknow::Tokenizer& tokenizer);

/// BOS followed by the prompt's token ids.
std::vector<std::size_t> encode(const std::string& prompt, const Vocab& vocab, const gknow::Tokenizer& tokenizer);
/// Id of a single-token output such as "Female"; throws if it is not one in-vocab token.
std::size_t output_id(const std::string& output, const Vocab& vocab, const gknow::Tokenizer& tokenizer);

struct Sequence {
  std::vector<std::size_t> tokens;
  std::size_t target = 0;
};

/// Prompt → expected output for every example; with `twins`, also corrupted prompt →
/// opposite output for augmented examples whose corrupted prompt is not in `exclude`.
std::vector<Sequence> build_corpus(const gknow::Dataset& data, const Vocab& vocab,
                                   const gknow::Tokenizer& tokenizer, bool twins = true,
                                   const gknow::Dataset& exclude = {});

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
  model::ModelConfig model;

  void validate() const;
  nlohmann::ordered_json to_json() const;
};

struct LogRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
};

struct TrainResult {
  model::Parameters params;
  std::vector<LogRow> log;
};

/// Mean final-position cross-entropy of a corpus.
double corpus_loss(const model::Parameters& params, const std::vector<Sequence>& corpus);

/// Adam on mean final-position cross-entropy. `on_epoch` (optional) is called after each epoch.
TrainResult train(const std::vector<Sequence>& corpus, const TrainConfig& cfg,
                  const std::function<void(std::size_t epoch, double mean_loss)>& on_epoch = {});

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path);

/// Index (0 expected, 1 opposite, 2 other) of the restricted argmax; ties favour the lower index.
int restricted_argmax(double p_expected, double p_opposite, double p_other);

struct SubsetAccuracy {
  std::size_t n = 0;
  double accuracy = 0.0;
  /// True when scored over {expected, opposite, neutral}; otherwise full-vocabulary top-1.
  bool restricted = false;
};

std::map<std::string, SubsetAccuracy> evaluate_lm(const model::Parameters& params, const gknow::Dataset& split,
                                                  const Vocab& vocab, const gknow::Tokenizer& tokenizer);

}  // namespace gklab::training
