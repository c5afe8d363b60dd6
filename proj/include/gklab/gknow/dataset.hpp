#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gklab/gknow/lexicon.hpp"
#include "gklab/gknow/tokenizer.hpp"

namespace gklab::gknow {

class AugmentationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Example {
  std::uint64_t id = 0;
  std::string prompt;
  std::string subject;
  std::string expected_output;
  std::optional<std::string> stereo_category;
  Gender gender = Gender::kFeminine;
  std::optional<SubsetKey> subset;
  std::optional<std::string> opposite_output;
  std::optional<std::string> neutral_output;
  std::optional<std::string> corrupted_prompt;

  friend bool operator==(const Example&, const Example&) = default;
};

using Dataset = std::vector<Example>;

/// Cross product of templates × subjects × expected outputs for each of the 20
/// subsets, in SubsetKey::all() order; ids count up from 0 in generation order.
Dataset generate_full(const Lexicon& lexicon, const TemplateRegistry& templates);

struct SplitConfig {
  std::size_t train_cap = 200;
  std::size_t test_cap = 20;
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct Split {
  Dataset train;
  Dataset test;
};

/// Samples each (subset, gender) half independently: test takes
/// min(test_cap, ceil(fraction·n)) and train min(train_cap, the rest).
Split generate_small(const Dataset& full, const SplitConfig& cfg);

/// Test/train sizes for a group of n examples under `cfg`.
std::pair<std::size_t, std::size_t> split_sizes(std::size_t n, const SplitConfig& cfg);

/// Adds corrupted_prompt: the subject swapped for an opposite-gender counterpart of
/// equal tokenized length.
Example augment_counterfactual(const Example& example, const Lexicon& lexicon, const Tokenizer& tokenizer);

/// Adds opposite_output and neutral_output to pronoun or gender prediction examples.
Example augment_candidates(const Example& example, const Lexicon& lexicon);

/// Both augmentations for every pronoun and gender prediction example; others pass through.
Dataset augment_dataset(const Dataset& data, const Lexicon& lexicon, const Tokenizer& tokenizer);

bool supports_candidates(const SubsetKey& key);

std::string to_jsonl_line(const Example& example);
Example from_jsonl_line(const std::string& line, std::size_t lineno = 1);
void write_jsonl(const Dataset& data, const std::filesystem::path& path);
Dataset read_jsonl(const std::filesystem::path& path);

/// Example counts per subset name.
std::map<std::string, std::size_t> subset_counts(const Dataset& data);

}  // namespace gklab::gknow
