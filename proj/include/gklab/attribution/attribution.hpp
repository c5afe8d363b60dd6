#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gklab/gknow/dataset.hpp"
#include "gklab/model/transformer.hpp"
#include "gklab/training/trainer.hpp"

namespace gklab::attribution {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A clean prompt, its length-matched counterfactual and the two candidate tokens.
struct PromptPair {
  std::uint64_t id = 0;
  std::vector<std::size_t> clean;
  std::vector<std::size_t> corrupted;
  std::size_t expected = 0;
  std::size_t opposite = 0;
};

/// Every example must carry corrupted_prompt and opposite_output.
std::vector<PromptPair> encode_pairs(const gknow::Dataset& data, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer);

struct Provenance {
  std::string method;
  std::string dataset;
  std::string loss;
  std::size_t steps = 0;
  std::size_t n_examples = 0;
  std::string positions;

  nlohmann::ordered_json to_json() const;
  static Provenance from_json(const nlohmann::json& j);
  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// One signed score per edge, in model::edge_list order.
struct EdgeScores {
  std::vector<model::EdgeId> edges;
  std::vector<double> scores;
  Provenance provenance;

  double score(const model::EdgeId& edge) const;
};

struct EapIgOptions {
  std::size_t steps = 5;
  model::LossKind loss = model::LossKind::kLogitDiff;
  std::string dataset;
  std::size_t jobs = 1;
};

/// EAP-IG: for each pair the embedding output is interpolated from corrupted to clean,
/// gradients at every child input are averaged over the m points, and each edge scores
/// (z'_parent − z_parent) · mean gradient, summed over positions. Averaged over pairs.
EdgeScores eap_ig_scores(const model::Parameters& params, std::span<const PromptPair> pairs,
                         const EapIgOptions& options = {});

struct NeuronId {
  std::size_t layer = 0;
  std::size_t index = 0;
  friend auto operator<=>(const NeuronId&, const NeuronId&) = default;
};

using NeuronSet = std::set<NeuronId>;

/// One score per FFN neuron, layer-major.
struct NeuronScores {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  std::vector<double> scores;
  Provenance provenance;

  double at(NeuronId n) const { return scores.at(n.layer * d_ff + n.index); }
  NeuronId neuron(std::size_t flat) const { return {flat / d_ff, flat % d_ff}; }
};

/// What the neuron path integral differentiates.
enum class IgTarget : std::uint8_t { kProbability, kLogit };

struct IgOptions {
  std::size_t steps = 20;
  model::ClampPositions positions = model::ClampPositions::kFinal;
  IgTarget target = IgTarget::kProbability;
  std::string dataset;
  std::size_t jobs = 1;
};

struct PromptItem {
  std::uint64_t id = 0;
  std::vector<std::size_t> tokens;
  std::size_t expected = 0;
};

std::vector<PromptItem> encode_items(const gknow::Dataset& data, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer);

/// Integrated gradients per FFN neuron. The whole layer's post-activation (final row by
/// default) is scaled to (k/m)·ŵ for k = 1..m and Attr_i = ŵ_i/m · Σ_k ∂P/∂w_i, where P is
/// the expected token's probability (or logit). Averaged over items.
NeuronScores ig_neuron_scores(const model::Parameters& params, std::span<const PromptItem> items,
                              const IgOptions& options = {});

struct RankedNeuron {
  NeuronId neuron;
  double score = 0.0;
};

/// Highest scores first; ties by (layer, index).
std::vector<RankedNeuron> top_k(const NeuronScores& scores, std::size_t k);
NeuronSet to_set(std::span<const RankedNeuron> ranked);

struct SetComparison {
  NeuronSet overlap;
  /// a \ b
  NeuronSet difference;
  double jaccard = 1.0;
};

SetComparison neuron_set_ops(const NeuronSet& a, const NeuronSet& b);

struct LensEntry {
  std::size_t token = 0;
  double score = 0.0;
};

struct LensResult {
  /// Highest first.
  std::vector<LensEntry> top;
  /// Lowest first.
  std::vector<LensEntry> bottom;
};

/// Projects the neuron's W_2 row through the unembedding. Ties by token id.
LensResult logit_lens(const model::Parameters& params, NeuronId neuron, std::size_t top_n = 10);

/// True when a top_n or bottom_n token of the neuron is in `terms`.
bool interpretability_flag(NeuronId neuron, const std::set<std::string>& terms, const model::Parameters& params,
                           const training::Vocab& vocab, std::size_t top_n = 10);

void write_edge_scores(const EdgeScores& scores, const std::filesystem::path& csv);
EdgeScores read_edge_scores(const std::filesystem::path& csv);
void write_neuron_scores(const NeuronScores& scores, const std::filesystem::path& csv);
NeuronScores read_neuron_scores(const std::filesystem::path& csv);
void write_ranked_neurons(std::span<const RankedNeuron> ranked, const std::filesystem::path& csv);
std::vector<RankedNeuron> read_ranked_neurons(const std::filesystem::path& csv);

/// Side-car provenance file for a score CSV: "<stem>.json" next to it.
std::filesystem::path provenance_path(const std::filesystem::path& csv);

}  // namespace gklab::attribution
