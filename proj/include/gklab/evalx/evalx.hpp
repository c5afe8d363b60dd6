#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gklab/attribution/attribution.hpp"
#include "gklab/gknow/dataset.hpp"
#include "gklab/model/transformer.hpp"
#include "gklab/training/trainer.hpp"

namespace gklab::evalx {

using attribution::ContractError;
using attribution::NeuronId;
using attribution::NeuronSet;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A prompt with its three completion candidates.
struct EvalItem {
  std::uint64_t id = 0;
  std::vector<std::size_t> tokens;
  std::size_t expected = 0;
  std::size_t opposite = 0;
  std::size_t other = 0;
};

/// Examples must carry opposite_output and neutral_output.
std::vector<EvalItem> encode_eval_items(const gknow::Dataset& data, const training::Vocab& vocab,
                                        const gknow::Tokenizer& tokenizer);

/// Index order everywhere: expected, opposite, other.
struct CandidateDistribution {
  std::array<double, 3> raw{};
  std::array<double, 3> p{};
};

CandidateDistribution renormalise(double expected, double opposite, double other);

CandidateDistribution candidate_distribution(const model::Parameters& params, const EvalItem& item,
                                             std::span<const model::Intervention> interventions = {});

/// Percentages. delta is the mean raw expected − opposite gap.
struct MetricBlock {
  std::size_t n = 0;
  double p_exp = 0.0;
  double p_opp = 0.0;
  double p_other = 0.0;
  double pct_exp = 0.0;
  double pct_opp = 0.0;
  double pct_other = 0.0;
  double delta = 0.0;
  std::array<std::size_t, 3> wins{};
};

MetricBlock metrics(std::span<const CandidateDistribution> dists);

/// Names of the seven metrics, in report order.
const std::vector<std::string>& metric_names();
/// Per-example contribution of every metric (×100), one row per metric in metric_names() order.
std::vector<std::vector<double>> per_example_values(std::span<const CandidateDistribution> dists);
double metric_value(const MetricBlock& block, std::size_t metric);

struct TTest {
  double t = 0.0;
  double p = 1.0;
  bool degenerate = false;
};

/// Two-sided paired t-test on after − before with n − 1 degrees of freedom.
TTest paired_t_test(std::span<const double> before, std::span<const double> after);

struct MeanProfile {
  std::size_t n_layers = 0;
  std::size_t d_ff = 0;
  /// Layer-major mean post-activation.
  std::vector<double> mean;

  double at(NeuronId n) const { return mean.at(n.layer * d_ff + n.index); }
  nlohmann::ordered_json to_json() const;
  static MeanProfile from_json(const nlohmann::json& j);
};

/// Mean over every example and position of each FFN neuron's post-activation.
MeanProfile mean_activation_profile(const model::Parameters& params,
                                    std::span<const std::vector<std::size_t>> sequences);

enum class AblationMode : std::uint8_t { kZero, kMean, kRandom, kStereoOnly };

std::string to_string(AblationMode mode);
/// Throws ConfigError on unknown names.
AblationMode parse_ablation_mode(std::string_view text);

/// `n` distinct neurons drawn uniformly with `seed`.
NeuronSet random_neurons(const model::ModelConfig& cfg, std::size_t n, std::uint64_t seed);

struct AblationOptions {
  AblationMode mode = AblationMode::kZero;
  model::ClampPositions positions = model::ClampPositions::kAll;
  /// Required in mean mode.
  const MeanProfile* profile = nullptr;
  double alpha = 0.05;
  std::size_t jobs = 1;
};

/// Clamps for every listed neuron: value 0, or the profile mean in mean mode.
std::vector<model::Intervention> ablation_interventions(const NeuronSet& neurons, const AblationOptions& options);

struct MetricRow {
  std::string metric;
  double baseline = 0.0;
  double ablated = 0.0;
  double delta = 0.0;
  /// "↑", "↓" or "→" (change below 0.005 points).
  std::string arrow;
  TTest test;
  bool significant = false;
};

struct MetricsReport {
  std::string dataset;
  std::size_t n_ablated = 0;
  AblationMode mode = AblationMode::kZero;
  model::ClampPositions positions = model::ClampPositions::kAll;
  double alpha = 0.05;
  MetricBlock baseline;
  MetricBlock ablated;
  std::vector<MetricRow> rows;

  const MetricRow& row(std::string_view metric) const;
  nlohmann::ordered_json to_json() const;
};

MetricsReport ablate_and_eval(const model::Parameters& params, const NeuronSet& neurons,
                              std::span<const EvalItem> items, const std::string& dataset,
                              const AblationOptions& options = {});

/// |max_f p(f) − max_m p(m)| × 100 on the raw final-position distribution.
double delta_gap_termlists(const model::Parameters& params, std::span<const std::size_t> tokens,
                           std::span<const std::size_t> fem_terms, std::span<const std::size_t> masc_terms,
                           std::span<const model::Intervention> interventions = {});

/// Role of an external candidate.
enum class Role : std::uint8_t { kStereotypical, kAntiStereotypical, kUnrelated };

std::string to_string(Role role);

struct ExternalCandidate {
  std::string text;
  Role role = Role::kUnrelated;
};

struct ExternalEntry {
  /// Position in the source file, 0-based.
  std::size_t index = 0;
  /// Text before the mask.
  std::string context;
  std::vector<ExternalCandidate> candidates;
  std::vector<std::string> feminine;
  std::vector<std::string> masculine;

  bool has_terms() const { return !feminine.empty(); }
};

struct ExternalEvalSet {
  std::vector<ExternalEntry> entries;
  std::size_t total = 0;
  /// Entries whose mask is not the final token.
  std::size_t rejected = 0;
};

/// Marker the external contexts use for the masked token.
inline constexpr std::string_view kMask = "[MASK]";

/// JSONL with `context` and either `candidates: [{text, role}]` (one per role) or
/// `gendered_terms: {feminine, masculine}`. Only trailing whitespace or ".!?" may follow the mask.
ExternalEvalSet load_external_evalset(const std::filesystem::path& path);

/// Candidate entries as items: stereotypical → expected, anti-stereotypical → opposite,
/// unrelated → other. Candidates must be single in-vocabulary tokens.
std::vector<EvalItem> external_items(const ExternalEvalSet& set, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer);

struct TermListItem {
  std::uint64_t id = 0;
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> feminine;
  std::vector<std::size_t> masculine;
};

std::vector<TermListItem> external_term_items(const ExternalEvalSet& set, const training::Vocab& vocab,
                                              const gknow::Tokenizer& tokenizer);

void write_report_json(std::span<const MetricsReport> reports, const nlohmann::ordered_json& meta,
                       const std::filesystem::path& path);
void write_report_csv(std::span<const MetricsReport> reports, const std::filesystem::path& path);
void write_profile(const MeanProfile& profile, const std::filesystem::path& path);
MeanProfile read_profile(const std::filesystem::path& path);

}  // namespace gklab::evalx
