#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gklab/attribution/attribution.hpp"
#include "gklab/model/transformer.hpp"

namespace gklab::circuits {

using attribution::ContractError;
using attribution::PromptPair;

struct Circuit {
  std::set<model::EdgeId> edges;
  std::set<model::NodeId> nodes;
  /// Where the edges came from (score file or dataset) and how many were kept.
  std::string source;
  std::size_t n = 0;

  bool contains(const model::EdgeId& e) const { return edges.contains(e); }
  friend bool operator==(const Circuit&, const Circuit&) = default;
};

/// Endpoints of every edge.
std::set<model::NodeId> induced_nodes(const std::set<model::EdgeId>& edges);
Circuit make_circuit(std::set<model::EdgeId> edges, std::string source = {});
/// Every edge of the model.
Circuit full_circuit(const model::ModelConfig& cfg);

/// The n edges with the largest |score|; ties keep edge_list order.
Circuit build_circuit(const attribution::EdgeScores& scores, std::size_t n);

/// Clean run in which every edge outside `circuit` carries the corrupted parent output.
model::ForwardTrace run_with_circuit(const model::Parameters& params, const PromptPair& pair, const Circuit& circuit);

struct FaithfulnessResult {
  /// Empty when the clean and corrupted means coincide.
  std::optional<double> f;
  bool degenerate = false;
  double m_clean = 0.0;
  double m_circuit = 0.0;
  double m_corrupt = 0.0;
  std::string dataset;
  std::string circuit;
  std::size_t n_edges = 0;

  nlohmann::ordered_json to_json() const;
};

/// Normalised recovery (m_circuit − m_corrupt) / (m_clean − m_corrupt), degenerate below 1e-9.
FaithfulnessResult normalise(double m_clean, double m_circuit, double m_corrupt);

/// Caches clean and corrupted runs of a dataset so many circuits can be scored against it.
/// The task metric is the final-position logit difference expected − opposite, averaged
/// per example before normalising.
class FaithfulnessEvaluator {
 public:
  FaithfulnessEvaluator(const model::Parameters& params, std::vector<PromptPair> pairs, std::string dataset = {},
                        std::size_t jobs = 1);

  FaithfulnessResult evaluate(const Circuit& circuit) const;
  double m_clean() const { return m_clean_; }
  double m_corrupt() const { return m_corrupt_; }
  const std::string& dataset() const { return dataset_; }
  std::size_t size() const { return pairs_.size(); }

 private:
  const model::Parameters* params_;
  std::vector<PromptPair> pairs_;
  std::string dataset_;
  std::size_t jobs_;
  std::vector<std::vector<compute::Tensor>> corrupt_outputs_;
  double m_clean_ = 0.0;
  double m_corrupt_ = 0.0;
};

FaithfulnessResult faithfulness(const model::Parameters& params, std::span<const PromptPair> pairs,
                                const Circuit& circuit, const std::string& dataset = {});

/// Powers of two from 8 below `total`, then `total`.
std::vector<std::size_t> default_grid(std::size_t total);

struct MinimalCircuit {
  Circuit circuit;
  FaithfulnessResult result;
  bool reached = false;
  /// Every grid point that was evaluated, in order.
  std::vector<std::pair<std::size_t, FaithfulnessResult>> trace;
};

/// Smallest grid n reaching f ≥ threshold; otherwise the best grid point with reached = false.
MinimalCircuit minimal_faithful(const attribution::EdgeScores& scores, const FaithfulnessEvaluator& evaluator,
                                double threshold = 0.8, std::vector<std::size_t> grid = {});

struct Iou {
  double edge_jaccard = 1.0;
  double node_jaccard = 1.0;
};

Iou circuit_iou(const Circuit& a, const Circuit& b);

struct CrossTaskMatrix {
  std::vector<std::string> circuits;
  std::vector<std::string> datasets;
  /// cells[g][d]: circuit g evaluated on dataset d.
  std::vector<std::vector<FaithfulnessResult>> cells;
};

CrossTaskMatrix cross_task_faithfulness(const std::map<std::string, Circuit>& circuits,
                                        const std::map<std::string, std::vector<PromptPair>>& datasets,
                                        const model::Parameters& params, std::size_t jobs = 1);

/// Fractions of endpoint kinds for one layer and one side of the circuit's edges.
struct RatioRow {
  std::string layer;  // "embed", "0".."L-1" or "logits"
  std::string side;   // "parent" or "child"
  std::size_t edges = 0;
  double embed = 0.0;
  double head = 0.0;
  double mlp = 0.0;
  double logits = 0.0;
  bool empty() const { return edges == 0; }
};

/// Parent rows bucket edges by the parent's layer, child rows by the child's layer.
std::vector<RatioRow> connection_ratio(const Circuit& circuit, const model::ModelConfig& cfg);

nlohmann::ordered_json circuit_to_json(const Circuit& c);
Circuit circuit_from_json(const nlohmann::json& j);
void write_circuit(const Circuit& c, const std::filesystem::path& path);
Circuit read_circuit(const std::filesystem::path& path);

void write_cross_task_csv(const CrossTaskMatrix& m, const std::filesystem::path& path);
void write_ratio_csv(std::span<const RatioRow> rows, const std::filesystem::path& path);
void write_iou_csv(const std::map<std::string, Circuit>& circuits, const std::filesystem::path& path);

}  // namespace gklab::circuits
