#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gklab/compute/rng.hpp"
#include "gklab/compute/tape.hpp"
#include "gklab/model/graph.hpp"

namespace gklab::model {

using compute::Tensor;
using compute::ValueId;

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class InterventionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Weights of the decoder-only transformer. Row-vector convention: x · W.
struct Parameters {
  ModelConfig config;
  Tensor embed;     // vocab × d_model
  Tensor position;  // max_seq_len × d_model
  struct Head {
    Tensor w_q, w_k, w_v;  // d_model × d_head
    Tensor w_o;            // d_head × d_model
  };
  struct Layer {
    std::vector<Head> heads;
    Tensor w_1;  // d_model × d_ff
    Tensor w_2;  // d_ff × d_model
  };
  std::vector<Layer> layers;
  Tensor unembed;  // d_model × vocab

  /// Zero-filled parameters of the right shapes.
  static Parameters zeros(const ModelConfig& cfg);
  /// Scaled-normal initialisation.
  static Parameters init(const ModelConfig& cfg, compute::Rng rng);

  /// Every tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::vector<std::pair<std::string, Tensor*>> named_mut();

  /// Throws ConfigError on any shape mismatch or non-finite value.
  void validate() const;
};

enum class ClampPositions : std::uint8_t { kAll, kFinal };

struct EdgePatch {
  EdgeId edge;
  /// Parent output to use on this edge, seq_len × d_model.
  Tensor replacement;
};

struct NeuronClamp {
  std::size_t layer = 0;
  std::size_t index = 0;
  /// One value for every clamped position, or one per sequence position.
  std::vector<double> values;
  ClampPositions positions = ClampPositions::kAll;
};

using Intervention = std::variant<EdgePatch, NeuronClamp>;

struct ForwardOptions {
  /// Replaces the Embed node output (seq_len × d_model) as a differentiable leaf.
  const Tensor* embed_override = nullptr;
  /// Record a distinct value per child input slot so gradients can be read there.
  bool tap_child_inputs = false;
  /// Replace the post-activation of one FFN layer by a leaf: a 1 × d_ff value
  /// replaces the final position only, a seq_len × d_ff value replaces every position.
  std::optional<std::pair<std::size_t, Tensor>> ffn_override;
  /// Only unembed the final position; logits() is then 1 × vocab.
  bool final_logits_only = false;
};

class ForwardTrace {
 public:
  const compute::Tape& tape() const { return tape_; }
  compute::Tape& tape() { return tape_; }

  std::size_t seq_len() const { return seq_len_; }
  const Tensor& logits() const { return tape_.value(logits_); }
  ValueId logits_id() const { return logits_; }
  /// Final-position logits as a 1 × vocab row.
  Tensor final_logits() const;
  /// Flat index of token `tok` at the final position inside logits().
  std::size_t final_logit_index(std::size_t tok) const;

  const Tensor& node_output(NodeId node) const;
  ValueId node_output_id(NodeId node) const;
  /// Each non-logits node's output, indexed by node_index.
  std::vector<Tensor> node_outputs() const;

  const Tensor& ffn_hidden(std::size_t layer) const;
  ValueId ffn_hidden_id(std::size_t layer) const { return ffn_hidden_.at(layer); }
  /// Residual stream fed to the unembedding before any Logits-slot patching.
  const Tensor& final_residual() const { return tape_.value(residual_); }

  /// Value id of a child input; requires tap_child_inputs.
  ValueId child_input_id(ChildSlot slot) const;
  const std::map<ChildSlot, ValueId>& child_inputs() const { return child_inputs_; }
  std::optional<ValueId> embed_leaf() const { return embed_leaf_; }
  std::optional<ValueId> ffn_override_leaf() const { return ffn_leaf_; }
  /// Parameter leaves in Parameters::named() order.
  const std::vector<ValueId>& parameter_ids() const { return param_ids_; }

 private:
  friend ForwardTrace forward(const Parameters&, std::span<const std::size_t>,
                              std::span<const Intervention>, const ForwardOptions&);
  ForwardTrace() = default;

  compute::Tape tape_;
  const ModelConfig* config_ = nullptr;
  std::size_t seq_len_ = 0;
  bool final_only_ = false;
  ValueId logits_;
  ValueId residual_;
  std::vector<ValueId> node_out_;
  std::vector<ValueId> ffn_hidden_;
  std::map<ChildSlot, ValueId> child_inputs_;
  std::optional<ValueId> embed_leaf_;
  std::optional<ValueId> ffn_leaf_;
  std::vector<ValueId> param_ids_;
};

/// Runs the model on `tokens`. `params` must outlive the returned trace.
ForwardTrace forward(const Parameters& params, std::span<const std::size_t> tokens,
                     std::span<const Intervention> interventions = {},
                     const ForwardOptions& options = {});

/// Softmax of the final-position logits, as a flat vocab-sized vector.
std::vector<double> predict_distribution(const ForwardTrace& trace);

/// Final-position logit(expected) − logit(opposite).
double metric_logit_diff(const ForwardTrace& trace, std::size_t expected, std::size_t opposite);

enum class LossKind : std::uint8_t { kLogitDiff, kCrossEntropy };

struct LossSpec {
  LossKind kind = LossKind::kLogitDiff;
  std::size_t expected = 0;
  std::size_t opposite = 0;
};

std::string to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view text);

/// Records the loss on the trace's tape. Logit diff is maximised; cross-entropy is
/// −log p(expected).
ValueId record_loss(ForwardTrace& trace, const LossSpec& loss);
double loss_value(const ForwardTrace& trace, const LossSpec& loss);

/// dLoss/d(child input) for every child slot, in one backward pass. When
/// `embed_input` is given it replaces the Embed node output.
std::map<ChildSlot, Tensor> grads_wrt_child_inputs(const Parameters& params,
                                                   std::span<const std::size_t> tokens,
                                                   const LossSpec& loss,
                                                   const Tensor* embed_input = nullptr);

/// Patches every edge with parent outputs taken from `source` (indexed by node_index).
std::vector<Intervention> patch_all_edges(const ModelConfig& cfg, const std::vector<Tensor>& source);

}  // namespace gklab::model
