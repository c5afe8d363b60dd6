#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gklab::model {

enum class Activation : std::uint8_t { kGelu, kIdentity };

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_head = 16;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  Activation activation = Activation::kGelu;
  /// Head children expose separate Q/K/V slots; false collapses them into one In slot.
  bool split_qkv = true;

  /// Throws ConfigError unless every size is positive (layers may be zero).
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class NodeKind : std::uint8_t { kEmbed, kHead, kMlp, kLogits };

struct NodeId {
  NodeKind kind = NodeKind::kEmbed;
  std::uint16_t layer = 0;
  std::uint16_t head = 0;

  static NodeId embed() { return {NodeKind::kEmbed, 0, 0}; }
  static NodeId attn(std::size_t layer, std::size_t head) {
    return {NodeKind::kHead, static_cast<std::uint16_t>(layer), static_cast<std::uint16_t>(head)};
  }
  static NodeId mlp(std::size_t layer) { return {NodeKind::kMlp, static_cast<std::uint16_t>(layer), 0}; }
  static NodeId logits() { return {NodeKind::kLogits, 0, 0}; }

  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class Slot : std::uint8_t { kQ, kK, kV, kIn };

struct EdgeId {
  NodeId parent;
  NodeId child;
  Slot slot = Slot::kIn;
  friend auto operator<=>(const EdgeId&, const EdgeId&) = default;
};

/// A node input: the child side of an edge.
struct ChildSlot {
  NodeId node;
  Slot slot = Slot::kIn;
  friend auto operator<=>(const ChildSlot&, const ChildSlot&) = default;
};

class ParseError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Text forms: "embed", "a{l}.h{h}", "m{l}", "logits"; edges "parent->child" with
// a ".q"/".k"/".v" suffix for head slots.
std::string to_string(NodeId node);
std::string to_string(Slot slot);
std::string to_string(EdgeId edge);
NodeId parse_node(std::string_view text);
EdgeId parse_edge(std::string_view text);

/// Position in graph order: embed, then per layer its heads and MLP, then logits.
std::size_t node_index(NodeId node, const ModelConfig& cfg);
NodeId node_at(std::size_t index, const ModelConfig& cfg);
std::size_t node_count(const ModelConfig& cfg);
std::vector<NodeId> node_list(const ModelConfig& cfg);

/// Input slots of a node in the order edges are enumerated.
std::vector<Slot> input_slots(NodeId node, const ModelConfig& cfg);

bool is_valid_node(NodeId node, const ModelConfig& cfg);
bool is_legal(EdgeId edge, const ModelConfig& cfg);

/// Every legal edge, ordered by child (graph order), slot, then parent.
std::vector<EdgeId> edge_list(const ModelConfig& cfg);

/// Every child slot that receives at least one edge, in edge_list order.
std::vector<ChildSlot> child_slots(const ModelConfig& cfg);

}  // namespace gklab::model
