#include "gklab/model/graph.hpp"

#include <charconv>

namespace gklab::model {

void ModelConfig::validate() const {
  if (n_layers > 0 && (n_heads == 0 || d_head == 0 || d_ff == 0)) {
    throw ConfigError("model config: heads, d_head and d_ff must be positive");
  }
  if (d_model == 0 || vocab_size == 0 || max_seq_len == 0) {
    throw ConfigError("model config: d_model, vocab_size and max_seq_len must be positive");
  }
}

std::string to_string(NodeId node) {
  switch (node.kind) {
    case NodeKind::kEmbed:
      return "embed";
    case NodeKind::kHead:
      return "a" + std::to_string(node.layer) + ".h" + std::to_string(node.head);
    case NodeKind::kMlp:
      return "m" + std::to_string(node.layer);
    case NodeKind::kLogits:
      return "logits";
  }
  return "?";
}

std::string to_string(Slot slot) {
  switch (slot) {
    case Slot::kQ:
      return "q";
    case Slot::kK:
      return "k";
    case Slot::kV:
      return "v";
    case Slot::kIn:
      return "in";
  }
  return "?";
}

std::string to_string(EdgeId edge) {
  std::string s = to_string(edge.parent) + "->" + to_string(edge.child);
  if (edge.slot != Slot::kIn) s += "." + to_string(edge.slot);
  return s;
}

namespace {

std::uint16_t parse_uint(std::string_view text, std::string_view whole) {
  std::uint16_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ParseError("malformed node id '" + std::string(whole) + "'");
  }
  return v;
}

}  // namespace

NodeId parse_node(std::string_view text) {
  if (text == "embed") return NodeId::embed();
  if (text == "logits") return NodeId::logits();
  if (text.size() > 1 && text[0] == 'm') return NodeId::mlp(parse_uint(text.substr(1), text));
  if (text.size() > 1 && text[0] == 'a') {
    const auto dot = text.find(".h");
    if (dot != std::string_view::npos) {
      return NodeId::attn(parse_uint(text.substr(1, dot - 1), text), parse_uint(text.substr(dot + 2), text));
    }
  }
  throw ParseError("malformed node id '" + std::string(text) + "'");
}

EdgeId parse_edge(std::string_view text) {
  const auto arrow = text.find("->");
  if (arrow == std::string_view::npos) throw ParseError("malformed edge id '" + std::string(text) + "'");
  EdgeId e;
  e.parent = parse_node(text.substr(0, arrow));
  std::string_view child = text.substr(arrow + 2);
  if (child.size() > 2 && child[child.size() - 2] == '.') {
    const char c = child.back();
    if (c == 'q' || c == 'k' || c == 'v') {
      e.slot = c == 'q' ? Slot::kQ : c == 'k' ? Slot::kK : Slot::kV;
      child.remove_suffix(2);
    }
  }
  e.child = parse_node(child);
  return e;
}

std::size_t node_count(const ModelConfig& cfg) { return 2 + cfg.n_layers * (cfg.n_heads + 1); }

std::size_t node_index(NodeId node, const ModelConfig& cfg) {
  switch (node.kind) {
    case NodeKind::kEmbed:
      return 0;
    case NodeKind::kHead:
      return 1 + node.layer * (cfg.n_heads + 1) + node.head;
    case NodeKind::kMlp:
      return 1 + node.layer * (cfg.n_heads + 1) + cfg.n_heads;
    case NodeKind::kLogits:
      return 1 + cfg.n_layers * (cfg.n_heads + 1);
  }
  return 0;
}

NodeId node_at(std::size_t index, const ModelConfig& cfg) {
  if (index == 0) return NodeId::embed();
  const std::size_t per = cfg.n_heads + 1;
  if (index == 1 + cfg.n_layers * per) return NodeId::logits();
  const std::size_t l = (index - 1) / per, r = (index - 1) % per;
  return r == cfg.n_heads ? NodeId::mlp(l) : NodeId::attn(l, r);
}

std::vector<NodeId> node_list(const ModelConfig& cfg) {
  std::vector<NodeId> out;
  const std::size_t n = node_count(cfg);
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(node_at(i, cfg));
  return out;
}

bool is_valid_node(NodeId node, const ModelConfig& cfg) {
  switch (node.kind) {
    case NodeKind::kEmbed:
    case NodeKind::kLogits:
      return node.layer == 0 && node.head == 0;
    case NodeKind::kHead:
      return node.layer < cfg.n_layers && node.head < cfg.n_heads;
    case NodeKind::kMlp:
      return node.layer < cfg.n_layers && node.head == 0;
  }
  return false;
}

std::vector<Slot> input_slots(NodeId node, const ModelConfig& cfg) {
  switch (node.kind) {
    case NodeKind::kEmbed:
      return {};
    case NodeKind::kHead:
      if (cfg.split_qkv) return {Slot::kQ, Slot::kK, Slot::kV};
      return {Slot::kIn};
    default:
      return {Slot::kIn};
  }
}

namespace {

// Heads of layer l read the residual before any layer-l head writes to it.
bool feeds(NodeId parent, NodeId child, const ModelConfig& cfg) {
  if (parent.kind == NodeKind::kLogits || child.kind == NodeKind::kEmbed) return false;
  const std::size_t pi = node_index(parent, cfg), ci = node_index(child, cfg);
  if (pi >= ci) return false;
  if (child.kind == NodeKind::kHead && parent.kind == NodeKind::kHead) return parent.layer < child.layer;
  return true;
}

}  // namespace

bool is_legal(EdgeId edge, const ModelConfig& cfg) {
  if (!is_valid_node(edge.parent, cfg) || !is_valid_node(edge.child, cfg)) return false;
  if (!feeds(edge.parent, edge.child, cfg)) return false;
  for (Slot s : input_slots(edge.child, cfg))
    if (s == edge.slot) return true;
  return false;
}

std::vector<EdgeId> edge_list(const ModelConfig& cfg) {
  std::vector<EdgeId> out;
  const auto nodes = node_list(cfg);
  for (NodeId child : nodes) {
    for (Slot slot : input_slots(child, cfg)) {
      for (NodeId parent : nodes) {
        if (feeds(parent, child, cfg)) out.push_back({parent, child, slot});
      }
    }
  }
  return out;
}

std::vector<ChildSlot> child_slots(const ModelConfig& cfg) {
  std::vector<ChildSlot> out;
  for (NodeId child : node_list(cfg)) {
    for (Slot slot : input_slots(child, cfg)) out.push_back({child, slot});
  }
  return out;
}

}  // namespace gklab::model
