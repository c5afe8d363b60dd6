#include "gklab/model/transformer.hpp"

#include <cmath>
#include <numeric>

namespace gklab::model {

using compute::Shape;
using compute::Tape;

Parameters Parameters::zeros(const ModelConfig& cfg) {
  cfg.validate();
  Parameters p;
  p.config = cfg;
  p.embed = Tensor({cfg.vocab_size, cfg.d_model});
  p.position = Tensor({cfg.max_seq_len, cfg.d_model});
  p.layers.resize(cfg.n_layers);
  for (auto& layer : p.layers) {
    layer.heads.resize(cfg.n_heads);
    for (auto& h : layer.heads) {
      h.w_q = Tensor({cfg.d_model, cfg.d_head});
      h.w_k = Tensor({cfg.d_model, cfg.d_head});
      h.w_v = Tensor({cfg.d_model, cfg.d_head});
      h.w_o = Tensor({cfg.d_head, cfg.d_model});
    }
    layer.w_1 = Tensor({cfg.d_model, cfg.d_ff});
    layer.w_2 = Tensor({cfg.d_ff, cfg.d_model});
  }
  p.unembed = Tensor({cfg.d_model, cfg.vocab_size});
  return p;
}

namespace {

void fill_normal(Tensor& t, double stddev, compute::Rng& rng) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
}

}  // namespace

Parameters Parameters::init(const ModelConfig& cfg, compute::Rng rng) {
  Parameters p = zeros(cfg);
  const double in_model = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double depth = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_layers, 1)));
  fill_normal(p.embed, 1.0, rng);
  fill_normal(p.position, 0.5, rng);
  for (auto& layer : p.layers) {
    for (auto& h : layer.heads) {
      fill_normal(h.w_q, in_model, rng);
      fill_normal(h.w_k, in_model, rng);
      fill_normal(h.w_v, in_model, rng);
      fill_normal(h.w_o, depth / std::sqrt(static_cast<double>(cfg.d_head * cfg.n_heads)), rng);
    }
    fill_normal(layer.w_1, in_model, rng);
    fill_normal(layer.w_2, depth / std::sqrt(static_cast<double>(cfg.d_ff)), rng);
  }
  fill_normal(p.unembed, in_model, rng);
  return p;
}

std::vector<std::pair<std::string, const Tensor*>> Parameters::named() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.emplace_back("embed", &embed);
  out.emplace_back("position", &position);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layers[l].heads.size(); ++h) {
      const std::string hp = pre + "head" + std::to_string(h) + ".";
      const Head& hd = layers[l].heads[h];
      out.emplace_back(hp + "w_q", &hd.w_q);
      out.emplace_back(hp + "w_k", &hd.w_k);
      out.emplace_back(hp + "w_v", &hd.w_v);
      out.emplace_back(hp + "w_o", &hd.w_o);
    }
    out.emplace_back(pre + "w_1", &layers[l].w_1);
    out.emplace_back(pre + "w_2", &layers[l].w_2);
  }
  out.emplace_back("unembed", &unembed);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Parameters::named_mut() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : std::as_const(*this).named()) out.emplace_back(name, const_cast<Tensor*>(t));
  return out;
}

void Parameters::validate() const {
  config.validate();
  const Parameters ref = zeros(config);
  const auto mine = named();
  const auto want = ref.named();
  if (mine.size() != want.size()) throw ConfigError("parameters: layer or head count disagrees with config");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].second->shape() != want[i].second->shape()) {
      throw ConfigError("parameters: " + mine[i].first + " has shape " +
                        compute::to_string(mine[i].second->shape()) + ", expected " +
                        compute::to_string(want[i].second->shape()));
    }
    if (!mine[i].second->all_finite()) throw ConfigError("parameters: " + mine[i].first + " is not finite");
  }
}

Tensor ForwardTrace::final_logits() const {
  const Tensor& lg = logits();
  return lg.row(lg.rows() - 1);
}

std::size_t ForwardTrace::final_logit_index(std::size_t tok) const {
  const Tensor& lg = logits();
  if (tok >= lg.cols()) {
    throw VocabularyError("token id " + std::to_string(tok) + " outside vocabulary of " +
                          std::to_string(lg.cols()));
  }
  return (lg.rows() - 1) * lg.cols() + tok;
}

const Tensor& ForwardTrace::node_output(NodeId node) const { return tape_.value(node_output_id(node)); }

ValueId ForwardTrace::node_output_id(NodeId node) const {
  if (node.kind == NodeKind::kLogits || !is_valid_node(node, *config_)) {
    throw InterventionError("node " + to_string(node) + " has no residual output");
  }
  return node_out_[node_index(node, *config_)];
}

std::vector<Tensor> ForwardTrace::node_outputs() const {
  std::vector<Tensor> out;
  out.reserve(node_out_.size());
  for (ValueId id : node_out_) out.push_back(tape_.value(id));
  return out;
}

const Tensor& ForwardTrace::ffn_hidden(std::size_t layer) const { return tape_.value(ffn_hidden_.at(layer)); }

ValueId ForwardTrace::child_input_id(ChildSlot slot) const {
  auto it = child_inputs_.find(slot);
  if (it == child_inputs_.end()) {
    throw compute::UnknownSlotError("no recorded input for " + to_string(slot.node) + "." +
                                    to_string(slot.slot));
  }
  return it->second;
}

namespace {

std::size_t slot_key(std::size_t node_idx, Slot slot) { return node_idx * 4 + static_cast<std::size_t>(slot); }

struct LayerClamps {
  bool any = false;
  Tensor values;
  std::vector<std::uint8_t> mask;
};

}  // namespace

ForwardTrace forward(const Parameters& params, std::span<const std::size_t> tokens,
                     std::span<const Intervention> interventions, const ForwardOptions& options) {
  const ModelConfig& cfg = params.config;
  const std::size_t T = tokens.size();
  if (T == 0) throw InterventionError("forward: empty token sequence");
  if (T > cfg.max_seq_len) {
    throw InterventionError("forward: sequence of " + std::to_string(T) + " tokens exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
  }
  for (std::size_t t : tokens) {
    if (t >= cfg.vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of " +
                            std::to_string(cfg.vocab_size));
    }
  }

  const std::size_t n_nodes = node_count(cfg);
  std::vector<std::vector<const EdgePatch*>> patches(n_nodes * 4);
  std::vector<LayerClamps> clamps(cfg.n_layers);
  for (const Intervention& iv : interventions) {
    if (const auto* p = std::get_if<EdgePatch>(&iv)) {
      if (!is_legal(p->edge, cfg)) throw InterventionError("illegal edge " + to_string(p->edge));
      if (p->replacement.shape() != Shape{T, cfg.d_model}) {
        throw InterventionError("edge patch " + to_string(p->edge) + ": replacement shape " +
                                compute::to_string(p->replacement.shape()) + " does not match [" +
                                std::to_string(T) + ", " + std::to_string(cfg.d_model) + "]");
      }
      patches[slot_key(node_index(p->edge.child, cfg), p->edge.slot)].push_back(p);
    } else {
      const auto& c = std::get<NeuronClamp>(iv);
      if (c.layer >= cfg.n_layers || c.index >= cfg.d_ff) {
        throw InterventionError("neuron clamp (" + std::to_string(c.layer) + ", " + std::to_string(c.index) +
                                ") out of range");
      }
      if (c.values.size() != 1 && c.values.size() != T) {
        throw InterventionError("neuron clamp needs 1 or " + std::to_string(T) + " values, got " +
                                std::to_string(c.values.size()));
      }
      LayerClamps& lc = clamps[c.layer];
      if (!lc.any) {
        lc.any = true;
        lc.values = Tensor({T, cfg.d_ff});
        lc.mask.assign(T * cfg.d_ff, 0);
      }
      const std::size_t first = c.positions == ClampPositions::kFinal ? T - 1 : 0;
      for (std::size_t t = first; t < T; ++t) {
        const std::size_t k = t * cfg.d_ff + c.index;
        lc.values[k] = c.values.size() == 1 ? c.values[0] : c.values[t];
        lc.mask[k] = 1;
      }
    }
  }

  ForwardTrace tr;
  tr.config_ = &cfg;
  tr.seq_len_ = T;
  tr.final_only_ = options.final_logits_only;
  Tape& tape = tr.tape_;

  for (const auto& [name, t] : params.named()) tr.param_ids_.push_back(tape.borrow(*t));
  std::size_t pi = 0;
  const ValueId embed_id = tr.param_ids_[pi++];
  const ValueId pos_id = tr.param_ids_[pi++];

  tr.node_out_.assign(n_nodes - 1, ValueId{});
  if (options.embed_override) {
    if (options.embed_override->shape() != Shape{T, cfg.d_model}) {
      throw InterventionError("embed override has shape " + compute::to_string(options.embed_override->shape()));
    }
    tr.embed_leaf_ = tape.leaf(*options.embed_override);
    tr.node_out_[0] = *tr.embed_leaf_;
  } else {
    std::vector<std::size_t> positions(T);
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    tr.node_out_[0] = tape.add(tape.gather(embed_id, std::vector<std::size_t>(tokens.begin(), tokens.end())),
                               tape.gather(pos_id, std::move(positions)));
  }

  auto slot_input = [&](NodeId child, Slot slot, ValueId residual) {
    const std::size_t ci = node_index(child, cfg);
    ValueId in = residual;
    for (const EdgePatch* p : patches[slot_key(ci, slot)]) {
      const ValueId parent = tr.node_out_[node_index(p->edge.parent, cfg)];
      in = tape.add(in, tape.sub(tape.leaf(p->replacement), parent));
    }
    if (options.tap_child_inputs) {
      in = tape.copy(in);
      tr.child_inputs_[ChildSlot{child, slot}] = in;
    }
    return in;
  };

  Tensor mask_t({T, T});
  for (std::size_t i = 0; i < T; ++i)
    for (std::size_t j = i + 1; j < T; ++j) mask_t.at(i, j) = -1e9;
  const ValueId mask = cfg.n_layers ? tape.leaf(std::move(mask_t)) : ValueId{};
  const double att_scale = cfg.n_layers ? 1.0 / std::sqrt(static_cast<double>(cfg.d_head)) : 1.0;

  ValueId res = tr.node_out_[0];
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const ValueId layer_in = res;
    std::vector<ValueId> head_out(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      const NodeId node = NodeId::attn(l, h);
      const ValueId wq = tr.param_ids_[pi++], wk = tr.param_ids_[pi++];
      const ValueId wv = tr.param_ids_[pi++], wo = tr.param_ids_[pi++];
      ValueId xq, xk, xv;
      if (cfg.split_qkv) {
        xq = slot_input(node, Slot::kQ, layer_in);
        xk = slot_input(node, Slot::kK, layer_in);
        xv = slot_input(node, Slot::kV, layer_in);
      } else {
        xq = xk = xv = slot_input(node, Slot::kIn, layer_in);
      }
      const ValueId q = tape.matmul(xq, wq);
      const ValueId k = tape.matmul(xk, wk);
      const ValueId v = tape.matmul(xv, wv);
      const ValueId scores = tape.add(tape.scale(tape.matmul_nt(q, k), att_scale), mask);
      const ValueId attn = tape.softmax(scores, 1);
      head_out[h] = tape.matmul(tape.matmul(attn, v), wo);
      tr.node_out_[node_index(node, cfg)] = head_out[h];
    }
    for (ValueId h : head_out) res = tape.add(res, h);

    const NodeId mlp = NodeId::mlp(l);
    const ValueId w1 = tr.param_ids_[pi++], w2 = tr.param_ids_[pi++];
    const ValueId x = slot_input(mlp, Slot::kIn, res);
    ValueId hidden = tape.matmul(x, w1);
    if (cfg.activation == Activation::kGelu) hidden = tape.gelu(hidden);
    if (clamps[l].any) {
      hidden = tape.select(hidden, tape.leaf(std::move(clamps[l].values)), std::move(clamps[l].mask));
    }
    if (options.ffn_override && options.ffn_override->first == l) {
      const Tensor& value = options.ffn_override->second;
      tr.ffn_leaf_ = tape.leaf(value);
      if (value.shape() == Shape{1, cfg.d_ff}) {
        hidden = tape.replace_row(hidden, *tr.ffn_leaf_, T - 1);
      } else if (value.shape() == Shape{T, cfg.d_ff}) {
        hidden = *tr.ffn_leaf_;
      } else {
        throw InterventionError("ffn override has shape " + compute::to_string(value.shape()));
      }
    }
    tr.ffn_hidden_.push_back(hidden);
    const ValueId out = tape.matmul(hidden, w2);
    tr.node_out_[node_index(mlp, cfg)] = out;
    res = tape.add(res, out);
  }
  tr.residual_ = res;

  const ValueId u = tr.param_ids_[pi++];
  ValueId x = slot_input(NodeId::logits(), Slot::kIn, res);
  if (options.final_logits_only) x = tape.gather(x, {T - 1});
  tr.logits_ = tape.matmul(x, u);
  return tr;
}

std::vector<double> predict_distribution(const ForwardTrace& trace) {
  Tensor p = compute::softmax(trace.final_logits(), 1);
  return p.values();
}

double metric_logit_diff(const ForwardTrace& trace, std::size_t expected, std::size_t opposite) {
  const Tensor& lg = trace.logits();
  return lg[trace.final_logit_index(expected)] - lg[trace.final_logit_index(opposite)];
}

std::string to_string(LossKind kind) { return kind == LossKind::kLogitDiff ? "logit_diff" : "cross_entropy"; }

LossKind parse_loss_kind(std::string_view text) {
  if (text == "logit_diff") return LossKind::kLogitDiff;
  if (text == "cross_entropy") return LossKind::kCrossEntropy;
  throw ConfigError("unknown loss '" + std::string(text) + "' (expected logit_diff or cross_entropy)");
}

ValueId record_loss(ForwardTrace& trace, const LossSpec& loss) {
  Tape& tape = trace.tape();
  if (loss.kind == LossKind::kLogitDiff) {
    return tape.sub(tape.pick(trace.logits_id(), trace.final_logit_index(loss.expected)),
                    tape.pick(trace.logits_id(), trace.final_logit_index(loss.opposite)));
  }
  const std::size_t idx = trace.final_logit_index(loss.expected);
  const std::size_t rows = trace.logits().rows();
  ValueId last = trace.logits_id();
  if (rows > 1) last = tape.gather(last, {rows - 1});
  return tape.scale(tape.pick(tape.log_softmax(last), idx - (rows - 1) * trace.logits().cols()), -1.0);
}

double loss_value(const ForwardTrace& trace, const LossSpec& loss) {
  if (loss.kind == LossKind::kLogitDiff) return metric_logit_diff(trace, loss.expected, loss.opposite);
  const std::size_t idx = trace.final_logit_index(loss.expected);
  const Tensor row = trace.final_logits();
  return -compute::log_softmax_last(row)[idx % row.cols()];
}

std::map<ChildSlot, Tensor> grads_wrt_child_inputs(const Parameters& params,
                                                   std::span<const std::size_t> tokens,
                                                   const LossSpec& loss, const Tensor* embed_input) {
  ForwardOptions opt;
  opt.embed_override = embed_input;
  opt.tap_child_inputs = true;
  opt.final_logits_only = true;
  ForwardTrace tr = forward(params, tokens, {}, opt);
  const ValueId l = record_loss(tr, loss);
  std::vector<ValueId> wanted;
  wanted.reserve(tr.child_inputs().size());
  for (const auto& [slot, id] : tr.child_inputs()) wanted.push_back(id);
  const auto grads = tr.tape().backward(l, wanted);
  std::map<ChildSlot, Tensor> out;
  for (const auto& [slot, id] : tr.child_inputs()) out.emplace(slot, grads.at(id));
  return out;
}

std::vector<Intervention> patch_all_edges(const ModelConfig& cfg, const std::vector<Tensor>& source) {
  std::vector<Intervention> out;
  for (const EdgeId& e : edge_list(cfg)) {
    out.emplace_back(EdgePatch{e, source.at(node_index(e.parent, cfg))});
  }
  return out;
}

}  // namespace gklab::model
