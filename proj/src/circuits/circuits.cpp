#include "gklab/circuits/circuits.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gklab/compute/io.hpp"
#include "gklab/compute/parallel.hpp"

namespace gklab::circuits {

using model::EdgeId;
using model::NodeId;
using model::NodeKind;

namespace {

std::string kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::kEmbed:
      return "embed";
    case NodeKind::kHead:
      return "head";
    case NodeKind::kMlp:
      return "mlp";
    case NodeKind::kLogits:
      return "logits";
  }
  return "?";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

template <class T>
double jaccard(const std::set<T>& a, const std::set<T>& b) {
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.contains(x);
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<model::Intervention> ablations(const model::ModelConfig& cfg, const Circuit& circuit,
                                           const std::vector<compute::Tensor>& corrupt) {
  std::vector<model::Intervention> out;
  for (const EdgeId& e : model::edge_list(cfg)) {
    if (!circuit.contains(e)) out.emplace_back(model::EdgePatch{e, corrupt[model::node_index(e.parent, cfg)]});
  }
  return out;
}

double task_metric(const model::Parameters& params, const PromptPair& pair, std::span<const std::size_t> tokens,
                   std::span<const model::Intervention> iv) {
  model::ForwardOptions opt;
  opt.final_logits_only = true;
  return model::metric_logit_diff(model::forward(params, tokens, iv, opt), pair.expected, pair.opposite);
}

void require_matched(std::span<const PromptPair> pairs) {
  for (const auto& p : pairs) {
    if (p.clean.size() != p.corrupted.size()) {
      throw ContractError("pair " + std::to_string(p.id) + " is not length-matched");
    }
  }
}

}  // namespace

std::set<NodeId> induced_nodes(const std::set<EdgeId>& edges) {
  std::set<NodeId> out;
  for (const auto& e : edges) {
    out.insert(e.parent);
    out.insert(e.child);
  }
  return out;
}

Circuit make_circuit(std::set<EdgeId> edges, std::string source) {
  Circuit c;
  c.nodes = induced_nodes(edges);
  c.n = edges.size();
  c.edges = std::move(edges);
  c.source = std::move(source);
  return c;
}

Circuit full_circuit(const model::ModelConfig& cfg) {
  const auto list = model::edge_list(cfg);
  return make_circuit({list.begin(), list.end()}, "full");
}

Circuit build_circuit(const attribution::EdgeScores& scores, std::size_t n) {
  if (n > scores.edges.size()) {
    throw ContractError("circuit size " + std::to_string(n) + " exceeds " + std::to_string(scores.edges.size()) +
                        " edges");
  }
  std::vector<std::size_t> order(scores.edges.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(scores.scores[a]) > std::abs(scores.scores[b]);
  });
  std::set<EdgeId> edges;
  for (std::size_t i = 0; i < n; ++i) edges.insert(scores.edges[order[i]]);
  return make_circuit(std::move(edges), scores.provenance.dataset);
}

model::ForwardTrace run_with_circuit(const model::Parameters& params, const PromptPair& pair, const Circuit& circuit) {
  require_matched(std::span(&pair, 1));
  const auto corrupt = model::forward(params, pair.corrupted).node_outputs();
  const auto iv = ablations(params.config, circuit, corrupt);
  return model::forward(params, pair.clean, iv);
}

nlohmann::ordered_json FaithfulnessResult::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["circuit"] = circuit;
  j["n_edges"] = n_edges;
  j["f"] = f ? nlohmann::ordered_json(*f) : nlohmann::ordered_json(nullptr);
  j["degenerate"] = degenerate;
  j["m_clean"] = m_clean;
  j["m_circuit"] = m_circuit;
  j["m_corrupt"] = m_corrupt;
  j["aggregation"] = "mean-of-metrics";
  return j;
}

FaithfulnessResult normalise(double m_clean, double m_circuit, double m_corrupt) {
  FaithfulnessResult r;
  r.m_clean = m_clean;
  r.m_circuit = m_circuit;
  r.m_corrupt = m_corrupt;
  if (std::abs(m_clean - m_corrupt) <= 1e-9) {
    r.degenerate = true;
  } else {
    r.f = (m_circuit - m_corrupt) / (m_clean - m_corrupt);
  }
  return r;
}

FaithfulnessEvaluator::FaithfulnessEvaluator(const model::Parameters& params, std::vector<PromptPair> pairs,
                                             std::string dataset, std::size_t jobs)
    : params_(&params), pairs_(std::move(pairs)), dataset_(std::move(dataset)), jobs_(jobs) {
  if (pairs_.empty()) throw ContractError("faithfulness needs a nonempty dataset");
  require_matched(pairs_);
  corrupt_outputs_.resize(pairs_.size());
  std::vector<double> clean(pairs_.size()), corrupt(pairs_.size());
  compute::parallel_for(pairs_.size(), jobs_, [&](std::size_t i) {
    const auto& pair = pairs_[i];
    corrupt_outputs_[i] = model::forward(params, pair.corrupted).node_outputs();
    clean[i] = task_metric(params, pair, pair.clean, {});
    corrupt[i] = task_metric(params, pair, pair.corrupted, {});
  });
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    m_clean_ += clean[i];
    m_corrupt_ += corrupt[i];
  }
  m_clean_ /= static_cast<double>(pairs_.size());
  m_corrupt_ /= static_cast<double>(pairs_.size());
}

FaithfulnessResult FaithfulnessEvaluator::evaluate(const Circuit& circuit) const {
  std::vector<double> m(pairs_.size());
  compute::parallel_for(pairs_.size(), jobs_, [&](std::size_t i) {
    const auto iv = ablations(params_->config, circuit, corrupt_outputs_[i]);
    m[i] = task_metric(*params_, pairs_[i], pairs_[i].clean, iv);
  });
  double total = 0.0;
  for (double x : m) total += x;
  FaithfulnessResult r = normalise(m_clean_, total / static_cast<double>(pairs_.size()), m_corrupt_);
  r.dataset = dataset_;
  r.circuit = circuit.source;
  r.n_edges = circuit.edges.size();
  return r;
}

FaithfulnessResult faithfulness(const model::Parameters& params, std::span<const PromptPair> pairs,
                                const Circuit& circuit, const std::string& dataset) {
  return FaithfulnessEvaluator(params, {pairs.begin(), pairs.end()}, dataset).evaluate(circuit);
}

std::vector<std::size_t> default_grid(std::size_t total) {
  std::vector<std::size_t> grid;
  for (std::size_t n = 8; n < total; n *= 2) grid.push_back(n);
  grid.push_back(total);
  return grid;
}

MinimalCircuit minimal_faithful(const attribution::EdgeScores& scores, const FaithfulnessEvaluator& evaluator,
                                double threshold, std::vector<std::size_t> grid) {
  if (grid.empty()) grid = default_grid(scores.edges.size());
  if (!std::is_sorted(grid.begin(), grid.end())) throw ContractError("circuit size grid must be ascending");
  MinimalCircuit best;
  bool have_best = false;
  for (std::size_t n : grid) {
    Circuit c = build_circuit(scores, n);
    FaithfulnessResult r = evaluator.evaluate(c);
    best.trace.emplace_back(n, r);
    const double f = r.f.value_or(-std::numeric_limits<double>::infinity());
    if (r.f && f >= threshold) {
      best.circuit = std::move(c);
      best.result = r;
      best.reached = true;
      return best;
    }
    if (!have_best || f > best.result.f.value_or(-std::numeric_limits<double>::infinity())) {
      best.circuit = std::move(c);
      best.result = r;
      have_best = true;
    }
  }
  return best;
}

Iou circuit_iou(const Circuit& a, const Circuit& b) { return {jaccard(a.edges, b.edges), jaccard(a.nodes, b.nodes)}; }

CrossTaskMatrix cross_task_faithfulness(const std::map<std::string, Circuit>& circuits,
                                        const std::map<std::string, std::vector<PromptPair>>& datasets,
                                        const model::Parameters& params, std::size_t jobs) {
  CrossTaskMatrix m;
  for (const auto& [name, c] : circuits) m.circuits.push_back(name);
  for (const auto& [name, d] : datasets) m.datasets.push_back(name);
  m.cells.assign(m.circuits.size(), std::vector<FaithfulnessResult>(m.datasets.size()));
  std::size_t d = 0;
  for (const auto& [dname, pairs] : datasets) {
    const FaithfulnessEvaluator ev(params, pairs, dname, jobs);
    std::size_t g = 0;
    for (const auto& [gname, c] : circuits) {
      m.cells[g][d] = ev.evaluate(c);
      m.cells[g][d].circuit = gname;
      ++g;
    }
    ++d;
  }
  return m;
}

std::vector<RatioRow> connection_ratio(const Circuit& circuit, const model::ModelConfig& cfg) {
  // Index 0 is the embed (parent) or logits (child) bucket; 1 + l is layer l.
  const std::size_t rows = cfg.n_layers + 1;
  std::vector<std::array<std::size_t, 4>> parent(rows, {0, 0, 0, 0}), child(rows, {0, 0, 0, 0});
  auto layer_row = [&](const NodeId& n) -> std::size_t {
    return n.kind == NodeKind::kEmbed || n.kind == NodeKind::kLogits ? 0 : 1 + n.layer;
  };
  for (const EdgeId& e : circuit.edges) {
    if (!model::is_legal(e, cfg)) throw ContractError("edge " + model::to_string(e) + " is not in the model");
    parent[layer_row(e.parent)][static_cast<std::size_t>(e.parent.kind)]++;
    child[layer_row(e.child)][static_cast<std::size_t>(e.child.kind)]++;
  }
  auto make = [](std::string layer, std::string side, const std::array<std::size_t, 4>& c) {
    RatioRow r{std::move(layer), std::move(side)};
    r.edges = c[0] + c[1] + c[2] + c[3];
    if (r.edges) {
      const double n = static_cast<double>(r.edges);
      r.embed = static_cast<double>(c[0]) / n;
      r.head = static_cast<double>(c[1]) / n;
      r.mlp = static_cast<double>(c[2]) / n;
      r.logits = static_cast<double>(c[3]) / n;
    }
    return r;
  };
  std::vector<RatioRow> out;
  out.push_back(make("embed", "parent", parent[0]));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    out.push_back(make(std::to_string(l), "parent", parent[1 + l]));
    out.push_back(make(std::to_string(l), "child", child[1 + l]));
  }
  out.push_back(make("logits", "child", child[0]));
  return out;
}

nlohmann::ordered_json circuit_to_json(const Circuit& c) {
  nlohmann::ordered_json j;
  j["source"] = c.source;
  j["n"] = c.n;
  j["n_edges"] = c.edges.size();
  j["n_nodes"] = c.nodes.size();
  auto& edges = j["edges"] = nlohmann::ordered_json::array();
  for (const auto& e : c.edges) {
    edges.push_back({{"id", model::to_string(e)},
                     {"parent", model::to_string(e.parent)},
                     {"parent_kind", kind_name(e.parent.kind)},
                     {"child", model::to_string(e.child)},
                     {"child_kind", kind_name(e.child.kind)},
                     {"slot", model::to_string(e.slot)}});
  }
  auto& nodes = j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& n : c.nodes) nodes.push_back(model::to_string(n));
  return j;
}

Circuit circuit_from_json(const nlohmann::json& j) {
  std::set<EdgeId> edges;
  for (const auto& e : j.at("edges")) edges.insert(model::parse_edge(e.at("id").get<std::string>()));
  Circuit c = make_circuit(std::move(edges), j.value("source", ""));
  c.n = j.value("n", c.edges.size());
  return c;
}

void write_circuit(const Circuit& c, const std::filesystem::path& path) {
  write_text(path, circuit_to_json(c).dump(2) + "\n");
}

Circuit read_circuit(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return circuit_from_json(nlohmann::json::parse(in));
}

void write_cross_task_csv(const CrossTaskMatrix& m, const std::filesystem::path& path) {
  std::string text = "circuit,dataset,f,degenerate,m_clean,m_circuit,m_corrupt,n_edges\n";
  for (std::size_t g = 0; g < m.circuits.size(); ++g) {
    for (std::size_t d = 0; d < m.datasets.size(); ++d) {
      const auto& r = m.cells[g][d];
      text += m.circuits[g] + "," + m.datasets[d] + "," + (r.f ? compute::format_double(*r.f) : "") + "," +
              (r.degenerate ? "1" : "0") + "," + compute::format_double(r.m_clean) + "," +
              compute::format_double(r.m_circuit) + "," + compute::format_double(r.m_corrupt) + "," +
              std::to_string(r.n_edges) + "\n";
    }
  }
  write_text(path, text);
}

void write_ratio_csv(std::span<const RatioRow> rows, const std::filesystem::path& path) {
  std::string text = "layer,side,edges,embed,head,mlp,logits,status\n";
  for (const auto& r : rows) {
    text += r.layer + "," + r.side + "," + std::to_string(r.edges) + "," + compute::format_double(r.embed) + "," +
            compute::format_double(r.head) + "," + compute::format_double(r.mlp) + "," +
            compute::format_double(r.logits) + "," + (r.empty() ? "empty" : "ok") + "\n";
  }
  write_text(path, text);
}

void write_iou_csv(const std::map<std::string, Circuit>& circuits, const std::filesystem::path& path) {
  std::string text = "circuit_a,circuit_b,edge_jaccard,node_jaccard\n";
  for (const auto& [a, ca] : circuits) {
    for (const auto& [b, cb] : circuits) {
      const Iou iou = circuit_iou(ca, cb);
      text += a + "," + b + "," + compute::format_double(iou.edge_jaccard) + "," +
              compute::format_double(iou.node_jaccard) + "\n";
    }
  }
  write_text(path, text);
}

}  // namespace gklab::circuits
