#include "gklab/attribution/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "gklab/compute/io.hpp"
#include "gklab/compute/parallel.hpp"

namespace gklab::attribution {

using compute::Tensor;
using model::ChildSlot;
using model::EdgeId;
using model::ForwardOptions;
using model::Parameters;

namespace {

const std::string& require_field(const std::optional<std::string>& field, const gknow::Example& ex,
                                 const char* name) {
  if (!field) throw ContractError("example " + std::to_string(ex.id) + " has no " + name);
  return *field;
}

double dot(const Tensor& a, const Tensor& b) {
  const auto x = a.data();
  const auto y = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
  return s;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::string positions_name(model::ClampPositions p) { return p == model::ClampPositions::kAll ? "all" : "final"; }

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_provenance(const Provenance& p, const std::filesystem::path& csv) {
  write_text(provenance_path(csv), p.to_json().dump(2) + "\n");
}

Provenance read_provenance(const std::filesystem::path& csv) {
  const auto path = provenance_path(csv);
  std::ifstream in(path);
  if (!in) return {};
  return Provenance::from_json(nlohmann::json::parse(in));
}

}  // namespace

std::vector<PromptPair> encode_pairs(const gknow::Dataset& data, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer) {
  std::vector<PromptPair> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    PromptPair p;
    p.id = ex.id;
    p.clean = training::encode(ex.prompt, vocab, tokenizer);
    p.corrupted = training::encode(require_field(ex.corrupted_prompt, ex, "corrupted_prompt"), vocab, tokenizer);
    p.expected = training::output_id(ex.expected_output, vocab, tokenizer);
    p.opposite = training::output_id(require_field(ex.opposite_output, ex, "opposite_output"), vocab, tokenizer);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PromptItem> encode_items(const gknow::Dataset& data, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer) {
  std::vector<PromptItem> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    out.push_back({ex.id, training::encode(ex.prompt, vocab, tokenizer),
                   training::output_id(ex.expected_output, vocab, tokenizer)});
  }
  return out;
}

nlohmann::ordered_json Provenance::to_json() const {
  return {{"method", method}, {"dataset", dataset},       {"loss", loss},
          {"steps", steps},   {"n_examples", n_examples}, {"positions", positions}};
}

Provenance Provenance::from_json(const nlohmann::json& j) {
  Provenance p;
  p.method = j.value("method", "");
  p.dataset = j.value("dataset", "");
  p.loss = j.value("loss", "");
  p.steps = j.value("steps", std::size_t{0});
  p.n_examples = j.value("n_examples", std::size_t{0});
  p.positions = j.value("positions", "");
  return p;
}

double EdgeScores::score(const EdgeId& edge) const {
  const auto it = std::find(edges.begin(), edges.end(), edge);
  if (it == edges.end()) throw ContractError("no score for edge " + model::to_string(edge));
  return scores[static_cast<std::size_t>(it - edges.begin())];
}

EdgeScores eap_ig_scores(const Parameters& params, std::span<const PromptPair> pairs, const EapIgOptions& options) {
  const auto& cfg = params.config;
  if (options.steps == 0) throw ContractError("EAP-IG needs at least one step");
  if (pairs.empty()) throw ContractError("EAP-IG needs at least one pair");
  for (const auto& p : pairs) {
    if (p.clean.size() != p.corrupted.size()) {
      throw ContractError("pair " + std::to_string(p.id) + " is not length-matched (" +
                          std::to_string(p.clean.size()) + " vs " + std::to_string(p.corrupted.size()) + " tokens)");
    }
  }
  const auto edges = model::edge_list(cfg);
  std::vector<std::vector<double>> per_pair(pairs.size());

  compute::parallel_for(pairs.size(), options.jobs, [&](std::size_t pi) {
    const PromptPair& pair = pairs[pi];
    const auto clean = model::forward(params, pair.clean).node_outputs();
    const auto corrupt = model::forward(params, pair.corrupted).node_outputs();
    const model::LossSpec loss{options.loss, pair.expected, pair.opposite};
    const Tensor& e_clean = clean[0];
    const Tensor& e_corrupt = corrupt[0];

    std::map<ChildSlot, Tensor> grad_sum;
    for (std::size_t k = 1; k <= options.steps; ++k) {
      const double alpha = static_cast<double>(k) / static_cast<double>(options.steps);
      Tensor point(e_clean.shape());
      for (std::size_t i = 0; i < point.size(); ++i) point[i] = e_corrupt[i] + alpha * (e_clean[i] - e_corrupt[i]);
      const auto grads = model::grads_wrt_child_inputs(params, pair.clean, loss, &point);
      for (const auto& [slot, g] : grads) {
        if (!all_finite(g.data())) {
          throw NumericError("non-finite gradient at " + model::to_string(slot.node) + " for pair " +
                             std::to_string(pair.id));
        }
        auto [it, fresh] = grad_sum.try_emplace(slot, g);
        if (!fresh) {
          auto dst = it->second.data();
          const auto src = g.data();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
        }
      }
    }

    const double inv_m = 1.0 / static_cast<double>(options.steps);
    std::vector<Tensor> delta(clean.size());
    for (std::size_t n = 0; n < clean.size(); ++n) {
      delta[n] = Tensor(clean[n].shape());
      for (std::size_t i = 0; i < delta[n].size(); ++i) delta[n][i] = corrupt[n][i] - clean[n][i];
    }
    std::vector<double> out(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const Tensor& g = grad_sum.at(ChildSlot{edges[e].child, edges[e].slot});
      out[e] = dot(delta[model::node_index(edges[e].parent, cfg)], g) * inv_m;
    }
    if (!all_finite(out)) throw NumericError("non-finite edge score for pair " + std::to_string(pair.id));
    per_pair[pi] = std::move(out);
  });

  EdgeScores result{edges, std::vector<double>(edges.size(), 0.0), {}};
  for (const auto& row : per_pair)
    for (std::size_t e = 0; e < edges.size(); ++e) result.scores[e] += row[e];
  // + 0.0 folds a negative zero into +0.
  for (double& s : result.scores) s = s / static_cast<double>(pairs.size()) + 0.0;
  result.provenance = {"eap-ig", options.dataset, model::to_string(options.loss), options.steps, pairs.size(), "all"};
  return result;
}

NeuronScores ig_neuron_scores(const Parameters& params, std::span<const PromptItem> items, const IgOptions& options) {
  const auto& cfg = params.config;
  if (options.steps == 0) throw ContractError("integrated gradients need at least one step");
  if (items.empty()) throw ContractError("integrated gradients need at least one example");
  const std::size_t L = cfg.n_layers, F = cfg.d_ff;
  std::vector<std::vector<double>> per_item(items.size());

  compute::parallel_for(items.size(), options.jobs, [&](std::size_t ii) {
    const PromptItem& item = items[ii];
    const auto base = model::forward(params, item.tokens);
    std::vector<double> out(L * F, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      const Tensor& hidden = base.ffn_hidden(l);
      Tensor w_hat = options.positions == model::ClampPositions::kFinal
                         ? Tensor({1, F}, std::vector<double>(hidden.data().end() - static_cast<std::ptrdiff_t>(F),
                                                              hidden.data().end()))
                         : hidden;
      Tensor grad_sum(w_hat.shape());
      for (std::size_t k = 1; k <= options.steps; ++k) {
        const double alpha = static_cast<double>(k) / static_cast<double>(options.steps);
        ForwardOptions opt;
        opt.final_logits_only = true;
        Tensor scaled = w_hat;
        for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] *= alpha;
        opt.ffn_override = std::make_pair(l, std::move(scaled));
        auto tr = model::forward(params, item.tokens, {}, opt);
        const model::ValueId leaf = *tr.ffn_override_leaf();
        double factor = 1.0;
        model::ValueId target;
        if (options.target == IgTarget::kProbability) {
          // dP = −P · d(−log P)
          target = model::record_loss(tr, {model::LossKind::kCrossEntropy, item.expected, item.expected});
          factor = -std::exp(-tr.tape().value(target).item());
        } else {
          target = tr.tape().pick(tr.logits_id(), tr.final_logit_index(item.expected));
        }
        const std::vector<model::ValueId> wanted = {leaf};
        const auto grads = tr.tape().backward(target, wanted);
        const auto g = grads.at(leaf).data();
        auto dst = grad_sum.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * g[i];
      }
      const std::size_t rows = w_hat.rows();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < F; ++i) out[l * F + i] += w_hat.at(r, i) * grad_sum.at(r, i);
      for (std::size_t i = 0; i < F; ++i) out[l * F + i] /= static_cast<double>(options.steps);
    }
    if (!all_finite(out)) throw NumericError("non-finite neuron attribution for example " + std::to_string(item.id));
    per_item[ii] = std::move(out);
  });

  NeuronScores result{L, F, std::vector<double>(L * F, 0.0), {}};
  for (const auto& row : per_item)
    for (std::size_t i = 0; i < row.size(); ++i) result.scores[i] += row[i];
  for (double& s : result.scores) s = s / static_cast<double>(items.size()) + 0.0;
  result.provenance = {"integrated-gradients", options.dataset,
                       options.target == IgTarget::kProbability ? "probability" : "logit", options.steps,
                       items.size(), positions_name(options.positions)};
  return result;
}

std::vector<RankedNeuron> top_k(const NeuronScores& scores, std::size_t k) {
  if (k > scores.scores.size()) {
    throw ContractError("top_k: k = " + std::to_string(k) + " exceeds " + std::to_string(scores.scores.size()) +
                        " neurons");
  }
  std::vector<std::size_t> order(scores.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Flat index order equals (layer, index) order.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores.scores[a] > scores.scores[b]; });
  std::vector<RankedNeuron> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back({scores.neuron(order[i]), scores.scores[order[i]]});
  return out;
}

NeuronSet to_set(std::span<const RankedNeuron> ranked) {
  NeuronSet s;
  for (const auto& r : ranked) s.insert(r.neuron);
  return s;
}

SetComparison neuron_set_ops(const NeuronSet& a, const NeuronSet& b) {
  SetComparison out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out.overlap, out.overlap.end()));
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::inserter(out.difference, out.difference.end()));
  const std::size_t uni = a.size() + b.size() - out.overlap.size();
  out.jaccard = uni == 0 ? 1.0 : static_cast<double>(out.overlap.size()) / static_cast<double>(uni);
  return out;
}

LensResult logit_lens(const Parameters& params, NeuronId neuron, std::size_t top_n) {
  const auto& cfg = params.config;
  if (neuron.layer >= cfg.n_layers || neuron.index >= cfg.d_ff) {
    throw ContractError("neuron (" + std::to_string(neuron.layer) + ", " + std::to_string(neuron.index) +
                        ") out of range");
  }
  const Tensor& w2 = params.layers[neuron.layer].w_2;
  Tensor row({1, cfg.d_model});
  for (std::size_t d = 0; d < cfg.d_model; ++d) row[d] = w2.at(neuron.index, d);
  const Tensor proj = compute::matmul(row, params.unembed);
  const std::size_t V = proj.size();
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t n = std::min(top_n, V);
  LensResult out;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proj[a] > proj[b]; });
  for (std::size_t i = 0; i < n; ++i) out.top.push_back({order[i], proj[order[i]]});
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return proj[a] < proj[b]; });
  for (std::size_t i = 0; i < n; ++i) out.bottom.push_back({order[i], proj[order[i]]});
  return out;
}

bool interpretability_flag(NeuronId neuron, const std::set<std::string>& terms, const Parameters& params,
                           const training::Vocab& vocab, std::size_t top_n) {
  if (terms.empty()) return false;
  const auto lens = logit_lens(params, neuron, top_n);
  for (const auto* list : {&lens.top, &lens.bottom})
    for (const auto& e : *list)
      if (terms.contains(vocab.token(e.token))) return true;
  return false;
}

std::filesystem::path provenance_path(const std::filesystem::path& csv) {
  auto p = csv;
  p.replace_extension(".json");
  return p;
}

void write_edge_scores(const EdgeScores& scores, const std::filesystem::path& csv) {
  std::string text = "edge_id,score,abs_score\n";
  for (std::size_t e = 0; e < scores.edges.size(); ++e) {
    text += model::to_string(scores.edges[e]) + "," + compute::format_double(scores.scores[e]) + "," +
            compute::format_double(std::abs(scores.scores[e])) + "\n";
  }
  write_text(csv, text);
  write_provenance(scores.provenance, csv);
}

EdgeScores read_edge_scores(const std::filesystem::path& csv) {
  EdgeScores out;
  for (const auto& row : compute::read_csv(csv, {"edge_id", "score", "abs_score"})) {
    out.edges.push_back(model::parse_edge(row[0]));
    out.scores.push_back(compute::parse_double(row[1]));
  }
  out.provenance = read_provenance(csv);
  return out;
}

void write_neuron_scores(const NeuronScores& scores, const std::filesystem::path& csv) {
  std::string text = "layer,index,score\n";
  for (std::size_t i = 0; i < scores.scores.size(); ++i) {
    const NeuronId n = scores.neuron(i);
    text += std::to_string(n.layer) + "," + std::to_string(n.index) + "," + compute::format_double(scores.scores[i]) +
            "\n";
  }
  write_text(csv, text);
  write_provenance(scores.provenance, csv);
}

NeuronScores read_neuron_scores(const std::filesystem::path& csv) {
  const auto rows = compute::read_csv(csv, {"layer", "index", "score"});
  NeuronScores out;
  for (const auto& row : rows) {
    out.n_layers = std::max<std::size_t>(out.n_layers, std::stoul(row[0]) + 1);
    out.d_ff = std::max<std::size_t>(out.d_ff, std::stoul(row[1]) + 1);
  }
  if (rows.size() != out.n_layers * out.d_ff) {
    throw std::runtime_error(csv.string() + ": neuron scores do not cover a full layer × index grid");
  }
  out.scores.assign(rows.size(), std::nan(""));
  for (const auto& row : rows) out.scores[std::stoul(row[0]) * out.d_ff + std::stoul(row[1])] = compute::parse_double(row[2]);
  if (!all_finite(out.scores)) throw std::runtime_error(csv.string() + ": duplicate or non-finite neuron scores");
  out.provenance = read_provenance(csv);
  return out;
}

void write_ranked_neurons(std::span<const RankedNeuron> ranked, const std::filesystem::path& csv) {
  std::string text = "rank,layer,index,score\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    text += std::to_string(i + 1) + "," + std::to_string(ranked[i].neuron.layer) + "," +
            std::to_string(ranked[i].neuron.index) + "," + compute::format_double(ranked[i].score) + "\n";
  }
  write_text(csv, text);
}

std::vector<RankedNeuron> read_ranked_neurons(const std::filesystem::path& csv) {
  std::vector<RankedNeuron> out;
  for (const auto& row : compute::read_csv(csv, {"rank", "layer", "index", "score"})) {
    out.push_back({{std::stoul(row[1]), std::stoul(row[2])}, compute::parse_double(row[3])});
  }
  return out;
}

}  // namespace gklab::attribution
