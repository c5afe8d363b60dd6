#include "gklab/evalx/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "gklab/compute/io.hpp"
#include "gklab/compute/parallel.hpp"
#include "gklab/compute/rng.hpp"

namespace gklab::evalx {

namespace {

const std::string& require_field(const std::optional<std::string>& field, const gknow::Example& ex,
                                 const char* name) {
  if (!field) throw ContractError("example " + std::to_string(ex.id) + " has no " + name);
  return *field;
}

std::vector<double> final_distribution(const model::Parameters& params, std::span<const std::size_t> tokens,
                                       std::span<const model::Intervention> iv) {
  model::ForwardOptions opt;
  opt.final_logits_only = true;
  return model::predict_distribution(model::forward(params, tokens, iv, opt));
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

nlohmann::ordered_json block_json(const MetricBlock& b) {
  return {{"n", b.n},
          {"P_exp", b.p_exp},
          {"P_opp", b.p_opp},
          {"P_other", b.p_other},
          {"pct_exp", b.pct_exp},
          {"pct_opp", b.pct_opp},
          {"pct_other", b.pct_other},
          {"delta", b.delta},
          {"wins", b.wins}};
}

std::string positions_name(model::ClampPositions p) { return p == model::ClampPositions::kAll ? "all" : "final"; }

Role parse_role(const std::string& text, std::size_t index) {
  if (text == "stereotypical") return Role::kStereotypical;
  if (text == "anti-stereotypical") return Role::kAntiStereotypical;
  if (text == "unrelated") return Role::kUnrelated;
  throw ParseError("entry " + std::to_string(index) + ": unknown role '" + text + "'");
}

std::vector<std::string> string_list(const nlohmann::json& j, const char* name, std::size_t index) {
  if (!j.contains(name) || !j.at(name).is_array() || j.at(name).empty()) {
    throw ParseError("entry " + std::to_string(index) + ": gendered_terms." + name + " must be a nonempty list");
  }
  std::vector<std::string> out;
  for (const auto& t : j.at(name)) {
    if (!t.is_string()) throw ParseError("entry " + std::to_string(index) + ": terms must be strings");
    out.push_back(t.get<std::string>());
  }
  return out;
}

}  // namespace

std::vector<EvalItem> encode_eval_items(const gknow::Dataset& data, const training::Vocab& vocab,
                                        const gknow::Tokenizer& tokenizer) {
  std::vector<EvalItem> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    EvalItem it;
    it.id = ex.id;
    it.tokens = training::encode(ex.prompt, vocab, tokenizer);
    it.expected = training::output_id(ex.expected_output, vocab, tokenizer);
    it.opposite = training::output_id(require_field(ex.opposite_output, ex, "opposite_output"), vocab, tokenizer);
    it.other = training::output_id(require_field(ex.neutral_output, ex, "neutral_output"), vocab, tokenizer);
    out.push_back(std::move(it));
  }
  return out;
}

CandidateDistribution renormalise(double expected, double opposite, double other) {
  CandidateDistribution d;
  d.raw = {expected, opposite, other};
  const double z = expected + opposite + other;
  if (!(z > 0.0)) throw ContractError("candidate probabilities sum to zero");
  d.p = {expected / z, opposite / z, other / z};
  return d;
}

CandidateDistribution candidate_distribution(const model::Parameters& params, const EvalItem& item,
                                             std::span<const model::Intervention> interventions) {
  const std::size_t v = params.config.vocab_size;
  for (std::size_t t : {item.expected, item.opposite, item.other}) {
    if (t >= v) throw model::VocabularyError("candidate id " + std::to_string(t) + " outside vocabulary");
  }
  const auto p = final_distribution(params, item.tokens, interventions);
  return renormalise(p[item.expected], p[item.opposite], p[item.other]);
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names = {"P_exp", "P_opp", "P_other", "pct_exp", "pct_opp", "pct_other",
                                                 "delta"};
  return names;
}

std::vector<std::vector<double>> per_example_values(std::span<const CandidateDistribution> dists) {
  std::vector<std::vector<double>> v(7, std::vector<double>(dists.size()));
  for (std::size_t i = 0; i < dists.size(); ++i) {
    const auto& d = dists[i];
    const int w = training::restricted_argmax(d.p[0], d.p[1], d.p[2]);
    for (int k = 0; k < 3; ++k) {
      v[k][i] = 100.0 * d.p[k];
      v[3 + k][i] = w == k ? 100.0 : 0.0;
    }
    v[6][i] = 100.0 * (d.raw[0] - d.raw[1]);
  }
  return v;
}

MetricBlock metrics(std::span<const CandidateDistribution> dists) {
  if (dists.empty()) throw ContractError("metrics need at least one example");
  MetricBlock b;
  b.n = dists.size();
  const double n = static_cast<double>(dists.size());
  double sp[3] = {0, 0, 0};
  double gap = 0.0;
  for (const auto& d : dists) {
    for (int k = 0; k < 3; ++k) sp[k] += d.p[k];
    gap += d.raw[0] - d.raw[1];
    b.wins[training::restricted_argmax(d.p[0], d.p[1], d.p[2])]++;
  }
  b.p_exp = 100.0 * sp[0] / n;
  b.p_opp = 100.0 * sp[1] / n;
  b.p_other = 100.0 * sp[2] / n;
  b.pct_exp = 100.0 * static_cast<double>(b.wins[0]) / n;
  b.pct_opp = 100.0 * static_cast<double>(b.wins[1]) / n;
  b.pct_other = 100.0 * static_cast<double>(b.wins[2]) / n;
  b.delta = 100.0 * gap / n;
  return b;
}

double metric_value(const MetricBlock& b, std::size_t metric) {
  switch (metric) {
    case 0:
      return b.p_exp;
    case 1:
      return b.p_opp;
    case 2:
      return b.p_other;
    case 3:
      return b.pct_exp;
    case 4:
      return b.pct_opp;
    case 5:
      return b.pct_other;
    case 6:
      return b.delta;
    default:
      throw ContractError("no metric " + std::to_string(metric));
  }
}

TTest paired_t_test(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw ContractError("paired t-test needs equal lengths");
  const std::size_t n = before.size();
  if (n < 2) throw ContractError("paired t-test needs at least two pairs");
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = after[i] - before[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : d) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTest r;
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
      r.p = 0.0;
    }
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  const boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

nlohmann::ordered_json MeanProfile::to_json() const {
  return {{"n_layers", n_layers}, {"d_ff", d_ff}, {"mean", mean}};
}

MeanProfile MeanProfile::from_json(const nlohmann::json& j) {
  MeanProfile p;
  p.n_layers = j.at("n_layers").get<std::size_t>();
  p.d_ff = j.at("d_ff").get<std::size_t>();
  p.mean = j.at("mean").get<std::vector<double>>();
  if (p.mean.size() != p.n_layers * p.d_ff) throw ParseError("activation profile has the wrong size");
  return p;
}

MeanProfile mean_activation_profile(const model::Parameters& params,
                                    std::span<const std::vector<std::size_t>> sequences) {
  if (sequences.empty()) throw ContractError("activation profile needs a nonempty dataset");
  const auto& cfg = params.config;
  MeanProfile prof{cfg.n_layers, cfg.d_ff, std::vector<double>(cfg.n_layers * cfg.d_ff, 0.0)};
  std::size_t positions = 0;
  for (const auto& seq : sequences) {
    const auto trace = model::forward(params, seq);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      const auto& h = trace.ffn_hidden(l);
      for (std::size_t t = 0; t < seq.size(); ++t) {
        for (std::size_t i = 0; i < cfg.d_ff; ++i) prof.mean[l * cfg.d_ff + i] += h[t * cfg.d_ff + i];
      }
    }
    positions += seq.size();
  }
  for (double& m : prof.mean) m /= static_cast<double>(positions);
  return prof;
}

std::string to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::kZero:
      return "zero";
    case AblationMode::kMean:
      return "mean";
    case AblationMode::kRandom:
      return "random";
    case AblationMode::kStereoOnly:
      return "stereo-only";
  }
  return "?";
}

AblationMode parse_ablation_mode(std::string_view text) {
  for (auto m : {AblationMode::kZero, AblationMode::kMean, AblationMode::kRandom, AblationMode::kStereoOnly}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown ablation mode '" + std::string(text) + "' (zero, mean, random, stereo-only)");
}

NeuronSet random_neurons(const model::ModelConfig& cfg, std::size_t n, std::uint64_t seed) {
  const std::size_t total = cfg.n_layers * cfg.d_ff;
  if (n > total) throw ContractError("cannot draw " + std::to_string(n) + " of " + std::to_string(total) + " neurons");
  std::vector<std::size_t> flat(total);
  std::iota(flat.begin(), flat.end(), std::size_t{0});
  compute::Rng rng(seed);
  rng.shuffle(flat);
  NeuronSet out;
  for (std::size_t i = 0; i < n; ++i) out.insert({flat[i] / cfg.d_ff, flat[i] % cfg.d_ff});
  return out;
}

std::vector<model::Intervention> ablation_interventions(const NeuronSet& neurons, const AblationOptions& options) {
  if (options.mode == AblationMode::kMean && options.profile == nullptr) {
    throw ConfigError("mean ablation needs an activation profile");
  }
  std::vector<model::Intervention> out;
  out.reserve(neurons.size());
  for (const auto& n : neurons) {
    const double v = options.mode == AblationMode::kMean ? options.profile->at(n) : 0.0;
    out.emplace_back(model::NeuronClamp{n.layer, n.index, {v}, options.positions});
  }
  return out;
}

const MetricRow& MetricsReport::row(std::string_view metric) const {
  for (const auto& r : rows) {
    if (r.metric == metric) return r;
  }
  throw ContractError("no metric " + std::string(metric));
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["mode"] = to_string(mode);
  j["n_ablated"] = n_ablated;
  j["positions"] = positions_name(positions);
  j["alpha"] = alpha;
  j["normalisation"] = "expected/opposite/other renormalised";
  j["delta_definition"] = "raw p(expected) - p(opposite)";
  j["baseline"] = block_json(baseline);
  j["ablated"] = block_json(ablated);
  auto& rs = j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    rs.push_back({{"metric", r.metric},
                  {"baseline", r.baseline},
                  {"ablated", r.ablated},
                  {"delta", r.delta},
                  {"arrow", r.arrow},
                  {"t", std::isfinite(r.test.t) ? nlohmann::ordered_json(r.test.t)
                                                : nlohmann::ordered_json(r.test.t > 0 ? "inf" : "-inf")},
                  {"p", r.test.p},
                  {"degenerate", r.test.degenerate},
                  {"significant", r.significant}});
  }
  return j;
}

MetricsReport ablate_and_eval(const model::Parameters& params, const NeuronSet& neurons,
                              std::span<const EvalItem> items, const std::string& dataset,
                              const AblationOptions& options) {
  if (items.empty()) throw ContractError("ablation needs a nonempty dataset '" + dataset + "'");
  const auto& cfg = params.config;
  if (options.mode == AblationMode::kMean && options.profile &&
      (options.profile->n_layers != cfg.n_layers || options.profile->d_ff != cfg.d_ff)) {
    throw ConfigError("activation profile does not match the model");
  }
  for (const auto& n : neurons) {
    if (n.layer >= cfg.n_layers || n.index >= cfg.d_ff) {
      throw ContractError("neuron " + std::to_string(n.layer) + ":" + std::to_string(n.index) + " is not in the model");
    }
  }
  const auto iv = ablation_interventions(neurons, options);

  std::vector<CandidateDistribution> before(items.size()), after(items.size());
  compute::parallel_for(items.size(), options.jobs, [&](std::size_t i) {
    before[i] = candidate_distribution(params, items[i]);
    after[i] = candidate_distribution(params, items[i], iv);
  });

  MetricsReport r;
  r.dataset = dataset;
  r.n_ablated = neurons.size();
  r.mode = options.mode;
  r.positions = options.positions;
  r.alpha = options.alpha;
  r.baseline = metrics(before);
  r.ablated = metrics(after);
  const auto vb = per_example_values(before);
  const auto va = per_example_values(after);
  const bool testable = items.size() >= 2;
  for (std::size_t m = 0; m < metric_names().size(); ++m) {
    MetricRow row;
    row.metric = metric_names()[m];
    row.baseline = metric_value(r.baseline, m);
    row.ablated = metric_value(r.ablated, m);
    row.delta = row.ablated - row.baseline;
    row.arrow = std::abs(row.delta) < 0.005 ? "→" : (row.delta > 0 ? "↑" : "↓");
    if (testable) {
      row.test = paired_t_test(vb[m], va[m]);
      row.significant = row.test.p < options.alpha;
    }
    r.rows.push_back(std::move(row));
  }
  return r;
}

double delta_gap_termlists(const model::Parameters& params, std::span<const std::size_t> tokens,
                           std::span<const std::size_t> fem_terms, std::span<const std::size_t> masc_terms,
                           std::span<const model::Intervention> interventions) {
  if (fem_terms.empty() || masc_terms.empty()) throw ContractError("term lists must be nonempty");
  const auto p = final_distribution(params, tokens, interventions);
  auto best = [&](std::span<const std::size_t> terms) {
    double m = 0.0;
    for (std::size_t t : terms) {
      if (t >= p.size()) throw model::VocabularyError("term id " + std::to_string(t) + " outside vocabulary");
      m = std::max(m, p[t]);
    }
    return m;
  };
  return std::abs(best(fem_terms) - best(masc_terms)) * 100.0;
}

std::string to_string(Role role) {
  switch (role) {
    case Role::kStereotypical:
      return "stereotypical";
    case Role::kAntiStereotypical:
      return "anti-stereotypical";
    case Role::kUnrelated:
      return "unrelated";
  }
  return "?";
}

ExternalEvalSet load_external_evalset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read " + path.string());
  ExternalEvalSet set;
  std::string line;
  std::size_t index = 0;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::size_t i = index++;
    const std::string where = "entry " + std::to_string(i);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("context") || !j.at("context").is_string()) {
      throw ParseError(where + ": missing string field 'context'");
    }
    const bool has_c = j.contains("candidates");
    const bool has_t = j.contains("gendered_terms");
    if (has_c == has_t) throw ParseError(where + ": needs exactly one of 'candidates' or 'gendered_terms'");
    const auto context = j.at("context").get<std::string>();
    const auto pos = context.find(kMask);
    if (pos == std::string::npos || context.find(kMask, pos + 1) != std::string::npos) {
      throw ParseError(where + ": context must contain exactly one " + std::string(kMask));
    }
    ++set.total;
    const auto tail = context.substr(pos + kMask.size());
    if (tail.find_first_not_of(" \t.!?") != std::string::npos) {
      ++set.rejected;
      continue;
    }
    ExternalEntry e;
    e.index = i;
    e.context = context.substr(0, pos);
    while (!e.context.empty() && std::isspace(static_cast<unsigned char>(e.context.back()))) e.context.pop_back();
    if (has_c) {
      const auto& cs = j.at("candidates");
      if (!cs.is_array()) throw ParseError(where + ": candidates must be a list");
      std::array<int, 3> seen{};
      for (const auto& c : cs) {
        if (!c.is_object() || !c.contains("text") || !c.contains("role") || !c.at("text").is_string() ||
            !c.at("role").is_string()) {
          throw ParseError(where + ": candidates need string 'text' and 'role'");
        }
        const Role role = parse_role(c.at("role").get<std::string>(), i);
        seen[static_cast<std::size_t>(role)]++;
        e.candidates.push_back({c.at("text").get<std::string>(), role});
      }
      if (seen != std::array<int, 3>{1, 1, 1}) throw ParseError(where + ": needs one candidate per role");
    } else {
      const auto& g = j.at("gendered_terms");
      if (!g.is_object()) throw ParseError(where + ": gendered_terms must be an object");
      e.feminine = string_list(g, "feminine", i);
      e.masculine = string_list(g, "masculine", i);
    }
    set.entries.push_back(std::move(e));
  }
  return set;
}

std::vector<EvalItem> external_items(const ExternalEvalSet& set, const training::Vocab& vocab,
                                     const gknow::Tokenizer& tokenizer) {
  std::vector<EvalItem> out;
  for (const auto& e : set.entries) {
    if (e.has_terms()) continue;
    EvalItem it;
    it.id = e.index;
    it.tokens = training::encode(e.context, vocab, tokenizer);
    for (const auto& c : e.candidates) {
      const std::size_t id = training::output_id(c.text, vocab, tokenizer);
      switch (c.role) {
        case Role::kStereotypical:
          it.expected = id;
          break;
        case Role::kAntiStereotypical:
          it.opposite = id;
          break;
        case Role::kUnrelated:
          it.other = id;
          break;
      }
    }
    out.push_back(std::move(it));
  }
  return out;
}

std::vector<TermListItem> external_term_items(const ExternalEvalSet& set, const training::Vocab& vocab,
                                              const gknow::Tokenizer& tokenizer) {
  std::vector<TermListItem> out;
  for (const auto& e : set.entries) {
    if (!e.has_terms()) continue;
    TermListItem it;
    it.id = e.index;
    it.tokens = training::encode(e.context, vocab, tokenizer);
    for (const auto& t : e.feminine) it.feminine.push_back(training::output_id(t, vocab, tokenizer));
    for (const auto& t : e.masculine) it.masculine.push_back(training::output_id(t, vocab, tokenizer));
    out.push_back(std::move(it));
  }
  return out;
}

void write_report_json(std::span<const MetricsReport> reports, const nlohmann::ordered_json& meta,
                       const std::filesystem::path& path) {
  nlohmann::ordered_json j = meta;
  auto& rs = j["reports"] = nlohmann::ordered_json::array();
  for (const auto& r : reports) rs.push_back(r.to_json());
  write_text(path, j.dump(2) + "\n");
}

void write_report_csv(std::span<const MetricsReport> reports, const std::filesystem::path& path) {
  using compute::format_double;
  std::string text = "dataset,mode,n_ablated,metric,baseline,ablated,delta,arrow,t,p,significant\n";
  for (const auto& r : reports) {
    for (const auto& row : r.rows) {
      text += r.dataset + "," + to_string(r.mode) + "," + std::to_string(r.n_ablated) + "," + row.metric + "," +
              format_double(row.baseline) + "," + format_double(row.ablated) + "," + format_double(row.delta) + "," +
              row.arrow + "," + format_double(row.test.t) + "," + format_double(row.test.p) + "," +
              (row.significant ? "*" : "") + "\n";
    }
  }
  write_text(path, text);
}

void write_profile(const MeanProfile& profile, const std::filesystem::path& path) {
  write_text(path, profile.to_json().dump(2) + "\n");
}

MeanProfile read_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read activation profile " + path.string());
  try {
    return MeanProfile::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace gklab::evalx
