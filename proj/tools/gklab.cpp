// gklab: command-line driver for the dataset → model → attribution → circuit → ablation pipeline.
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gklab/attribution/attribution.hpp"
#include "gklab/circuits/circuits.hpp"
#include "gklab/compute/io.hpp"
#include "gklab/evalx/evalx.hpp"
#include "gklab/gknow/dataset.hpp"
#include "gklab/model/checkpoint.hpp"
#include "gklab/training/trainer.hpp"

#ifndef GKLAB_VERSION
#define GKLAB_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace gklab;
using json = nlohmann::ordered_json;

namespace {

/// Bad flags or inputs: exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

constexpr int kOk = 0;
constexpr int kRuntime = 1;
constexpr int kConfig = 2;

struct Context {
  fs::path out;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  std::string lexicon;
  std::string templates;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

fs::path default_out() {
  if (const char* env = std::getenv("GKNOW_LAB_OUT"); env && *env) return env;
  return "gklab_out";
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string manifest_name(const std::string& command) { return command + ".manifest.json"; }

void write_manifest(const Context& ctx, const std::string& command, const json& config,
                    const std::vector<fs::path>& inputs, const std::vector<fs::path>& outputs) {
  json m;
  m["command"] = command;
  m["tool_version"] = GKLAB_VERSION;
  m["seed"] = ctx.seed;
  m["jobs"] = ctx.jobs;
  m["config"] = config;
  auto& in = m["inputs"] = json::array();
  for (const auto& p : inputs) in.push_back(p.generic_string());
  auto& out = m["outputs"] = json::array();
  for (const auto& p : outputs) out.push_back(p.generic_string());
  m["wall_time_s"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  write_json(ctx.out / manifest_name(command), m);
}

const gknow::Lexicon& lexicon(const Context& ctx) {
  static const gknow::Lexicon lex = [&] {
    if (ctx.lexicon.empty()) return gknow::Lexicon::load_default();
    return gknow::Lexicon::load(ctx.lexicon);
  }();
  return lex;
}

const gknow::Tokenizer& tokenizer(const Context& ctx) {
  static const gknow::Tokenizer tok(lexicon(ctx));
  return tok;
}

gknow::TemplateRegistry templates(const Context& ctx) {
  if (ctx.templates.empty()) return gknow::TemplateRegistry::load_default();
  return gknow::TemplateRegistry::load(ctx.templates);
}

gknow::Dataset read_dataset(const fs::path& p) {
  require_file(p, "dataset");
  return gknow::read_jsonl(p);
}

gknow::Dataset only_subset(const gknow::Dataset& data, const std::string& subset) {
  const auto key = gknow::SubsetKey::parse(subset);
  gknow::Dataset out;
  for (const auto& ex : data) {
    if (ex.subset && *ex.subset == key) out.push_back(ex);
  }
  if (out.empty()) throw UsageError("no examples of subset '" + subset + "' in the dataset");
  return out;
}

std::string augmentable_list() {
  std::string s;
  for (const auto& k : gknow::SubsetKey::all()) {
    if (gknow::supports_candidates(k)) s += (s.empty() ? "" : ", ") + k.name();
  }
  return s;
}

gknow::Dataset only_pairs(const gknow::Dataset& data, const std::string& subset) {
  auto d = only_subset(data, subset);
  for (const auto& ex : d) {
    if (!ex.corrupted_prompt || !ex.opposite_output) {
      throw UsageError("subset '" + subset + "' has no counterfactual pairs; augmented subsets: " +
                       augmentable_list());
    }
  }
  return d;
}

struct LoadedModel {
  model::Parameters params;
  training::Vocab vocab;
};

LoadedModel load_model(const fs::path& p) {
  require_file(p, "checkpoint");
  auto ck = model::load_checkpoint(p);
  if (!ck.metadata.contains("vocab")) throw UsageError("checkpoint has no vocabulary: " + p.string());
  return {std::move(ck.params), training::Vocab::from_json(ck.metadata.at("vocab"))};
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& x : compute::split(s, ',')) {
    if (!x.empty()) out.push_back(x);
  }
  return out;
}

std::vector<std::size_t> parse_grid(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& x : split_list(s)) {
    try {
      out.push_back(std::stoul(x));
    } catch (const std::exception&) {
      throw UsageError("bad grid value '" + x + "'");
    }
  }
  return out;
}

// ---------------------------------------------------------------- gknow

void write_counts(const fs::path& path, const std::map<std::string, gknow::Dataset>& files, bool full) {
  json j;
  for (const auto& [name, d] : files) {
    json f;
    f["total"] = d.size();
    f["subsets"] = gknow::subset_counts(d);
    j[name] = f;
  }
  if (full) {
    const std::size_t n = files.begin()->second.size();
    j["published_total"] = 91490;
    j["delta"] = static_cast<long long>(n) - 91490;
    j["note"] = "difference traced to under-specified lexicon lists; see README";
  }
  write_json(path, j);
}

int cmd_gknow_gen(const Context& ctx, bool full, std::size_t train_cap, std::size_t test_cap) {
  const auto all = gknow::generate_full(lexicon(ctx), templates(ctx));
  const fs::path dir = ctx.out / "gknow";
  fs::create_directories(dir);
  std::vector<fs::path> outs;
  json cfg = {{"full", full}};
  if (full) {
    gknow::write_jsonl(all, dir / "full.jsonl");
    write_counts(dir / "full.counts.json", {{"full", all}}, true);
    outs = {dir / "full.jsonl", dir / "full.counts.json"};
    std::cout << "full: " << all.size() << " examples (published 91490)\n";
  } else {
    gknow::SplitConfig sc;
    sc.train_cap = train_cap;
    sc.test_cap = test_cap;
    sc.seed = ctx.seed;
    cfg["train_cap"] = train_cap;
    cfg["test_cap"] = test_cap;
    const auto sp = gknow::generate_small(all, sc);
    gknow::write_jsonl(sp.train, dir / "train.jsonl");
    gknow::write_jsonl(sp.test, dir / "test.jsonl");
    write_counts(dir / "small.counts.json", {{"train", sp.train}, {"test", sp.test}}, false);
    outs = {dir / "train.jsonl", dir / "test.jsonl", dir / "small.counts.json"};
    std::cout << "train: " << sp.train.size() << "  test: " << sp.test.size() << "\n";
  }
  write_manifest(ctx, full ? "gknow-gen-full" : "gknow-gen", cfg, {}, outs);
  return kOk;
}

int cmd_gknow_split(const Context& ctx, const fs::path& input, std::size_t train_cap, std::size_t test_cap) {
  const auto all = read_dataset(input);
  gknow::SplitConfig sc;
  sc.train_cap = train_cap;
  sc.test_cap = test_cap;
  sc.seed = ctx.seed;
  const auto sp = gknow::generate_small(all, sc);
  const fs::path dir = ctx.out / "gknow";
  fs::create_directories(dir);
  gknow::write_jsonl(sp.train, dir / "train.jsonl");
  gknow::write_jsonl(sp.test, dir / "test.jsonl");
  std::cout << "train: " << sp.train.size() << "  test: " << sp.test.size() << "\n";
  write_manifest(ctx, "gknow-split", {{"train_cap", train_cap}, {"test_cap", test_cap}}, {input},
                 {dir / "train.jsonl", dir / "test.jsonl"});
  return kOk;
}

int cmd_gknow_augment(const Context& ctx, std::vector<std::string> inputs) {
  const fs::path dir = ctx.out / "gknow";
  if (inputs.empty()) inputs = {(dir / "train.jsonl").string(), (dir / "test.jsonl").string()};
  std::vector<fs::path> ins, outs;
  for (const auto& in : inputs) {
    const fs::path p(in);
    const auto data = read_dataset(p);
    const auto aug = gknow::augment_dataset(data, lexicon(ctx), tokenizer(ctx));
    const fs::path out = p.parent_path() / (p.stem().string() + ".aug.jsonl");
    gknow::write_jsonl(aug, out);
    std::size_t n = 0;
    for (const auto& ex : aug) n += ex.corrupted_prompt.has_value();
    std::cout << out.string() << ": " << aug.size() << " examples, " << n << " with counterfactuals\n";
    ins.push_back(p);
    outs.push_back(out);
  }
  write_manifest(ctx, "gknow-augment", json::object(), ins, outs);
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainFlags {
  std::string train_path, test_path;
  training::TrainConfig cfg;
};

int cmd_train(const Context& ctx, TrainFlags f) {
  const auto train_set = read_dataset(f.train_path);
  const auto test_set = read_dataset(f.test_path);
  const auto& tok = tokenizer(ctx);
  const auto vocab = training::build_vocab(std::vector<gknow::Dataset>{train_set, test_set}, tok);
  f.cfg.model.vocab_size = vocab.size();
  f.cfg.seed = ctx.seed;
  try {
    f.cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto corpus = training::build_corpus(train_set, vocab, tok, true, test_set);
  std::cout << "corpus " << corpus.size() << " sequences, vocabulary " << vocab.size() << "\n";
  const auto res = training::train(corpus, f.cfg, [](std::size_t epoch, double loss) {
    std::cout << "epoch " << epoch + 1 << " mean loss " << compute::format_double(loss) << "\n" << std::flush;
  });
  const fs::path dir = ctx.out / "model";
  fs::create_directories(dir);
  json meta;
  meta["vocab"] = vocab.to_json();
  meta["train"] = f.cfg.to_json();
  meta["manifest"] = manifest_name("train");
  model::save_checkpoint(dir / "model.ckpt", res.params, meta);
  training::write_log_csv(res.log, dir / "train_log.csv");

  json acc;
  for (const auto& [name, a] : training::evaluate_lm(res.params, test_set, vocab, tok)) {
    acc[name] = {{"n", a.n}, {"accuracy", a.accuracy}, {"restricted", a.restricted}};
    std::cout << name << " " << compute::format_double(a.accuracy) << (a.restricted ? " (restricted)" : "")
              << "\n";
  }
  write_json(dir / "accuracy.json", {{"manifest", manifest_name("train")}, {"test", acc}});
  write_manifest(ctx, "train", f.cfg.to_json(), {f.train_path, f.test_path},
                 {dir / "model.ckpt", dir / "train_log.csv", dir / "accuracy.json"});
  return kOk;
}

// ---------------------------------------------------------------- attr

int cmd_attr_edges(const Context& ctx, const std::string& model_path, const std::string& data_path,
                   const std::string& subset, std::size_t m, const std::string& loss) {
  if (m == 0) throw UsageError("--m must be positive");
  const auto lm = load_model(model_path);
  const auto data = only_pairs(read_dataset(data_path), subset);
  const auto pairs = attribution::encode_pairs(data, lm.vocab, tokenizer(ctx));
  attribution::EapIgOptions opt;
  opt.steps = m;
  try {
    opt.loss = model::parse_loss_kind(loss);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  opt.dataset = subset;
  opt.jobs = ctx.jobs;
  const auto scores = attribution::eap_ig_scores(lm.params, pairs, opt);
  const fs::path csv = ctx.out / "attr" / ("edges_" + subset + ".csv");
  attribution::write_edge_scores(scores, csv);
  std::cout << "edge scores for " << pairs.size() << " pairs → " << csv.string() << "\n";
  write_manifest(ctx, "attr-edges-" + subset, {{"subset", subset}, {"m", m}, {"loss", loss}},
                 {model_path, data_path}, {csv, attribution::provenance_path(csv)});
  return kOk;
}

int cmd_attr_neurons(const Context& ctx, const std::string& model_path, const std::string& data_path,
                     const std::string& subset, std::size_t steps, std::size_t top, const std::string& positions,
                     const std::string& target) {
  if (steps == 0) throw UsageError("--steps must be positive");
  const auto lm = load_model(model_path);
  const auto data = only_subset(read_dataset(data_path), subset);
  const auto items = attribution::encode_items(data, lm.vocab, tokenizer(ctx));
  attribution::IgOptions opt;
  opt.steps = steps;
  if (positions == "final") {
    opt.positions = model::ClampPositions::kFinal;
  } else if (positions == "all") {
    opt.positions = model::ClampPositions::kAll;
  } else {
    throw UsageError("--positions must be final or all");
  }
  if (target == "probability") {
    opt.target = attribution::IgTarget::kProbability;
  } else if (target == "logit") {
    opt.target = attribution::IgTarget::kLogit;
  } else {
    throw UsageError("--target must be probability or logit");
  }
  opt.dataset = subset;
  opt.jobs = ctx.jobs;
  const auto scores = attribution::ig_neuron_scores(lm.params, items, opt);
  const fs::path dir = ctx.out / "attr";
  const fs::path csv = dir / ("neurons_" + subset + ".csv");
  attribution::write_neuron_scores(scores, csv);
  std::vector<fs::path> outs = {csv, attribution::provenance_path(csv)};
  if (top > 0) {
    if (top > scores.scores.size()) throw UsageError("--top exceeds the number of neurons");
    const auto ranked = attribution::top_k(scores, top);
    const fs::path rk = dir / ("top" + std::to_string(top) + "_" + subset + ".csv");
    attribution::write_ranked_neurons(ranked, rk);
    outs.push_back(rk);
  }
  std::cout << "neuron scores for " << items.size() << " prompts → " << csv.string() << "\n";
  write_manifest(ctx, "attr-neurons-" + subset,
                 {{"subset", subset}, {"steps", steps}, {"top", top}, {"positions", positions}, {"target", target}},
                 {model_path, data_path}, outs);
  return kOk;
}

// ---------------------------------------------------------------- circuit

fs::path graphs_dir(const Context& ctx) { return ctx.out / "circuit" / "graphs"; }

std::map<std::string, circuits::Circuit> load_circuits(const Context& ctx, const std::vector<std::string>& files) {
  std::vector<fs::path> paths;
  if (files.empty()) {
    if (!fs::is_directory(graphs_dir(ctx))) throw UsageError("no circuits found in " + graphs_dir(ctx).string());
    for (const auto& e : fs::directory_iterator(graphs_dir(ctx))) {
      if (e.path().extension() == ".json") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
  } else {
    for (const auto& f : files) paths.emplace_back(f);
  }
  std::map<std::string, circuits::Circuit> out;
  for (const auto& p : paths) {
    require_file(p, "circuit");
    out[p.stem().string()] = circuits::read_circuit(p);
  }
  if (out.empty()) throw UsageError("no circuits given");
  return out;
}

int cmd_circuit_find(const Context& ctx, const std::string& model_path, const std::string& data_path,
                     const std::string& subset, std::string scores_path, double threshold,
                     const std::string& grid_text) {
  if (scores_path.empty()) scores_path = (ctx.out / "attr" / ("edges_" + subset + ".csv")).string();
  require_file(scores_path, "edge scores");
  const auto lm = load_model(model_path);
  const auto data = only_pairs(read_dataset(data_path), subset);
  const auto pairs = attribution::encode_pairs(data, lm.vocab, tokenizer(ctx));
  const auto scores = attribution::read_edge_scores(scores_path);
  if (scores.edges != model::edge_list(lm.params.config)) throw UsageError("edge scores do not match the model");
  const circuits::FaithfulnessEvaluator ev(lm.params, pairs, subset, ctx.jobs);
  auto grid = parse_grid(grid_text);
  for (std::size_t n : grid) {
    if (n > scores.edges.size()) throw UsageError("grid value " + std::to_string(n) + " exceeds the edge count");
  }
  if (!std::is_sorted(grid.begin(), grid.end())) throw UsageError("--grid must be ascending");
  auto best = circuits::minimal_faithful(scores, ev, threshold, grid);
  best.circuit.source = subset;
  const fs::path graph = graphs_dir(ctx) / (subset + ".json");
  const fs::path trace = ctx.out / "circuit" / (subset + ".trace.csv");
  circuits::write_circuit(best.circuit, graph);
  std::string text = "n,f,degenerate,m_clean,m_circuit,m_corrupt\n";
  for (const auto& [n, r] : best.trace) {
    text += std::to_string(n) + "," + (r.f ? compute::format_double(*r.f) : "") + "," +
            (r.degenerate ? "1" : "0") + "," + compute::format_double(r.m_clean) + "," +
            compute::format_double(r.m_circuit) + "," + compute::format_double(r.m_corrupt) + "\n";
  }
  write_text(trace, text);
  json summary = best.result.to_json();
  summary["threshold"] = threshold;
  summary["reached"] = best.reached;
  summary["manifest"] = manifest_name("circuit-find-" + subset);
  const fs::path sum = ctx.out / "circuit" / (subset + ".faithfulness.json");
  write_json(sum, summary);
  std::cout << subset << ": n=" << best.circuit.edges.size() << " f="
            << (best.result.f ? compute::format_double(*best.result.f) : "degenerate")
            << (best.reached ? "" : " (threshold not reached)") << "\n";
  write_manifest(ctx, "circuit-find-" + subset, {{"subset", subset}, {"threshold", threshold}, {"grid", grid_text}},
                 {model_path, data_path, scores_path}, {graph, trace, sum});
  return kOk;
}

int cmd_circuit_iou(const Context& ctx, const std::vector<std::string>& files) {
  const auto cs = load_circuits(ctx, files);
  const fs::path out = ctx.out / "circuit" / "iou.csv";
  circuits::write_iou_csv(cs, out);
  std::cout << cs.size() << " circuits → " << out.string() << "\n";
  write_manifest(ctx, "circuit-iou", {{"circuits", cs.size()}}, {}, {out});
  return kOk;
}

int cmd_circuit_cross(const Context& ctx, const std::string& model_path, const std::string& data_path,
                      const std::vector<std::string>& files) {
  const auto cs = load_circuits(ctx, files);
  const auto lm = load_model(model_path);
  const auto all = read_dataset(data_path);
  std::map<std::string, std::vector<attribution::PromptPair>> datasets;
  for (const auto& [name, c] : cs) {
    datasets[name] = attribution::encode_pairs(only_pairs(all, name), lm.vocab, tokenizer(ctx));
  }
  const auto m = circuits::cross_task_faithfulness(cs, datasets, lm.params, ctx.jobs);
  const fs::path out = ctx.out / "circuit" / "cross.csv";
  circuits::write_cross_task_csv(m, out);
  std::cout << m.circuits.size() << "×" << m.datasets.size() << " matrix → " << out.string() << "\n";
  write_manifest(ctx, "circuit-cross", {{"circuits", m.circuits}}, {model_path, data_path}, {out});
  return kOk;
}

int cmd_circuit_ratio(const Context& ctx, const std::string& model_path, const std::vector<std::string>& files) {
  const auto cs = load_circuits(ctx, files);
  const auto lm = load_model(model_path);
  std::set<model::EdgeId> common = cs.begin()->second.edges;
  for (const auto& [name, c] : cs) {
    std::set<model::EdgeId> keep;
    for (const auto& e : common) {
      if (c.contains(e)) keep.insert(e);
    }
    common = std::move(keep);
  }
  const auto inter = circuits::make_circuit(std::move(common), "intersection");
  const auto rows = circuits::connection_ratio(inter, lm.params.config);
  const fs::path dir = ctx.out / "circuit";
  circuits::write_circuit(inter, dir / "intersection.json");
  circuits::write_ratio_csv(rows, dir / "ratio.csv");
  std::cout << "intersection of " << cs.size() << " circuits: " << inter.edges.size() << " edges → "
            << (dir / "ratio.csv").string() << "\n";
  write_manifest(ctx, "circuit-ratio", {{"circuits", cs.size()}}, {model_path},
                 {dir / "intersection.json", dir / "ratio.csv"});
  return kOk;
}

// ---------------------------------------------------------------- ablate

struct AblateFlags {
  std::string model_path, data_path, profile_data;
  std::string mode = "zero";
  std::size_t n = 50;
  double alpha = 0.05;
  std::string select_subset = "gender_prediction_based_on_stereo";
  std::string factual_subsets =
      "gender_prediction_based_on_pronoun,gender_prediction_based_on_name,gender_prediction_based_on_lex";
  std::string datasets = "stereo,factual";
  std::vector<std::string> external;
  std::string positions = "all";
};

attribution::NeuronSet top_set(const Context& ctx, const std::string& subset, std::size_t n) {
  const fs::path p = ctx.out / "attr" / ("neurons_" + subset + ".csv");
  require_file(p, "neuron scores for " + subset);
  const auto s = attribution::read_neuron_scores(p);
  if (n > s.scores.size()) throw UsageError("--n exceeds the number of neurons");
  return attribution::to_set(attribution::top_k(s, n));
}

/// "stereo" and "factual" group the candidate-bearing subsets by assumption; anything else is a subset key.
gknow::Dataset eval_group(const gknow::Dataset& all, const std::string& name) {
  if (name != "stereo" && name != "factual") return only_subset(all, name);
  gknow::Dataset out;
  for (const auto& ex : all) {
    if (!ex.subset || !ex.neutral_output || !ex.opposite_output) continue;
    if ((ex.subset->assumption == gknow::Kind::kStereo) == (name == "stereo")) out.push_back(ex);
  }
  if (out.empty()) throw UsageError("no candidate-augmented examples for group '" + name + "'");
  return out;
}

int cmd_ablate(const Context& ctx, const AblateFlags& f) {
  const auto mode = evalx::parse_ablation_mode(f.mode);
  const auto lm = load_model(f.model_path);
  const auto& cfg = lm.params.config;
  const auto& tok = tokenizer(ctx);
  std::vector<fs::path> inputs = {f.model_path, f.data_path};

  attribution::NeuronSet neurons;
  switch (mode) {
    case evalx::AblationMode::kZero:
    case evalx::AblationMode::kMean:
      neurons = top_set(ctx, f.select_subset, f.n);
      break;
    case evalx::AblationMode::kRandom:
      neurons = evalx::random_neurons(cfg, f.n, ctx.seed);
      break;
    case evalx::AblationMode::kStereoOnly: {
      neurons = top_set(ctx, f.select_subset, f.n);
      for (const auto& s : split_list(f.factual_subsets)) {
        neurons = attribution::neuron_set_ops(neurons, top_set(ctx, s, f.n)).difference;
      }
      break;
    }
  }

  evalx::AblationOptions opt;
  opt.mode = mode;
  opt.alpha = f.alpha;
  opt.jobs = ctx.jobs;
  if (f.positions == "all") {
    opt.positions = model::ClampPositions::kAll;
  } else if (f.positions == "final") {
    opt.positions = model::ClampPositions::kFinal;
  } else {
    throw UsageError("--positions must be all or final");
  }
  const fs::path dir = ctx.out / "ablate";
  const std::string stem = f.mode + "_n" + std::to_string(f.n);
  std::vector<fs::path> outs;
  evalx::MeanProfile profile;
  if (mode == evalx::AblationMode::kMean) {
    const auto pdata = read_dataset(f.profile_data);
    std::vector<std::vector<std::size_t>> seqs;
    for (const auto& ex : pdata) seqs.push_back(training::encode(ex.prompt, lm.vocab, tok));
    profile = evalx::mean_activation_profile(lm.params, seqs);
    opt.profile = &profile;
    evalx::write_profile(profile, dir / "profile.json");
    outs.push_back(dir / "profile.json");
    inputs.push_back(f.profile_data);
  }

  const auto all = read_dataset(f.data_path);
  std::vector<evalx::MetricsReport> reports;
  for (const auto& g : split_list(f.datasets)) {
    const auto items = evalx::encode_eval_items(eval_group(all, g), lm.vocab, tok);
    reports.push_back(evalx::ablate_and_eval(lm.params, neurons, items, "gknow_" + g, opt));
  }
  json term_gaps = json::object();
  const auto iv = evalx::ablation_interventions(neurons, opt);
  for (const auto& ext : f.external) {
    require_file(ext, "external eval set");
    inputs.emplace_back(ext);
    const auto set = evalx::load_external_evalset(ext);
    const std::string name = fs::path(ext).stem().string();
    std::cout << name << ": " << set.entries.size() << " of " << set.total << " entries kept (" << set.rejected
              << " with a non-final mask)\n";
    const auto items = evalx::external_items(set, lm.vocab, tok);
    if (!items.empty()) reports.push_back(evalx::ablate_and_eval(lm.params, neurons, items, name, opt));
    const auto terms = evalx::external_term_items(set, lm.vocab, tok);
    if (!terms.empty()) {
      double before = 0.0, after = 0.0;
      for (const auto& t : terms) {
        before += evalx::delta_gap_termlists(lm.params, t.tokens, t.feminine, t.masculine);
        after += evalx::delta_gap_termlists(lm.params, t.tokens, t.feminine, t.masculine, iv);
      }
      const double n = static_cast<double>(terms.size());
      term_gaps[name] = {{"n", terms.size()}, {"baseline", before / n}, {"ablated", after / n}};
    }
  }

  json meta;
  meta["manifest"] = manifest_name("ablate-" + stem);
  meta["mode"] = f.mode;
  meta["n_requested"] = f.n;
  meta["selection_subset"] = f.select_subset;
  meta["seed"] = ctx.seed;
  auto& ns = meta["neurons"] = json::array();
  for (const auto& n : neurons) ns.push_back({n.layer, n.index});
  if (!term_gaps.empty()) meta["termlist_delta"] = term_gaps;
  evalx::write_report_json(reports, meta, dir / (stem + ".json"));
  evalx::write_report_csv(reports, dir / (stem + ".csv"));
  outs.push_back(dir / (stem + ".json"));
  outs.push_back(dir / (stem + ".csv"));
  for (const auto& r : reports) {
    const auto& p = r.row("P_exp");
    std::cout << r.dataset << ": P_exp " << compute::format_double(p.baseline) << " → "
              << compute::format_double(p.ablated) << " " << p.arrow << (p.significant ? " *" : "") << "\n";
  }
  write_manifest(ctx, "ablate-" + stem,
                 {{"mode", f.mode}, {"n", f.n}, {"alpha", f.alpha}, {"datasets", f.datasets},
                  {"selection_subset", f.select_subset}, {"positions", f.positions}},
                 inputs, outs);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gklab: gender knowledge circuits and neurons in a small transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  Context ctx;
  std::string out_dir = default_out().string();
  app.add_option("--out", out_dir, "Output directory (default $GKNOW_LAB_OUT or ./gklab_out)");
  app.add_option("--seed", ctx.seed, "Random seed")->capture_default_str();
  app.add_option("--jobs", ctx.jobs, "Worker threads for per-example work")->capture_default_str();
  app.add_option("--lexicon", ctx.lexicon, "Lexicon TSV (default: shipped data)");
  app.add_option("--templates", ctx.templates, "Template TSV (default: shipped data)");
  std::function<int()> run;

  // gknow
  auto* gk = app.add_subcommand("gknow", "Build the GKnow dataset");
  gk->require_subcommand(1);
  bool full = false;
  std::size_t train_cap = 200, test_cap = 20;
  auto* gen = gk->add_subcommand("gen", "Generate the dataset (small split by default)");
  gen->add_flag("--full", full, "Write the full cross product instead of the split");
  gen->add_flag("--small", "Write the capped train/test split (default)");
  gen->add_option("--train-cap", train_cap)->capture_default_str();
  gen->add_option("--test-cap", test_cap)->capture_default_str();
  gen->callback([&] { run = [&] { return cmd_gknow_gen(ctx, full, train_cap, test_cap); }; });
  std::string split_input;
  auto* spl = gk->add_subcommand("split", "Split a full dataset file");
  spl->add_option("--input", split_input)->required();
  spl->add_option("--train-cap", train_cap)->capture_default_str();
  spl->add_option("--test-cap", test_cap)->capture_default_str();
  spl->callback([&] { run = [&] { return cmd_gknow_split(ctx, split_input, train_cap, test_cap); }; });
  std::vector<std::string> aug_inputs;
  auto* aug = gk->add_subcommand("augment", "Add counterfactuals and candidates (writes <stem>.aug.jsonl)");
  aug->add_option("--input", aug_inputs, "Files to augment (default: train and test split)");
  aug->callback([&] { run = [&] { return cmd_gknow_augment(ctx, aug_inputs); }; });

  // train
  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "Train the toy transformer");
  tr->add_option("--train", tf.train_path, "Augmented train split (default <out>/gknow/train.aug.jsonl)");
  tr->add_option("--test", tf.test_path, "Augmented test split (default <out>/gknow/test.aug.jsonl)");
  tr->add_option("--epochs", tf.cfg.epochs)->capture_default_str();
  tr->add_option("--batch", tf.cfg.batch_size)->capture_default_str();
  tr->add_option("--lr", tf.cfg.learning_rate)->capture_default_str();
  tr->add_option("--layers", tf.cfg.model.n_layers)->capture_default_str();
  tr->add_option("--heads", tf.cfg.model.n_heads)->capture_default_str();
  tr->add_option("--d-model", tf.cfg.model.d_model)->capture_default_str();
  tr->add_option("--d-head", tf.cfg.model.d_head)->capture_default_str();
  tr->add_option("--d-ff", tf.cfg.model.d_ff)->capture_default_str();
  tr->add_option("--max-seq-len", tf.cfg.model.max_seq_len)->capture_default_str();
  tr->callback([&] { run = [&] { return cmd_train(ctx, tf); }; });

  // attr
  std::string model_path, data_path, subset, loss = "logit_diff", positions = "final", target = "probability";
  std::size_t m = 5, steps = 20, top = 50;
  auto* at = app.add_subcommand("attr", "Edge and neuron attribution");
  at->require_subcommand(1);
  auto* ae = at->add_subcommand("edges", "EAP-IG edge scores");
  ae->add_option("--model", model_path, "Checkpoint (default <out>/model/model.ckpt)");
  ae->add_option("--data", data_path, "Augmented dataset (default <out>/gknow/train.aug.jsonl)");
  ae->add_option("--subset", subset, "Subset key, e.g. gender_prediction_based_on_stereo")->required();
  ae->add_option("--m", m, "Interpolation steps")->capture_default_str();
  ae->add_option("--loss", loss, "logit_diff or cross_entropy")->capture_default_str();
  ae->callback([&] { run = [&] { return cmd_attr_edges(ctx, model_path, data_path, subset, m, loss); }; });
  auto* an = at->add_subcommand("neurons", "Integrated-gradients neuron scores");
  an->add_option("--model", model_path, "Checkpoint (default <out>/model/model.ckpt)");
  an->add_option("--data", data_path, "Dataset (default <out>/gknow/train.aug.jsonl)");
  an->add_option("--subset", subset, "Subset key")->required();
  an->add_option("--steps", steps, "Riemann steps")->capture_default_str();
  an->add_option("--top", top, "Also write the top-k ranking (0 to skip)")->capture_default_str();
  an->add_option("--positions", positions, "final or all")->capture_default_str();
  an->add_option("--target", target, "probability or logit")->capture_default_str();
  an->callback([&] {
    run = [&] { return cmd_attr_neurons(ctx, model_path, data_path, subset, steps, top, positions, target); };
  });

  // circuit
  std::string scores_path, grid_text;
  double threshold = 0.8;
  std::vector<std::string> circuit_files;
  auto* ci = app.add_subcommand("circuit", "Circuit discovery and comparison");
  ci->require_subcommand(1);
  auto* cf = ci->add_subcommand("find", "Smallest faithful top-n circuit");
  cf->add_option("--model", model_path);
  cf->add_option("--data", data_path, "Augmented dataset (default <out>/gknow/test.aug.jsonl)");
  cf->add_option("--subset", subset)->required();
  cf->add_option("--scores", scores_path, "Edge scores (default <out>/attr/edges_<subset>.csv)");
  cf->add_option("--threshold", threshold)->capture_default_str();
  cf->add_option("--grid", grid_text, "Ascending comma list (default powers of two from 8, then all edges)");
  cf->callback([&] {
    run = [&] { return cmd_circuit_find(ctx, model_path, data_path, subset, scores_path, threshold, grid_text); };
  });
  auto* cio = ci->add_subcommand("iou", "Pairwise edge and node Jaccard");
  cio->add_option("--circuits", circuit_files, "Circuit files (default <out>/circuit/graphs/*.json)");
  cio->callback([&] { run = [&] { return cmd_circuit_iou(ctx, circuit_files); }; });
  auto* cc = ci->add_subcommand("cross", "Cross-task faithfulness matrix");
  cc->add_option("--model", model_path);
  cc->add_option("--data", data_path, "Augmented dataset (default <out>/gknow/test.aug.jsonl)");
  cc->add_option("--circuits", circuit_files);
  cc->callback([&] { run = [&] { return cmd_circuit_cross(ctx, model_path, data_path, circuit_files); }; });
  auto* cr = ci->add_subcommand("ratio", "Connection ratio of the intersection circuit");
  cr->add_option("--model", model_path);
  cr->add_option("--circuits", circuit_files);
  cr->callback([&] { run = [&] { return cmd_circuit_ratio(ctx, model_path, circuit_files); }; });

  // ablate
  AblateFlags af;
  auto* ab = app.add_subcommand("ablate", "Neuron ablation reports");
  ab->add_option("--model", af.model_path);
  ab->add_option("--data", af.data_path, "Evaluation split (default <out>/gknow/test.aug.jsonl)");
  ab->add_option("--mode", af.mode, "zero, mean, random or stereo-only")->capture_default_str();
  ab->add_option("--n", af.n, "Neurons to ablate")->capture_default_str();
  ab->add_option("--alpha", af.alpha)->capture_default_str();
  ab->add_option("--select-subset", af.select_subset, "Subset whose IG ranking selects neurons")
      ->capture_default_str();
  ab->add_option("--factual-subsets", af.factual_subsets, "Rankings removed in stereo-only mode")
      ->capture_default_str();
  ab->add_option("--datasets", af.datasets, "stereo, factual or subset keys")->capture_default_str();
  ab->add_option("--external", af.external, "External JSONL eval sets");
  ab->add_option("--profile-data", af.profile_data, "Mean-profile data (default <out>/gknow/train.aug.jsonl)");
  ab->add_option("--positions", af.positions, "all or final")->capture_default_str();
  ab->callback([&] { run = [&] { return cmd_ablate(ctx, af); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  ctx.out = out_dir;
  const auto dflt = [&](std::string& v, const fs::path& p) {
    if (v.empty()) v = p.string();
  };
  dflt(tf.train_path, ctx.out / "gknow" / "train.aug.jsonl");
  dflt(tf.test_path, ctx.out / "gknow" / "test.aug.jsonl");
  dflt(model_path, ctx.out / "model" / "model.ckpt");
  dflt(af.model_path, ctx.out / "model" / "model.ckpt");
  dflt(af.data_path, ctx.out / "gknow" / "test.aug.jsonl");
  dflt(af.profile_data, ctx.out / "gknow" / "train.aug.jsonl");
  const bool eval_split = cf->parsed() || cc->parsed();
  dflt(data_path, ctx.out / "gknow" / (eval_split ? "test.aug.jsonl" : "train.aug.jsonl"));

  try {
    return run();
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const gknow::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const model::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const evalx::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
