#include "gklab/training/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "gklab/compute/rng.hpp"
#include "gklab/model/checkpoint.hpp"

namespace gklab::training {

using model::ForwardOptions;
using model::LossKind;
using model::LossSpec;
using model::Parameters;

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(const std::vector<std::string>& tokens) {
  tokens_ = {kBosToken, kUnkToken};
  std::set<std::string> sorted(tokens.begin(), tokens.end());
  sorted.erase(kBosToken);
  sorted.erase(kUnkToken);
  tokens_.insert(tokens_.end(), sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], i);
}

std::size_t Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::size_t Vocab::require(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw model::VocabularyError("token '" + token + "' is not in the vocabulary");
  return it->second;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  auto tokens = j.get<std::vector<std::string>>();
  if (tokens.size() < 2 || tokens[0] != kBosToken || tokens[1] != kUnkToken) {
    throw model::VocabularyError("vocabulary must start with <bos>, <unk>");
  }
  Vocab v(tokens);
  if (v.tokens_ != tokens) throw model::VocabularyError("vocabulary tokens are not sorted and unique");
  return v;
}

Vocab build_vocab(const std::vector<std::string>& texts, const gknow::Tokenizer& tokenizer) {
  std::vector<std::string> all;
  for (const std::string& t : texts)
    for (std::string& tok : tokenizer.tokenize(t)) all.push_back(std::move(tok));
  return Vocab(all);
}

Vocab build_vocab(const std::vector<gknow::Dataset>& datasets, const gknow::Tokenizer& tokenizer) {
  std::vector<std::string> texts;
  for (const auto& ds : datasets) {
    for (const auto& ex : ds) {
      texts.push_back(ex.prompt);
      texts.push_back(ex.expected_output);
      for (const auto* opt : {&ex.opposite_output, &ex.neutral_output, &ex.corrupted_prompt})
        if (*opt) texts.push_back(**opt);
    }
  }
  return build_vocab(texts, tokenizer);
}

std::vector<std::size_t> encode(const std::string& prompt, const Vocab& vocab, const gknow::Tokenizer& tokenizer) {
  std::vector<std::size_t> out = {Vocab::kBos};
  for (const std::string& tok : tokenizer.tokenize(prompt)) out.push_back(vocab.id(tok));
  return out;
}

std::size_t output_id(const std::string& output, const Vocab& vocab, const gknow::Tokenizer& tokenizer) {
  const auto toks = tokenizer.tokenize(output);
  if (toks.size() != 1) {
    throw model::VocabularyError("output '" + output + "' is " + std::to_string(toks.size()) + " tokens, expected 1");
  }
  return vocab.require(toks[0]);
}

std::vector<Sequence> build_corpus(const gknow::Dataset& data, const Vocab& vocab, const gknow::Tokenizer& tokenizer,
                                   bool twins, const gknow::Dataset& exclude) {
  std::set<std::string> banned;
  for (const auto& ex : exclude) banned.insert(ex.prompt);
  std::vector<Sequence> out;
  for (const auto& ex : data) {
    out.push_back({encode(ex.prompt, vocab, tokenizer), output_id(ex.expected_output, vocab, tokenizer)});
  }
  if (twins) {
    for (const auto& ex : data) {
      if (!ex.corrupted_prompt || !ex.opposite_output || banned.contains(*ex.corrupted_prompt)) continue;
      out.push_back({encode(*ex.corrupted_prompt, vocab, tokenizer), output_id(*ex.opposite_output, vocab, tokenizer)});
    }
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || !(learning_rate > 0) || !(beta1 >= 0 && beta1 < 1) ||
      !(beta2 >= 0 && beta2 < 1) || !(epsilon > 0)) {
    throw model::ConfigError("training config: hyperparameters must be positive (betas in [0, 1))");
  }
  model.validate();
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"optimizer", {{"name", "adam"}, {"beta1", beta1}, {"beta2", beta2}, {"epsilon", epsilon}}},
          {"seed", seed},
          {"model", model::config_to_json(model)}};
}

double corpus_loss(const Parameters& params, const std::vector<Sequence>& corpus) {
  double total = 0.0;
  for (const auto& s : corpus) {
    auto tr = model::forward(params, s.tokens, {}, ForwardOptions{.final_logits_only = true});
    total += model::loss_value(tr, LossSpec{LossKind::kCrossEntropy, s.target, s.target});
  }
  return corpus.empty() ? 0.0 : total / static_cast<double>(corpus.size());
}

TrainResult train(const std::vector<Sequence>& corpus, const TrainConfig& cfg,
                  const std::function<void(std::size_t, double)>& on_epoch) {
  cfg.validate();
  if (corpus.empty()) throw TrainingError("training corpus is empty");
  for (const auto& s : corpus) {
    if (s.target >= cfg.model.vocab_size) {
      throw model::VocabularyError("target id " + std::to_string(s.target) + " outside vocabulary");
    }
  }
  const compute::Rng root(cfg.seed);
  TrainResult result{Parameters::init(cfg.model, root.split(1)), {}};
  Parameters& params = result.params;
  auto named = params.named_mut();
  std::vector<compute::Tensor> m, v, grad;
  for (const auto& [name, t] : named) {
    m.emplace_back(t->shape());
    v.emplace_back(t->shape());
    grad.emplace_back(t->shape());
  }

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  std::optional<LogRow> last_finite;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    compute::Rng shuffler = root.split(1000 + epoch);
    shuffler.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& g : grad) std::fill(g.data().begin(), g.data().end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const Sequence& s = corpus[order[i]];
        auto tr = model::forward(params, s.tokens, {}, ForwardOptions{.final_logits_only = true});
        const auto loss = model::record_loss(tr, LossSpec{LossKind::kCrossEntropy, s.target, s.target});
        batch_loss += tr.tape().value(loss).item();
        const auto grads = tr.tape().backward(loss, tr.parameter_ids());
        for (std::size_t k = 0; k < grad.size(); ++k) {
          const auto& gk = grads.at(tr.parameter_ids()[k]);
          auto dst = grad[k].data();
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += gk[j];
        }
      }
      batch_loss *= inv;
      ++step;
      if (!std::isfinite(batch_loss)) {
        std::ostringstream msg;
        msg << "training diverged at step " << step;
        if (last_finite) msg << "; last finite step " << last_finite->step << " had loss " << last_finite->loss;
        throw TrainingError(msg.str());
      }
      const double b1t = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double b2t = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (std::size_t k = 0; k < named.size(); ++k) {
        auto w = named[k].second->data();
        auto mk = m[k].data();
        auto vk = v[k].data();
        const auto gk = grad[k].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double g = gk[j] * inv;
          mk[j] = cfg.beta1 * mk[j] + (1.0 - cfg.beta1) * g;
          vk[j] = cfg.beta2 * vk[j] + (1.0 - cfg.beta2) * g * g;
          w[j] -= cfg.learning_rate * (mk[j] / b1t) / (std::sqrt(vk[j] / b2t) + cfg.epsilon);
        }
      }
      LogRow row{step, epoch, batch_loss};
      result.log.push_back(row);
      last_finite = row;
      epoch_loss += batch_loss * static_cast<double>(end - start);
    }
    if (on_epoch) on_epoch(epoch, epoch_loss / static_cast<double>(order.size()));
  }
  return result;
}

void write_log_csv(const std::vector<LogRow>& log, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,epoch,loss\n" << std::setprecision(17);
  for (const auto& r : log) os << r.step << ',' << r.epoch << ',' << r.loss << '\n';
}

int restricted_argmax(double p_expected, double p_opposite, double p_other) {
  if (p_expected >= p_opposite && p_expected >= p_other) return 0;
  if (p_opposite >= p_other) return 1;
  return 2;
}

std::map<std::string, SubsetAccuracy> evaluate_lm(const Parameters& params, const gknow::Dataset& split,
                                                  const Vocab& vocab, const gknow::Tokenizer& tokenizer) {
  std::map<std::string, std::pair<std::size_t, std::size_t>> hits;
  std::map<std::string, bool> restricted;
  for (const auto& ex : split) {
    const std::string key = ex.subset ? ex.subset->name() : "unknown";
    const auto toks = encode(ex.prompt, vocab, tokenizer);
    auto tr = model::forward(params, toks, {}, ForwardOptions{.final_logits_only = true});
    const auto p = model::predict_distribution(tr);
    const std::size_t e = output_id(ex.expected_output, vocab, tokenizer);
    bool win = false;
    if (ex.opposite_output && ex.neutral_output) {
      const std::size_t o = output_id(*ex.opposite_output, vocab, tokenizer);
      const std::size_t n = output_id(*ex.neutral_output, vocab, tokenizer);
      const double z = p[e] + p[o] + p[n];
      win = restricted_argmax(p[e] / z, p[o] / z, p[n] / z) == 0;
      restricted[key] = true;
    } else {
      win = std::max_element(p.begin(), p.end()) - p.begin() == static_cast<std::ptrdiff_t>(e);
      restricted.try_emplace(key, false);
    }
    auto& [n, k] = hits[key];
    ++n;
    k += win;
  }
  std::map<std::string, SubsetAccuracy> out;
  for (const auto& [key, nk] : hits) {
    out[key] = {nk.first, static_cast<double>(nk.second) / static_cast<double>(nk.first), restricted[key]};
  }
  return out;
}

}  // namespace gklab::training
