#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "gklab/compute/rng.hpp"
#include "gklab/model/transformer.hpp"

namespace testing_support {

using gklab::compute::Rng;
using gklab::compute::Tensor;
using gklab::model::ModelConfig;
using gklab::model::Parameters;

inline ModelConfig small_config(std::size_t layers = 2, std::size_t heads = 2) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = 8;
  cfg.d_head = 4;
  cfg.d_ff = 12;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 8;
  return cfg;
}

inline Parameters random_params(const ModelConfig& cfg, std::uint64_t seed) {
  return Parameters::init(cfg, Rng(seed));
}

inline std::vector<std::size_t> random_tokens(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<std::size_t> t(n);
  for (auto& x : t) x = static_cast<std::size_t>(rng.below(vocab));
  return t;
}

inline Tensor random_tensor(gklab::compute::Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * (rng.uniform() * 2.0 - 1.0);
  return t;
}

inline double rel_err(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

}  // namespace testing_support
