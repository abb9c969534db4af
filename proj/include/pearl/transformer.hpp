#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "pearl/tensor.hpp"

namespace pearl {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool learnable);
  Tensor forward(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor shift;

  static LayerNorm init(std::size_t width, bool learnable);
  Tensor forward(const Tensor& x) const;
};

// Learnable key/value rows placed in front of an attention layer's own
// keys and values. Both are [H x d].
struct PrefixPair {
  Tensor key;
  Tensor value;

  bool empty() const { return !key.defined(); }
  std::size_t length() const { return empty() ? 0 : key.size(0); }
};

struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  static MultiHeadAttention init(std::size_t d, std::size_t heads, std::mt19937_64& rng,
                                 bool learnable);
  // h is [batch*seq x d]. An empty prefix gives plain self-attention.
  Tensor forward(const Tensor& h, std::size_t batch, const PrefixPair& prefix) const;
};

// Pre-norm transformer block: h + MSA(LN(h)), then h + MLP(LN(h)).
struct TransformerBlock {
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  Linear fc1;
  Linear fc2;

  static TransformerBlock init(std::size_t d, std::size_t heads, std::size_t mlp_ratio,
                               std::mt19937_64& rng, bool learnable);
  Tensor forward(const Tensor& h, std::size_t batch, const PrefixPair& prefix = {}) const;
  std::vector<Tensor> parameters() const;
  NamedTensors named_parameters(const std::string& prefix) const;
};

}  // namespace pearl
