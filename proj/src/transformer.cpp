#include "pearl/transformer.hpp"

#include <cmath>

namespace pearl {

Linear Linear::init(std::size_t in, std::size_t out, std::mt19937_64& rng, bool learnable) {
  Linear l;
  l.weight = Tensor::randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng, learnable);
  l.bias = Tensor::zeros({out}, learnable);
  return l;
}

Tensor Linear::forward(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

LayerNorm LayerNorm::init(std::size_t width, bool learnable) {
  return {Tensor::full({width}, 1.0, learnable), Tensor::zeros({width}, learnable)};
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain, shift); }

MultiHeadAttention MultiHeadAttention::init(std::size_t d, std::size_t heads,
                                            std::mt19937_64& rng, bool learnable) {
  MultiHeadAttention m;
  m.query = Linear::init(d, d, rng, learnable);
  m.key = Linear::init(d, d, rng, learnable);
  m.value = Linear::init(d, d, rng, learnable);
  m.output = Linear::init(d, d, rng, learnable);
  m.heads = heads;
  return m;
}

Tensor MultiHeadAttention::forward(const Tensor& h, std::size_t batch,
                                   const PrefixPair& prefix) const {
  const Tensor q = query.forward(h);
  const Tensor k = key.forward(h);
  const Tensor v = value.forward(h);
  return output.forward(attention(q, k, v, prefix.key, prefix.value, batch, heads));
}

TransformerBlock TransformerBlock::init(std::size_t d, std::size_t heads, std::size_t mlp_ratio,
                                        std::mt19937_64& rng, bool learnable) {
  TransformerBlock b;
  b.norm1 = LayerNorm::init(d, learnable);
  b.attn = MultiHeadAttention::init(d, heads, rng, learnable);
  b.norm2 = LayerNorm::init(d, learnable);
  b.fc1 = Linear::init(d, d * mlp_ratio, rng, learnable);
  b.fc2 = Linear::init(d * mlp_ratio, d, rng, learnable);
  return b;
}

Tensor TransformerBlock::forward(const Tensor& h, std::size_t batch,
                                 const PrefixPair& prefix) const {
  const Tensor x = add(h, attn.forward(norm1.forward(h), batch, prefix));
  return add(x, fc2.forward(gelu(fc1.forward(norm2.forward(x)))));
}

std::vector<Tensor> TransformerBlock::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters("")) out.push_back(t);
  return out;
}

NamedTensors TransformerBlock::named_parameters(const std::string& prefix) const {
  return {{prefix + "norm1.gain", norm1.gain},
          {prefix + "norm1.shift", norm1.shift},
          {prefix + "attn.query.weight", attn.query.weight},
          {prefix + "attn.query.bias", attn.query.bias},
          {prefix + "attn.key.weight", attn.key.weight},
          {prefix + "attn.key.bias", attn.key.bias},
          {prefix + "attn.value.weight", attn.value.weight},
          {prefix + "attn.value.bias", attn.value.bias},
          {prefix + "attn.output.weight", attn.output.weight},
          {prefix + "attn.output.bias", attn.output.bias},
          {prefix + "norm2.gain", norm2.gain},
          {prefix + "norm2.shift", norm2.shift},
          {prefix + "fc1.weight", fc1.weight},
          {prefix + "fc1.bias", fc1.bias},
          {prefix + "fc2.weight", fc2.weight},
          {prefix + "fc2.bias", fc2.bias}};
}

}  // namespace pearl
