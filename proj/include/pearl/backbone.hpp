#pragma once

// Frozen transformer encoder that turns a flat feature vector into a single
// d-dimensional feature (the class-token output). Its trailing
// `prefix_blocks` blocks accept prefix key/value rows, which is the only way
// learnable state reaches it.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/transformer.hpp"

namespace pearl {

struct BackboneConfig {
  std::size_t num_blocks = 4;
  std::size_t d = 32;
  std::size_t num_heads = 4;
  std::size_t seq_len = 9;  // including the class token
  std::size_t prefix_blocks = 2;
  std::size_t input_dim = 16;
  std::size_t mlp_ratio = 4;
  std::uint64_t seed = 7;

  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

class Backbone {
 public:
  static Backbone init(const BackboneConfig& cfg);
  static Backbone from_snapshot(const std::filesystem::path& manifest);

  const BackboneConfig& config() const { return cfg_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }

  // One input -> [seq_len x d]: class token then seq_len-1 projected tokens.
  Tensor embed_input(std::span<const double> x) const;
  // [B x input_dim] -> [B*seq_len x d], samples contiguous.
  Tensor embed_batch(const Tensor& x) const;

  // prefixes.size() must equal prefix_blocks; the i-th pair feeds the i-th
  // trailing block. Empty pairs mean "no prefix" for that block.
  Tensor forward_features(std::span<const double> x, const std::vector<PrefixPair>& prefixes) const;
  // [B x input_dim] -> [B x d]
  Tensor forward_batch(const Tensor& x, const std::vector<PrefixPair>& prefixes) const;

  NamedTensors named_weights() const;
  void save(const std::filesystem::path& manifest) const;

 private:
  BackboneConfig cfg_;
  Tensor patch_weight_;  // [input_dim x (seq_len-1)*d]
  Tensor patch_bias_;    // [(seq_len-1) x d]
  Tensor class_token_;   // [1 x d]
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_norm_;
};

// Self-attention of h [s x d] with the prefix rows ahead of h's own keys and
// values; queries come from h only.
Tensor prefix_attention(const MultiHeadAttention& attn, const Tensor& h, const PrefixPair& prefix);

}  // namespace pearl
