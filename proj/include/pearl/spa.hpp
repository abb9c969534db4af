#pragma once

// Sequential prompt adaptation: a prompt pool partitioned across sessions,
// a session-shared transformer encoder that reads the pool as a sequence
// behind a learnable prompt token, and a segmented positional encoding
// that gives every session's pool rows one shared code.

#include <cstdint>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "pearl/transformer.hpp"

namespace pearl {

struct SpaConfig {
  std::size_t pool_size = 20;     // M
  std::size_t num_sessions = 5;   // N
  std::size_t prompt_length = 4;  // H
  std::size_t depth = 2;          // L
  std::size_t num_heads = 4;
  std::size_t mlp_ratio = 4;
  double pool_init_std = 1.0;
  std::uint64_t seed = 11;

  std::size_t rows_per_session() const { return pool_size / num_sessions; }
  void validate(std::size_t d) const;

  // M=100, L=2, H=4.
  static SpaConfig full_preset(std::size_t num_sessions);
};

void to_json(nlohmann::json& j, const SpaConfig& c);
void from_json(const nlohmann::json& j, SpaConfig& c);

// 1-based inclusive pool rows that are learnable in session t.
struct PoolRange {
  std::size_t first;
  std::size_t last;
  bool operator==(const PoolRange&) const = default;
};

PoolRange learnable_slice(std::size_t session, std::size_t pool_size, std::size_t num_sessions);

// SPE(pos, 2j) = sin(floor(pos / seg) / 10000^(2j/d)), SPE(pos, 2j+1) = cos(...).
Tensor spe_encode(std::size_t pos, std::size_t segment_size, std::size_t d);

class PromptPool {
 public:
  PromptPool(const SpaConfig& cfg, std::size_t d, std::mt19937_64& rng);

  // Marks the session's slice learnable and everything else frozen.
  void begin_session(std::size_t session);
  std::size_t active_session() const { return session_; }

  const Tensor& prompts() const { return prompts_; }
  const std::vector<bool>& learnable_mask() const { return mask_; }
  std::size_t size() const { return pool_size_; }
  std::size_t num_sessions() const { return num_sessions_; }
  std::size_t rows_per_session() const { return pool_size_ / num_sessions_; }

  // Zeroes gradient rows outside the active slice. Call before each step.
  void mask_frozen_grads();

 private:
  std::size_t pool_size_;
  std::size_t num_sessions_;
  std::size_t session_ = 0;
  Tensor prompts_;  // [M x d]
  std::vector<bool> mask_;
};

class PromptEncoder {
 public:
  PromptEncoder(const SpaConfig& cfg, std::size_t d, std::mt19937_64& rng);

  const Tensor& prompt_token() const { return prompt_token_; }
  const std::vector<TransformerBlock>& blocks() const { return blocks_; }
  std::size_t prompt_length() const { return prompt_length_; }
  std::size_t depth() const { return blocks_.size(); }
  std::size_t width() const { return d_; }

  std::vector<Tensor> parameters() const;
  NamedTensors named_parameters() const;

 private:
  std::size_t prompt_length_;
  std::size_t d_;
  Tensor prompt_token_;  // [H x d]
  std::vector<TransformerBlock> blocks_;
};

// The stack of prompt tokens, one [H x d] slab per encoder block.
struct EncodedPrompts {
  Tensor tokens;  // [L x H x d]

  std::size_t depth() const { return tokens.size(0); }
  Tensor layer(std::size_t i) const;
};

// ConCat(prompt token, pool[1 : (M/N)t]) plus the segmented positional code.
Tensor build_encoder_input(const PromptPool& pool, const PromptEncoder& encoder,
                           std::size_t session);
EncodedPrompts encode_prompts(const PromptPool& pool, const PromptEncoder& encoder,
                              std::size_t session);

// Two linear maps, shared by every encoder depth and every session, that
// turn each prompt-token slab into the (key, value) prefix for one block.
class PrefixProjector {
 public:
  PrefixProjector(std::size_t d, std::mt19937_64& rng);

  std::vector<PrefixPair> to_prefixes(const EncodedPrompts& prompts) const;
  std::vector<Tensor> parameters() const;
  NamedTensors named_parameters() const;
  // Independent copy that does not require grad.
  PrefixProjector frozen_copy() const;
  // Stops gradient flow into the shared maps from now on.
  void freeze();
  bool frozen() const { return !key_map_.weight.requires_grad(); }

  const Linear& key_map() const { return key_map_; }
  const Linear& value_map() const { return value_map_; }

 private:
  PrefixProjector() = default;
  Linear key_map_;
  Linear value_map_;
};

}  // namespace pearl
