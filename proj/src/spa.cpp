#include "pearl/spa.hpp"

#include <cmath>
#include <string>

#include "pearl/error.hpp"

namespace pearl {

void SpaConfig::validate(std::size_t d) const {
  if (pool_size == 0 || num_sessions == 0 || prompt_length == 0 || depth == 0 ||
      num_heads == 0 || mlp_ratio == 0) {
    throw ConfigError("spa: sizes must be positive");
  }
  if (pool_size % num_sessions != 0) {
    throw ConfigError("spa: pool_size=" + std::to_string(pool_size) +
                      " not divisible by num_sessions=" + std::to_string(num_sessions));
  }
  if (d % num_heads != 0) throw ConfigError("spa: d not divisible by num_heads");
}

SpaConfig SpaConfig::full_preset(std::size_t num_sessions) {
  SpaConfig c;
  c.pool_size = 100;
  c.num_sessions = num_sessions;
  c.prompt_length = 4;
  c.depth = 2;
  return c;
}

void to_json(nlohmann::json& j, const SpaConfig& c) {
  j = {{"pool_size", c.pool_size},     {"num_sessions", c.num_sessions},
       {"prompt_length", c.prompt_length}, {"depth", c.depth},
       {"num_heads", c.num_heads},     {"mlp_ratio", c.mlp_ratio},
       {"pool_init_std", c.pool_init_std}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SpaConfig& c) {
  c.pool_size = j.value("pool_size", c.pool_size);
  c.num_sessions = j.value("num_sessions", c.num_sessions);
  c.prompt_length = j.value("prompt_length", c.prompt_length);
  c.depth = j.value("depth", c.depth);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.pool_init_std = j.value("pool_init_std", c.pool_init_std);
  c.seed = j.value("seed", c.seed);
}

PoolRange learnable_slice(std::size_t session, std::size_t pool_size, std::size_t num_sessions) {
  if (num_sessions == 0 || pool_size % num_sessions != 0) {
    throw ContractError("learnable_slice: pool size must split evenly across sessions");
  }
  if (session < 1 || session > num_sessions) {
    throw ContractError("learnable_slice: session " + std::to_string(session) +
                        " outside [1, " + std::to_string(num_sessions) + "]");
  }
  const std::size_t per = pool_size / num_sessions;
  return {per * (session - 1) + 1, per * session};
}

namespace {

std::vector<double> spe_for_segment(std::size_t segment, std::size_t d) {
  std::vector<double> code(d);
  const double seg = static_cast<double>(segment);
  for (std::size_t i = 0; i < d; ++i) {
    const std::size_t j = i / 2;
    const double angle =
        seg / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(d));
    code[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return code;
}

}  // namespace

Tensor spe_encode(std::size_t pos, std::size_t segment_size, std::size_t d) {
  if (segment_size == 0) throw ContractError("spe_encode: segment_size must be >= 1");
  return Tensor::from_data({d}, spe_for_segment(pos / segment_size, d));
}

PromptPool::PromptPool(const SpaConfig& cfg, std::size_t d, std::mt19937_64& rng)
    : pool_size_(cfg.pool_size),
      num_sessions_(cfg.num_sessions),
      prompts_(Tensor::randn({cfg.pool_size, d}, cfg.pool_init_std, rng, true)),
      mask_(cfg.pool_size, false) {}

void PromptPool::begin_session(std::size_t session) {
  const PoolRange r = learnable_slice(session, pool_size_, num_sessions_);
  session_ = session;
  for (std::size_t i = 0; i < pool_size_; ++i) mask_[i] = i + 1 >= r.first && i + 1 <= r.last;
}

void PromptPool::mask_frozen_grads() {
  if (!prompts_.has_grad()) return;
  auto g = prompts_.mutable_grad();
  const std::size_t d = prompts_.size(1);
  for (std::size_t i = 0; i < pool_size_; ++i) {
    if (mask_[i]) continue;
    std::fill(g.begin() + static_cast<std::ptrdiff_t>(i * d),
              g.begin() + static_cast<std::ptrdiff_t>((i + 1) * d), 0.0);
  }
}

PromptEncoder::PromptEncoder(const SpaConfig& cfg, std::size_t d, std::mt19937_64& rng)
    : prompt_length_(cfg.prompt_length), d_(d) {
  prompt_token_ = Tensor::randn({cfg.prompt_length, d}, 1.0, rng, true);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    blocks_.push_back(TransformerBlock::init(d, cfg.num_heads, cfg.mlp_ratio, rng, true));
  }
}

std::vector<Tensor> PromptEncoder::parameters() const {
  std::vector<Tensor> out{prompt_token_};
  for (const auto& b : blocks_) {
    auto p = b.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

NamedTensors PromptEncoder::named_parameters() const {
  NamedTensors out{{"encoder.prompt_token", prompt_token_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto named = blocks_[i].named_parameters("encoder.block" + std::to_string(i) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  return out;
}

Tensor EncodedPrompts::layer(std::size_t i) const {
  const Shape& s = tokens.shape();
  return reshape(slice(tokens, i, i + 1), {s[1], s[2]});
}

Tensor build_encoder_input(const PromptPool& pool, const PromptEncoder& encoder,
                           std::size_t session) {
  learnable_slice(session, pool.size(), pool.num_sessions());
  if (pool.active_session() != session) {
    throw ContractError("build_encoder_input: pool is not set up for session " +
                        std::to_string(session));
  }
  const std::size_t h = encoder.prompt_length();
  const std::size_t d = encoder.width();
  const std::size_t per = pool.rows_per_session();
  const std::size_t visible = per * session;
  const std::size_t rows = h + visible;

  // Prompt-token rows share segment 0; each session's pool rows share one
  // segment, 1..t in session order.
  std::vector<double> codes;
  codes.reserve(rows * d);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t segment = r < h ? 0 : 1 + (r - h) / per;
    const Tensor code = spe_encode(segment * per, per, d);
    codes.insert(codes.end(), code.data().begin(), code.data().end());
  }
  const Tensor sequence = concat({encoder.prompt_token(), slice(pool.prompts(), 0, visible)});
  return add(sequence, Tensor::from_data({rows, d}, std::move(codes)));
}

EncodedPrompts encode_prompts(const PromptPool& pool, const PromptEncoder& encoder,
                              std::size_t session) {
  const std::size_t h = encoder.prompt_length();
  const std::size_t d = encoder.width();
  Tensor x = build_encoder_input(pool, encoder, session);
  std::vector<Tensor> slabs;
  for (const auto& block : encoder.blocks()) {
    // The block output is ConCat([PT]_i, [SP]_i); it feeds the next block whole.
    x = block.forward(x, 1);
    slabs.push_back(reshape(slice(x, 0, h), {1, h, d}));
  }
  return {concat(slabs)};
}

PrefixProjector::PrefixProjector(std::size_t d, std::mt19937_64& rng)
    : key_map_(Linear::init(d, d, rng, true)), value_map_(Linear::init(d, d, rng, true)) {}

std::vector<PrefixPair> PrefixProjector::to_prefixes(const EncodedPrompts& prompts) const {
  std::vector<PrefixPair> out;
  out.reserve(prompts.depth());
  for (std::size_t i = 0; i < prompts.depth(); ++i) {
    const Tensor slab = prompts.layer(i);
    out.push_back({key_map_.forward(slab), value_map_.forward(slab)});
  }
  return out;
}

std::vector<Tensor> PrefixProjector::parameters() const {
  return {key_map_.weight, key_map_.bias, value_map_.weight, value_map_.bias};
}

NamedTensors PrefixProjector::named_parameters() const {
  return {{"prefix.key.weight", key_map_.weight},
          {"prefix.key.bias", key_map_.bias},
          {"prefix.value.weight", value_map_.weight},
          {"prefix.value.bias", value_map_.bias}};
}

void PrefixProjector::freeze() {
  for (auto& t : parameters()) t.set_requires_grad(false);
}

PrefixProjector PrefixProjector::frozen_copy() const {
  PrefixProjector p;
  p.key_map_ = {key_map_.weight.detach(), key_map_.bias.detach()};
  p.value_map_ = {value_map_.weight.detach(), value_map_.bias.detach()};
  return p;
}

}  // namespace pearl
