#include "pearl/backbone.hpp"

#include <cmath>
#include <string>

#include "pearl/error.hpp"
#include "pearl/serialize.hpp"

namespace pearl {

void BackboneConfig::validate() const {
  if (num_blocks == 0 || d == 0 || num_heads == 0 || input_dim == 0 || mlp_ratio == 0) {
    throw ConfigError("backbone: dimensions must be positive");
  }
  if (d % num_heads != 0) {
    throw ConfigError("backbone: d=" + std::to_string(d) + " not divisible by num_heads=" +
                      std::to_string(num_heads));
  }
  if (seq_len < 2) throw ConfigError("backbone: seq_len must leave room for input tokens");
  if (prefix_blocks > num_blocks) {
    throw ConfigError("backbone: prefix_blocks exceeds num_blocks");
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"num_blocks", c.num_blocks}, {"d", c.d},
       {"num_heads", c.num_heads},   {"seq_len", c.seq_len},
       {"prefix_blocks", c.prefix_blocks}, {"input_dim", c.input_dim},
       {"mlp_ratio", c.mlp_ratio},   {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.d = j.value("d", c.d);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.seq_len = j.value("seq_len", c.seq_len);
  c.prefix_blocks = j.value("prefix_blocks", c.prefix_blocks);
  c.input_dim = j.value("input_dim", c.input_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.seed = j.value("seed", c.seed);
}

Backbone Backbone::init(const BackboneConfig& cfg) {
  cfg.validate();
  Backbone b;
  b.cfg_ = cfg;
  std::mt19937_64 rng(cfg.seed);
  const std::size_t tokens = cfg.seq_len - 1;
  b.patch_weight_ = Tensor::randn({cfg.input_dim, tokens * cfg.d},
                                  1.0 / std::sqrt(static_cast<double>(cfg.input_dim)), rng);
  b.patch_bias_ = Tensor::randn({tokens, cfg.d}, 0.5, rng);
  b.class_token_ = Tensor::randn({1, cfg.d}, 1.0, rng);
  for (std::size_t i = 0; i < cfg.num_blocks; ++i) {
    b.blocks_.push_back(TransformerBlock::init(cfg.d, cfg.num_heads, cfg.mlp_ratio, rng, false));
  }
  b.final_norm_ = LayerNorm::init(cfg.d, false);
  return b;
}

Backbone Backbone::from_snapshot(const std::filesystem::path& manifest) {
  const Snapshot snap = load_snapshot(manifest);
  BackboneConfig cfg = snap.meta.at("config").get<BackboneConfig>();
  Backbone b = init(cfg);
  for (auto& [name, t] : b.named_weights()) {
    const Tensor& src = snap.at(name);
    if (src.shape() != t.shape()) throw ParseError("backbone snapshot: shape mismatch for " + name);
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
  return b;
}

NamedTensors Backbone::named_weights() const {
  NamedTensors out{{"patch.weight", patch_weight_},
                   {"patch.bias", patch_bias_},
                   {"class_token", class_token_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto named = blocks_[i].named_parameters("block" + std::to_string(i) + ".");
    out.insert(out.end(), named.begin(), named.end());
  }
  out.emplace_back("final_norm.gain", final_norm_.gain);
  out.emplace_back("final_norm.shift", final_norm_.shift);
  return out;
}

void Backbone::save(const std::filesystem::path& manifest) const {
  save_snapshot(manifest, named_weights(), {{"config", cfg_}});
}

Tensor Backbone::embed_input(std::span<const double> x) const {
  if (x.size() != cfg_.input_dim) {
    throw DimensionError("embed_input: expected " + std::to_string(cfg_.input_dim) +
                         " features, got " + std::to_string(x.size()));
  }
  return embed_batch(Tensor::from_data({1, x.size()}, {x.begin(), x.end()}));
}

Tensor Backbone::embed_batch(const Tensor& x) const {
  if (x.dim() != 2 || x.size(1) != cfg_.input_dim) {
    throw DimensionError("embed_batch: expected [B x " + std::to_string(cfg_.input_dim) +
                         "], got " + shape_str(x.shape()));
  }
  // Inputs carry no grad and the weights are frozen, so no graph is needed.
  const std::size_t batch = x.size(0);
  const std::size_t d = cfg_.d, s = cfg_.seq_len;
  const std::size_t width = (s - 1) * d;
  auto xd = x.data();
  auto w = patch_weight_.data();
  auto bias = patch_bias_.data();
  auto cls = class_token_.data();
  std::vector<double> out(batch * s * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    double* sample = out.data() + b * s * d;
    std::copy(cls.begin(), cls.end(), sample);
    double* tokens = sample + d;
    std::copy(bias.begin(), bias.end(), tokens);
    for (std::size_t i = 0; i < cfg_.input_dim; ++i) {
      const double xi = xd[b * cfg_.input_dim + i];
      const double* wrow = w.data() + i * width;
      for (std::size_t j = 0; j < width; ++j) tokens[j] += xi * wrow[j];
    }
  }
  return Tensor::from_data({batch * s, d}, std::move(out));
}

Tensor Backbone::forward_features(std::span<const double> x,
                                  const std::vector<PrefixPair>& prefixes) const {
  if (x.size() != cfg_.input_dim) {
    throw DimensionError("forward_features: expected " + std::to_string(cfg_.input_dim) +
                         " features, got " + std::to_string(x.size()));
  }
  const Tensor f = forward_batch(Tensor::from_data({1, x.size()}, {x.begin(), x.end()}), prefixes);
  return reshape(f, {cfg_.d});
}

Tensor Backbone::forward_batch(const Tensor& x, const std::vector<PrefixPair>& prefixes) const {
  if (prefixes.size() != cfg_.prefix_blocks) {
    throw ContractError("forward: expected " + std::to_string(cfg_.prefix_blocks) +
                        " prefix pairs, got " + std::to_string(prefixes.size()));
  }
  for (const auto& p : prefixes) {
    if (!p.empty() && (p.key.dim() != 2 || p.key.size(1) != cfg_.d)) {
      throw DimensionError("forward: prefix width does not match d");
    }
  }
  const std::size_t batch = x.size(0);
  Tensor h = embed_batch(x);
  const std::size_t first_prefixed = cfg_.num_blocks - cfg_.prefix_blocks;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const PrefixPair none;
    const PrefixPair& prefix = i >= first_prefixed ? prefixes[i - first_prefixed] : none;
    h = blocks_[i].forward(h, batch, prefix);
  }
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * cfg_.seq_len;
  return final_norm_.forward(gather_rows(h, cls_rows));
}

Tensor prefix_attention(const MultiHeadAttention& attn, const Tensor& h, const PrefixPair& prefix) {
  if (h.dim() != 2) throw DimensionError("prefix_attention: h must be [s x d]");
  if (!prefix.empty() && (prefix.key.dim() != 2 || prefix.key.size(1) != h.size(1))) {
    throw DimensionError("prefix_attention: prefix width " + shape_str(prefix.key.shape()) +
                         " does not match h " + shape_str(h.shape()));
  }
  return attn.forward(h, 1, prefix);
}

}  // namespace pearl
