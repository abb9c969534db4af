#include "pearl/engine.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>

#include "pearl/error.hpp"
#include "pearl/optim.hpp"
#include "pearl/serialize.hpp"

namespace pearl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kEvalChunk = 256;

std::size_t projection_dim(const RunConfig& cfg) {
  return cfg.head.projection_dim == 0 ? 4 * cfg.backbone.d : cfg.head.projection_dim;
}

}  // namespace

void to_json(json& j, const RunReport& r) {
  json traces = json::array();
  for (std::size_t t = 0; t < r.alpha_traces.size(); ++t) {
    traces.push_back({{"session", t + 1}, {"iterations", r.alpha_traces[t].size()}});
  }
  j = {{"per_session_accuracy", r.per_session_accuracy},
       {"average_accuracy", r.average_accuracy},
       {"final_accuracy", r.final_accuracy},
       {"final_alpha", r.final_alpha},
       {"alpha_traces", traces},
       {"wall_times", r.wall_times},
       {"config", r.config}};
}

double average_accuracy(const std::vector<double>& per_session) {
  if (per_session.empty()) return 0.0;
  return std::accumulate(per_session.begin(), per_session.end(), 0.0) /
         static_cast<double>(per_session.size());
}

namespace {

std::mt19937_64 seeded(std::uint64_t seed) { return std::mt19937_64(seed); }

}  // namespace

Engine::Engine(const RunConfig& cfg)
    : cfg_(cfg),
      rng_(seeded(cfg.spa.seed ^ 0x5eed)),
      backbone_(Backbone::init(cfg.backbone)),
      pool_([&] {
        cfg.validate();
        auto r = seeded(cfg.spa.seed);
        return PromptPool(cfg.spa, cfg.backbone.d, r);
      }()),
      encoder_([&] {
        auto r = seeded(cfg.spa.seed + 1);
        return PromptEncoder(cfg.spa, cfg.backbone.d, r);
      }()),
      projector_([&] {
        auto r = seeded(cfg.spa.seed + 2);
        return PrefixProjector(cfg.backbone.d, r);
      }()),
      head_(AnalyticHead::init(cfg.backbone.d, projection_dim(cfg), cfg.head.seed, cfg.head.ridge)),
      alpha_(AlphaState::from_config(cfg.nka)) {
  if (cfg_.alpha_mode == AlphaMode::kFixed) {
    alpha_.alpha = alpha_.alpha0 = cfg_.fixed_alpha;
  }
}

Tensor Engine::features_in_batches(const Dataset& data,
                                   const std::vector<PrefixPair>& prefixes) const {
  NoGradGuard no_grad;
  std::vector<Tensor> chunks;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kEvalChunk) {
    const std::size_t end = std::min(data.size(), start + kEvalChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    chunks.push_back(backbone_.forward_batch(data.batch(idx), prefixes));
  }
  return concat(chunks);
}

Tensor Engine::committed_features(const Tensor& x) const {
  if (committed_ == 0) throw ProtocolError("no session has been committed yet");
  NoGradGuard no_grad;
  return backbone_.forward_batch(x, projector_.to_prefixes({memory_.prev_tokens}));
}

double Engine::evaluate(std::size_t session, const SessionStream& stream) const {
  if (session == 0 || session > committed_) {
    throw ProtocolError("evaluate: session " + std::to_string(session) + " is not committed");
  }
  const Dataset test = stream.cumulative_test(session);
  const std::size_t classes = stream.classes_per_session * session;
  NoGradGuard no_grad;
  const auto prefixes = projector_.to_prefixes({memory_.prev_tokens});
  const Eigen::MatrixXd logits = head_.logits_matrix(to_matrix(features_in_batches(test, prefixes)));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    // Scores restricted to the classes seen through `session`.
    Eigen::Index best = 0;
    logits.row(static_cast<Eigen::Index>(i)).head(static_cast<Eigen::Index>(classes)).maxCoeff(&best);
    if (static_cast<int>(best) == test.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

SessionMetrics Engine::run_session(std::size_t session, const SessionStream& stream) {
  if (session != committed_ + 1) {
    throw ProtocolError("run_session: expected session " + std::to_string(committed_ + 1) +
                        ", got " + std::to_string(session));
  }
  if (session > stream.num_sessions() || session > cfg_.spa.num_sessions) {
    throw ProtocolError("run_session: session " + std::to_string(session) + " beyond the stream");
  }
  if (stream.input_dim != cfg_.backbone.input_dim) {
    throw DimensionError("run_session: stream input_dim differs from the backbone's");
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t k = stream.classes_per_session;
  const Dataset& train = stream.train[session - 1];
  const int label_offset = static_cast<int>(k * (session - 1));
  const bool feedback = session >= 2;
  const bool adaptive = cfg_.alpha_mode == AlphaMode::kNka;

  pool_.begin_session(session);
  head_.begin_session();

  // Trainable probe for the cross-entropy path; the analytic head has no
  // gradient-trained parameters, so a fresh linear map over the session's
  // classes carries the loss to the prompts.
  const Linear probe = Linear::init(cfg_.backbone.d, k, rng_, true);

  std::vector<Tensor> params = encoder_.parameters();
  params.push_back(pool_.prompts());
  params.push_back(probe.weight);
  params.push_back(probe.bias);
  if (!projector_.frozen()) {
    for (const auto& p : projector_.parameters()) params.push_back(p);
  }
  Sgd opt(params, {cfg_.base_lr, cfg_.min_lr, static_cast<int>(cfg_.epochs), cfg_.momentum});

  // Previous-prompt logits depend only on the committed tokens, the frozen
  // backbone/maps and the head, none of which change during the session.
  Eigen::MatrixXd prev_logits;
  if (feedback) {
    const Tensor prev_features =
        features_in_batches(train, projector_.to_prefixes({memory_.prev_tokens}));
    prev_logits = head_.logits_matrix(to_matrix(prev_features));
  }

  alpha_.alpha = alpha_.alpha0;
  alpha_.tau = 0;

  SessionMetrics metrics;
  metrics.session = session;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
    opt.set_epoch(static_cast<int>(epoch));
    std::shuffle(order.begin(), order.end(), rng_);
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = train.batch(idx);
      std::vector<int> local(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) local[i] = train.labels[idx[i]] - label_offset;

      opt.zero_grad();
      const Tensor curr = encode_prompts(pool_, encoder_, session).tokens;
      Tensor features;
      if (!feedback) {
        features = backbone_.forward_batch(x, projector_.to_prefixes({curr}));
      } else {
        // Mixing uses alpha^{tau-1}; the divergence it produces sets alpha^tau.
        const Tensor mixed = mix_prompts(memory_, curr, alpha_.alpha);
        features = backbone_.forward_batch(x, projector_.to_prefixes({mixed}));
        const Eigen::MatrixXd l_t = head_.logits_matrix(to_matrix(features));
        Eigen::MatrixXd l_prev(static_cast<Eigen::Index>(idx.size()), prev_logits.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          l_prev.row(static_cast<Eigen::Index>(i)) = prev_logits.row(static_cast<Eigen::Index>(idx[i]));
        }
        const double mae = compute_mae(from_matrix(l_t), from_matrix(l_prev), alpha_.lambda, k, session);
        if (adaptive) {
          update_alpha(alpha_, mae);
        } else {
          ++alpha_.tau;
        }
        metrics.alpha_trace.push_back({alpha_.tau, mae, alpha_.alpha});
      }
      const Tensor loss = cross_entropy(probe.forward(features), local);
      loss.backward();
      pool_.mask_frozen_grads();
      opt.step();
      metrics.final_loss = loss.item();
      if (step_hook_) step_hook_(*this, session, step);
      ++step;
    }
  }

  {
    NoGradGuard no_grad;
    const Tensor curr = encode_prompts(pool_, encoder_, session).tokens;
    memory_.mem_tokens = feedback ? mix_prompts(memory_, curr, alpha_.alpha).detach() : curr.detach();
  }
  metrics.final_alpha = feedback ? alpha_.alpha : 0.0;
  if (session == 1) projector_.freeze();

  const Tensor final_features =
      features_in_batches(train, projector_.to_prefixes({memory_.mem_tokens}));
  head_.update(final_features, train.labels);
  session_commit(memory_, alpha_);
  committed_ = session;

  metrics.accuracy = evaluate(session, stream);
  metrics.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return metrics;
}

void Engine::save_prompt_state(const fs::path& manifest) const {
  NamedTensors tensors = encoder_.named_parameters();
  tensors.emplace_back("pool", pool_.prompts());
  auto proj = projector_.named_parameters();
  tensors.insert(tensors.end(), proj.begin(), proj.end());
  if (memory_.prev_tokens.defined()) tensors.emplace_back("prev_tokens", memory_.prev_tokens);
  save_snapshot(manifest, tensors,
                {{"committed_sessions", committed_}, {"alpha0", alpha_.alpha0}});
}

SessionStream make_stream(const RunConfig& cfg) {
  if (!cfg.stream_path.empty()) return load_stream(cfg.stream_path);
  return make_synthetic_stream(cfg.stream);
}

RunReport run_experiment(const RunConfig& cfg) {
  cfg.validate();
  return run_experiment(cfg, make_stream(cfg));
}

RunReport run_experiment(const RunConfig& cfg, const SessionStream& stream) {
  cfg.validate();
  if (stream.num_sessions() != cfg.spa.num_sessions) {
    throw ConfigError("run: stream has " + std::to_string(stream.num_sessions()) +
                      " sessions, prompt pool is split for " +
                      std::to_string(cfg.spa.num_sessions));
  }
  Engine engine(cfg);
  RunReport report;
  report.config = cfg;
  for (std::size_t t = 1; t <= stream.num_sessions(); ++t) {
    SessionMetrics m = engine.run_session(t, stream);
    report.per_session_accuracy.push_back(m.accuracy);
    report.alpha_traces.push_back(std::move(m.alpha_trace));
    report.final_alpha.push_back(m.final_alpha);
    report.wall_times.push_back(m.wall_seconds);
  }
  report.average_accuracy = average_accuracy(report.per_session_accuracy);
  report.final_accuracy = report.per_session_accuracy.back();
  if (!cfg.output_dir.empty()) {
    write_report(report, cfg.output_dir);
    engine.save_prompt_state(fs::path(cfg.output_dir) / "prompt_state.json");
    engine.head().save(fs::path(cfg.output_dir) / "head.json");
  }
  return report;
}

void write_report(const RunReport& report, const fs::path& dir) {
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "report.json", std::ios::trunc);
    out << json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "accuracy.csv", std::ios::trunc);
    out << "session,accuracy\n";
    out.precision(17);
    for (std::size_t t = 0; t < report.per_session_accuracy.size(); ++t) {
      out << t + 1 << ',' << report.per_session_accuracy[t] << '\n';
    }
  }
  for (std::size_t t = 1; t < report.alpha_traces.size(); ++t) {
    std::ofstream out(dir / ("alpha_trace_s" + std::to_string(t + 1) + ".csv"), std::ios::trunc);
    out << "tau,mae,alpha\n";
    out.precision(17);
    for (const auto& row : report.alpha_traces[t]) {
      out << row.tau << ',' << row.mae << ',' << row.alpha << '\n';
    }
  }
}

std::vector<AblationRow> ablation_fixed_alpha(const RunConfig& cfg,
                                              const std::vector<double>& alpha_values) {
  const SessionStream stream = make_stream(cfg);
  std::vector<AblationRow> rows;
  for (double a : alpha_values) {
    RunConfig fixed = cfg;
    fixed.output_dir.clear();
    fixed.alpha_mode = AlphaMode::kFixed;
    fixed.fixed_alpha = a;
    const RunReport rf = run_experiment(fixed, stream);
    rows.push_back({"fixed", a, rf.average_accuracy, rf.final_accuracy});

    RunConfig nka = cfg;
    nka.output_dir.clear();
    nka.alpha_mode = AlphaMode::kNka;
    nka.nka.alpha0 = a;
    const RunReport rn = run_experiment(nka, stream);
    rows.push_back({"nka", a, rn.average_accuracy, rn.final_accuracy});
  }
  return rows;
}

}  // namespace pearl
