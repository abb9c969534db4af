#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "pearl/engine.hpp"
#include "pearl/error.hpp"

using namespace pearl;
namespace fs = std::filesystem;

namespace {

RunConfig quick_config() {
  RunConfig c;
  c.epochs = 2;
  c.stream.samples_per_class = 20;
  c.stream.num_sessions = c.spa.num_sessions = 3;
  c.spa.pool_size = 12;
  return c;
}

Tensor current_tokens(const Engine& e, std::size_t session) {
  NoGradGuard no_grad;
  return encode_prompts(e.pool(), e.encoder(), session).tokens;
}

}  // namespace

TEST(AverageAccuracy, Definition) { EXPECT_DOUBLE_EQ(average_accuracy({1.0, 0.5}), 0.75); }

TEST(Engine, OutOfOrderSessionIsProtocolError) {
  const auto cfg = quick_config();
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  EXPECT_THROW(e.run_session(2, stream), ProtocolError);
  e.run_session(1, stream);
  EXPECT_THROW(e.run_session(1, stream), ProtocolError);
  EXPECT_THROW(e.evaluate(2, stream), ProtocolError);
}

TEST(Engine, FirstSessionBypassesFeedback) {
  const auto cfg = quick_config();
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  const auto m = e.run_session(1, stream);
  EXPECT_TRUE(m.alpha_trace.empty());
  EXPECT_TRUE(e.memory().prev_tokens.bitwise_equal(current_tokens(e, 1)));
  EXPECT_TRUE(e.projector().frozen());
}

TEST(Engine, FrozenPoolRowsAndBackboneUnchanged) {
  const auto cfg = quick_config();
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  std::vector<Tensor> backbone_before;
  for (const auto& [name, t] : e.backbone().named_weights()) backbone_before.push_back(t.clone());
  for (std::size_t t = 1; t <= 3; ++t) {
    const Tensor before = e.pool().prompts().clone();
    e.run_session(t, stream);
    const std::size_t d = cfg.backbone.d, per = 4;
    for (std::size_t r = 0; r < 12; ++r) {
      const bool active = r >= per * (t - 1) && r < per * t;
      bool same = true;
      for (std::size_t j = 0; j < d; ++j) same &= before.data()[r * d + j] == e.pool().prompts().data()[r * d + j];
      EXPECT_EQ(same, !active) << "session " << t << " row " << r;
    }
  }
  const auto after = e.backbone().named_weights();
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_TRUE(after[i].second.bitwise_equal(backbone_before[i]));
}

TEST(Engine, PreviousTokensFixedWithinSession) {
  const auto cfg = quick_config();
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  e.run_session(1, stream);
  const Tensor committed = e.memory().prev_tokens.clone();
  std::size_t checks = 0;
  e.set_step_hook([&](const Engine& eng, std::size_t, std::size_t) {
    EXPECT_TRUE(eng.memory().prev_tokens.bitwise_equal(committed));
    ++checks;
  });
  const auto m = e.run_session(2, stream);
  EXPECT_GT(checks, 0u);
  EXPECT_EQ(m.alpha_trace.size(), checks);
  EXPECT_FALSE(e.memory().prev_tokens.bitwise_equal(committed));
}

TEST(Engine, SeparableFirstSessionIsPerfect) {
  auto cfg = quick_config();
  cfg.stream.cluster_spread = 0.01;
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  EXPECT_EQ(e.run_session(1, stream).accuracy, 1.0);
}

TEST(Engine, AlphaStaysInsideBounds) {
  const auto cfg = quick_config();
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  const auto s = e.alpha_state();
  for (std::size_t t = 1; t <= 3; ++t) {
    for (const auto& row : e.run_session(t, stream).alpha_trace) {
      EXPECT_GE(row.alpha, s.lower_bound());
      EXPECT_LE(row.alpha, s.upper_bound());
      EXPECT_GE(row.mae, 0.0);
    }
  }
}

TEST(RunExperiment, DeterministicAndConsistent) {
  const auto cfg = quick_config();
  const auto a = run_experiment(cfg), b = run_experiment(cfg);
  EXPECT_EQ(a.per_session_accuracy, b.per_session_accuracy);
  EXPECT_EQ(a.final_alpha, b.final_alpha);
  ASSERT_EQ(a.alpha_traces.size(), b.alpha_traces.size());
  for (std::size_t t = 0; t < a.alpha_traces.size(); ++t) {
    ASSERT_EQ(a.alpha_traces[t].size(), b.alpha_traces[t].size());
    for (std::size_t i = 0; i < a.alpha_traces[t].size(); ++i) {
      EXPECT_EQ(a.alpha_traces[t][i].alpha, b.alpha_traces[t][i].alpha);
      EXPECT_EQ(a.alpha_traces[t][i].mae, b.alpha_traces[t][i].mae);
    }
  }
  EXPECT_NEAR(a.average_accuracy, average_accuracy(a.per_session_accuracy), 1e-12);
  EXPECT_EQ(a.final_accuracy, a.per_session_accuracy.back());
  for (double acc : a.per_session_accuracy) {
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
  }
}

TEST(RunExperiment, WritesReportAndTraces) {
  auto cfg = quick_config();
  cfg.output_dir = (fs::temp_directory_path() / "pearl_engine_out").string();
  fs::remove_all(cfg.output_dir);
  const auto r = run_experiment(cfg);
  const fs::path dir = cfg.output_dir;
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "prompt_state.json"));
  EXPECT_TRUE(fs::exists(dir / "head.json"));
  std::ifstream acc(dir / "accuracy.csv");
  std::string header;
  std::getline(acc, header);
  EXPECT_EQ(header, "session,accuracy");
  EXPECT_FALSE(fs::exists(dir / "alpha_trace_s1.csv"));
  for (std::size_t t = 2; t <= 3; ++t) {
    std::ifstream in(dir / ("alpha_trace_s" + std::to_string(t) + ".csv"));
    std::getline(in, header);
    EXPECT_EQ(header, "tau,mae,alpha");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(in, line)) ++rows;
    EXPECT_EQ(rows, r.alpha_traces[t - 1].size());
  }
  fs::remove_all(dir);
}

TEST(RunExperiment, StreamSessionCountMustMatchPool) {
  auto cfg = quick_config();
  auto stream_cfg = cfg.stream;
  stream_cfg.num_sessions = 2;
  EXPECT_THROW(run_experiment(cfg, make_synthetic_stream(stream_cfg)), ConfigError);
}

TEST(FixedAlpha, OneKeepsFirstSessionPrompts) {
  auto cfg = quick_config();
  cfg.alpha_mode = AlphaMode::kFixed;
  cfg.fixed_alpha = 1.0;
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  e.run_session(1, stream);
  const Tensor first = e.memory().prev_tokens.clone();
  for (std::size_t t = 2; t <= 3; ++t) {
    const auto m = e.run_session(t, stream);
    EXPECT_TRUE(e.memory().prev_tokens.bitwise_equal(first));
    for (const auto& row : m.alpha_trace) EXPECT_EQ(row.alpha, 1.0);
  }
}

TEST(FixedAlpha, ZeroIsNoMixing) {
  auto cfg = quick_config();
  cfg.alpha_mode = AlphaMode::kFixed;
  cfg.fixed_alpha = 0.0;
  const auto stream = make_stream(cfg);
  Engine e(cfg);
  for (std::size_t t = 1; t <= 3; ++t) {
    e.run_session(t, stream);
    EXPECT_TRUE(e.memory().prev_tokens.bitwise_equal(current_tokens(e, t)));
  }
}

TEST(Ablation, TwoRowsPerValue) {
  auto cfg = quick_config();
  cfg.epochs = 1;
  const auto rows = ablation_fixed_alpha(cfg, {0.6, 0.9});
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0].mode, "fixed");
  EXPECT_EQ(rows[1].mode, "nka");
  EXPECT_EQ(rows[2].alpha, 0.9);
}
