#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "oracles.hpp"
#include "pearl/error.hpp"
#include "pearl/stream.hpp"

using namespace pearl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void expect_same(const Dataset& a, const Dataset& b) {
  EXPECT_EQ(a.dim, b.dim);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.features, b.features);
}

}  // namespace

TEST(SyntheticStream, LabelsPartitionedBySession) {
  const auto s = make_synthetic_stream({});
  ASSERT_EQ(s.num_sessions(), 5u);
  for (std::size_t t = 0; t < 5; ++t) {
    EXPECT_EQ(s.class_maps[t].size(), 4u);
    for (const auto* ds : {&s.train[t], &s.test[t]}) {
      for (int y : ds->labels) {
        EXPECT_GE(y, static_cast<int>(4 * t));
        EXPECT_LT(y, static_cast<int>(4 * t + 4));
      }
    }
  }
}

TEST(SyntheticStream, EightyTwentySplit) {
  const auto s = make_synthetic_stream({});
  EXPECT_EQ(s.train[0].size(), 4u * 40u);
  EXPECT_EQ(s.test[0].size(), 4u * 10u);
}

TEST(SyntheticStream, SameSeedSameStream) {
  const auto a = make_synthetic_stream({}), b = make_synthetic_stream({});
  for (std::size_t t = 0; t < a.num_sessions(); ++t) {
    expect_same(a.train[t], b.train[t]);
    expect_same(a.test[t], b.test[t]);
  }
}

TEST(SyntheticStream, TinySpreadIsCentroidSeparable) {
  StreamConfig cfg;
  cfg.cluster_spread = 1e-3;
  const auto s = make_synthetic_stream(cfg);
  std::vector<std::vector<double>> centroids(20, std::vector<double>(cfg.input_dim, 0.0));
  std::vector<int> counts(20, 0);
  for (const auto& ds : s.train) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t k = 0; k < ds.dim; ++k) centroids[ds.labels[i]][k] += ds.row(i)[k];
      ++counts[ds.labels[i]];
    }
  }
  for (std::size_t c = 0; c < 20; ++c) {
    for (auto& v : centroids[c]) v /= counts[c];
  }
  const Dataset test = s.cumulative_test(5);
  for (std::size_t i = 0; i < test.size(); ++i) {
    EXPECT_EQ(oracle::nearest_centroid(centroids, test.row(i).data(), test.dim), test.labels[i]);
  }
}

TEST(SyntheticStream, RejectsNonPositiveSpread) {
  StreamConfig cfg;
  cfg.cluster_spread = 0.0;
  EXPECT_THROW(make_synthetic_stream(cfg), ConfigError);
}

TEST(CumulativeTest, CoversExactlyTheSeenClasses) {
  const auto s = make_synthetic_stream({});
  for (std::size_t t = 1; t <= 5; ++t) {
    const Dataset d = s.cumulative_test(t);
    std::set<int> labels(d.labels.begin(), d.labels.end());
    EXPECT_EQ(labels.size(), 4 * t);
    EXPECT_EQ(*labels.begin(), 0);
    EXPECT_EQ(*labels.rbegin(), static_cast<int>(4 * t - 1));
  }
  EXPECT_THROW(s.cumulative_test(6), ContractError);
}

TEST(StreamFile, RoundTrip) {
  TempDir dir("pearl_stream_rt");
  StreamConfig cfg;
  cfg.num_sessions = 3;
  auto s = make_synthetic_stream(cfg);
  s.class_maps = {{10, 11, 12, 13}, {3, 4, 5, 6}, {90, 91, 92, 93}};
  save_stream(s, dir.path / "stream.json");
  const auto back = load_stream(dir.path / "stream.json");
  EXPECT_EQ(back.class_maps, s.class_maps);
  EXPECT_EQ(back.classes_per_session, s.classes_per_session);
  for (std::size_t t = 0; t < 3; ++t) {
    expect_same(back.train[t], s.train[t]);
    expect_same(back.test[t], s.test[t]);
  }
}

TEST(StreamFile, SharedLabelIsProtocolError) {
  TempDir dir("pearl_stream_shared");
  StreamConfig cfg;
  cfg.num_sessions = 2;
  save_stream(make_synthetic_stream(cfg), dir.path / "stream.json");
  nlohmann::json doc;
  std::ifstream(dir.path / "stream.json") >> doc;
  doc["sessions"][1]["classes"][0] = doc["sessions"][0]["classes"][2];
  std::ofstream(dir.path / "stream.json") << doc.dump();
  EXPECT_THROW(load_stream(dir.path / "stream.json"), ProtocolError);
}

TEST(StreamFile, TruncatedBlockIsParseError) {
  TempDir dir("pearl_stream_trunc");
  StreamConfig cfg;
  cfg.num_sessions = 2;
  save_stream(make_synthetic_stream(cfg), dir.path / "stream.json");
  const fs::path block = dir.path / "stream_s2_test.f64";
  fs::resize_file(block, fs::file_size(block) - 8);
  EXPECT_THROW(load_stream(dir.path / "stream.json"), ParseError);
}

TEST(StreamFile, TruncatedManifestIsParseError) {
  TempDir dir("pearl_stream_trunc_manifest");
  StreamConfig cfg;
  cfg.num_sessions = 2;
  save_stream(make_synthetic_stream(cfg), dir.path / "stream.json");
  fs::resize_file(dir.path / "stream.json", fs::file_size(dir.path / "stream.json") / 2);
  EXPECT_THROW(load_stream(dir.path / "stream.json"), ParseError);
}

TEST(StreamFile, MissingFileIsParseError) {
  EXPECT_THROW(load_stream("/nonexistent/pearl/stream.json"), ParseError);
}
