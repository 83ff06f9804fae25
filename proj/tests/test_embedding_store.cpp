#include <fstream>

#include "test_util.hpp"

using namespace embgen;

namespace {

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

// Independent quantile: position (n-1)p between order statistics.
double oracle_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const long double pos = static_cast<long double>(v.size() - 1) * p;
  const std::size_t i = static_cast<std::size_t>(pos);
  if (i + 1 >= v.size()) return v.back();
  return static_cast<double>(v[i] + (pos - i) * (v[i + 1] - v[i]));
}

}  // namespace

TEST(Dataset, RejectsInvariantViolations) {
  EXPECT_THROW(EmbeddingDataset(4, {}), ValidationError);
  EXPECT_THROW(EmbeddingDataset(2, {{"a", "s", {1, 2}}, {"b", "s", {1, 2, 3}}}), ValidationError);
  EXPECT_THROW(EmbeddingDataset(2, {{"a", "s", {1, 2}}, {"a", "t", {1, 2}}}), ValidationError);
  EXPECT_THROW(EmbeddingDataset(1, {{"a", "s", {std::numeric_limits<float>::quiet_NaN()}}}), ValidationError);
  EXPECT_NO_THROW(EmbeddingDataset(1, {{"a", "s", {1}}, {"b", "s", {2}}}));
}

TEST(Dataset, SpeakerMapGroupsRows) {
  EmbeddingDataset d(1, {{"a", "x", {1}}, {"b", "y", {2}}, {"c", "x", {3}}});
  auto m = d.speakers();
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m["x"], (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(m["y"], (std::vector<std::size_t>{1}));
}

TEST(DatasetIo, JsonlThreeRecordsDimFour) {
  auto dir = testutil::scratch_dir();
  write_text(dir / "d.jsonl",
             "{\"utterance_id\":\"a\",\"speaker_id\":\"s\",\"vector\":[1,2,3,4]}\n"
             "{\"utterance_id\":\"b\",\"speaker_id\":\"s\",\"vector\":[1,2,3,4]}\n"
             "\n"
             "{\"utterance_id\":\"c\",\"speaker_id\":\"t\",\"vector\":[0,0,0,1]}\n");
  auto d = load_dataset(dir / "d.jsonl");
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.dim(), 4u);
}

TEST(DatasetIo, JsonlMixedDimsIsValidationError) {
  auto dir = testutil::scratch_dir();
  write_text(dir / "d.jsonl",
             "{\"utterance_id\":\"a\",\"speaker_id\":\"s\",\"vector\":[1,2,3,4]}\n"
             "{\"utterance_id\":\"b\",\"speaker_id\":\"s\",\"vector\":[1,2,3,4,5]}\n");
  EXPECT_THROW(load_dataset(dir / "d.jsonl"), ValidationError);
}

TEST(DatasetIo, JsonlDuplicateUtteranceIsValidationError) {
  auto dir = testutil::scratch_dir();
  write_text(dir / "d.jsonl",
             "{\"utterance_id\":\"a\",\"speaker_id\":\"s\",\"vector\":[1]}\n"
             "{\"utterance_id\":\"a\",\"speaker_id\":\"t\",\"vector\":[2]}\n");
  EXPECT_THROW(load_dataset(dir / "d.jsonl"), ValidationError);
}

TEST(DatasetIo, JsonlMalformedLineReportsLineNumber) {
  auto dir = testutil::scratch_dir();
  write_text(dir / "d.jsonl",
             "{\"utterance_id\":\"a\",\"speaker_id\":\"s\",\"vector\":[1]}\n"
             "{\"utterance_id\":\"b\",\"speaker_id\":\"s\",\"vector\":[1\n");
  try {
    load_dataset(dir / "d.jsonl");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.position(), 2u);
    EXPECT_EQ(e.unit(), "line");
  }
}

TEST(DatasetIo, BinaryTruncatedPayloadReportsByteOffset) {
  auto dir = testutil::scratch_dir();
  auto data = testutil::random_dataset(3, 4, 1);
  save_dataset(data, dir / "d.embt", DatasetFormat::manifest_binary);
  std::string bytes = io::read_file(dir / "d.embt");
  bytes.resize(bytes.size() - 3);
  write_text(dir / "d.embt", bytes);
  try {
    load_dataset(dir / "d.embt");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.unit(), "byte");
    EXPECT_EQ(e.position(), bytes.size());
  }
}

TEST(DatasetIo, BinaryBadMagic) {
  auto dir = testutil::scratch_dir();
  write_text(dir / "d.embt", std::string("NOTMAGIC") + std::string(8, '\0'));
  EXPECT_THROW(load_dataset(dir / "d.embt"), ParseError);
}

TEST(DatasetIo, BinaryHeaderLayout) {
  auto dir = testutil::scratch_dir();
  EmbeddingDataset d(2, {{"a", "s", {1.5f, -2.0f}}});
  save_dataset(d, dir / "d.embt", DatasetFormat::manifest_binary);
  const std::string b = io::read_file(dir / "d.embt");
  ASSERT_EQ(b.size(), 16u + 8u);
  EXPECT_EQ(b.substr(0, 8), "EMBT0001");
  EXPECT_EQ(io::get_u32(b, 8), 1u);
  EXPECT_EQ(io::get_u32(b, 12), 2u);
  EXPECT_EQ(io::get_f32(b, 16), 1.5f);
  EXPECT_EQ(io::get_f32(b, 20), -2.0f);
  const std::string manifest = io::read_file(dir / "d.manifest.jsonl");
  auto row = nlohmann::json::parse(manifest.substr(0, manifest.find('\n')));
  EXPECT_EQ(row["utterance_id"], "a");
  EXPECT_EQ(row["row"], 0);
}

TEST(DatasetIo, ManifestRowOutOfRange) {
  auto dir = testutil::scratch_dir();
  save_dataset(testutil::random_dataset(2, 3, 5), dir / "d.embt", DatasetFormat::manifest_binary);
  write_text(dir / "d.manifest.jsonl",
             "{\"utterance_id\":\"a\",\"speaker_id\":\"s\",\"row\":0}\n"
             "{\"utterance_id\":\"b\",\"speaker_id\":\"s\",\"row\":2}\n");
  EXPECT_THROW(load_dataset(dir / "d.embt"), ValidationError);
}

TEST(DatasetIo, RoundTripIsBitwise) {
  auto dir = testutil::scratch_dir();
  auto data = testutil::random_dataset(17, 5, 9, 4);
  for (auto fmt : {DatasetFormat::manifest_binary, DatasetFormat::jsonl}) {
    auto path = dir / (fmt == DatasetFormat::jsonl ? "d.jsonl" : "d.embt");
    save_dataset(data, path, fmt);
    auto back = load_dataset(path, fmt);
    ASSERT_EQ(back.size(), data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      EXPECT_EQ(back[i].utterance_id, data[i].utterance_id);
      EXPECT_EQ(back[i].speaker_id, data[i].speaker_id);
      for (std::size_t j = 0; j < data.dim(); ++j)
        EXPECT_EQ(std::bit_cast<std::uint32_t>(back[i].vector[j]), std::bit_cast<std::uint32_t>(data[i].vector[j]));
    }
  }
}

TEST(DatasetIo, MetaSidecarCarriesSourceTag) {
  auto dir = testutil::scratch_dir();
  auto data = testutil::random_dataset(3, 2, 2);
  data.set_source_tag("unit-test");
  save_dataset(data, dir / "d.embt", DatasetFormat::manifest_binary, {{"temperature", 1.0}});
  EXPECT_EQ(load_dataset(dir / "d.embt").source_tag(), "unit-test");
  auto meta = nlohmann::json::parse(io::read_file(dir / "d.meta.json"));
  EXPECT_EQ(meta["temperature"], 1.0);
}

TEST(DatasetIo, MissingFileNamesPath) {
  try {
    load_dataset("/nonexistent/x.embt");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/x.embt"), std::string::npos);
  }
}

TEST(Normalizer, ConstantFeature) {
  Matrix m(5, 2);
  for (std::size_t i = 0; i < 5; ++i) {
    m(i, 0) = 3.25;
    m(i, 1) = static_cast<double>(i);
  }
  auto s = fit_normalizer(m);
  EXPECT_EQ(s.q_low[0], 3.25);
  EXPECT_EQ(s.q_high[0], 3.25);
  auto y = normalize(std::vector<double>{3.25, 2.0}, s);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(denormalize(y, s)[0], 3.25);
}

TEST(Normalizer, OneToThousand) {
  Matrix m(1000, 1);
  for (std::size_t i = 0; i < 1000; ++i) m(i, 0) = static_cast<double>(i + 1);
  auto s = fit_normalizer(m);
  EXPECT_NEAR(s.q_low[0], 1.999, 1e-9);
  EXPECT_NEAR(s.q_high[0], 999.001, 1e-9);
}

TEST(Normalizer, TwoPointFeature) {
  Matrix m(2, 1);
  m(0, 0) = 0.0;
  m(1, 0) = 10.0;
  auto s = fit_normalizer(m);
  EXPECT_NEAR(s.q_low[0], 0.01, 1e-12);
  EXPECT_NEAR(s.q_high[0], 9.99, 1e-12);
}

TEST(Normalizer, NeedsTwoRowsAndFiniteValues) {
  EXPECT_THROW(fit_normalizer(Matrix(1, 3)), ValidationError);
  Matrix m(3, 1);
  m(1, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(fit_normalizer(m), ValidationError);
}

TEST(Normalizer, EndpointsMidpointAndClipping) {
  NormalizationStats s{1, {2.0}, {6.0}};
  EXPECT_EQ(normalize(std::vector<double>{2.0}, s)[0], -1.0);
  EXPECT_EQ(normalize(std::vector<double>{6.0}, s)[0], 1.0);
  EXPECT_EQ(normalize(std::vector<double>{4.0}, s)[0], 0.0);
  EXPECT_EQ(normalize(std::vector<double>{100.0}, s)[0], 1.0);
  EXPECT_EQ(normalize(std::vector<double>{-100.0}, s)[0], -1.0);
  EXPECT_EQ(denormalize(std::vector<double>{0.0}, s)[0], 4.0);
  EXPECT_EQ(denormalize(std::vector<double>{1.0}, s)[0], 6.0);
  EXPECT_EQ(denormalize(std::vector<double>{7.0}, s)[0], 6.0);
  EXPECT_THROW(normalize(std::vector<double>{std::nan("")}, s), ValidationError);
  EXPECT_THROW(normalize(std::vector<double>{1.0, 2.0}, s), ValidationError);
}

TEST(Normalizer, StatsJsonRoundTrip) {
  NormalizationStats s{2, {-1.5, 0.0}, {2.0, 0.0}};
  nlohmann::json j = s;
  EXPECT_EQ(j["dim"], 2);
  auto back = j.get<NormalizationStats>();
  EXPECT_EQ(back.q_low, s.q_low);
  EXPECT_EQ(back.q_high, s.q_high);
  j["q_low"][0] = 5.0;
  EXPECT_THROW(j.get<NormalizationStats>(), ValidationError);
}

TEST(NormalizerProperty, QuantilesMatchSortOracle) {
  std::mt19937_64 rng(11);
  for (std::size_t n : {2u, 3u, 17u, 1000u, 10000u}) {
    Matrix m(n, 3);
    std::normal_distribution<double> normal(0.0, 5.0);
    for (double& v : m.data) v = normal(rng);
    auto s = fit_normalizer(m);
    for (std::size_t j = 0; j < 3; ++j) {
      std::vector<double> col;
      for (std::size_t i = 0; i < n; ++i) col.push_back(m(i, j));
      EXPECT_NEAR(s.q_low[j], oracle_quantile(col, 0.001), 1e-9);
      EXPECT_NEAR(s.q_high[j], oracle_quantile(col, 0.999), 1e-9);
    }
  }
}

TEST(NormalizerProperty, RangeMonotonicityRoundTrip) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> unif(-10.0, 10.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 7;
    NormalizationStats s{d, std::vector<double>(d), std::vector<double>(d)};
    for (std::size_t i = 0; i < d; ++i) {
      double a = unif(rng), b = unif(rng);
      if (trial % 5 == 0 && i == 0) b = a;
      s.q_low[i] = std::min(a, b);
      s.q_high[i] = std::max(a, b);
    }
    auto x = testutil::random_vector(rng, d, 8.0);
    auto y = normalize(x, s);
    auto back = denormalize(y, s);
    for (std::size_t i = 0; i < d; ++i) {
      EXPECT_GE(y[i], -1.0);
      EXPECT_LE(y[i], 1.0);
      EXPECT_NEAR(back[i], std::clamp(x[i], s.q_low[i], s.q_high[i]), 1e-6);
      auto x2 = x;
      x2[i] += std::abs(unif(rng));
      EXPECT_GE(normalize(x2, s)[i], y[i]);
    }
  }
}

TEST(GeneratedDataset, IdsFollowSeedIndexPattern) {
  Matrix m(3, 2, 0.5);
  auto d = make_generated_dataset(m, 42, "tag");
  EXPECT_EQ(d[2].utterance_id, "gen-42-2");
  EXPECT_EQ(d[2].speaker_id, "gen-42-2");
  EXPECT_EQ(d.source_tag(), "tag");
}
