#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace embgen;

namespace {

HvaeModel usable_model(std::size_t d, std::uint64_t seed) {
  auto m = gradcheck::jittered_model(LatentHierarchySpec{2, 2, 3, 8, d, CellKind::automatic}, seed);
  m.norm_stats = NormalizationStats{d, std::vector<double>(d, -3.0), std::vector<double>(d, 5.0)};
  return m;
}

// Decoded chain of prior means, built group by group from prior_stats.
std::vector<double> prior_mean_chain(const HvaeModel& m) {
  const std::size_t L = m.spec.total_groups(), K = m.spec.dims_per_group;
  std::vector<std::vector<double>> z(L, std::vector<double>(K, 0.0));
  for (std::size_t l = 1; l < L; ++l) z[l] = prior_stats(m, z)[l].mean;
  return decode(m, z).mean;
}

double variance(const std::vector<double>& v) { return std::pow(mean_std(v).std, 2); }

}  // namespace

TEST(Sampler, RequestValidation) {
  SampleRequest r;
  EXPECT_EQ(r.temperature, 1.0);
  r.temperature = -0.1;
  EXPECT_THROW(r.validate(), ValidationError);
  r.temperature = 1.0;
  r.count = 0;
  EXPECT_THROW(r.validate(), ValidationError);
}

TEST(Sampler, ModelWithoutStatsIsStateError) {
  auto m = build_model(LatentHierarchySpec{2, 1, 2, 8, 4, CellKind::automatic}, 0);
  EXPECT_THROW(sample_embeddings(m, SampleRequest{}), StateError);
  EXPECT_THROW(reconstruct(m, std::vector<double>(4, 0.0)), StateError);
}

TEST(Sampler, ZeroTemperatureIsDecodedPriorMeanChain) {
  for (std::size_t d : {4u, 16u}) {
    auto m = usable_model(d, 3);
    SampleRequest r{5, 0.0, 17};
    auto y = sample_normalized(m, r);
    const auto expected = prior_mean_chain(m);
    for (std::size_t i = 0; i < y.rows; ++i)
      for (std::size_t j = 0; j < d; ++j) EXPECT_DOUBLE_EQ(y(i, j), expected[j]);
    r.seed = 18;
    auto y2 = sample_normalized(m, r);
    EXPECT_EQ(y.data, y2.data);
  }
}

TEST(Sampler, CountAndIds) {
  auto m = usable_model(8, 4);
  auto out = sample_embeddings(m, SampleRequest{1000, 1.0, 7});
  EXPECT_EQ(out.size(), 1000u);
  EXPECT_EQ(out.dim(), 8u);
  EXPECT_EQ(out[999].utterance_id, "gen-7-999");
  EXPECT_EQ(out[999].speaker_id, "gen-7-999");
  EXPECT_EQ(out.speakers().size(), 1000u);
  EXPECT_NE(out.source_tag().find("temperature=1"), std::string::npos);
}

TEST(Sampler, SeedDeterminism) {
  auto m = usable_model(8, 5);
  auto a = sample_embeddings(m, SampleRequest{50, 1.0, 3});
  auto b = sample_embeddings(m, SampleRequest{50, 1.0, 3});
  auto c = sample_embeddings(m, SampleRequest{50, 1.0, 4});
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(a[i].vector, b[i].vector);
  EXPECT_NE(a[0].vector, c[0].vector);
}

TEST(Sampler, OutputsFiniteAndInDecoderRange) {
  auto m = usable_model(8, 6);
  auto y = sample_normalized(m, SampleRequest{200, 1.5, 1});
  for (double v : y.data) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  auto raw = sample_embeddings(m, SampleRequest{200, 1.5, 1});
  for (const auto& r : raw.records())
    for (float v : r.vector) {
      EXPECT_GE(v, -3.0f);
      EXPECT_LE(v, 5.0f);
    }
}

TEST(SamplerProperty, FirstGroupVarianceScalesWithTemperatureSquared) {
  auto m = usable_model(4, 7);
  const std::size_t draws = 100000, K = m.spec.dims_per_group;
  std::vector<std::vector<double>> z1(3);
  const double temps[3] = {0.0, 0.5, 1.0};
  Rng rng = make_rng(99);
  std::vector<double> noise(m.spec.total_latent_dims());
  for (std::size_t i = 0; i < draws; ++i) {
    fill_standard_normal(rng, noise);
    for (int t = 0; t < 3; ++t) z1[t].push_back(draw_from_prior(m, noise, temps[t]).z[0][i % K]);
  }
  const double v0 = variance(z1[0]), v5 = variance(z1[1]), v1 = variance(z1[2]);
  EXPECT_EQ(v0, 0.0);
  EXPECT_LE(v0, v5);
  EXPECT_LE(v5, v1);
  EXPECT_NEAR(v5 / v1, 0.25, 0.25 * 0.05);
}

TEST(Reconstruct, ShapeDeterminismAndValidation) {
  auto m = usable_model(8, 8);
  std::vector<double> x{0.0, 1.0, -2.0, 4.5, 3.0, 0.1, -0.5, 2.0};
  auto a = reconstruct(m, x), b = reconstruct(m, x);
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(a, b);
  EXPECT_THROW(reconstruct(m, std::vector<double>(7, 0.0)), ValidationError);
}

TEST(Reconstruct, UsesPosteriorMeans) {
  auto m = usable_model(8, 9);
  std::vector<double> x(8, 0.25);
  std::vector<std::vector<double>> z;
  for (const auto& g : encode(m, x)) z.push_back(g.mean);
  EXPECT_EQ(reconstruct_normalized(m, x), decode(m, z).mean);
}
