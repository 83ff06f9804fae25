#include <functional>

#include "test_util.hpp"

using namespace embgen;
using ad::Shape;
using ad::Tape;
using ad::Var;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Scalar probe: sum_i c_i * y_i with fixed random c.
double probe(Tape& t, Var y, const std::vector<double>& c, Var* out = nullptr) {
  const auto v = t.value(y);
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) s += c[i] * v[i];
  if (out) {
    Var w = t.constant(c, {1, c.size()});
    Var b = t.constant({0.0}, {1, 1});
    *out = ad::linear(t, y, w, b, {1, 1});
  }
  return s;
}

// Compares tape gradients of every input against central differences.
void check_gradients(const Builder& build, std::vector<std::vector<double>> inputs, const std::vector<Shape>& shapes,
                     std::uint64_t seed, double tol = 1e-6) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> grads(inputs.size());
  for (std::size_t k = 0; k < inputs.size(); ++k) grads[k].assign(inputs[k].size(), 0.0);

  auto run = [&](bool with_grad) {
    Tape t;
    std::vector<Var> vars;
    for (std::size_t k = 0; k < inputs.size(); ++k)
      vars.push_back(t.parameter(inputs[k], with_grad ? std::span<double>(grads[k]) : std::span<double>(), shapes[k]));
    Var y = build(t, vars);
    return std::make_pair(std::move(t), y);
  };

  std::vector<double> coeff;
  {
    auto [t, y] = run(false);
    coeff = testutil::random_vector(rng, t.value(y).size());
  }
  {
    Tape t;
    std::vector<Var> vars;
    for (std::size_t k = 0; k < inputs.size(); ++k) vars.push_back(t.parameter(inputs[k], grads[k], shapes[k]));
    Var y = build(t, vars);
    Var root;
    probe(t, y, coeff, &root);
    t.backward(root);
  }
  const double h = 1e-6;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      auto [t1, y1] = run(false);
      const double fp = probe(t1, y1, coeff);
      inputs[k][i] = orig - h;
      auto [t2, y2] = run(false);
      const double fm = probe(t2, y2, coeff);
      inputs[k][i] = orig;
      const double fd = (fp - fm) / (2 * h);
      EXPECT_NEAR(grads[k][i], fd, tol * std::max(1.0, std::abs(fd))) << "input " << k << " index " << i;
    }
}

std::vector<double> rnd(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  return testutil::random_vector(rng, n, scale);
}

}  // namespace

TEST(Autodiff, LinearMatchesHandComputation) {
  Tape t;
  Var x = t.constant({1.0, 2.0}, {2, 1});
  Var w = t.constant({1.0, 0.0, 3.0, -1.0, 0.5, 0.5}, {3, 2});
  Var b = t.constant({0.0, 1.0, -1.0}, {3, 1});
  auto y = t.value(ad::linear(t, x, w, b, {3, 1}));
  EXPECT_EQ(std::vector<double>(y.begin(), y.end()), (std::vector<double>{1.0, 2.0, 0.5}));
}

TEST(Autodiff, ConvWithPaddingMatchesHandComputation) {
  Tape t;
  Var x = t.constant({1.0, 2.0, 3.0, 4.0}, {1, 4});
  Var w = t.constant({1.0, 1.0, 1.0}, {1, 3});
  Var b = t.constant({0.0}, {1, 1});
  auto y = t.value(ad::conv1d(t, x, w, b, 3, 1, 1));
  EXPECT_EQ(std::vector<double>(y.begin(), y.end()), (std::vector<double>{3.0, 6.0, 9.0, 7.0}));
  auto y2 = t.value(ad::conv1d(t, x, w, b, 3, 2, 1));
  EXPECT_EQ(std::vector<double>(y2.begin(), y2.end()), (std::vector<double>{3.0, 9.0}));
}

TEST(Autodiff, PoolAndUpsample) {
  Tape t;
  Var x = t.constant({1.0, 3.0, 5.0, 7.0}, {1, 4});
  auto p = t.value(ad::avg_pool(t, x, 2));
  EXPECT_EQ(std::vector<double>(p.begin(), p.end()), (std::vector<double>{2.0, 6.0}));
  auto u = t.value(ad::upsample(t, t.constant({1.0, 2.0}, {1, 2}), 4));
  EXPECT_EQ(std::vector<double>(u.begin(), u.end()), (std::vector<double>{1.0, 1.0, 2.0, 2.0}));
}

TEST(AutodiffGrad, Linear) {
  std::mt19937_64 rng(1);
  check_gradients([](Tape& t, const std::vector<Var>& v) { return ad::linear(t, v[0], v[1], v[2], {3, 1}); },
                  {rnd(rng, 4), rnd(rng, 12), rnd(rng, 3)}, {{2, 2}, {3, 4}, {3, 1}}, 2);
}

TEST(AutodiffGrad, ConvStrideOneAndTwo) {
  std::mt19937_64 rng(3);
  for (std::size_t stride : {1u, 2u})
    check_gradients(
        [stride](Tape& t, const std::vector<Var>& v) { return ad::conv1d(t, v[0], v[1], v[2], 3, stride, 1); },
        {rnd(rng, 16), rnd(rng, 3 * 2 * 3), rnd(rng, 3)}, {{2, 8}, {3, 6}, {3, 1}}, 4 + stride);
}

TEST(AutodiffGrad, Elementwise) {
  std::mt19937_64 rng(5);
  check_gradients(
      [](Tape& t, const std::vector<Var>& v) { return ad::tanh(t, ad::swish(t, ad::add(t, v[0], v[1]))); },
      {rnd(rng, 6), rnd(rng, 6)}, {{2, 3}, {2, 3}}, 6);
}

TEST(AutodiffGrad, ClampInsideAndOutside) {
  check_gradients([](Tape& t, const std::vector<Var>& v) { return ad::clamp(t, v[0], -1.0, 1.0); },
                  {{-3.0, -0.5, 0.2, 0.9, 2.5}}, {{1, 5}}, 7);
}

TEST(AutodiffGrad, SliceConcatReshape) {
  std::mt19937_64 rng(8);
  check_gradients(
      [](Tape& t, const std::vector<Var>& v) {
        Var c = ad::concat_channels(t, v[0], v[1]);
        return ad::slice(t, ad::reshape(t, c, {1, 12}), 3, 7);
      },
      {rnd(rng, 4), rnd(rng, 8)}, {{1, 4}, {2, 4}}, 9);
}

TEST(AutodiffGrad, PoolUpsample) {
  std::mt19937_64 rng(10);
  check_gradients(
      [](Tape& t, const std::vector<Var>& v) { return ad::upsample(t, ad::avg_pool(t, v[0], 2), 8); },
      {rnd(rng, 16)}, {{2, 8}}, 11);
}

TEST(AutodiffGrad, ReparameterizeAndDensity) {
  std::mt19937_64 rng(12);
  const std::vector<double> noise = rnd(rng, 4), x = rnd(rng, 4);
  check_gradients(
      [noise](Tape& t, const std::vector<Var>& v) { return ad::reparameterize(t, v[0], v[1], noise); },
      {rnd(rng, 4), rnd(rng, 4, 0.5)}, {{4, 1}, {4, 1}}, 13);
  check_gradients(
      [x](Tape& t, const std::vector<Var>& v) { return ad::gaussian_log_density(t, x, v[0], v[1]); },
      {rnd(rng, 4), rnd(rng, 4, 0.5)}, {{4, 1}, {4, 1}}, 14);
}

TEST(AutodiffGrad, KlAndFreeBits) {
  std::mt19937_64 rng(15);
  check_gradients(
      [](Tape& t, const std::vector<Var>& v) {
        Var kl = ad::kl_diag(t, v[0], v[1], v[2], v[3]);
        std::vector<Var> terms{kl, ad::floor_at(t, kl, 0.01)};
        std::vector<double> c{0.5, 2.0};
        return ad::weighted_sum(t, terms, c);
      },
      {rnd(rng, 3), rnd(rng, 3, 0.5), rnd(rng, 3), rnd(rng, 3, 0.5)}, {{3, 1}, {3, 1}, {3, 1}, {3, 1}}, 16);
}

TEST(Autodiff, FloorBelowThresholdHasNoGradient) {
  Tape t;
  std::vector<double> v{0.05}, g{0.0};
  Var a = t.parameter(v, g, {1, 1});
  Var f = ad::floor_at(t, a, 0.1);
  EXPECT_EQ(t.scalar(f), 0.1);
  t.backward(f);
  EXPECT_EQ(g[0], 0.0);
}

TEST(Autodiff, GaussianDensityMatchesFormula) {
  Tape t;
  std::vector<double> x{0.3, -0.2};
  Var m = t.constant({0.0, 0.1}, {2, 1});
  Var lv = t.constant({0.0, std::log(0.25)}, {2, 1});
  double expected = 0.0;
  const double var[2] = {1.0, 0.25}, mu[2] = {0.0, 0.1};
  for (int i = 0; i < 2; ++i)
    expected += -0.5 * (std::log(2 * std::numbers::pi * var[i]) + (x[i] - mu[i]) * (x[i] - mu[i]) / var[i]);
  EXPECT_NEAR(t.scalar(ad::gaussian_log_density(t, x, m, lv)), expected, 1e-12);
}
