#include <gtest/gtest.h>

#include <cmath>

#include "model_fixtures.hpp"
#include "nmt/cnn.hpp"
#include "nmt/errors.hpp"

using namespace nmt;
using namespace nmt::testing;

namespace {

void fill(ParameterStore& store, const std::string& name, std::vector<double> values) {
  Tensor& t = store.get(name).mutable_value();
  ASSERT_EQ(t.size(), values.size()) << name;
  t.storage() = std::move(values);
}

void zero(ParameterStore& store, const std::string& name) {
  auto& s = store.get(name).mutable_value().storage();
  std::fill(s.begin(), s.end(), 0.0);
}

Var rows(std::size_t b, std::size_t n, std::size_t d, std::vector<double> data) {
  return constant(Tensor({b, n, d}, std::move(data)));
}

Var random_input(std::size_t b, std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> data(b * n * d);
  for (double& x : data) x = u(rng);
  return rows(b, n, d, std::move(data));
}

Var ones(std::size_t b, std::size_t n) { return constant(Tensor({b, n}, 1.0)); }

double glu_of(std::vector<double> h) { return glu(constant(Tensor({1, 2}, std::move(h)))).value()[0]; }

}  // namespace

TEST(Glu, Examples) {
  EXPECT_DOUBLE_EQ(glu_of({1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(glu_of({0, 37.0}), 0.0);
  EXPECT_DOUBLE_EQ(glu_of({0, -5.0}), 0.0);
  EXPECT_DOUBLE_EQ(glu_of({2, 0}), 1.0);
}

TEST(Glu, OddWidthIsDimensionError) {
  EXPECT_THROW(glu(constant(Tensor({2, 3}))), DimensionError);
}

TEST(Windows, CausalFirstPositionSeesTwoZeroPads) {
  const Tensor w = causal_windows(rows(1, 2, 1, {5, 7}), 3).value();
  ASSERT_EQ(w.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(w.storage(), (std::vector<double>{0, 0, 5, 0, 5, 7}));
}

TEST(Windows, CenteredPadsBothEnds) {
  const Tensor w = centered_windows(rows(1, 3, 1, {1, 2, 4}), 3).value();
  EXPECT_EQ(w.storage(), (std::vector<double>{0, 1, 2, 1, 2, 4, 2, 4, 0}));
}

TEST(ConvEncoderLayer, ZeroWeightsArePureResidual) {
  ParameterStore store;
  Initializer init(1);
  ConvEncoderLayer layer(store, init, "enc", 4, 3);
  zero(store, "enc.conv.weight");
  const Var h = random_input(1, 5, 4, 2);
  EXPECT_EQ(layer(h, ones(1, 5)).value().storage(), h.value().storage());
}

TEST(ConvEncoderLayer, SinglePositionUsesZeroNeighbours) {
  ParameterStore store;
  Initializer init(2);
  ConvEncoderLayer layer(store, init, "enc", 1, 3);
  fill(store, "enc.conv.weight", {1, 0, 10, 0, 100, 0});
  const Tensor out = layer(rows(1, 1, 1, {3}), ones(1, 1)).value();
  EXPECT_DOUBLE_EQ(out[0], 0.5 * 30 + 3);
}

TEST(ConvEncoderLayer, ScalarHandConvolution) {
  ParameterStore store;
  Initializer init(3);
  ConvEncoderLayer layer(store, init, "enc", 1, 3);
  fill(store, "enc.conv.weight", {1, 0, 10, 0, 100, 0});
  const Tensor out = layer(rows(1, 3, 1, {1, 2, 4}), ones(1, 3)).value();
  EXPECT_DOUBLE_EQ(out[0], 0.5 * (0 + 10 + 200) + 1);
  EXPECT_DOUBLE_EQ(out[1], 0.5 * (1 + 20 + 400) + 2);
  EXPECT_DOUBLE_EQ(out[2], 0.5 * (2 + 40 + 0) + 4);
}

TEST(ConvEncoderLayer, PaddedPositionsAreZeroed) {
  ParameterStore store;
  Initializer init(4);
  ConvEncoderLayer layer(store, init, "enc", 2, 3);
  const Var h = rows(1, 3, 2, {0.5, -1, 0.25, 2, 0, 0});
  const Tensor out = layer(h, constant(Tensor({1, 3}, std::vector<double>{1, 1, 0}))).value();
  EXPECT_EQ(out[4], 0.0);
  EXPECT_EQ(out[5], 0.0);
}

TEST(ConvEncoderLayer, EvenKernelIsConfigError) {
  ParameterStore store;
  Initializer init(5);
  EXPECT_THROW(ConvEncoderLayer(store, init, "enc", 2, 4), ConfigError);
}

TEST(ConvEncoderLayer, OutputLengthMatchesInput) {
  for (std::size_t k : {1u, 3u, 5u}) {
    ParameterStore store;
    Initializer init(6);
    ConvEncoderLayer layer(store, init, "enc", 2, k);
    for (std::size_t n : {1u, 2u, 4u, 7u})
      EXPECT_EQ(layer(random_input(2, n, 2, n), ones(2, n)).shape(), (Shape{2, n, 2})) << "k=" << k << " n=" << n;
  }
}

TEST(ConvEncoderLayer, ReceptiveFieldGrowsByHalfKernelPerLayer) {
  ParameterStore store;
  Initializer init(7);
  const std::size_t n = 11, d = 2, k = 3, j = 5;
  std::vector<ConvEncoderLayer> layers;
  for (int l = 0; l < 2; ++l) layers.emplace_back(store, init, "enc.l" + std::to_string(l), d, k);
  const auto run = [&](const Var& x) {
    Var h = x;
    for (const auto& layer : layers) h = layer(h, ones(1, n));
    return h.value();
  };
  const Var x = random_input(1, n, d, 8);
  std::vector<double> bumped = x.value().storage();
  bumped[j * d] += 0.5;
  const Tensor a = run(x), b = run(rows(1, n, d, bumped));
  const std::size_t reach = 2 * (k / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = std::abs(a[i * d] - b[i * d]) + std::abs(a[i * d + 1] - b[i * d + 1]);
    const std::size_t dist = i > j ? i - j : j - i;
    if (dist > reach) {
      EXPECT_EQ(diff, 0.0) << "position " << i;
    } else {
      EXPECT_GT(diff, 0.0) << "position " << i;
    }
  }
}

TEST(ConvDecoderLayer, FutureInputsDoNotAffectEarlierRows) {
  ParameterStore store;
  Initializer init(9);
  ConvDecoderLayer layer(store, init, "dec", 4, 3);
  const Var encoded = random_input(1, 3, 4, 1);
  const Var s = random_input(1, 6, 4, 2);
  const AttentionMask mask = key_padding_mask({1, 1, 1}, 1, 6, 3);
  for (std::size_t t = 0; t + 1 < 6; ++t) {
    std::vector<double> changed = s.value().storage();
    for (std::size_t i = (t + 1) * 4; i < changed.size(); ++i) changed[i] = 3.0 - changed[i];
    const Tensor a = layer(s, encoded, mask).value(), b = layer(rows(1, 6, 4, changed), encoded, mask).value();
    for (std::size_t i = 0; i < (t + 1) * 4; ++i) EXPECT_EQ(a[i], b[i]) << "t=" << t;
  }
}

TEST(ConvDecoderLayer, ZeroConvAddsUniformContext) {
  ParameterStore store;
  Initializer init(10);
  ConvDecoderLayer layer(store, init, "dec", 2, 3);
  zero(store, "dec.conv.weight");
  fill(store, "dec.attention.value.weight", {1, 0, 0, 1});
  fill(store, "dec.attention.output.weight", {1, 0, 0, 1});
  const Var encoded = rows(1, 3, 2, {1, 2, 3, -4, 100, 100});
  const Var s = random_input(1, 2, 2, 3);
  const Tensor out = layer(s, encoded, key_padding_mask({1, 1, 0}, 1, 2, 3)).value();
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_NEAR(out[t * 2], 2.0 + s.value()[t * 2], 1e-14);
    EXPECT_NEAR(out[t * 2 + 1], -1.0 + s.value()[t * 2 + 1], 1e-14);
  }
}

class CnnVariants : public ::testing::TestWithParam<std::string> {
 protected:
  ModelConfig config() const {
    ModelConfig c = toy_config("cnn");
    if (GetParam() == "fixed_positions") c.positional_encoding = "fixed";
    if (GetParam() == "wide_kernel") c.cnn_kernel_width = 5;
    return c;
  }
};

TEST_P(CnnVariants, TeacherForcedMatchesIncremental) {
  auto model = make_model(config(), 5);
  EXPECT_LT(incremental_gap(*model, toy_batch()), 1e-10);
}

TEST_P(CnnVariants, LossGradientsMatchFiniteDifferences) {
  auto model = make_model(config(), 3);
  const auto report = model_gradcheck(*model, toy_batch());
  EXPECT_TRUE(report.passed) << failing_entries(report) << " max " << report.max_relative_error;
}

INSTANTIATE_TEST_SUITE_P(Configurations, CnnVariants,
                         ::testing::Values("learned_positions", "fixed_positions", "wide_kernel"));

TEST(CnnModel, EvenKernelConfigNamesField) {
  ModelConfig c = toy_config("cnn");
  c.cnn_kernel_width = 4;
  try {
    make_model(c, 1);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cnn_kernel_width"), std::string::npos);
  }
}

TEST(CnnModel, DefaultsToLearnedPositionsAndFourLayers) {
  ModelConfig c = toy_config("cnn");
  c.encoder_layers = c.decoder_layers = 0;
  auto model = make_model(c, 1);
  EXPECT_TRUE(model->parameters().contains("source_positions"));
  EXPECT_TRUE(model->parameters().contains("encoder.l3.conv.weight"));
  EXPECT_FALSE(model->parameters().contains("encoder.l4.conv.weight"));
  EXPECT_TRUE(model->parameters().contains("decoder.l3.attention.query.weight"));
}

TEST(CnnModel, ExposesLastLayerAttention) {
  auto model = make_model(toy_config("cnn"), 2);
  auto state = model->start_decoding(SourceBatch::from(std::vector<std::vector<int>>{{4, 5, 6}, {7}}));
  const std::vector<int> bos{kBosId, kBosId};
  model->step(*state, bos);
  const auto alpha = state->last_attention();
  ASSERT_TRUE(alpha.has_value());
  ASSERT_EQ(alpha->shape(), (Shape{2, 3}));
  EXPECT_NEAR((*alpha)[0] + (*alpha)[1] + (*alpha)[2], 1.0, 1e-12);
  EXPECT_NEAR((*alpha)[3], 1.0, 1e-12);
}
