#include <gtest/gtest.h>

#include <cmath>

#include "sotu/checkpoint_io.hpp"
#include "sotu/trainer.hpp"
#include "test_util.hpp"

namespace sotu {
namespace {

using testing::expect_errc;

LabeledDataset random_batch(Rng& rng, std::size_t n, std::size_t dim, std::size_t classes) {
  std::vector<double> f(n * dim);
  for (auto& v : f) v = rng.normal();
  std::vector<ClassId> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<ClassId>(i % classes);
  return LabeledDataset(dim, std::move(f), std::move(labels));
}

// Two Gaussian blobs far apart along every axis.
LabeledDataset separable_blobs(std::size_t per_class, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> f;
  std::vector<ClassId> labels;
  for (int c = 0; c < 2; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      for (std::size_t j = 0; j < dim; ++j) f.push_back((c == 0 ? -2.0 : 2.0) + 0.5 * rng.normal());
      labels.push_back(c);
    }
  }
  return LabeledDataset(dim, std::move(f), std::move(labels));
}

TEST(InitModel, ShapesFollowSpec) {
  ModelSpec spec{4, {8}, 3, Activation::relu};
  const auto ps = init_model(spec, 1);
  ASSERT_EQ(ps.size(), 4u);
  const std::vector<std::pair<std::string, Shape>> want{
      {"layer0.w", {4, 8}}, {"layer0.b", {8}}, {"layer1.w", {8, 3}}, {"layer1.b", {3}}};
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_EQ(ps.entries()[i].name, want[i].first);
    EXPECT_EQ(ps.entries()[i].tensor.shape(), want[i].second);
  }
  for (double b : ps.at("layer0.b").values()) EXPECT_EQ(b, 0.0);
  const double limit = std::sqrt(6.0 / (4 + 8));
  for (double w : ps.at("layer0.w").values()) EXPECT_LE(std::abs(w), limit);
}

TEST(InitModel, DeterministicPerSeed) {
  ModelSpec spec;
  EXPECT_TRUE(init_model(spec, 5).bit_identical(init_model(spec, 5)));
  EXPECT_NE(fingerprint(init_model(spec, 5)), fingerprint(init_model(spec, 6)));
}

TEST(InitModel, RejectsInvalidSpecs) {
  expect_errc(Errc::InvalidArgument, [] { init_model(ModelSpec{4, {}, 3, Activation::relu}, 0); });
  expect_errc(Errc::InvalidArgument, [] { init_model(ModelSpec{4, {8}, 1, Activation::relu}, 0); });
  expect_errc(Errc::InvalidArgument, [] { init_model(ModelSpec{0, {8}, 3, Activation::relu}, 0); });
}

TEST(EmbedForward, ZeroWeightsGiveZeroEmbedding) {
  ParamSet ps;
  ps.add("layer0.w", DenseTensor::zeros({3, 4}));
  ps.add("layer0.b", DenseTensor::zeros({4}));
  ps.add("layer1.w", DenseTensor::zeros({4, 2}));
  ps.add("layer1.b", DenseTensor::zeros({2}));
  const std::vector<double> x{0.3, -7, 2};
  for (double v : embed_forward(ps, Activation::relu, x)) EXPECT_EQ(v, 0.0);
}

TEST(EmbedForward, IdentityLayerClampsNegatives) {
  ParamSet ps;
  ps.add("layer0.w", DenseTensor({2, 2}, {1, 0, 0, 1}));
  ps.add("layer0.b", DenseTensor::zeros({2}));
  const std::vector<double> x{1, -1};
  EXPECT_EQ(embed_forward(ps, Activation::relu, x), (std::vector<double>{1, 0}));
}

TEST(EmbedForward, MatchesStraightLineOracle) {
  ModelSpec spec{5, {7, 6}, 4, Activation::tanh};
  Rng rng(8);
  for (Activation act : {Activation::relu, Activation::tanh}) {
    const auto ps = init_model(spec, rng.next());
    std::vector<double> x(5);
    for (auto& v : x) v = rng.normal();
    std::vector<double> h = x;
    for (std::size_t l = 0; l < 3; ++l) {
      const auto& w = ps.at("layer" + std::to_string(l) + ".w");
      const auto& b = ps.at("layer" + std::to_string(l) + ".b");
      const std::size_t in = w.shape()[0], out = w.shape()[1];
      std::vector<double> next(out);
      for (std::size_t o = 0; o < out; ++o) {
        double a = b[o];
        for (std::size_t i = 0; i < in; ++i) a += h[i] * w[i * out + o];
        next[o] = act == Activation::relu ? std::max(0.0, a) : std::tanh(a);
      }
      h = next;
    }
    const auto got = embed_forward(ps, act, x);
    ASSERT_EQ(got.size(), h.size());
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(got[i], h[i], 1e-12);
  }
}

TEST(EmbedForward, WrongInputLength) {
  const auto ps = init_model(ModelSpec{3, {4}, 2, Activation::relu}, 0);
  const std::vector<double> x{1, 2};
  expect_errc(Errc::ShapeMismatch, [&] { embed_forward(ps, Activation::relu, x); });
}

TEST(LossAndGrad, UniformLogitsGiveLogC) {
  const auto backbone = init_model(ModelSpec{3, {4}, 2, Activation::tanh}, 0);
  ParamSet head;
  head.add("head.w", DenseTensor::zeros({2, 5}));
  head.add("head.b", DenseTensor::zeros({5}));
  Rng rng(1);
  const auto batch = random_batch(rng, 10, 3, 5);
  EXPECT_NEAR(loss_and_grad(with_head(backbone, head), Activation::tanh, batch).loss, std::log(5.0), 1e-15);
}

TEST(LossAndGrad, HeadMustMatchClassCount) {
  const auto model = with_head(init_model(ModelSpec{3, {4}, 2, Activation::tanh}, 0), init_head(2, 3, 0));
  Rng rng(2);
  const auto batch = random_batch(rng, 8, 3, 4);
  expect_errc(Errc::ShapeMismatch, [&] { loss_and_grad(model, Activation::tanh, batch); });
}

double rel_err(const DenseTensor& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += a[i] * a[i] + b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

/// Largest per-tensor relative error between analytic and central-difference gradients.
double gradient_check(Activation act, std::uint64_t seed) {
  Rng rng(seed);
  // Random biases keep every ReLU pre-activation off the kink at exactly 0.
  auto model = with_head(init_model(ModelSpec{4, {5, 3}, 3, act}, rng.next()), init_head(3, 3, rng.next()));
  for (const auto& e : ParamSet(model)) model.replace(e.name, testing::random_tensor(rng, e.tensor.shape(), 0.7));
  const auto batch = random_batch(rng, 6, 4, 3);
  const auto lg = loss_and_grad(model, act, batch);
  const double h = 1e-5;
  double worst = 0;
  for (const auto& e : model) {
    std::vector<double> numeric(e.tensor.size());
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      auto plus = std::vector<double>(e.tensor.values().begin(), e.tensor.values().end());
      auto minus = plus;
      plus[i] += h;
      minus[i] -= h;
      ParamSet mp = model, mm = model;
      mp.replace(e.name, DenseTensor(e.tensor.shape(), plus));
      mm.replace(e.name, DenseTensor(e.tensor.shape(), minus));
      numeric[i] = (loss_and_grad(mp, act, batch).loss - loss_and_grad(mm, act, batch).loss) / (2 * h);
    }
    worst = std::max(worst, rel_err(lg.grads.at(e.name), numeric));
  }
  return worst;
}

TEST(LossAndGrad, FiniteDifferencesTanh) {
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_LT(gradient_check(Activation::tanh, s), 1e-4);
}

TEST(LossAndGrad, FiniteDifferencesRelu) {
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_LT(gradient_check(Activation::relu, s), 1e-4);
}

TEST(LossAndGrad, DuplicatedRowsLeaveLossAndGradsUnchanged) {
  Rng rng(4);
  const auto model = with_head(init_model(ModelSpec{3, {4}, 2, Activation::tanh}, 1), init_head(2, 2, 2));
  const auto batch = random_batch(rng, 5, 3, 2);
  const LabeledDataset doubled = concat(std::vector<LabeledDataset>{batch, batch});
  const auto a = loss_and_grad(model, Activation::tanh, batch);
  const auto b = loss_and_grad(model, Activation::tanh, doubled);
  EXPECT_NEAR(a.loss, b.loss, 1e-14);
  for (const auto& e : a.grads) {
    const auto& other = b.grads.at(e.name);
    for (std::size_t i = 0; i < e.tensor.size(); ++i) EXPECT_NEAR(e.tensor[i], other[i], 1e-14);
  }
}

TEST(Train, ZeroEpochsReturnsInit) {
  const auto init = with_head(init_model(ModelSpec{2, {4}, 2, Activation::relu}, 3), init_head(2, 2, 4));
  const auto data = separable_blobs(10, 2, 1);
  const auto res = train(init, data, Hyper{0.1, 0, 4, 0}, Activation::relu);
  const auto split = split_head(init);
  EXPECT_TRUE(res.backbone.bit_identical(split.backbone));
  EXPECT_TRUE(res.head.bit_identical(split.head));
  EXPECT_TRUE(res.epoch_loss.empty());
}

TEST(Train, SeparableBlobsConverge) {
  const auto data = separable_blobs(50, 4, 9);
  const auto init = with_head(init_model(ModelSpec{4, {8}, 4, Activation::tanh}, 10), init_head(4, 2, 11));
  const auto res = train(init, data, Hyper{0.1, 50, 10, 12}, Activation::tanh);
  EXPECT_GE(head_accuracy(with_head(res.backbone, res.head), Activation::tanh, data), 0.99);
}

TEST(Train, DeterministicGivenSeed) {
  const auto data = separable_blobs(20, 3, 2);
  const auto init = with_head(init_model(ModelSpec{3, {6}, 3, Activation::relu}, 1), init_head(3, 2, 2));
  const Hyper h{0.05, 5, 7, 99};
  const auto a = train(init, data, h, Activation::relu);
  const auto b = train(init, data, h, Activation::relu);
  EXPECT_TRUE(a.backbone.bit_identical(b.backbone));
  EXPECT_TRUE(a.head.bit_identical(b.head));
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
}

TEST(Train, FullBatchLossIsMonotoneAtSmallRate) {
  Rng rng(21);
  const auto data = random_batch(rng, 24, 4, 3);
  for (Activation act : {Activation::relu, Activation::tanh}) {
    const auto init = with_head(init_model(ModelSpec{4, {6}, 3, act}, 5), init_head(3, 3, 6));
    const auto res = train(init, data, Hyper{1e-3, 30, data.size(), 0}, act);
    double prev = loss_and_grad(init, act, data).loss;
    for (double l : res.epoch_loss) {
      EXPECT_LE(l, prev);
      prev = l;
    }
  }
}

TEST(Train, RejectsBadHyper) {
  const auto data = separable_blobs(3, 2, 0);
  const auto init = with_head(init_model(ModelSpec{2, {3}, 2, Activation::relu}, 0), init_head(2, 2, 0));
  expect_errc(Errc::InvalidArgument, [&] { train(init, data, Hyper{0.1, 1, 7, 0}, Activation::relu); });
  expect_errc(Errc::InvalidArgument, [&] { train(init, data, Hyper{0.1, 1, 0, 0}, Activation::relu); });
  expect_errc(Errc::InvalidArgument, [&] { train(init, data, Hyper{-1, 1, 2, 0}, Activation::relu); });
}

}  // namespace
}  // namespace sotu
