#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <string>

#include "sotu/attention_probe.hpp"
#include "test_util.hpp"

namespace sotu {
namespace {

using testing::expect_errc;

void expect_row_stochastic(const DenseTensor& a) {
  const auto n = a.shape()[0], m = a.shape()[1];
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < m; ++j) {
      EXPECT_GT(a[i * m + j], 0.0);
      EXPECT_LT(a[i * m + j], 1.0);
      sum += a[i * m + j];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

AttentionInstance zero_perturbation(std::size_t n, std::size_t d, std::size_t dk, std::uint64_t seed) {
  Rng rng(seed);
  return AttentionInstance{testing::random_tensor(rng, {n, d}),     testing::random_tensor(rng, {d, dk}, 0.3),
                           testing::random_tensor(rng, {d, dk}, 0.3), testing::random_tensor(rng, {d, dk}, 0.3),
                           DenseTensor::zeros({d, dk}),             DenseTensor::zeros({d, dk}),
                           DenseTensor::zeros({d, dk})};
}

TEST(AttentionMap, ZeroScoresAreUniform) {
  auto inst = zero_perturbation(4, 3, 2, 1);
  inst.w_q = DenseTensor::zeros({3, 2});
  const auto a = attention_map(inst);
  for (double v : a.values()) EXPECT_EQ(v, 0.25);
}

TEST(AttentionMap, MatchesStraightLineOracle) {
  const auto inst = zero_perturbation(5, 4, 3, 2);
  const auto a = attention_map(inst);
  expect_row_stochastic(a);
  const std::size_t n = 5, d = 4, dk = 3;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(n);
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t c = 0; c < dk; ++c) {
        double q = 0, k = 0;
        for (std::size_t t = 0; t < d; ++t) {
          q += inst.x[i * d + t] * inst.w_q[t * dk + c];
          k += inst.x[j * d + t] * inst.w_k[t * dk + c];
        }
        acc += q * k;
      }
      s[j] = acc / std::sqrt(3.0);
    }
    double z = 0;
    for (double v : s) z += std::exp(v);
    for (std::size_t j = 0; j < n; ++j) EXPECT_NEAR(a[i * n + j], std::exp(s[j]) / z, 1e-12);
  }
}

TEST(AttentionMap, RowShiftInvariance) {
  Rng rng(3);
  std::vector<double> s(16);
  for (auto& v : s) v = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
  const DenseTensor scores({4, 4}, s);
  std::vector<double> shifted = s;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) shifted[i * 4 + j] += 0.5 * static_cast<double>(i + 1);
  }
  EXPECT_TRUE(row_softmax(scores).bit_identical(row_softmax(DenseTensor({4, 4}, shifted))));
}

TEST(AttentionMap, ShapeErrors) {
  auto inst = zero_perturbation(3, 4, 2, 4);
  inst.w_k = DenseTensor::zeros({4, 3});
  expect_errc(Errc::ShapeMismatch, [&] { attention_map(inst); });
  auto one_token = zero_perturbation(1, 4, 2, 4);
  expect_errc(Errc::ShapeMismatch, [&] { attention_map(one_token); });
}

TEST(BoundCheck, NullPerturbation) {
  const auto inst = zero_perturbation(6, 5, 4, 5);
  const auto rep = perturbation_bound_check(inst);
  EXPECT_EQ(rep.delta_min, 0.0);
  EXPECT_EQ(rep.delta_max, 0.0);
  EXPECT_EQ(rep.max_violation, 0.0);
  EXPECT_TRUE(perturbed_attention_map(inst).bit_identical(attention_map(inst)));
}

TEST(BoundCheck, UniformShiftIsTight) {
  Rng rng(6);
  std::vector<double> s(25), sh(25);
  for (std::size_t i = 0; i < 25; ++i) {
    s[i] = static_cast<double>(static_cast<int>(rng.below(40)) - 20) / 16.0;
    sh[i] = s[i] + 0.25;
  }
  const DenseTensor a({5, 5}, s), b({5, 5}, sh);
  const auto rep = bound_check_from_scores(a, b);
  EXPECT_EQ(rep.delta_min, rep.delta_max);
  EXPECT_EQ(rep.max_violation, 0.0);
  EXPECT_TRUE(row_softmax(a).bit_identical(row_softmax(b)));
}

TEST(BoundCheck, RandomSmallPerturbationsStayInside) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto inst = random_attention_instance(6, 8, 4, 0.1, seed);
    const auto s = attention_scores(inst.x, inst.w_q, inst.w_k);
    const auto sh = attention_scores(inst.x, ew_combine(inst.w_q, inst.dw_q, Combine::add),
                                     ew_combine(inst.w_k, inst.dw_k, Combine::add));
    for (std::size_t i = 0; i < s.size(); ++i) ASSERT_LE(std::abs(sh[i] - s[i]), 0.1);
    const auto rep = perturbation_bound_check(inst);
    EXPECT_LE(rep.delta_min, rep.delta_max);
    EXPECT_LE(rep.max_violation, 1e-9);
    expect_row_stochastic(perturbed_attention_map(inst));
  }
}

TEST(BoundCheck, OverflowIsNonFinite) {
  const DenseTensor s({2, 2}, {0, 0, 0, 0});
  const DenseTensor big({2, 2}, {0, 800, 0, 0});
  expect_errc(Errc::NonFinite, [&] { bound_check_from_scores(s, big); });
}

TEST(MaskStability, ExtremesAreExact) {
  const auto probe = random_mask_probe(6, 8, 4, 0.5, 9);
  const auto keep_all = mask_stability_report(probe, 0.0, 1, 10);
  for (double v : keep_all.max_rel_change) EXPECT_EQ(v, 0.0);
  // Dropping everything reverts to the base weights, so Â is the base map;
  // compare it to the base map computed directly.
  const auto base_map = row_softmax(attention_scores(probe.x, probe.base_q, probe.base_k));
  const auto tuned_map = row_softmax(attention_scores(probe.x, probe.w_q, probe.w_k));
  double expect = 0;
  for (std::size_t i = 0; i < base_map.size(); ++i) {
    expect = std::max(expect, std::abs(base_map[i] / tuned_map[i] - 1.0));
  }
  const auto drop_all = mask_stability_report(probe, 1.0, 1, 3);
  for (double v : drop_all.max_rel_change) EXPECT_EQ(v, expect);
}

TEST(MaskStability, MoreMaskingMovesAttentionMore) {
  const auto probe = random_mask_probe(8, 16, 8, 0.5, 10);
  const auto half = mask_stability_report(probe, 0.5, 3, 50);
  const auto heavy = mask_stability_report(probe, 0.95, 3, 50);
  EXPECT_LE(half.mean, heavy.mean);
  EXPECT_EQ(half.max_rel_change.size(), 50u);
  expect_errc(Errc::InvalidProbability, [&] { mask_stability_report(probe, 1.5, 0, 1); });
  expect_errc(Errc::InvalidArgument, [&] { mask_stability_report(probe, 0.5, 0, 0); });
}

TEST(MaskStability, CsvLayout) {
  const auto probe = random_mask_probe(4, 4, 2, 0.5, 11);
  const std::vector<StabilitySummary> reps{mask_stability_report(probe, 0.0, 0, 2)};
  const auto dir = testing::scratch_dir("stability");
  write_stability_csv(reps, dir / "s.csv");
  std::ifstream in(dir / "s.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(all, "p,trial,max_rel_change\n0,0,0\n0,1,0\n0,mean,0\n0,max,0\n");
}

}  // namespace
}  // namespace sotu
