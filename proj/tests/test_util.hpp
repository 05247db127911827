#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "sotu/errors.hpp"
#include "sotu/rng.hpp"
#include "sotu/sparse_delta.hpp"
#include "sotu/tensor.hpp"

namespace sotu::testing {

inline DenseTensor random_tensor(Rng& rng, Shape shape, double sd = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = sd * rng.normal();
  return DenseTensor(std::move(shape), std::move(v));
}

inline Shape random_shape(Rng& rng, std::size_t max_rank = 3, std::size_t max_dim = 5) {
  Shape s(1 + rng.below(max_rank));
  for (auto& d : s) d = 1 + rng.below(max_dim);
  return s;
}

inline ParamSet random_paramset(Rng& rng, std::size_t max_tensors = 4) {
  ParamSet ps;
  const auto n = 1 + rng.below(max_tensors);
  for (std::size_t i = 0; i < n; ++i) {
    ps.add("t" + std::to_string(i) + "_" + std::to_string(rng.below(1000)), random_tensor(rng, random_shape(rng)));
  }
  return ps;
}

inline SparseDelta random_sparse_delta(Rng& rng) {
  SparseDelta d;
  const auto ps = random_paramset(rng);
  for (const auto& e : ps) {
    SparseTensor t{e.name, e.tensor.shape(), {}, {}};
    for (std::size_t i = 0; i < e.tensor.size(); ++i) {
      if (rng.uniform() < 0.4) {
        t.indices.push_back(i);
        t.values.push_back(rng.normal());
      }
    }
    d.tensors.push_back(std::move(t));
  }
  for (auto& b : d.base.digest) b = static_cast<std::uint8_t>(rng.below(256));
  d.keep_prob = rng.uniform();
  d.seed = rng.next();
  return d;
}

template <class F>
void expect_errc(Errc code, F&& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << errc_name(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

/// Fresh empty directory under the system temp dir, unique per test name.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sotu_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sotu::testing
