#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sotu/tensor.hpp"

namespace sotu {

struct Fingerprint {
  std::array<std::uint8_t, 32> digest{};

  std::string hex() const;
  friend bool operator==(const Fingerprint&, const Fingerprint&) = default;
};

/// Kept coordinates of one tensor. Indices are flat row-major offsets,
/// strictly increasing.
struct SparseTensor {
  std::string name;
  Shape shape;
  std::vector<std::uint64_t> indices;
  std::vector<double> values;

  std::size_t numel() const { return shape_numel(shape); }
  friend bool operator==(const SparseTensor&, const SparseTensor&) = default;
};

/// A masked task delta together with the base checkpoint it was computed
/// against and the mask parameters that produced it.
struct SparseDelta {
  std::vector<SparseTensor> tensors;
  Fingerprint base;
  double keep_prob = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_kept() const;
  std::size_t num_coordinates() const;

  /// Throws Format / ShapeMismatch when an invariant is broken.
  void validate() const;

  /// Bitwise equality including the sign of zero in values.
  bool bit_identical(const SparseDelta& other) const;
};

}  // namespace sotu
