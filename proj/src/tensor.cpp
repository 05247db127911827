#include "sotu/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace sotu {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NameMismatch: return "NameMismatch";
    case Errc::DuplicateName: return "DuplicateName";
    case Errc::UnknownName: return "UnknownName";
    case Errc::NonFinite: return "NonFinite";
    case Errc::NonFiniteScalar: return "NonFiniteScalar";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::InvalidProbability: return "InvalidProbability";
    case Errc::Io: return "IoError";
    case Errc::Format: return "FormatError";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::EmptyList: return "EmptyList";
    case Errc::BaseMismatch: return "BaseMismatch";
    case Errc::ZeroDelta: return "ZeroDelta";
    case Errc::EmptyPrototypeSet: return "EmptyPrototypeSet";
    case Errc::ZeroFeature: return "ZeroFeature";
    case Errc::ClassCollision: return "ClassCollision";
    case Errc::TooFewClasses: return "TooFewClasses";
    case Errc::Internal: return "Internal";
  }
  return "Unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

DenseTensor::DenseTensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty()) throw Error(Errc::ShapeMismatch, "tensor rank must be at least 1");
  for (auto d : shape_) {
    if (d == 0) throw Error(Errc::ShapeMismatch, "zero dimension in shape " + shape_str(shape_));
  }
  if (shape_numel(shape_) != values_.size()) {
    throw Error(Errc::ShapeMismatch, "shape " + shape_str(shape_) + " does not hold " +
                                         std::to_string(values_.size()) + " values");
  }
  for (double v : values_) {
    if (!std::isfinite(v)) throw Error(Errc::NonFinite, "tensor contains a non-finite value");
  }
}

DenseTensor DenseTensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return DenseTensor(std::move(shape), std::vector<double>(n, 0.0));
}

DenseTensor DenseTensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return DenseTensor(std::move(s), std::move(values));
}

bool DenseTensor::bit_identical(const DenseTensor& other) const noexcept {
  return shape_ == other.shape_ && values_.size() == other.values_.size() &&
         std::memcmp(values_.data(), other.values_.data(), values_.size() * sizeof(double)) == 0;
}

namespace {

void require_same_shape(const DenseTensor& a, const DenseTensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(Errc::ShapeMismatch, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

DenseTensor ew_combine(const DenseTensor& a, const DenseTensor& b, Combine kind) {
  require_same_shape(a, b);
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  if (kind == Combine::add) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  }
  return DenseTensor(a.shape(), std::move(out));
}

DenseTensor scale(const DenseTensor& a, double c) {
  if (!std::isfinite(c)) throw Error(Errc::NonFiniteScalar, "scale factor is not finite");
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * av[i];
  return DenseTensor(a.shape(), std::move(out));
}

double dot(const DenseTensor& a, const DenseTensor& b) {
  require_same_shape(a, b);
  auto av = a.values();
  auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
  return s;
}

double l2_norm(const DenseTensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

DenseTensor matmul(const DenseTensor& a, const DenseTensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw Error(Errc::ShapeMismatch,
                "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return DenseTensor({m, n}, std::move(out));
}

DenseTensor transpose(const DenseTensor& a) {
  if (a.rank() != 2) throw Error(Errc::ShapeMismatch, "transpose needs a rank-2 tensor");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  auto av = a.values();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return DenseTensor({c, r}, std::move(out));
}

void ParamSet::add(std::string name, DenseTensor tensor) {
  if (name.empty()) throw Error(Errc::InvalidArgument, "parameter name must be nonempty");
  if (contains(name)) throw Error(Errc::DuplicateName, "duplicate parameter '" + name + "'");
  entries_.push_back(ParamEntry{std::move(name), std::move(tensor)});
}

void ParamSet::replace(std::string_view name, DenseTensor tensor) {
  for (auto& e : entries_) {
    if (e.name == name) {
      e.tensor = std::move(tensor);
      return;
    }
  }
  throw Error(Errc::UnknownName, "no parameter named '" + std::string(name) + "'");
}

const DenseTensor& ParamSet::at(std::string_view name) const {
  if (const auto* t = find(name)) return *t;
  throw Error(Errc::UnknownName, "no parameter named '" + std::string(name) + "'");
}

const DenseTensor* ParamSet::find(std::string_view name) const noexcept {
  for (const auto& e : entries_) {
    if (e.name == name) return &e.tensor;
  }
  return nullptr;
}

std::size_t ParamSet::num_coordinates() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

bool ParamSet::bit_identical(const ParamSet& other) const noexcept {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (!entries_[i].tensor.bit_identical(other.entries_[i].tensor)) return false;
  }
  return true;
}

void require_same_layout(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) {
    throw Error(Errc::NameMismatch, "parameter sets hold " + std::to_string(a.size()) + " and " +
                                        std::to_string(b.size()) + " tensors");
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& ea = a.entries()[i];
    const auto& eb = b.entries()[i];
    if (ea.name != eb.name) {
      throw Error(Errc::NameMismatch, "tensor '" + ea.name + "' vs '" + eb.name + "'");
    }
    if (ea.tensor.shape() != eb.tensor.shape()) {
      throw Error(Errc::ShapeMismatch, "tensor '" + ea.name + "': " + shape_str(ea.tensor.shape()) +
                                           " vs " + shape_str(eb.tensor.shape()));
    }
  }
}

}  // namespace sotu
