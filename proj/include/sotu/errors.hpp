#pragma once

#include <stdexcept>
#include <string>

namespace sotu {

enum class Errc {
  ShapeMismatch,
  NameMismatch,
  DuplicateName,
  UnknownName,
  NonFinite,
  NonFiniteScalar,
  InvalidArgument,
  InvalidProbability,
  Io,
  Format,
  EmptyBatch,
  EmptyList,
  BaseMismatch,
  ZeroDelta,
  EmptyPrototypeSet,
  ZeroFeature,
  ClassCollision,
  TooFewClasses,
  Internal,
};

const char* errc_name(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and the CLI exit-code mapping) can branch on the category.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code), detail_(what) {}

  Errc code() const noexcept { return code_; }
  /// The message without the code prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  Errc code_;
  std::string detail_;
};

}  // namespace sotu
