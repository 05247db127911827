#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sotu {

/// Exit codes: 0 success, 1 user error (bad flags, bad input files),
/// 2 internal error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sotu
