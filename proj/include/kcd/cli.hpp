#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kcd {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
/// Every failure writes one `error[<kind>]: <message>` line to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace kcd
