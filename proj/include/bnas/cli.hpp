// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_CLI_HPP
#define BNAS_CLI_HPP

#include <iosfwd>
#include <string>
#include <vector>

namespace bnas::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;

/// Runs one subcommand; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace bnas::cli

#endif // BNAS_CLI_HPP
