#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace liftkd {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name. Usage and config validation failures return 2, runtime
/// failures (including divergence) return 1.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace liftkd
