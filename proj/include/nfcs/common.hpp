#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace nfcs {

// Thrown for contract violations (bad shapes, out-of-vocab tokens, ...).
// Callers that can recover catch this; the CLI maps it to exit codes.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {
template <typename... A>
std::string format_msg(const A&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  return os.str();
}
}  // namespace detail

template <typename... A>
[[noreturn]] void fail(const A&... parts) {
  throw Error(detail::format_msg(parts...));
}

#define NFCS_REQUIRE(cond, ...)          \
  do {                                   \
    if (!(cond)) ::nfcs::fail(__VA_ARGS__); \
  } while (0)

}  // namespace nfcs
