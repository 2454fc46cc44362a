#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace protolab::detail {

template <class... Args>
[[nodiscard]] std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace protolab::detail

// Precondition check; throws std::invalid_argument with a formatted message.
#define PROTOLAB_REQUIRE(cond, ...)                                          \
  do {                                                                       \
    if (!(cond)) throw std::invalid_argument(::protolab::detail::cat(__VA_ARGS__)); \
  } while (0)
