// SPDX-License-Identifier: Apache-2.0
#ifndef BEATKIT_COMMON_HPP
#define BEATKIT_COMMON_HPP

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace beatkit {

class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes, invalid axes, non-integral conv output sizes.
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid configuration values (even pooling windows, bad head counts, ...).
class ConfigError : public Error {
public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed input files; carries a human-readable location in the message.
class ParseError : public Error {
public:
  explicit ParseError(const std::string& msg) : Error(msg) {}
};

class IOError : public Error {
public:
  explicit IOError(const std::string& msg) : Error(msg) {}
};

namespace detail {

inline void str_impl(std::ostringstream&) {}

template <class T, class... Rest>
void str_impl(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  str_impl(os, rest...);
}

template <class... Args>
std::string str(const Args&... args) {
  std::ostringstream os;
  str_impl(os, args...);
  return os.str();
}

}  // namespace detail

}  // namespace beatkit

#endif  // BEATKIT_COMMON_HPP
