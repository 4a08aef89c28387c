#pragma once

#include <stdexcept>
#include <string>

namespace ulmv {

/// Raised for bad user input (missing files, malformed configs, bad CLI
/// arguments). The CLI maps this to exit code 2; everything else is 1.
struct user_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace ulmv
