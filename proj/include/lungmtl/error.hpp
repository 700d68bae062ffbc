#pragma once

#include <stdexcept>
#include <string>

namespace lungmtl {

// Base for all typed errors thrown by the library. Every condition a caller
// may want to handle separately gets its own type; the message always starts
// with the type name so log lines stay greppable.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lungmtl

#define LUNGMTL_ERROR(NAME)                              \
  struct NAME : ::lungmtl::Error {                       \
    explicit NAME(const std::string& m = std::string())  \
        : Error(std::string(#NAME) + (m.empty() ? "" : ": " + m)) {} \
  };
