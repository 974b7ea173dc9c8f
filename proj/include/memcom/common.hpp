#pragma once

// Error taxonomy shared across the library.  Every failure mode maps to one of
// three families so the CLI can translate exceptions into stable exit codes:
// configuration/usage problems, numeric faults, and I/O or corruption faults.

#include <cstdint>
#include <stdexcept>
#include <string>

namespace memcom {

// Bad shapes, bad config values, contract misuse (wrong phase order, frozen
// writes, pattern matching nothing).  CLI exit code 1.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values, failed numeric invariants, training instability.
// CLI exit code 2.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable/corrupt files, failed checksums, lock conflicts.  CLI exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

#define MEMCOM_CHECK(cond, msg)                         \
  do {                                                  \
    if (!(cond)) throw ::memcom::ConfigError(msg);      \
  } while (0)

#define MEMCOM_CHECK_NUM(cond, msg)                     \
  do {                                                  \
    if (!(cond)) throw ::memcom::NumericError(msg);     \
  } while (0)

#define MEMCOM_CHECK_IO(cond, msg)                      \
  do {                                                  \
    if (!(cond)) throw ::memcom::IoError(msg);          \
  } while (0)

}  // namespace memcom
