#pragma once

#include <stdexcept>
#include <string>

namespace csidiff {

// Exit codes used by the CLI.
enum exit_code : int {
  kExitOk = 0,
  kExitConfigError = 2,
  kExitDataError = 3,
  kExitNumericalError = 4,
};

// Invalid configuration values, CLI arguments, or descriptor fields.
class config_error : public std::runtime_error {
public:
  explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// File- and format-level failures (datasets, codewords, checkpoints).
class data_error : public std::runtime_error {
public:
  enum class kind {
    malformed_header,
    truncated,
    shape_mismatch,
    version_mismatch,
    io,
  };

  data_error(kind k, const std::string& msg) : std::runtime_error(msg), kind_(k) {}
  kind error_kind() const { return kind_; }

private:
  kind kind_;
};

// Non-finite losses or other numerical breakdowns.
class numerical_error : public std::runtime_error {
public:
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace csidiff
