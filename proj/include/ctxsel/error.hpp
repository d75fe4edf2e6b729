#pragma once

#include <stdexcept>
#include <string>

namespace ctxsel {

// All library failures surface as ctxsel::Error. The code is a short stable
// token ("parse", "unknown_class", "train", ...) that the CLI reports
// verbatim so scripts can branch on it.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

}  // namespace ctxsel
