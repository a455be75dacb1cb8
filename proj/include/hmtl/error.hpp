#pragma once

#include <stdexcept>
#include <string>

namespace hmtl {

enum class ErrorCode {
  contract = 1,  // precondition / shape / invariant violation
  io = 2,        // file missing, short read, bad magic, CRC mismatch
  comm = 3,      // transport failure, rendezvous timeout, peer loss
  data = 4,      // corpus-level problems (empty dataset, bad spec)
  config = 5,    // unparseable config / CLI input
  internal = 6,
};

class Error : public std::runtime_error {
public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const { return code_; }

private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool ok, const std::string& msg,
                    ErrorCode code = ErrorCode::contract) {
  if (!ok) fail(code, msg);
}

}  // namespace hmtl
