#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace saep {

/// Failure categories shared by the whole library. The CLI maps these to
/// process exit codes, tests match on them directly.
enum class Errc {
  io,         // unreadable/unwritable file
  format,     // bad magic, header, dtype, layout
  truncated,  // payload shorter than the header promises
  arg,        // caller passed an invalid argument
  shape,      // tensor extents inconsistent with the operation
  config,     // configuration violates a structural invariant
  numeric,    // numerically invalid input (zero-norm row, non-finite)
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::io: return "E_IO";
    case Errc::format: return "E_FORMAT";
    case Errc::truncated: return "E_TRUNCATED";
    case Errc::arg: return "E_ARG";
    case Errc::shape: return "E_SHAPE";
    case Errc::config: return "E_CONFIG";
    case Errc::numeric: return "E_NUMERIC";
  }
  return "E_UNKNOWN";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}

  Errc code() const noexcept { return code_; }
  const char* code_name() const noexcept { return errc_name(code_); }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool ok, Errc code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

}  // namespace saep
