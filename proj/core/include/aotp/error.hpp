#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aotp {

// Machine-readable error categories. The CLI prints these on stderr.
enum class ErrorCode {
  shape,
  numeric,
  input,
  config,
  format,
  io,
  batch_composition,
  usage,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::shape: return "shape";
    case ErrorCode::numeric: return "numeric";
    case ErrorCode::input: return "input";
    case ErrorCode::config: return "config";
    case ErrorCode::format: return "format";
    case ErrorCode::io: return "io";
    case ErrorCode::batch_composition: return "batch_composition";
    case ErrorCode::usage: return "usage";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define AOTP_DEFINE_ERROR(Name, Code)                                        \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& what) : Error(ErrorCode::Code, what) {} \
  }

AOTP_DEFINE_ERROR(ShapeError, shape);
AOTP_DEFINE_ERROR(NumericError, numeric);
AOTP_DEFINE_ERROR(InputError, input);
AOTP_DEFINE_ERROR(ConfigError, config);
AOTP_DEFINE_ERROR(FormatError, format);
AOTP_DEFINE_ERROR(IoError, io);
AOTP_DEFINE_ERROR(BatchCompositionError, batch_composition);

#undef AOTP_DEFINE_ERROR

}  // namespace aotp
