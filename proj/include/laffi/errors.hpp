#pragma once

#include <stdexcept>
#include <string>

namespace laffi {

// Base of every error the library raises. `code()` is a stable machine
// name used by the CLI exit-code mapping and the HTTP error bodies.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define LAFFI_DEFINE_ERROR(Name, code_name)                                \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& message) : Error(code_name, message) {} \
  }

LAFFI_DEFINE_ERROR(DimensionError, "dimension_error");
LAFFI_DEFINE_ERROR(NumericError, "numeric_error");
LAFFI_DEFINE_ERROR(IndexError, "index_error");
LAFFI_DEFINE_ERROR(UsageError, "usage_error");
LAFFI_DEFINE_ERROR(ConfigError, "config_error");
LAFFI_DEFINE_ERROR(LengthError, "length_error");
LAFFI_DEFINE_ERROR(ParseError, "parse_error");
LAFFI_DEFINE_ERROR(ValidationError, "validation_error");
LAFFI_DEFINE_ERROR(SizeError, "size_error");
LAFFI_DEFINE_ERROR(TemplateError, "template_error");
LAFFI_DEFINE_ERROR(DataError, "data_error");
LAFFI_DEFINE_ERROR(IoError, "io_error");
LAFFI_DEFINE_ERROR(IdentityError, "unknown_annotator");
LAFFI_DEFINE_ERROR(OwnershipError, "ownership_error");
LAFFI_DEFINE_ERROR(ConflictError, "conflict");
LAFFI_DEFINE_ERROR(NotFoundError, "not_found");

#undef LAFFI_DEFINE_ERROR

// Errors that mean "the caller handed us bad input" as opposed to a failure
// while doing the work. The CLI maps these to exit code 1.
inline bool is_validation_error(const Error& e) {
  const auto& c = e.code();
  return c == "usage_error" || c == "config_error" || c == "validation_error" ||
         c == "parse_error" || c == "template_error" || c == "size_error";
}

}  // namespace laffi
