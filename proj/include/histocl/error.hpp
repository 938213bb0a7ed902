#pragma once

#include <stdexcept>
#include <string>

namespace histocl {

/// Base of every error raised by the library. The concrete subclasses name
/// the failure so callers can dispatch on type.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message) : std::runtime_error(message), message_(message) {}

  const char* what() const noexcept override { return message_.c_str(); }
  /// Prefixes the message, e.g. with the seed and experience that failed.
  void add_context(const std::string& context) { message_ = context + ": " + message_; }

 private:
  std::string message_;
};

#define HISTOCL_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

// stain
HISTOCL_DEFINE_ERROR(SingularMatrix);
HISTOCL_DEFINE_ERROR(DegenerateStain);
HISTOCL_DEFINE_ERROR(EmptyClass);
HISTOCL_DEFINE_ERROR(InvalidDomainSpec);

// data
HISTOCL_DEFINE_ERROR(MissingClass);
HISTOCL_DEFINE_ERROR(DecodeError);
HISTOCL_DEFINE_ERROR(IoError);

// nncore
HISTOCL_DEFINE_ERROR(ShapeMismatch);
HISTOCL_DEFINE_ERROR(UnknownTerm);
HISTOCL_DEFINE_ERROR(NonFiniteLoss);
HISTOCL_DEFINE_ERROR(NonFiniteUpdate);
HISTOCL_DEFINE_ERROR(CheckpointError);

// scenario
HISTOCL_DEFINE_ERROR(InsufficientData);
HISTOCL_DEFINE_ERROR(MissingDomain);
HISTOCL_DEFINE_ERROR(PlanMismatch);
HISTOCL_DEFINE_ERROR(LabelSpaceMismatch);

// strategy
HISTOCL_DEFINE_ERROR(BudgetTooSmall);
HISTOCL_DEFINE_ERROR(ZeroReference);
HISTOCL_DEFINE_ERROR(DegeneratePrototype);

// harness
HISTOCL_DEFINE_ERROR(ConfigError);

#undef HISTOCL_DEFINE_ERROR

}  // namespace histocl
