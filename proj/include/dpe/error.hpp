#ifndef DPE_ERROR_HPP
#define DPE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace dpe {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(kind + ": " + what), kind_(std::move(kind)), message_(what) {}

    /// Short machine-readable name, e.g. "MalformedRow".
    const std::string& kind() const noexcept { return kind_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string kind_;
    std::string message_;
};

/// Bad or inconsistent input data. Maps to CLI exit code 3.
class DataError : public Error {
public:
    using Error::Error;
};

/// Numerical breakdown (non-SPD matrices, impossible divisions). Exit code 4.
class NumericalError : public Error {
public:
    using Error::Error;
};

#define DPE_DEFINE_ERROR(Name, Base)                                   \
    class Name : public Base {                                         \
    public:                                                            \
        explicit Name(const std::string& what) : Base(#Name, what) {}  \
    };

#define DPE_ERROR_KINDS(X)                 \
    X(MalformedRow, DataError)             \
    X(NonMonotonicTime, DataError)         \
    X(EmptyFile, DataError)                \
    X(ZeroVariance, DataError)             \
    X(AlignmentError, DataError)           \
    X(InfeasibleConstraints, DataError)    \
    X(EmptyInput, DataError)               \
    X(MissingChannel, DataError)           \
    X(EmptyPrimitive, DataError)           \
    X(MissingArtifact, DataError)          \
    X(ConfigMismatch, DataError)           \
    X(InvalidConfig, DataError)            \
    X(NumericalFailure, NumericalError)    \
    X(SingularCovariance, NumericalError)  \
    X(NonPositiveE, NumericalError)

DPE_ERROR_KINDS(DPE_DEFINE_ERROR)

/// Rethrow `e` as its own kind with `context` prepended to the message.
[[noreturn]] inline void rethrow_with_context(const Error& e, const std::string& context) {
#define DPE_RETHROW(Name, Base) \
    if (e.kind() == #Name) throw Name(context + ": " + e.message());
    DPE_ERROR_KINDS(DPE_RETHROW)
#undef DPE_RETHROW
    throw Error(e.kind(), context + ": " + e.message());
}

#undef DPE_DEFINE_ERROR
#undef DPE_ERROR_KINDS

}  // namespace dpe

#endif  // DPE_ERROR_HPP
