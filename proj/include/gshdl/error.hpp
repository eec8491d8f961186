#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gshdl {

/// Error categories. The CLI prints `category()` verbatim on stderr, so the
/// spellings are part of the command-line contract.
enum class ErrorKind {
    dimension,
    data,
    config,
    precondition,
    numerical,
    ingestion,
    format,
    checksum,
    version,
    render,
    io,
};

[[nodiscard]] std::string_view to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind)
    {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }
    [[nodiscard]] std::string_view category() const noexcept { return to_string(kind_); }

  private:
    ErrorKind kind_;
};

/// Raised by iterative solvers when the objective stops being finite. Carries
/// the last iterate at which everything was still well defined.
class NumericalError : public Error {
  public:
    NumericalError(const std::string& message, std::vector<double> last_good)
        : Error(ErrorKind::numerical, message), last_good_(std::move(last_good))
    {}

    [[nodiscard]] const std::vector<double>& last_good() const noexcept { return last_good_; }

  private:
    std::vector<double> last_good_;
};

} // namespace gshdl
