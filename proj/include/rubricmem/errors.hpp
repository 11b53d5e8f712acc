#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rubricmem {

enum class Errc {
    empty_rubric,
    degenerate_weights,
    empty_criterion,
    precondition,
    backend_unavailable,
    malformed_response,
    out_of_range_response,
    partial_trace,
    empty_pool,
    mismatched_items,
    corrupt_snapshot,
    version_mismatch,
    universe_too_large,
    unparseable_criterion,
    config,
    data,
    io,
};

std::string_view to_string(Errc code) noexcept;

/// Errors the retry layer is allowed to swallow and re-issue.
constexpr bool is_retryable(Errc code) noexcept {
    return code == Errc::backend_unavailable || code == Errc::malformed_response ||
           code == Errc::out_of_range_response;
}

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    [[nodiscard]] Errc code() const noexcept { return code_; }

  private:
    Errc code_;
};

}  // namespace rubricmem
