#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tdm {

enum class ErrorCode {
    shape_mismatch,
    unsupported_kind,
    not_scalar,
    disconnected_graph,
    non_finite_value,
    invalid_spec,
    insufficient_classes,
    insufficient_images,
    degenerate_partition,
    invalid_plan,
    empty_support,
    single_class,
    zero_vector,
    label_out_of_range,
    non_finite_loss,
    insufficient_instances,
    insufficient_samples,
    bad_magic,
    unsupported_version,
    manifest_mismatch,
    truncated_payload,
    tolerance_exceeded,
    invalid_config,
    io_error,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Every failure raised by the library carries one of the codes above so
/// callers (and tests) can branch on the kind without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) { throw Error(code, message); }

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) raise(code, message);
}

}  // namespace tdm
