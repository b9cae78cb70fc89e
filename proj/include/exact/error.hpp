#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace exact {

/// Stable, machine-readable error categories. The CLI prints them verbatim.
enum class ErrorCode {
    invalid_argument,
    malformed_record,
    empty_document,
    token_out_of_range,
    manifest_mismatch,
    format_error,
    fingerprint_mismatch,
    length_mismatch,
    empty_tail,
    all_masked,
    non_finite,
    divergence,
    geometry_violation,
    arm_mismatch,
    bin_mismatch,
    unpaired_records,
    empty_cell,
    io_error,
};

inline const char* to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid_argument";
        case ErrorCode::malformed_record: return "malformed_record";
        case ErrorCode::empty_document: return "empty_document";
        case ErrorCode::token_out_of_range: return "token_out_of_range";
        case ErrorCode::manifest_mismatch: return "manifest_mismatch";
        case ErrorCode::format_error: return "format_error";
        case ErrorCode::fingerprint_mismatch: return "fingerprint_mismatch";
        case ErrorCode::length_mismatch: return "length_mismatch";
        case ErrorCode::empty_tail: return "empty_tail";
        case ErrorCode::all_masked: return "all_masked";
        case ErrorCode::non_finite: return "non_finite";
        case ErrorCode::divergence: return "divergence";
        case ErrorCode::geometry_violation: return "geometry_violation";
        case ErrorCode::arm_mismatch: return "arm_mismatch";
        case ErrorCode::bin_mismatch: return "bin_mismatch";
        case ErrorCode::unpaired_records: return "unpaired_records";
        case ErrorCode::empty_cell: return "empty_cell";
        case ErrorCode::io_error: return "io_error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, std::string message)
        : std::runtime_error(std::move(message)), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, std::string message) {
    throw Error(code, std::move(message));
}

}  // namespace exact
