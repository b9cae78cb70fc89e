#pragma once

// Weighted next-token objective over per-token CE values:
//
//     mask_sum:          sum_i m_i w_i CE_i / sum_i m_i
//     weighted_mask_sum: sum_i m_i w_i CE_i / sum_i m_i w_i
//
// All sums are compensated (Neumaier) in 64-bit.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "exact/binio.hpp"
#include "exact/error.hpp"
#include "exact/numeric.hpp"

namespace exact::objective {

enum class Normalization { mask_sum, weighted_mask_sum };

inline const char* to_string(Normalization n) {
    return n == Normalization::mask_sum ? "mask_sum" : "weighted_mask_sum";
}

inline Normalization parse_normalization(std::string_view s) {
    if (s == "mask_sum") return Normalization::mask_sum;
    if (s == "weighted_mask_sum") return Normalization::weighted_mask_sum;
    fail(ErrorCode::invalid_argument, "unknown normalization '" + std::string(s) + "'");
}

struct ObjectiveConfig {
    Normalization normalization = Normalization::mask_sum;
};

namespace detail {

inline void check_mask_weights(std::span<const std::uint8_t> mask, std::span<const double> weights) {
    if (mask.size() != weights.size()) {
        fail(ErrorCode::length_mismatch, "objective: mask has " + std::to_string(mask.size()) + " entries, weights " +
                                             std::to_string(weights.size()));
    }
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i] > 1) fail(ErrorCode::invalid_argument, "objective: mask values must be 0 or 1");
        if (std::isnan(weights[i])) fail(ErrorCode::non_finite, "objective: NaN weight at position " + std::to_string(i));
        if (weights[i] < 0.0) fail(ErrorCode::invalid_argument, "objective: negative weight at position " + std::to_string(i));
    }
}

inline double denominator(std::span<const std::uint8_t> mask, std::span<const double> weights, Normalization norm) {
    CompensatedSum acc;
    std::size_t supervised = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask[i]) continue;
        ++supervised;
        acc.add(norm == Normalization::mask_sum ? 1.0 : weights[i]);
    }
    if (supervised == 0) fail(ErrorCode::all_masked, "objective: all-zero loss mask");
    const double d = acc.value();
    if (!(d > 0.0)) fail(ErrorCode::all_masked, "objective: weighted mask sum is zero");
    return d;
}

}  // namespace detail

inline double weighted_loss(std::span<const double> ce, std::span<const std::uint8_t> mask,
                            std::span<const double> weights, ObjectiveConfig config = {}) {
    if (ce.size() != mask.size()) {
        fail(ErrorCode::length_mismatch, "objective: CE has " + std::to_string(ce.size()) + " entries, mask " +
                                             std::to_string(mask.size()));
    }
    detail::check_mask_weights(mask, weights);
    for (std::size_t i = 0; i < ce.size(); ++i) {
        if (std::isnan(ce[i])) fail(ErrorCode::non_finite, "objective: NaN CE at position " + std::to_string(i));
        if (ce[i] < 0.0) fail(ErrorCode::invalid_argument, "objective: negative CE at position " + std::to_string(i));
    }
    const double denom = detail::denominator(mask, weights, config.normalization);
    CompensatedSum num;
    for (std::size_t i = 0; i < ce.size(); ++i) {
        if (mask[i]) num.add(weights[i] * ce[i]);
    }
    return num.value() / denom;
}

/// dL/dCE_i for every position; dot(factors, ce) reproduces weighted_loss.
inline std::vector<double> gradient_scale(std::span<const std::uint8_t> mask, std::span<const double> weights,
                                          ObjectiveConfig config = {}) {
    detail::check_mask_weights(mask, weights);
    const double denom = detail::denominator(mask, weights, config.normalization);
    std::vector<double> out(mask.size(), 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) out[i] = weights[i] / denom;
    }
    return out;
}

// ---------------------------------------------------------------- EXCE format
//
// magic "EXCE", version u16, sequence count u64, then L f64 values per
// sequence. L is not stored; readers take it from the aligned packed stream.

inline constexpr std::string_view ce_magic = "EXCE";
inline constexpr std::uint16_t ce_version = 1;

inline std::string encode_ce_dump(std::span<const double> values, std::uint32_t sequence_length) {
    if (sequence_length == 0 || values.size() % sequence_length != 0) {
        fail(ErrorCode::length_mismatch, "CE dump: value count is not a multiple of the sequence length");
    }
    binio::Writer w;
    w.put_magic(ce_magic);
    w.put<std::uint16_t>(ce_version);
    w.put<std::uint64_t>(values.size() / sequence_length);
    for (double x : values) w.put<double>(x);
    return w.take();
}

inline std::vector<double> decode_ce_dump(std::string_view bytes, std::uint32_t sequence_length,
                                          std::string label = "CE dump") {
    binio::Reader r(bytes, std::move(label));
    r.expect_magic(ce_magic);
    r.expect_version(ce_version);
    const auto count = r.get<std::uint64_t>();
    const std::uint64_t expected = count * sequence_length * 8;
    if (r.remaining() != expected) {
        fail(ErrorCode::length_mismatch, r.label() + ": " + std::to_string(count) + " sequences of length " +
                                             std::to_string(sequence_length) + " need " + std::to_string(expected) +
                                             " payload bytes, found " + std::to_string(r.remaining()));
    }
    std::vector<double> out(count * sequence_length);
    for (auto& x : out) x = r.get<double>();
    return out;
}

}  // namespace exact::objective
