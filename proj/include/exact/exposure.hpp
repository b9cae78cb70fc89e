#pragma once

// Logarithmic effective-context buckets and stream-level exposure statistics.
//
// Bucket 0 covers [0, 7]; bucket k >= 1 covers [2^(k+2), 2^(k+3) - 1], so the
// lower bounds run 0, 8, 16, ..., 1024, 2048, ... Buckets are unbounded above.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "exact/binio.hpp"
#include "exact/error.hpp"
#include "exact/numeric.hpp"
#include "exact/packer.hpp"

namespace exact::exposure {

using Bucket = std::uint32_t;

inline constexpr int bucket_scheme_version = 1;

constexpr Bucket bucket_of(std::uint64_t ell) {
    if (ell < 8) return 0;
    return static_cast<Bucket>(std::bit_width(ell) - 3);
}

/// a_b: smallest effective context that falls in bucket b.
constexpr std::uint64_t bucket_lower_bound(Bucket b) { return b == 0 ? 0 : std::uint64_t{1} << (b + 2); }

/// Largest effective context in bucket b.
constexpr std::uint64_t bucket_upper_bound(Bucket b) { return (std::uint64_t{1} << (b + 3)) - 1; }

inline std::string bucket_label(Bucket b) {
    return "[" + std::to_string(bucket_lower_bound(b)) + "," + std::to_string(bucket_upper_bound(b)) + "]";
}

/// Which per-position signal feeds the buckets.
enum class PositionSignal : std::uint8_t {
    effective_context = 0,  // ell_i
    packed_offset = 1,      // absolute position i inside the packed sequence
};

inline const char* to_string(PositionSignal s) {
    return s == PositionSignal::effective_context ? "effective_context" : "packed_offset";
}

inline std::uint64_t position_value(const packer::PackedSequence& seq, std::size_t i, PositionSignal signal) {
    return signal == PositionSignal::effective_context ? seq.effective_context[i] : i;
}

struct BucketStats {
    std::vector<std::uint64_t> counts;  // indexed by bucket; trailing entries may be zero
    std::uint64_t total = 0;            // supervised targets
    std::uint64_t fingerprint = 0;      // packer::fingerprint of the source stream
    PositionSignal signal = PositionSignal::effective_context;

    std::uint64_t count(Bucket b) const { return b < counts.size() ? counts[b] : 0; }

    void add(Bucket b, std::uint64_t n = 1) {
        if (b >= counts.size()) counts.resize(b + 1, 0);
        counts[b] += n;
        total += n;
    }

    void merge(const BucketStats& other) {
        for (Bucket b = 0; b < other.counts.size(); ++b) {
            if (other.counts[b]) add(b, other.counts[b]);
        }
    }

    /// Drop trailing empty buckets so equal statistics compare equal.
    void normalize() {
        while (!counts.empty() && counts.back() == 0) counts.pop_back();
    }

    friend bool operator==(const BucketStats&, const BucketStats&) = default;
};

inline BucketStats collect_sequence_stats(const packer::PackedSequence& seq, PositionSignal signal) {
    BucketStats stats;
    stats.signal = signal;
    for (std::size_t i = 0; i < seq.length(); ++i) {
        if (seq.loss_mask[i]) stats.add(bucket_of(position_value(seq, i, signal)));
    }
    return stats;
}

/// One pass over the stream; with workers > 1 sequences are sharded into
/// contiguous ranges and merged by addition (exact and order-independent).
inline BucketStats collect_stats(const packer::PackedStream& stream,
                                 PositionSignal signal = PositionSignal::effective_context, unsigned workers = 1) {
    const std::size_t n = stream.sequences.size();
    workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
    std::vector<BucketStats> partial(workers);
    auto run = [&](unsigned w) {
        partial[w].signal = signal;
        const std::size_t begin = n * w / workers;
        const std::size_t end = n * (w + 1) / workers;
        for (std::size_t s = begin; s < end; ++s) partial[w].merge(collect_sequence_stats(stream.sequences[s], signal));
    };
    if (workers == 1) {
        run(0);
    } else {
        std::vector<std::jthread> threads;
        for (unsigned w = 0; w < workers; ++w) threads.emplace_back(run, w);
    }
    BucketStats stats;
    stats.signal = signal;
    for (const auto& p : partial) stats.merge(p);
    stats.normalize();
    stats.fingerprint = packer::fingerprint(stream);
    return stats;
}

inline std::string occupied_summary(const BucketStats& stats) {
    std::ostringstream os;
    bool first = true;
    for (Bucket b = 0; b < stats.counts.size(); ++b) {
        if (!stats.counts[b]) continue;
        os << (first ? "" : ", ") << b << ":" << bucket_label(b) << "=" << stats.counts[b];
        first = false;
    }
    return first ? std::string("none") : os.str();
}

// ---------------------------------------------------------------- stats file

inline std::string fingerprint_hex(std::uint64_t fp) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << fp;
    return os.str();
}

inline std::uint64_t parse_fingerprint_hex(const std::string& s) {
    if (s.size() != 16 || s.find_first_not_of("0123456789abcdef") != std::string::npos) {
        fail(ErrorCode::format_error, "fingerprint must be 16 lowercase hex digits, got '" + s + "'");
    }
    return std::stoull(s, nullptr, 16);
}

inline nlohmann::json to_json(const BucketStats& stats) {
    nlohmann::json j;
    j["scheme_version"] = bucket_scheme_version;
    j["fingerprint"] = fingerprint_hex(stats.fingerprint);
    j["signal"] = to_string(stats.signal);
    j["total"] = stats.total;
    j["buckets"] = nlohmann::json::array();
    for (Bucket b = 0; b < stats.counts.size(); ++b) {
        j["buckets"].push_back({b, bucket_lower_bound(b), stats.counts[b]});
    }
    return j;
}

inline BucketStats stats_from_json(const nlohmann::json& j) {
    try {
        if (j.at("scheme_version").get<int>() != bucket_scheme_version) {
            fail(ErrorCode::format_error, "stats: unsupported bucket scheme version");
        }
        BucketStats stats;
        stats.fingerprint = parse_fingerprint_hex(j.at("fingerprint").get<std::string>());
        const auto signal = j.at("signal").get<std::string>();
        if (signal == "effective_context") {
            stats.signal = PositionSignal::effective_context;
        } else if (signal == "packed_offset") {
            stats.signal = PositionSignal::packed_offset;
        } else {
            fail(ErrorCode::format_error, "stats: unknown signal '" + signal + "'");
        }
        for (const auto& row : j.at("buckets")) {
            const auto b = row.at(0).get<Bucket>();
            if (row.at(1).get<std::uint64_t>() != bucket_lower_bound(b)) {
                fail(ErrorCode::format_error, "stats: bucket " + std::to_string(b) + " lower bound disagrees with scheme");
            }
            stats.add(b, row.at(2).get<std::uint64_t>());
        }
        stats.normalize();
        if (stats.total != j.at("total").get<std::uint64_t>()) {
            fail(ErrorCode::format_error, "stats: bucket counts do not sum to total");
        }
        return stats;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format_error, std::string("stats: ") + e.what());
    }
}

// ---------------------------------------------------------------- loss mass

struct LossMassRow {
    Bucket bucket = 0;
    std::uint64_t lower_bound = 0;
    std::uint64_t tokens = 0;
    double unweighted_mass = 0.0;  // sum of m_i * CE_i
    double weighted_mass = 0.0;    // sum of m_i * w_i * CE_i
    double unweighted_share = 0.0;
    double weighted_share = 0.0;
};

struct LossMassReport {
    std::vector<LossMassRow> rows;  // occupied buckets only, ascending
    std::uint64_t display_threshold = 0;
    double unweighted_tail_share = 0.0;  // buckets with a_b >= display_threshold
    double weighted_tail_share = 0.0;
    double unweighted_head_share = 0.0;
    double weighted_head_share = 0.0;
};

/// Per-bucket CE mass, raw and normalized per column. `ce` and `token_weights`
/// are flattened sequence-major (L values per sequence), aligned with `stream`.
inline LossMassReport loss_mass_report(const packer::PackedStream& stream, std::span<const double> ce,
                                       std::span<const double> token_weights, std::uint64_t display_threshold) {
    const std::size_t L = stream.sequence_length;
    if (ce.size() != stream.token_count()) {
        fail(ErrorCode::length_mismatch, "loss mass: CE dump has " + std::to_string(ce.size()) +
                                             " values, stream has " + std::to_string(stream.token_count()));
    }
    if (token_weights.size() != stream.token_count()) {
        fail(ErrorCode::length_mismatch, "loss mass: weight array has " + std::to_string(token_weights.size()) +
                                             " values, stream has " + std::to_string(stream.token_count()));
    }
    std::vector<CompensatedSum> plain;
    std::vector<CompensatedSum> weighted;
    std::vector<std::uint64_t> tokens;
    for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
        const auto& seq = stream.sequences[s];
        for (std::size_t i = 0; i < L; ++i) {
            if (!seq.loss_mask[i]) continue;
            const std::size_t k = s * L + i;
            if (!(ce[k] >= 0.0) || !std::isfinite(ce[k])) {
                fail(ErrorCode::non_finite, "loss mass: CE at sequence " + std::to_string(s) + " position " +
                                                std::to_string(i) + " is negative or non-finite");
            }
            const auto b = bucket_of(seq.effective_context[i]);
            if (b >= plain.size()) {
                plain.resize(b + 1);
                weighted.resize(b + 1);
                tokens.resize(b + 1, 0);
            }
            plain[b].add(ce[k]);
            weighted[b].add(token_weights[k] * ce[k]);
            ++tokens[b];
        }
    }
    LossMassReport report;
    report.display_threshold = display_threshold;
    CompensatedSum plain_total;
    CompensatedSum weighted_total;
    for (Bucket b = 0; b < plain.size(); ++b) {
        if (!tokens[b]) continue;
        LossMassRow row;
        row.bucket = b;
        row.lower_bound = bucket_lower_bound(b);
        row.tokens = tokens[b];
        row.unweighted_mass = plain[b].value();
        row.weighted_mass = weighted[b].value();
        plain_total.add(row.unweighted_mass);
        weighted_total.add(row.weighted_mass);
        report.rows.push_back(row);
    }
    const double pt = plain_total.value();
    const double wt = weighted_total.value();
    CompensatedSum tail_plain;
    CompensatedSum tail_weighted;
    CompensatedSum head_plain;
    CompensatedSum head_weighted;
    for (auto& row : report.rows) {
        row.unweighted_share = pt > 0.0 ? row.unweighted_mass / pt : 0.0;
        row.weighted_share = wt > 0.0 ? row.weighted_mass / wt : 0.0;
        if (row.lower_bound >= display_threshold) {
            tail_plain.add(row.unweighted_share);
            tail_weighted.add(row.weighted_share);
        } else {
            head_plain.add(row.unweighted_share);
            head_weighted.add(row.weighted_share);
        }
    }
    report.unweighted_tail_share = tail_plain.value();
    report.weighted_tail_share = tail_weighted.value();
    report.unweighted_head_share = head_plain.value();
    report.weighted_head_share = head_weighted.value();
    return report;
}

/// Tab-separated report for external plotting.
inline std::string format_report(const LossMassReport& report) {
    std::ostringstream os;
    os.precision(17);
    os << "# display_threshold\t" << report.display_threshold << "\n";
    os << "# tail_share\tunweighted\t" << report.unweighted_tail_share << "\tweighted\t" << report.weighted_tail_share
       << "\n";
    os << "bucket\tlower_bound\ttokens\tunweighted_mass\tweighted_mass\tunweighted_share\tweighted_share\n";
    for (const auto& r : report.rows) {
        os << r.bucket << "\t" << r.lower_bound << "\t" << r.tokens << "\t" << r.unweighted_mass << "\t"
           << r.weighted_mass << "\t" << r.unweighted_share << "\t" << r.weighted_share << "\n";
    }
    return os.str();
}

}  // namespace exact::exposure
