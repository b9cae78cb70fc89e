#pragma once

// Supervision weights: inverse-frequency tail allocation and the ablation
// controls (uniform tail boost, packed-position buckets, random same-mass).
//
// For the long-context tail T = { b : a_b >= tau, c_b > 0 }:
//
//     q_b  = c_b / sum_{j in T} c_j
//     r_b  = (q_b + eps)^(-gamma)
//     rbar = sum_{j in T} q_j r_j
//     w_b  = 1 + alpha * r_b / rbar      (b in T),   1 otherwise
//
// so that sum_{b in T} q_b (w_b - 1) == alpha: the tail receives an average
// extra weight of exactly alpha, spread toward the rarer buckets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "exact/binio.hpp"
#include "exact/error.hpp"
#include "exact/exposure.hpp"
#include "exact/numeric.hpp"
#include "exact/packer.hpp"

namespace exact::weights {

using exposure::Bucket;
using exposure::BucketStats;
using exposure::PositionSignal;

enum class WeightKind : std::uint8_t {
    identity = 0,
    exact = 1,
    uniform_boost = 2,
    packed_position = 3,
    random_same_mass = 4,
};

inline const char* to_string(WeightKind k) {
    switch (k) {
        case WeightKind::identity: return "identity";
        case WeightKind::exact: return "exact";
        case WeightKind::uniform_boost: return "uniform_boost";
        case WeightKind::packed_position: return "packed_position";
        case WeightKind::random_same_mass: return "random_same_mass";
    }
    return "unknown";
}

inline WeightKind parse_kind(std::string_view s) {
    for (auto k : {WeightKind::identity, WeightKind::exact, WeightKind::uniform_boost, WeightKind::packed_position,
                   WeightKind::random_same_mass}) {
        if (s == to_string(k)) return k;
    }
    fail(ErrorCode::invalid_argument, "unknown weight kind '" + std::string(s) + "'");
}

/// The bucket signal a policy's table is built from.
constexpr PositionSignal signal_for(WeightKind k) {
    return k == WeightKind::packed_position ? PositionSignal::packed_offset : PositionSignal::effective_context;
}

struct WeightPolicy {
    WeightKind kind = WeightKind::exact;
    double alpha = 0.15;
    double gamma = 0.5;
    double epsilon = 1e-4;
    std::uint32_t tau = 1024;  // tokens; compared against bucket lower bounds
    std::uint64_t seed = 0;    // random_same_mass only

    void validate() const {
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail(ErrorCode::invalid_argument, "weights: alpha must be finite and >= 0");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) fail(ErrorCode::invalid_argument, "weights: gamma must be finite and >= 0");
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) fail(ErrorCode::invalid_argument, "weights: epsilon must be finite and > 0");
    }

    friend bool operator==(const WeightPolicy&, const WeightPolicy&) = default;
};

struct WeightTable {
    WeightKind kind = WeightKind::identity;
    PositionSignal signal = PositionSignal::effective_context;
    std::vector<double> weights;  // per bucket; buckets past the end weigh 1
    std::vector<Bucket> tail;     // ascending
    std::vector<double> q;        // aligned with tail
    std::vector<double> r;        // aligned with tail
    double r_bar = 1.0;
    std::uint64_t fingerprint = 0;

    double weight(Bucket b) const { return b < weights.size() ? weights[b] : 1.0; }

    bool in_tail(Bucket b) const { return std::binary_search(tail.begin(), tail.end(), b); }

    /// sum_{b in T} q_b (w_b - 1), evaluated in compensated 64-bit arithmetic.
    double tail_extra_mass() const {
        CompensatedSum acc;
        for (std::size_t k = 0; k < tail.size(); ++k) acc.add(q[k] * (weight(tail[k]) - 1.0));
        return acc.value();
    }

    friend bool operator==(const WeightTable&, const WeightTable&) = default;
};

/// Per-bucket weights for `policy` from stream statistics.
///
/// packed_position expects statistics collected over absolute packed offsets;
/// random_same_mass uses the inverse-frequency table as the multiset it later
/// redistributes.
inline WeightTable compute_bucket_weights(const BucketStats& stats, const WeightPolicy& policy) {
    policy.validate();
    if (stats.total == 0) fail(ErrorCode::invalid_argument, "weights: statistics contain no supervised tokens");
    if (stats.signal != signal_for(policy.kind)) {
        fail(ErrorCode::invalid_argument, std::string("weights: kind ") + to_string(policy.kind) + " needs " +
                                              exposure::to_string(signal_for(policy.kind)) + " statistics, got " +
                                              exposure::to_string(stats.signal));
    }

    WeightTable table;
    table.kind = policy.kind;
    table.signal = stats.signal;
    table.fingerprint = stats.fingerprint;
    table.weights.assign(stats.counts.size(), 1.0);

    std::uint64_t tail_total = 0;
    for (Bucket b = 0; b < stats.counts.size(); ++b) {
        if (exposure::bucket_lower_bound(b) >= policy.tau && stats.counts[b] > 0) {
            table.tail.push_back(b);
            tail_total += stats.counts[b];
        }
    }
    if (policy.kind == WeightKind::identity) return table;
    if (table.tail.empty()) {
        fail(ErrorCode::empty_tail, "weights: empty tail, no occupied bucket has lower bound >= tau=" +
                                        std::to_string(policy.tau) + "; occupied buckets: " +
                                        exposure::occupied_summary(stats));
    }

    const double denom = static_cast<double>(tail_total);
    for (auto b : table.tail) table.q.push_back(static_cast<double>(stats.counts[b]) / denom);

    if (policy.kind == WeightKind::uniform_boost) {
        table.r.assign(table.tail.size(), 1.0);
        table.r_bar = 1.0;
        for (auto b : table.tail) table.weights[b] = 1.0 + policy.alpha;
        return table;
    }

    // r_bar = sum_T q_b r_b, formed as sum_T c_b r_b / sum_T c_b so that
    // gamma = 0 gives exactly 1 and the table matches uniform_boost bit for bit.
    CompensatedSum weighted_r;
    for (std::size_t k = 0; k < table.tail.size(); ++k) {
        const double rb = std::pow(table.q[k] + policy.epsilon, -policy.gamma);
        table.r.push_back(rb);
        weighted_r.add(static_cast<double>(stats.counts[table.tail[k]]) * rb);
    }
    table.r_bar = weighted_r.value() / denom;
    for (std::size_t k = 0; k < table.tail.size(); ++k) {
        table.weights[table.tail[k]] = 1.0 + policy.alpha * table.r[k] / table.r_bar;
    }
    return table;
}

/// Statistics for `policy`'s signal followed by compute_bucket_weights.
inline WeightTable build_weight_table(const packer::PackedStream& stream, const WeightPolicy& policy,
                                      unsigned workers = 1) {
    return compute_bucket_weights(exposure::collect_stats(stream, signal_for(policy.kind), workers), policy);
}

/// Per-token weights, flattened sequence-major and aligned with the stream.
/// Masked and pad positions always receive weight 1.
inline std::vector<double> assign_token_weights(const packer::PackedStream& stream, const WeightTable& table,
                                                const WeightPolicy& policy) {
    policy.validate();
    const std::size_t L = stream.sequence_length;
    std::vector<double> out(stream.token_count(), 1.0);
    if (policy.kind == WeightKind::identity) return out;

    if (table.kind != policy.kind && !(policy.kind == WeightKind::packed_position)) {
        fail(ErrorCode::invalid_argument, std::string("weights: table kind ") + to_string(table.kind) +
                                              " does not match policy kind " + to_string(policy.kind));
    }
    const auto stream_fp = packer::fingerprint(stream);
    if (table.fingerprint != stream_fp) {
        fail(ErrorCode::fingerprint_mismatch, "weights: table fingerprint " + exposure::fingerprint_hex(table.fingerprint) +
                                                  " does not match stream " + exposure::fingerprint_hex(stream_fp));
    }

    // The packed-position control reruns the whole pipeline on absolute offsets.
    std::optional<WeightTable> recollected;
    if (policy.kind == WeightKind::packed_position && table.signal != PositionSignal::packed_offset) {
        recollected = build_weight_table(stream, policy);
    }
    const WeightTable& t = recollected ? *recollected : table;
    const PositionSignal signal = signal_for(policy.kind);

    for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
        const auto& seq = stream.sequences[s];
        for (std::size_t i = 0; i < L; ++i) {
            if (seq.loss_mask[i]) out[s * L + i] = t.weight(exposure::bucket_of(exposure::position_value(seq, i, signal)));
        }
    }

    if (policy.kind == WeightKind::random_same_mass) {
        // Each sequence's supervised weight multiset is reassigned to a seeded
        // random permutation of its supervised positions.
        std::vector<std::size_t> positions;
        std::vector<double> values;
        for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
            const auto& seq = stream.sequences[s];
            positions.clear();
            values.clear();
            for (std::size_t i = 0; i < L; ++i) {
                if (seq.loss_mask[i]) {
                    positions.push_back(s * L + i);
                    values.push_back(out[s * L + i]);
                }
            }
            Rng rng(derive_seed(policy.seed, s));
            rng.shuffle(std::span<double>(values));
            for (std::size_t k = 0; k < positions.size(); ++k) out[positions[k]] = values[k];
        }
    }
    return out;
}

/// sum_i m_i (w_i - 1), summed in sorted order so that any two weight arrays
/// holding the same supervised multiset give bit-identical results.
inline double extra_weight_mass(const packer::PackedStream& stream, std::span<const double> token_weights) {
    const std::size_t L = stream.sequence_length;
    std::vector<double> extra;
    for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
        for (std::size_t i = 0; i < L; ++i) {
            if (stream.sequences[s].loss_mask[i]) extra.push_back(token_weights[s * L + i] - 1.0);
        }
    }
    std::sort(extra.begin(), extra.end());
    return compensated_sum(extra);
}

// ---------------------------------------------------------------- table file

inline nlohmann::json to_json(const WeightTable& table, const WeightPolicy& policy) {
    nlohmann::json j;
    j["kind"] = to_string(policy.kind);
    j["alpha"] = policy.alpha;
    j["gamma"] = policy.gamma;
    j["epsilon"] = policy.epsilon;
    j["tau"] = policy.tau;
    j["seed"] = policy.seed;
    j["signal"] = exposure::to_string(table.signal);
    j["fingerprint"] = exposure::fingerprint_hex(table.fingerprint);
    j["r_bar"] = table.r_bar;
    j["tail_extra_mass"] = table.tail_extra_mass();
    j["buckets"] = nlohmann::json::array();
    for (Bucket b = 0; b < table.weights.size(); ++b) {
        nlohmann::json row{{"bucket", b}, {"lower_bound", exposure::bucket_lower_bound(b)}, {"weight", table.weights[b]}};
        const auto it = std::lower_bound(table.tail.begin(), table.tail.end(), b);
        if (it != table.tail.end() && *it == b) {
            const auto k = static_cast<std::size_t>(it - table.tail.begin());
            row["q"] = table.q[k];
            row["r"] = table.r[k];
        }
        j["buckets"].push_back(row);
    }
    return j;
}

struct TableFile {
    WeightTable table;
    WeightPolicy policy;
};

inline TableFile table_from_json(const nlohmann::json& j) {
    try {
        TableFile f;
        f.policy.kind = parse_kind(j.at("kind").get<std::string>());
        f.policy.alpha = j.at("alpha").get<double>();
        f.policy.gamma = j.at("gamma").get<double>();
        f.policy.epsilon = j.at("epsilon").get<double>();
        f.policy.tau = j.at("tau").get<std::uint32_t>();
        f.policy.seed = j.at("seed").get<std::uint64_t>();
        f.table.kind = f.policy.kind;
        f.table.signal = signal_for(f.policy.kind);
        f.table.fingerprint = exposure::parse_fingerprint_hex(j.at("fingerprint").get<std::string>());
        f.table.r_bar = j.at("r_bar").get<double>();
        for (const auto& row : j.at("buckets")) {
            const auto b = row.at("bucket").get<Bucket>();
            if (b != f.table.weights.size()) fail(ErrorCode::format_error, "weight table: buckets must be contiguous from 0");
            f.table.weights.push_back(row.at("weight").get<double>());
            if (row.contains("q")) {
                f.table.tail.push_back(b);
                f.table.q.push_back(row.at("q").get<double>());
                f.table.r.push_back(row.at("r").get<double>());
            }
        }
        return f;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format_error, std::string("weight table: ") + e.what());
    }
}

// ---------------------------------------------------------------- EXWT format
//
// magic "EXWT", version u16,
// policy: kind u8, alpha f64, gamma f64, epsilon f64, tau u32, seed u64,
// stream fingerprint u64,
// bucket table: count u16, then (index u16, weight f64) per bucket,
// sequence_length u32, sequence count u64,
// then sequence_length f32 weights per sequence.

inline constexpr std::string_view weight_magic = "EXWT";
inline constexpr std::uint16_t weight_version = 1;

struct WeightFile {
    WeightPolicy policy;
    std::uint64_t fingerprint = 0;
    std::vector<double> bucket_weights;
    std::uint32_t sequence_length = 0;
    std::uint64_t sequence_count = 0;
    std::vector<float> token_weights;
};

inline std::string encode_weight_file(const WeightPolicy& policy, const WeightTable& table,
                                      const packer::PackedStream& stream, std::span<const double> token_weights) {
    if (token_weights.size() != stream.token_count()) {
        fail(ErrorCode::length_mismatch, "weight file: token weights do not align with the stream");
    }
    if (table.weights.size() > std::numeric_limits<std::uint16_t>::max()) {
        fail(ErrorCode::invalid_argument, "weight file: too many buckets");
    }
    binio::Writer w;
    w.put_magic(weight_magic);
    w.put<std::uint16_t>(weight_version);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(policy.kind));
    w.put<double>(policy.alpha);
    w.put<double>(policy.gamma);
    w.put<double>(policy.epsilon);
    w.put<std::uint32_t>(policy.tau);
    w.put<std::uint64_t>(policy.seed);
    w.put<std::uint64_t>(packer::fingerprint(stream));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(table.weights.size()));
    for (Bucket b = 0; b < table.weights.size(); ++b) {
        w.put<std::uint16_t>(static_cast<std::uint16_t>(b));
        w.put<double>(table.weights[b]);
    }
    w.put<std::uint32_t>(stream.sequence_length);
    w.put<std::uint64_t>(stream.sequences.size());
    for (double x : token_weights) w.put<float>(static_cast<float>(x));
    return w.take();
}

inline WeightFile decode_weight_file(std::string_view bytes, std::string label = "weight file") {
    binio::Reader r(bytes, std::move(label));
    r.expect_magic(weight_magic);
    r.expect_version(weight_version);
    WeightFile f;
    const auto kind = r.get<std::uint8_t>();
    if (kind > static_cast<std::uint8_t>(WeightKind::random_same_mass)) {
        fail(ErrorCode::format_error, r.label() + ": unknown weight kind " + std::to_string(kind));
    }
    f.policy.kind = static_cast<WeightKind>(kind);
    f.policy.alpha = r.get<double>();
    f.policy.gamma = r.get<double>();
    f.policy.epsilon = r.get<double>();
    f.policy.tau = r.get<std::uint32_t>();
    f.policy.seed = r.get<std::uint64_t>();
    f.fingerprint = r.get<std::uint64_t>();
    const auto buckets = r.get<std::uint16_t>();
    for (std::uint16_t k = 0; k < buckets; ++k) {
        if (r.get<std::uint16_t>() != k) fail(ErrorCode::format_error, r.label() + ": bucket table must be contiguous");
        f.bucket_weights.push_back(r.get<double>());
    }
    f.sequence_length = r.get<std::uint32_t>();
    f.sequence_count = r.get<std::uint64_t>();
    const auto n = static_cast<std::uint64_t>(f.sequence_length) * f.sequence_count;
    if (n > r.remaining() / 4) fail(ErrorCode::format_error, r.label() + ": truncated token weights");
    f.token_weights.resize(n);
    for (auto& x : f.token_weights) x = r.get<float>();
    r.expect_end();
    return f;
}

/// Check a decoded weight file against the packed stream it claims to describe.
inline void check_alignment(const WeightFile& f, const packer::PackedStream& stream) {
    if (f.sequence_length != stream.sequence_length || f.sequence_count != stream.sequences.size()) {
        fail(ErrorCode::length_mismatch, "weight file shape does not match the packed stream");
    }
    const auto fp = packer::fingerprint(stream);
    if (f.fingerprint != fp) {
        fail(ErrorCode::fingerprint_mismatch, "weight file fingerprint " + exposure::fingerprint_hex(f.fingerprint) +
                                                  " does not match stream " + exposure::fingerprint_hex(fp));
    }
}

inline std::vector<double> widen(std::span<const float> xs) { return {xs.begin(), xs.end()}; }

}  // namespace exact::weights
