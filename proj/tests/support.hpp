#pragma once

// Test-only helpers: fixtures, temp directories and independent oracles.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "exact/exact.hpp"

namespace exact::testing {

namespace fs = std::filesystem;

/// Fresh, empty directory under the system temp dir.
inline fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("exact_alloc_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

inline corpus::Document make_doc(std::string id, std::size_t length, std::uint32_t first_token = 1) {
    corpus::Document d{std::move(id), {}};
    for (std::size_t i = 0; i < length; ++i) d.tokens.push_back(first_token + static_cast<std::uint32_t>(i % 97));
    return d;
}

inline std::vector<corpus::Document> docs_of_lengths(const std::vector<std::size_t>& lengths) {
    std::vector<corpus::Document> docs;
    for (std::size_t k = 0; k < lengths.size(); ++k) docs.push_back(make_doc("d" + std::to_string(k), lengths[k]));
    return docs;
}

/// Random corpus with lengths uniform in [1, max_len] and token ids < vocab.
inline std::vector<corpus::Document> random_docs(Rng& rng, std::size_t count, std::size_t max_len, std::uint32_t vocab) {
    std::vector<corpus::Document> docs;
    for (std::size_t k = 0; k < count; ++k) {
        corpus::Document d{"r" + std::to_string(k), {}};
        const auto n = 1 + rng.below(max_len);
        for (std::uint64_t i = 0; i < n; ++i) d.tokens.push_back(static_cast<std::uint32_t>(rng.below(vocab)));
        docs.push_back(std::move(d));
    }
    return docs;
}

/// Bucket index by scanning explicit intervals [0,7], [8,15], [16,31], ...
inline std::uint32_t bucket_by_interval_scan(std::uint64_t ell) {
    std::uint64_t lo = 0;
    std::uint64_t hi = 7;
    for (std::uint32_t b = 0;; ++b) {
        if (ell >= lo && ell <= hi) return b;
        lo = hi + 1;
        hi = 2 * lo - 1;
    }
}

/// Inverse-frequency weights evaluated in long double straight from the
/// defining formulas (independent of weights::compute_bucket_weights).
inline std::vector<long double> reference_tail_weights(const std::vector<std::uint64_t>& tail_counts, long double alpha,
                                                       long double gamma, long double eps) {
    long double total = 0;
    for (auto c : tail_counts) total += static_cast<long double>(c);
    std::vector<long double> q;
    std::vector<long double> r;
    long double r_bar = 0;
    for (auto c : tail_counts) {
        q.push_back(static_cast<long double>(c) / total);
        r.push_back(std::pow(q.back() + eps, -gamma));
        r_bar += q.back() * r.back();
    }
    std::vector<long double> w;
    for (auto rb : r) w.push_back(1 + alpha * rb / r_bar);
    return w;
}

/// Packed stream whose flattened mask is returned alongside.
inline std::vector<std::uint8_t> flat_mask(const packer::PackedStream& stream) {
    std::vector<std::uint8_t> m;
    for (const auto& s : stream.sequences) m.insert(m.end(), s.loss_mask.begin(), s.loss_mask.end());
    return m;
}

}  // namespace exact::testing
