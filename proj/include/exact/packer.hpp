#pragma once

// Greedy fixed-length packing with document-boundary segment bookkeeping.
//
// Every position i of a packed sequence carries its effective left context
// ell_i = i - s(i), where s(i) is the greatest segment start <= i. A document
// that overflows the current sequence continues as a fresh segment at offset 0
// of the next one, so carried-over context is never counted.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "exact/binio.hpp"
#include "exact/corpus.hpp"
#include "exact/error.hpp"
#include "exact/numeric.hpp"

namespace exact::packer {

using corpus::Document;
using corpus::TokenId;

inline constexpr TokenId default_pad_id = std::numeric_limits<TokenId>::max();

struct SegmentRef {
    std::string doc_id;
    std::uint32_t chunk_index = 0;

    friend bool operator==(const SegmentRef&, const SegmentRef&) = default;
};

struct PackedSequence {
    std::vector<TokenId> tokens;
    std::vector<std::uint32_t> segment_starts;
    std::vector<std::uint8_t> loss_mask;
    std::vector<std::uint32_t> effective_context;
    std::vector<SegmentRef> doc_refs;  // one per segment; empty when loaded without sidecar

    std::size_t length() const { return tokens.size(); }

    friend bool operator==(const PackedSequence&, const PackedSequence&) = default;
};

struct PackPolicy {
    std::uint32_t sequence_length = 1024;
    std::optional<std::uint64_t> document_permutation_seed;
    bool drop_final_partial = true;
    TokenId pad_id = default_pad_id;

    void validate() const {
        if (sequence_length < 2) fail(ErrorCode::invalid_argument, "pack: sequence length must be >= 2");
    }
};

struct PackedStream {
    std::uint32_t sequence_length = 0;
    TokenId pad_id = default_pad_id;
    std::vector<PackedSequence> sequences;

    std::size_t token_count() const { return sequences.size() * static_cast<std::size_t>(sequence_length); }

    friend bool operator==(const PackedStream&, const PackedStream&) = default;
};

/// Reference O(L) scan back to the nearest segment start. Test-only oracle.
inline std::uint32_t effective_context_oracle(const PackedSequence& seq, std::size_t i) {
    const auto is_start = [&](std::size_t j) {
        return std::find(seq.segment_starts.begin(), seq.segment_starts.end(), j) != seq.segment_starts.end();
    };
    std::uint32_t count = 0;
    std::size_t j = i;
    while (j > 0 && !is_start(j)) {
        --j;
        ++count;
    }
    return count;
}

/// Structural checks: shapes, sorted starts beginning at 0, ell matches starts.
inline void validate_sequence(const PackedSequence& seq, std::uint32_t sequence_length, std::size_t index = 0) {
    const auto where = "sequence " + std::to_string(index);
    const std::size_t L = sequence_length;
    if (seq.tokens.size() != L || seq.loss_mask.size() != L || seq.effective_context.size() != L) {
        fail(ErrorCode::format_error, where + ": array lengths do not match sequence length " + std::to_string(L));
    }
    if (seq.segment_starts.empty() || seq.segment_starts.front() != 0) {
        fail(ErrorCode::format_error, where + ": segment_starts must begin with 0");
    }
    for (std::size_t k = 1; k < seq.segment_starts.size(); ++k) {
        if (seq.segment_starts[k] <= seq.segment_starts[k - 1] || seq.segment_starts[k] >= L) {
            fail(ErrorCode::format_error, where + ": segment_starts must be strictly increasing and < L");
        }
    }
    if (!seq.doc_refs.empty() && seq.doc_refs.size() != seq.segment_starts.size()) {
        fail(ErrorCode::format_error, where + ": doc_refs count does not match segment count");
    }
    std::size_t seg = 0;
    for (std::size_t i = 0; i < L; ++i) {
        if (seg + 1 < seq.segment_starts.size() && seq.segment_starts[seg + 1] == i) ++seg;
        const auto expected = static_cast<std::uint32_t>(i - seq.segment_starts[seg]);
        if (seq.effective_context[i] != expected) {
            fail(ErrorCode::format_error, where + ": effective context at position " + std::to_string(i) + " is " +
                                              std::to_string(seq.effective_context[i]) + ", expected " +
                                              std::to_string(expected));
        }
        if (seq.loss_mask[i] > 1) fail(ErrorCode::format_error, where + ": loss mask values must be 0 or 1");
    }
}

/// Streaming greedy packer. Completed sequences are handed to the sink in order.
class Packer {
public:
    using Sink = std::function<void(PackedSequence&&)>;

    Packer(PackPolicy policy, Sink sink) : policy_(std::move(policy)), sink_(std::move(sink)) {
        policy_.validate();
        reset_current();
    }

    void push(const Document& doc) {
        if (doc.tokens.empty()) fail(ErrorCode::empty_document, "pack: empty document '" + doc.doc_id + "'");
        for (std::size_t i = 0; i < doc.tokens.size(); ++i) {
            if (doc.tokens[i] == policy_.pad_id) {
                fail(ErrorCode::token_out_of_range, "pack: document '" + doc.doc_id + "' position " +
                                                        std::to_string(i) + " uses the reserved pad id " +
                                                        std::to_string(policy_.pad_id));
            }
        }
        const std::size_t L = policy_.sequence_length;
        std::size_t offset = 0;
        std::uint32_t chunk = 0;
        while (offset < doc.tokens.size()) {
            const std::size_t fill = current_.tokens.size();
            const std::size_t take = std::min(L - fill, doc.tokens.size() - offset);
            if (current_.segment_starts.size() == std::numeric_limits<std::uint16_t>::max()) {
                fail(ErrorCode::invalid_argument, "pack: more than 65535 segments in one sequence");
            }
            current_.segment_starts.push_back(static_cast<std::uint32_t>(fill));
            current_.doc_refs.push_back({doc.doc_id, chunk++});
            for (std::size_t k = 0; k < take; ++k) {
                current_.tokens.push_back(doc.tokens[offset + k]);
                current_.loss_mask.push_back(1);
                current_.effective_context.push_back(static_cast<std::uint32_t>(k));
            }
            offset += take;
            if (current_.tokens.size() == L) emit();
        }
    }

    /// Flush the trailing partial sequence (pad or drop per policy).
    void finish() {
        if (current_.tokens.empty()) return;
        if (policy_.drop_final_partial) {
            reset_current();
            return;
        }
        const std::size_t L = policy_.sequence_length;
        std::uint32_t ell = current_.effective_context.back();
        while (current_.tokens.size() < L) {
            current_.tokens.push_back(policy_.pad_id);
            current_.loss_mask.push_back(0);
            current_.effective_context.push_back(++ell);
        }
        emit();
    }

private:
    void emit() {
        sink_(std::move(current_));
        reset_current();
    }
    void reset_current() {
        current_ = PackedSequence{};
        current_.tokens.reserve(policy_.sequence_length);
        current_.loss_mask.reserve(policy_.sequence_length);
        current_.effective_context.reserve(policy_.sequence_length);
    }

    PackPolicy policy_;
    Sink sink_;
    PackedSequence current_;
};

inline PackedStream pack_stream(const std::vector<Document>& docs, const PackPolicy& policy) {
    PackedStream out;
    out.sequence_length = policy.sequence_length;
    out.pad_id = policy.pad_id;
    Packer packer(policy, [&](PackedSequence&& s) { out.sequences.push_back(std::move(s)); });
    if (policy.document_permutation_seed) {
        std::vector<std::size_t> order(docs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(*policy.document_permutation_seed);
        rng.shuffle(std::span<std::size_t>(order));
        for (auto i : order) packer.push(docs[i]);
    } else {
        for (const auto& d : docs) packer.push(d);
    }
    packer.finish();
    return out;
}

/// Regroup segments by (doc_id, chunk) and concatenate; requires doc_refs.
inline std::map<std::string, std::vector<TokenId>> reconstruct_documents(const PackedStream& stream) {
    std::map<std::string, std::map<std::uint32_t, std::vector<TokenId>>> chunks;
    for (const auto& seq : stream.sequences) {
        if (seq.doc_refs.size() != seq.segment_starts.size()) {
            fail(ErrorCode::invalid_argument, "reconstruct: stream carries no segment document references");
        }
        for (std::size_t k = 0; k < seq.segment_starts.size(); ++k) {
            const std::size_t begin = seq.segment_starts[k];
            const std::size_t end = k + 1 < seq.segment_starts.size() ? seq.segment_starts[k + 1] : seq.length();
            auto& dst = chunks[seq.doc_refs[k].doc_id][seq.doc_refs[k].chunk_index];
            for (std::size_t i = begin; i < end; ++i) {
                if (seq.loss_mask[i] == 0 && seq.tokens[i] == stream.pad_id) break;
                dst.push_back(seq.tokens[i]);
            }
        }
    }
    std::map<std::string, std::vector<TokenId>> docs;
    for (auto& [id, parts] : chunks) {
        auto& out = docs[id];
        for (auto& [chunk, tokens] : parts) out.insert(out.end(), tokens.begin(), tokens.end());
    }
    return docs;
}

// ---------------------------------------------------------------- EXPK format

inline constexpr std::string_view packed_magic = "EXPK";
inline constexpr std::uint16_t packed_version = 1;

/// Mask bits are packed LSB-first: position i lives in bit (i % 8) of byte i / 8.
inline std::string encode(const PackedStream& stream) {
    binio::Writer w;
    w.put_magic(packed_magic);
    w.put<std::uint16_t>(packed_version);
    w.put<std::uint32_t>(stream.sequence_length);
    w.put<std::uint64_t>(stream.sequences.size());
    w.put<std::uint32_t>(stream.pad_id);
    const std::size_t L = stream.sequence_length;
    for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
        const auto& seq = stream.sequences[s];
        validate_sequence(seq, stream.sequence_length, s);
        for (auto t : seq.tokens) w.put<std::uint32_t>(t);
        w.put<std::uint16_t>(static_cast<std::uint16_t>(seq.segment_starts.size()));
        for (auto start : seq.segment_starts) w.put<std::uint32_t>(start);
        std::string bits((L + 7) / 8, '\0');
        for (std::size_t i = 0; i < L; ++i) {
            if (seq.loss_mask[i]) bits[i / 8] = static_cast<char>(bits[i / 8] | (1u << (i % 8)));
        }
        w.put_bytes(bits);
        for (auto ell : seq.effective_context) w.put<std::uint32_t>(ell);
    }
    return w.take();
}

inline PackedStream decode(std::string_view bytes, std::string label = "packed stream") {
    binio::Reader r(bytes, std::move(label));
    r.expect_magic(packed_magic);
    r.expect_version(packed_version);
    PackedStream stream;
    stream.sequence_length = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    stream.pad_id = r.get<std::uint32_t>();
    const std::size_t L = stream.sequence_length;
    if (L < 2) fail(ErrorCode::format_error, r.label() + ": sequence length must be >= 2");
    // Lower bound on per-sequence bytes guards against absurd counts in corrupt headers.
    const std::size_t min_seq_bytes = L * 8 + 2 + 4 + (L + 7) / 8;
    if (count > r.remaining() / min_seq_bytes) {
        fail(ErrorCode::format_error, r.label() + ": sequence count " + std::to_string(count) + " exceeds file size");
    }
    stream.sequences.reserve(count);
    for (std::uint64_t s = 0; s < count; ++s) {
        PackedSequence seq;
        seq.tokens.resize(L);
        for (auto& t : seq.tokens) t = r.get<std::uint32_t>();
        const auto segs = r.get<std::uint16_t>();
        seq.segment_starts.resize(segs);
        for (auto& start : seq.segment_starts) start = r.get<std::uint32_t>();
        const auto bits = r.get_bytes((L + 7) / 8);
        seq.loss_mask.resize(L);
        for (std::size_t i = 0; i < L; ++i) {
            seq.loss_mask[i] = (static_cast<unsigned char>(bits[i / 8]) >> (i % 8)) & 1u;
        }
        seq.effective_context.resize(L);
        for (auto& ell : seq.effective_context) ell = r.get<std::uint32_t>();
        validate_sequence(seq, stream.sequence_length, s);
        stream.sequences.push_back(std::move(seq));
    }
    r.expect_end();
    return stream;
}

/// Identity of a packed stream: FNV-1a over its canonical EXPK encoding.
inline std::uint64_t fingerprint(const PackedStream& stream) { return fnv1a64(encode(stream)); }

// Segment document references travel in a JSON-lines sidecar next to the EXPK file.
inline std::string encode_doc_refs(const PackedStream& stream) {
    std::string out;
    for (const auto& seq : stream.sequences) {
        nlohmann::json row = nlohmann::json::array();
        for (const auto& ref : seq.doc_refs) row.push_back({ref.doc_id, ref.chunk_index});
        out += row.dump();
        out += '\n';
    }
    return out;
}

inline void attach_doc_refs(PackedStream& stream, std::string_view text) {
    std::size_t pos = 0;
    std::size_t s = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        if (s >= stream.sequences.size()) fail(ErrorCode::format_error, "segment sidecar has more rows than sequences");
        auto& seq = stream.sequences[s++];
        try {
            seq.doc_refs.clear();
            for (const auto& ref : nlohmann::json::parse(line)) {
                seq.doc_refs.push_back({ref.at(0).get<std::string>(), ref.at(1).get<std::uint32_t>()});
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::format_error, "segment sidecar row " + std::to_string(s) + ": " + e.what());
        }
        if (seq.doc_refs.size() != seq.segment_starts.size()) {
            fail(ErrorCode::format_error, "segment sidecar row " + std::to_string(s) + " does not match segment count");
        }
    }
    if (s != stream.sequences.size()) fail(ErrorCode::format_error, "segment sidecar has fewer rows than sequences");
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& packed) {
    auto p = packed;
    p += ".segments.jsonl";
    return p;
}

inline void write_stream(const std::filesystem::path& path, const PackedStream& stream) {
    binio::write_file(path, encode(stream));
    binio::write_file(sidecar_path(path), encode_doc_refs(stream));
}

inline PackedStream read_stream(const std::filesystem::path& path) {
    auto stream = decode(binio::read_file(path), path.string());
    const auto side = sidecar_path(path);
    if (std::filesystem::exists(side)) attach_doc_refs(stream, binio::read_file(side));
    return stream;
}

}  // namespace exact::packer
