#pragma once

// Tokenized document corpora: the line-delimited text format, the EXTK binary
// format, reproducibility manifests, and the synthetic needle-recall generator.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "exact/binio.hpp"
#include "exact/error.hpp"
#include "exact/numeric.hpp"

namespace exact::corpus {

using TokenId = std::uint32_t;

struct Document {
    std::string doc_id;
    std::vector<TokenId> tokens;

    friend bool operator==(const Document&, const Document&) = default;
};

struct SourceDescriptor {
    std::string path;  // relative to the manifest's directory
    std::string hash;  // "fnv1a64:<16 hex digits>"

    friend bool operator==(const SourceDescriptor&, const SourceDescriptor&) = default;
};

struct CorpusManifest {
    std::vector<SourceDescriptor> sources;
    std::uint32_t vocab_size = 0;
    std::uint64_t total_tokens = 0;
    std::uint64_t document_count = 0;
    /// Document count per power-of-two length class, keyed by the class floor.
    std::map<std::uint64_t, std::uint64_t> length_histogram;
    std::optional<std::uint64_t> generator_seed;
    std::map<std::string, std::uint64_t> split_sizes;

    friend bool operator==(const CorpusManifest&, const CorpusManifest&) = default;
};

inline std::string hash_label(std::string_view bytes) {
    std::ostringstream os;
    os << "fnv1a64:" << std::hex;
    os.width(16);
    os.fill('0');
    os << fnv1a64(bytes);
    return os.str();
}

inline std::uint64_t length_class(std::uint64_t length) {
    return length == 0 ? 0 : std::bit_floor(length);
}

/// Counts and histogram for `docs`; sources and seed are left for the caller.
inline CorpusManifest describe(const std::vector<Document>& docs, std::uint32_t vocab_size) {
    CorpusManifest m;
    m.vocab_size = vocab_size;
    m.document_count = docs.size();
    for (const auto& d : docs) {
        m.total_tokens += d.tokens.size();
        ++m.length_histogram[length_class(d.tokens.size())];
    }
    return m;
}

// ---------------------------------------------------------------- manifest I/O

inline nlohmann::json to_json(const CorpusManifest& m) {
    nlohmann::json j;
    j["sources"] = nlohmann::json::array();
    for (const auto& s : m.sources) j["sources"].push_back({{"path", s.path}, {"hash", s.hash}});
    j["vocab_size"] = m.vocab_size;
    j["total_tokens"] = m.total_tokens;
    j["document_count"] = m.document_count;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& [floor, count] : m.length_histogram) hist.push_back({floor, count});
    j["length_histogram"] = hist;
    j["generator_seed"] = m.generator_seed ? nlohmann::json(*m.generator_seed) : nlohmann::json(nullptr);
    j["split_sizes"] = m.split_sizes;
    return j;
}

inline CorpusManifest manifest_from_json(const nlohmann::json& j) {
    try {
        CorpusManifest m;
        for (const auto& s : j.at("sources")) {
            m.sources.push_back({s.at("path").get<std::string>(), s.at("hash").get<std::string>()});
        }
        m.vocab_size = j.at("vocab_size").get<std::uint32_t>();
        m.total_tokens = j.at("total_tokens").get<std::uint64_t>();
        m.document_count = j.at("document_count").get<std::uint64_t>();
        for (const auto& row : j.at("length_histogram")) {
            m.length_histogram[row.at(0).get<std::uint64_t>()] = row.at(1).get<std::uint64_t>();
        }
        if (j.contains("generator_seed") && !j["generator_seed"].is_null()) {
            m.generator_seed = j["generator_seed"].get<std::uint64_t>();
        }
        if (j.contains("split_sizes")) {
            m.split_sizes = j["split_sizes"].get<std::map<std::string, std::uint64_t>>();
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format_error, std::string("manifest: ") + e.what());
    }
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
    binio::write_file(path, to_json(m).dump(2) + "\n");
}

inline CorpusManifest read_manifest(const std::filesystem::path& path) {
    const auto text = binio::read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format_error, path.string() + ": " + e.what());
    }
    return manifest_from_json(j);
}

// ---------------------------------------------------------------- formats

enum class Format { text, binary };

inline constexpr std::string_view corpus_magic = "EXTK";
inline constexpr std::uint16_t corpus_version = 1;

inline std::string encode_text(const std::vector<Document>& docs) {
    std::string out;
    for (const auto& d : docs) {
        nlohmann::json j;
        j["doc_id"] = d.doc_id;
        j["tokens"] = d.tokens;
        out += j.dump();
        out += '\n';
    }
    return out;
}

inline std::string encode_binary(const std::vector<Document>& docs, std::uint32_t vocab_size) {
    binio::Writer w;
    w.put_magic(corpus_magic);
    w.put<std::uint16_t>(corpus_version);
    w.put<std::uint32_t>(vocab_size);
    w.put<std::uint64_t>(docs.size());
    for (const auto& d : docs) {
        if (d.doc_id.size() > std::numeric_limits<std::uint16_t>::max()) {
            fail(ErrorCode::invalid_argument, "doc_id longer than 65535 bytes: " + d.doc_id.substr(0, 32) + "...");
        }
        if (d.tokens.size() > std::numeric_limits<std::uint32_t>::max()) {
            fail(ErrorCode::invalid_argument, "document '" + d.doc_id + "' exceeds 2^32-1 tokens");
        }
        w.put<std::uint16_t>(static_cast<std::uint16_t>(d.doc_id.size()));
        w.put_bytes(d.doc_id);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(d.tokens.size()));
        for (auto t : d.tokens) w.put<std::uint32_t>(t);
    }
    return w.take();
}

struct DecodedCorpus {
    std::vector<Document> documents;
    std::optional<std::uint32_t> vocab_size;  // present for the binary format
};

inline std::vector<Document> decode_text(std::string_view text, std::string_view label) {
    std::vector<Document> docs;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

        const auto where = std::string(label) + ":" + std::to_string(line_no);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::malformed_record, where + ": " + e.what());
        }
        if (!j.is_object() || !j.contains("doc_id") || !j["doc_id"].is_string() || !j.contains("tokens") ||
            !j["tokens"].is_array()) {
            fail(ErrorCode::malformed_record, where + ": expected {\"doc_id\": string, \"tokens\": [uint, ...]}");
        }
        Document d;
        d.doc_id = j["doc_id"].get<std::string>();
        d.tokens.reserve(j["tokens"].size());
        for (const auto& t : j["tokens"]) {
            if (!t.is_number_unsigned()) {
                fail(ErrorCode::malformed_record, where + ": token ids must be non-negative integers");
            }
            const auto v = t.get<std::uint64_t>();
            if (v > std::numeric_limits<TokenId>::max()) {
                fail(ErrorCode::malformed_record, where + ": token id " + std::to_string(v) + " does not fit 32 bits");
            }
            d.tokens.push_back(static_cast<TokenId>(v));
        }
        if (d.tokens.empty()) fail(ErrorCode::empty_document, where + ": empty document '" + d.doc_id + "'");
        docs.push_back(std::move(d));
    }
    return docs;
}

inline DecodedCorpus decode_binary(std::string_view bytes, std::string label) {
    binio::Reader r(bytes, std::move(label));
    r.expect_magic(corpus_magic);
    r.expect_version(corpus_version);
    DecodedCorpus out;
    out.vocab_size = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        Document d;
        const auto id_len = r.get<std::uint16_t>();
        d.doc_id = std::string(r.get_bytes(id_len));
        const auto n = r.get<std::uint32_t>();
        if (n == 0) {
            fail(ErrorCode::empty_document, r.label() + ": empty document '" + d.doc_id + "' (record " + std::to_string(i) + ")");
        }
        if (static_cast<std::uint64_t>(n) * 4 > r.remaining()) {
            fail(ErrorCode::format_error, r.label() + ": truncated token array at offset " + std::to_string(r.offset()));
        }
        d.tokens.resize(n);
        for (auto& t : d.tokens) t = r.get<std::uint32_t>();
        out.documents.push_back(std::move(d));
    }
    r.expect_end();
    return out;
}

inline void check_vocab(const std::vector<Document>& docs, std::uint32_t vocab_size) {
    for (const auto& d : docs) {
        for (std::size_t i = 0; i < d.tokens.size(); ++i) {
            if (d.tokens[i] >= vocab_size) {
                fail(ErrorCode::token_out_of_range, "document '" + d.doc_id + "' position " + std::to_string(i) +
                                                        ": token id " + std::to_string(d.tokens[i]) +
                                                        " >= vocab_size " + std::to_string(vocab_size));
            }
        }
    }
}

/// Verify `docs` (decoded from `file_bytes`, read from `path`) against a manifest.
inline void verify_manifest(const CorpusManifest& m, const std::vector<Document>& docs,
                            const std::filesystem::path& path, std::string_view file_bytes) {
    std::uint64_t total = 0;
    for (const auto& d : docs) total += d.tokens.size();
    if (docs.size() != m.document_count) {
        fail(ErrorCode::manifest_mismatch, path.string() + ": manifest document_count " +
                                               std::to_string(m.document_count) + " but file has " +
                                               std::to_string(docs.size()));
    }
    if (total != m.total_tokens) {
        fail(ErrorCode::manifest_mismatch, path.string() + ": manifest total_tokens " + std::to_string(m.total_tokens) +
                                               " but file has " + std::to_string(total));
    }
    const auto name = path.filename().string();
    for (const auto& s : m.sources) {
        if (std::filesystem::path(s.path).filename() == name) {
            const auto actual = hash_label(file_bytes);
            if (actual != s.hash) {
                fail(ErrorCode::manifest_mismatch,
                     path.string() + ": content hash " + actual + " does not match manifest " + s.hash);
            }
        }
    }
    check_vocab(docs, m.vocab_size);
}

/// Parse an in-memory corpus (format detected from the EXTK magic).
inline DecodedCorpus decode(std::string_view bytes, std::string label) {
    if (binio::starts_with_magic(bytes, corpus_magic)) return decode_binary(bytes, std::move(label));
    return DecodedCorpus{decode_text(bytes, label), std::nullopt};
}

/// Load a corpus file in file order; verifies counts, hashes and vocab against
/// the manifest when one is given.
inline std::vector<Document> load_documents(const std::filesystem::path& path,
                                            const std::optional<CorpusManifest>& manifest = std::nullopt) {
    const auto bytes = binio::read_file(path);
    auto decoded = decode(bytes, path.string());
    if (decoded.vocab_size) check_vocab(decoded.documents, *decoded.vocab_size);
    if (manifest) verify_manifest(*manifest, decoded.documents, path, bytes);
    return std::move(decoded.documents);
}

inline void write_documents(const std::filesystem::path& path, const std::vector<Document>& docs, Format format,
                            std::uint32_t vocab_size = 0) {
    binio::write_file(path, format == Format::text ? encode_text(docs) : encode_binary(docs, vocab_size));
}

/// Seeded Fisher-Yates permutation of document order.
inline std::vector<Document> permute_documents(std::vector<Document> docs, std::uint64_t seed) {
    Rng rng(seed);
    rng.shuffle(std::span<Document>(docs));
    return docs;
}

// ---------------------------------------------------------------- synthetic corpora

enum class NeedleRule {
    identity,  // recall target is the key token itself
    shift,     // recall target is the answer token paired with the key
};

struct LengthComponent {
    double weight = 1.0;
    double mean = 8.0;  // mean length in tokens, >= 1
};

/// Vocabulary layout: keys [0, K), fillers [K, K+F), answers [K+F, 2K+F).
struct SynthSpec {
    std::uint32_t key_alphabet = 8;
    std::uint32_t filler_alphabet = 32;
    NeedleRule needle_rule = NeedleRule::shift;
    std::vector<LengthComponent> lengths{{0.9, 8.0}, {0.1, 512.0}};
    double recall_density = 0.05;
    std::uint64_t document_count = 1000;
    std::uint64_t seed = 0;

    std::uint32_t vocab_size() const { return 2 * key_alphabet + filler_alphabet; }
    TokenId filler_begin() const { return key_alphabet; }
    TokenId answer_begin() const { return key_alphabet + filler_alphabet; }

    TokenId answer_for(TokenId key) const {
        return needle_rule == NeedleRule::identity ? key : answer_begin() + key;
    }

    bool is_key(TokenId t) const { return t < key_alphabet; }
    bool is_filler(TokenId t) const { return t >= filler_begin() && t < answer_begin(); }
    bool is_answer(TokenId t) const { return t >= answer_begin() && t < vocab_size(); }

    /// Analytic mean document length of the geometric mixture.
    double mean_length() const {
        double num = 0.0;
        double den = 0.0;
        for (const auto& c : lengths) {
            num += c.weight * c.mean;
            den += c.weight;
        }
        return num / den;
    }

    void validate() const {
        if (key_alphabet == 0 || filler_alphabet == 0) {
            fail(ErrorCode::invalid_argument, "synth: key and filler alphabets must be non-empty");
        }
        if (static_cast<std::uint64_t>(key_alphabet) * 2 + filler_alphabet > std::numeric_limits<TokenId>::max()) {
            fail(ErrorCode::invalid_argument, "synth: vocabulary does not fit 32-bit token ids");
        }
        if (lengths.empty()) fail(ErrorCode::invalid_argument, "synth: length mixture is empty");
        double total = 0.0;
        for (const auto& c : lengths) {
            if (!(c.mean >= 1.0) || !std::isfinite(c.mean)) {
                fail(ErrorCode::invalid_argument, "synth: geometric component means must be finite and >= 1");
            }
            if (!(c.weight >= 0.0) || !std::isfinite(c.weight)) {
                fail(ErrorCode::invalid_argument, "synth: mixture weights must be finite and non-negative");
            }
            total += c.weight;
        }
        if (!(total > 0.0)) fail(ErrorCode::invalid_argument, "synth: mixture weights sum to zero");
        if (!(recall_density > 0.0 && recall_density <= 1.0)) {
            fail(ErrorCode::invalid_argument, "synth: recall density must lie in (0, 1]");
        }
    }
};

/// Geometric length on {1, 2, ...} with the given mean, by CDF inversion.
inline std::uint64_t sample_geometric_length(Rng& rng, double mean) {
    if (mean <= 1.0) return 1;
    const double p = 1.0 / mean;
    const double u = rng.uniform_open_low();
    const double k = std::floor(std::log(u) / std::log1p(-p));
    constexpr double cap = static_cast<double>(std::numeric_limits<std::uint32_t>::max() - 1);
    return 1 + static_cast<std::uint64_t>(std::min(k, cap));
}

/// Document `index` of the synthetic corpus; depends only on (spec, index).
inline Document synthesize_document(const SynthSpec& spec, std::uint64_t index) {
    Rng rng(derive_seed(spec.seed, index));

    double total = 0.0;
    for (const auto& c : spec.lengths) total += c.weight;
    const double pick = rng.uniform() * total;
    double acc = 0.0;
    double mean = spec.lengths.back().mean;
    for (const auto& c : spec.lengths) {
        acc += c.weight;
        if (pick < acc) {
            mean = c.mean;
            break;
        }
    }
    const auto length = sample_geometric_length(rng, mean);

    Document d;
    d.doc_id = "synth-" + std::to_string(index);
    d.tokens.reserve(length);
    const auto key = static_cast<TokenId>(rng.below(spec.key_alphabet));
    d.tokens.push_back(key);
    const TokenId answer = spec.answer_for(key);
    for (std::uint64_t pos = 1; pos < length; ++pos) {
        if (rng.uniform() < spec.recall_density) {
            d.tokens.push_back(answer);
        } else {
            d.tokens.push_back(spec.filler_begin() + static_cast<TokenId>(rng.below(spec.filler_alphabet)));
        }
    }
    return d;
}

struct SyntheticCorpus {
    std::vector<Document> documents;
    CorpusManifest manifest;
};

inline SyntheticCorpus generate_synthetic_corpus(const SynthSpec& spec) {
    spec.validate();
    SyntheticCorpus out;
    out.documents.reserve(spec.document_count);
    for (std::uint64_t i = 0; i < spec.document_count; ++i) out.documents.push_back(synthesize_document(spec, i));
    out.manifest = describe(out.documents, spec.vocab_size());
    out.manifest.generator_seed = spec.seed;
    out.manifest.split_sizes["all"] = spec.document_count;
    return out;
}

}  // namespace exact::corpus
