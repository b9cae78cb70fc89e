#pragma once

// Evidence-sensitivity analysis over numeric probe dumps.
//
// G = margin(original context) - margin(counterfactual context), where the
// counterfactual replaces the supporting evidence with a same-type distractor.
// Records are binned by (context length, evidence distance); Delta G compares
// two training arms cell by cell, and paired bootstrap intervals resample
// prompt pairs within cells.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "exact/error.hpp"
#include "exact/numeric.hpp"

namespace exact::probe {

struct ProbeRecord {
    std::string prompt_id;
    std::uint64_t context_length = 0;     // tokens
    std::uint64_t evidence_distance = 0;  // tokens from evidence to query
    double margin_original = 0.0;
    double margin_counterfactual = 0.0;
    std::string arm;
    std::optional<std::string> view;
    std::optional<bool> correct;
};

inline double compute_G(const ProbeRecord& r) { return r.margin_original - r.margin_counterfactual; }

inline void check_record(const ProbeRecord& r) {
    if (r.evidence_distance > r.context_length) {
        fail(ErrorCode::geometry_violation, "probe: record '" + r.prompt_id + "' has evidence distance " +
                                                std::to_string(r.evidence_distance) + " > context length " +
                                                std::to_string(r.context_length));
    }
    if (!std::isfinite(r.margin_original) || !std::isfinite(r.margin_counterfactual)) {
        fail(ErrorCode::non_finite, "probe: record '" + r.prompt_id + "' has a non-finite margin");
    }
}

// ---------------------------------------------------------------- dump parsing

enum class MarginMode { direct, competitor_max };

inline const char* to_string(MarginMode m) { return m == MarginMode::direct ? "direct" : "competitor-max"; }

inline MarginMode parse_margin_mode(std::string_view s) {
    if (s == "direct") return MarginMode::direct;
    if (s == "competitor-max") return MarginMode::competitor_max;
    fail(ErrorCode::invalid_argument, "unknown margin mode '" + std::string(s) + "'");
}

/// logprob(gold) - max over competitor candidates.
inline double competitor_max_margin(double gold, const std::vector<double>& competitors) {
    if (competitors.empty()) fail(ErrorCode::malformed_record, "probe: competitor-max margin needs competitors");
    return gold - *std::max_element(competitors.begin(), competitors.end());
}

/// Line-delimited records. In direct mode the margins are read from
/// margin_original / margin_counterfactual; in competitor-max mode they are
/// derived from gold_logprob_* and competitor_logprobs_*.
inline std::vector<ProbeRecord> parse_dump(std::string_view text, MarginMode mode, std::string_view label = "probe dump") {
    std::vector<ProbeRecord> out;
    std::size_t pos = 0;
    std::size_t line_no = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        const auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        const auto where = std::string(label) + ":" + std::to_string(line_no);
        try {
            const auto j = nlohmann::json::parse(line);
            ProbeRecord r;
            r.prompt_id = j.at("prompt_id").get<std::string>();
            r.context_length = j.at("context_length").get<std::uint64_t>();
            r.evidence_distance = j.at("evidence_distance").get<std::uint64_t>();
            r.arm = j.at("arm").get<std::string>();
            if (mode == MarginMode::direct) {
                r.margin_original = j.at("margin_original").get<double>();
                r.margin_counterfactual = j.at("margin_counterfactual").get<double>();
            } else {
                r.margin_original = competitor_max_margin(j.at("gold_logprob_original").get<double>(),
                                                          j.at("competitor_logprobs_original").get<std::vector<double>>());
                r.margin_counterfactual =
                    competitor_max_margin(j.at("gold_logprob_counterfactual").get<double>(),
                                          j.at("competitor_logprobs_counterfactual").get<std::vector<double>>());
            }
            if (j.contains("view") && !j["view"].is_null()) r.view = j["view"].get<std::string>();
            if (j.contains("correct") && !j["correct"].is_null()) r.correct = j["correct"].get<bool>();
            check_record(r);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::malformed_record, where + ": " + e.what());
        } catch (const Error& e) {
            throw Error(e.code(), where + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------- fields

/// Half-open bins [edge_k, edge_{k+1}) over context length and evidence distance.
struct BinEdges {
    std::vector<std::uint64_t> context;
    std::vector<std::uint64_t> distance;

    void validate() const {
        for (const auto* e : {&context, &distance}) {
            if (e->size() < 2 || !std::is_sorted(e->begin(), e->end()) ||
                std::adjacent_find(e->begin(), e->end()) != e->end()) {
                fail(ErrorCode::invalid_argument, "probe: bin edges need >= 2 strictly increasing values");
            }
        }
    }

    static std::optional<std::size_t> locate(const std::vector<std::uint64_t>& edges, std::uint64_t x) {
        if (x < edges.front() || x >= edges.back()) return std::nullopt;
        return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin()) - 1;
    }

    friend bool operator==(const BinEdges&, const BinEdges&) = default;
};

struct CellKey {
    std::size_t context_bin = 0;
    std::size_t distance_bin = 0;
    auto operator<=>(const CellKey&) const = default;
};

struct ProbeCell {
    double mean_g = 0.0;  // in a delta field: Delta G
    std::uint64_t count = 0;
    std::optional<double> delta_g;
    std::optional<double> accuracy;  // mean correctness bit, when supplied
};

struct ProbeField {
    std::string arm;
    BinEdges edges;
    std::map<CellKey, ProbeCell> cells;  // populated cells only

    const ProbeCell* find(CellKey key) const {
        const auto it = cells.find(key);
        return it == cells.end() ? nullptr : &it->second;
    }
};

/// Cell key for a record, or nullopt when it falls outside the grid.
inline std::optional<CellKey> cell_of(const ProbeRecord& r, const BinEdges& edges) {
    const auto c = BinEdges::locate(edges.context, r.context_length);
    const auto d = BinEdges::locate(edges.distance, r.evidence_distance);
    if (!c || !d) return std::nullopt;
    return CellKey{*c, *d};
}

/// Mean G per populated cell for records of a single arm. Records outside the
/// grid are skipped; geometry violations are rejected.
inline ProbeField build_field(std::span<const ProbeRecord> records, const BinEdges& edges) {
    edges.validate();
    ProbeField field;
    field.edges = edges;
    std::map<CellKey, std::pair<std::uint64_t, std::uint64_t>> correctness;  // (correct, labelled)
    for (const auto& r : records) {
        check_record(r);
        if (field.arm.empty()) {
            field.arm = r.arm;
        } else if (r.arm != field.arm) {
            fail(ErrorCode::arm_mismatch, "probe: field mixes arms '" + field.arm + "' and '" + r.arm + "'");
        }
        const auto key = cell_of(r, edges);
        if (!key) continue;
        auto& cell = field.cells[*key];
        ++cell.count;
        // Incremental mean: exact for constant data.
        cell.mean_g += (compute_G(r) - cell.mean_g) / static_cast<double>(cell.count);
        if (r.correct) {
            auto& [hits, n] = correctness[*key];
            hits += *r.correct ? 1 : 0;
            ++n;
        }
    }
    for (const auto& [key, hn] : correctness) {
        field.cells[key].accuracy = static_cast<double>(hn.first) / static_cast<double>(hn.second);
    }
    return field;
}

/// Delta G = G_a - G_b on cells populated by both arms.
inline ProbeField delta_field(const ProbeField& a, const ProbeField& b) {
    if (!(a.edges == b.edges)) fail(ErrorCode::bin_mismatch, "probe: fields are binned differently");
    ProbeField out;
    out.arm = a.arm + "-" + b.arm;
    out.edges = a.edges;
    for (const auto& [key, ca] : a.cells) {
        const auto* cb = b.find(key);
        if (!cb) continue;
        ProbeCell cell;
        cell.delta_g = ca.mean_g - cb->mean_g;
        cell.mean_g = *cell.delta_g;
        cell.count = std::min(ca.count, cb->count);
        if (ca.accuracy && cb->accuracy) cell.accuracy = *ca.accuracy - *cb->accuracy;
        out.cells.emplace(key, cell);
    }
    return out;
}

struct NormalizedFields {
    std::vector<std::map<CellKey, double>> values;  // one map per input field, in [0, 1]
    double clip_low = 0.0;
    double clip_high = 0.0;
    bool degenerate = false;  // all clipped values equal; every cell reported as 0.5
};

/// Display-only normalization shared across fields: clip cell means to the
/// [lo, hi] percentiles of the union of all cells, then min-max scale.
inline NormalizedFields robust_display_normalize(std::span<const ProbeField> fields, double lo_pct = 5.0,
                                                 double hi_pct = 95.0) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 100.0)) {
        fail(ErrorCode::invalid_argument, "probe: percentiles must satisfy 0 <= lo < hi <= 100");
    }
    std::vector<double> all;
    for (const auto& f : fields) {
        for (const auto& [key, cell] : f.cells) all.push_back(cell.mean_g);
    }
    NormalizedFields out;
    out.values.resize(fields.size());
    if (all.empty()) {
        out.degenerate = true;
        return out;
    }
    std::sort(all.begin(), all.end());
    out.clip_low = percentile_sorted(all, lo_pct);
    out.clip_high = percentile_sorted(all, hi_pct);
    out.degenerate = !(out.clip_high > out.clip_low);
    const double span = out.clip_high - out.clip_low;
    for (std::size_t k = 0; k < fields.size(); ++k) {
        for (const auto& [key, cell] : fields[k].cells) {
            if (out.degenerate) {
                out.values[k][key] = 0.5;
                continue;
            }
            const double clipped = std::clamp(cell.mean_g, out.clip_low, out.clip_high);
            out.values[k][key] = (clipped - out.clip_low) / span;
        }
    }
    return out;
}

// ---------------------------------------------------------------- paired bootstrap

struct PairedCell {
    CellKey key;
    std::vector<std::string> prompt_ids;
    std::vector<double> differences;  // G_a - G_b per prompt pair
};

/// Pair arm-a and arm-b records by prompt_id within each cell.
inline std::vector<PairedCell> pair_by_prompt(std::span<const ProbeRecord> records, const std::string& arm_a,
                                              const std::string& arm_b, const BinEdges& edges) {
    edges.validate();
    std::map<CellKey, std::map<std::string, std::pair<std::optional<double>, std::optional<double>>>> grid;
    for (const auto& r : records) {
        check_record(r);
        if (r.arm != arm_a && r.arm != arm_b) continue;
        const auto key = cell_of(r, edges);
        if (!key) continue;
        auto& slot = grid[*key][r.prompt_id];
        auto& side = r.arm == arm_a ? slot.first : slot.second;
        if (side) {
            fail(ErrorCode::unpaired_records, "probe: duplicate record for prompt '" + r.prompt_id + "' arm '" + r.arm + "'");
        }
        side = compute_G(r);
    }
    std::vector<PairedCell> cells;
    for (auto& [key, prompts] : grid) {
        PairedCell cell;
        cell.key = key;
        for (auto& [id, pair] : prompts) {
            if (!pair.first || !pair.second) {
                fail(ErrorCode::unpaired_records, "probe: prompt '" + id + "' lacks a record for arm '" +
                                                      (pair.first ? arm_b : arm_a) + "'");
            }
            cell.prompt_ids.push_back(id);
            cell.differences.push_back(*pair.first - *pair.second);
        }
        cells.push_back(std::move(cell));
    }
    return cells;
}

/// Reduces per-cell mean differences to one number.
using CellAggregation = std::function<double(std::span<const double>)>;

inline double macro_mean(std::span<const double> cell_means) {
    double m = 0.0;
    std::size_t n = 0;
    for (double x : cell_means) m += (x - m) / static_cast<double>(++n);
    return m;
}

struct BootstrapInterval {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    std::size_t resamples = 0;
    double confidence = 0.0;
};

/// Percentile interval from resampling prompt pairs with replacement inside
/// each cell. Replicate r draws from a stream seeded by derive_seed(seed, r).
inline BootstrapInterval paired_bootstrap_ci(std::span<const PairedCell> cells, std::size_t resamples,
                                             double confidence, std::uint64_t seed,
                                             const CellAggregation& aggregate = macro_mean) {
    if (cells.empty()) fail(ErrorCode::empty_cell, "bootstrap: no cells");
    if (resamples < 1000) fail(ErrorCode::invalid_argument, "bootstrap: at least 1000 resamples required");
    if (!(confidence > 0.0 && confidence < 1.0)) fail(ErrorCode::invalid_argument, "bootstrap: confidence must lie in (0,1)");
    for (const auto& c : cells) {
        if (c.differences.empty()) fail(ErrorCode::empty_cell, "bootstrap: empty cell");
    }

    const auto cell_mean = [](std::span<const double> xs) { return macro_mean(xs); };
    std::vector<double> means(cells.size());
    for (std::size_t k = 0; k < cells.size(); ++k) means[k] = cell_mean(cells[k].differences);

    BootstrapInterval out;
    out.point = aggregate(means);
    out.resamples = resamples;
    out.confidence = confidence;

    std::vector<double> replicates(resamples);
    for (std::size_t r = 0; r < resamples; ++r) {
        Rng rng(derive_seed(seed, r));
        for (std::size_t k = 0; k < cells.size(); ++k) {
            const auto& d = cells[k].differences;
            double m = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) {
                m += (d[rng.below(d.size())] - m) / static_cast<double>(i + 1);
            }
            means[k] = m;
        }
        replicates[r] = aggregate(means);
    }
    std::sort(replicates.begin(), replicates.end());
    const double tail = (1.0 - confidence) / 2.0 * 100.0;
    out.lower = percentile_sorted(replicates, tail);
    out.upper = percentile_sorted(replicates, 100.0 - tail);
    return out;
}

/// Mean correctness bit per distance band for one arm (records without a bit are skipped).
inline std::map<std::size_t, double> accuracy_by_distance(std::span<const ProbeRecord> records, const std::string& arm,
                                                          const std::vector<std::uint64_t>& distance_edges) {
    std::map<std::size_t, std::pair<std::uint64_t, std::uint64_t>> acc;
    for (const auto& r : records) {
        if (r.arm != arm || !r.correct) continue;
        const auto band = BinEdges::locate(distance_edges, r.evidence_distance);
        if (!band) continue;
        acc[*band].first += *r.correct ? 1 : 0;
        ++acc[*band].second;
    }
    std::map<std::size_t, double> out;
    for (const auto& [band, hn] : acc) out[band] = static_cast<double>(hn.first) / static_cast<double>(hn.second);
    return out;
}

// ---------------------------------------------------------------- output

inline std::string join_edges(const std::vector<std::uint64_t>& e) {
    std::string s;
    for (std::size_t k = 0; k < e.size(); ++k) s += (k ? "," : "") + std::to_string(e[k]);
    return s;
}

inline std::string format_field(const ProbeField& field, const std::map<CellKey, double>* normalized = nullptr) {
    std::ostringstream os;
    os.precision(17);
    os << "# arm\t" << field.arm << "\n";
    os << "# context_edges\t" << join_edges(field.edges.context) << "\n";
    os << "# distance_edges\t" << join_edges(field.edges.distance) << "\n";
    os << "context_lo\tcontext_hi\tdistance_lo\tdistance_hi\tcount\t" << (field.cells.empty() ||
                                                                          !field.cells.begin()->second.delta_g
                                                                      ? "mean_g"
                                                                      : "delta_g");
    os << "\taccuracy";
    if (normalized) os << "\tdisplay";
    os << "\n";
    for (const auto& [key, cell] : field.cells) {
        os << field.edges.context[key.context_bin] << "\t" << field.edges.context[key.context_bin + 1] << "\t"
           << field.edges.distance[key.distance_bin] << "\t" << field.edges.distance[key.distance_bin + 1] << "\t"
           << cell.count << "\t" << cell.mean_g << "\t";
        if (cell.accuracy) {
            os << *cell.accuracy;
        } else {
            os << "-";
        }
        if (normalized) os << "\t" << normalized->at(key);
        os << "\n";
    }
    return os.str();
}

}  // namespace exact::probe
