#include <gtest/gtest.h>

#include "support.hpp"

using namespace exact;
using namespace exact::probe;

namespace {

ProbeRecord rec(std::string id, std::uint64_t ctx, std::uint64_t dist, double mo, double mc, std::string arm) {
    ProbeRecord r;
    r.prompt_id = std::move(id);
    r.context_length = ctx;
    r.evidence_distance = dist;
    r.margin_original = mo;
    r.margin_counterfactual = mc;
    r.arm = std::move(arm);
    return r;
}

BinEdges grid() { return {{0, 1024, 4096}, {0, 256, 1024, 4096}}; }

/// Every cell of arm `arm` gets G = base + 0.1 * context_bin + 0.01 * distance_bin.
std::vector<ProbeRecord> planted(const std::string& arm, double base, int per_cell) {
    std::vector<ProbeRecord> out;
    const auto e = grid();
    for (std::size_t c = 0; c + 1 < e.context.size(); ++c) {
        for (std::size_t d = 0; d + 1 < e.distance.size(); ++d) {
            const auto ctx = e.context[c + 1] - 1;
            const auto dist = e.distance[d];
            if (dist > ctx) continue;
            for (int k = 0; k < per_cell; ++k) {
                const double g = base + 0.1 * static_cast<double>(c) + 0.01 * static_cast<double>(d);
                out.push_back(rec("p" + std::to_string(c) + "_" + std::to_string(d) + "_" + std::to_string(k), ctx,
                                  dist, 2.0 + g, 2.0, arm));
            }
        }
    }
    return out;
}

}  // namespace

TEST(Probe, ComputeG) {
    EXPECT_DOUBLE_EQ(compute_G(rec("p", 100, 10, 2.5, 0.5, "a")), 2.0);
}

TEST(Probe, GeometryViolation) {
    try {
        check_record(rec("p", 100, 101, 1, 0, "a"));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::geometry_violation);
    }
    EXPECT_NO_THROW(check_record(rec("p", 100, 100, 1, 0, "a")));
}

TEST(Probe, ParseDirectDump) {
    const std::string text =
        "{\"prompt_id\":\"x\",\"context_length\":100,\"evidence_distance\":10,\"margin_original\":2.5,"
        "\"margin_counterfactual\":0.5,\"arm\":\"exact\",\"correct\":true}\n\n"
        "{\"prompt_id\":\"y\",\"context_length\":50,\"evidence_distance\":5,\"margin_original\":1,"
        "\"margin_counterfactual\":1,\"arm\":\"exact\",\"view\":\"v1\"}\n";
    const auto recs = parse_dump(text, MarginMode::direct);
    ASSERT_EQ(recs.size(), 2u);
    EXPECT_DOUBLE_EQ(compute_G(recs[0]), 2.0);
    EXPECT_EQ(recs[0].correct, true);
    EXPECT_EQ(recs[1].view, "v1");
    EXPECT_FALSE(recs[1].correct.has_value());
}

TEST(Probe, ParseCompetitorMaxDump) {
    const std::string text =
        "{\"prompt_id\":\"x\",\"context_length\":100,\"evidence_distance\":10,\"arm\":\"a\","
        "\"gold_logprob_original\":-0.5,\"competitor_logprobs_original\":[-2.0,-1.5,-3.0],"
        "\"gold_logprob_counterfactual\":-2.0,\"competitor_logprobs_counterfactual\":[-1.0,-4.0]}\n";
    const auto recs = parse_dump(text, MarginMode::competitor_max);
    ASSERT_EQ(recs.size(), 1u);
    EXPECT_DOUBLE_EQ(recs[0].margin_original, 1.0);
    EXPECT_DOUBLE_EQ(recs[0].margin_counterfactual, -1.0);
    EXPECT_DOUBLE_EQ(compute_G(recs[0]), 2.0);
    EXPECT_EQ(parse_margin_mode("competitor-max"), MarginMode::competitor_max);
}

TEST(Probe, ParseErrorsCarryLineNumbers) {
    try {
        parse_dump("{\"prompt_id\":\"x\"}\n", MarginMode::direct, "dump.jsonl");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::malformed_record);
        EXPECT_NE(std::string(e.what()).find("dump.jsonl:1"), std::string::npos);
    }
    try {
        parse_dump("\n{\"prompt_id\":\"x\",\"context_length\":5,\"evidence_distance\":10,\"margin_original\":1,"
                   "\"margin_counterfactual\":0,\"arm\":\"a\"}\n",
                   MarginMode::direct, "d");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::geometry_violation);
        EXPECT_NE(std::string(e.what()).find("d:2"), std::string::npos);
    }
}

TEST(Probe, BinsAreHalfOpen) {
    const BinEdges e{{0, 10, 20}, {0, 5, 20}};
    EXPECT_EQ(BinEdges::locate(e.context, 9), 0u);
    EXPECT_EQ(BinEdges::locate(e.context, 10), 1u);
    EXPECT_FALSE(BinEdges::locate(e.context, 20).has_value());
    EXPECT_THROW((BinEdges{{0}, {0, 1}}).validate(), Error);
    EXPECT_THROW((BinEdges{{0, 5, 5}, {0, 1}}).validate(), Error);
}

TEST(Probe, FieldRecoversPlantedConstants) {
    const auto recs = planted("exact", 0.5, 7);
    const auto f = build_field(recs, grid());
    EXPECT_EQ(f.arm, "exact");
    ASSERT_FALSE(f.cells.empty());
    for (const auto& [key, cell] : f.cells) {
        const double expected = 0.5 + 0.1 * static_cast<double>(key.context_bin) + 0.01 * static_cast<double>(key.distance_bin);
        // G is formed as (2 + g) - 2, so compare against that same expression.
        EXPECT_EQ(cell.mean_g, (2.0 + expected) - 2.0);
        EXPECT_EQ(cell.count, 7u);
    }
}

TEST(Probe, FieldRejectsMixedArms) {
    std::vector<ProbeRecord> recs{rec("a", 100, 1, 1, 0, "x"), rec("b", 100, 1, 1, 0, "y")};
    try {
        build_field(recs, grid());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::arm_mismatch);
    }
}

TEST(Probe, DeltaAntisymmetry) {
    Rng rng(6);
    std::vector<ProbeRecord> a;
    std::vector<ProbeRecord> b;
    for (int k = 0; k < 200; ++k) {
        const auto ctx = 1 + rng.below(4095);
        const auto dist = rng.below(ctx + 1);
        a.push_back(rec("p" + std::to_string(k), ctx, dist, rng.normal(), rng.normal(), "a"));
        b.push_back(rec("p" + std::to_string(k), ctx, dist, rng.normal(), rng.normal(), "b"));
    }
    const auto fa = build_field(a, grid());
    const auto fb = build_field(b, grid());
    const auto ab = delta_field(fa, fb);
    const auto ba = delta_field(fb, fa);
    ASSERT_EQ(ab.cells.size(), ba.cells.size());
    for (const auto& [key, cell] : ab.cells) EXPECT_EQ(*cell.delta_g, -*ba.find(key)->delta_g);
}

TEST(Probe, DeltaBinMismatch) {
    const auto fa = build_field(planted("a", 0, 1), grid());
    auto other = grid();
    other.distance.back() = 8192;
    const auto fb = build_field(planted("b", 0, 1), other);
    try {
        delta_field(fa, fb);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::bin_mismatch);
    }
}

TEST(Probe, RobustNormalization) {
    ProbeField f;
    f.edges = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, {0, 1}};
    for (std::size_t k = 0; k < 11; ++k) f.cells[{k, 0}].mean_g = static_cast<double>(k);
    f.cells[{10, 0}].mean_g = 1000.0;  // outlier
    const std::vector<ProbeField> fields{f};
    const auto n = robust_display_normalize(fields, 10, 90);
    // Sorted values 0..9, 1000: 10th pct = 1, 90th pct = 9 (linear interpolation).
    EXPECT_DOUBLE_EQ(n.clip_low, 1.0);
    EXPECT_DOUBLE_EQ(n.clip_high, 9.0);
    EXPECT_DOUBLE_EQ(n.values[0].at({0, 0}), 0.0);
    EXPECT_DOUBLE_EQ(n.values[0].at({5, 0}), 0.5);
    EXPECT_DOUBLE_EQ(n.values[0].at({10, 0}), 1.0);
    EXPECT_FALSE(n.degenerate);

    ProbeField flat;
    flat.edges = f.edges;
    flat.cells[{0, 0}].mean_g = 3.0;
    flat.cells[{1, 0}].mean_g = 3.0;
    const std::vector<ProbeField> flats{flat};
    const auto d = robust_display_normalize(flats);
    EXPECT_TRUE(d.degenerate);
    EXPECT_DOUBLE_EQ(d.values[0].at({0, 0}), 0.5);
    EXPECT_THROW(robust_display_normalize(flats, 60, 40), Error);
}

TEST(Bootstrap, PairingErrors) {
    std::vector<ProbeRecord> recs{rec("p", 100, 1, 1, 0, "a")};
    try {
        pair_by_prompt(recs, "a", "b", grid());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unpaired_records);
    }
    recs.push_back(rec("p", 100, 1, 1, 0, "a"));
    EXPECT_THROW(pair_by_prompt(recs, "a", "b", grid()), Error);
}

TEST(Bootstrap, ConstantDifferenceCollapses) {
    auto recs = planted("a", 0.75, 5);
    const auto b = planted("b", 0.25, 5);
    recs.insert(recs.end(), b.begin(), b.end());
    const auto cells = pair_by_prompt(recs, "a", "b", grid());
    const auto ci = paired_bootstrap_ci(cells, 1000, 0.95, 1);
    EXPECT_NEAR(ci.point, 0.5, 1e-12);
    EXPECT_NEAR(ci.lower, 0.5, 1e-12);
    EXPECT_NEAR(ci.upper, 0.5, 1e-12);
}

TEST(Bootstrap, DeterministicAndValidated) {
    Rng rng(8);
    std::vector<ProbeRecord> recs;
    for (int k = 0; k < 60; ++k) {
        const auto id = "p" + std::to_string(k);
        recs.push_back(rec(id, 2000, 100, rng.normal() + 0.2, 0, "a"));
        recs.push_back(rec(id, 2000, 100, rng.normal(), 0, "b"));
    }
    const auto cells = pair_by_prompt(recs, "a", "b", grid());
    const auto x = paired_bootstrap_ci(cells, 1000, 0.9, 4);
    const auto y = paired_bootstrap_ci(cells, 1000, 0.9, 4);
    EXPECT_EQ(x.lower, y.lower);
    EXPECT_EQ(x.upper, y.upper);
    EXPECT_LT(x.lower, x.point);
    EXPECT_GT(x.upper, x.point);
    EXPECT_THROW(paired_bootstrap_ci(cells, 999, 0.9, 4), Error);
    EXPECT_THROW(paired_bootstrap_ci(cells, 1000, 1.0, 4), Error);
    EXPECT_THROW(paired_bootstrap_ci({}, 1000, 0.9, 4), Error);
}

TEST(Probe, AccuracyByDistance) {
    std::vector<ProbeRecord> recs;
    for (int k = 0; k < 4; ++k) {
        auto r = rec("p" + std::to_string(k), 4000, k < 2 ? 10 : 300, 0, 0, "a");
        r.correct = k != 1;
        recs.push_back(r);
    }
    const auto acc = accuracy_by_distance(recs, "a", grid().distance);
    EXPECT_DOUBLE_EQ(acc.at(0), 0.5);
    EXPECT_DOUBLE_EQ(acc.at(1), 1.0);
}

TEST(Probe, FormatFieldListsCells) {
    const auto f = build_field(planted("a", 0.5, 2), grid());
    const auto text = format_field(f);
    EXPECT_NE(text.find("# arm\ta"), std::string::npos);
    EXPECT_NE(text.find("mean_g"), std::string::npos);
    std::size_t lines = 0;
    for (char c : text) lines += c == '\n';
    EXPECT_EQ(lines, 4 + f.cells.size());
}
