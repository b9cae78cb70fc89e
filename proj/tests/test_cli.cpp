#include <gtest/gtest.h>

#include <fstream>

#include "exact/cli.hpp"
#include "support.hpp"

using namespace exact;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(std::vector<std::string> args) {
    args.insert(args.begin(), "exact_alloc");
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli::dispatch(static_cast<int>(argv.size()), argv.data());
}

json read_json(const fs::path& p) { return json::parse(binio::read_file(p)); }

/// synth -> pack (train, heldout) -> stats -> weights -> export -> toy-train -> loss-eval
void pipeline(const fs::path& dir) {
    const auto d = dir.string();
    ASSERT_EQ(run({"synth", "--out", d + "/synth", "--seed", "5", "--docs", "150", "--heldout-docs", "30", "--keys", "4",
                   "--fillers", "8", "--lengths", "0.7:12,0.3:150"}),
              0);
    ASSERT_EQ(run({"pack", "--out", d + "/pack", "--seq-len", "128", "--corpus", d + "/synth/corpus.jsonl", "--manifest",
                   d + "/synth/corpus.manifest.json"}),
              0);
    ASSERT_EQ(run({"pack", "--out", d + "/pack", "--seq-len", "128", "--name", "heldout", "--corpus",
                   d + "/synth/heldout.jsonl", "--manifest", d + "/synth/heldout.manifest.json"}),
              0);
    ASSERT_EQ(run({"stats", "--out", d + "/stats", "--packed", d + "/pack/packed.expk", "--workers", "3"}), 0);
    ASSERT_EQ(run({"weights", "--out", d + "/weights", "--seq-len", "128", "--stats", d + "/stats/stats.json"}), 0);
    ASSERT_EQ(run({"export", "--out", d + "/export", "--packed", d + "/pack/packed.expk", "--table",
                   d + "/weights/weight_table.json"}),
              0);
    ASSERT_EQ(run({"toy-train", "--out", d + "/train", "--packed", d + "/pack/packed.expk", "--heldout",
                   d + "/pack/heldout.expk", "--table", d + "/weights/weight_table.json", "--vocab", "20", "--steps", "20",
                   "--dim", "8", "--eval-every", "10", "--seed", "3"}),
              0);
    ASSERT_EQ(run({"loss-eval", "--out", d + "/loss", "--packed", d + "/pack/heldout.expk", "--ce",
                   d + "/train/heldout_ce.exce", "--display-threshold", "64"}),
              0);
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = binio::read_file(e.path());
    }
    return out;
}

}  // namespace

TEST(Cli, PipelineIsByteIdenticalAcrossRuns) {
    const auto a = exact::testing::scratch_dir("cli_run_a");
    const auto b = exact::testing::scratch_dir("cli_run_b");
    ::testing::internal::CaptureStdout();
    pipeline(a);
    pipeline(b);
    ::testing::internal::GetCapturedStdout();
    const auto sa = snapshot(a);
    const auto sb = snapshot(b);
    ASSERT_EQ(sa.size(), sb.size());
    for (const auto& [name, bytes] : sa) {
        ASSERT_TRUE(sb.count(name)) << name;
        EXPECT_EQ(bytes, sb.at(name)) << name;
    }
    EXPECT_TRUE(sa.count("export/weights.exwt"));
    EXPECT_TRUE(sa.count("export/packed.expk.segments.jsonl"));
}

TEST(Cli, ManifestsRecordProvenance) {
    const auto dir = exact::testing::scratch_dir("cli_manifest");
    ::testing::internal::CaptureStdout();
    pipeline(dir);
    ::testing::internal::GetCapturedStdout();
    const auto m = read_json(dir / "export" / "export.manifest.json");
    EXPECT_EQ(m["toolkit"], "exact_alloc");
    EXPECT_TRUE(m["inputs"].contains("packed"));
    EXPECT_EQ(m["inputs"]["packed"]["file"], "packed.expk");
    EXPECT_TRUE(m["outputs"].contains("weights.exwt"));
    EXPECT_EQ(m["outputs"]["weights.exwt"], corpus::hash_label(binio::read_file(dir / "export" / "weights.exwt")));

    // The default threshold is a quarter of the sequence length.
    const auto t = read_json(dir / "weights" / "weight_table.json");
    EXPECT_EQ(t["tau"], 32);
    EXPECT_NEAR(t["tail_extra_mass"].get<double>(), 0.15, 1e-12);

    // Exported weights align with the exported stream.
    const auto stream = packer::read_stream(dir / "export" / "packed.expk");
    const auto f = weights::decode_weight_file(binio::read_file(dir / "export" / "weights.exwt"));
    EXPECT_NO_THROW(weights::check_alignment(f, stream));

    const auto loss = read_json(dir / "loss" / "loss.json");
    EXPECT_GT(loss["loss"].get<double>(), 0.0);
    EXPECT_EQ(loss["weight_kind"], "identity");
}

TEST(Cli, UsageErrorsExitTwoWithJson) {
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(run({"pack", "--seq-len", "notanumber"}), 2);
    const auto err = ::testing::internal::GetCapturedStderr();
    const auto j = json::parse(err.substr(0, err.find('\n')));
    EXPECT_EQ(j["error"], "usage");
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(run({}), 2);
    ::testing::internal::GetCapturedStderr();
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(run({"weights", "--kind", "bogus", "--stats", "x"}), 2);
    ::testing::internal::GetCapturedStderr();
}

TEST(Cli, ModuleErrorsExitOneWithCode) {
    const auto dir = exact::testing::scratch_dir("cli_errors");
    std::ofstream(dir / "empty.jsonl") << "{\"doc_id\":\"a\",\"tokens\":[]}\n";
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(run({"pack", "--out", (dir / "o").string(), "--corpus", (dir / "empty.jsonl").string()}), 1);
    auto err = ::testing::internal::GetCapturedStderr();
    EXPECT_EQ(json::parse(err.substr(0, err.find('\n')))["error"], "empty_document");

    // Short documents only: no bucket reaches tau.
    std::ofstream(dir / "short.jsonl") << "{\"doc_id\":\"a\",\"tokens\":[1,2,3,4]}\n{\"doc_id\":\"b\",\"tokens\":[1,2,3,4]}\n";
    ASSERT_EQ(run({"pack", "--out", (dir / "p").string(), "--seq-len", "8", "--corpus", (dir / "short.jsonl").string()}), 0);
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(run({"export", "--out", (dir / "e").string(), "--packed", (dir / "p" / "packed.expk").string(), "--tau", "8"}),
              1);
    err = ::testing::internal::GetCapturedStderr();
    EXPECT_EQ(json::parse(err.substr(0, err.find('\n')))["error"], "empty_tail");
}

TEST(Cli, LossEvalRejectsForeignWeights) {
    const auto dir = exact::testing::scratch_dir("cli_foreign");
    ::testing::internal::CaptureStdout();
    pipeline(dir);
    ::testing::internal::GetCapturedStdout();
    ::testing::internal::CaptureStderr();
    // Weights exported for the training stream, CE from the held-out stream.
    EXPECT_EQ(run({"loss-eval", "--out", (dir / "x").string(), "--packed", (dir / "pack" / "heldout.expk").string(),
                   "--ce", (dir / "train" / "heldout_ce.exce").string(), "--weights",
                   (dir / "export" / "weights.exwt").string()}),
              1);
    const auto err = ::testing::internal::GetCapturedStderr();
    const auto code = json::parse(err.substr(0, err.find('\n')))["error"].get<std::string>();
    EXPECT_TRUE(code == "length_mismatch" || code == "fingerprint_mismatch") << code;
}

TEST(Cli, ConfigFileWithFlagOverride) {
    const auto dir = exact::testing::scratch_dir("cli_config");
    std::ofstream(dir / "c.jsonl") << "{\"doc_id\":\"a\",\"tokens\":[1,2,3,4,5,6,7,8,9,10,11,12,13,14,15,16,17,18,19,20,"
                                      "21,22,23,24,25,26,27,28,29,30,31,32]}\n";
    std::ofstream(dir / "run.toml") << "seq-len = 32\nalpha = 0.4\ngamma = 0.0\n";
    ASSERT_EQ(run({"--config", (dir / "run.toml").string(), "pack", "--out", (dir / "p").string(), "--corpus",
                   (dir / "c.jsonl").string()}),
              0);
    ASSERT_EQ(run({"--config", (dir / "run.toml").string(), "--alpha", "0.25", "export", "--out", (dir / "e").string(),
                   "--packed", (dir / "p" / "packed.expk").string()}),
              0);
    const auto t = read_json(dir / "e" / "weight_table.json");
    EXPECT_DOUBLE_EQ(t["alpha"].get<double>(), 0.25);
    EXPECT_DOUBLE_EQ(t["gamma"].get<double>(), 0.0);
    EXPECT_EQ(t["tau"], 8);
}

TEST(Cli, ProbeCommands) {
    const auto dir = exact::testing::scratch_dir("cli_probe");
    {
        std::ofstream dump(dir / "dump.jsonl");
        for (int k = 0; k < 20; ++k) {
            for (const char* arm : {"exact", "standard"}) {
                json j{{"prompt_id", "p" + std::to_string(k)},
                       {"context_length", 1000 + 100 * k},
                       {"evidence_distance", 50 * k},
                       {"margin_original", std::string(arm) == "exact" ? 2.0 + 0.01 * k : 1.5},
                       {"margin_counterfactual", 0.5},
                       {"arm", arm}};
                dump << j.dump() << "\n";
            }
        }
    }
    const auto d = dir.string();
    for (const char* mode : {"field", "delta", "bootstrap"}) {
        EXPECT_EQ(run({"probe", mode, "--out", d + "/o", "--seed", "1", "--dump", d + "/dump.jsonl", "--context-edges",
                       "0,2000,4000", "--distance-edges", "0,500,1000"}),
                  0)
            << mode;
    }
    EXPECT_TRUE(fs::exists(dir / "o" / "field_exact.tsv"));
    EXPECT_TRUE(fs::exists(dir / "o" / "delta.tsv"));
    const auto boot = binio::read_file(dir / "o" / "bootstrap.tsv");
    EXPECT_NE(boot.find("point\tlower\tupper"), std::string::npos);
    EXPECT_TRUE(fs::exists(dir / "o" / "probe-bootstrap.manifest.json"));
}
