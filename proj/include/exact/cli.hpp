#pragma once

// exact_alloc: one binary exposing the whole pipeline as subcommands.
//
//   synth      generate a synthetic needle-recall corpus
//   pack       pack a corpus into fixed-length sequences (EXPK)
//   stats      effective-context bucket statistics of a packed stream
//   weights    per-bucket weight table from statistics
//   export     packed stream + per-token weights bundle (EXWT)
//   loss-eval  weighted objective and loss-mass report from a CE dump
//   toy-train  train the toy model under a weight policy
//   probe      evidence-sensitivity fields, deltas and bootstrap intervals
//
// Shared flags live on the top-level app and fall through from subcommands.
// `--config FILE` reads TOML; command-line flags win over file values. Each
// run writes <command>.manifest.json with the resolved configuration and the
// content hashes of its inputs and outputs.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "exact/binio.hpp"
#include "exact/corpus.hpp"
#include "exact/error.hpp"
#include "exact/exposure.hpp"
#include "exact/numeric.hpp"
#include "exact/objective.hpp"
#include "exact/packer.hpp"
#include "exact/probe.hpp"
#include "exact/toylm.hpp"
#include "exact/version.hpp"
#include "exact/weights.hpp"

namespace exact::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- logging

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline LogLevel log_level() {
    const char* env = std::getenv("EXACT_ALLOC_LOG");
    if (!env) return LogLevel::warn;
    const std::string v(env);
    if (v == "error") return LogLevel::error;
    if (v == "info") return LogLevel::info;
    if (v == "debug") return LogLevel::debug;
    return LogLevel::warn;
}

inline void log(LogLevel level, const std::string& message) {
    static const char* names[] = {"error", "warn", "info", "debug"};
    if (level <= log_level()) std::cerr << "[exact_alloc " << names[static_cast<int>(level)] << "] " << message << "\n";
}

// ---------------------------------------------------------------- run manifest

/// Provenance bookkeeping for one subcommand run.
class RunRecord {
public:
    explicit RunRecord(std::string command) : command_(std::move(command)) {}

    json& config() { return config_; }

    void input(const std::string& role, const fs::path& path) {
        const auto bytes = binio::read_file(path);
        inputs_[role] = {{"file", path.filename().string()}, {"hash", corpus::hash_label(bytes)}};
    }

    void output(const fs::path& path, std::string_view bytes) {
        binio::write_file(path, bytes);
        outputs_[path.filename().string()] = corpus::hash_label(bytes);
    }

    std::string config_hash() const { return corpus::hash_label(config_.dump()); }

    /// "# exact_alloc <version> config=<hash>" line for text outputs.
    std::string provenance_line() const {
        return std::string("# ") + toolkit_name + " " + toolkit_version + " config=" + config_hash() + "\n";
    }

    json provenance() const {
        return {{"toolkit", toolkit_name}, {"version", toolkit_version}, {"config_hash", config_hash()},
                {"inputs", inputs_}};
    }

    void write_manifest(const fs::path& out_dir) const {
        json m;
        m["toolkit"] = toolkit_name;
        m["version"] = toolkit_version;
        m["command"] = command_;
        m["config"] = config_;
        m["config_hash"] = config_hash();
        m["inputs"] = inputs_;
        m["outputs"] = outputs_;
        binio::write_file(out_dir / (command_ + ".manifest.json"), m.dump(2) + "\n");
    }

private:
    std::string command_;
    json config_ = json::object();
    json inputs_ = json::object();
    json outputs_ = json::object();
};

// ---------------------------------------------------------------- options

struct SharedOptions {
    std::uint32_t seq_len = 1024;
    double alpha = 0.15;
    double gamma = 0.5;
    double epsilon = 1e-4;
    std::optional<std::uint32_t> tau;  // default: a quarter of the sequence length
    std::string kind = "exact";
    std::uint64_t seed = 0;
    bool seed_given = false;
    unsigned workers = 1;
    std::string out;

    std::uint32_t resolved_tau(std::uint32_t sequence_length) const { return tau ? *tau : sequence_length / 4; }

    weights::WeightPolicy policy(std::uint32_t sequence_length) const {
        weights::WeightPolicy p;
        p.kind = weights::parse_kind(kind);
        p.alpha = alpha;
        p.gamma = gamma;
        p.epsilon = epsilon;
        p.tau = resolved_tau(sequence_length);
        p.seed = seed;
        return p;
    }
};

inline json policy_json(const weights::WeightPolicy& p) {
    return {{"kind", weights::to_string(p.kind)}, {"alpha", p.alpha}, {"gamma", p.gamma},
            {"epsilon", p.epsilon}, {"tau", p.tau}, {"seed", p.seed}};
}

inline fs::path require_out(const SharedOptions& shared) {
    if (shared.out.empty()) fail(ErrorCode::invalid_argument, "--out is required");
    fs::create_directories(shared.out);
    return shared.out;
}

inline std::vector<std::uint64_t> parse_edges(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            fail(ErrorCode::invalid_argument, "bad edge list '" + s + "'");
        }
    }
    return out;
}

/// "w:mean,w:mean" -> geometric mixture components.
inline std::vector<corpus::LengthComponent> parse_mixture(const std::string& s) {
    std::vector<corpus::LengthComponent> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) fail(ErrorCode::invalid_argument, "mixture component '" + item + "' is not weight:mean");
        try {
            out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
        } catch (const std::exception&) {
            fail(ErrorCode::invalid_argument, "bad mixture component '" + item + "'");
        }
    }
    return out;
}

inline json edges_json(const probe::BinEdges& e) { return {{"context", e.context}, {"distance", e.distance}}; }

// ---------------------------------------------------------------- commands

struct SynthOptions {
    std::uint64_t docs = 1000;
    std::uint64_t heldout_docs = 0;
    std::uint32_t keys = 8;
    std::uint32_t fillers = 32;
    std::string lengths = "0.9:8,0.1:512";
    double recall_density = 0.05;
    std::string needle_rule = "shift";
    std::string format = "text";
};

inline void run_synth(const SharedOptions& shared, const SynthOptions& o) {
    const auto out = require_out(shared);
    corpus::SynthSpec spec;
    spec.key_alphabet = o.keys;
    spec.filler_alphabet = o.fillers;
    spec.lengths = parse_mixture(o.lengths);
    spec.recall_density = o.recall_density;
    if (o.needle_rule == "identity") {
        spec.needle_rule = corpus::NeedleRule::identity;
    } else if (o.needle_rule == "shift") {
        spec.needle_rule = corpus::NeedleRule::shift;
    } else {
        fail(ErrorCode::invalid_argument, "unknown needle rule '" + o.needle_rule + "'");
    }
    spec.document_count = o.docs;
    spec.seed = shared.seed;
    const auto format = o.format == "binary" ? corpus::Format::binary : corpus::Format::text;
    if (o.format != "binary" && o.format != "text") fail(ErrorCode::invalid_argument, "unknown corpus format '" + o.format + "'");

    RunRecord run("synth");
    run.config() = {{"docs", o.docs},           {"heldout_docs", o.heldout_docs}, {"keys", o.keys},
                    {"fillers", o.fillers},     {"lengths", o.lengths},           {"recall_density", o.recall_density},
                    {"needle_rule", o.needle_rule}, {"format", o.format},          {"seed", shared.seed},
                    {"vocab_size", spec.vocab_size()}};

    const std::string ext = format == corpus::Format::text ? ".jsonl" : ".extk";
    auto emit = [&](const corpus::SynthSpec& s, const std::string& stem, const std::string& split) {
        auto generated = corpus::generate_synthetic_corpus(s);
        const auto bytes = format == corpus::Format::text ? corpus::encode_text(generated.documents)
                                                          : corpus::encode_binary(generated.documents, s.vocab_size());
        const auto file = out / (stem + ext);
        run.output(file, bytes);
        generated.manifest.sources.push_back({file.filename().string(), corpus::hash_label(bytes)});
        generated.manifest.split_sizes.clear();
        generated.manifest.split_sizes[split] = s.document_count;
        run.output(out / (stem + ".manifest.json"), corpus::to_json(generated.manifest).dump(2) + "\n");
        log(LogLevel::info, "synth: wrote " + std::to_string(generated.manifest.document_count) + " documents, " +
                                std::to_string(generated.manifest.total_tokens) + " tokens to " + file.string());
    };
    emit(spec, "corpus", "train");
    if (o.heldout_docs > 0) {
        auto held = spec;
        held.document_count = o.heldout_docs;
        held.seed = derive_seed(spec.seed, 1);
        emit(held, "heldout", "heldout");
    }
    run.write_manifest(out);
}

struct PackOptions {
    std::string corpus;
    std::string manifest;
    std::string name = "packed";
    bool pad_final = false;
    std::uint32_t pad_id = packer::default_pad_id;
};

inline void run_pack(const SharedOptions& shared, const PackOptions& o) {
    const auto out = require_out(shared);
    RunRecord run("pack");
    std::optional<corpus::CorpusManifest> manifest;
    if (!o.manifest.empty()) {
        manifest = corpus::read_manifest(o.manifest);
        run.input("manifest", o.manifest);
    }
    const auto docs = corpus::load_documents(o.corpus, manifest);
    run.input("corpus", o.corpus);

    packer::PackPolicy policy;
    policy.sequence_length = shared.seq_len;
    if (shared.seed_given) policy.document_permutation_seed = shared.seed;
    policy.drop_final_partial = !o.pad_final;
    policy.pad_id = o.pad_id;
    run.config() = {{"seq_len", policy.sequence_length},
                    {"permutation_seed", shared.seed_given ? json(shared.seed) : json(nullptr)},
                    {"drop_final_partial", policy.drop_final_partial},
                    {"pad_id", policy.pad_id}};

    const auto stream = packer::pack_stream(docs, policy);
    const auto file = out / (o.name + ".expk");
    run.output(file, packer::encode(stream));
    run.output(packer::sidecar_path(file), packer::encode_doc_refs(stream));
    log(LogLevel::info, "pack: " + std::to_string(stream.sequences.size()) + " sequences of length " +
                            std::to_string(stream.sequence_length));
    run.write_manifest(out);
}

struct StatsOptions {
    std::string packed;
    std::string signal = "effective_context";
};

inline void run_stats(const SharedOptions& shared, const StatsOptions& o) {
    const auto out = require_out(shared);
    RunRecord run("stats");
    const auto stream = packer::read_stream(o.packed);
    run.input("packed", o.packed);
    exposure::PositionSignal signal;
    if (o.signal == "effective_context") {
        signal = exposure::PositionSignal::effective_context;
    } else if (o.signal == "packed_offset") {
        signal = exposure::PositionSignal::packed_offset;
    } else {
        fail(ErrorCode::invalid_argument, "unknown signal '" + o.signal + "'");
    }
    run.config() = {{"signal", o.signal}, {"workers", shared.workers}};
    const auto stats = exposure::collect_stats(stream, signal, shared.workers);
    auto j = exposure::to_json(stats);
    j["provenance"] = run.provenance();
    run.output(out / "stats.json", j.dump(2) + "\n");
    run.write_manifest(out);
}

inline exposure::BucketStats read_stats(const fs::path& path) {
    try {
        return exposure::stats_from_json(json::parse(binio::read_file(path)));
    } catch (const json::exception& e) {
        fail(ErrorCode::format_error, path.string() + ": " + e.what());
    }
}

struct WeightsOptions {
    std::string stats;
};

inline void run_weights(const SharedOptions& shared, const WeightsOptions& o) {
    const auto out = require_out(shared);
    RunRecord run("weights");
    const auto stats = read_stats(o.stats);
    run.input("stats", o.stats);
    const auto policy = shared.policy(shared.seq_len);
    run.config() = policy_json(policy);
    run.config()["seq_len"] = shared.seq_len;
    const auto table = weights::compute_bucket_weights(stats, policy);
    auto j = weights::to_json(table, policy);
    j["provenance"] = run.provenance();
    run.output(out / "weight_table.json", j.dump(2) + "\n");
    run.write_manifest(out);
}

inline weights::TableFile read_table(const fs::path& path) {
    try {
        return weights::table_from_json(json::parse(binio::read_file(path)));
    } catch (const json::exception& e) {
        fail(ErrorCode::format_error, path.string() + ": " + e.what());
    }
}

struct ExportOptions {
    std::string packed;
    std::string stats;
    std::string table;
};

inline void run_export(const SharedOptions& shared, const ExportOptions& o) {
    const auto out = require_out(shared);
    RunRecord run("export");
    const auto stream = packer::read_stream(o.packed);
    run.input("packed", o.packed);

    weights::WeightPolicy policy;
    weights::WeightTable table;
    if (!o.table.empty()) {
        auto f = read_table(o.table);
        run.input("table", o.table);
        policy = f.policy;
        table = std::move(f.table);
    } else {
        policy = shared.policy(stream.sequence_length);
        if (!o.stats.empty()) {
            run.input("stats", o.stats);
            table = weights::compute_bucket_weights(read_stats(o.stats), policy);
        } else {
            table = weights::build_weight_table(stream, policy, shared.workers);
        }
    }
    run.config() = policy_json(policy);
    const auto token_weights = weights::assign_token_weights(stream, table, policy);
    run.output(out / "packed.expk", packer::encode(stream));
    run.output(packer::sidecar_path(out / "packed.expk"), packer::encode_doc_refs(stream));
    run.output(out / "weights.exwt", weights::encode_weight_file(policy, table, stream, token_weights));
    auto j = weights::to_json(table, policy);
    j["provenance"] = run.provenance();
    j["extra_weight_mass"] = weights::extra_weight_mass(stream, token_weights);
    run.output(out / "weight_table.json", j.dump(2) + "\n");
    run.write_manifest(out);
}

struct LossEvalOptions {
    std::string packed;
    std::string ce;
    std::string weights;
    std::string normalization = "mask_sum";
    std::uint64_t display_threshold = 4096;
};

inline void run_loss_eval(const SharedOptions& shared, const LossEvalOptions& o) {
    const auto out = require_out(shared);
    RunRecord run("loss-eval");
    const auto stream = packer::read_stream(o.packed);
    run.input("packed", o.packed);
    const auto ce = objective::decode_ce_dump(binio::read_file(o.ce), stream.sequence_length, o.ce);
    run.input("ce", o.ce);
    if (ce.size() != stream.token_count()) {
        fail(ErrorCode::length_mismatch, "loss-eval: CE dump covers " + std::to_string(ce.size()) +
                                             " positions, stream has " + std::to_string(stream.token_count()));
    }
    std::vector<double> token_weights(stream.token_count(), 1.0);
    std::string weight_kind = "identity";
    if (!o.weights.empty()) {
        const auto f = weights::decode_weight_file(binio::read_file(o.weights), o.weights);
        run.input("weights", o.weights);
        weights::check_alignment(f, stream);
        token_weights = weights::widen(f.token_weights);
        weight_kind = weights::to_string(f.policy.kind);
    }
    const objective::ObjectiveConfig config{objective::parse_normalization(o.normalization)};
    run.config() = {{"normalization", o.normalization}, {"display_threshold", o.display_threshold},
                    {"weight_kind", weight_kind}};

    std::vector<std::uint8_t> mask;
    mask.reserve(stream.token_count());
    for (const auto& seq : stream.sequences) mask.insert(mask.end(), seq.loss_mask.begin(), seq.loss_mask.end());
    const double loss = objective::weighted_loss(ce, mask, token_weights, config);
    const std::vector<double> ones(mask.size(), 1.0);
    const double plain = objective::weighted_loss(ce, mask, ones, {objective::Normalization::mask_sum});

    json j;
    j["loss"] = loss;
    j["masked_mean_ce"] = plain;
    j["normalization"] = o.normalization;
    j["weight_kind"] = weight_kind;
    j["provenance"] = run.provenance();
    run.output(out / "loss.json", j.dump(2) + "\n");
    const auto report = exposure::loss_mass_report(stream, ce, token_weights, o.display_threshold);
    run.output(out / "loss_mass.tsv", run.provenance_line() + exposure::format_report(report));
    run.write_manifest(out);
    std::cout << std::setprecision(17) << loss << "\n";
}

struct ToyTrainOptions {
    std::string packed;
    std::string heldout;
    std::string table;
    std::uint32_t vocab = 0;
    std::uint64_t steps = 200;
    std::uint32_t batch = 4;
    double lr = 0.5;
    std::uint32_t dim = 32;
    std::uint64_t eval_every = 50;
    std::string normalization = "mask_sum";
};

inline void run_toy_train(const SharedOptions& shared, const ToyTrainOptions& o) {
    const auto out = require_out(shared);
    if (o.vocab == 0) fail(ErrorCode::invalid_argument, "toy-train: --vocab is required");
    RunRecord run("toy-train");
    const auto train_stream = packer::read_stream(o.packed);
    run.input("packed", o.packed);
    const auto heldout = packer::read_stream(o.heldout);
    run.input("heldout", o.heldout);

    weights::WeightPolicy policy;
    weights::WeightTable table;
    if (!o.table.empty()) {
        auto f = read_table(o.table);
        run.input("table", o.table);
        policy = f.policy;
        table = std::move(f.table);
    } else {
        policy = shared.policy(train_stream.sequence_length);
        table = weights::build_weight_table(train_stream, policy, shared.workers);
    }
    const auto token_weights = weights::assign_token_weights(train_stream, table, policy);

    toylm::TrainConfig config;
    config.steps = o.steps;
    config.batch_size = o.batch;
    config.learning_rate = o.lr;
    config.seed = shared.seed;
    config.eval_every = o.eval_every;
    config.dim = o.dim;
    config.objective.normalization = objective::parse_normalization(o.normalization);
    run.config() = policy_json(policy);
    run.config().update({{"vocab", o.vocab}, {"steps", o.steps}, {"batch", o.batch}, {"lr", o.lr}, {"dim", o.dim},
                         {"eval_every", o.eval_every}, {"normalization", o.normalization}, {"train_seed", shared.seed}});

    const auto result = toylm::train(train_stream, token_weights, heldout, o.vocab, config);
    run.output(out / "metrics.tsv", run.provenance_line() + toylm::format_metrics(result.metrics));
    run.output(out / "model.ckpt", toylm::encode_checkpoint(result.model));
    run.output(out / "heldout_ce.exce", objective::encode_ce_dump(result.metrics.back().heldout.ce, heldout.sequence_length));
    run.write_manifest(out);
}

struct ProbeOptions {
    std::string dump;
    std::string margin_mode = "direct";
    std::string context_edges;
    std::string distance_edges;
    std::string view;
    std::string arm_a = "exact";
    std::string arm_b = "standard";
    double display_lo = 5.0;
    double display_hi = 95.0;
    std::size_t resamples = 2000;
    double confidence = 0.95;
};

inline std::vector<probe::ProbeRecord> load_probe(RunRecord& run, const ProbeOptions& o) {
    auto records = probe::parse_dump(binio::read_file(o.dump), probe::parse_margin_mode(o.margin_mode), o.dump);
    run.input("dump", o.dump);
    if (!o.view.empty()) {
        std::erase_if(records, [&](const probe::ProbeRecord& r) { return !r.view || *r.view != o.view; });
    }
    return records;
}

inline std::vector<probe::ProbeRecord> records_for_arm(const std::vector<probe::ProbeRecord>& all, const std::string& arm) {
    std::vector<probe::ProbeRecord> out;
    for (const auto& r : all) {
        if (r.arm == arm) out.push_back(r);
    }
    return out;
}

inline void run_probe(const SharedOptions& shared, const ProbeOptions& o, const std::string& mode) {
    const auto out = require_out(shared);
    RunRecord run("probe-" + mode);
    probe::BinEdges edges{parse_edges(o.context_edges), parse_edges(o.distance_edges)};
    edges.validate();
    const auto records = load_probe(run, o);
    run.config() = {{"margin_mode", o.margin_mode}, {"edges", edges_json(edges)}, {"view", o.view},
                    {"arm_a", o.arm_a}, {"arm_b", o.arm_b}};
    const std::string header = run.provenance_line() + "# margin_mode\t" + o.margin_mode + "\n";

    const auto field_a = probe::build_field(records_for_arm(records, o.arm_a), edges);
    const auto field_b = probe::build_field(records_for_arm(records, o.arm_b), edges);

    if (mode == "field") {
        run.config().update({{"display_lo", o.display_lo}, {"display_hi", o.display_hi}});
        const std::vector<probe::ProbeField> fields{field_a, field_b};
        const auto norm = probe::robust_display_normalize(fields, o.display_lo, o.display_hi);
        if (norm.degenerate) log(LogLevel::warn, "probe: degenerate display range, all cells shown as 0.5");
        const std::string flag = std::string("# display_degenerate\t") + (norm.degenerate ? "true" : "false") + "\n";
        run.output(out / ("field_" + o.arm_a + ".tsv"), header + flag + probe::format_field(field_a, &norm.values[0]));
        run.output(out / ("field_" + o.arm_b + ".tsv"), header + flag + probe::format_field(field_b, &norm.values[1]));
    } else if (mode == "delta") {
        run.output(out / "delta.tsv", header + probe::format_field(probe::delta_field(field_a, field_b)));
    } else {
        run.config().update({{"resamples", o.resamples}, {"confidence", o.confidence}, {"seed", shared.seed}});
        const auto cells = probe::pair_by_prompt(records, o.arm_a, o.arm_b, edges);
        const auto ci = probe::paired_bootstrap_ci(cells, o.resamples, o.confidence, shared.seed);
        std::ostringstream os;
        os.precision(17);
        os << header << "# aggregation\tmacro_mean\n";
        os << "point\tlower\tupper\tresamples\tconfidence\tcells\n";
        os << ci.point << "\t" << ci.lower << "\t" << ci.upper << "\t" << ci.resamples << "\t" << ci.confidence << "\t"
           << cells.size() << "\n";
        run.output(out / "bootstrap.tsv", os.str());
    }
    run.write_manifest(out);
}

// ---------------------------------------------------------------- dispatch

inline void print_error(const std::string& code, const std::string& message) {
    std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
}

/// Parse argv and run one subcommand. Returns the process exit status:
/// 0 on success, 1 on a module error, 2 on a usage error.
inline int dispatch(int argc, const char* const* argv) {
    CLI::App app{"Effective-context supervision allocation toolkit", "exact_alloc"};
    app.set_version_flag("--version", std::string(toolkit_version));
    app.set_config("--config", "", "TOML configuration file; flags override file values");
    app.require_subcommand(1);
    app.allow_config_extras(false);

    SharedOptions shared;
    app.add_option("--seq-len", shared.seq_len, "Packed sequence length L (tokens)")->capture_default_str();
    app.add_option("--alpha", shared.alpha, "Average extra tail weight")->capture_default_str();
    app.add_option("--gamma", shared.gamma, "Inverse-frequency sharpness")->capture_default_str();
    app.add_option("--epsilon", shared.epsilon, "Smoothing constant inside the power")->capture_default_str();
    app.add_option("--tau", shared.tau, "Long-context threshold in tokens (default: seq-len / 4)");
    app.add_option("--kind", shared.kind, "Weight policy")
        ->check(CLI::IsMember({"identity", "exact", "uniform_boost", "packed_position", "random_same_mass"}))
        ->capture_default_str();
    auto* seed_opt = app.add_option("--seed", shared.seed, "Seed for the command's randomness")->capture_default_str();
    app.add_option("--workers", shared.workers, "Worker threads for shardable passes")
        ->check(CLI::Range(1u, 1024u))
        ->capture_default_str();
    app.add_option("--out", shared.out, "Output directory");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic needle-recall corpus")->fallthrough();
    SynthOptions synth_o;
    synth->add_option("--docs", synth_o.docs)->capture_default_str();
    synth->add_option("--heldout-docs", synth_o.heldout_docs)->capture_default_str();
    synth->add_option("--keys", synth_o.keys)->capture_default_str();
    synth->add_option("--fillers", synth_o.fillers)->capture_default_str();
    synth->add_option("--lengths", synth_o.lengths, "Geometric mixture as weight:mean,...")->capture_default_str();
    synth->add_option("--recall-density", synth_o.recall_density)->capture_default_str();
    synth->add_option("--needle-rule", synth_o.needle_rule)->check(CLI::IsMember({"identity", "shift"}))->capture_default_str();
    synth->add_option("--format", synth_o.format)->check(CLI::IsMember({"text", "binary"}))->capture_default_str();

    auto* pack = app.add_subcommand("pack", "Pack a corpus into fixed-length sequences")->fallthrough();
    PackOptions pack_o;
    pack->add_option("--corpus", pack_o.corpus)->required();
    pack->add_option("--manifest", pack_o.manifest);
    pack->add_option("--name", pack_o.name)->capture_default_str();
    pack->add_flag("--pad-final", pack_o.pad_final, "Pad the final partial sequence instead of dropping it");
    pack->add_option("--pad-id", pack_o.pad_id)->capture_default_str();

    auto* stats = app.add_subcommand("stats", "Bucket statistics of a packed stream")->fallthrough();
    StatsOptions stats_o;
    stats->add_option("--packed", stats_o.packed)->required();
    stats->add_option("--signal", stats_o.signal)
        ->check(CLI::IsMember({"effective_context", "packed_offset"}))
        ->capture_default_str();

    auto* wts = app.add_subcommand("weights", "Per-bucket weight table from statistics")->fallthrough();
    WeightsOptions weights_o;
    wts->add_option("--stats", weights_o.stats)->required();

    auto* exp = app.add_subcommand("export", "Packed stream + per-token weight bundle")->fallthrough();
    ExportOptions export_o;
    exp->add_option("--packed", export_o.packed)->required();
    exp->add_option("--stats", export_o.stats);
    exp->add_option("--table", export_o.table, "Weight table JSON (overrides policy flags)");

    auto* loss = app.add_subcommand("loss-eval", "Weighted objective and loss-mass report")->fallthrough();
    LossEvalOptions loss_o;
    loss->add_option("--packed", loss_o.packed)->required();
    loss->add_option("--ce", loss_o.ce)->required();
    loss->add_option("--weights", loss_o.weights, "EXWT file (default: identity weights)");
    loss->add_option("--normalization", loss_o.normalization)
        ->check(CLI::IsMember({"mask_sum", "weighted_mask_sum"}))
        ->capture_default_str();
    loss->add_option("--display-threshold", loss_o.display_threshold)->capture_default_str();

    auto* toy = app.add_subcommand("toy-train", "Train the toy model under a weight policy")->fallthrough();
    ToyTrainOptions toy_o;
    toy->add_option("--packed", toy_o.packed)->required();
    toy->add_option("--heldout", toy_o.heldout)->required();
    toy->add_option("--table", toy_o.table, "Weight table JSON (overrides policy flags)");
    toy->add_option("--vocab", toy_o.vocab)->required();
    toy->add_option("--steps", toy_o.steps)->capture_default_str();
    toy->add_option("--batch", toy_o.batch)->capture_default_str();
    toy->add_option("--lr", toy_o.lr)->capture_default_str();
    toy->add_option("--dim", toy_o.dim)->capture_default_str();
    toy->add_option("--eval-every", toy_o.eval_every)->capture_default_str();
    toy->add_option("--normalization", toy_o.normalization)
        ->check(CLI::IsMember({"mask_sum", "weighted_mask_sum"}))
        ->capture_default_str();

    auto* prb = app.add_subcommand("probe", "Evidence-sensitivity analysis of probe dumps")->fallthrough();
    prb->require_subcommand(1);
    ProbeOptions probe_o;
    std::string probe_mode;
    for (const char* mode : {"field", "delta", "bootstrap"}) {
        auto* sub = prb->add_subcommand(mode)->fallthrough();
        sub->add_option("--dump", probe_o.dump)->required();
        sub->add_option("--margin-mode", probe_o.margin_mode)
            ->check(CLI::IsMember({"direct", "competitor-max"}))
            ->capture_default_str();
        sub->add_option("--context-edges", probe_o.context_edges)->required();
        sub->add_option("--distance-edges", probe_o.distance_edges)->required();
        sub->add_option("--view", probe_o.view);
        sub->add_option("--arm-a", probe_o.arm_a)->capture_default_str();
        sub->add_option("--arm-b", probe_o.arm_b)->capture_default_str();
        sub->add_option("--display-lo", probe_o.display_lo)->capture_default_str();
        sub->add_option("--display-hi", probe_o.display_hi)->capture_default_str();
        sub->add_option("--resamples", probe_o.resamples)->capture_default_str();
        sub->add_option("--confidence", probe_o.confidence)->capture_default_str();
        sub->final_callback([&probe_mode, mode] { probe_mode = mode; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }
    shared.seed_given = seed_opt->count() > 0;

    try {
        if (*synth) {
            run_synth(shared, synth_o);
        } else if (*pack) {
            run_pack(shared, pack_o);
        } else if (*stats) {
            run_stats(shared, stats_o);
        } else if (*wts) {
            run_weights(shared, weights_o);
        } else if (*exp) {
            run_export(shared, export_o);
        } else if (*loss) {
            run_loss_eval(shared, loss_o);
        } else if (*toy) {
            run_toy_train(shared, toy_o);
        } else if (*prb) {
            run_probe(shared, probe_o, probe_mode);
        }
    } catch (const Error& e) {
        print_error(to_string(e.code()), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}

}  // namespace exact::cli
