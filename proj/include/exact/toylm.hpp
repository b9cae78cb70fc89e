#pragma once

// A tiny hand-differentiated language model for desk-scale A/B experiments.
//
// For a target at position i with effective context ell_i > 0 the feature is
//
//     f_i = [ e(x_{i-1}) ; (1/ell_i) * sum_{j=s(i)}^{i-1} e(x_j) ]      (2d)
//
// and logits_i = f_i W + bias. Segment-initial targets (ell_i = 0) see a zero
// feature, so their logits are the bias alone. The pooled half carries the
// document's first token with strength 1/ell_i, which makes long-context
// recall targets progressively harder.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "exact/binio.hpp"
#include "exact/error.hpp"
#include "exact/exposure.hpp"
#include "exact/numeric.hpp"
#include "exact/objective.hpp"
#include "exact/packer.hpp"
#include "exact/weights.hpp"

namespace exact::toylm {

using exposure::Bucket;
using packer::PackedSequence;
using packer::PackedStream;

struct ToyModel {
    std::uint32_t vocab_size = 0;
    std::uint32_t dim = 0;
    std::vector<double> embedding;  // vocab_size x dim, row-major
    std::vector<double> output;     // (2 dim) x vocab_size, row-major
    std::vector<double> bias;       // vocab_size

    /// Embeddings uniform in [-1/sqrt(d), 1/sqrt(d)]; output map and bias zero,
    /// so the initial model predicts the uniform distribution.
    static ToyModel initialize(std::uint32_t vocab_size, std::uint32_t dim, std::uint64_t seed) {
        if (vocab_size == 0 || dim == 0) fail(ErrorCode::invalid_argument, "toylm: vocab and dim must be positive");
        ToyModel m;
        m.vocab_size = vocab_size;
        m.dim = dim;
        m.embedding.resize(static_cast<std::size_t>(vocab_size) * dim);
        m.output.assign(static_cast<std::size_t>(2) * dim * vocab_size, 0.0);
        m.bias.assign(vocab_size, 0.0);
        Rng rng(seed);
        const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
        for (auto& x : m.embedding) x = rng.uniform(-scale, scale);
        return m;
    }

    std::size_t parameter_count() const { return embedding.size() + output.size() + bias.size(); }

    /// Flat view index -> parameter, ordered embedding, output, bias.
    double& parameter(std::size_t k) {
        if (k < embedding.size()) return embedding[k];
        k -= embedding.size();
        if (k < output.size()) return output[k];
        return bias[k - output.size()];
    }

    friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

struct Gradients {
    std::vector<double> embedding;
    std::vector<double> output;
    std::vector<double> bias;

    static Gradients zeros_like(const ToyModel& m) {
        return {std::vector<double>(m.embedding.size(), 0.0), std::vector<double>(m.output.size(), 0.0),
                std::vector<double>(m.bias.size(), 0.0)};
    }

    double at(std::size_t k) const {
        if (k < embedding.size()) return embedding[k];
        k -= embedding.size();
        if (k < output.size()) return output[k];
        return bias[k - output.size()];
    }
};

/// A batch is a list of sequences with flattened, aligned per-token weights.
struct Batch {
    std::vector<const PackedSequence*> sequences;
    std::uint32_t sequence_length = 0;
    std::span<const double> weights;  // sequences.size() * sequence_length
};

struct ForwardCache {
    std::uint32_t sequence_length = 0;
    std::vector<std::uint8_t> mask;   // flattened
    std::vector<double> ce;           // flattened; 0 at masked positions
    std::vector<double> features;     // 2d per position (zeros where unused)
    std::vector<double> probs;        // V per position (zeros where masked)
};

struct ForwardResult {
    double loss = 0.0;
    std::vector<double> ce;  // flattened per-token CE, 0 where masked
    ForwardCache cache;
};

namespace detail {

inline void check_token(const ToyModel& m, std::uint32_t token, std::size_t s, std::size_t i) {
    if (token >= m.vocab_size) {
        fail(ErrorCode::token_out_of_range, "toylm: token " + std::to_string(token) + " at sequence " +
                                                std::to_string(s) + " position " + std::to_string(i) +
                                                " >= vocab_size " + std::to_string(m.vocab_size));
    }
}

/// Features, softmax and CE for every supervised position of one sequence.
inline void forward_sequence(const ToyModel& m, const PackedSequence& seq, std::size_t s, std::size_t base,
                             ForwardCache& cache) {
    const std::size_t L = seq.length();
    const std::size_t d = m.dim;
    const std::size_t V = m.vocab_size;
    std::vector<double> pooled(d, 0.0);
    std::vector<double> logits(V);

    for (std::size_t i = 0; i < L; ++i) {
        const std::uint32_t ell = seq.effective_context[i];
        if (ell == 0) std::fill(pooled.begin(), pooled.end(), 0.0);
        const std::size_t k = base + i;
        cache.mask[k] = seq.loss_mask[i];
        const std::uint32_t target = seq.tokens[i];
        if (!seq.loss_mask[i]) {
            // Unsupervised context still feeds the pool; out-of-vocab pad ids do not.
            if (target < V) {
                const double* e = m.embedding.data() + static_cast<std::size_t>(target) * d;
                for (std::size_t c = 0; c < d; ++c) pooled[c] += e[c];
            }
            continue;
        }
        check_token(m, target, s, i);

        double* f = cache.features.data() + k * 2 * d;
        if (ell > 0) {
            const std::uint32_t prev = seq.tokens[i - 1];
            check_token(m, prev, s, i - 1);
            const double* e_prev = m.embedding.data() + static_cast<std::size_t>(prev) * d;
            const double inv = 1.0 / static_cast<double>(ell);
            for (std::size_t c = 0; c < d; ++c) {
                f[c] = e_prev[c];
                f[d + c] = pooled[c] * inv;
            }
        }

        std::copy(m.bias.begin(), m.bias.end(), logits.begin());
        if (ell > 0) {
            for (std::size_t r = 0; r < 2 * d; ++r) {
                const double fr = f[r];
                if (fr == 0.0) continue;
                const double* row = m.output.data() + r * V;
                for (std::size_t v = 0; v < V; ++v) logits[v] += fr * row[v];
            }
        }
        const double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        double* p = cache.probs.data() + k * V;
        for (std::size_t v = 0; v < V; ++v) {
            p[v] = std::exp(logits[v] - mx);
            z += p[v];
        }
        for (std::size_t v = 0; v < V; ++v) p[v] /= z;
        const double ce = (mx + std::log(z)) - logits[target];
        if (!std::isfinite(ce)) {
            fail(ErrorCode::non_finite, "toylm: non-finite CE at sequence " + std::to_string(s) + " position " +
                                            std::to_string(i));
        }
        cache.ce[k] = std::max(ce, 0.0);

        // The pooled sum for position i+1 includes token i.
        const double* e_cur = m.embedding.data() + static_cast<std::size_t>(target) * d;
        for (std::size_t c = 0; c < d; ++c) pooled[c] += e_cur[c];
    }
}

}  // namespace detail

inline ForwardResult forward_loss(const ToyModel& model, const Batch& batch, objective::ObjectiveConfig config = {}) {
    const std::size_t L = batch.sequence_length;
    const std::size_t n = batch.sequences.size() * L;
    if (batch.weights.size() != n) {
        fail(ErrorCode::length_mismatch, "toylm: batch weights do not align with the sequences");
    }
    ForwardResult out;
    auto& cache = out.cache;
    cache.sequence_length = batch.sequence_length;
    cache.mask.assign(n, 0);
    cache.ce.assign(n, 0.0);
    cache.features.assign(n * 2 * model.dim, 0.0);
    cache.probs.assign(n * model.vocab_size, 0.0);
    for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
        if (batch.sequences[s]->length() != L) fail(ErrorCode::length_mismatch, "toylm: ragged batch");
        detail::forward_sequence(model, *batch.sequences[s], s, s * L, cache);
    }
    out.loss = objective::weighted_loss(cache.ce, cache.mask, batch.weights, config);
    if (!std::isfinite(out.loss)) fail(ErrorCode::non_finite, "toylm: non-finite batch loss");
    out.ce = cache.ce;
    return out;
}

/// Single-sequence convenience over forward_loss.
inline ForwardResult forward_loss(const ToyModel& model, const PackedSequence& seq, std::span<const double> weights,
                                  objective::ObjectiveConfig config = {}) {
    return forward_loss(model, Batch{{&seq}, static_cast<std::uint32_t>(seq.length()), weights}, config);
}

/// Exact gradients of the weighted loss computed by the matching forward_loss.
inline Gradients backward(const ToyModel& model, const Batch& batch, const ForwardCache& cache,
                          objective::ObjectiveConfig config = {}) {
    const std::size_t L = batch.sequence_length;
    const std::size_t d = model.dim;
    const std::size_t V = model.vocab_size;
    const auto scale = objective::gradient_scale(cache.mask, batch.weights, config);
    Gradients g = Gradients::zeros_like(model);

    std::vector<double> dlogits(V);
    std::vector<double> pool_grad;  // d per position of the current sequence
    std::vector<double> acc(d);

    for (std::size_t s = 0; s < batch.sequences.size(); ++s) {
        const auto& seq = *batch.sequences[s];
        pool_grad.assign(L * d, 0.0);
        for (std::size_t i = 0; i < L; ++i) {
            const std::size_t k = s * L + i;
            if (!cache.mask[k] || scale[k] == 0.0) continue;
            const double* p = cache.probs.data() + k * V;
            for (std::size_t v = 0; v < V; ++v) dlogits[v] = scale[k] * p[v];
            dlogits[seq.tokens[i]] -= scale[k];
            for (std::size_t v = 0; v < V; ++v) g.bias[v] += dlogits[v];

            const std::uint32_t ell = seq.effective_context[i];
            if (ell == 0) continue;
            const double* f = cache.features.data() + k * 2 * d;
            double* e_prev_grad = g.embedding.data() + static_cast<std::size_t>(seq.tokens[i - 1]) * d;
            const double inv = 1.0 / static_cast<double>(ell);
            for (std::size_t r = 0; r < 2 * d; ++r) {
                const double* wrow = model.output.data() + r * V;
                double* grow = g.output.data() + r * V;
                double df = 0.0;
                for (std::size_t v = 0; v < V; ++v) {
                    grow[v] += f[r] * dlogits[v];
                    df += wrow[v] * dlogits[v];
                }
                if (r < d) {
                    e_prev_grad[r] += df;
                } else {
                    pool_grad[i * d + (r - d)] = df * inv;
                }
            }
        }
        // Position j receives the pooled gradient of every later in-segment target.
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = L; i-- > 0;) {
            if (seq.tokens[i] < V) {
                double* e_grad = g.embedding.data() + static_cast<std::size_t>(seq.tokens[i]) * d;
                for (std::size_t c = 0; c < d; ++c) e_grad[c] += acc[c];
            }
            if (seq.effective_context[i] == 0) {
                std::fill(acc.begin(), acc.end(), 0.0);
            } else {
                for (std::size_t c = 0; c < d; ++c) acc[c] += pool_grad[i * d + c];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------- evaluation

struct BucketCE {
    Bucket bucket = 0;
    std::uint64_t lower_bound = 0;
    std::uint64_t tokens = 0;
    double mean_ce = 0.0;
};

struct Evaluation {
    std::vector<BucketCE> buckets;  // occupied buckets only, ascending
    double mean_ce = 0.0;           // over all supervised targets
    std::vector<double> ce;         // flattened per-token CE (0 where masked)
};

/// Mean CE over supervised targets grouped by bucket, from a per-token CE array.
inline std::vector<BucketCE> bucket_means(const PackedStream& stream, std::span<const double> ce) {
    const std::size_t L = stream.sequence_length;
    if (ce.size() != stream.token_count()) fail(ErrorCode::length_mismatch, "bucket means: CE does not align with stream");
    std::map<Bucket, std::pair<CompensatedSum, std::uint64_t>> acc;
    for (std::size_t s = 0; s < stream.sequences.size(); ++s) {
        const auto& seq = stream.sequences[s];
        for (std::size_t i = 0; i < L; ++i) {
            if (!seq.loss_mask[i]) continue;
            auto& [sum, n] = acc[exposure::bucket_of(seq.effective_context[i])];
            sum.add(ce[s * L + i]);
            ++n;
        }
    }
    std::vector<BucketCE> out;
    for (const auto& [b, entry] : acc) {
        out.push_back({b, exposure::bucket_lower_bound(b), entry.second, entry.first.value() / static_cast<double>(entry.second)});
    }
    return out;
}

inline Evaluation evaluate_by_bucket(const ToyModel& model, const PackedStream& heldout) {
    Evaluation ev;
    const std::size_t L = heldout.sequence_length;
    ev.ce.assign(heldout.token_count(), 0.0);
    ForwardCache cache;
    cache.sequence_length = heldout.sequence_length;
    cache.mask.assign(L, 0);
    cache.ce.assign(L, 0.0);
    cache.features.assign(L * 2 * model.dim, 0.0);
    cache.probs.assign(L * model.vocab_size, 0.0);
    CompensatedSum total;
    std::uint64_t count = 0;
    for (std::size_t s = 0; s < heldout.sequences.size(); ++s) {
        std::fill(cache.ce.begin(), cache.ce.end(), 0.0);
        detail::forward_sequence(model, heldout.sequences[s], s, 0, cache);
        for (std::size_t i = 0; i < L; ++i) {
            ev.ce[s * L + i] = cache.ce[i];
            if (cache.mask[i]) {
                total.add(cache.ce[i]);
                ++count;
            }
        }
    }
    ev.buckets = bucket_means(heldout, ev.ce);
    ev.mean_ce = count ? total.value() / static_cast<double>(count) : 0.0;
    return ev;
}

/// Token-pooled mean CE over the buckets with lower bound >= tau (tail=true)
/// or < tau (tail=false). Returns nullopt when no such bucket is occupied.
inline std::optional<double> region_mean_ce(const Evaluation& ev, std::uint64_t tau, bool tail) {
    CompensatedSum sum;
    std::uint64_t n = 0;
    for (const auto& b : ev.buckets) {
        if ((b.lower_bound >= tau) != tail) continue;
        sum.add(b.mean_ce * static_cast<double>(b.tokens));
        n += b.tokens;
    }
    if (n == 0) return std::nullopt;
    return sum.value() / static_cast<double>(n);
}

// ---------------------------------------------------------------- training

struct TrainConfig {
    std::uint64_t steps = 200;
    std::uint32_t batch_size = 4;  // sequences per step
    double learning_rate = 0.5;
    std::uint64_t seed = 0;
    std::uint64_t eval_every = 50;  // 0: evaluate only at the start and the end
    std::uint32_t dim = 32;
    objective::ObjectiveConfig objective;

    void validate() const {
        if (batch_size == 0) fail(ErrorCode::invalid_argument, "train: batch size must be positive");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
            fail(ErrorCode::invalid_argument, "train: learning rate must be positive");
        }
        if (dim == 0) fail(ErrorCode::invalid_argument, "train: model dimension must be positive");
    }
};

struct MetricsPoint {
    std::uint64_t step = 0;
    double train_loss = 0.0;  // loss of the batch that produced this step (NaN at step 0)
    Evaluation heldout;
};

struct TrainResult {
    ToyModel model;
    std::vector<MetricsPoint> metrics;
};

/// Plain SGD on the weighted objective. Batches walk a seeded per-epoch
/// permutation of the training sequences.
inline TrainResult train(const PackedStream& train_stream, std::span<const double> token_weights,
                         const PackedStream& heldout, std::uint32_t vocab_size, const TrainConfig& config) {
    config.validate();
    if (train_stream.sequences.empty()) fail(ErrorCode::invalid_argument, "train: empty training stream");
    if (token_weights.size() != train_stream.token_count()) {
        fail(ErrorCode::length_mismatch, "train: token weights do not align with the training stream");
    }
    const std::size_t L = train_stream.sequence_length;
    TrainResult result;
    result.model = ToyModel::initialize(vocab_size, config.dim, derive_seed(config.seed, 0));
    auto& model = result.model;

    auto record = [&](std::uint64_t step, double loss) {
        result.metrics.push_back({step, loss, evaluate_by_bucket(model, heldout)});
    };
    record(0, std::nan(""));
    if (config.steps == 0) return result;

    const std::size_t n = train_stream.sequences.size();
    std::vector<std::size_t> order(n);
    std::size_t cursor = n;
    std::uint64_t epoch = 0;
    std::vector<double> weights(config.batch_size * L);
    Batch batch;
    batch.sequence_length = train_stream.sequence_length;

    for (std::uint64_t step = 1; step <= config.steps; ++step) {
        batch.sequences.clear();
        for (std::uint32_t b = 0; b < config.batch_size; ++b) {
            if (cursor == n) {
                for (std::size_t i = 0; i < n; ++i) order[i] = i;
                Rng rng(derive_seed(config.seed, 1 + epoch++));
                rng.shuffle(std::span<std::size_t>(order));
                cursor = 0;
            }
            const std::size_t idx = order[cursor++];
            batch.sequences.push_back(&train_stream.sequences[idx]);
            std::copy_n(token_weights.begin() + static_cast<std::ptrdiff_t>(idx * L), L,
                        weights.begin() + static_cast<std::ptrdiff_t>(b * L));
        }
        batch.weights = std::span<const double>(weights);

        double loss = 0.0;
        try {
            const auto fwd = forward_loss(model, batch, config.objective);
            loss = fwd.loss;
            const auto grad = backward(model, batch, fwd.cache, config.objective);
            for (std::size_t k = 0; k < model.embedding.size(); ++k) model.embedding[k] -= config.learning_rate * grad.embedding[k];
            for (std::size_t k = 0; k < model.output.size(); ++k) model.output[k] -= config.learning_rate * grad.output[k];
            for (std::size_t k = 0; k < model.bias.size(); ++k) model.bias[k] -= config.learning_rate * grad.bias[k];
        } catch (const Error& e) {
            if (e.code() != ErrorCode::non_finite) throw;
            fail(ErrorCode::divergence, "train: diverged at step " + std::to_string(step) + ": " + e.what());
        }
        const bool last = step == config.steps;
        if (last || (config.eval_every && step % config.eval_every == 0)) record(step, loss);
    }
    return result;
}

struct PipelineArtifacts {
    PackedStream train_stream;
    PackedStream heldout_stream;
    weights::WeightTable table;
    std::vector<double> token_weights;
    TrainResult result;
};

/// Pack both corpora, derive the training stream's weights for `policy`, train.
inline PipelineArtifacts train_pipeline(const std::vector<corpus::Document>& train_docs,
                                        const std::vector<corpus::Document>& heldout_docs,
                                        const packer::PackPolicy& pack, const weights::WeightPolicy& policy,
                                        std::uint32_t vocab_size, const TrainConfig& config) {
    PipelineArtifacts a;
    a.train_stream = packer::pack_stream(train_docs, pack);
    a.heldout_stream = packer::pack_stream(heldout_docs, pack);
    a.table = weights::build_weight_table(a.train_stream, policy);
    a.token_weights = weights::assign_token_weights(a.train_stream, a.table, policy);
    a.result = train(a.train_stream, a.token_weights, a.heldout_stream, vocab_size, config);
    return a;
}

// ---------------------------------------------------------------- files

inline std::string format_metrics(const std::vector<MetricsPoint>& metrics) {
    std::ostringstream os;
    os.precision(17);
    os << "step\tseries\tbucket_lower_bound\tvalue\n";
    for (const auto& m : metrics) {
        if (m.step > 0) os << m.step << "\ttrain_loss\t-\t" << m.train_loss << "\n";
        os << m.step << "\theldout_total\t-\t" << m.heldout.mean_ce << "\n";
        for (const auto& b : m.heldout.buckets) {
            os << m.step << "\theldout_ce\t" << b.lower_bound << "\t" << b.mean_ce << "\n";
        }
    }
    return os.str();
}

inline constexpr std::string_view checkpoint_magic = "EXTM";
inline constexpr std::uint16_t checkpoint_version = 1;

inline std::string encode_checkpoint(const ToyModel& m) {
    binio::Writer w;
    w.put_magic(checkpoint_magic);
    w.put<std::uint16_t>(checkpoint_version);
    w.put<std::uint32_t>(m.vocab_size);
    w.put<std::uint32_t>(m.dim);
    for (double x : m.embedding) w.put<double>(x);
    for (double x : m.output) w.put<double>(x);
    for (double x : m.bias) w.put<double>(x);
    return w.take();
}

inline ToyModel decode_checkpoint(std::string_view bytes) {
    binio::Reader r(bytes, "checkpoint");
    r.expect_magic(checkpoint_magic);
    r.expect_version(checkpoint_version);
    ToyModel m;
    m.vocab_size = r.get<std::uint32_t>();
    m.dim = r.get<std::uint32_t>();
    const std::uint64_t n = static_cast<std::uint64_t>(m.vocab_size) * m.dim * 3 + m.vocab_size;
    if (r.remaining() != n * 8) fail(ErrorCode::format_error, "checkpoint: payload size does not match shape header");
    m.embedding.resize(static_cast<std::size_t>(m.vocab_size) * m.dim);
    m.output.resize(static_cast<std::size_t>(2) * m.dim * m.vocab_size);
    m.bias.resize(m.vocab_size);
    for (auto& x : m.embedding) x = r.get<double>();
    for (auto& x : m.output) x = r.get<double>();
    for (auto& x : m.bias) x = r.get<double>();
    return m;
}

}  // namespace exact::toylm
