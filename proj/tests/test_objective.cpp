#include <gtest/gtest.h>

#include "support.hpp"

using namespace exact;
using namespace exact::objective;

TEST(Objective, IdentityWeightsGiveMaskedMean) {
    const std::vector<double> ce{1.0, 2.0, 3.0, 4.0};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1};
    const std::vector<double> w(4, 1.0);
    EXPECT_DOUBLE_EQ(weighted_loss(ce, mask, w), 7.0 / 3.0);
    EXPECT_DOUBLE_EQ(weighted_loss(ce, mask, w, {Normalization::weighted_mask_sum}), 7.0 / 3.0);
}

TEST(Objective, BothNormalizations) {
    const std::vector<double> ce{1.0, 2.0, 4.0};
    const std::vector<std::uint8_t> mask{1, 1, 1};
    const std::vector<double> w{1.0, 2.0, 0.5};
    // numerator 1 + 4 + 2 = 7
    EXPECT_DOUBLE_EQ(weighted_loss(ce, mask, w), 7.0 / 3.0);
    EXPECT_DOUBLE_EQ(weighted_loss(ce, mask, w, {Normalization::weighted_mask_sum}), 7.0 / 3.5);
}

TEST(Objective, AllMaskedIsAnError) {
    const std::vector<double> ce{1.0, 2.0};
    const std::vector<std::uint8_t> mask{0, 0};
    const std::vector<double> w{1.0, 1.0};
    try {
        weighted_loss(ce, mask, w);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::all_masked);
    }
}

TEST(Objective, InputErrors) {
    const std::vector<std::uint8_t> mask{1, 1};
    const std::vector<double> w{1.0, 1.0};
    EXPECT_THROW(weighted_loss(std::vector<double>{1.0}, mask, w), Error);
    EXPECT_THROW(weighted_loss(std::vector<double>{1.0, std::nan("")}, mask, w), Error);
    EXPECT_THROW(weighted_loss(std::vector<double>{1.0, -1.0}, mask, w), Error);
    EXPECT_THROW(weighted_loss(std::vector<double>{1.0, 1.0}, mask, std::vector<double>{1.0, -0.5}), Error);
    try {
        weighted_loss(std::vector<double>{1.0, 1.0}, mask, std::vector<double>{1.0, std::nan("")});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::non_finite);
    }
}

TEST(Objective, NaNRejectedEvenUnderZeroMask) {
    // A NaN CE is rejected even under mask 0: dumps must be clean everywhere.
    const std::vector<std::uint8_t> mask{1, 0};
    const std::vector<double> w{1.0, 1.0};
    EXPECT_THROW(weighted_loss(std::vector<double>{1.0, std::nan("")}, mask, w), Error);
}

TEST(Objective, LinearityInCE) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(200);
        std::vector<double> a(n);
        std::vector<double> b(n);
        std::vector<double> w(n);
        std::vector<std::uint8_t> m(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = rng.uniform(0, 5);
            b[i] = rng.uniform(0, 5);
            w[i] = rng.uniform(0.5, 2);
            m[i] = rng.below(4) != 0;
        }
        m[0] = 1;
        const double s = rng.uniform(0.1, 3);
        const double t = rng.uniform(0.1, 3);
        std::vector<double> mix(n);
        for (std::size_t i = 0; i < n; ++i) mix[i] = s * a[i] + t * b[i];
        for (auto norm : {Normalization::mask_sum, Normalization::weighted_mask_sum}) {
            const double lhs = weighted_loss(mix, m, w, {norm});
            const double rhs = s * weighted_loss(a, m, w, {norm}) + t * weighted_loss(b, m, w, {norm});
            EXPECT_NEAR(lhs, rhs, 1e-12 * std::max(1.0, std::fabs(rhs)));
        }
    }
}

TEST(Objective, PermutationInvariance) {
    Rng rng(8);
    const std::size_t n = 1000;
    std::vector<double> ce(n);
    std::vector<double> w(n);
    std::vector<std::uint8_t> m(n);
    for (std::size_t i = 0; i < n; ++i) {
        ce[i] = rng.uniform(0, 10);
        w[i] = rng.uniform(0.8, 1.6);
        m[i] = rng.below(3) != 0;
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<std::size_t>(perm));
    std::vector<double> ce2(n);
    std::vector<double> w2(n);
    std::vector<std::uint8_t> m2(n);
    for (std::size_t i = 0; i < n; ++i) {
        ce2[i] = ce[perm[i]];
        w2[i] = w[perm[i]];
        m2[i] = m[perm[i]];
    }
    for (auto norm : {Normalization::mask_sum, Normalization::weighted_mask_sum}) {
        EXPECT_NEAR(weighted_loss(ce, m, w, {norm}), weighted_loss(ce2, m2, w2, {norm}), 1e-13);
    }
}

TEST(Objective, GradientScaleReproducesLoss) {
    const std::vector<double> ce{0.5, 2.0, 1.5, 3.0};
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    const std::vector<double> w{1.2, 1.0, 0.7, 1.9};
    for (auto norm : {Normalization::mask_sum, Normalization::weighted_mask_sum}) {
        const auto g = gradient_scale(mask, w, {norm});
        EXPECT_EQ(g[1], 0.0);
        double dot = 0;
        for (std::size_t i = 0; i < 4; ++i) dot += g[i] * ce[i];
        EXPECT_NEAR(dot, weighted_loss(ce, mask, w, {norm}), 1e-15);
    }
}

TEST(Objective, ParseNormalization) {
    EXPECT_EQ(parse_normalization("mask_sum"), Normalization::mask_sum);
    EXPECT_EQ(parse_normalization("weighted_mask_sum"), Normalization::weighted_mask_sum);
    EXPECT_THROW(parse_normalization("mean"), Error);
}

TEST(CeDump, RoundTripAndLengthCheck) {
    const std::vector<double> values{0.0, 1.5, 2.25, 3.0, 4.0, 5.5};
    const auto bytes = encode_ce_dump(values, 3);
    EXPECT_EQ(bytes.substr(0, 4), "EXCE");
    EXPECT_EQ(bytes.size(), 4u + 2 + 8 + 6 * 8);
    EXPECT_EQ(decode_ce_dump(bytes, 3), values);
    try {
        decode_ce_dump(bytes, 4);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::length_mismatch);
    }
    EXPECT_THROW(encode_ce_dump(values, 4), Error);
}
