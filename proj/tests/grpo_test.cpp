// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include <agentiad/grpo.hpp>

#include "oracles.hpp"

using namespace agentiad;

namespace {

RolloutGroup group_of(const std::vector<double>& totals, int tokens_each = 1) {
    RolloutGroup g;
    g.group_id = "g";
    for (std::size_t i = 0; i < totals.size(); ++i) {
        GroupEpisode e;
        e.episode_id = "e" + std::to_string(i);
        e.reward.total = totals[i];
        e.tokens.assign(static_cast<std::size_t>(tokens_each), TokenScore{-1.0, -1.0, true});
        g.episodes.push_back(e);
    }
    return g;
}

} // namespace

TEST(Advantages, HandCases) {
    const std::vector<double> r{1, 0, 1, 0};
    const auto raw = group_advantages(r, false);
    EXPECT_EQ(raw, (std::vector<double>{0.5, -0.5, 0.5, -0.5}));
    const auto norm = group_advantages(r, true);
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(norm[i], raw[i] / (0.5 + 1e-8), 1e-12);
    const auto two = group_advantages(std::vector<double>{2, 0}, false);
    EXPECT_EQ(two, (std::vector<double>{1.0, -1.0}));
    const auto flat = group_advantages(std::vector<double>{0.7, 0.7, 0.7}, true);
    for (double a : flat) EXPECT_EQ(a, 0.0);
}

TEST(Advantages, SumToZeroAndMatchOracle) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int g = 0; g < 1000; ++g) {
        std::vector<double> r(2 + rng() % 15);
        for (auto& v : r) v = u(rng);
        for (bool normalize : {false, true}) {
            const auto a = group_advantages(r, normalize);
            const auto o = oracle::advantages(r, normalize);
            double sum = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                sum += a[i];
                ASSERT_NEAR(a[i], o[i], 1e-12);
            }
            ASSERT_NEAR(sum, 0.0, 1e-9);
        }
    }
}

TEST(Surrogate, ClippingHandCases) {
    EXPECT_NEAR(clipped_term(1.5, 1.0, 0.2), 1.2, 1e-12);
    EXPECT_NEAR(clipped_term(0.5, 1.0, 0.2), 0.5, 1e-12);
    EXPECT_NEAR(clipped_term(0.5, -1.0, 0.2), -0.8, 1e-12);
    EXPECT_NEAR(clipped_term(1.5, -1.0, 0.2), -1.5, 1e-12);
    EXPECT_NEAR(clipped_term(1.0, 2.0, 0.2), 2.0, 1e-12);
    const std::vector<double> ratios{1.5, 0.5}, adv{1.0, -1.0};
    EXPECT_NEAR(clipped_surrogate(ratios, adv, 0.2), (1.2 - 0.8) / 2.0, 1e-12);
    EXPECT_THROW(clipped_term(0.0, 1.0, 0.2), ContractViolation);
    EXPECT_THROW(clipped_surrogate(ratios, std::vector<double>{1.0}, 0.2), ContractViolation);
}

TEST(Kl, SingleTokenValue) {
    // ref/policy ratio of exp(-0.5)
    EXPECT_NEAR(kl_estimate(TokenScore{-1.0, -1.5, true}), 0.10653, 1e-5);
    EXPECT_EQ(kl_estimate(TokenScore{-2.0, -2.0, true}), 0.0);
}

TEST(Kl, NonNegativeAndMatchesOracle) {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-12.0, 0.0);
    for (int i = 0; i < 10000; ++i) {
        const TokenScore t{u(rng), u(rng), true};
        const double k = kl_estimate(t);
        ASSERT_GE(k, 0.0);
        ASSERT_NEAR(k, oracle::kl_scalar(t.logp_policy, t.logp_ref), 1e-9 * std::max(1.0, k));
    }
}

TEST(Objective, HandCase) {
    auto g = group_of({1.0, 0.0});
    g.episodes[0].tokens = {TokenScore{-1.0, -1.5, true}, TokenScore{-1.0, -1.0, false}};
    g.episodes[1].tokens = {TokenScore{-2.0, -2.0, true}};
    GrpoConfig cfg;
    cfg.normalize_std = false;
    compute_advantages(g, cfg);
    ASSERT_EQ(g.advantages, (std::vector<double>{0.5, -0.5}));
    // token 1: ratio e^0.5 > 1.2, A=0.5 -> 0.6; token 2: ratio 1, A=-0.5 -> -0.5
    const double surrogate = (0.6 - 0.5) / 2.0;
    const double kl = (oracle::kl_scalar(-1.0, -1.5) + 0.0) / 2.0;
    EXPECT_NEAR(grpo_objective(g, cfg), surrogate - 0.1 * kl, 1e-12);

    auto bare = group_of({1.0, 0.0});
    EXPECT_THROW(grpo_objective(bare, cfg), ContractViolation);
    for (auto& e : bare.episodes) e.tokens.front().supervised = false;
    compute_advantages(bare, cfg);
    EXPECT_THROW(grpo_objective(bare, cfg), ContractViolation);
}

TEST(Filter, ZeroAdvantageGroups) {
    EXPECT_FALSE(filter_zero_advantage(group_of({1.0, 1.0, 1.0, 1.0})).has_value());
    EXPECT_FALSE(filter_zero_advantage(group_of({2.3, 2.3 + 1e-12})).has_value());
    EXPECT_TRUE(filter_zero_advantage(group_of({1.0, 0.0})).has_value());
    EXPECT_TRUE(filter_zero_advantage(group_of({0.0, 0.0, 0.0, 1e-6})).has_value());
}

TEST(Diversity, FormsGiveIdenticalAdvantages) {
    std::mt19937_64 rng(17);
    RewardCoefficients minus_one, plain;
    plain.diversity_form = DiversityForm::query_rate;
    SampleRecord s;
    s.id = "s";
    s.class_name = "tile";
    s.image_path = "x.png";
    s.y_gt = Label::anomalous;
    s.c_gt = "crack";
    s.gt_bbox = BBox{0.2, 0.2, 0.4, 0.4};
    for (int g = 0; g < 100; ++g) {
        const int k = 2 + static_cast<int>(rng() % 7);
        std::vector<EpisodeSummary> eps(static_cast<std::size_t>(k));
        int queried = 0;
        for (auto& e : eps) {
            const int steps = 1 + static_cast<int>(rng() % 3);
            for (int i = 0; i < steps; ++i) e.steps.push_back({static_cast<int>(rng() % 3), std::nullopt});
            e.format_valid = true;
            e.steps.back().emitted_answer = rng() % 2 == 0;
            e.final_answer = FinalAnswer{true, "crack", {"d"}};
            e.used_query = rng() % 2 == 0;
            queried += e.used_query;
        }
        const GroupStats stats{static_cast<double>(queried) / k};
        std::vector<double> ra, rb;
        for (const auto& e : eps) {
            ra.push_back(total_reward(e, s, stats, minus_one).total);
            rb.push_back(total_reward(e, s, stats, plain).total);
        }
        for (bool normalize : {false, true}) {
            const auto a = group_advantages(ra, normalize), b = group_advantages(rb, normalize);
            for (std::size_t i = 0; i < a.size(); ++i) ASSERT_NEAR(a[i], b[i], 1e-12);
        }
    }
}

TEST(Config, Validation) {
    GrpoConfig c;
    EXPECT_NO_THROW(c.check());
    c.epsilon = 1.0;
    EXPECT_THROW(c.check(), ContractViolation);
    c = GrpoConfig{};
    c.group_size = 1;
    EXPECT_THROW(c.check(), ContractViolation);
}
