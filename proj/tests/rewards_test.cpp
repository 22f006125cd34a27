// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <random>

#include <gtest/gtest.h>

#include <agentiad/rewards.hpp>

#include "oracles.hpp"

using namespace agentiad;

namespace {

constexpr double tol = 1e-9;

SampleRecord gt_sample(bool anomalous, const std::string& type = "scratch", BBox box = {0.2, 0.2, 0.6, 0.6}) {
    SampleRecord s;
    s.id = "s";
    s.class_name = "bottle";
    s.image_path = "x.png";
    if (anomalous) {
        s.y_gt = Label::anomalous;
        s.c_gt = type;
        s.gt_bbox = box;
    }
    return s;
}

EpisodeSummary answered(bool verdict, const std::string& type, std::vector<StepStat> steps) {
    EpisodeSummary e;
    e.steps = std::move(steps);
    e.format_valid = true;
    e.final_answer = verdict ? FinalAnswer{true, type, {"x"}} : FinalAnswer::normal();
    return e;
}

} // namespace

TEST(Iou, HandCases) {
    EXPECT_DOUBLE_EQ(iou({0.1, 0.2, 0.3, 0.4}, {0.1, 0.2, 0.3, 0.4}), 1.0);
    EXPECT_DOUBLE_EQ(iou({0, 0, 0.4, 0.4}, {0.5, 0.5, 1, 1}), 0.0);
    EXPECT_NEAR(iou({0, 0, 0.5, 0.5}, {0.25, 0.25, 0.75, 0.75}), 0.0625 / 0.4375, tol);
    EXPECT_NEAR(oracle::grid_iou({0, 0, 0.5, 0.5}, {0.25, 0.25, 0.75, 0.75}), 0.0625 / 0.4375, 1e-3);
    EXPECT_DOUBLE_EQ(iou({0.5, 0.5, 0.5, 0.5}, {0, 0, 1, 1}), 0.0);
}

TEST(Iou, MatchesPixelGridOracle) {
    std::mt19937_64 rng(2024);
    auto coord = [&] { return static_cast<double>(rng() % 1001) / 1000.0; };
    auto box = [&] {
        double a = coord(), b = coord(), c = coord(), d = coord();
        if (a > b) std::swap(a, b);
        if (c > d) std::swap(c, d);
        return BBox{a, c, b, d};
    };
    for (int i = 0; i < 1000; ++i) {
        const auto a = box();
        const auto b = i % 4 == 0 ? BBox{std::max(0.0, a.x1 - 0.05), a.y1, a.x2, std::min(1.0, a.y2 + 0.05)} : box();
        EXPECT_NEAR(iou(a, b), oracle::grid_iou(a, b), 1e-3) << format_bbox(a) << " vs " << format_bbox(b);
        EXPECT_EQ(iou(a, b), iou(b, a));
        if (a.area() > 0) {
            EXPECT_EQ(iou(a, a), 1.0);
        }
    }
}

TEST(IouReward, ThresholdBranches) {
    const RewardCoefficients c;
    const BBox gt{0, 0, 1, 1};
    EXPECT_NEAR(iou_reward(BBox{0, 0, 0.6, 1}, gt, c), 1.0, tol);
    EXPECT_NEAR(iou_reward(BBox{0, 0, 0.3, 1}, gt, c), 0.3, tol);
    EXPECT_NEAR(iou_reward(BBox{0, 0, 0.5, 1}, gt, c), 0.5, tol);
    EXPECT_EQ(iou_reward(std::nullopt, gt, c), 0.0);
    EXPECT_EQ(iou_reward(gt, std::nullopt, c), 0.0);
}

TEST(Accuracy, Indicators) {
    const auto gt = gt_sample(true);
    EXPECT_EQ(accuracy_reward(answered(true, "scratch", {{0, true}}), gt), 1.0);
    EXPECT_EQ(accuracy_reward(answered(false, "none", {{0, false}}), gt), 0.0);
    auto invalid = answered(true, "scratch", {{0, true}});
    invalid.format_valid = false;
    EXPECT_EQ(accuracy_reward(invalid, gt), 0.0);
}

TEST(TypeReward, Cases) {
    const RewardCoefficients c;
    EXPECT_NEAR(type_reward(answered(true, "scratch", {{0, true}}), gt_sample(true), c), 0.3, tol);
    EXPECT_NEAR(type_reward(answered(true, " Scratch ", {{0, true}}), gt_sample(true), c), 0.3, tol);
    EXPECT_EQ(type_reward(answered(true, "dent", {{0, true}}), gt_sample(true), c), 0.0);
    EXPECT_EQ(type_reward(answered(true, "scratch", {{0, false}}), gt_sample(false), c), 0.0);
    RewardCoefficients table;
    table.lambda_type = 0.1;
    EXPECT_NEAR(type_reward(answered(true, "scratch", {{0, true}}), gt_sample(true), table), 0.1, tol);
}

TEST(Behavior, HandCases) {
    const RewardCoefficients c;
    EXPECT_NEAR(behavior_reward(answered(true, "x", {{1, true}}), 1.0, c), 1.0, tol);
    EXPECT_NEAR(behavior_reward(answered(true, "x", {{3, true}}), 1.0, c), 0.9, tol);
    EXPECT_NEAR(behavior_reward(answered(true, "x", {{1, false}}), 0.0, c), -0.5, tol);
    // tool-only step then a correct answer, q = 0: (-0.5 + 0.5) / 2
    EXPECT_NEAR(behavior_reward(answered(true, "x", {{1, std::nullopt}, {0, true}}), 0.0, c), 0.0, tol);
    EXPECT_THROW(behavior_reward(EpisodeSummary{}, 0.5, c), ContractViolation);
    EXPECT_THROW(behavior_reward(answered(true, "x", {{1, true}}), 1.5, c), ContractViolation);
}

TEST(Total, Assembly) {
    RewardCoefficients c;
    EXPECT_EQ(assemble_reward(0, 0, 0, 0, c).total, 0.0);
    EXPECT_NEAR(assemble_reward(1, 1, 0.3, 1, c).total, 3.3, tol);
    c.alpha = 2.0;
    EXPECT_NEAR(assemble_reward(1, 1, 0.3, 1, c).total, 5.6, tol);
}

TEST(Total, DefectEpisodeEndToEnd) {
    const RewardCoefficients c;
    const auto gt = gt_sample(true);
    auto e = answered(true, "scratch", {{1, std::nullopt}, {0, true}});
    e.pred_bbox = gt.gt_bbox;
    const auto r = total_reward(e, gt, GroupStats{0.0}, c);
    EXPECT_NEAR(r.r_acc, 1.0, tol);
    EXPECT_NEAR(r.r_iou, 1.0, tol);
    EXPECT_NEAR(r.r_type, 0.3, tol);
    EXPECT_NEAR(r.r_perc, 2.3, tol);
    EXPECT_NEAR(r.r_beh, 0.0, tol);
    EXPECT_NEAR(r.total, 2.3, tol);
}

TEST(Total, DecompositionIdentityRandomized) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 10000; ++i) {
        RewardCoefficients c;
        c.alpha = 2.0 * u(rng);
        c.beta_beh = 2.0 * u(rng);
        c.lambda_type = u(rng);
        const bool anomalous = rng() % 2;
        const auto gt = gt_sample(anomalous, "scratch", {0.1, 0.1, 0.1 + 0.8 * u(rng), 0.9});
        EpisodeSummary e;
        const int steps = 1 + static_cast<int>(rng() % 4);
        for (int s = 0; s < steps; ++s) {
            StepStat st{static_cast<int>(rng() % 4), std::nullopt};
            if (s == steps - 1 && rng() % 3) st.emitted_answer = rng() % 2 == 0;
            e.steps.push_back(st);
        }
        e.format_valid = rng() % 5 != 0;
        if (rng() % 4) e.final_answer = rng() % 2 ? FinalAnswer{true, rng() % 2 ? "scratch" : "dent", {"d"}} : FinalAnswer::normal();
        if (rng() % 3) {
            double a = u(rng), b = u(rng);
            if (a > b) std::swap(a, b);
            e.pred_bbox = BBox{a, a, b, b};
        }
        const double q = static_cast<double>(rng() % 9) / 8.0;
        const auto r = total_reward(e, gt, GroupStats{q}, c);

        // independent recomputation
        const double acc = (e.format_valid && e.final_answer && e.final_answer->anomaly_present == anomalous) ? 1.0 : 0.0;
        double iou_v = 0.0;
        if (e.pred_bbox && gt.gt_bbox) {
            const auto& p = *e.pred_bbox;
            const auto& g = *gt.gt_bbox;
            const double iw = std::max(0.0, std::min(p.x2, g.x2) - std::max(p.x1, g.x1));
            const double ih = std::max(0.0, std::min(p.y2, g.y2) - std::max(p.y1, g.y1));
            const double uni = (p.x2 - p.x1) * (p.y2 - p.y1) + (g.x2 - g.x1) * (g.y2 - g.y1) - iw * ih;
            const double v = uni > 0 ? iw * ih / uni : 0.0;
            iou_v = v > 0.5 ? 1.0 : v;
        }
        const double type = (anomalous && e.final_answer && e.final_answer->top_anomaly == "scratch") ? c.lambda_type : 0.0;
        double beh = 0.0;
        for (const auto& st : e.steps) {
            beh += (st.emitted_answer.value_or(false) ? 1.0 : 0.0) + 0.5 * (q - 1.0) - 0.05 * std::max(0, st.n_tool_calls - 1);
        }
        beh /= static_cast<double>(e.steps.size());

        ASSERT_NEAR(r.r_acc, acc, tol);
        ASSERT_NEAR(r.r_iou, iou_v, tol);
        ASSERT_NEAR(r.r_type, type, tol);
        ASSERT_NEAR(r.r_beh, beh, tol);
        ASSERT_NEAR(r.r_perc, r.r_acc + r.r_iou + r.r_type, tol);
        ASSERT_NEAR(r.total, c.alpha * r.r_perc + c.beta_beh * r.r_beh, tol);
    }
}

TEST(Json, RoundTrip) {
    const auto r = assemble_reward(1, 0.25, 0.3, -0.125, RewardCoefficients{});
    EXPECT_EQ(reward_from_json(nlohmann::json::parse(to_json(r).dump())), r);
    auto e = answered(true, "scratch", {{1, std::nullopt}, {0, true}});
    e.pred_bbox = BBox{0.1, 0.2, 0.3, 0.4};
    e.used_query = true;
    EXPECT_EQ(summary_from_json(nlohmann::json::parse(to_json(e).dump())), e);
}
