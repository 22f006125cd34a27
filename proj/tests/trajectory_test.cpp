// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <agentiad/synthetic.hpp>
#include <agentiad/trajectory.hpp>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace agentiad;
namespace fs = std::filesystem;

namespace {

struct Fixture {
    fs::path dir;
    synthetic::Bundle bundle;
    std::vector<SampleRecord> samples;
    ExemplarIndex exemplars;
    TrajectoryContext ctx;

    explicit Fixture(const std::string& tag) : dir(testutil::scratch_dir(tag)) {
        bundle = synthetic::generate(dir / "data");
        samples = load_manifest(bundle.manifest);
        exemplars = build_exemplar_index(bundle.exemplars);
        ctx.workdir = dir / "work";
        ctx.exemplars = &exemplars;
        ctx.anomaly_labels = candidate_labels(samples);
        ctx.retry = {1, std::chrono::milliseconds(0)};
    }
};

} // namespace

TEST(MaskBbox, SinglePixel) {
    Image m(100, 100, 1);
    m.at(10, 5)[0] = 255;
    const auto b = mask_to_bbox(m);
    EXPECT_NEAR(b.x1, 0.10, 1e-12);
    EXPECT_NEAR(b.y1, 0.05, 1e-12);
    EXPECT_NEAR(b.x2, 0.11, 1e-12);
    EXPECT_NEAR(b.y2, 0.06, 1e-12);
    EXPECT_EQ(b, oracle::scan_mask(m));
}

TEST(MaskBbox, TwoBlobsGiveUnion) {
    Image m(50, 40, 1);
    for (int y = 2; y < 6; ++y)
        for (int x = 3; x < 9; ++x) m.at(x, y)[0] = 200;
    for (int y = 30; y < 35; ++y)
        for (int x = 40; x < 44; ++x) m.at(x, y)[0] = 255;
    m.at(20, 20)[0] = 127; // at threshold, not counted
    EXPECT_EQ(mask_to_bbox(m), (BBox{3 / 50.0, 2 / 40.0, 44 / 50.0, 35 / 40.0}));
    EXPECT_EQ(mask_to_bbox(m), oracle::scan_mask(m));
    EXPECT_THROW(mask_to_bbox(Image(8, 8, 1)), LoadError);
}

TEST(MaskBbox, SyntheticMasksMatchOracle) {
    Fixture f("traj-masks");
    int checked = 0;
    for (const auto& s : f.samples) {
        if (!s.mask_path) continue;
        const auto img = read_image(*s.mask_path);
        EXPECT_EQ(mask_to_bbox(img), oracle::scan_mask(img)) << s.id;
        ++checked;
    }
    EXPECT_EQ(checked, 6);
}

TEST(Roi, ProposalRetryAndFallback) {
    Fixture f("traj-roi");
    const auto& normal = f.samples.front();
    ASSERT_FALSE(normal.anomalous());
    MockTextEndpoint mock;
    const auto ok = propose_normal_roi(normal, mock);
    EXPECT_EQ(ok.bbox, (BBox{0.2, 0.3, 0.6, 0.7}));
    EXPECT_FALSE(ok.fallback);
    EXPECT_EQ(ok.attempts, 1);

    SequenceEndpoint second({"no idea", "look at [0.1, 0.1, 0.4, 0.5] please"});
    const auto retried = propose_normal_roi(normal, second);
    EXPECT_EQ(retried.attempts, 2);
    EXPECT_EQ(retried.bbox, (BBox{0.1, 0.1, 0.4, 0.5}));

    SequenceEndpoint garbage({"nothing useful", "[0.5, 0.5, 0.5, 0.5]", "[1, 2]"});
    const auto fb = propose_normal_roi(normal, garbage);
    EXPECT_TRUE(fb.fallback);
    EXPECT_EQ(fb.bbox, fallback_roi);
    EXPECT_EQ(garbage.calls(), 3);
}

TEST(SftLoss, MaskedTokens) {
    const std::vector<TokenScore> tokens{{-1.0, 0, true}, {-2.0, 0, false}, {-4.0, 0, true}, {-8.0, 0, false}};
    EXPECT_DOUBLE_EQ(masked_sft_loss(tokens), 5.0);
    const std::vector<TokenScore> three{{-1.0, 0, false}, {-2.0, 0, true}, {-3.0, 0, true}};
    EXPECT_DOUBLE_EQ(masked_sft_loss(three), 5.0);
    const std::vector<TokenScore> none{{-1.0, 0, false}, {-2.0, 0, false}};
    EXPECT_EQ(masked_sft_loss(none), 0.0);
}

TEST(Trajectories, InvariantsOnSyntheticSet) {
    Fixture f("traj-build");
    MockTextEndpoint mock;
    for (auto tax : {Taxonomy::pz, Taxonomy::pz_cr}) {
        for (const auto& s : f.samples) {
            const auto r = build_trajectory(s, tax, mock, f.ctx);
            ASSERT_TRUE(r.trajectory.has_value()) << s.id << (r.log.empty() ? "" : ": " + r.log.front());
            const auto& t = *r.trajectory;
            EXPECT_TRUE(check_trajectory(t).empty()) << s.id << ": " << join(check_trajectory(t), "; ");
            EXPECT_EQ(t.turns.size(), tax == Taxonomy::pz ? 5u : 7u);
            EXPECT_EQ(t.turns.front().role, "system");
            if (s.anomalous()) {
                EXPECT_EQ(t.roi_bbox, mask_to_bbox(*s.mask_path));
            }
            const auto round = trajectory_from_json(nlohmann::ordered_json::parse(to_json(t).dump()));
            EXPECT_EQ(to_json(round).dump(), to_json(t).dump());
        }
    }
}

TEST(Trajectories, CheckerRejectsBrokenSupervision) {
    Fixture f("traj-check");
    MockTextEndpoint mock;
    auto t = *build_trajectory(f.samples.back(), Taxonomy::pz_cr, mock, f.ctx).trajectory;
    ASSERT_TRUE(check_trajectory(t).empty());
    auto unsup = t;
    unsup.turns.back().supervised = false;
    EXPECT_FALSE(check_trajectory(unsup).empty());
    auto extra = t;
    extra.turns[1].supervised = true;
    EXPECT_FALSE(check_trajectory(extra).empty());
    auto mislabeled = t;
    mislabeled.taxonomy = Taxonomy::pz;
    EXPECT_FALSE(check_trajectory(mislabeled).empty());
}

TEST(Trajectories, Deterministic) {
    Fixture f("traj-det");
    MockTextEndpoint mock;
    for (const auto& s : f.samples) {
        const auto a = build_trajectory(s, Taxonomy::pz_cr, mock, f.ctx);
        const auto b = build_trajectory(s, Taxonomy::pz_cr, mock, f.ctx);
        ASSERT_TRUE(a.trajectory && b.trajectory);
        EXPECT_EQ(to_json(*a.trajectory).dump(), to_json(*b.trajectory).dump());
    }
    EXPECT_EQ(choose_taxonomy("x", 0.07, 1), choose_taxonomy("x", 0.07, 1));
}

TEST(Trajectories, EndpointFailureSkipsSample) {
    Fixture f("traj-fail");
    FailingEndpoint dead;
    const auto r = build_trajectory(f.samples.back(), Taxonomy::pz, dead, f.ctx);
    EXPECT_FALSE(r.trajectory.has_value());
    ASSERT_EQ(r.log.size(), 1u);
    EXPECT_NE(r.log.front().find("endpoint failure"), std::string::npos);
}

TEST(Taxonomy, MixedFraction) {
    int cr = 0;
    for (int i = 0; i < 20000; ++i) cr += choose_taxonomy("sample_" + std::to_string(i), 0.07, 42) == Taxonomy::pz_cr;
    EXPECT_NEAR(cr / 20000.0, 0.07, 0.01);
}
